use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fae_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use fae_core::cmapss::{
    fit_normalizer, parse_cmapss_str, prepare, synth_generate, to_cmapss_string, EngineRecord, LabelingConvention,
    SENSORS, SETTINGS, SYNTH_BASELINE, SYNTH_SIGMA,
};
use fae_core::detector::{calibrate_threshold, detect, reconstruction_error};
use fae_core::fisher_loss::{FaeConfig, LossKind};
use fae_core::model::{Model, ParameterSet};
use fae_core::networks::{encoder_apply, mlp_forward};
use fae_core::trainer::{adam_step, evaluate_loss, train, AdamState};
use fae_core::Array;

fn linear_2d(n: usize, seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t: f64 = StandardNormal.sample(&mut rng);
        let e: f64 = StandardNormal.sample(&mut rng);
        data.push(t);
        data.push(2.0 * t + 0.05 * e);
    }
    Array::matrix(n, 2, data)
}

#[test]
fn linear_data_loss_halves() {
    let data = linear_2d(256, 1);
    let cfg = FaeConfig::default();
    let (initial, _) = train(&data, None, &FaeConfig { epochs: 0, ..cfg.clone() }, LossKind::Fae).unwrap();
    let (trained, history) = train(&data, None, &cfg, LossKind::Fae).unwrap();
    let before = evaluate_loss(LossKind::Fae, &data, &initial, &cfg).unwrap().total;
    let after = evaluate_loss(LossKind::Fae, &data, &trained, &cfg).unwrap().total;
    assert_eq!(history.epochs.len(), 50);
    assert!(after < 0.5 * before, "initial {before}, final {after}");
}

#[test]
fn adam_zero_gradient_and_symmetry() {
    let mut p = ParameterSet::new();
    p.insert("a", Array::vector(vec![0.5, -1.0]));
    p.insert("b", Array::vector(vec![0.5, -1.0]));
    let mut state = AdamState::new(1e-3);
    let mut g = ParameterSet::new();
    g.insert("a", Array::vector(vec![0.3, -2.0]));
    g.insert("b", Array::vector(vec![0.3, -2.0]));
    adam_step(&mut p, &g, &mut state).unwrap();
    assert_eq!(p.get("a"), p.get("b"));

    let snapshot = p.clone();
    let zeros = g.zeros_like();
    adam_step(&mut p, &zeros, &mut state).unwrap();
    // momentum keeps moving the parameters, in the same direction as before
    let moved = p.get("a").unwrap().data()[0] - snapshot.get("a").unwrap().data()[0];
    assert!(moved < 0.0);
    assert_eq!(state.t, 2);

    let mut fresh = AdamState::new(1e-3);
    let mut q = snapshot.clone();
    adam_step(&mut q, &zeros, &mut fresh).unwrap();
    assert_eq!(q, snapshot);

    let mut bad = ParameterSet::new();
    bad.insert("a", Array::vector(vec![1.0]));
    assert!(adam_step(&mut q, &bad, &mut fresh).is_err());
}

#[test]
fn trained_prior_weights_stay_on_simplex() {
    let data = linear_2d(64, 2);
    let cfg = FaeConfig {
        epochs: 3,
        ..FaeConfig::default()
    };
    let (model, _) = train(&data, None, &cfg, LossKind::Fae).unwrap();
    let w = model.prior.weights();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.iter().all(|&v| v > 0.0));
}

#[test]
fn reconstruction_error_matches_recompute() {
    let data = linear_2d(64, 3);
    let cfg = FaeConfig {
        epochs: 2,
        ..FaeConfig::default()
    };
    let (model, _) = train(&data, None, &cfg, LossKind::Fae).unwrap();
    for i in 0..data.rows() {
        let x = data.row(i);
        let mu = encoder_apply(&model.encoder, x).unwrap().mu;
        let r = mlp_forward(&model.decoder, &mu).unwrap();
        let oracle: f64 = x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((reconstruction_error(&model, x).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn generator_drift_reaches_target() {
    let n_units = 100;
    let recs = synth_generate(n_units, 120, 5.0, 11);
    let last: Vec<&EngineRecord> = recs.iter().filter(|r| r.cycle == 120).collect();
    assert_eq!(last.len(), n_units as usize);
    let mut pooled = 0.0;
    for j in 0..SENSORS {
        let mean = last.iter().map(|r| r.sensors[j]).sum::<f64>() / n_units as f64;
        let shift = (mean - SYNTH_BASELINE[j]) / SYNTH_SIGMA[j];
        // standard error of one sensor's mean is 0.1 sigma
        assert!((shift - 5.0).abs() < 0.4, "sensor {j}: {shift}");
        pooled += shift / SENSORS as f64;
    }
    assert!((pooled - 5.0).abs() < 0.2, "{pooled}");
}

#[test]
fn generator_without_drift_is_stationary() {
    let recs = synth_generate(100, 100, 0.0, 12);
    let window = |lo: u32, hi: u32| -> Vec<EngineRecord> {
        recs.iter().filter(|r| r.cycle >= lo && r.cycle <= hi).cloned().collect()
    };
    let early = fit_normalizer(&window(1, 30)).unwrap();
    let late = fit_normalizer(&window(71, 100)).unwrap();
    for j in 0..SENSORS {
        let d = (early.mean[j] - late.mean[j]).abs() / SYNTH_SIGMA[j];
        assert!(d < 0.1, "sensor {j}: {d}");
        let r = early.std[j] / late.std[j];
        assert!((r - 1.0).abs() < 0.1, "sensor {j}: {r}");
    }
}

#[test]
fn prepared_fixture_shapes() {
    let recs = synth_generate(10, 120, 5.0, 7);
    let p = prepare(&recs, "synthetic", LabelingConvention::default(), 2).unwrap();
    assert_eq!(p.normal.len(), 600);
    assert_eq!(p.train.len(), 1200);
    assert_eq!(p.eval.len(), 600);
    let labels = p.eval.labels.as_ref().unwrap();
    assert_eq!(labels.iter().filter(|&&l| l).count(), 300);
    assert_eq!(p.train.provenance.augmentation_factor, 2);
    assert_eq!(p.eval.provenance.labeling, Some(LabelingConvention::default()));
}

#[test]
fn checkpoint_file_round_trip() {
    let data = linear_2d(32, 4);
    let cfg = FaeConfig {
        epochs: 1,
        latent_dim: 3,
        ..FaeConfig::default()
    };
    let (model, _) = train(&data, None, &cfg, LossKind::Vae).unwrap();
    let errors: Vec<f64> = (0..data.rows())
        .map(|i| reconstruction_error(&model, data.row(i)).unwrap())
        .collect();
    let mut ckpt = Checkpoint::new(model, cfg, LossKind::Vae);
    ckpt.calibration_errors = Some(errors.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fae");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.meta.dims.latent, 3);
    assert_eq!(
        calibrate_threshold(back.calibration_errors.as_ref().unwrap(), 90.0).unwrap(),
        calibrate_threshold(&errors, 90.0).unwrap()
    );
}

#[test]
fn detection_on_prepared_split() {
    let recs = synth_generate(6, 80, 5.0, 5);
    let p = prepare(&recs, "synthetic", LabelingConvention::default(), 1).unwrap();
    let model = Model::zeros(FaeConfig::default().dims(SENSORS));
    let report = detect(&model, &p.eval, -1.0).unwrap();
    assert!(report.flags.iter().all(|&f| f));
    let m = report.metrics.unwrap();
    assert_eq!(m.recall, 1.0);
    assert_eq!(m.tp + m.fp, p.eval.len());
}

fn record() -> impl Strategy<Value = ([f64; SETTINGS], [f64; SENSORS])> {
    let v = -1e6f64..1e6;
    (prop::array::uniform3(v.clone()), prop::collection::vec(v, SENSORS)).prop_map(|(s, v)| {
        let mut sensors = [0.0; SENSORS];
        sensors.copy_from_slice(&v);
        (s, sensors)
    })
}

proptest! {
    #[test]
    fn cmapss_text_round_trip(rows in prop::collection::vec(record(), 1..20), units in 1u32..4) {
        let recs: Vec<EngineRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (op_settings, sensors))| EngineRecord {
                unit: (i as u32 % units) + 1,
                cycle: i as u32 / units + 1,
                op_settings,
                sensors,
            })
            .collect();
        let text = to_cmapss_string(&recs);
        prop_assert_eq!(parse_cmapss_str(&text).unwrap(), recs);
    }

    #[test]
    fn threshold_is_an_element(errors in prop::collection::vec(-1e3f64..1e3, 1..50), p in 0.5f64..=100.0) {
        let t = calibrate_threshold(&errors, p).unwrap();
        prop_assert!(errors.contains(&t));
        let below = errors.iter().filter(|&&e| e <= t).count() as f64;
        prop_assert!(below >= p / 100.0 * errors.len() as f64 - 1e-9);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    use fae_core::fisher_loss::{elbo_gradient, elbo_loss, Epsilon};
    let cfg = FaeConfig {
        hidden: 8,
        ..FaeConfig::default()
    };
    let model = Model::init(cfg.dims(3), cfg.init, &mut ChaCha8Rng::seed_from_u64(5));
    let batch = Array::matrix(3, 3, vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4, -0.7, 0.9, 2.0]);
    let eps = Epsilon::draw(1, 0, 3, 2, 2);
    let (_, grads) = elbo_gradient(&batch, &model, &eps).unwrap();
    let params = model.to_params();
    let h = 1e-5;
    for (name, g) in grads.iter() {
        for i in 0..g.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                elbo_loss(&batch, &Model::from_params(&p).unwrap(), &eps).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[i];
            assert!((a - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{name}[{i}]: {a} vs {fd}");
        }
    }
}
