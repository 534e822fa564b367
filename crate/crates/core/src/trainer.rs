//! Minibatch Adam training for the Fisher autoencoder and the ELBO baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::fisher_loss::{
    elbo_gradient, elbo_loss, fae_loss, loss_gradient, Epsilon, FaeConfig, LossBreakdown, LossKind,
};
use crate::model::{Model, ParameterSet};

/// Adam moment estimates, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParameterSet, grads: &ParameterSet, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
        if p.len() != g.len() {
            return Err(Error::Length {
                what: "gradient",
                expected: p.len(),
                found: g.len(),
            });
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) {
    let norm = grads.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Per-epoch mean loss terms for one split. For the ELBO baseline
/// `score_match` and `stability` are zero, `reconstruction` is the
/// reconstruction term and `total` is reconstruction plus KL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub test: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,score_match,reconstruction,stability,total\n");
        let mut line = |epoch: usize, split: &str, b: &LossBreakdown| {
            writeln!(
                out,
                "{epoch},{split},{},{},{},{}",
                b.score_match, b.reconstruction, b.stability, b.total
            )
            .unwrap();
        };
        for r in &self.epochs {
            line(r.epoch, "train", &r.train);
            if let Some(t) = &r.test {
                line(r.epoch, "test", t);
            }
        }
        out
    }

    pub fn final_train_total(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train.total)
    }
}

fn as_breakdown(kind: LossKind, batch: &Array, model: &Model, cfg: &FaeConfig, eps: &Epsilon) -> Result<LossBreakdown> {
    match kind {
        LossKind::Fae => fae_loss(batch, model, cfg, eps),
        LossKind::Vae => {
            let e = elbo_loss(batch, model, eps)?;
            Ok(LossBreakdown {
                score_match: 0.0,
                reconstruction: e.reconstruction,
                stability: 0.0,
                total: e.total,
            })
        }
    }
}

fn step_gradient(
    kind: LossKind,
    batch: &Array,
    model: &Model,
    cfg: &FaeConfig,
    eps: &Epsilon,
) -> Result<(LossBreakdown, ParameterSet)> {
    match kind {
        LossKind::Fae => loss_gradient(batch, model, cfg, eps),
        LossKind::Vae => {
            let (e, g) = elbo_gradient(batch, model, eps)?;
            let b = LossBreakdown {
                score_match: 0.0,
                reconstruction: e.reconstruction,
                stability: 0.0,
                total: e.total,
            };
            Ok((b, g))
        }
    }
}

/// Mean loss over `data` evaluated in batches of `cfg.batch_size`, with noise
/// from `cfg.eval_seed`. Deterministic for fixed parameters.
pub fn evaluate_loss(kind: LossKind, data: &Array, model: &Model, cfg: &FaeConfig) -> Result<LossBreakdown> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    let d = model.dims().latent;
    let mut acc = LossBreakdown::default();
    let rows: Vec<usize> = (0..n).collect();
    for (b, chunk) in rows.chunks(cfg.batch_size).enumerate() {
        let batch = gather(data, chunk);
        let eps = Epsilon::draw(cfg.eval_seed, b as u64, chunk.len(), cfg.mc_samples, d);
        let l = as_breakdown(kind, &batch, model, cfg, &eps)?;
        let w = chunk.len() as f64 / n as f64;
        acc.score_match += w * l.score_match;
        acc.reconstruction += w * l.reconstruction;
        acc.stability += w * l.stability;
        acc.total += w * l.total;
    }
    Ok(acc)
}

fn gather(data: &Array, rows: &[usize]) -> Array {
    let c = data.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &i in rows {
        out.extend_from_slice(data.row(i));
    }
    Array::matrix(rows.len(), c, out)
}

/// Trains a freshly initialized model on the rows of `train` (`n x input`).
///
/// Each epoch visits a seeded permutation of all rows in `ceil(n / batch)`
/// minibatches; the noise for global step `s` is `Epsilon::draw(seed, s, ..)`.
/// With `epochs == 0` the initial parameters are returned unchanged.
pub fn train(
    train: &Array,
    heldout: Option<&Array>,
    cfg: &FaeConfig,
    kind: LossKind,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let n = train.rows();
    if n == 0 || train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let dims = cfg.dims(train.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(dims, cfg.init, &mut rng);
    let mut params = model.to_params();
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather(train, chunk);
            let eps = Epsilon::draw(cfg.seed, history.steps, chunk.len(), cfg.mc_samples, dims.latent);
            let nonfinite = |e: Error| match e {
                Error::NonFiniteLoss { .. } | Error::Kernel(_) => Error::NonFiniteTraining { epoch, batch: b },
                other => other,
            };
            let (loss, mut grads) = step_gradient(kind, &batch, &model, cfg, &eps).map_err(nonfinite)?;
            if !loss.total.is_finite() || grads.iter().any(|(_, g)| !g.is_finite()) {
                return Err(Error::NonFiniteTraining { epoch, batch: b });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam)?;
            model = Model::from_params(&params)?;
            history.steps += 1;
            let w = chunk.len() as f64 / n as f64;
            acc.score_match += w * loss.score_match;
            acc.reconstruction += w * loss.reconstruction;
            acc.stability += w * loss.stability;
            acc.total += w * loss.total;
        }
        let test = heldout
            .filter(|h| h.rows() > 0)
            .map(|h| evaluate_loss(kind, h, &model, cfg))
            .transpose()?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train: acc,
            test,
        });
        if cfg.early_stop && plateaued(&history) {
            history.stopped_early = true;
            break;
        }
    }
    Ok((model, history))
}

fn plateaued(h: &TrainHistory) -> bool {
    const PATIENCE: usize = 5;
    let e = &h.epochs;
    if e.len() <= PATIENCE {
        return false;
    }
    let before = e[e.len() - 1 - PATIENCE].train.total;
    let best_recent = e[e.len() - PATIENCE..]
        .iter()
        .map(|r| r.train.total)
        .fold(f64::INFINITY, f64::min);
    before - best_recent < 1e-6
}
