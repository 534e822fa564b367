//! CMAPSS-format run-to-failure data.
//!
//! Files are whitespace-separated text with 26 numeric columns per row:
//! unit id, cycle, three operational settings and 21 sensor channels. Rows
//! for a unit run from cycle 1 to failure in steps of one.
//!
//! Run-to-failure data carries no anomaly labels. The convention used here:
//! the first `normal_fraction` of each unit's life is the healthy training
//! pool, and evaluation rows in the last `window` cycles before failure are
//! labeled anomalous. Every derived dataset records the convention in its
//! [`Provenance`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

pub const SETTINGS: usize = 3;
pub const SENSORS: usize = 21;
pub const COLUMNS: usize = 2 + SETTINGS + SENSORS;

/// Columns whose fitted standard deviation falls below this are centered only.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineRecord {
    pub unit: u32,
    pub cycle: u32,
    pub op_settings: [f64; SETTINGS],
    pub sensors: [f64; SENSORS],
}

fn parse_id(tok: &str, line: usize) -> Result<u32> {
    let v: f64 = tok.parse().map_err(|_| Error::Token {
        line,
        token: tok.to_string(),
    })?;
    if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::Token {
            line,
            token: tok.to_string(),
        });
    }
    Ok(v as u32)
}

/// Parses CMAPSS rows, preserving file order. Blank lines are skipped.
pub fn parse_cmapss<R: BufRead>(reader: R) -> Result<Vec<EngineRecord>> {
    let mut records = Vec::new();
    let mut last_cycle: HashMap<u32, u32> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != COLUMNS {
            return Err(Error::ColumnCount {
                line: lineno,
                found: toks.len(),
            });
        }
        let unit = parse_id(toks[0], lineno)?;
        let cycle = parse_id(toks[1], lineno)?;
        let mut values = [0.0; SETTINGS + SENSORS];
        for (v, tok) in values.iter_mut().zip(&toks[2..]) {
            *v = tok.parse().map_err(|_| Error::Token {
                line: lineno,
                token: tok.to_string(),
            })?;
        }
        let expected = last_cycle.get(&unit).map_or(1, |c| c + 1);
        if cycle != expected {
            return Err(Error::NonContiguous {
                line: lineno,
                unit,
                expected,
                found: cycle,
            });
        }
        last_cycle.insert(unit, cycle);
        let mut op_settings = [0.0; SETTINGS];
        op_settings.copy_from_slice(&values[..SETTINGS]);
        let mut sensors = [0.0; SENSORS];
        sensors.copy_from_slice(&values[SETTINGS..]);
        records.push(EngineRecord {
            unit,
            cycle,
            op_settings,
            sensors,
        });
    }
    Ok(records)
}

pub fn parse_cmapss_str(text: &str) -> Result<Vec<EngineRecord>> {
    parse_cmapss(text.as_bytes())
}

pub fn read_cmapss(path: &Path) -> Result<Vec<EngineRecord>> {
    let file = std::fs::File::open(path)?;
    parse_cmapss(io::BufReader::new(file))
}

/// Serializes records in the same 26-column layout. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn to_cmapss_string(records: &[EngineRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(out, "{} {}", r.unit, r.cycle).unwrap();
        for v in r.op_settings.iter().chain(&r.sensors) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Number of cycles per unit (its run-to-failure lifetime).
pub fn lifetimes(records: &[EngineRecord]) -> BTreeMap<u32, u32> {
    let mut life = BTreeMap::new();
    for r in records {
        let e = life.entry(r.unit).or_insert(0);
        *e = (*e).max(r.cycle);
    }
    life
}

/// Per-sensor z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Divisor actually applied: `std`, or 1 for degenerate columns.
    pub fn divisor(&self, j: usize) -> f64 {
        if self.std[j] < DEGENERATE_STD {
            1.0
        } else {
            self.std[j]
        }
    }

    pub fn normalize(&self, sensors: &[f64]) -> Vec<f64> {
        sensors
            .iter()
            .enumerate()
            .map(|(j, &v)| (v - self.mean[j]) / self.divisor(j))
            .collect()
    }
}

pub fn fit_normalizer(fit: &[EngineRecord]) -> Result<NormStats> {
    if fit.is_empty() {
        return Err(Error::Empty("normalizer fit set"));
    }
    let n = fit.len() as f64;
    let mut mean = vec![0.0; SENSORS];
    for r in fit {
        for (m, v) in mean.iter_mut().zip(&r.sensors) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; SENSORS];
    for r in fit {
        for ((s, v), m) in var.iter_mut().zip(&r.sensors).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(NormStats { mean, std })
}

/// How anomaly labels were assigned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConvention {
    /// Leading share of each unit's life used as the healthy pool.
    pub normal_fraction: f64,
    /// Rows with `cycle > lifetime - anomaly_window` are anomalous.
    pub anomaly_window: u32,
}

impl Default for LabelingConvention {
    fn default() -> Self {
        Self {
            normal_fraction: 0.5,
            anomaly_window: 30,
        }
    }
}

impl LabelingConvention {
    pub fn validate(&self) -> Result<()> {
        if !(self.normal_fraction > 0.0 && self.normal_fraction < 1.0) {
            return Err(Error::Config(format!(
                "normal fraction must lie in (0, 1), got {}",
                self.normal_fraction
            )));
        }
        if self.anomaly_window == 0 {
            return Err(Error::Config("anomaly window must be at least 1 cycle".into()));
        }
        Ok(())
    }

    pub fn normal_cycles(&self, lifetime: u32) -> u32 {
        (self.normal_fraction * lifetime as f64).floor() as u32
    }

    pub fn is_anomalous(&self, cycle: u32, lifetime: u32) -> bool {
        cycle as i64 > lifetime as i64 - self.anomaly_window as i64
    }
}

/// Where a dataset came from and how it was derived.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subset: String,
    pub labeling: Option<LabelingConvention>,
    pub augmentation_factor: usize,
    /// Normal-pool rows that fall inside the anomaly window.
    pub pool_rows_in_window: usize,
    pub notes: Vec<String>,
}

/// Normalized feature matrix with row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineDataset {
    /// rows x 21
    pub features: Array,
    pub units: Vec<u32>,
    pub cycles: Vec<u32>,
    pub labels: Option<Vec<bool>>,
    pub stats: NormStats,
    pub provenance: Provenance,
}

impl EngineDataset {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn width(&self) -> usize {
        SENSORS
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Batch made of the given rows.
    pub fn gather(&self, rows: &[usize]) -> Array {
        let mut data = Vec::with_capacity(rows.len() * SENSORS);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Array::matrix(rows.len(), SENSORS, data)
    }
}

pub fn apply_normalizer(
    records: &[EngineRecord],
    stats: &NormStats,
    labels: Option<Vec<bool>>,
    provenance: Provenance,
) -> Result<EngineDataset> {
    if let Some(l) = &labels {
        if l.len() != records.len() {
            return Err(Error::Length {
                what: "labels",
                expected: records.len(),
                found: l.len(),
            });
        }
    }
    let mut data = Vec::with_capacity(records.len() * SENSORS);
    for r in records {
        data.extend(stats.normalize(&r.sensors));
    }
    Ok(EngineDataset {
        features: Array::matrix(records.len(), SENSORS, data),
        units: records.iter().map(|r| r.unit).collect(),
        cycles: records.iter().map(|r| r.cycle).collect(),
        labels,
        stats: stats.clone(),
        provenance: Provenance {
            augmentation_factor: provenance.augmentation_factor.max(1),
            ..provenance
        },
    })
}

/// Label every record by the anomaly-window rule, using each unit's lifetime
/// as found in `records`.
pub fn label_rows(records: &[EngineRecord], convention: &LabelingConvention) -> Vec<bool> {
    let life = lifetimes(records);
    records
        .iter()
        .map(|r| convention.is_anomalous(r.cycle, life[&r.unit]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train_normal: Vec<EngineRecord>,
    pub eval: Vec<EngineRecord>,
    pub eval_labels: Vec<bool>,
    pub convention: LabelingConvention,
    pub pool_rows_in_window: usize,
    pub warnings: Vec<String>,
}

/// Splits each unit into its healthy leading pool and the remaining
/// evaluation rows, labeling the latter by the anomaly-window rule.
pub fn split_and_label(records: &[EngineRecord], convention: LabelingConvention) -> Result<Split> {
    convention.validate()?;
    let life = lifetimes(records);
    let mut warnings = Vec::new();
    for (&unit, &l) in &life {
        if l < convention.anomaly_window {
            warnings.push(format!(
                "unit {unit} has {l} cycles, fewer than the {}-cycle anomaly window; all its rows are anomalous",
                convention.anomaly_window
            ));
        }
    }
    let mut split = Split {
        train_normal: Vec::new(),
        eval: Vec::new(),
        eval_labels: Vec::new(),
        convention,
        pool_rows_in_window: 0,
        warnings,
    };
    for r in records {
        let l = life[&r.unit];
        let anomalous = convention.is_anomalous(r.cycle, l);
        if r.cycle <= convention.normal_cycles(l) {
            if anomalous {
                split.pool_rows_in_window += 1;
            }
            split.train_normal.push(r.clone());
        } else {
            split.eval.push(r.clone());
            split.eval_labels.push(anomalous);
        }
    }
    if split.pool_rows_in_window > 0 {
        split.warnings.push(format!(
            "{} normal-pool rows fall inside the anomaly window",
            split.pool_rows_in_window
        ));
    }
    Ok(split)
}

/// Repeats each row `factor` times in place.
pub fn augment_normals(dataset: &EngineDataset, factor: usize) -> Result<EngineDataset> {
    if factor == 0 {
        return Err(Error::Config("augmentation factor must be at least 1".into()));
    }
    let rows: Vec<usize> = (0..dataset.len())
        .flat_map(|i| std::iter::repeat_n(i, factor))
        .collect();
    let pick = |v: &[u32]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let mut provenance = dataset.provenance.clone();
    provenance.augmentation_factor = dataset.provenance.augmentation_factor.max(1) * factor;
    if factor > 1 {
        provenance
            .notes
            .push(format!("normal pool duplicated x{factor} (whole pool)"));
    }
    Ok(EngineDataset {
        features: dataset.gather(&rows),
        units: pick(&dataset.units),
        cycles: pick(&dataset.cycles),
        labels: dataset
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&i| l[i]).collect()),
        stats: dataset.stats.clone(),
        provenance,
    })
}

/// Datasets derived from one run-to-failure file.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Healthy pool, normalized, before augmentation.
    pub normal: EngineDataset,
    /// Healthy pool after augmentation; the training input.
    pub train: EngineDataset,
    /// Remaining rows with anomaly labels.
    pub eval: EngineDataset,
    pub warnings: Vec<String>,
}

/// Splits, fits the normalizer on the healthy pool, normalizes both parts
/// and augments the pool `augmentation` times.
pub fn prepare(
    records: &[EngineRecord],
    subset: &str,
    convention: LabelingConvention,
    augmentation: usize,
) -> Result<Prepared> {
    let split = split_and_label(records, convention)?;
    let stats = fit_normalizer(&split.train_normal)?;
    let provenance = Provenance {
        subset: subset.to_string(),
        labeling: Some(convention),
        augmentation_factor: 1,
        pool_rows_in_window: split.pool_rows_in_window,
        notes: split.warnings.clone(),
    };
    let normal = apply_normalizer(&split.train_normal, &stats, None, provenance.clone())?;
    let train = augment_normals(&normal, augmentation)?;
    let eval = apply_normalizer(&split.eval, &stats, Some(split.eval_labels), provenance)?;
    Ok(Prepared {
        normal,
        train,
        eval,
        warnings: split.warnings,
    })
}

/// Healthy operating point of the synthetic engine (FD001-like magnitudes).
pub const SYNTH_BASELINE: [f64; SENSORS] = [
    518.67, 642.5, 1590.0, 1408.0, 14.62, 21.61, 553.4, 2388.1, 9065.0, 1.30, 47.5, 521.4, 2388.1,
    8140.0, 8.44, 0.03, 392.0, 2388.0, 100.0, 38.8, 23.3,
];

/// Per-sensor noise standard deviation of the synthetic engine.
pub const SYNTH_SIGMA: [f64; SENSORS] = [
    0.5, 0.5, 6.0, 9.0, 0.02, 0.03, 0.9, 0.07, 22.0, 0.01, 0.27, 0.74, 0.07, 19.0, 0.04, 0.002,
    1.5, 0.5, 0.3, 0.18, 0.11,
];

/// Share of each channel's noise variance that is sensor-specific; the rest
/// comes from two shared operating factors.
pub const SYNTH_INDEPENDENT_SHARE: f64 = 0.2;

/// Fraction of life before drift begins.
pub const SYNTH_HEALTHY_SHARE: f64 = 0.7;

/// Unit-norm loadings of sensor `j` on the two shared factors.
fn synth_loading(j: usize) -> [f64; 2] {
    let angle = 0.9 + 2.4 * j as f64;
    [angle.cos(), angle.sin()]
}

/// Generates `n_units` run-to-failure trajectories of `lifetime` cycles.
///
/// Sensors are Gaussian around [`SYNTH_BASELINE`] with standard deviation
/// [`SYNTH_SIGMA`]; the noise is correlated through two shared factors.
/// After the first 70% of cycles every sensor mean drifts linearly, reaching
/// `baseline + drift_magnitude * sigma` at the last cycle.
pub fn synth_generate(n_units: u32, lifetime: u32, drift_magnitude: f64, seed: u64) -> Vec<EngineRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onset = (SYNTH_HEALTHY_SHARE * lifetime as f64).floor();
    let ramp_len = (lifetime as f64 - onset).max(1.0);
    let shared = (1.0 - SYNTH_INDEPENDENT_SHARE).sqrt();
    let own = SYNTH_INDEPENDENT_SHARE.sqrt();
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut out = Vec::with_capacity((n_units * lifetime) as usize);
    for unit in 1..=n_units {
        for cycle in 1..=lifetime {
            let ramp = ((cycle as f64 - onset) / ramp_len).max(0.0);
            let u = [normal(), normal()];
            let mut sensors = [0.0; SENSORS];
            for (j, s) in sensors.iter_mut().enumerate() {
                let a = synth_loading(j);
                let noise = shared * (a[0] * u[0] + a[1] * u[1]) + own * normal();
                *s = SYNTH_BASELINE[j] + SYNTH_SIGMA[j] * (noise + drift_magnitude * ramp);
            }
            let op_settings = [0.002 * normal(), 0.0003 * normal(), 100.0];
            out.push(EngineRecord {
                unit,
                cycle,
                op_settings,
                sensors,
            });
        }
    }
    out
}
