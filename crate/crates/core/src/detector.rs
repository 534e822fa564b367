//! Reconstruction-error anomaly detection.
//!
//! A row is encoded to its posterior mean, decoded, and scored by the
//! squared distance to its reconstruction. Rows scoring strictly above the
//! threshold are flagged.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::cmapss::EngineDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::networks::{encoder_apply, mlp_forward};

/// `||x - f(mu(x))||^2`
pub fn reconstruction_error(model: &Model, x: &[f64]) -> Result<f64> {
    let d = model.dims().input;
    if x.len() != d {
        return Err(Error::Length {
            what: "feature width",
            expected: d,
            found: x.len(),
        });
    }
    let post = encoder_apply(&model.encoder, x)?;
    let recon = mlp_forward(&model.decoder, &post.mu)?;
    Ok(x.iter().zip(&recon).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Errors for every row of an `n x input` matrix.
pub fn reconstruction_errors(model: &Model, features: &Array) -> Result<Vec<f64>> {
    (0..features.rows())
        .map(|i| reconstruction_error(model, features.row(i)))
        .collect()
}

/// Posterior means, one row per input row.
pub fn latent_embed(model: &Model, features: &Array) -> Result<Array> {
    let d = model.dims();
    if features.cols() != d.input {
        return Err(Error::Length {
            what: "feature width",
            expected: d.input,
            found: features.cols(),
        });
    }
    let n = features.rows();
    let mut data = Vec::with_capacity(n * d.latent);
    for i in 0..n {
        data.extend(encoder_apply(&model.encoder, features.row(i))?.mu);
    }
    Ok(Array::matrix(n, d.latent, data))
}

/// Nearest-rank percentile: the sorted value at 1-based index
/// `ceil(p / 100 * n)`.
pub fn calibrate_threshold(errors: &[f64], percentile: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("calibration errors"));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::Config(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::Config("calibration errors contain NaN".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((percentile / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

pub fn flag(errors: &[f64], threshold: f64) -> Vec<bool> {
    errors.iter().map(|&e| e > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

/// Confusion counts and derived rates. Ratios with an empty denominator are 0.
pub fn evaluate(flags: &[bool], labels: &[bool]) -> Result<Metrics> {
    if flags.len() != labels.len() {
        return Err(Error::Length {
            what: "labels",
            expected: flags.len(),
            found: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&f, &l) in flags.iter().zip(labels) {
        match (f, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        fpr: ratio(fp, fp + tn),
        tp,
        fp,
        fn_,
        tn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub errors: Vec<f64>,
    pub threshold: f64,
    pub flags: Vec<bool>,
    pub units: Vec<u32>,
    pub cycles: Vec<u32>,
    pub labels: Option<Vec<bool>>,
    pub metrics: Option<Metrics>,
}

impl DetectionReport {
    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row_index,unit,cycle,error,flagged");
        if self.labels.is_some() {
            out.push_str(",label");
        }
        out.push('\n');
        for i in 0..self.errors.len() {
            write!(
                out,
                "{i},{},{},{},{}",
                self.units[i], self.cycles[i], self.errors[i], self.flags[i] as u8
            )
            .unwrap();
            if let Some(l) = &self.labels {
                write!(out, ",{}", l[i] as u8).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every row and flags those with error strictly above `threshold`.
pub fn detect(model: &Model, dataset: &EngineDataset, threshold: f64) -> Result<DetectionReport> {
    if threshold.is_nan() {
        return Err(Error::Config("threshold is NaN".into()));
    }
    let errors = reconstruction_errors(model, &dataset.features)?;
    let flags = flag(&errors, threshold);
    let metrics = dataset
        .labels
        .as_ref()
        .map(|l| evaluate(&flags, l))
        .transpose()?;
    Ok(DetectionReport {
        errors,
        threshold,
        flags,
        units: dataset.units.clone(),
        cycles: dataset.cycles.clone(),
        labels: dataset.labels.clone(),
        metrics,
    })
}
