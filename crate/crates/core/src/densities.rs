//! Log-densities and score functions.
//!
//! Three densities enter the training objective: the diagonal-Gaussian
//! posterior `q(z | x)`, the Gaussian-mixture prior `p(z)` and the
//! unit-variance Gaussian likelihood `p(x | z)` with mean `f(z)`. The
//! analytic scores here are the production path; [`gmm_graph`] and
//! [`posterior_score_x_graph`] express the same quantities on the
//! differentiation graph and double as cross-checks.
//!
//! The second half of the module is a 1-D quadrature verifier for the
//! Fisher divergence and its integration-by-parts (Hyvärinen) form.


use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adkernel::{self, Graph, Var};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::networks::{self, Encoder, EncoderVars, Mlp, LOGVAR_CLAMP};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn same_len(what: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Length {
            what,
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

pub fn diag_gaussian_logpdf(z: &[f64], mu: &[f64], logvar: &[f64]) -> Result<f64> {
    same_len("gaussian mean", z, mu)?;
    same_len("gaussian logvar", z, logvar)?;
    Ok(z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((&zi, &mi), &lv)| -HALF_LN_2PI - 0.5 * lv - (zi - mi).powi(2) / (2.0 * lv.exp()))
        .sum())
}

/// `-(z - mu) / exp(logvar)`
pub fn diag_gaussian_score_z(z: &[f64], mu: &[f64], logvar: &[f64]) -> Result<Vec<f64>> {
    same_len("gaussian mean", z, mu)?;
    same_len("gaussian logvar", z, logvar)?;
    Ok(z.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((&zi, &mi), &lv)| -(zi - mi) * (-lv).exp())
        .collect())
}

/// Learnable Gaussian mixture over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    /// length K; mixture weights are `softmax(logits)`
    pub logits: Array,
    /// K x latent
    pub means: Array,
    /// K x latent, clamped to `[-10, 10]` when evaluated
    pub logvars: Array,
}

/// How mixture weights are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    /// Equal weights `1/K` (all logits zero).
    Equal,
    /// Logits drawn uniformly from `[-1, 1]`.
    RandomUniform,
}

impl GmmPrior {
    /// Equal weights, zero means, zero log-variances.
    pub fn standard(components: usize, latent: usize) -> Self {
        Self {
            logits: Array::zeros(&[components]),
            means: Array::zeros(&[components, latent]),
            logvars: Array::zeros(&[components, latent]),
        }
    }

    /// `standard` initialization with optional weight randomization and
    /// `N(0, 0.01^2)` jitter on the means.
    pub fn init<R: Rng + ?Sized>(
        components: usize,
        latent: usize,
        weights: WeightInit,
        jitter: bool,
        rng: &mut R,
    ) -> Self {
        let mut prior = Self::standard(components, latent);
        if weights == WeightInit::RandomUniform {
            for v in prior.logits.data_mut() {
                *v = rng.random_range(-1.0..=1.0);
            }
        }
        if jitter {
            for v in prior.means.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v = 0.01 * e;
            }
        }
        prior
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.components();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        for (what, a) in [("prior means", &self.means), ("prior logvars", &self.logvars)] {
            if a.rank() != 2 || a.rows() != k {
                return Err(Error::Length {
                    what,
                    expected: k,
                    found: a.rows(),
                });
            }
        }
        if self.logvars.cols() != self.means.cols() {
            return Err(Error::Length {
                what: "prior logvars width",
                expected: self.means.cols(),
                found: self.logvars.cols(),
            });
        }
        Ok(())
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let l = self.logits.data();
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        l.iter().map(|x| x - lse).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().into_iter().map(f64::exp).collect()
    }

    fn component_logvar(&self, k: usize) -> Vec<f64> {
        self.logvars
            .row(k)
            .iter()
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
            .collect()
    }

    /// `log w_k + log N(z; mean_k, diag exp(logvar_k))` for every k.
    fn joint_logs(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::Length {
                what: "latent point",
                expected: self.latent_dim(),
                found: z.len(),
            });
        }
        self.log_weights()
            .into_iter()
            .enumerate()
            .map(|(k, lw)| Ok(lw + diag_gaussian_logpdf(z, self.means.row(k), &self.component_logvar(k))?))
            .collect()
    }

    /// Posterior component probabilities `r_k(z)`.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let a = self.joint_logs(z)?;
        let lse = log_sum_exp(&a);
        Ok(a.into_iter().map(|x| (x - lse).exp()).collect())
    }
}

fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn gmm_logpdf(z: &[f64], prior: &GmmPrior) -> Result<f64> {
    let lp = log_sum_exp(&prior.joint_logs(z)?);
    if !lp.is_finite() {
        return Err(Error::Kernel(adkernel::KernelError::NonFinite("gmm_logpdf")));
    }
    Ok(lp)
}

/// `sum_k r_k(z) * (-(z - mean_k) / exp(logvar_k))`
pub fn gmm_score(z: &[f64], prior: &GmmPrior) -> Result<Vec<f64>> {
    let r = prior.responsibilities(z)?;
    let mut score = vec![0.0; z.len()];
    for (k, rk) in r.into_iter().enumerate() {
        let s = diag_gaussian_score_z(z, prior.means.row(k), &prior.component_logvar(k))?;
        for (acc, sk) in score.iter_mut().zip(s) {
            *acc += rk * sk;
        }
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::Kernel(adkernel::KernelError::NonFinite("gmm_score")));
    }
    Ok(score)
}

/// `grad_z log p(x | z) = J_f(z)^T (x - f(z))` for unit-variance Gaussian
/// likelihood with mean `f(z)`.
pub fn likelihood_score_z(x: &[f64], z: &[f64], decoder: &Mlp) -> Result<Vec<f64>> {
    let recon = networks::mlp_forward(decoder, z)?;
    same_len("likelihood data", &recon, x)?;
    let resid: Vec<f64> = x.iter().zip(&recon).map(|(a, b)| a - b).collect();
    networks::vector_jacobian_product(decoder, z, &resid)
}

/// `grad_x log q(z | x)` with the latent sample `z` held fixed.
pub fn posterior_score_x(x: &[f64], z: &[f64], encoder: &Encoder) -> Result<Vec<f64>> {
    let out = networks::encoder_apply(encoder, x)?;
    same_len("latent sample", &out.mu, z)?;
    // d/dmu = (z - mu)/var;  d/dlogvar = -1/2 + (z - mu)^2 / (2 var)
    let mut cot_mu = Vec::with_capacity(z.len());
    let mut cot_lv = Vec::with_capacity(z.len());
    for ((&zi, &mi), &lv) in z.iter().zip(&out.mu).zip(&out.logvar) {
        let iv = (-lv).exp();
        cot_mu.push((zi - mi) * iv);
        cot_lv.push(-0.5 + 0.5 * (zi - mi).powi(2) * iv);
    }
    encoder.vjp(x, &cot_mu, &cot_lv)
}

/// Graph handles for a [`GmmPrior`].
#[derive(Debug, Clone, Copy)]
pub struct GmmVars {
    pub logits: Var,
    pub means: Var,
    pub logvars: Var,
}

/// Records `log p(z)` (`n x 1`) and `grad_z log p(z)` (`n x d`) for a batch
/// `z (n x d)`. The score is expressed analytically through responsibilities,
/// so it can be differentiated with respect to the prior parameters.
pub fn gmm_graph(g: &mut Graph<'_>, prior: GmmVars, z: Var) -> adkernel::Result<(Var, Var)> {
    let (n, d) = g.shape(z);
    let k_total = g.shape(prior.logits).1;
    let lse_logits = g.logsumexp_cols(prior.logits)?;
    let lse_b = g.broadcast_cols(lse_logits, k_total)?;
    let log_w = g.sub(prior.logits, lse_b)?;

    let mut joint: Option<Var> = None;
    let mut diffs = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let mean = g.slice_rows(prior.means, k, 1)?;
        let lv_raw = g.slice_rows(prior.logvars, k, 1)?;
        let lv = g.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
        let neg_lv = g.neg(lv)?;
        let inv_var = g.exp(neg_lv)?;
        let mean_b = g.broadcast_rows(mean, n)?;
        let diff = g.sub(z, mean_b)?;
        let iv_b = g.broadcast_rows(inv_var, n)?;
        let sq = g.square(diff)?;
        let weighted = g.mul(sq, iv_b)?;
        let quad = g.sum_cols(weighted)?;
        let lv_sum = g.sum(lv)?;
        let lv_b = g.broadcast_scalar(lv_sum, n, 1)?;
        let t = g.add(quad, lv_b)?;
        let t = g.scale(t, -0.5)?;
        let log_n = g.offset(t, -(d as f64) * HALF_LN_2PI)?;
        let col = g.pad_cols(log_n, k, k_total)?;
        joint = Some(match joint {
            Some(acc) => g.add(acc, col)?,
            None => col,
        });
        diffs.push((diff, iv_b));
    }
    let joint = joint.expect("at least one component");
    let log_w_b = g.broadcast_rows(log_w, n)?;
    let joint = g.add(joint, log_w_b)?;
    let log_p = g.logsumexp_cols(joint)?;
    let log_p_b = g.broadcast_cols(log_p, k_total)?;
    let shifted = g.sub(joint, log_p_b)?;
    let resp = g.exp(shifted)?;

    let mut score: Option<Var> = None;
    for (k, (diff, iv_b)) in diffs.into_iter().enumerate() {
        let rk = g.slice_cols(resp, k, 1)?;
        let rk_b = g.broadcast_cols(rk, d)?;
        let s = g.mul(diff, iv_b)?;
        let t = g.mul(rk_b, s)?;
        score = Some(match score {
            Some(acc) => g.sub(acc, t)?,
            None => g.neg(t)?,
        });
    }
    Ok((log_p, score.expect("at least one component")))
}

/// Records `sum_rows log q(z | x')` up to an additive constant.
fn posterior_logq_graph(g: &mut Graph<'_>, z: Var, mu: Var, lv: Var) -> adkernel::Result<Var> {
    let diff = g.sub(z, mu)?;
    let sq = g.square(diff)?;
    let neg_lv = g.neg(lv)?;
    let iv = g.exp(neg_lv)?;
    let quad = g.mul(sq, iv)?;
    let t = g.add(quad, lv)?;
    let s = g.sum(t)?;
    g.scale(s, -0.5)
}

/// `grad_x log q(z | x)` for a batch, through the graph. `x` must be a node
/// that `z` does not depend on (typically a fresh leaf holding the data), so
/// the sample is held fixed. Returns an `n x input` node of order one higher
/// than its inputs.
pub fn posterior_score_x_graph(
    g: &mut Graph<'_>,
    enc: &EncoderVars,
    x: Var,
    z: Var,
) -> adkernel::Result<Var> {
    let (mu, lv) = networks::encoder_graph(g, enc, x)?;
    let logq = posterior_logq_graph(g, z, mu, lv)?;
    Ok(g.grad(logq, &[x])?[0])
}

/// A 1-D density with its score and score derivative.
pub struct ScoredDensity1D {
    pub logpdf: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub score: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Second derivative of `logpdf`.
    pub laplacian: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl ScoredDensity1D {
    pub fn gaussian(mean: f64, var: f64) -> Self {
        Self {
            logpdf: Box::new(move |x| -HALF_LN_2PI - 0.5 * var.ln() - (x - mean).powi(2) / (2.0 * var)),
            score: Box::new(move |x| -(x - mean) / var),
            laplacian: Box::new(move |_| -1.0 / var),
        }
    }

    /// Mixture `sum_k w_k N(mean_k, var_k)`; weights are normalized.
    pub fn mixture(weights: &[f64], means: &[f64], vars: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let comps: Vec<(f64, f64, f64)> = weights
            .iter()
            .zip(means)
            .zip(vars)
            .map(|((&w, &m), &v)| ((w / total).ln(), m, v))
            .collect();
        let comps = std::sync::Arc::new(comps);
        // (log p, score, laplacian)
        let eval = move |x: f64| {
            let a: Vec<f64> = comps
                .iter()
                .map(|&(lw, m, v)| lw - HALF_LN_2PI - 0.5 * v.ln() - (x - m).powi(2) / (2.0 * v))
                .collect();
            let lp = log_sum_exp(&a);
            let mut score = 0.0;
            let mut second = 0.0;
            for (&ak, &(_, m, v)) in a.iter().zip(comps.iter()) {
                let r = (ak - lp).exp();
                let s = -(x - m) / v;
                score += r * s;
                second += r * (s * s - 1.0 / v);
            }
            (lp, score, second - score * score)
        };
        let e1 = eval.clone();
        let e2 = eval.clone();
        Self {
            logpdf: Box::new(move |x| eval(x).0),
            score: Box::new(move |x| e1(x).1),
            laplacian: Box::new(move |x| e2(x).2),
        }
    }
}

/// Uniform grid `lo..=hi` with `n` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    fn points(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.step();
        (0..self.n).map(move |i| self.lo + i as f64 * h)
    }

    pub fn trapezoid(&self, f: impl Fn(f64) -> f64) -> f64 {
        let h = self.step();
        let last = self.n - 1;
        self.points()
            .enumerate()
            .map(|(i, x)| {
                let w = if i == 0 || i == last { 0.5 } else { 1.0 };
                w * f(x)
            })
            .sum::<f64>()
            * h
    }
}

fn check_grid(p: &ScoredDensity1D, grid: &Grid) -> Result<()> {
    if grid.n < 1000 {
        return Err(Error::Quadrature(format!("grid needs at least 1000 points, got {}", grid.n)));
    }
    if grid.lo.is_nan() || grid.hi.is_nan() || grid.hi <= grid.lo {
        return Err(Error::Quadrature("grid upper bound must exceed lower bound".into()));
    }
    let dens = |x: f64| (p.logpdf)(x).exp();
    let mass = grid.trapezoid(dens);
    if (mass - 1.0).abs() > 1e-4 {
        return Err(Error::Quadrature(format!("density integrates to {mass} on the grid")));
    }
    let mean = grid.trapezoid(|x| x * dens(x));
    let sd = grid.trapezoid(|x| (x - mean).powi(2) * dens(x)).sqrt();
    if grid.lo > mean - 4.0 * sd || grid.hi < mean + 4.0 * sd {
        return Err(Error::Quadrature(format!(
            "grid [{}, {}] spans fewer than 8 standard deviations around {mean}",
            grid.lo, grid.hi
        )));
    }
    Ok(())
}

/// Trapezoidal estimate of `∫ p(x) ½ (score_p(x) - score_q(x))² dx`.
pub fn fisher_divergence_quadrature(p: &ScoredDensity1D, q: &ScoredDensity1D, grid: Grid) -> Result<f64> {
    check_grid(p, &grid)?;
    Ok(grid.trapezoid(|x| {
        let d = (p.score)(x) - (q.score)(x);
        (p.logpdf)(x).exp() * 0.5 * d * d
    }))
}

/// Both sides of the integration-by-parts identity
/// `D_F(p || q) = E_p[½ s_p²] + E_p[½ s_q² + s_q']`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyvarinenCheck {
    pub lhs: f64,
    pub rhs: f64,
}

impl HyvarinenCheck {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

pub fn hyvarinen_identity_check(p: &ScoredDensity1D, q: &ScoredDensity1D, grid: Grid) -> Result<HyvarinenCheck> {
    let lhs = fisher_divergence_quadrature(p, q, grid)?;
    let rhs = grid.trapezoid(|x| {
        let sp = (p.score)(x);
        let sq = (q.score)(x);
        (p.logpdf)(x).exp() * (0.5 * sp * sp + 0.5 * sq * sq + (q.laplacian)(x))
    });
    Ok(HyvarinenCheck { lhs, rhs })
}
