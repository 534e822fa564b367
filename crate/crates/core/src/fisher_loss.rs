//! Fisher-divergence training objective and the ELBO baseline.
//!
//! For a batch `X` and `L` reparameterized draws `z = mu(x) + sigma(x) * eps`
//! the objective is the batch mean of
//!
//! ```text
//! 1/(2L) sum_l || s_q(z) - s_prior(z) - s_lik(z) ||^2      score_match
//! 1/L    sum_l 1/2 || x - f(z) ||^2                         reconstruction
//! 1/L    sum_l 1/2 || grad_x log q(z | x) ||^2              stability
//! ```
//!
//! with `s_q = grad_z log q(z | x)`, `s_prior = grad_z log p(z)` and
//! `s_lik = grad_z log p(x | z)`. The stability term is scaled by
//! `k_stability` in the total.
//!
//! [`fae_loss`] evaluates the objective with the analytic scores from
//! [`crate::densities`]; [`loss_gradient`] records it on the differentiation
//! graph, with the likelihood and stability scores taken as nested gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adkernel::{Graph, Var};
use crate::array::Array;
use crate::densities::{self, gmm_graph, posterior_score_x_graph};
use crate::error::{Error, Result};
use crate::model::{InitOptions, Model, ModelDims, ModelVars, ParameterSet};
use crate::networks::{self, encoder_graph, mlp_graph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Fae,
    Vae,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fae" => Ok(Self::Fae),
            "vae" => Ok(Self::Vae),
            other => Err(format!("unknown loss kind `{other}` (expected fae or vae)")),
        }
    }
}

/// Model and optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub components: usize,
    /// Monte-Carlo draws `L` per sample.
    pub mc_samples: usize,
    pub k_stability: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Seed for the noise used by held-out loss evaluation.
    pub eval_seed: u64,
    pub init: InitOptions,
    /// Stop when train loss improves by less than 1e-6 over 5 epochs.
    pub early_stop: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for FaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden: 32,
            components: 3,
            mc_samples: 1,
            k_stability: 1.0,
            batch_size: 16,
            epochs: 50,
            learning_rate: 1e-3,
            seed: 7,
            eval_seed: 0x5eed,
            init: InitOptions::default(),
            early_stop: false,
            grad_clip: None,
        }
    }
}

impl FaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent dimension must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden width must be at least 1");
        }
        if self.components == 0 {
            return bad("mixture needs at least one component");
        }
        if self.mc_samples == 0 {
            return bad("at least one Monte-Carlo sample is required");
        }
        if self.k_stability.is_nan() || self.k_stability < 0.0 {
            return bad("k_stability must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning rate must be positive");
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad("gradient clip must be positive");
            }
        }
        Ok(())
    }

    pub fn dims(&self, input: usize) -> ModelDims {
        ModelDims {
            input,
            hidden: self.hidden,
            latent: self.latent_dim,
            components: self.components,
        }
    }
}

/// The three terms of the Fisher objective and their weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub score_match: f64,
    pub reconstruction: f64,
    pub stability: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(score_match: f64, reconstruction: f64, stability: f64, k: f64) -> Result<Self> {
        for (term, v) in [
            ("score_match", score_match),
            ("reconstruction", reconstruction),
            ("stability", stability),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term });
            }
        }
        Ok(Self {
            score_match,
            reconstruction,
            stability,
            total: score_match + reconstruction + k * stability,
        })
    }
}

/// Negative ELBO split into its two parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

/// Standard-normal draws for a batch: `L` matrices of `n x latent`.
#[derive(Debug, Clone, PartialEq)]
pub struct Epsilon {
    draws: Vec<Array>,
}

impl Epsilon {
    /// Deterministic in `(seed, stream)`: the stream selects an independent
    /// ChaCha keystream, so any batch's noise can be regenerated without
    /// replaying earlier draws.
    pub fn draw(seed: u64, stream: u64, n: usize, mc_samples: usize, latent: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let draws = (0..mc_samples)
            .map(|_| {
                let data = (0..n * latent).map(|_| StandardNormal.sample(&mut rng)).collect();
                Array::matrix(n, latent, data)
            })
            .collect();
        Self { draws }
    }

    pub fn from_draws(draws: Vec<Array>) -> Self {
        Self { draws }
    }

    pub fn zeros(n: usize, mc_samples: usize, latent: usize) -> Self {
        Self {
            draws: vec![Array::zeros(&[n, latent]); mc_samples],
        }
    }

    pub fn mc_samples(&self) -> usize {
        self.draws.len()
    }

    pub fn sample(&self, l: usize) -> &Array {
        &self.draws[l]
    }

    pub fn get(&self, l: usize, row: usize) -> &[f64] {
        self.draws[l].row(row)
    }

    fn check(&self, n: usize, latent: usize) -> Result<()> {
        if self.draws.is_empty() {
            return Err(Error::Empty("noise draws"));
        }
        for d in &self.draws {
            if d.rows() != n || d.cols() != latent {
                return Err(Error::Length {
                    what: "noise draw shape",
                    expected: n * latent,
                    found: d.len(),
                });
            }
        }
        Ok(())
    }
}

/// `mu + exp(logvar / 2) * eps`
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::Length {
            what: "reparameterization inputs",
            expected: mu.len(),
            found: if mu.len() != logvar.len() { logvar.len() } else { eps.len() },
        });
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

fn check_batch(batch: &Array, model: &Model) -> Result<usize> {
    if batch.rows() == 0 || batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let d = model.dims().input;
    if batch.cols() != d {
        return Err(Error::Length {
            what: "feature width",
            expected: d,
            found: batch.cols(),
        });
    }
    Ok(batch.rows())
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
}

/// Fisher objective for a batch (`n x input`), analytic route.
pub fn fae_loss(batch: &Array, model: &Model, cfg: &FaeConfig, eps: &Epsilon) -> Result<LossBreakdown> {
    let n = check_batch(batch, model)?;
    eps.check(n, model.dims().latent)?;
    let big_l = eps.mc_samples();
    let (mut sm, mut rec, mut stab) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = batch.row(i);
        let post = networks::encoder_apply(&model.encoder, x)?;
        for l in 0..big_l {
            let z = reparameterize(&post.mu, &post.logvar, eps.get(l, i))?;
            let s_q = densities::diag_gaussian_score_z(&z, &post.mu, &post.logvar)?;
            let s_p = densities::gmm_score(&z, &model.prior)?;
            let recon = networks::mlp_forward(&model.decoder, &z)?;
            let resid: Vec<f64> = x.iter().zip(&recon).map(|(a, b)| a - b).collect();
            let s_lik = networks::vector_jacobian_product(&model.decoder, &z, &resid)?;
            sm += 0.5
                * s_q
                    .iter()
                    .zip(&s_p)
                    .zip(&s_lik)
                    .map(|((a, b), c)| (a - b - c).powi(2))
                    .sum::<f64>();
            rec += half_sq_dist(x, &recon);
            let s_x = densities::posterior_score_x(x, &z, &model.encoder)?;
            stab += 0.5 * s_x.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let denom = (n * big_l) as f64;
    LossBreakdown::assemble(sm / denom, rec / denom, stab / denom, cfg.k_stability)
}

/// Negative ELBO with a standard-normal prior, batch mean.
pub fn elbo_loss(batch: &Array, model: &Model, eps: &Epsilon) -> Result<ElboBreakdown> {
    let n = check_batch(batch, model)?;
    eps.check(n, model.dims().latent)?;
    let big_l = eps.mc_samples();
    let (mut rec, mut kl) = (0.0, 0.0);
    for i in 0..n {
        let x = batch.row(i);
        let post = networks::encoder_apply(&model.encoder, x)?;
        kl += post
            .mu
            .iter()
            .zip(&post.logvar)
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum::<f64>();
        for l in 0..big_l {
            let z = reparameterize(&post.mu, &post.logvar, eps.get(l, i))?;
            let recon = networks::mlp_forward(&model.decoder, &z)?;
            rec += half_sq_dist(x, &recon) / big_l as f64;
        }
    }
    let (rec, kl) = (rec / n as f64, kl / n as f64);
    if !rec.is_finite() {
        return Err(Error::NonFiniteLoss { term: "reconstruction" });
    }
    if !kl.is_finite() {
        return Err(Error::NonFiniteLoss { term: "kl" });
    }
    Ok(ElboBreakdown {
        reconstruction: rec,
        kl,
        total: rec + kl,
    })
}

fn collect_grads(g: &mut Graph<'_>, vars: &ModelVars, total: Var, prefixes: &[&str]) -> Result<ParameterSet> {
    let names: Vec<&String> = vars
        .leaves
        .keys()
        .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
        .collect();
    let leaves: Vec<Var> = names.iter().map(|k| vars.leaves[*k]).collect();
    let grads = g.grad(total, &leaves)?;
    names
        .into_iter()
        .zip(grads)
        .map(|(name, gv)| Ok((name.clone(), g.value(gv).clone())))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

fn reshape_like(grads: ParameterSet, model: &ParameterSet) -> Result<ParameterSet> {
    grads
        .iter()
        .map(|(k, v)| {
            let shape = model.require(k)?.shape().to_vec();
            Ok((k.to_string(), v.clone().reshape(shape)?))
        })
        .collect()
}

/// Objective value and its gradient with respect to every encoder, decoder
/// and prior array, with the noise `eps` held fixed.
pub fn loss_gradient(
    batch: &Array,
    model: &Model,
    cfg: &FaeConfig,
    eps: &Epsilon,
) -> Result<(LossBreakdown, ParameterSet)> {
    let n = check_batch(batch, model)?;
    eps.check(n, model.dims().latent)?;
    let big_l = eps.mc_samples();
    let denom = (n * big_l) as f64;

    let mut g = Graph::new();
    let vars = ModelVars::record(&mut g, model)?;
    let x = g.constant(batch.clone())?;
    let (mu, lv) = encoder_graph(&mut g, &vars.encoder, x)?;
    let half_lv = g.scale(lv, 0.5)?;
    let sigma = g.exp(half_lv)?;
    let neg_lv = g.neg(lv)?;
    let inv_var = g.exp(neg_lv)?;
    // separate leaf for the stability score so z does not depend on it
    let x_free = g.leaf(batch.clone())?;

    let mut parts: Vec<Var> = Vec::with_capacity(3 * big_l);
    let (mut sm_v, mut rec_v, mut stab_v) = (0.0, 0.0, 0.0);
    for l in 0..big_l {
        let e = g.constant(eps.sample(l).clone())?;
        let noise = g.mul(sigma, e)?;
        let z = g.add(mu, noise)?;

        let zq = g.mul(noise, inv_var)?;
        let s_q = g.neg(zq)?;
        let (_, s_p) = gmm_graph(&mut g, vars.prior, z)?;
        let recon = mlp_graph(&mut g, &vars.decoder, z)?;
        let resid = g.sub(x, recon)?;
        let half_rss = g.sum_sq(resid)?;
        let half_rss = g.scale(half_rss, 0.5)?;
        let loglik = g.neg(half_rss)?;
        let s_lik = g.grad(loglik, &[z])?[0];

        let d1 = g.sub(s_q, s_p)?;
        let d2 = g.sub(d1, s_lik)?;
        let sm = g.sum_sq(d2)?;
        let sm = g.scale(sm, 0.5)?;

        let s_x = posterior_score_x_graph(&mut g, &vars.encoder, x_free, z)?;
        let st = g.sum_sq(s_x)?;
        let st = g.scale(st, 0.5)?;

        sm_v += g.scalar(sm)?;
        rec_v += g.scalar(half_rss)?;
        stab_v += g.scalar(st)?;
        let st_k = g.scale(st, cfg.k_stability)?;
        let a = g.add(sm, half_rss)?;
        parts.push(g.add(a, st_k)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let total = g.scale(total, 1.0 / denom)?;
    let breakdown = LossBreakdown::assemble(sm_v / denom, rec_v / denom, stab_v / denom, cfg.k_stability)?;
    let grads = collect_grads(&mut g, &vars, total, &["enc.", "dec.", "prior."])?;
    Ok((breakdown, reshape_like(grads, &model.to_params())?))
}

/// Negative-ELBO value and gradient with respect to encoder and decoder
/// arrays (the baseline has no learnable prior).
pub fn elbo_gradient(batch: &Array, model: &Model, eps: &Epsilon) -> Result<(ElboBreakdown, ParameterSet)> {
    let n = check_batch(batch, model)?;
    eps.check(n, model.dims().latent)?;
    let big_l = eps.mc_samples();

    let mut g = Graph::new();
    let vars = ModelVars::record(&mut g, model)?;
    let x = g.constant(batch.clone())?;
    let (mu, lv) = encoder_graph(&mut g, &vars.encoder, x)?;
    let half_lv = g.scale(lv, 0.5)?;
    let sigma = g.exp(half_lv)?;

    let mut rec: Option<Var> = None;
    for l in 0..big_l {
        let e = g.constant(eps.sample(l).clone())?;
        let noise = g.mul(sigma, e)?;
        let z = g.add(mu, noise)?;
        let recon = mlp_graph(&mut g, &vars.decoder, z)?;
        let resid = g.sub(x, recon)?;
        let rss = g.sum_sq(resid)?;
        rec = Some(match rec {
            Some(acc) => g.add(acc, rss)?,
            None => rss,
        });
    }
    let rec = g.scale(rec.expect("mc_samples >= 1"), 0.5 / (n * big_l) as f64)?;
    // KL(N(mu, var) || N(0, 1)) = 1/2 (mu^2 + var - 1 - logvar)
    let mu2 = g.square(mu)?;
    let var = g.exp(lv)?;
    let t = g.add(mu2, var)?;
    let t = g.sub(t, lv)?;
    let t = g.offset(t, -1.0)?;
    let kl = g.sum(t)?;
    let kl = g.scale(kl, 0.5 / n as f64)?;
    let total = g.add(rec, kl)?;

    let (rec_v, kl_v) = (g.scalar(rec)?, g.scalar(kl)?);
    let grads = collect_grads(&mut g, &vars, total, &["enc.", "dec."])?;
    Ok((
        ElboBreakdown {
            reconstruction: rec_v,
            kl: kl_v,
            total: rec_v + kl_v,
        },
        reshape_like(grads, &model.to_params())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::Array;
    use crate::networks::{Activation, Dense, Encoder, Mlp};
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            input: 3,
            hidden: 6,
            latent: 2,
            components: 2,
        };
        let mut m = Model::init(dims, InitOptions::default(), &mut rng);
        m.prior.means = Array::matrix(2, 2, vec![0.5, -0.2, -0.7, 0.4]);
        m.prior.logvars = Array::matrix(2, 2, vec![0.1, -0.3, 0.2, 0.0]);
        m.prior.logits = Array::vector(vec![0.3, -0.1]);
        m
    }

    fn batch() -> Array {
        Array::matrix(4, 3, vec![0.2, -0.5, 1.0, 1.3, 0.1, -0.4, -0.8, 0.9, 0.3, 0.05, -1.2, 0.6])
    }

    #[test]
    fn reparameterize_examples() {
        assert_eq!(reparameterize(&[1.0, 2.0], &[0.3, -0.2], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&[1.0], &[0.0], &[0.25]).unwrap(), vec![1.25]);
        assert!(reparameterize(&[1.0], &[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn epsilon_is_counter_based() {
        let a = Epsilon::draw(9, 4, 3, 2, 2);
        let b = Epsilon::draw(9, 4, 3, 2, 2);
        let c = Epsilon::draw(9, 5, 3, 2, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn perfect_decoder_has_zero_reconstruction() {
        // decoder ignores z and emits the (single) data row through its bias
        let dims = ModelDims {
            input: 2,
            hidden: 4,
            latent: 1,
            components: 1,
        };
        let mut m = Model::zeros(dims);
        m.decoder.layers[1].bias = Array::vector(vec![0.7, -0.3]);
        let x = Array::matrix(1, 2, vec![0.7, -0.3]);
        let eps = Epsilon::draw(1, 0, 1, 3, 1);
        let lb = fae_loss(&x, &m, &FaeConfig::default(), &eps).unwrap();
        assert_eq!(lb.reconstruction, 0.0);
    }

    #[test]
    fn matched_scores_give_zero_score_match() {
        // 1-D: q(z|x) = N(0, 1), prior N(0, 1), decoder constant → s_lik = 0,
        // so s_q - s_p - s_lik = -z + z - 0 = 0 identically.
        let dims = ModelDims {
            input: 1,
            hidden: 2,
            latent: 1,
            components: 1,
        };
        let m = Model::zeros(dims);
        let x = Array::matrix(2, 1, vec![0.4, -1.0]);
        let eps = Epsilon::draw(3, 0, 2, 2, 1);
        let lb = fae_loss(&x, &m, &FaeConfig::default(), &eps).unwrap();
        assert_eq!(lb.score_match, 0.0);
    }

    #[test]
    fn hand_rolled_scalar_oracle() {
        // D=2, latent 1, L=1; everything recomputed from scalar formulas.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = Encoder::glorot(2, 3, 1, &mut rng);
        let dec = Mlp::glorot(&[1, 3, 2], Activation::Identity, &mut rng);
        let prior = densities::GmmPrior {
            logits: Array::vector(vec![0.2, -0.4]),
            means: Array::matrix(2, 1, vec![0.8, -0.6]),
            logvars: Array::matrix(2, 1, vec![-0.2, 0.3]),
        };
        let model = Model {
            encoder: enc.clone(),
            decoder: dec.clone(),
            prior,
        };
        let x = [0.35, -0.9];
        let eps_v = 0.63;
        let eps = Epsilon::from_draws(vec![Array::matrix(1, 1, vec![eps_v])]);
        let got = fae_loss(&Array::matrix(1, 2, x.to_vec()), &model, &FaeConfig::default(), &eps).unwrap();

        let relu = |v: f64| v.max(0.0);
        let step = |v: f64| if v > 0.0 { 1.0 } else { 0.0 };
        let w = |d: &Dense, i: usize, j: usize| d.weight.at(i, j);
        let b = |d: &Dense, j: usize| d.bias.data()[j];
        let t = &enc.trunk.layers[0];
        let pre_h = |xv: [f64; 2]| -> Vec<f64> {
            (0..3).map(|j| xv[0] * w(t, 0, j) + xv[1] * w(t, 1, j) + b(t, j)).collect()
        };
        let ph = pre_h(x);
        let h: Vec<f64> = ph.iter().map(|&p| relu(p)).collect();
        let mu = (0..3).map(|j| h[j] * w(&enc.mu_head, j, 0)).sum::<f64>() + b(&enc.mu_head, 0);
        let lv = ((0..3).map(|j| h[j] * w(&enc.logvar_head, j, 0)).sum::<f64>() + b(&enc.logvar_head, 0))
            .clamp(-10.0, 10.0);
        let var = lv.exp();
        let z = mu + var.sqrt() * eps_v;
        let s_q = -(z - mu) / var;
        // prior score
        let lw0 = 0.2 - ((0.2f64).exp() + (-0.4f64).exp()).ln();
        let lw1 = -0.4 - ((0.2f64).exp() + (-0.4f64).exp()).ln();
        let comp = |lw: f64, m: f64, l: f64| lw - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * l - (z - m).powi(2) / (2.0 * l.exp());
        let (a0, a1) = (comp(lw0, 0.8, -0.2), comp(lw1, -0.6, 0.3));
        let r0 = 1.0 / (1.0 + (a1 - a0).exp());
        let r1 = 1.0 - r0;
        let s_p = r0 * (-(z - 0.8) / (-0.2f64).exp()) + r1 * (-(z + 0.6) / 0.3f64.exp());
        // decoder and its derivative
        let d0 = &dec.layers[0];
        let d1 = &dec.layers[1];
        let dpre: Vec<f64> = (0..3).map(|j| z * w(d0, 0, j) + b(d0, j)).collect();
        let dh: Vec<f64> = dpre.iter().map(|&p| relu(p)).collect();
        let f: Vec<f64> = (0..2).map(|k| (0..3).map(|j| dh[j] * w(d1, j, k)).sum::<f64>() + b(d1, k)).collect();
        let df: Vec<f64> = (0..2).map(|k| (0..3).map(|j| step(dpre[j]) * w(d0, 0, j) * w(d1, j, k)).sum()).collect();
        let s_lik = (0..2).map(|k| df[k] * (x[k] - f[k])).sum::<f64>();
        let sm = 0.5 * (s_q - s_p - s_lik).powi(2);
        let rec = 0.5 * ((x[0] - f[0]).powi(2) + (x[1] - f[1]).powi(2));
        // d log q / dx = (z-mu)/var * dmu/dx + (-1/2 + (z-mu)^2/(2 var)) * dlv/dx
        let cm = (z - mu) / var;
        let cl = -0.5 + (z - mu).powi(2) / (2.0 * var);
        let sx: Vec<f64> = (0..2)
            .map(|i| {
                (0..3)
                    .map(|j| step(ph[j]) * w(t, i, j) * (cm * w(&enc.mu_head, j, 0) + cl * w(&enc.logvar_head, j, 0)))
                    .sum()
            })
            .collect();
        let stab = 0.5 * (sx[0] * sx[0] + sx[1] * sx[1]);
        let total = sm + rec + stab;

        assert!((got.score_match - sm).abs() < 1e-10);
        assert!((got.reconstruction - rec).abs() < 1e-10);
        assert!((got.stability - stab).abs() < 1e-10);
        assert!((got.total - total).abs() < 1e-10);
    }

    #[test]
    fn graph_value_matches_analytic_value() {
        let m = small_model(2);
        let cfg = FaeConfig {
            mc_samples: 2,
            k_stability: 0.7,
            ..FaeConfig::default()
        };
        let eps = Epsilon::draw(5, 1, 4, 2, 2);
        let a = fae_loss(&batch(), &m, &cfg, &eps).unwrap();
        let (b, _) = loss_gradient(&batch(), &m, &cfg, &eps).unwrap();
        assert!((a.total - b.total).abs() < 1e-10, "{a:?} {b:?}");
        assert!((a.score_match - b.score_match).abs() < 1e-10);
        assert!((a.stability - b.stability).abs() < 1e-10);
        assert!((b.total - (b.score_match + b.reconstruction + 0.7 * b.stability)).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_sums_to_zero() {
        let m = small_model(4);
        let eps = Epsilon::draw(1, 2, 4, 1, 2);
        let (_, grads) = loss_gradient(&batch(), &m, &FaeConfig::default(), &eps).unwrap();
        let s: f64 = grads.get("prior.logits").unwrap().sum();
        assert!(s.abs() < 1e-10, "{s}");
    }

    #[test]
    fn zero_data_zero_decoder_bias_gradient() {
        let dims = ModelDims {
            input: 3,
            hidden: 4,
            latent: 2,
            components: 2,
        };
        let m = Model::zeros(dims);
        let x = Array::zeros(&[3, 3]);
        let eps = Epsilon::draw(1, 0, 3, 1, 2);
        let (_, grads) = loss_gradient(&x, &m, &FaeConfig::default(), &eps).unwrap();
        assert!(grads.get("dec.1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elbo_examples() {
        let dims = ModelDims {
            input: 2,
            hidden: 3,
            latent: 1,
            components: 1,
        };
        let mut m = Model::zeros(dims);
        let x = Array::matrix(1, 2, vec![0.0, 0.0]);
        let eps = Epsilon::draw(0, 0, 1, 1, 1);
        let e = elbo_loss(&x, &m, &eps).unwrap();
        assert_eq!(e.kl, 0.0);
        assert_eq!(e.total, 0.0);
        m.encoder.mu_head.bias = Array::vector(vec![1.0]);
        let e = elbo_loss(&x, &m, &eps).unwrap();
        assert!((e.kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn elbo_graph_matches_direct() {
        let m = small_model(8);
        let eps = Epsilon::draw(2, 2, 4, 2, 2);
        let a = elbo_loss(&batch(), &m, &eps).unwrap();
        let (b, grads) = elbo_gradient(&batch(), &m, &eps).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!(grads.names().all(|n| !n.starts_with("prior.")));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = small_model(1);
        let x = Array::zeros(&[0, 3]);
        let eps = Epsilon::zeros(0, 1, 2);
        assert!(matches!(fae_loss(&x, &m, &FaeConfig::default(), &eps), Err(Error::Empty(_))));
    }
}
