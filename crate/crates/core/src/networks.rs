//! Multilayer perceptrons for the encoder and decoder.
//!
//! Weights are stored `in x out` so a batch `X (n x in)` maps to `X W + b`.
//! Each network is available in two forms: direct evaluation on a single
//! vector (with exact Jacobian-vector and vector-Jacobian products), and a
//! builder that records the same computation on an [`adkernel::Graph`].
//!
//! The encoder shares one hidden ReLU layer between its mean and
//! log-variance heads. This is an assumption; separate trunks would also fit
//! the architecture description.
//!
//! [`adkernel::Graph`]: crate::adkernel::Graph

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adkernel::{self, Graph, Var};
use crate::array::Array;
use crate::error::{Error, Result};

/// Log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]` before use.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu if x > 0.0 => x,
            Activation::Relu => 0.0,
            Activation::Identity => x,
        }
    }

    fn slope(self, pre: f64) -> f64 {
        match self {
            Activation::Relu if pre > 0.0 => 1.0,
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `input x output`
    pub weight: Array,
    /// length `output`
    pub bias: Array,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            weight: Array::zeros(&[input, output]),
            bias: Array::zeros(&[output]),
            activation,
        }
    }

    /// Uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-a..=a))
            .collect();
        Self {
            weight: Array::matrix(input, output, data),
            bias: Array::zeros(&[output]),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn check(&self) -> Result<()> {
        if self.weight.rank() != 2 || self.bias.len() != self.output_dim() {
            return Err(Error::Length {
                what: "layer bias",
                expected: self.output_dim(),
                found: self.bias.len(),
            });
        }
        Ok(())
    }

    fn preactivation(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Length {
                what: "layer input",
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let out_dim = self.output_dim();
        let w = self.weight.data();
        let mut out = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &wij) in out.iter_mut().zip(&w[i * out_dim..(i + 1) * out_dim]) {
                *o += xi * wij;
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pre = self.preactivation(x)?;
        Ok(pre.into_iter().map(|p| self.activation.apply(p)).collect())
    }

    /// `W^T`-side product: input-space vector from an output-space one.
    fn pull_back(&self, c: &[f64]) -> Vec<f64> {
        let out_dim = self.output_dim();
        let w = self.weight.data();
        (0..self.input_dim())
            .map(|i| {
                w[i * out_dim..(i + 1) * out_dim]
                    .iter()
                    .zip(c)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn push_forward(&self, t: &[f64]) -> Vec<f64> {
        let out_dim = self.output_dim();
        let w = self.weight.data();
        let mut out = vec![0.0; out_dim];
        for (i, &ti) in t.iter().enumerate() {
            for (o, &wij) in out.iter_mut().zip(&w[i * out_dim..(i + 1) * out_dim]) {
                *o += ti * wij;
            }
        }
        out
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub type MlpParams = Mlp;

impl Mlp {
    /// Builds layers for `sizes[0] -> sizes[1] -> ...`; hidden layers use ReLU,
    /// the last layer `output`.
    pub fn glorot<R: Rng + ?Sized>(sizes: &[usize], output: Activation, rng: &mut R) -> Self {
        let n = sizes.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { Activation::Relu };
                Dense::glorot(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize], output: Activation) -> Self {
        let n = sizes.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { Activation::Relu };
                Dense::zeros(sizes[i], sizes[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            layer.check()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Length {
                    what: "consecutive layer widths",
                    expected: pair[0].output_dim(),
                    found: pair[1].input_dim(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass keeping every layer's preactivation.
    fn trace(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let pre = layer.preactivation(&h)?;
            h = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            pres.push(pre);
        }
        Ok((pres, h))
    }
}

pub fn mlp_forward(params: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let (_, out) = params.trace(x)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Kernel(adkernel::KernelError::NonFinite("mlp_forward")));
    }
    Ok(out)
}

/// `J(x) t` for the network map at `x`.
pub fn jacobian_vector_product(params: &Mlp, x: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
    if direction.len() != x.len() {
        return Err(Error::Length {
            what: "JVP direction",
            expected: x.len(),
            found: direction.len(),
        });
    }
    let (pres, _) = params.trace(x)?;
    let mut t = direction.to_vec();
    for (layer, pre) in params.layers.iter().zip(&pres) {
        t = layer.push_forward(&t);
        for (ti, &p) in t.iter_mut().zip(pre) {
            *ti *= layer.activation.slope(p);
        }
    }
    Ok(t)
}

/// `J(x)^T c` for the network map at `x`.
pub fn vector_jacobian_product(params: &Mlp, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
    let (pres, _) = params.trace(x)?;
    if cotangent.len() != params.output_dim() {
        return Err(Error::Length {
            what: "VJP cotangent",
            expected: params.output_dim(),
            found: cotangent.len(),
        });
    }
    let mut c = cotangent.to_vec();
    for (layer, pre) in params.layers.iter().zip(&pres).rev() {
        for (ci, &p) in c.iter_mut().zip(pre) {
            *ci *= layer.activation.slope(p);
        }
        c = layer.pull_back(&c);
    }
    Ok(c)
}

/// Parameters of the approximate posterior `q(z | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub trunk: Mlp,
    pub mu_head: Dense,
    pub logvar_head: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub mu: Vec<f64>,
    /// Clamped log-variance.
    pub logvar: Vec<f64>,
}

impl EncoderOutput {
    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

impl Encoder {
    pub fn glorot<R: Rng + ?Sized>(input: usize, hidden: usize, latent: usize, rng: &mut R) -> Self {
        Self {
            trunk: Mlp::glorot(&[input, hidden], Activation::Relu, rng),
            mu_head: Dense::glorot(hidden, latent, Activation::Identity, rng),
            logvar_head: Dense::glorot(hidden, latent, Activation::Identity, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, latent: usize) -> Self {
        Self {
            trunk: Mlp::zeros(&[input, hidden], Activation::Relu),
            mu_head: Dense::zeros(hidden, latent, Activation::Identity),
            logvar_head: Dense::zeros(hidden, latent, Activation::Identity),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.mu_head.check()?;
        self.logvar_head.check()?;
        let h = self.trunk.output_dim();
        for head in [&self.mu_head, &self.logvar_head] {
            if head.input_dim() != h {
                return Err(Error::Length {
                    what: "encoder head input",
                    expected: h,
                    found: head.input_dim(),
                });
            }
        }
        Ok(())
    }

    /// Gradient with respect to `x` of `<cot_mu, mu(x)> + <cot_logvar, logvar(x)>`,
    /// differentiating through the log-variance clamp.
    pub fn vjp(&self, x: &[f64], cot_mu: &[f64], cot_logvar: &[f64]) -> Result<Vec<f64>> {
        let (pres, h) = self.trunk.trace(x)?;
        let raw_lv = self.logvar_head.preactivation(&h)?;
        let lv_cot: Vec<f64> = cot_logvar
            .iter()
            .zip(&raw_lv)
            .map(|(&c, &r)| if r.abs() < LOGVAR_CLAMP { c } else { 0.0 })
            .collect();
        let mut c: Vec<f64> = self
            .mu_head
            .pull_back(cot_mu)
            .into_iter()
            .zip(self.logvar_head.pull_back(&lv_cot))
            .map(|(a, b)| a + b)
            .collect();
        for (layer, pre) in self.trunk.layers.iter().zip(&pres).rev() {
            for (ci, &p) in c.iter_mut().zip(pre) {
                *ci *= layer.activation.slope(p);
            }
            c = layer.pull_back(&c);
        }
        Ok(c)
    }
}

pub fn encoder_apply(params: &Encoder, x: &[f64]) -> Result<EncoderOutput> {
    let h = mlp_forward(&params.trunk, x)?;
    let mu = params.mu_head.forward(&h)?;
    let logvar = params
        .logvar_head
        .forward(&h)?
        .into_iter()
        .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))
        .collect::<Vec<_>>();
    if mu.iter().chain(&logvar).any(|v| !v.is_finite()) {
        return Err(Error::Kernel(adkernel::KernelError::NonFinite("encoder")));
    }
    Ok(EncoderOutput { mu, logvar })
}

/// Graph handles for one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
    pub activation: Activation,
}

pub fn dense_graph(g: &mut Graph<'_>, layer: DenseVars, x: Var) -> adkernel::Result<Var> {
    let pre = g.affine(x, layer.weight, layer.bias)?;
    match layer.activation {
        Activation::Relu => g.relu(pre),
        Activation::Identity => Ok(pre),
    }
}

pub fn mlp_graph(g: &mut Graph<'_>, layers: &[DenseVars], x: Var) -> adkernel::Result<Var> {
    layers.iter().try_fold(x, |h, &l| dense_graph(g, l, h))
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub trunk: Vec<DenseVars>,
    pub mu_head: DenseVars,
    pub logvar_head: DenseVars,
}

/// Records the encoder on `g` for a batch `x (n x input)`; returns
/// `(mu, clamped logvar)`, each `n x latent`.
pub fn encoder_graph(g: &mut Graph<'_>, enc: &EncoderVars, x: Var) -> adkernel::Result<(Var, Var)> {
    let h = mlp_graph(g, &enc.trunk, x)?;
    let mu = dense_graph(g, enc.mu_head, h)?;
    let raw = dense_graph(g, enc.logvar_head, h)?;
    let lv = g.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok((mu, lv))
}
