//! Encoder, decoder and prior bundled as one model, with flat named
//! parameter addressing (`enc.*`, `dec.*`, `prior.*`).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adkernel::{self, Graph, Var};
use crate::array::Array;
use crate::densities::{GmmPrior, GmmVars, WeightInit};
use crate::error::{Error, Result};
use crate::networks::{Activation, Dense, DenseVars, Encoder, EncoderVars, Mlp};

/// Layer widths of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub components: usize,
}

/// All learnable arrays by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    arrays: BTreeMap<String, Array>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Same names, all-zero arrays.
    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    /// Keeps only entries whose name starts with one of `prefixes`.
    pub fn filter_prefix(&self, prefixes: &[&str]) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

impl FromIterator<(String, Array)> for ParameterSet {
    fn from_iter<T: IntoIterator<Item = (String, Array)>>(iter: T) -> Self {
        Self {
            arrays: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub decoder: Mlp,
    pub prior: GmmPrior,
}

/// Initialization knobs for [`Model::init`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub weights: WeightInit,
    pub prior_jitter: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            weights: WeightInit::Equal,
            prior_jitter: false,
        }
    }
}

fn dense_entries(prefix: &str, d: &Dense, out: &mut ParameterSet) {
    out.insert(format!("{prefix}.weight"), d.weight.clone());
    out.insert(format!("{prefix}.bias"), d.bias.clone());
}

fn dense_from(p: &ParameterSet, prefix: &str, activation: Activation) -> Result<Dense> {
    Ok(Dense {
        weight: p.require(&format!("{prefix}.weight"))?.clone(),
        bias: p.require(&format!("{prefix}.bias"))?.clone(),
        activation,
    })
}

impl Model {
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, opts: InitOptions, rng: &mut R) -> Self {
        let encoder = Encoder::glorot(dims.input, dims.hidden, dims.latent, rng);
        let decoder = Mlp::glorot(&[dims.latent, dims.hidden, dims.input], Activation::Identity, rng);
        let prior = GmmPrior::init(dims.components, dims.latent, opts.weights, opts.prior_jitter, rng);
        Self {
            encoder,
            decoder,
            prior,
        }
    }

    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            encoder: Encoder::zeros(dims.input, dims.hidden, dims.latent),
            decoder: Mlp::zeros(&[dims.latent, dims.hidden, dims.input], Activation::Identity),
            prior: GmmPrior::standard(dims.components, dims.latent),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.encoder.input_dim(),
            hidden: self.encoder.trunk.output_dim(),
            latent: self.encoder.latent_dim(),
            components: self.prior.components(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.prior.validate()?;
        let d = self.dims();
        if self.decoder.input_dim() != d.latent || self.decoder.output_dim() != d.input {
            return Err(Error::Config("decoder does not mirror the encoder".into()));
        }
        if self.prior.latent_dim() != d.latent {
            return Err(Error::Length {
                what: "prior latent width",
                expected: d.latent,
                found: self.prior.latent_dim(),
            });
        }
        Ok(())
    }

    pub fn to_params(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (i, l) in self.encoder.trunk.layers.iter().enumerate() {
            dense_entries(&format!("enc.trunk.{i}"), l, &mut p);
        }
        dense_entries("enc.mu", &self.encoder.mu_head, &mut p);
        dense_entries("enc.logvar", &self.encoder.logvar_head, &mut p);
        for (i, l) in self.decoder.layers.iter().enumerate() {
            dense_entries(&format!("dec.{i}"), l, &mut p);
        }
        p.insert("prior.logits", self.prior.logits.clone());
        p.insert("prior.means", self.prior.means.clone());
        p.insert("prior.logvars", self.prior.logvars.clone());
        p
    }

    /// Rebuilds a model from named arrays. Hidden layers are ReLU, output
    /// layers identity.
    pub fn from_params(p: &ParameterSet) -> Result<Self> {
        let count = |prefix: &str| {
            (0..)
                .take_while(|i| p.get(&format!("{prefix}.{i}.weight")).is_some())
                .count()
        };
        let layers = |prefix: &str, n: usize, last: Activation| -> Result<Vec<Dense>> {
            (0..n)
                .map(|i| {
                    let act = if i + 1 == n { last } else { Activation::Relu };
                    dense_from(p, &format!("{prefix}.{i}"), act)
                })
                .collect()
        };
        let encoder = Encoder {
            trunk: Mlp {
                layers: layers("enc.trunk", count("enc.trunk"), Activation::Relu)?,
            },
            mu_head: dense_from(p, "enc.mu", Activation::Identity)?,
            logvar_head: dense_from(p, "enc.logvar", Activation::Identity)?,
        };
        let decoder = Mlp {
            layers: layers("dec", count("dec"), Activation::Identity)?,
        };
        let prior = GmmPrior {
            logits: p.require("prior.logits")?.clone(),
            means: p.require("prior.means")?.clone(),
            logvars: p.require("prior.logvars")?.clone(),
        };
        let model = Self {
            encoder,
            decoder,
            prior,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Graph leaves for every parameter of a [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub decoder: Vec<DenseVars>,
    pub prior: GmmVars,
    /// Parameter name to leaf.
    pub leaves: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn record(g: &mut Graph<'_>, model: &Model) -> adkernel::Result<Self> {
        let mut leaves = BTreeMap::new();
        let mut dense = |g: &mut Graph<'_>, name: String, d: &Dense| -> adkernel::Result<DenseVars> {
            let weight = g.leaf(d.weight.clone())?;
            let bias = g.leaf(d.bias.clone())?;
            leaves.insert(format!("{name}.weight"), weight);
            leaves.insert(format!("{name}.bias"), bias);
            Ok(DenseVars {
                weight,
                bias,
                activation: d.activation,
            })
        };
        let trunk = model
            .encoder
            .trunk
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| dense(g, format!("enc.trunk.{i}"), l))
            .collect::<adkernel::Result<Vec<_>>>()?;
        let mu_head = dense(g, "enc.mu".into(), &model.encoder.mu_head)?;
        let logvar_head = dense(g, "enc.logvar".into(), &model.encoder.logvar_head)?;
        let decoder = model
            .decoder
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| dense(g, format!("dec.{i}"), l))
            .collect::<adkernel::Result<Vec<_>>>()?;
        let logits = g.leaf(model.prior.logits.clone())?;
        let means = g.leaf(model.prior.means.clone())?;
        let logvars = g.leaf(model.prior.logvars.clone())?;
        leaves.insert("prior.logits".into(), logits);
        leaves.insert("prior.means".into(), means);
        leaves.insert("prior.logvars".into(), logvars);
        Ok(Self {
            encoder: EncoderVars {
                trunk,
                mu_head,
                logvar_head,
            },
            decoder,
            prior: GmmVars {
                logits,
                means,
                logvars,
            },
            leaves,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: ModelDims = ModelDims {
        input: 21,
        hidden: 32,
        latent: 2,
        components: 3,
    };

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(DIMS, InitOptions::default(), &mut rng);
        let p = m.to_params();
        assert!(p.names().all(|n| n.starts_with("enc.") || n.starts_with("dec.") || n.starts_with("prior.")));
        assert_eq!(Model::from_params(&p).unwrap(), m);
        assert_eq!(m.dims(), DIMS);
    }

    #[test]
    fn parameter_count() {
        let p = Model::zeros(DIMS).to_params();
        let enc = 21 * 32 + 32 + 2 * (32 * 2 + 2);
        let dec = 2 * 32 + 32 + 32 * 21 + 21;
        let prior = 3 + 2 * 3 * 2;
        assert_eq!(p.size(), enc + dec + prior);
    }

    #[test]
    fn missing_parameter_is_reported() {
        let mut p = Model::zeros(DIMS).to_params();
        p.arrays.remove("enc.mu.bias");
        assert!(matches!(Model::from_params(&p), Err(Error::Config(_))));
    }
}
