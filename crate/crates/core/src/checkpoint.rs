//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FAE1" | version u16 | config_len u32 | config JSON
//! | array_count u32 | { name_len u16 | name | rank u8 | dims u64* | data f64* }*
//! | crc32 u32 over every preceding byte
//! ```
//!
//! Model parameters use their `enc.*`, `dec.*`, `prior.*` names. The
//! normalization statistics and the training-set reconstruction errors used
//! for threshold calibration are stored as `norm.mean`, `norm.std` and
//! `calibration.errors` when present.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::cmapss::{LabelingConvention, NormStats};
use crate::error::{Error, Result};
use crate::fisher_loss::{FaeConfig, LossKind};
use crate::model::{Model, ModelDims, ParameterSet};

pub const MAGIC: &[u8; 4] = b"FAE1";
pub const VERSION: u16 = 1;

/// Everything stored in the JSON config block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: FaeConfig,
    pub loss: LossKind,
    pub dims: ModelDims,
    pub labeling: Option<LabelingConvention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub norm: Option<NormStats>,
    pub calibration_errors: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(model: Model, config: FaeConfig, loss: LossKind) -> Self {
        let dims = model.dims();
        Self {
            model,
            meta: CheckpointMeta {
                config,
                loss,
                dims,
                labeling: None,
            },
            norm: None,
            calibration_errors: None,
        }
    }

    fn arrays(&self) -> ParameterSet {
        let mut p = self.model.to_params();
        if let Some(n) = &self.norm {
            p.insert("norm.mean", Array::vector(n.mean.clone()));
            p.insert("norm.std", Array::vector(n.std.clone()));
        }
        if let Some(e) = &self.calibration_errors {
            p.insert("calibration.errors", Array::vector(e.clone()));
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        let arrays = self.arrays();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, a) in arrays.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(a.rank() as u8);
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 4 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take::<2>()?);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config_len = u32::from_le_bytes(r.take::<4>()?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.slice(config_len)?)?;
        let count = u32::from_le_bytes(r.take::<4>()?);
        let mut arrays = ParameterSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take::<2>()?) as usize;
            let name = std::str::from_utf8(r.slice(name_len)?)
                .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.take::<1>()?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(r.take::<8>()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&l| l <= body.len() / 8)
                .ok_or_else(|| Error::Corrupt(format!("array `{name}` has an implausible shape")))?;
            let data = (0..len)
                .map(|_| Ok(f64::from_le_bytes(r.take::<8>()?)))
                .collect::<Result<Vec<_>>>()?;
            arrays.insert(name, Array::new(shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes before checksum".into()));
        }

        let vector = |name: &str| arrays.get(name).map(|a| a.data().to_vec());
        let norm = match (vector("norm.mean"), vector("norm.std")) {
            (Some(mean), Some(std)) => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(Error::Corrupt("incomplete normalization statistics".into())),
        };
        let calibration_errors = vector("calibration.errors");
        let model = Model::from_params(&arrays.filter_prefix(&["enc.", "dec.", "prior."]))?;
        if model.dims() != meta.dims {
            return Err(Error::Corrupt("stored dimensions disagree with the arrays".into()));
        }
        Ok(Self {
            model,
            meta,
            norm,
            calibration_errors,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.slice(N)?.try_into().unwrap())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(latent: usize) -> Checkpoint {
        let cfg = FaeConfig {
            latent_dim: latent,
            ..FaeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(cfg.dims(21), cfg.init, &mut rng);
        let mut c = Checkpoint::new(model, cfg, LossKind::Fae);
        c.norm = Some(NormStats {
            mean: (0..21).map(|i| i as f64 * 0.1 + 1.0 / 3.0).collect(),
            std: vec![0.7; 21],
        });
        c.calibration_errors = Some(vec![0.1, 2.0 / 7.0, 1e-300]);
        c.meta.labeling = Some(LabelingConvention::default());
        c
    }

    #[test]
    fn round_trip() {
        let c = sample(2);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn records_latent_size() {
        let c = sample(3);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta.dims.latent, 3);
        assert_eq!(back.model.dims().latent, 3);
    }

    #[test]
    fn flipped_magic_is_corrupt() {
        let mut b = sample(2).to_bytes().unwrap();
        b[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Corrupt(_))));
    }

    #[test]
    fn flipped_payload_fails_checksum() {
        let mut b = sample(2).to_bytes().unwrap();
        let mid = b.len() / 2;
        b[mid] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Corrupt(_))));
        assert!(Checkpoint::from_bytes(&b[..10]).is_err());
    }

    #[test]
    fn version_mismatch() {
        let mut b = sample(2).to_bytes().unwrap();
        b[4] = 9;
        let body = b.len() - 4;
        let crc = crc32fast::hash(&b[..body]);
        b[body..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }
}
