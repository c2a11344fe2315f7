//! Versioned JSON checkpoint container.
//!
//! ```json
//! {
//!   "format": "tradelab-checkpoint",
//!   "version": 1,
//!   "kind": "classifier",
//!   "architecture": { ... },
//!   "metadata": { "key": value, ... },
//!   "blocks": [ { "name": "dense0.weight", "shape": [64, 64], "data": [...] }, ... ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so a save/load cycle reproduces every parameter bit-for-bit.
//! Readers accept any file with the same major `version`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkSpec};
use super::ParamBlocks;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tradelab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub architecture: serde_json::Value,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub blocks: Vec<TensorBlock>,
}

impl Checkpoint {
    pub fn new<A: Serialize, M: ParamBlocks + ?Sized>(
        kind: &str,
        architecture: &A,
        model: &M,
    ) -> Result<Self> {
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            architecture: serde_json::to_value(architecture)?,
            metadata: BTreeMap::new(),
            blocks: model
                .blocks()
                .into_iter()
                .map(|b| TensorBlock {
                    name: b.name,
                    shape: b.shape,
                    data: b.data.to_vec(),
                })
                .collect(),
        })
    }

    pub fn with_metadata<V: Serialize>(mut self, key: &str, value: &V) -> Result<Self> {
        self.metadata.insert(key.into(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn metadata<V: DeserializeOwned>(&self, key: &str) -> Result<Option<V>> {
        self.metadata
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(Error::from))
            .transpose()
    }

    pub fn architecture<A: DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_value(self.architecture.clone())
            .map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (reader supports {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        for b in &ckpt.blocks {
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::Checkpoint(format!(
                    "block `{}` has shape {:?} but {} values",
                    b.name,
                    b.shape,
                    b.data.len()
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }

    /// Copies stored blocks into `model`, which must have identical block
    /// names and shapes.
    pub fn restore_into<M: ParamBlocks + ?Sized>(&self, model: &mut M) -> Result<()> {
        let shapes: Vec<(String, Vec<usize>)> = model
            .blocks()
            .into_iter()
            .map(|b| (b.name, b.shape))
            .collect();
        if shapes.len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks, model has {}",
                self.blocks.len(),
                shapes.len()
            )));
        }
        for ((name, shape), stored) in shapes.iter().zip(&self.blocks) {
            if name != &stored.name || shape != &stored.shape {
                return Err(Error::Checkpoint(format!(
                    "block `{}` {:?} does not match model block `{name}` {shape:?}",
                    stored.name, stored.shape
                )));
            }
        }
        for ((_, dst), stored) in model.blocks_mut().into_iter().zip(&self.blocks) {
            dst.copy_from_slice(&stored.data);
        }
        Ok(())
    }
}

impl Network {
    pub fn to_checkpoint(&self, kind: &str) -> Result<Checkpoint> {
        Checkpoint::new(kind, self.spec(), self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
        let spec: NetworkSpec = ckpt.architecture()?;
        let mut net = Network::zeros(spec);
        ckpt.restore_into(&mut net)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdaptiveNormSpec;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut spec = NetworkSpec::classifier(6, 3, 3);
        spec.adaptive_norm = Some(AdaptiveNormSpec { use_gate: true });
        let mut net = Network::new(spec, &mut rng);
        for (_, block) in net.blocks_mut() {
            block.iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0) * 1e-3);
        }
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.to_checkpoint("classifier").unwrap().save(&path).unwrap();
        let loaded = Network::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let a = net.predict(x.view(), &[]).unwrap();
        let b = loaded.predict(x.view(), &[]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_foreign_and_shape_mismatched_files() {
        assert!(Checkpoint::from_json("{}").is_err());
        let net = Network::zeros(NetworkSpec::classifier(2, 2, 3));
        let mut ckpt = net.to_checkpoint("classifier").unwrap();
        ckpt.version = 99;
        assert!(Checkpoint::from_json(&ckpt.to_json().unwrap()).is_err());

        let ckpt = net.to_checkpoint("classifier").unwrap();
        let mut other = Network::zeros(NetworkSpec::classifier(3, 2, 3));
        assert!(matches!(
            ckpt.restore_into(&mut other).unwrap_err(),
            Error::Checkpoint(_)
        ));
    }
}
