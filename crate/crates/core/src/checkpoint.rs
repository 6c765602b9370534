//! JSON checkpoints.
//!
//! ```json
//! {
//!   "format": "abode-net-checkpoint",
//!   "version": 1,
//!   "case": "eco-1",
//!   "epoch": 41,
//!   "val_f1": 0.93,
//!   "model_config": { ... },
//!   "train_config": { ... },
//!   "params":  { "fcn.block1.conv.weight": { "shape": [128, 1, 8, 8], "data": [ ... ] }, ... },
//!   "buffers": { "fcn.block1.bn.running_mean": { "shape": [128], "data": [ ... ] }, ... },
//!   "optimizer": { "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "step": 530,
//!                  "first_moment": { "<param>": [ ... ] }, "second_moment": { ... } },
//!   "rng": { "algorithm": "chacha8", "seed": "7", "word_pos": "123456" }
//! }
//! ```
//!
//! Tensor data is row-major. Parameter and buffer names are listed in
//! [`crate::model`]. The RNG seed and word position are decimal strings
//! because the position is a 128-bit integer.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AbodeNet, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{Adam, RngState, Snapshot, TrainConfig};

pub const FORMAT: &str = "abode-net-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub algorithm: String,
    pub seed: String,
    pub word_pos: String,
}

impl From<&RngState> for RngRecord {
    fn from(s: &RngState) -> Self {
        RngRecord {
            algorithm: "chacha8".into(),
            seed: s.seed.to_string(),
            word_pos: s.word_pos.to_string(),
        }
    }
}

impl RngRecord {
    pub fn state(&self) -> Result<RngState> {
        if self.algorithm != "chacha8" {
            return Err(Error::Checkpoint(format!("unsupported rng `{}`", self.algorithm)));
        }
        let parse_err = |what: &str, v: &str| Error::Checkpoint(format!("invalid rng {what} `{v}`"));
        Ok(RngState {
            seed: self.seed.parse().map_err(|_| parse_err("seed", &self.seed))?,
            word_pos: self
                .word_pos
                .parse()
                .map_err(|_| parse_err("word_pos", &self.word_pos))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub case: String,
    pub epoch: usize,
    pub val_f1: f64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: IndexMap<String, Tensor>,
    pub buffers: IndexMap<String, Tensor>,
    pub optimizer: Adam,
    pub rng: RngRecord,
}

impl Checkpoint {
    pub fn from_snapshot(case: &str, snapshot: &Snapshot, train_config: &TrainConfig) -> Self {
        let model = &snapshot.model;
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            case: case.into(),
            epoch: snapshot.epoch,
            val_f1: snapshot.val_f1,
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            params: model
                .params()
                .iter()
                .map(|(k, p)| (k.clone(), p.value.clone()))
                .collect(),
            buffers: model.buffers().clone(),
            optimizer: snapshot.optimizer.clone(),
            rng: RngRecord::from(&snapshot.rng),
        }
    }

    /// Rebuilds the network, rejecting any name or shape mismatch.
    pub fn model(&self) -> Result<AbodeNet> {
        AbodeNet::from_parts(self.model_config.clone(), self.params.clone(), self.buffers.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(FORMAT) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "not a checkpoint (format {other:?}, expected {FORMAT:?})"
                )))
            }
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {other:?} (expected {VERSION})"
                )))
            }
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        for (name, t) in ckpt.params.iter().chain(&ckpt.buffers) {
            if t.numel() != t.data().len() || t.shape().iter().product::<usize>() != t.data().len() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match data",
                    t.shape()
                )));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            Error::Json(j) => Error::Checkpoint(format!("{}: {j}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn snapshot() -> Snapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = AbodeNet::new(ModelConfig::default(), &mut rng).unwrap();
        let mut optimizer = Adam::new();
        optimizer.step = 2;
        optimizer.first_moment.insert("pa.va.sigma".into(), vec![0.1 + 0.2]);
        Snapshot {
            epoch: 4,
            val_f1: 0.875,
            model,
            optimizer,
            rng: RngState::of(3, &rng),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let snap = snapshot();
        let ckpt = Checkpoint::from_snapshot("c", &snap, &TrainConfig::default());
        let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.model().unwrap().params(), snap.model.params());
        assert_eq!(back.rng.state().unwrap(), snap.rng);
        assert!(ckpt.to_json().unwrap().contains("\"word_pos\":\""));
    }

    #[test]
    fn wrong_format_or_version_is_rejected() {
        let ckpt = Checkpoint::from_snapshot("c", &snapshot(), &TrainConfig::default());
        let mut v: serde_json::Value = serde_json::from_str(&ckpt.to_json().unwrap()).unwrap();
        v["version"] = 99.into();
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("version"));
        v["format"] = "something-else".into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported_by_name() {
        let mut ckpt = Checkpoint::from_snapshot("c", &snapshot(), &TrainConfig::default());
        ckpt.params.insert("pa.se.w1".into(), Tensor::zeros([128, 4]));
        let err = ckpt.model().unwrap_err().to_string();
        assert!(
            err.contains("pa.se.w1") && err.contains("[128, 8]") && err.contains("[128, 4]"),
            "{err}"
        );
    }
}
