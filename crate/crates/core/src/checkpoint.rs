//! Parameter checkpoints: a JSON manifest with one tensor snapshot per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    VqGesture,
    VqAudio,
    Generator,
    Critic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub corpus_checksum: String,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    /// Digest of `params`, checked on load.
    pub params_hash: String,
    pub params: BTreeMap<String, Tensor>,
}

fn params_digest(params: &BTreeMap<String, Tensor>) -> String {
    let text = serde_json::to_string(params).expect("tensors always serialize");
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

impl Checkpoint {
    pub fn new(
        kind: CheckpointKind,
        config_hash: impl Into<String>,
        corpus_checksum: impl Into<String>,
        epoch: usize,
        val_loss: Option<f64>,
        store: &ParamStore,
    ) -> Self {
        let params = store.snapshot();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind,
            config_hash: config_hash.into(),
            corpus_checksum: corpus_checksum.into(),
            epoch,
            val_loss,
            params_hash: params_digest(&params),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ck.version.to_string(),
                supported: CHECKPOINT_VERSION,
            });
        }
        let actual = params_digest(&ck.params);
        if actual != ck.params_hash {
            return Err(Error::Checksum {
                expected: ck.params_hash,
                actual,
            });
        }
        Ok(ck)
    }

    /// Errors unless this checkpoint was written for `kind` under `config_hash`.
    pub fn expect(&self, kind: CheckpointKind, config_hash: &str) -> Result<&Self> {
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                self.kind
            )));
        }
        if self.config_hash != config_hash {
            return Err(Error::Contract(format!(
                "checkpoint config {} does not match the current config {config_hash}",
                self.config_hash
            )));
        }
        Ok(self)
    }

    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_snapshot(&self.params)
    }
}
