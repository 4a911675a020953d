//! One-file checkpoints: magic, manifest length, JSON manifest, then a raw
//! little-endian `f64` blob holding the parameters and, when present, the
//! Adam moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bodymodel::Skeleton;
use crate::diff::{ParamBlock, ParamSet};
use crate::error::{Error, Result};
use crate::posedist::{ModelConfig, PoseShapeModel, Variant};
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"SO3PCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    variant: Variant,
    config: ModelConfig,
    skeleton_hash: String,
    seed: u64,
    epochs_done: usize,
    blocks: Vec<ParamBlock>,
    adam: Option<AdamMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PoseShapeModel,
    /// Seed the model was initialised and trained with.
    pub seed: u64,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.model.params;
        let adam = self.state.as_ref().map(|s| AdamMeta {
            t: s.adam.t,
            beta1: s.adam.beta1,
            beta2: s.adam.beta2,
            eps: s.adam.eps,
        });
        let manifest = Manifest {
            version: FORMAT_VERSION,
            variant: self.model.variant(),
            config: self.model.config.clone(),
            skeleton_hash: self.model.skeleton.hash().to_string(),
            seed: self.seed,
            epochs_done: self.state.as_ref().map_or(0, |s| s.epochs_done),
            blocks: p.blocks().to_vec(),
            adam,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * p.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(p.data());
        if let Some(s) = &self.state {
            put(&s.adam.m);
            put(&s.adam.v);
        }
        Ok(out)
    }

    /// Parses a checkpoint and rebuilds the model against `skeleton`, whose
    /// hash must match the one recorded at save time.
    pub fn from_bytes(bytes: &[u8], skeleton: &Skeleton) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated manifest"))?;
        let m: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                m.version
            )));
        }
        if m.variant != m.config.variant {
            return Err(bad("variant tag disagrees with the model config"));
        }
        if m.skeleton_hash != skeleton.hash() {
            return Err(Error::Checkpoint(format!(
                "skeleton hash {} does not match {}",
                m.skeleton_hash,
                skeleton.hash()
            )));
        }
        let blob = &bytes[16 + len..];
        if blob.len() % 8 != 0 {
            return Err(bad("parameter blob is not a whole number of f64"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let fresh = PoseShapeModel::new(m.config, skeleton.clone(), m.seed)?;
        let n = fresh.params.len();
        if m.blocks != fresh.params.blocks() {
            return Err(bad("parameter shapes do not match the model config"));
        }
        let expected = if m.adam.is_some() { 3 * n } else { n };
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} values in the blob, found {}",
                values.len()
            )));
        }
        let params = ParamSet::from_parts(m.blocks, values[..n].to_vec())?;
        let model = fresh.with_params(params)?;
        let state = m.adam.map(|a| TrainState {
            epochs_done: m.epochs_done,
            adam: AdamState {
                m: values[n..2 * n].to_vec(),
                v: values[2 * n..].to_vec(),
                t: a.t,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            },
        });
        Ok(Self {
            model,
            seed: m.seed,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, skeleton: &Skeleton) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, skeleton)
    }
}
