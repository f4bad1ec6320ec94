//! Single-file checkpoints: safetensors payload plus a JSON header stored
//! under one metadata key so the file bytes are reproducible.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{DbdError, Result};

const HEADER_KEY: &str = "dbdkit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// A defocus network (teacher, student or response-distilled baseline).
    Network,
    /// Depth model used as an external depth teacher.
    DepthNet,
    /// Parameter-free predictor that echoes the first image channel; for pipeline checks.
    ChannelEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub model: Option<ModelConfig>,
    /// Training stage that produced the weights (`stage1`, `stage2`, `rdffnet`).
    #[serde(default)]
    pub stage: Option<String>,
    /// Last completed epoch (1-based); 0 for untrained weights.
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub iteration: usize,
    /// Fully resolved run configuration, echoed for provenance.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

impl CheckpointHeader {
    pub fn network(model: ModelConfig) -> Self {
        Self {
            kind: CheckpointKind::Network,
            model: Some(model),
            stage: None,
            epoch: 0,
            iteration: 0,
            run_config: None,
        }
    }

    pub fn channel_echo() -> Self {
        Self {
            kind: CheckpointKind::ChannelEcho,
            model: None,
            stage: None,
            epoch: 0,
            iteration: 0,
            run_config: None,
        }
    }

    /// Fails when the stored model configuration differs from `expected`.
    pub fn expect_model(&self, expected: &ModelConfig) -> Result<()> {
        match &self.model {
            Some(m) if m == expected => Ok(()),
            Some(m) => Err(DbdError::Config(format!(
                "checkpoint was written for model config {} but the run config asks for {}",
                serde_json::to_string(m)?,
                serde_json::to_string(expected)?
            ))),
            None => Err(DbdError::Config(format!(
                "checkpoint of kind {:?} carries no model configuration",
                self.kind
            ))),
        }
    }
}

pub fn write_checkpoint(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    header: &CheckpointHeader,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert(HEADER_KEY.to_string(), serde_json::to_string(header)?);
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta))
        .map_err(|e| DbdError::load(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| DbdError::load(path, e))?;
    let (_, metadata) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| DbdError::load(path, e))?;
    let raw = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| DbdError::load(path, "not a dbdkit checkpoint (missing header)"))?;
    let header: CheckpointHeader =
        serde_json::from_str(raw).map_err(|e| DbdError::load(path, e))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| DbdError::load(path, e))?;
    Ok((tensors, header))
}

/// Entries whose name starts with `prefix`, with the prefix removed.
pub fn strip_prefix(tensors: &HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
        .collect()
}
