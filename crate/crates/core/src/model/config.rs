use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DbdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneId {
    /// Plain 4-stage convnet, sized for tests and CI.
    Tiny,
    /// Residual convnet with wider stages.
    Medium,
    /// Slot for an externally supplied backbone (see [`crate::model::build_model_with_backbone`]).
    Large,
}

impl BackboneId {
    pub fn stage_channels(self, levels: usize) -> Option<Vec<usize>> {
        let base = match self {
            BackboneId::Tiny => 8,
            BackboneId::Medium => 16,
            BackboneId::Large => return None,
        };
        Some((0..levels).map(|i| base << i).collect())
    }
}

impl FromStr for BackboneId {
    type Err = DbdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(BackboneId::Tiny),
            "medium" => Ok(BackboneId::Medium),
            "large" => Ok(BackboneId::Large),
            other => Err(DbdError::Config(format!(
                "unknown backbone token {other:?}"
            ))),
        }
    }
}

impl fmt::Display for BackboneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneId::Tiny => "tiny",
            BackboneId::Medium => "medium",
            BackboneId::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Full decoder: RFB, dense feature fusion, side classifiers, spatial attention, aggregation.
    Dffnet,
    /// Reduced decoder: RFB, side classifiers and aggregation only.
    Pdnet,
}

impl FromStr for Variant {
    type Err = DbdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dffnet" => Ok(Variant::Dffnet),
            "pdnet" => Ok(Variant::Pdnet),
            other => Err(DbdError::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneId,
    pub num_decoder_levels: usize,
    pub base_channels: usize,
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub variant: Variant,
    /// Extra depth classifiers next to every side classifier and the final one.
    pub depth_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneId::Tiny,
            num_decoder_levels: 4,
            base_channels: 16,
            input_size: (320, 320),
            variant: Variant::Dffnet,
            depth_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn tiny(size: usize, variant: Variant) -> Self {
        Self {
            input_size: (size, size),
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_decoder_levels == 0 {
            return Err(DbdError::Config(
                "num_decoder_levels must be at least 1".into(),
            ));
        }
        if self.num_decoder_levels > 6 {
            return Err(DbdError::Config(format!(
                "num_decoder_levels {} exceeds the supported maximum of 6",
                self.num_decoder_levels
            )));
        }
        if self.base_channels == 0 {
            return Err(DbdError::Config("base_channels must be positive".into()));
        }
        let factor = 1usize << self.num_decoder_levels;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(DbdError::Config(format!(
                "input size {h}x{w} is not divisible by 2^{} = {factor}",
                self.num_decoder_levels
            )));
        }
        Ok(())
    }

    /// Spatial size of encoder stage `k` (0-based).
    pub fn stage_size(&self, k: usize) -> (usize, usize) {
        (self.input_size.0 >> (k + 1), self.input_size.1 >> (k + 1))
    }
}
