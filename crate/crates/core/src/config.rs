//! The run configuration file (TOML) and its resolution.
//!
//! Every section is optional; omitted keys take their defaults. The top-level
//! `seed` is propagated to every stochastic component during [`RunConfig::resolve`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{parse_regime, LensParams, MaskPolarity, SceneStyle, SynthConfig, MANIFEST_NAME};
use crate::distill::{DistillConfig, TrainConfig};
use crate::error::{DbdError, Result};
use crate::evaluation::EvalConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::seed::{derive_seed, tag};

/// Environment variable that relocates relative `output_dir` values.
pub const OUTPUT_ROOT_ENV: &str = "DBD_OUTPUT_ROOT";
/// Name of the resolved-config echo written next to artifacts.
pub const RESOLVED_CONFIG_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset_root: PathBuf,
    /// Defaults to `<dataset_root>/manifest.csv`.
    pub manifest: Option<PathBuf>,
    pub polarity: MaskPolarity,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data/synth"),
            manifest: None,
            polarity: MaskPolarity::default(),
        }
    }
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.dataset_root.join(MANIFEST_NAME))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub size: (usize, usize),
    /// Aperture regimes such as `"f1.8"`; each overrides the f-number of `lens`.
    pub regimes: Vec<String>,
    pub lens: LensParams,
    pub style: SceneStyle,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 16,
            size: (64, 64),
            regimes: vec!["f1.8".into(), "f16".into()],
            lens: LensParams::default(),
            style: SceneStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub losses: LossWeights,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            losses: LossWeights::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DbdError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DbdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DbdError::Config(e.to_string()))
    }

    /// Applies the run seed and the output-root override, fills level-dependent
    /// defaults and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.resolve_with_root(std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))?;
        Ok(self)
    }

    pub fn resolve_with_root(&mut self, output_root: Option<PathBuf>) -> Result<()> {
        if let Some(root) = output_root {
            if self.output_dir.is_relative() {
                self.output_dir = root.join(&self.output_dir);
            }
        }
        self.train.seed = self.seed;
        let levels = self.model.num_decoder_levels;
        for side in [
            &mut self.losses.alpha_side,
            &mut self.losses.rdffnet_beta_side,
        ] {
            if side.len() != levels && side.iter().all(|&w| w == 1.0) {
                *side = vec![1.0; levels];
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.losses.validate(self.model.num_decoder_levels)?;
        self.eval.validate()?;
        if let Some(b) = self.distill.beta_override {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(DbdError::Config(format!(
                    "distill.beta_override must be non-negative, got {b}"
                )));
            }
        }
        if self.distill.depth_teacher_channels == 0 {
            return Err(DbdError::Config(
                "distill.depth_teacher_channels must be positive".into(),
            ));
        }
        self.synth_config()?;
        Ok(())
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let s = &self.synth;
        let regimes = s
            .regimes
            .iter()
            .map(|r| parse_regime(r, s.lens))
            .collect::<Result<Vec<_>>>()?;
        if regimes.is_empty() {
            return Err(DbdError::Config(
                "synth.regimes must name at least one regime".into(),
            ));
        }
        Ok(SynthConfig {
            n: s.n,
            size: s.size,
            regimes,
            seed: derive_seed(self.seed, &[tag::SYNTH]),
            style: s.style,
        })
    }

    /// Seed of the synthetic depth teacher, mixed from the run seed and `distill.depth_teacher_seed`.
    pub fn depth_teacher_seed(&self) -> u64 {
        derive_seed(
            self.seed,
            &[tag::DEPTH_TEACHER, self.distill.depth_teacher_seed],
        )
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_NAME);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
