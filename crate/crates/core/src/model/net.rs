use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::{build_builtin, Backbone};
use super::blocks::{spatial_attention, DffmLevel, Rfb};
use super::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CheckpointKind};
use super::config::{ModelConfig, Variant};
use crate::error::{DbdError, Result};
use crate::ops::{resize_bilinear, sigmoid, Conv, Gain, Init, ParamStore};

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One map per encoder stage, shallow to deep.
    pub stage_features: Vec<Tensor>,
    /// Deepest stage; the tap point for feature distillation.
    pub final_feature: Tensor,
}

#[derive(Debug, Clone)]
pub struct DepthOutput {
    pub final_prediction: Tensor,
    pub side_predictions: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, 1, H, W]` blur probabilities.
    pub final_prediction: Tensor,
    /// One `[B, 1, H, W]` map per decoder level, shallow to deep.
    pub side_predictions: Vec<Tensor>,
    pub encoder: EncoderOutput,
    /// Present only when the model was built with depth heads.
    pub depth: Option<DepthOutput>,
}

struct Level {
    rfb: Rfb,
    dffm: Option<DffmLevel>,
    side: Conv,
    depth_side: Option<Conv>,
    agg: Conv,
}

/// DFFNet / PDNet style defocus blur detector.
pub struct DbdNet {
    config: ModelConfig,
    store: ParamStore,
    backbone: Box<dyn Backbone>,
    levels: Vec<Level>,
    final_head: Conv,
    depth_final: Option<Conv>,
    device: Device,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<DbdNet> {
    build_model_with_backbone(config, seed, |init, cfg| {
        build_builtin(init, "encoder", cfg)
    })
}

/// Builds the network around a backbone produced by `make_backbone`, which
/// registers its own parameters through the supplied [`Init`].
pub fn build_model_with_backbone<F>(
    config: &ModelConfig,
    seed: u64,
    make_backbone: F,
) -> Result<DbdNet>
where
    F: FnOnce(&mut Init<'_>, &ModelConfig) -> Result<Box<dyn Backbone>>,
{
    config.validate()?;
    let device = Device::Cpu;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
        device: &device,
    };
    let backbone = make_backbone(&mut init, config)?;
    let widths = backbone.stage_channels();
    let n = config.num_decoder_levels;
    if widths.len() != n {
        return Err(DbdError::Config(format!(
            "backbone exposes {} stages but the decoder expects {n}",
            widths.len()
        )));
    }
    let d = config.base_channels;
    let mut levels = Vec::with_capacity(n);
    for (k, &cin) in widths.iter().enumerate() {
        let p = format!("decoder.level{}", k + 1);
        let dffm = match config.variant {
            Variant::Dffnet => Some(DffmLevel::new(&mut init, &format!("{p}.dffm"), n - k, d)?),
            Variant::Pdnet => None,
        };
        let depth_side = if config.depth_heads {
            Some(Conv::pointwise(
                &mut init,
                &format!("{p}.depth_side"),
                (d, 1),
                Gain::Linear,
            )?)
        } else {
            None
        };
        levels.push(Level {
            rfb: Rfb::new(&mut init, &format!("{p}.rfb"), cin, d)?,
            dffm,
            side: Conv::pointwise(&mut init, &format!("{p}.side"), (d, 1), Gain::Linear)?,
            depth_side,
            agg: Conv::same3(&mut init, &format!("{p}.agg"), (d, d), 1)?,
        });
    }
    let final_head = Conv::pointwise(&mut init, "decoder.final", (d, 1), Gain::Linear)?;
    let depth_final = if config.depth_heads {
        Some(Conv::pointwise(
            &mut init,
            "decoder.depth_final",
            (d, 1),
            Gain::Linear,
        )?)
    } else {
        None
    };
    Ok(DbdNet {
        config: config.clone(),
        store,
        backbone,
        levels,
        final_head,
        depth_final,
        device,
    })
}

impl DbdNet {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Channel count of [`EncoderOutput::final_feature`].
    pub fn feature_channels(&self) -> usize {
        *self
            .backbone
            .stage_channels()
            .last()
            .expect("at least one stage")
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.backbone.stage_channels()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let dims = images.dims();
        let (h, w) = self.config.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != h || dims[3] != w {
            return Err(DbdError::Dimension(format!(
                "expected images [B, 3, {h}, {w}], got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn encoder_features(&self, images: &Tensor) -> Result<EncoderOutput> {
        self.check_input(images)?;
        let stage_features = self.backbone.forward(images)?;
        for (k, f) in stage_features.iter().enumerate() {
            let (_, _, h, w) = f.dims4()?;
            if (h, w) != self.config.stage_size(k) {
                return Err(DbdError::Config(format!(
                    "backbone stage {} produced {h}x{w}, expected {:?}",
                    k + 1,
                    self.config.stage_size(k)
                )));
            }
        }
        let final_feature = stage_features
            .last()
            .cloned()
            .ok_or_else(|| DbdError::Config("backbone produced no stages".into()))?;
        Ok(EncoderOutput {
            stage_features,
            final_feature,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<ModelOutput> {
        let encoder = self.encoder_features(images)?;
        let full = self.config.input_size;
        let reduced = self
            .levels
            .iter()
            .zip(&encoder.stage_features)
            .map(|(lvl, f)| lvl.rfb.forward(f))
            .collect::<Result<Vec<_>>>()?;

        let mut weighted = Vec::with_capacity(self.levels.len());
        let mut side_predictions = Vec::with_capacity(self.levels.len());
        let mut depth_sides = Vec::new();
        for (k, lvl) in self.levels.iter().enumerate() {
            let fused = match &lvl.dffm {
                Some(dffm) => dffm.forward(&reduced[k], &reduced[k + 1..])?,
                None => reduced[k].clone(),
            };
            let logits = lvl.side.forward(&fused)?;
            side_predictions.push(sigmoid(&resize_bilinear(&logits, full)?)?);
            if let Some(head) = &lvl.depth_side {
                depth_sides.push(sigmoid(&resize_bilinear(&head.forward(&fused)?, full)?)?);
            }
            weighted.push(match lvl.dffm {
                Some(_) => spatial_attention(&sigmoid(&logits)?, &fused)?,
                None => fused,
            });
        }

        let mut agg: Option<Tensor> = None;
        for (k, lvl) in self.levels.iter().enumerate().rev() {
            let x = match agg {
                Some(deeper) => {
                    let (_, _, h, w) = weighted[k].dims4()?;
                    (&weighted[k] + resize_bilinear(&deeper, (h, w))?)?
                }
                None => weighted[k].clone(),
            };
            agg = Some(lvl.agg.forward(&x)?.relu()?);
        }
        let top = agg.expect("at least one level");
        let final_prediction = sigmoid(&resize_bilinear(&self.final_head.forward(&top)?, full)?)?;
        let depth = match &self.depth_final {
            Some(head) => Some(DepthOutput {
                final_prediction: sigmoid(&resize_bilinear(&head.forward(&top)?, full)?)?,
                side_predictions: depth_sides,
            }),
            None => None,
        };
        Ok(ModelOutput {
            final_prediction,
            side_predictions,
            encoder,
            depth,
        })
    }

    pub fn save(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> = self.store.snapshot()?;
        write_checkpoint(path, &tensors, header)
    }

    /// Loads weights from `path`; the stored model config must equal this model's.
    pub fn load(&self, path: &Path) -> Result<CheckpointHeader> {
        let (tensors, header) = read_checkpoint(path)?;
        if header.kind != CheckpointKind::Network {
            return Err(DbdError::Config(format!(
                "{} holds a {:?} checkpoint, not a network",
                path.display(),
                header.kind
            )));
        }
        header.expect_model(&self.config)?;
        let params = super::checkpoint::strip_prefix(&tensors, "model.");
        let params = if params.is_empty() { tensors } else { params };
        self.store.load(&params)?;
        Ok(header)
    }

    /// Builds a model from the config stored in the checkpoint and loads its weights.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (_, header) = read_checkpoint(path)?;
        let config = header
            .model
            .clone()
            .ok_or_else(|| DbdError::load(path, "checkpoint has no model configuration"))?;
        let model = build_model(&config, 0)?;
        let header = model.load(path)?;
        Ok((model, header))
    }
}
