use candle_core::Tensor;

use super::config::{BackboneId, ModelConfig};
use crate::error::{DbdError, Result};
use crate::ops::{Conv, ConvGeometry, Gain, Init};

/// Multi-stage feature extractor. Stage `k` runs at `1 / 2^(k+1)` of the input resolution.
pub trait Backbone: Send + Sync {
    fn stage_channels(&self) -> Vec<usize>;
    /// One feature map per stage, shallow to deep.
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

fn downsample(init: &mut Init<'_>, name: &str, ch: (usize, usize)) -> Result<Conv> {
    Conv::new(init, name, ch, ConvGeometry::new(3, 2, 1, 1), Gain::Relu)?.normed(init, name)
}

fn conv3(init: &mut Init<'_>, name: &str, ch: (usize, usize)) -> Result<Conv> {
    Conv::same3(init, name, ch, 1)?.normed(init, name)
}

pub struct TinyBackbone {
    stages: Vec<(Conv, Conv)>,
}

impl TinyBackbone {
    pub fn new(init: &mut Init<'_>, prefix: &str, widths: &[usize]) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for (k, &w) in widths.iter().enumerate() {
            let down = downsample(init, &format!("{prefix}.stage{}.down", k + 1), (cin, w))?;
            let conv = conv3(init, &format!("{prefix}.stage{}.conv", k + 1), (w, w))?;
            stages.push((down, conv));
            cin = w;
        }
        Ok(Self { stages })
    }
}

impl Backbone for TinyBackbone {
    fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|(_, c)| c.out_channels()).collect()
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for (down, conv) in &self.stages {
            h = down.forward(&h)?.relu()?;
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

struct ResidualStage {
    down: Conv,
    conv_a: Conv,
    conv_b: Conv,
}

pub struct MediumBackbone {
    stages: Vec<ResidualStage>,
}

impl MediumBackbone {
    pub fn new(init: &mut Init<'_>, prefix: &str, widths: &[usize]) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(widths.len());
        for (k, &w) in widths.iter().enumerate() {
            let p = format!("{prefix}.stage{}", k + 1);
            stages.push(ResidualStage {
                down: downsample(init, &format!("{p}.down"), (cin, w))?,
                conv_a: conv3(init, &format!("{p}.block.conv_a"), (w, w))?,
                conv_b: conv3(init, &format!("{p}.block.conv_b"), (w, w))?,
            });
            cin = w;
        }
        Ok(Self { stages })
    }
}

impl Backbone for MediumBackbone {
    fn stage_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.conv_b.out_channels())
            .collect()
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.down.forward(&h)?.relu()?;
            let r = s.conv_b.forward(&s.conv_a.forward(&h)?.relu()?)?;
            h = (h + r)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Tiny or medium backbone for `cfg`; `large` has no built-in implementation.
pub fn build_builtin(
    init: &mut Init<'_>,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Box<dyn Backbone>> {
    let widths = cfg.backbone.stage_channels(cfg.num_decoder_levels);
    match (cfg.backbone, widths) {
        (BackboneId::Tiny, Some(w)) => Ok(Box::new(TinyBackbone::new(init, prefix, &w)?)),
        (BackboneId::Medium, Some(w)) => Ok(Box::new(MediumBackbone::new(init, prefix, &w)?)),
        _ => Err(DbdError::Config(
            "backbone \"large\" has no built-in implementation; supply one through build_model_with_backbone".into(),
        )),
    }
}
