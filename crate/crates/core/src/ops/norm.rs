use candle_core::{Tensor, D};

use super::params::Init;
use crate::error::Result;

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalisation with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

/// Largest of 4, 2, 1 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    [4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

impl GroupNorm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Result<Self> {
        let weight = init
            .store
            .ones(format!("{name}.weight"), &[channels], init.device)?;
        let bias = init
            .store
            .zeros(format!("{name}.bias"), &[channels], init.device)?;
        Ok(Self {
            weight,
            bias,
            groups: default_groups(channels),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let centred = g.broadcast_sub(&g.mean_keepdim(D::Minus1)?)?;
        let std = centred
            .sqr()?
            .mean_keepdim(D::Minus1)?
            .affine(1.0, GROUP_NORM_EPS)?
            .sqrt()?;
        let normed = centred.broadcast_div(&std)?.reshape((b, c, h, w))?;
        let scale = self.weight.reshape((1, c, 1, 1))?;
        let shift = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}
