//! Decoder building blocks.

use candle_core::Tensor;

use crate::error::{DbdError, Result};
use crate::ops::{resize_bilinear, Conv, Gain, Init};

pub const RFB_DILATIONS: [usize; 3] = [1, 3, 5];

/// Receptive field block: three dilated branches plus a 1x1 shortcut,
/// concatenated and fused by a 1x1 convolution.
pub struct Rfb {
    branches: Vec<(Conv, Conv)>,
    shortcut: Conv,
    fuse: Conv,
}

impl Rfb {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bw = (cout / 2).max(4);
        let branches = RFB_DILATIONS
            .iter()
            .map(|&d| {
                Ok((
                    Conv::pointwise(
                        init,
                        &format!("{name}.branch_d{d}.reduce"),
                        (cin, bw),
                        Gain::Relu,
                    )?,
                    Conv::same3(init, &format!("{name}.branch_d{d}.dilated"), (bw, bw), d)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let shortcut = Conv::pointwise(init, &format!("{name}.shortcut"), (cin, cout), Gain::Relu)?;
        let fuse = Conv::pointwise(
            init,
            &format!("{name}.fuse"),
            (RFB_DILATIONS.len() * bw + cout, cout),
            Gain::Relu,
        )?;
        Ok(Self {
            branches,
            shortcut,
            fuse,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(self.branches.len() + 1);
        for (reduce, dilated) in &self.branches {
            parts.push(dilated.forward(&reduce.forward(x)?.relu()?)?.relu()?);
        }
        parts.push(self.shortcut.forward(x)?);
        let cat = Tensor::cat(&parts, 1)?;
        Ok(self.fuse.forward(&cat)?.relu()?)
    }
}

/// Dense top-down fusion for one level: every deeper level is resized to this
/// level, concatenated with it and fused by a 1x1 + 3x3 pair.
pub struct DffmLevel {
    squeeze: Conv,
    refine: Conv,
}

impl DffmLevel {
    pub fn new(init: &mut Init<'_>, name: &str, inputs: usize, width: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Conv::pointwise(
                init,
                &format!("{name}.squeeze"),
                (inputs * width, width),
                Gain::Relu,
            )?,
            refine: Conv::same3(init, &format!("{name}.refine"), (width, width), 1)?,
        })
    }

    /// `own` is this level's feature; `deeper` are all coarser levels.
    pub fn forward(&self, own: &Tensor, deeper: &[Tensor]) -> Result<Tensor> {
        let (_, _, h, w) = own.dims4()?;
        let mut parts = Vec::with_capacity(deeper.len() + 1);
        parts.push(own.clone());
        for d in deeper {
            parts.push(resize_bilinear(d, (h, w))?);
        }
        let cat = Tensor::cat(&parts, 1)?;
        let x = self.squeeze.forward(&cat)?.relu()?;
        Ok(self.refine.forward(&x)?.relu()?)
    }
}

/// Weights `features` `[B, C, h, w]` by an attention map `[B, 1, h, w]` in `[0, 1]`.
///
/// The attention map is the side prediction itself (the sigmoid of the side
/// classifier's logits), broadcast over channels.
pub fn spatial_attention(prediction: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (pb, pc, ph, pw) = prediction.dims4()?;
    let (fb, _, fh, fw) = features.dims4()?;
    if pc != 1 || pb != fb || (ph, pw) != (fh, fw) {
        return Err(DbdError::Dimension(format!(
            "attention map {:?} does not match features {:?}",
            prediction.dims(),
            features.dims()
        )));
    }
    Ok(features.broadcast_mul(prediction)?)
}
