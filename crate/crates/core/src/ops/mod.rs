pub mod conv;
pub mod norm;
pub mod params;
pub mod resize;

pub use conv::{conv2d, ConvGeometry};
pub use norm::GroupNorm;
pub use params::{Conv, Gain, Init, ParamStore};
pub use resize::{resize_array, resize_bilinear};

use candle_core::Tensor;

/// Logistic function, `0.5 * tanh(x / 2) + 0.5`.
pub fn sigmoid(x: &Tensor) -> crate::Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}
