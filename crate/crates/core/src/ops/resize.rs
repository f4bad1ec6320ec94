//! Bilinear resampling with half-pixel centres (the `align_corners = false`
//! convention). The same interpolation weights back both the differentiable
//! tensor path and the plain-array path used for data and evaluation.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::error::Result;

/// `(i0, i1, frac)` per output index: `out = (1 - frac) * in[i0] + frac * in[i1]`.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            if i0 + 1 >= in_len {
                (i0, i0, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Row-stochastic `[out_len, in_len]` interpolation matrix.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (o, (i0, i1, frac)) in bilinear_taps(in_len, out_len).into_iter().enumerate() {
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

fn matrix_tensor(in_len: usize, out_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = Tensor::from_vec(bilinear_matrix(in_len, out_len), (out_len, in_len), device)?;
    Ok(m.to_dtype(dtype)?)
}

/// Differentiable bilinear resize of a `[B, C, h, w]` tensor.
pub fn resize_bilinear(x: &Tensor, (out_h, out_w): (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mw = matrix_tensor(w, out_w, x.dtype(), x.device())?.t()?;
    let mh = matrix_tensor(h, out_h, x.dtype(), x.device())?;
    let rows = x.broadcast_matmul(&mw)?;
    Ok(mh.broadcast_matmul(&rows)?)
}

pub fn resize_array(src: ArrayView2<'_, f32>, (out_h, out_w): (usize, usize)) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = (1.0 - fx) * src[[y0, x0]] as f64 + fx * src[[y0, x1]] as f64;
        let bottom = (1.0 - fx) * src[[y1, x0]] as f64 + fx * src[[y1, x1]] as f64;
        ((1.0 - fy) * top + fy * bottom) as f32
    })
}
