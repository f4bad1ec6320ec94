//! 2-D convolution lowered to `im2col` + batched matmul. The unfold step and
//! its adjoint are custom ops over plain strided loops.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{DbdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one spatial axis, or `None` when the window does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

struct Im2Col {
    geom: ConvGeometry,
}

struct Col2Im {
    geom: ConvGeometry,
    channels: usize,
    height: usize,
    width: usize,
}

fn unfold<T: WithDType>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = g.kernel;
    let rows = c * k * k;
    let plane = ho * wo;
    let mut dst = vec![T::zero(); b * rows * plane];
    for bi in 0..b {
        for ci in 0..c {
            let src_plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut dst[(bi * rows + row) * plane..(bi * rows + row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix =
                                (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn fold<T: WithDType>(
    cols: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = g.kernel;
    let rows = c * k * k;
    let plane = ho * wo;
    let mut dst = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let dst_plane = &mut dst[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let col = &cols[(bi * rows + row) * plane..(bi * rows + row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst_plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix =
                                (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += col[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv unfold expects a contiguous tensor"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (Some(ho), Some(wo)) = (self.geom.out_len(h), self.geom.out_len(w)) else {
            candle_core::bail!("convolution window larger than padded input {h}x{w}")
        };
        let k = self.geom.kernel;
        let shape = Shape::from((b, c * k * k, ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(unfold(contiguous(v, layout)?, dims, self.geom, (ho, wo)))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(unfold(contiguous(v, layout)?, dims, self.geom, (ho, wo)))
            }
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (_, c, h, w) = arg.dims4()?;
        let fold = Col2Im {
            geom: self.geom,
            channels: c,
            height: h,
            width: w,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let dims = (b, self.channels, self.height, self.width);
        let ho = self.geom.out_len(self.height).unwrap_or(0);
        let wo = self.geom.out_len(self.width).unwrap_or(0);
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(fold(contiguous(v, layout)?, dims, self.geom, (ho, wo)))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(fold(contiguous(v, layout)?, dims, self.geom, (ho, wo)))
            }
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from(dims)))
    }
}

/// `x` is `[B, C, H, W]`, `weight` is `[O, C, k, k]`, optional `bias` is `[O]`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != geom.kernel || kw != geom.kernel {
        return Err(DbdError::Dimension(format!(
            "conv weight [{o}, {wc}, {kh}, {kw}] does not match input with {c} channels and kernel {}",
            geom.kernel
        )));
    }
    let (Some(ho), Some(wo)) = (geom.out_len(h), geom.out_len(w)) else {
        return Err(DbdError::Dimension(format!(
            "input {h}x{w} is smaller than the {}x{} window",
            geom.kernel, geom.kernel
        )));
    };
    let out = if geom.kernel == 1 && geom.stride == 1 && geom.padding == 0 {
        let flat = x.reshape((b, c, h * w))?;
        weight.reshape((o, c))?.broadcast_matmul(&flat)?
    } else {
        let cols = x.contiguous()?.apply_op1(Im2Col { geom })?;
        weight
            .reshape((o, c * geom.kernel * geom.kernel))?
            .broadcast_matmul(&cols)?
    };
    let out = out.reshape((b, o, ho, wo))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, o, 1, 1))?)?,
        None => out,
    })
}
