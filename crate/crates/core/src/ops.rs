//! Forward and backward kernels for the primitive layer set.
//!
//! All forward kernels are pure. Tensors are `[C, H, W]` for images and
//! feature maps, `[C_out, C_in, kH, kW]` for convolution kernels.

use crate::error::{rejected, Result};
use crate::tensor::Tensor;

/// Geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = input.dims3()?;
        let [c_out, k_cin, kh, kw] = kernel.shape()[..] else {
            return Err(rejected(format!("kernel must be rank 4, got {:?}", kernel.shape())));
        };
        if k_cin != c_in {
            return Err(rejected(format!("kernel expects {k_cin} input channels, input has {c_in}")));
        }
        if bias.shape() != [c_out] {
            return Err(rejected(format!("bias shape {:?} != [{c_out}]", bias.shape())));
        }
        if stride == 0 {
            return Err(rejected("stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(rejected(format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad)));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output positions along one axis whose tap at kernel offset `k` lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // o*s + k - pad >= 0
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // o*s + k - pad <= extent - 1
        let top = extent - 1 + self.pad;
        let hi = if top < k { 0 } else { ((top - k) / s + 1).min(out) };
        (lo.min(hi), hi)
    }
}

/// Zero-padded cross-correlation plus bias.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, bias, stride, pad)?;
    input.check_finite("conv input")?;
    kernel.check_finite("conv kernel")?;
    bias.check_finite("conv bias")?;
    let (x, k) = (input.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias.data()[co]);
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.out_h);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.out_w..(oy + 1) * g.out_w];
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let n = ox1 - ox0;
                            for (dst, src) in orow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *dst += wv * src;
                            }
                        } else {
                            for (j, dst) in orow[ox0..ox1].iter_mut().enumerate() {
                                *dst += wv * row[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input, kernel, bias, stride, pad)?;
    if grad_out.shape() != [g.c_out, g.out_h, g.out_w] {
        return Err(rejected(format!("conv grad shape {:?} mismatch", grad_out.shape())));
    }
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let plane = g.out_h * g.out_w;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let gop = &go[co * plane..(co + 1) * plane];
        gb[co] = gop.iter().sum();
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.out_h);
                for kx in 0..g.kw {
                    let kidx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = k[kidx];
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let ix0 = ox0 * g.stride + kx - g.pad;
                        let grow = &gop[oy * g.out_w + ox0..oy * g.out_w + ox1];
                        let roff = base + iy * g.w;
                        if g.stride == 1 {
                            let n = ox1 - ox0;
                            let row = &x[roff + ix0..roff + ix0 + n];
                            acc += grow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                            for (dst, gv) in gx[roff + ix0..roff + ix0 + n].iter_mut().zip(grow) {
                                *dst += wv * gv;
                            }
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                let ix = roff + ix0 + j * g.stride;
                                acc += gv * x[ix];
                                gx[ix] += wv * gv;
                            }
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.c_out], gb)?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.same_shape(grad_out)?;
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Result of a max-pooling pass: pooled values plus, for every output cell,
/// the flat input index that won the window.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Max pooling. Ties go to the smallest flat input index.
pub fn maxpool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<Pooled> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(rejected("pool window and stride must be positive"));
    }
    if h < window || w < window {
        return Err(rejected(format!("pool window {window} larger than input {h}x{w}")));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = ch * h * w + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(Pooled { output: Tensor::new(vec![c, oh, ow], out)?, argmax })
}

/// Routes each output gradient to its recorded argmax only.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(rejected("argmax table does not match pooled gradient"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

/// Global average pooling over an `n x n` grid: `f_z = (1/n^2) * sum_ij g_z(i,j)`.
pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let (d, h, w) = input.dims3()?;
    if h != w {
        return Err(rejected(format!("global average pooling expects square maps, got {h}x{w}")));
    }
    let norm = (h * w) as f64;
    let data = (0..d).map(|z| input.channel(z).iter().sum::<f64>() / norm).collect();
    Tensor::new(vec![d], data)
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [d, h, w] = input_shape[..] else {
        return Err(rejected("gap input must be rank 3"));
    };
    if grad_out.shape() != [d] {
        return Err(rejected("gap gradient shape mismatch"));
    }
    let norm = (h * w) as f64;
    let mut data = Vec::with_capacity(d * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / norm, h * w));
    }
    Tensor::new(input_shape.to_vec(), data)
}
