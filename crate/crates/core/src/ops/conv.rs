//! 2-D convolution (cross-correlation) with zero padding, stride and channel groups.
//!
//! Kernels are laid out `(c_out, c_in / groups, k_h, k_w)`. Dense groups go through
//! im2col + GEMM; depth-wise groups (one input and one output channel) use a
//! direct loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with dimension-preserving padding for an odd kernel.
    pub const fn same(k: usize) -> Self {
        Self::new(1, (k - 1) / 2, 1)
    }

    pub const fn with_groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub fn out_dim(&self, input: usize, k: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= k && self.stride > 0).then(|| (padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    input: Shape4,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(input: Shape4, kernel: Shape4, spec: ConvSpec) -> Result<Self> {
        if spec.stride == 0 || spec.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d requires stride >= 1 and groups >= 1, got {spec:?}"
            )));
        }
        if kernel.c * spec.groups != input.c || kernel.b % spec.groups != 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input vs kernel)",
                left: input,
                right: kernel,
            });
        }
        let (Some(oh), Some(ow)) = (spec.out_dim(input.h, kernel.h), spec.out_dim(input.w, kernel.w))
        else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: input,
                reason: format!(
                    "{}x{} kernel does not fit with padding {}",
                    kernel.h, kernel.w, spec.padding
                ),
            });
        };
        Ok(Self {
            input,
            c_out: kernel.b,
            cin_g: kernel.c,
            cout_g: kernel.b / spec.groups,
            kh: kernel.h,
            kw: kernel.w,
            oh,
            ow,
            spec,
        })
    }

    fn out_shape(&self) -> Shape4 {
        Shape4::new(self.input.b, self.c_out, self.oh, self.ow)
    }

    fn patch(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Input row/col for output row/col and kernel offset, `None` inside the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.spec.stride + k) as isize - self.spec.padding as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// Forward convolution. `bias`, when present, has one entry per output channel.
pub fn conv2d<T: Real>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: ConvSpec,
) -> Result<Tensor4<T>> {
    let g = Geometry::new(input.shape(), kernel.shape(), spec)?;
    if let Some(bias) = bias {
        if bias.len() != g.c_out {
            return Err(Error::InvalidArgument(format!(
                "conv2d bias has {} entries, kernel has {} output channels",
                bias.len(),
                g.c_out
            )));
        }
    }
    let mut out = Tensor4::zeros(g.out_shape());
    let (h, w) = (g.input.h, g.input.w);
    let plane_in = h * w;
    let p = g.positions();
    let k = g.patch();
    let mut cols = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![T::ZERO; k * p]
    };

    for b in 0..g.input.b {
        let src = input.sample(b);
        let dst = out.sample_mut(b);
        for grp in 0..spec.groups {
            let src_g = &src[grp * g.cin_g * plane_in..(grp + 1) * g.cin_g * plane_in];
            let dst_g = &mut dst[grp * g.cout_g * p..(grp + 1) * g.cout_g * p];
            let w_g = &kernel.data()[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
            if g.is_depthwise() {
                depthwise_forward(&g, src_g, w_g, dst_g);
            } else if g.is_pointwise() {
                T::gemm(g.cout_g, k, p, w_g, (k as isize, 1), src_g, (p as isize, 1), T::ZERO, dst_g, p);
            } else {
                im2col(&g, src_g, &mut cols);
                T::gemm(g.cout_g, k, p, w_g, (k as isize, 1), &cols, (p as isize, 1), T::ZERO, dst_g, p);
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut dst[c * p..(c + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Vector-Jacobian product of [`conv2d`] for upstream gradient `grad_out`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    spec: ConvSpec,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input.shape(), kernel.shape(), spec)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward (expected output vs upstream gradient)",
            left: g.out_shape(),
            right: grad_out.shape(),
        });
    }
    let mut grad_in = Tensor4::zeros(g.input);
    let mut grad_k = Tensor4::zeros(kernel.shape());
    let mut grad_b = vec![T::ZERO; g.c_out];
    let plane_in = g.input.h * g.input.w;
    let p = g.positions();
    let k = g.patch();
    let dense = !(g.is_pointwise() || g.is_depthwise());
    let mut cols = if dense { vec![T::ZERO; k * p] } else { Vec::new() };
    let mut grad_cols = if dense { vec![T::ZERO; k * p] } else { Vec::new() };

    for b in 0..g.input.b {
        let src = input.sample(b);
        let gy = grad_out.sample(b);
        for (c, gb) in grad_b.iter_mut().enumerate() {
            *gb += gy[c * p..(c + 1) * p].iter().fold(T::ZERO, |a, &v| a + v);
        }
        let gx = grad_in.sample_mut(b);
        for grp in 0..spec.groups {
            let in_range = grp * g.cin_g * plane_in..(grp + 1) * g.cin_g * plane_in;
            let src_g = &src[in_range.clone()];
            let gy_g = &gy[grp * g.cout_g * p..(grp + 1) * g.cout_g * p];
            let k_range = grp * g.cout_g * k..(grp + 1) * g.cout_g * k;
            let w_g = &kernel.data()[k_range.clone()];
            let gw_g = &mut grad_k.data_mut()[k_range];
            let gx_g = &mut gx[in_range];
            if g.is_depthwise() {
                depthwise_backward(&g, src_g, w_g, gy_g, gx_g, gw_g);
                continue;
            }
            if g.is_pointwise() {
                // dW += dY * x^T, dx = W^T * dY
                T::gemm(g.cout_g, p, k, gy_g, (p as isize, 1), src_g, (1, p as isize), T::ONE, gw_g, k);
                T::gemm(k, g.cout_g, p, w_g, (1, k as isize), gy_g, (p as isize, 1), T::ZERO, gx_g, p);
            } else {
                im2col(&g, src_g, &mut cols);
                T::gemm(g.cout_g, p, k, gy_g, (p as isize, 1), &cols, (1, p as isize), T::ONE, gw_g, k);
                T::gemm(k, g.cout_g, p, w_g, (1, k as isize), gy_g, (p as isize, 1), T::ZERO, &mut grad_cols, p);
                col2im(&g, &grad_cols, gx_g);
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        kernel: grad_k,
        bias: grad_b,
    })
}

fn im2col<T: Real>(g: &Geometry, src: &[T], cols: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    let p = g.positions();
    for ci in 0..g.cin_g {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ky, h) {
                        None => line.fill(T::ZERO),
                        Some(iy) => {
                            let src_row = &plane[iy * w..(iy + 1) * w];
                            for (ox, d) in line.iter_mut().enumerate() {
                                *d = match g.source(ox, kx, w) {
                                    Some(ix) => src_row[ix],
                                    None => T::ZERO,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geometry, cols: &[T], dst: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    let p = g.positions();
    for ci in 0..g.cin_g {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, ky, h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.source(ox, kx, w) {
                            plane[iy * w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(g: &Geometry, src: &[T], weights: &[T], dst: &mut [T]) {
    let (h, w) = (g.input.h, g.input.w);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let mut acc = T::ZERO;
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, h) else { continue };
                for kx in 0..g.kw {
                    if let Some(ix) = g.source(ox, kx, w) {
                        acc += weights[ky * g.kw + kx] * src[iy * w + ix];
                    }
                }
            }
            dst[oy * g.ow + ox] = acc;
        }
    }
}

fn depthwise_backward<T: Real>(
    g: &Geometry,
    src: &[T],
    weights: &[T],
    gy: &[T],
    gx: &mut [T],
    gw: &mut [T],
) {
    let (h, w) = (g.input.h, g.input.w);
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let d = gy[oy * g.ow + ox];
            for ky in 0..g.kh {
                let Some(iy) = g.source(oy, ky, h) else { continue };
                for kx in 0..g.kw {
                    if let Some(ix) = g.source(ox, kx, w) {
                        gw[ky * g.kw + kx] += d * src[iy * w + ix];
                        gx[iy * w + ix] += d * weights[ky * g.kw + kx];
                    }
                }
            }
        }
    }
}
