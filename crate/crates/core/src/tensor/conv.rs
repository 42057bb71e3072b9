//! Direct 2-D cross-correlation kernels.
//!
//! Every output element is accumulated as `bias`, then input channel, then
//! kernel row, then kernel column, the same order as a naive sliding-window
//! loop, so results match such a loop bitwise. Parallelism (when enabled)
//! only splits independent output planes and never changes that order.

use rayon::prelude::*;

use super::{dims4, Tensor};
use crate::error::{Error, Result};

/// Geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride 1 with `padding = k / 2`, which preserves spatial extent for odd `k`.
    pub fn same(k: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let (b, cin, h, w) = dims4(input)?;
        let (cout, cin_g, kh, kw) = dims4(kernel)?;
        if spec.stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv2d groups={} must divide Cin={cin} and Cout={cout}",
                spec.groups
            )));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::dim(format!(
                "kernel {kernel:?} expects {cin_g} input channels per group, input has {cin} over {} groups",
                spec.groups
            )));
        }
        if let Some(bs) = bias {
            if bs != [cout] {
                return Err(Error::dim(format!("bias {bs:?} does not match Cout={cout}")));
            }
        }
        let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if kh == 0 || kw == 0 || kh > hp || kw > wp {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
            )));
        }
        Ok(Geometry {
            b,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / spec.groups,
            kh,
            kw,
            ho: (hp - kh) / spec.stride + 1,
            wo: (wp - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.cout, self.ho, self.wo]
    }

    /// Output-index range `[lo, hi)` whose input coordinate `o * stride + k - pad`
    /// lands inside `0..extent`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent-1
        let last = extent as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.clamp(0, out_extent as isize) as usize;
        let hi = hi.clamp(0, out_extent as isize) as usize;
        (lo, hi.max(lo))
    }

    fn flops(&self) -> usize {
        self.b * self.cout * self.cin_g * self.kh * self.kw * self.ho * self.wo
    }
}

// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 18;

/// Forward cross-correlation on raw tensors (no graph).
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    let g = Geometry::new(
        input.shape(),
        kernel.shape(),
        bias.map(|b| b.shape()),
        spec,
    )?;
    Ok(Tensor::from_parts(
        g.out_shape(),
        forward(&g, input.data(), kernel.data(), bias.map(|b| b.data())),
    ))
}

pub(crate) fn forward(g: &Geometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.b * g.cout * plane_out];
    let body = |(idx, plane): (usize, &mut [f64])| {
        let (bi, co) = (idx / g.cout, idx % g.cout);
        forward_plane(g, input, kernel, bias, bi, co, plane);
    };
    if g.flops() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane_out).enumerate().for_each(body);
    } else {
        out.chunks_mut(plane_out).enumerate().for_each(body);
    }
    out
}

fn forward_plane(
    g: &Geometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    bi: usize,
    co: usize,
    plane: &mut [f64],
) {
    plane.fill(bias.map_or(0.0, |b| b[co]));
    let group = co / g.cout_g;
    let plane_in = g.h * g.w;
    for cl in 0..g.cin_g {
        let ci = group * g.cin_g + cl;
        let src = &input[(bi * g.cin + ci) * plane_in..][..plane_in];
        let wbase = (co * g.cin_g + cl) * g.kh * g.kw;
        let taps = &kernel[wbase..wbase + g.kh * g.kw];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
            let row_taps = &taps[ky * g.kw..(ky + 1) * g.kw];
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ky - g.pad;
                let src_row = &src[iy * g.w..(iy + 1) * g.w];
                let dst_row = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                accumulate_row(g, row_taps, src_row, dst_row);
            }
        }
    }
}

/// `dst[ox] += sum_kx taps[kx] * src[ox*stride + kx - pad]`, adding the taps
/// one at a time in `kx` order.
#[inline]
fn accumulate_row(g: &Geometry, taps: &[f64], src: &[f64], dst: &mut [f64]) {
    if g.stride == 1 && g.kw == 3 && g.pad == 1 && g.w >= 2 && dst.len() == src.len() {
        accumulate_row_3x_same(taps, src, dst);
        return;
    }
    for (kx, &wt) in taps.iter().enumerate() {
        let (lo, hi) = g.valid_range(kx, g.w, g.wo);
        if g.stride == 1 {
            let s0 = lo + kx - g.pad;
            for (d, s) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
                *d += wt * s;
            }
        } else {
            for ox in lo..hi {
                dst[ox] += wt * src[ox * g.stride + kx - g.pad];
            }
        }
    }
}

/// Fast path for the common 3-wide, stride-1, pad-1 row: the three taps are
/// fused into one pass but still added left to right.
#[inline]
fn accumulate_row_3x_same(taps: &[f64], src: &[f64], dst: &mut [f64]) {
    let n = dst.len();
    let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
    // left border: no kx=0 tap
    dst[0] = dst[0] + w1 * src[0] + w2 * src[1];
    let (left, mid, right) = (&src[..n - 2], &src[1..n - 1], &src[2..]);
    for (((d, a), b), c) in dst[1..n - 1].iter_mut().zip(left).zip(mid).zip(right) {
        *d = *d + w0 * a + w1 * b + w2 * c;
    }
    // right border: no kx=2 tap
    dst[n - 1] = dst[n - 1] + w0 * src[n - 2] + w1 * src[n - 1];
}

/// Gradient with respect to the input.
pub(crate) fn backward_input(g: &Geometry, kernel: &[f64], gout: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let mut gin = vec![0.0; g.b * g.cin * plane_in];
    let body = |(idx, plane): (usize, &mut [f64])| {
        let (bi, ci) = (idx / g.cin, idx % g.cin);
        let group = ci / g.cin_g;
        let cl = ci % g.cin_g;
        let plane_out = g.ho * g.wo;
        let fused = g.stride == 1 && g.kw == 3 && g.pad == 1 && g.w >= 2 && g.wo == g.w;
        for co in group * g.cout_g..(group + 1) * g.cout_g {
            let go = &gout[(bi * g.cout + co) * plane_out..][..plane_out];
            let wbase = (co * g.cin_g + cl) * g.kh * g.kw;
            if fused {
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                    let w = &kernel[wbase + ky * 3..wbase + ky * 3 + 3];
                    // transposed taps: input x receives w[kx] * gout[x + 1 - kx]
                    let taps = [w[2], w[1], w[0]];
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - g.pad;
                        accumulate_row_3x_same(
                            &taps,
                            &go[oy * g.wo..(oy + 1) * g.wo],
                            &mut plane[iy * g.w..(iy + 1) * g.w],
                        );
                    }
                }
                continue;
            }
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wt = kernel[wbase + ky * g.kw + kx];
                    let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let go_row = &go[oy * g.wo..(oy + 1) * g.wo];
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let s0 = ox_lo + kx - g.pad;
                            for (d, s) in dst[s0..s0 + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&go_row[ox_lo..ox_hi])
                            {
                                *d += wt * s;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox * g.stride + kx - g.pad] += wt * go_row[ox];
                            }
                        }
                    }
                }
            }
        }
    };
    if g.flops() >= PAR_THRESHOLD {
        gin.par_chunks_mut(plane_in).enumerate().for_each(body);
    } else {
        gin.chunks_mut(plane_in).enumerate().for_each(body);
    }
    gin
}

/// Gradient with respect to the kernel, summed over the batch in order.
pub(crate) fn backward_kernel(g: &Geometry, input: &[f64], gout: &[f64]) -> Vec<f64> {
    let per_co = g.cin_g * g.kh * g.kw;
    let mut gk = vec![0.0; g.cout * per_co];
    let body = |(co, chunk): (usize, &mut [f64])| {
        let group = co / g.cout_g;
        let plane_out = g.ho * g.wo;
        let plane_in = g.h * g.w;
        for bi in 0..g.b {
            let go = &gout[(bi * g.cout + co) * plane_out..][..plane_out];
            for cl in 0..g.cin_g {
                let ci = group * g.cin_g + cl;
                let src = &input[(bi * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.ho);
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let go_row = &go[oy * g.wo..(oy + 1) * g.wo];
                            let src_row = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let s0 = ox_lo + kx - g.pad;
                                acc += dot(&go_row[ox_lo..ox_hi], &src_row[s0..s0 + (ox_hi - ox_lo)]);
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += go_row[ox] * src_row[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        chunk[(cl * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    };
    if g.flops() >= PAR_THRESHOLD {
        gk.par_chunks_mut(per_co).enumerate().for_each(body);
    } else {
        gk.chunks_mut(per_co).enumerate().for_each(body);
    }
    gk
}

pub(crate) fn backward_bias(g: &Geometry, gout: &[f64]) -> Vec<f64> {
    let plane_out = g.ho * g.wo;
    let mut gb = vec![0.0; g.cout];
    for bi in 0..g.b {
        for (co, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(bi * g.cout + co) * plane_out..][..plane_out]
                .iter()
                .sum::<f64>();
        }
    }
    gb
}

// Four independent lanes, combined in a fixed order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for i in chunks * 4..a.len() {
        acc += a[i] * b[i];
    }
    acc
}
