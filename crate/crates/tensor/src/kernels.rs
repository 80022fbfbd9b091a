//! Raw volumetric kernels over flat row-major buffers.
//!
//! Parallel loops hand each worker a disjoint slice of the output and keep the
//! per-element accumulation order fixed, so the thread count never changes a
//! result bit.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(ishape: [usize; 4], kshape: &[usize], pad: usize) -> Result<Self> {
        let [cin, x, y, z] = ishape;
        let [cout, kcin, kx, ky, kz] = match *kshape {
            [a, b, c, d, e] => [a, b, c, d, e],
            _ => return shape_err(format!("conv kernel must be rank 5, got {kshape:?}")),
        };
        if kcin != cin {
            return shape_err(format!(
                "conv kernel expects {kcin} input channels, input has {cin}"
            ));
        }
        let mut output = [0; 3];
        for (o, (d, k)) in output.iter_mut().zip([(x, kx), (y, ky), (z, kz)]) {
            if d + 2 * pad < k {
                return shape_err(format!(
                    "kernel {k} larger than padded extent {}",
                    d + 2 * pad
                ));
            }
            *o = d + 2 * pad - k + 1;
        }
        Ok(Self {
            cin,
            cout,
            input: [x, y, z],
            kernel: [kx, ky, kz],
            output,
            pad,
        })
    }

    fn ivol(&self) -> usize {
        self.input.iter().product()
    }

    fn ovol(&self) -> usize {
        self.output.iter().product()
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `o` for which `o + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(pad: usize, k: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = out_len.min((len + pad).saturating_sub(k));
    (lo, hi.max(lo))
}

/// Visits every (output row, input row) pair touched by kernel tap `(a, b, c)`.
/// The callback receives the flat start offsets of the output and input z-runs
/// and the run length.
#[inline]
fn for_each_run(
    g: &ConvGeom,
    a: usize,
    b: usize,
    c: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [x, y, z] = g.input;
    let [_, oy, oz] = g.output;
    let p = g.pad;
    let (x0, x1) = valid_range(p, a, x, g.output[0]);
    let (y0, y1) = valid_range(p, b, y, oy);
    let (z0, z1) = valid_range(p, c, z, oz);
    if z1 <= z0 {
        return;
    }
    for ox in x0..x1 {
        let ix = ox + a - p;
        for oyy in y0..y1 {
            let iy = oyy + b - p;
            let obase = (ox * oy + oyy) * oz + z0;
            let ibase = (ix * y + iy) * z + z0 + c - p;
            f(obase, ibase, z1 - z0);
        }
    }
}

pub(crate) fn conv3d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let [_, ky, kz] = g.kernel;
    let mut out = vec![0.0; g.cout * ovol];
    out.par_chunks_mut(ovol).enumerate().for_each(|(co, o)| {
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..g.cin {
            let inp = &input[ci * ivol..(ci + 1) * ivol];
            let wbase = (co * g.cin + ci) * kvol;
            for a in 0..g.kernel[0] {
                for b in 0..ky {
                    for c in 0..kz {
                        let w = kernel[wbase + (a * ky + b) * kz + c];
                        for_each_run(g, a, b, c, |ob, ib, n| {
                            for (ov, iv) in o[ob..ob + n].iter_mut().zip(&inp[ib..ib + n]) {
                                *ov += w * iv;
                            }
                        });
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input(grad_out: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let [_, ky, kz] = g.kernel;
    let mut gin = vec![0.0; g.cin * ivol];
    gin.par_chunks_mut(ivol).enumerate().for_each(|(ci, gi)| {
        for co in 0..g.cout {
            let go = &grad_out[co * ovol..(co + 1) * ovol];
            let wbase = (co * g.cin + ci) * kvol;
            for a in 0..g.kernel[0] {
                for b in 0..ky {
                    for c in 0..kz {
                        let w = kernel[wbase + (a * ky + b) * kz + c];
                        for_each_run(g, a, b, c, |ob, ib, n| {
                            for (iv, ov) in gi[ib..ib + n].iter_mut().zip(&go[ob..ob + n]) {
                                *iv += w * ov;
                            }
                        });
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv3d_backward_kernel(grad_out: &[f64], input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ivol, ovol, kvol) = (g.ivol(), g.ovol(), g.kvol());
    let [_, ky, kz] = g.kernel;
    let mut gk = vec![0.0; g.cout * g.cin * kvol];
    gk.par_chunks_mut(g.cin * kvol)
        .enumerate()
        .for_each(|(co, gw)| {
            let go = &grad_out[co * ovol..(co + 1) * ovol];
            for ci in 0..g.cin {
                let inp = &input[ci * ivol..(ci + 1) * ivol];
                for a in 0..g.kernel[0] {
                    for b in 0..ky {
                        for c in 0..kz {
                            let mut s = 0.0;
                            for_each_run(g, a, b, c, |ob, ib, n| {
                                for (ov, iv) in go[ob..ob + n].iter().zip(&inp[ib..ib + n]) {
                                    s += ov * iv;
                                }
                            });
                            gw[ci * kvol + (a * ky + b) * kz + c] = s;
                        }
                    }
                }
            }
        });
    gk
}

pub(crate) fn channel_sums(grad_out: &[f64], channels: usize) -> Vec<f64> {
    let per = grad_out.len() / channels;
    grad_out.chunks(per).map(|c| c.iter().sum()).collect()
}

/// 2×2×2 max pool with stride 2. Returns the pooled values and, per output
/// cell, the flat input index that won (lowest linear index on ties).
pub(crate) fn maxpool2(input: &[f64], [c, x, y, z]: [usize; 4]) -> (Vec<f64>, Vec<usize>) {
    let (hx, hy, hz) = (x / 2, y / 2, z / 2);
    let mut out = Vec::with_capacity(c * hx * hy * hz);
    let mut arg = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        let base = ch * x * y * z;
        for i in 0..hx {
            for j in 0..hy {
                for k in 0..hz {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let idx = base + ((2 * i + dx) * y + 2 * j + dy) * z + 2 * k + dz;
                                if best_idx == usize::MAX || input[idx] > best {
                                    best = input[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour ×2 replication on every spatial axis.
pub(crate) fn upsample2(input: &[f64], [c, x, y, z]: [usize; 4]) -> Vec<f64> {
    let (ux, uy, uz) = (2 * x, 2 * y, 2 * z);
    let mut out = vec![0.0; c * ux * uy * uz];
    for ch in 0..c {
        for i in 0..ux {
            for j in 0..uy {
                let src = ((ch * x + i / 2) * y + j / 2) * z;
                let dst = ((ch * ux + i) * uy + j) * uz;
                for k in 0..uz {
                    out[dst + k] = input[src + k / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad_out: &[f64], [c, x, y, z]: [usize; 4]) -> Vec<f64> {
    let (ux, uy, uz) = (2 * x, 2 * y, 2 * z);
    let mut gin = vec![0.0; c * x * y * z];
    for ch in 0..c {
        for i in 0..ux {
            for j in 0..uy {
                let src = ((ch * x + i / 2) * y + j / 2) * z;
                let dst = ((ch * ux + i) * uy + j) * uz;
                for k in 0..uz {
                    gin[src + k / 2] += grad_out[dst + k];
                }
            }
        }
    }
    gin
}

fn strides(shape: [usize; 4]) -> [usize; 4] {
    [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ]
}

/// Sliding sum of width `w` along spatial `axis` (1..=3), valid positions only.
fn window_sum_axis(
    input: &[f64],
    shape: [usize; 4],
    axis: usize,
    w: usize,
) -> (Vec<f64>, [usize; 4]) {
    let mut oshape = shape;
    oshape[axis] = shape[axis] - w + 1;
    let is = strides(shape);
    let os = strides(oshape);
    let n: usize = oshape.iter().product();
    let mut out = vec![0.0; n];
    for c in 0..oshape[0] {
        for i in 0..oshape[1] {
            for j in 0..oshape[2] {
                for k in 0..oshape[3] {
                    let ibase = c * is[0] + i * is[1] + j * is[2] + k * is[3];
                    let mut s = 0.0;
                    for t in 0..w {
                        s += input[ibase + t * is[axis]];
                    }
                    out[c * os[0] + i * os[1] + j * os[2] + k * os[3]] = s;
                }
            }
        }
    }
    (out, oshape)
}

/// Adjoint of [`window_sum_axis`]: scatters each output back over its window.
fn window_sum_axis_adjoint(grad: &[f64], ishape: [usize; 4], axis: usize, w: usize) -> Vec<f64> {
    let mut oshape = ishape;
    oshape[axis] = ishape[axis] - w + 1;
    let is = strides(ishape);
    let os = strides(oshape);
    let mut gin = vec![0.0; ishape.iter().product()];
    for c in 0..oshape[0] {
        for i in 0..oshape[1] {
            for j in 0..oshape[2] {
                for k in 0..oshape[3] {
                    let g = grad[c * os[0] + i * os[1] + j * os[2] + k * os[3]];
                    let ibase = c * is[0] + i * is[1] + j * is[2] + k * is[3];
                    for t in 0..w {
                        gin[ibase + t * is[axis]] += g;
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn box_mean_forward(
    input: &[f64],
    shape: [usize; 4],
    w: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (a, s1) = window_sum_axis(input, shape, 1, w);
    let (b, s2) = window_sum_axis(&a, s1, 2, w);
    let (mut c, s3) = window_sum_axis(&b, s2, 3, w);
    let inv = 1.0 / (w * w * w) as f64;
    c.iter_mut().for_each(|v| *v *= inv);
    (c, s3)
}

pub(crate) fn box_mean_backward(grad: &[f64], ishape: [usize; 4], w: usize) -> Vec<f64> {
    let mut s1 = ishape;
    s1[1] -= w - 1;
    let mut s2 = s1;
    s2[2] -= w - 1;
    let inv = 1.0 / (w * w * w) as f64;
    let scaled: Vec<f64> = grad.iter().map(|g| g * inv).collect();
    let g2 = window_sum_axis_adjoint(&scaled, s2, 3, w);
    let g1 = window_sum_axis_adjoint(&g2, s1, 2, w);
    window_sum_axis_adjoint(&g1, ishape, 1, w)
}

/// Uniform `w³` window mean of a `[C, X, Y, Z]` tensor over valid positions,
/// giving `[C, X-w+1, Y-w+1, Z-w+1]`.
pub fn box_mean3d(input: &Tensor, w: usize) -> Result<Tensor> {
    let shape = input.dims4()?;
    if w == 0 || shape[1..].iter().any(|&d| d < w) {
        return shape_err(format!(
            "window {w} does not fit spatial dims {:?}",
            &shape[1..]
        ));
    }
    let (data, oshape) = box_mean_forward(input.data(), shape, w);
    Tensor::new(oshape.to_vec(), data)
}
