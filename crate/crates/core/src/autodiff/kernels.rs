//! Numeric kernels shared by the recording graph and eager inference, so
//! both paths produce bit-identical values.

use crate::error::{Error, Result};

use super::Tensor;

/// Upper bound on the im2col buffer, in `f64` elements (16 MiB).
const COL_BUDGET: usize = 1 << 21;

/// Shape bookkeeping for a stride-1, zero-padded 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], pad: [usize; 3]) -> Result<Self> {
        let [n, cin, d, h, w] = <[usize; 5]>::try_from(input)
            .map_err(|_| Error::Shape(format!("conv3d input must be 5-rank, got {input:?}")))?;
        let [cout, wcin, kd, kh, kw] = <[usize; 5]>::try_from(weight)
            .map_err(|_| Error::Shape(format!("conv3d weight must be 5-rank, got {weight:?}")))?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if bias != [cout] {
            return Err(Error::Shape(format!(
                "conv3d bias must have shape [{cout}], got {bias:?}"
            )));
        }
        let spatial = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = spatial[a] + 2 * pad[a];
            if kernel[a] > padded {
                return Err(Error::Shape(format!(
                    "conv3d kernel {kernel:?} larger than padded input {spatial:?} + 2*{pad:?}"
                )));
            }
            output[a] = padded - kernel[a] + 1;
        }
        Ok(Self {
            batch: n,
            cin,
            cout,
            input: spatial,
            kernel,
            pad,
            output,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn planes_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.out_plane()).max(1)).clamp(1, self.output[0])
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }
}

/// For output index `o` along an axis, the input index hit by kernel tap
/// `t`, if inside the input.
#[inline]
fn src_index(o: usize, t: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o + t).checked_sub(pad)?;
    (i < n).then_some(i)
}

/// Valid output range `[lo, hi)` along the fastest axis for tap `t`.
#[inline]
fn valid_w(t: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(t).min(n_out);
    let hi = (n_in + pad).saturating_sub(t).min(n_out).max(lo);
    (lo, hi)
}

/// Fills `col` (rows x chunk columns) for output planes `d0..d1` of one
/// sample `x` (`cin * in_volume` values).
fn im2col(g: &ConvGeometry, x: &[f64], d0: usize, d1: usize, col: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let [_, oh, ow] = g.output;
    let pc = (d1 - d0) * oh * ow;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.in_volume()..(ci + 1) * g.in_volume()];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = &mut col[r * pc..(r + 1) * pc];
                    let (lo, hi) = valid_w(c, pw, iw, ow);
                    for (dz, od) in (d0..d1).enumerate() {
                        let block = &mut row[dz * oh * ow..(dz + 1) * oh * ow];
                        let Some(sd) = src_index(od, a, pd, id) else {
                            block.fill(0.0);
                            continue;
                        };
                        for oy in 0..oh {
                            let line = &mut block[oy * ow..(oy + 1) * ow];
                            let Some(sy) = src_index(oy, b, ph, ih) else {
                                line.fill(0.0);
                                continue;
                            };
                            let src = &xc[(sd * ih + sy) * iw..(sd * ih + sy + 1) * iw];
                            line[..lo].fill(0.0);
                            line[hi..].fill(0.0);
                            // output ox reads input ox + c - pw
                            let s0 = (lo + c).saturating_sub(pw);
                            if hi > lo {
                                line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back onto the input gradient `dx` of one sample.
fn col2im(g: &ConvGeometry, col: &[f64], d0: usize, d1: usize, dx: &mut [f64]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [pd, ph, pw] = g.pad;
    let [_, oh, ow] = g.output;
    let pc = (d1 - d0) * oh * ow;
    let mut r = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * g.in_volume()..(ci + 1) * g.in_volume()];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let row = &col[r * pc..(r + 1) * pc];
                    let (lo, hi) = valid_w(c, pw, iw, ow);
                    for (dz, od) in (d0..d1).enumerate() {
                        let Some(sd) = src_index(od, a, pd, id) else {
                            continue;
                        };
                        if hi == lo {
                            continue;
                        }
                        for oy in 0..oh {
                            let Some(sy) = src_index(oy, b, ph, ih) else {
                                continue;
                            };
                            let line = &row[(dz * oh + oy) * ow..(dz * oh + oy + 1) * ow];
                            let dst = &mut xc[(sd * ih + sy) * iw..(sd * ih + sy + 1) * iw];
                            let s0 = lo + c - pw;
                            for (d, s) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += s;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// `C = A * B + beta * C` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    // Bounds of the strided views; guards the unsafe call below.
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(extent(m, k, rsa, csa) <= a.len());
    assert!(extent(k, n, rsb, csb) <= b.len());
    assert!(extent(m, n, rsc, csc) <= c.len());
    // SAFETY: the asserts above keep every strided access in bounds, and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Cross-correlation `out[n, co] = bias[co] + sum_ci w[co, ci] * x[n, ci]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: [usize; 3]) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), b.shape(), pad)?;
    let rows = g.rows();
    let ov = g.out_volume();
    let mut out = vec![0.0; g.batch * g.cout * ov];
    for (co, &bias) in b.data().iter().enumerate() {
        for n in 0..g.batch {
            let start = (n * g.cout + co) * ov;
            out[start..start + ov].fill(bias);
        }
    }
    let chunk = g.planes_per_chunk();
    let mut col = vec![0.0; rows * chunk * g.out_plane()];
    for n in 0..g.batch {
        let xs = &x.data()[n * g.cin * g.in_volume()..(n + 1) * g.cin * g.in_volume()];
        let outs = &mut out[n * g.cout * ov..(n + 1) * g.cout * ov];
        let mut d0 = 0;
        while d0 < g.output[0] {
            let d1 = (d0 + chunk).min(g.output[0]);
            let pc = (d1 - d0) * g.out_plane();
            im2col(&g, xs, d0, d1, &mut col);
            gemm(
                g.cout,
                rows,
                pc,
                w.data(),
                rows,
                1,
                &col,
                pc,
                1,
                1.0,
                &mut outs[d0 * g.out_plane()..],
                ov,
                1,
            );
            d0 = d1;
        }
    }
    Tensor::new(g.output_shape(), out)
}

/// Gradients of a convolution given the upstream gradient `gout`.
/// Each requested gradient is returned freshly allocated.
pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: [usize; 3],
    gout: &[f64],
    need: [bool; 3],
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), w.shape(), b.shape(), pad)?;
    let rows = g.rows();
    let ov = g.out_volume();
    let iv = g.cin * g.in_volume();
    let [need_x, need_w, need_b] = need;

    let mut dx = need_x.then(|| vec![0.0; x.numel()]);
    let mut dw = need_w.then(|| vec![0.0; w.numel()]);
    let db = need_b.then(|| {
        (0..g.cout)
            .map(|co| {
                (0..g.batch)
                    .map(|n| {
                        let s = (n * g.cout + co) * ov;
                        gout[s..s + ov].iter().sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    });

    if need_x || need_w {
        let chunk = g.planes_per_chunk();
        let mut col = vec![0.0; rows * chunk * g.out_plane()];
        for n in 0..g.batch {
            let xs = &x.data()[n * iv..(n + 1) * iv];
            let go = &gout[n * g.cout * ov..(n + 1) * g.cout * ov];
            let mut d0 = 0;
            while d0 < g.output[0] {
                let d1 = (d0 + chunk).min(g.output[0]);
                let pc = (d1 - d0) * g.out_plane();
                let go_chunk = &go[d0 * g.out_plane()..];
                if let Some(dw) = dw.as_mut() {
                    im2col(&g, xs, d0, d1, &mut col);
                    // dW (cout x rows) += dOut (cout x pc) * col^T (pc x rows)
                    gemm(g.cout, pc, rows, go_chunk, ov, 1, &col, 1, pc, 1.0, dw, rows, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol (rows x pc) = W^T (rows x cout) * dOut (cout x pc)
                    gemm(rows, g.cout, pc, w.data(), 1, rows, go_chunk, ov, 1, 0.0, &mut col, pc, 1);
                    col2im(&g, &col[..rows * pc], d0, d1, &mut dx[n * iv..(n + 1) * iv]);
                }
                d0 = d1;
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// 2x2x2 average pooling with stride 2 (trailing odd voxels dropped).
pub fn avg_pool2_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w] = x.dims5()?;
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "avg_pool2 needs spatial dims >= 2, got {:?}",
            x.shape()
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += xs[base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx];
                            }
                        }
                    }
                    out.push(s * 0.125);
                }
            }
        }
    }
    Tensor::new(vec![n, c, od, oh, ow], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], gout: &[f64]) -> Vec<f64> {
    let (n, c, d, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
        input_shape[4],
    );
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut dx = vec![0.0; n * c * d * h * w];
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = gout[o] * 0.125;
                    o += 1;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx_ in 0..2 {
                                dx[base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx_] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Per-voxel unit normalization across channels:
/// `y[c] = x[c] / sqrt(sum_c x[c]^2 + eps)`.
pub fn normalize_channels_forward(x: &Tensor, eps: f64) -> Result<Tensor> {
    let [n, c, d, h, w] = x.dims5()?;
    let sv = d * h * w;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for b in 0..n {
        for s in 0..sv {
            let idx = |ch: usize| (b * c + ch) * sv + s;
            let r = ((0..c).map(|ch| xs[idx(ch)] * xs[idx(ch)]).sum::<f64>() + eps).sqrt();
            for ch in 0..c {
                out[idx(ch)] = xs[idx(ch)] / r;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn normalize_channels_backward(x: &Tensor, eps: f64, gout: &[f64]) -> Vec<f64> {
    let s5 = x.shape();
    let (n, c) = (s5[0], s5[1]);
    let sv: usize = s5[2..].iter().product();
    let xs = x.data();
    let mut dx = vec![0.0; xs.len()];
    for b in 0..n {
        for s in 0..sv {
            let idx = |ch: usize| (b * c + ch) * sv + s;
            let r2 = (0..c).map(|ch| xs[idx(ch)] * xs[idx(ch)]).sum::<f64>() + eps;
            let r = r2.sqrt();
            let dot: f64 = (0..c).map(|ch| gout[idx(ch)] * xs[idx(ch)]).sum();
            for ch in 0..c {
                dx[idx(ch)] = gout[idx(ch)] / r - xs[idx(ch)] * dot / (r2 * r);
            }
        }
    }
    dx
}

/// Channel-wise concatenation of 5-rank tensors with equal batch and
/// spatial dims.
pub fn concat_channels_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
        .dims5()?;
    let mut channels = 0;
    for p in parts {
        let s = p.dims5()?;
        if s[0] != first[0] || s[2..] != first[2..] {
            return Err(Error::Shape(format!(
                "concat needs identical non-channel dims, got {:?} and {:?}",
                first,
                p.shape()
            )));
        }
        channels += s[1];
    }
    let sv: usize = first[2..].iter().product();
    let mut out = Vec::with_capacity(first[0] * channels * sv);
    for b in 0..first[0] {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * sv..(b + 1) * c * sv]);
        }
    }
    Tensor::new(vec![first[0], channels, first[2], first[3], first[4]], out)
}

/// Centered spatial crop; offsets are `(n - target) / 2` per axis.
pub fn crop_center_offsets(shape: &[usize], target: [usize; 3]) -> Result<[usize; 3]> {
    let mut off = [0; 3];
    for a in 0..3 {
        let n = shape[2 + a];
        if target[a] == 0 || target[a] > n {
            return Err(Error::Shape(format!(
                "cannot crop spatial dims {:?} to {target:?}",
                &shape[2..]
            )));
        }
        off[a] = (n - target[a]) / 2;
    }
    Ok(off)
}

/// Copies between a full tensor and its centered crop. With `to_crop`
/// the crop is read from `full`; otherwise `crop` is added into `full`.
pub fn crop_transfer(
    full_shape: &[usize],
    target: [usize; 3],
    off: [usize; 3],
    full: &mut [f64],
    crop: &mut [f64],
    to_crop: bool,
) {
    let (n, c, d, h, w) = (
        full_shape[0],
        full_shape[1],
        full_shape[2],
        full_shape[3],
        full_shape[4],
    );
    let [td, th, tw] = target;
    let mut o = 0;
    for nc in 0..n * c {
        for z in 0..td {
            for y in 0..th {
                let src = ((nc * d + z + off[0]) * h + y + off[1]) * w + off[2];
                if to_crop {
                    crop[o..o + tw].copy_from_slice(&full[src..src + tw]);
                } else {
                    for (f, g) in full[src..src + tw].iter_mut().zip(&crop[o..o + tw]) {
                        *f += g;
                    }
                }
                o += tw;
            }
        }
    }
}
