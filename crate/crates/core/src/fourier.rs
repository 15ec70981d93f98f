//! Centered 3D DFTs, factor-2 k-space truncation and zero-filling.
//!
//! Conventions:
//! - forward transform is unnormalized, inverse carries `1 / (kx*ky*kz)`;
//! - spectra are stored centered: along an axis of length `n`, the centered
//!   index `i` holds frequency `i - n/2` (integer division), so DC sits at
//!   `n/2`;
//! - all transform math is `f64`; volumes are converted at the boundary.
//!
//! Truncation and zero-filling are built as an exact pair. Zero-filling embeds
//! the low-resolution spectrum in the centre of the larger grid; when a
//! low-resolution axis is even, its Nyquist bin is split evenly between the
//! two high-resolution frequencies `±m/2`, which keeps the result real.
//! Truncation keeps the central `m` frequencies and folds the `±m/2` pair
//! back onto the Nyquist bin, so `truncate(zerofill(u)) == u` holds exactly.

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::volgrid::Volume;

/// Maximum imaginary residue (relative to the largest output magnitude)
/// tolerated when inverting to a real image.
pub const IMAG_RESIDUE_TOL: f64 = 1e-6;

/// Centered complex 3D spectrum paired with the spatial grid it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    coefficients: Vec<Complex64>,
}

impl KSpaceGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], coefficients: Vec<Complex64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!("k-space dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if coefficients.len() != n {
            return Err(Error::Corruption(format!(
                "k-space dims {dims:?} require {n} coefficients, got {}",
                coefficients.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            coefficients,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coefficients
    }

    /// Centered index of the DC coefficient.
    pub fn dc_index(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.dims[a] / 2)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex64 {
        self.coefficients[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Projects onto Hermitian-symmetric spectra: `(X(f) + conj(X(-f))) / 2`.
    /// The inverse of the result is exactly the real part of the inverse of
    /// `self`.
    pub fn hermitian_part(&self) -> KSpaceGrid {
        let [nx, ny, nz] = self.dims;
        let mirror = |i: usize, n: usize| (2 * (n / 2) + n - i) % n;
        let mut out = self.coefficients.clone();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let partner = self.get(mirror(i, nx), mirror(j, ny), mirror(k, nz));
                    out[i + nx * (j + ny * k)] = (self.get(i, j, k) + partner.conj()) * 0.5;
                }
            }
        }
        KSpaceGrid {
            dims: self.dims,
            spacing: self.spacing,
            coefficients: out,
        }
    }

    /// Sum of squared coefficient magnitudes.
    pub fn energy(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn transform_axis(
    data: &mut [Complex64],
    dims: [usize; 3],
    axis: usize,
    direction: FftDirection,
    planner: &mut FftPlanner<f64>,
) {
    let n = dims[axis];
    if n == 1 {
        return;
    }
    let fft = planner.plan_fft(n, direction);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    if axis == 0 {
        for line in data.chunks_exact_mut(n) {
            fft.process_with_scratch(line, &mut scratch);
        }
        return;
    }
    let stride = if axis == 1 { dims[0] } else { dims[0] * dims[1] };
    let (outer, inner) = if axis == 1 {
        (dims[2], dims[0])
    } else {
        (1, dims[0] * dims[1])
    };
    let block = stride * n;
    let mut line = vec![Complex64::default(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * block + i;
            for (t, v) in line.iter_mut().enumerate() {
                *v = data[base + t * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (t, v) in line.iter().enumerate() {
                data[base + t * stride] = *v;
            }
        }
    }
}

fn fft3(data: &mut [Complex64], dims: [usize; 3], direction: FftDirection) {
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(data, dims, axis, direction, &mut planner);
    }
}

/// Moves natural-order FFT output to centered order (`shift = n/2`) or back
/// (`inverse = true`).
fn recenter(data: &[Complex64], dims: [usize; 3], inverse: bool) -> Vec<Complex64> {
    let [nx, ny, nz] = dims;
    let mut out = vec![Complex64::default(); data.len()];
    let s = |i: usize, n: usize| {
        if inverse {
            (i + n - n / 2) % n
        } else {
            (i + n / 2) % n
        }
    };
    for k in 0..nz {
        let tk = s(k, nz);
        for j in 0..ny {
            let tj = s(j, ny);
            for i in 0..nx {
                out[s(i, nx) + nx * (tj + ny * tk)] = data[i + nx * (j + ny * k)];
            }
        }
    }
    out
}

/// Unnormalized forward DFT of real samples, DC centered.
pub fn forward_real(data: &[f64], dims: [usize; 3]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft3(&mut buf, dims, FftDirection::Forward);
    recenter(&buf, dims, false)
}

/// Normalized inverse DFT of a centered spectrum (complex result).
pub fn inverse_complex(coefficients: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
    let mut buf = recenter(coefficients, dims, true);
    fft3(&mut buf, dims, FftDirection::Inverse);
    let scale = 1.0 / buf.len() as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Normalized inverse DFT that must produce a real image.
///
/// Fails with a consistency error when the imaginary residue exceeds
/// [`IMAG_RESIDUE_TOL`] relative to the largest output magnitude.
pub fn inverse_real(coefficients: &[Complex64], dims: [usize; 3]) -> Result<Vec<f64>> {
    let out = inverse_complex(coefficients, dims);
    let max_abs = out.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let max_im = out.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if max_im > IMAG_RESIDUE_TOL * max_abs {
        return Err(Error::Consistency(format!(
            "imaginary residue {max_im:.3e} exceeds {IMAG_RESIDUE_TOL:e} of max magnitude \
             {max_abs:.3e}; spectrum is not Hermitian"
        )));
    }
    Ok(out.into_iter().map(|c| c.re).collect())
}

pub fn dft3_forward(v: &Volume) -> KSpaceGrid {
    KSpaceGrid {
        dims: v.dims(),
        spacing: v.spacing(),
        coefficients: forward_real(&v.to_f64(), v.dims()),
    }
}

/// Inverse to full `f64` precision.
pub fn dft3_inverse_f64(k: &KSpaceGrid) -> Result<Vec<f64>> {
    inverse_real(&k.coefficients, k.dims)
}

pub fn dft3_inverse(k: &KSpaceGrid) -> Result<Volume> {
    Volume::from_f64(k.dims, k.spacing, &dft3_inverse_f64(k)?)
}

/// For each low-resolution centered index along an axis of length `m`, the
/// high-resolution centered indices (length `2m`) it corresponds to, with
/// the weight used when zero-filling. The Nyquist bin of an even `m` maps to
/// both `±m/2`.
fn band_map(m: usize) -> Vec<Vec<(usize, f64)>> {
    let n = 2 * m;
    (0..m)
        .map(|j| {
            let g = j as isize - (m / 2) as isize;
            let hr = |f: isize| (f + (n / 2) as isize) as usize;
            if m % 2 == 0 && g == -((m / 2) as isize) {
                vec![(hr(g), 0.5), (hr(-g), 0.5)]
            } else {
                vec![(hr(g), 1.0)]
            }
        })
        .collect()
}

/// Raised-cosine weights over the outermost `width` frequencies of an axis
/// of length `m`; symmetric in frequency.
fn taper(m: usize, width: usize) -> Vec<f64> {
    (0..m)
        .map(|j| {
            let g = (j as isize - (m / 2) as isize).unsigned_abs();
            let d = m / 2 - g;
            if d < width {
                0.5 * (1.0 - (std::f64::consts::PI * (d + 1) as f64 / (width + 1) as f64).cos())
            } else {
                1.0
            }
        })
        .collect()
}

fn require_even(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::Validation(format!(
            "factor-2 truncation needs even dims, got {dims:?}"
        )));
    }
    Ok(())
}

/// Factor-2 k-space truncation on raw `f64` samples; returns the
/// low-resolution samples (dims halved).
pub fn truncate_f64(data: &[f64], dims: [usize; 3]) -> Result<Vec<f64>> {
    require_even(dims)?;
    let lr: [usize; 3] = std::array::from_fn(|a| dims[a] / 2);
    let spectrum = forward_real(data, dims);
    let maps: Vec<_> = lr.iter().map(|&m| band_map(m)).collect();
    let mut cropped = vec![Complex64::default(); lr.iter().product()];
    let mut idx = 0;
    for mk in &maps[2] {
        for mj in &maps[1] {
            for mi in &maps[0] {
                let mut acc = Complex64::default();
                for &(k, _) in mk {
                    for &(j, _) in mj {
                        for &(i, _) in mi {
                            acc += spectrum[i + dims[0] * (j + dims[1] * k)];
                        }
                    }
                }
                cropped[idx] = acc * 0.125;
                idx += 1;
            }
        }
    }
    inverse_real(&cropped, lr)
}

/// Factor-2 zero-filling on raw `f64` samples; returns samples on the doubled
/// grid. `edge_filter = Some(w)` tapers the outermost `w` retained
/// frequencies per axis before embedding.
pub fn zerofill_f64(data: &[f64], dims: [usize; 3], edge_filter: Option<usize>) -> Result<Vec<f64>> {
    let hr: [usize; 3] = std::array::from_fn(|a| dims[a] * 2);
    let spectrum = forward_real(data, dims);
    let maps: Vec<_> = dims.iter().map(|&m| band_map(m)).collect();
    let tapers: Option<Vec<Vec<f64>>> = edge_filter
        .filter(|&w| w > 0)
        .map(|w| dims.iter().map(|&m| taper(m, w)).collect());
    let mut embedded = vec![Complex64::default(); hr.iter().product()];
    for (lk, mk) in maps[2].iter().enumerate() {
        for (lj, mj) in maps[1].iter().enumerate() {
            for (li, mi) in maps[0].iter().enumerate() {
                let mut c = spectrum[li + dims[0] * (lj + dims[1] * lk)] * 8.0;
                if let Some(t) = &tapers {
                    c *= t[0][li] * t[1][lj] * t[2][lk];
                }
                for &(k, wk) in mk {
                    for &(j, wj) in mj {
                        for &(i, wi) in mi {
                            embedded[i + hr[0] * (j + hr[1] * k)] += c * (wi * wj * wk);
                        }
                    }
                }
            }
        }
    }
    inverse_real(&embedded, hr)
}

/// Low-resolution volume by factor-2 k-space truncation. Dims halve, spacing
/// doubles, the volume mean is preserved.
pub fn kspace_truncate_downsample(v: &Volume) -> Result<Volume> {
    let out = truncate_f64(&v.to_f64(), v.dims())?;
    let dims = std::array::from_fn(|a| v.dims()[a] / 2);
    let spacing = std::array::from_fn(|a| v.spacing()[a] * 2.0);
    Volume::from_f64(dims, spacing, &out)
}

/// Factor-2 upsampling by k-space zero-filling. No edge filter unless one is
/// requested.
pub fn kspace_zerofill_upsample(v: &Volume, edge_filter: Option<usize>) -> Result<Volume> {
    let out = zerofill_f64(&v.to_f64(), v.dims(), edge_filter)?;
    let dims = std::array::from_fn(|a| v.dims()[a] * 2);
    let spacing = std::array::from_fn(|a| v.spacing()[a] * 0.5);
    Volume::from_f64(dims, spacing, &out)
}
