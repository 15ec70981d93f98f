//! Volume representation, the VOL1 file format, z-score normalization and
//! trilinear resampling.
//!
//! A [`Volume`] is a real 3D scalar grid stored x-fastest:
//! `index(i, j, k) = i + nx * (j + ny * k)`. Intensities are 32-bit; anything
//! numerically sensitive converts to `f64` internally.
//!
//! VOL1 layout (little-endian):
//!
//! ```text
//! b"VOL1" | u32 header_len | header_len bytes of UTF-8 JSON | nx*ny*nz f32 payload
//! ```
//!
//! with the JSON header `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32"}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOL1_MAGIC: &[u8; 4] = b"VOL1";

/// Real-valued 3D scalar grid with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

fn validate_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!(
            "dims must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Validation(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        validate_dims(dims)?;
        validate_spacing(spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Corruption(format!(
                "dims {dims:?} require {n} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite intensity {} at linear index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        validate_dims(dims)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    /// Rounds 64-bit intensities to the 32-bit storage type.
    pub fn from_f64(dims: [usize; 3], spacing: [f64; 3], data: &[f64]) -> Result<Self> {
        Self::new(dims, spacing, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// (min, max) over all voxels.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Same geometry, new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    /// Extracts the axial slice `k` as a single-slice volume.
    pub fn slice_z(&self, k: usize) -> Result<Self> {
        if k >= self.dims[2] {
            return Err(Error::Validation(format!(
                "slice {k} out of bounds for nz = {}",
                self.dims[2]
            )));
        }
        let plane = self.dims[0] * self.dims[1];
        let data = self.data[k * plane..(k + 1) * plane].to_vec();
        Self::new([self.dims[0], self.dims[1], 1], self.spacing, data)
    }

    /// Serializes to the VOL1 byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Vol1Header {
            dims: self.dims,
            spacing: self.spacing,
            dtype: "f32".to_string(),
        })
        .expect("header serialization cannot fail");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.data.len());
        out.extend_from_slice(VOL1_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the VOL1 byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != VOL1_MAGIC {
            return Err(Error::Format("missing VOL1 magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: Vol1Header = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| Error::Format(format!("bad VOL1 header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        validate_dims(header.dims).map_err(|e| Error::Format(e.to_string()))?;
        let payload = &bytes[payload_start..];
        let n = header.dims[0] * header.dims[1] * header.dims[2];
        if payload.len() != 4 * n {
            return Err(Error::Corruption(format!(
                "dims {:?} require {n} values ({} bytes), payload has {} bytes",
                header.dims,
                4 * n,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.dims, header.spacing, data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Vol1Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes)
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, volume.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-volume intensity statistics used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: f64,
    /// Population standard deviation; always > 0.
    pub stddev: f64,
}

impl ZScoreStats {
    /// Population mean and standard deviation of `v`.
    pub fn of(v: &Volume) -> Result<Self> {
        let n = v.len() as f64;
        let mean = v.mean();
        let var = v
            .data()
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let stddev = var.sqrt();
        if !(stddev > 0.0) || !stddev.is_finite() {
            return Err(Error::Degenerate(
                "z-score of a constant volume (stddev = 0)".into(),
            ));
        }
        Ok(Self { mean, stddev })
    }

    pub fn normalize(&self, v: &Volume) -> Result<Volume> {
        v.with_data(
            v.data()
                .iter()
                .map(|&x| ((x as f64 - self.mean) / self.stddev) as f32)
                .collect(),
        )
    }

    pub fn denormalize(&self, v: &Volume) -> Result<Volume> {
        v.with_data(
            v.data()
                .iter()
                .map(|&x| (x as f64 * self.stddev + self.mean) as f32)
                .collect(),
        )
    }
}

/// Z-scores `v` with its own population statistics.
pub fn zscore_normalize(v: &Volume) -> Result<(Volume, ZScoreStats)> {
    let stats = ZScoreStats::of(v)?;
    Ok((stats.normalize(v)?, stats))
}

/// Rigid rotation about the volume center, in degrees.
///
/// `in_plane_deg` rotates about the slice (z) axis, `through_plane_deg` about
/// the x axis. The in-plane rotation is applied first.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub in_plane_deg: f64,
    pub through_plane_deg: f64,
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        in_plane_deg: 0.0,
        through_plane_deg: 0.0,
    };

    pub fn new(in_plane_deg: f64, through_plane_deg: f64) -> Self {
        Self {
            in_plane_deg,
            through_plane_deg,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_plane_deg == 0.0 && self.through_plane_deg == 0.0
    }

    /// Matrix mapping output (rotated) offsets back to input offsets.
    fn inverse_matrix(&self) -> [[f64; 3]; 3] {
        let (st, ct) = (-self.in_plane_deg).to_radians().sin_cos();
        let (sp, cp) = (-self.through_plane_deg).to_radians().sin_cos();
        // R^-1 = Rz(-theta) * Rx(-phi)
        let rz = [[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|t| rz[r][t] * rx[t][c]).sum();
            }
        }
        m
    }
}

/// Trilinear resampling onto `target_dims`, optionally rotated.
///
/// Target voxel centers map to continuous source indices as
/// `i_src = (i_tgt + 0.5) * n_src / n_tgt - 0.5`. Rotation happens in
/// physical (mm) coordinates about the source volume center. Any
/// interpolation neighbour outside the source grid contributes 0.
pub fn trilinear_resample(
    v: &Volume,
    target_dims: [usize; 3],
    rotation: Rotation,
) -> Result<Volume> {
    validate_dims(target_dims)?;
    if !rotation.in_plane_deg.is_finite() || !rotation.through_plane_deg.is_finite() {
        return Err(Error::Validation("rotation angles must be finite".into()));
    }
    let src = v.dims();
    let sp = v.spacing();
    let scale: [f64; 3] = std::array::from_fn(|a| src[a] as f64 / target_dims[a] as f64);
    let center: [f64; 3] = std::array::from_fn(|a| (src[a] as f64 - 1.0) / 2.0);
    let rotate = !rotation.is_identity();
    let m = rotation.inverse_matrix();
    let data = v.data();

    let fetch = |i: isize, j: isize, k: isize| -> f64 {
        if i < 0
            || j < 0
            || k < 0
            || i >= src[0] as isize
            || j >= src[1] as isize
            || k >= src[2] as isize
        {
            0.0
        } else {
            data[i as usize + src[0] * (j as usize + src[1] * k as usize)] as f64
        }
    };

    let mut out = Vec::with_capacity(target_dims.iter().product());
    for k in 0..target_dims[2] {
        for j in 0..target_dims[1] {
            for i in 0..target_dims[0] {
                let idx = [i, j, k];
                let mut q: [f64; 3] =
                    std::array::from_fn(|a| (idx[a] as f64 + 0.5) * scale[a] - 0.5);
                if rotate {
                    let d: [f64; 3] = std::array::from_fn(|a| (q[a] - center[a]) * sp[a]);
                    for a in 0..3 {
                        let r = m[a][0] * d[0] + m[a][1] * d[1] + m[a][2] * d[2];
                        q[a] = center[a] + r / sp[a];
                    }
                }
                let base: [f64; 3] = std::array::from_fn(|a| q[a].floor());
                let f: [f64; 3] = std::array::from_fn(|a| q[a] - base[a]);
                let (x0, y0, z0) = (base[0] as isize, base[1] as isize, base[2] as isize);
                let mut acc = 0.0;
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - f[2] } else { f[2] };
                    if wz == 0.0 {
                        continue;
                    }
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
                        if wy == 0.0 {
                            continue;
                        }
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - f[0] } else { f[0] };
                            if wx == 0.0 {
                                continue;
                            }
                            acc += wx * wy * wz * fetch(x0 + dx, y0 + dy, z0 + dz);
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    let spacing = std::array::from_fn(|a| sp[a] * scale[a]);
    Volume::new(target_dims, spacing, out)
}
