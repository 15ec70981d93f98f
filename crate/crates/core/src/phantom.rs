//! Seeded multi-echo ellipsoid phantoms standing in for knee scans.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::inverse_complex;
use crate::volgrid::{read_volume, write_volume, Volume};

pub const MANIFEST_FILE: &str = "dataset.json";

/// Echo times of the three-echo acquisition, in milliseconds.
pub const ECHO_TIMES_MS: [f64; 3] = [1.81, 6.43, 11.05];

/// Proton density and T2* (ms) of the tissue classes.
const TISSUES: [(f64, f64); 5] = [
    (1.00, 45.0), // fat
    (0.55, 28.0), // muscle
    (0.80, 18.0), // cartilage
    (0.95, 90.0), // fluid
    (0.35, 10.0), // tendon
];
const BACKGROUND: usize = 1;
const SHELL_TISSUE: usize = 0;

fn default_ellipsoids() -> [usize; 2] {
    [5, 15]
}

/// Phantom geometry and content parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub echoes: usize,
    /// Inclusive range of ellipsoid counts.
    #[serde(default = "default_ellipsoids")]
    pub ellipsoids: [usize; 2],
    /// Texture cut-off as a fraction of Nyquist (per axis, box shaped).
    pub texture_bandwidth: f64,
    /// Texture standard deviation relative to the local tissue intensity.
    pub texture_amplitude: f64,
    /// Rician noise level as a fraction of the noise-free intensity range.
    pub noise_sigma: f64,
    /// Width of the smooth ellipsoid boundaries in millimeters.
    pub edge_width_mm: f64,
    /// Thickness of the bright shells in millimeters; 0 disables them.
    pub shell_thickness_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96, 96, 32],
            spacing: [0.802, 0.802, 2.5],
            echoes: 3,
            ellipsoids: default_ellipsoids(),
            texture_bandwidth: 0.4,
            texture_amplitude: 0.08,
            noise_sigma: 0.01,
            edge_width_mm: 0.6,
            shell_thickness_mm: 0.8,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0 || d % 2 != 0) {
            return Err(Error::Validation(format!(
                "phantom dims must be positive and even, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Validation(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.echoes == 0 {
            return Err(Error::Validation("echo count must be at least 1".into()));
        }
        if self.ellipsoids[0] > self.ellipsoids[1] {
            return Err(Error::Validation(format!(
                "empty ellipsoid count range {:?}",
                self.ellipsoids
            )));
        }
        let nonneg = [
            ("texture_bandwidth", self.texture_bandwidth),
            ("texture_amplitude", self.texture_amplitude),
            ("noise_sigma", self.noise_sigma),
            ("edge_width_mm", self.edge_width_mm),
            ("shell_thickness_mm", self.shell_thickness_mm),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.texture_bandwidth > 1.0 {
            return Err(Error::Validation(format!(
                "texture_bandwidth is a fraction of Nyquist, got {}",
                self.texture_bandwidth
            )));
        }
        Ok(())
    }

    /// Echo time of echo `e`; echoes past the third continue the spacing.
    pub fn echo_time_ms(&self, e: usize) -> f64 {
        ECHO_TIMES_MS
            .get(e)
            .copied()
            .unwrap_or_else(|| {
                ECHO_TIMES_MS[2] + (e - 2) as f64 * (ECHO_TIMES_MS[1] - ECHO_TIMES_MS[0])
            })
    }
}

#[derive(Debug, Clone)]
struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    angle: f64,
    tissue: usize,
    shell: bool,
}

impl Ellipsoid {
    /// Approximate signed distance in mm (negative inside).
    fn distance(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.angle.sin_cos();
        let q = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        let r = ((q[0] / self.semi[0]).powi(2)
            + (q[1] / self.semi[1]).powi(2)
            + (q[2] / self.semi[2]).powi(2))
        .sqrt();
        let min_axis = self.semi.iter().copied().fold(f64::INFINITY, f64::min);
        (r - 1.0) * min_axis
    }
}

/// Zero-mean, unit-variance random field whose spectrum vanishes outside
/// `bandwidth` times Nyquist on every axis.
fn bandlimited_texture(dims: [usize; 3], bandwidth: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    if bandwidth <= 0.0 {
        return vec![0.0; n];
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let inside = [i, j, k].iter().zip(dims).all(|(&c, d)| {
                    let f = (c as f64 - (d / 2) as f64).abs() / (d as f64 / 2.0);
                    f <= bandwidth
                });
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                if inside && !(i == dims[0] / 2 && j == dims[1] / 2 && k == dims[2] / 2) {
                    spec[i + dims[0] * (j + dims[1] * k)] = Complex64::new(re, im);
                }
            }
        }
    }
    let field: Vec<f64> = inverse_complex(&spec, dims).into_iter().map(|c| c.re).collect();
    let mean = field.iter().sum::<f64>() / n as f64;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd > 0.0 {
        field.iter().map(|v| (v - mean) / sd).collect()
    } else {
        vec![0.0; n]
    }
}

fn smooth_step(d: f64, width: f64) -> f64 {
    // 1 inside, 0 outside
    if width <= 0.0 {
        return if d <= 0.0 { 1.0 } else { 0.0 };
    }
    0.5 * (1.0 - (d / width).tanh())
}

/// Echo volumes of one subject. Geometry is shared by all echoes; tissue
/// intensities follow `PD * exp(-TE / T2*)`.
pub fn generate_subject(spec: &PhantomSpec, seed: u64) -> Result<Vec<Volume>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let extent = [0, 1, 2].map(|a| dims[a] as f64 * spec.spacing[a]);

    // per-subject tissue jitter
    let tissues: Vec<(f64, f64)> = TISSUES
        .iter()
        .map(|&(pd, t2)| (pd * rng.random_range(0.9..1.1), t2 * rng.random_range(0.85..1.15)))
        .collect();

    let count = rng.random_range(spec.ellipsoids[0]..=spec.ellipsoids[1]);
    let min_extent = extent.iter().copied().fold(f64::INFINITY, f64::min);
    let ellipsoids: Vec<Ellipsoid> = (0..count)
        .map(|_| {
            let semi = [
                rng.random_range(0.06..0.25) * extent[0],
                rng.random_range(0.06..0.25) * extent[1],
                rng.random_range(0.15..0.6) * extent[2].max(min_extent),
            ];
            Ellipsoid {
                center: [0, 1, 2].map(|a| rng.random_range(0.15..0.85) * extent[a]),
                semi,
                angle: rng.random_range(0.0..std::f64::consts::PI),
                tissue: rng.random_range(0..TISSUES.len()),
                shell: rng.random_bool(0.5),
            }
        })
        .collect();

    // smooth multiplicative field from a few low-frequency cosines
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k = [0, 1, 2].map(|a| rng.random_range(0.5..2.0) * std::f64::consts::TAU / extent[a]);
            (k, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.02..0.06))
        })
        .collect();
    let texture = bandlimited_texture(dims, spec.texture_bandwidth, &mut rng);

    // fractional tissue membership per voxel, painted in order
    let mut weights = vec![[0.0f64; TISSUES.len()]; n];
    let mut shell = vec![0.0f64; n];
    let mut smooth = vec![0.0f64; n];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let idx = i + dims[0] * (j + dims[1] * k);
                let p = [
                    (i as f64 + 0.5) * spec.spacing[0],
                    (j as f64 + 0.5) * spec.spacing[1],
                    (k as f64 + 0.5) * spec.spacing[2],
                ];
                let mut w = [0.0; TISSUES.len()];
                w[BACKGROUND] = 1.0;
                let mut sh: f64 = 0.0;
                for e in &ellipsoids {
                    let d = e.distance(p);
                    let m = smooth_step(d, spec.edge_width_mm);
                    if m > 0.0 {
                        for v in w.iter_mut() {
                            *v *= 1.0 - m;
                        }
                        w[e.tissue] += m;
                    }
                    if e.shell && spec.shell_thickness_mm > 0.0 {
                        let t = spec.shell_thickness_mm;
                        sh = sh.max((-(d / t).powi(2)).exp());
                    }
                }
                weights[idx] = w;
                shell[idx] = sh;
                smooth[idx] = 1.0
                    + waves
                        .iter()
                        .map(|(kv, ph, a)| a * (kv[0] * p[0] + kv[1] * p[1] + kv[2] * p[2] + ph).cos())
                        .sum::<f64>();
            }
        }
    }

    let mut echoes = Vec::with_capacity(spec.echoes);
    for e in 0..spec.echoes {
        let te = spec.echo_time_ms(e);
        let level: Vec<f64> = tissues.iter().map(|(pd, t2)| pd * (-te / t2).exp()).collect();
        let shell_level = 1.4 * level[SHELL_TISSUE];
        let clean: Vec<f64> = (0..n)
            .map(|idx| {
                let base: f64 = weights[idx].iter().zip(&level).map(|(w, l)| w * l).sum();
                let tissue = base * (1.0 + spec.texture_amplitude * texture[idx]);
                let v = tissue * (1.0 - shell[idx]) + shell_level * shell[idx];
                (v * smooth[idx]).max(1e-3)
            })
            .collect();
        let data = if spec.noise_sigma > 0.0 {
            let (lo, hi) = clean
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let sigma = spec.noise_sigma * (hi - lo);
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            clean
                .iter()
                .map(|&v| {
                    let re = v + noise.sample(&mut rng);
                    let im = noise.sample(&mut rng);
                    (re * re + im * im).sqrt()
                })
                .collect()
        } else {
            clean
        };
        echoes.push(Volume::from_f64(dims, spec.spacing, &data)?);
    }
    Ok(echoes)
}

/// One volume of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub subject: usize,
    pub echo: usize,
    pub volume: Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub subject: usize,
    pub echo: usize,
    pub file: String,
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<usize>,
    pub echoes: usize,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    pub spec: PhantomSpec,
    pub files: Vec<DatasetFile>,
}

/// Per-subject seeds drawn from the master seed.
pub fn subject_seeds(master_seed: u64, subjects: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..subjects).map(|_| rng.next_u64()).collect()
}

pub fn volume_file_name(subject: usize, echo: usize) -> String {
    format!("subject{subject}_echo{echo}.vol")
}

/// `subjects` phantoms with all their echoes, subject ids `0..subjects`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    subjects: usize,
    master_seed: u64,
) -> Result<(DatasetManifest, Vec<LabeledVolume>)> {
    spec.validate()?;
    if subjects < 3 {
        return Err(Error::Validation(format!(
            "a dataset needs at least 3 subjects, got {subjects}"
        )));
    }
    let seeds = subject_seeds(master_seed, subjects);
    let mut volumes = Vec::with_capacity(subjects * spec.echoes);
    let mut files = Vec::with_capacity(subjects * spec.echoes);
    for (s, &seed) in seeds.iter().enumerate() {
        for (e, volume) in generate_subject(spec, seed)?.into_iter().enumerate() {
            files.push(DatasetFile {
                subject: s,
                echo: e,
                file: volume_file_name(s, e),
            });
            volumes.push(LabeledVolume {
                subject: s,
                echo: e,
                volume,
            });
        }
    }
    let manifest = DatasetManifest {
        subjects: (0..subjects).collect(),
        echoes: spec.echoes,
        seeds,
        master_seed,
        spec: spec.clone(),
        files,
    };
    Ok((manifest, volumes))
}

/// Writes the volumes and `dataset.json` into `dir` (created if missing).
pub fn write_dataset(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    volumes: &[LabeledVolume],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, v) in manifest.files.iter().zip(volumes) {
        write_volume(dir.join(&f.file), &v.volume)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path: PathBuf = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads `dataset.json` and every volume it lists.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<LabeledVolume>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let volumes = manifest
        .files
        .iter()
        .map(|f| {
            Ok(LabeledVolume {
                subject: f.subject,
                echo: f.echo,
                volume: read_volume(dir.join(&f.file))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, volumes))
}
