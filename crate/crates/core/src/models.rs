//! Residual and densely connected 3D super-resolution networks.
//!
//! Both networks take the zero-filled volume on the high-resolution grid and
//! predict a residual correction that is added back onto their input.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Tensor};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";

const K: usize = 3;
const SAME: [usize; 3] = [1, 1, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Resnet,
    Densenet,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Resnet => "resnet",
            Architecture::Densenet => "densenet",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(Architecture::Resnet),
            "densenet" => Ok(Architecture::Densenet),
            _ => Err(Error::Validation(format!("unknown architecture {s:?}"))),
        }
    }
}

/// Network hyper-parameters. ResNet uses `channels`/`blocks`; DenseNet uses
/// `growth`, `initial_channels`, `dense_blocks` and `layers_per_dense_block`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub channels: usize,
    pub blocks: usize,
    pub growth: usize,
    pub initial_channels: usize,
    pub dense_blocks: usize,
    pub layers_per_dense_block: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet,
            channels: 32,
            blocks: 16,
            growth: 16,
            initial_channels: 32,
            dense_blocks: 4,
            layers_per_dense_block: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn resnet() -> Self {
        Self::default()
    }

    pub fn densenet() -> Self {
        Self {
            architecture: Architecture::Densenet,
            ..Self::default()
        }
    }

    pub fn for_architecture(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields: &[(&str, usize)] = match self.architecture {
            Architecture::Resnet => &[("channels", self.channels), ("blocks", self.blocks)],
            Architecture::Densenet => &[
                ("growth", self.growth),
                ("initial_channels", self.initial_channels),
                ("dense_blocks", self.dense_blocks),
                ("layers_per_dense_block", self.layers_per_dense_block),
            ],
        };
        for (name, v) in fields {
            if *v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Input connections per output unit; 0 for biases.
    pub fn fan_in(&self) -> usize {
        if self.shape.len() == 5 {
            self.shape[1..].iter().product()
        } else {
            0
        }
    }

    pub fn is_weight(&self) -> bool {
        self.shape.len() == 5
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec {
        name: format!("{name}.weight"),
        shape: vec![cout, cin, k, k, k],
    });
    out.push(ParamSpec {
        name: format!("{name}.bias"),
        shape: vec![cout],
    });
}

/// Parameter tensors in the order the forward pass consumes them.
pub fn parameter_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut s = Vec::new();
    match cfg.architecture {
        Architecture::Resnet => {
            let c = cfg.channels;
            conv_specs(&mut s, "head", 1, c, K);
            for b in 0..cfg.blocks {
                conv_specs(&mut s, &format!("block{b}.conv1"), c, c, K);
                conv_specs(&mut s, &format!("block{b}.conv2"), c, c, K);
            }
            conv_specs(&mut s, "tail", c, 1, K);
        }
        Architecture::Densenet => {
            let c0 = cfg.initial_channels;
            conv_specs(&mut s, "head", 1, c0, K);
            for b in 0..cfg.dense_blocks {
                for l in 0..cfg.layers_per_dense_block {
                    let cin = c0 + l * cfg.growth;
                    conv_specs(&mut s, &format!("dense{b}.layer{l}"), cin, cfg.growth, K);
                }
                let stacked = c0 + cfg.layers_per_dense_block * cfg.growth;
                conv_specs(&mut s, &format!("dense{b}.transition"), stacked, c0, 1);
            }
            conv_specs(&mut s, "tail", c0, 1, K);
        }
    }
    Ok(s)
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(parameter_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

struct Params<'a, V> {
    values: &'a [V],
    next: usize,
}

impl<'a, V> Params<'a, V> {
    fn conv(&mut self) -> Result<(&'a V, &'a V)> {
        if self.next + 2 > self.values.len() {
            return Err(Error::Validation(format!(
                "model needs more than the {} parameter tensors supplied",
                self.values.len()
            )));
        }
        let p = (&self.values[self.next], &self.values[self.next + 1]);
        self.next += 2;
        Ok(p)
    }
}

/// Applies the network described by `cfg` to `x` (`[N, 1, D, H, W]`) using
/// `params` in [`parameter_specs`] order.
pub fn forward<B: Backend>(
    cfg: &ModelConfig,
    be: &mut B,
    params: &[B::Value],
    x: &B::Value,
) -> Result<B::Value> {
    cfg.validate()?;
    let shape = be.tensor(x).dims5()?;
    if shape[1] != 1 {
        return Err(Error::Shape(format!(
            "network input must have one channel, got shape {shape:?}"
        )));
    }
    let mut p = Params {
        values: params,
        next: 0,
    };
    let residual = match cfg.architecture {
        Architecture::Resnet => {
            let (w, b) = p.conv()?;
            let mut h = be.conv3d(x, w, b, SAME)?;
            for _ in 0..cfg.blocks {
                let (w1, b1) = p.conv()?;
                let (w2, b2) = p.conv()?;
                let t = be.conv3d(&h, w1, b1, SAME)?;
                let t = be.relu(&t);
                let t = be.conv3d(&t, w2, b2, SAME)?;
                h = be.add(&h, &t)?;
            }
            let (w, b) = p.conv()?;
            be.conv3d(&h, w, b, SAME)?
        }
        Architecture::Densenet => {
            let (w, b) = p.conv()?;
            let mut h = be.conv3d(x, w, b, SAME)?;
            for _ in 0..cfg.dense_blocks {
                let mut stack = h.clone();
                for _ in 0..cfg.layers_per_dense_block {
                    let (w, b) = p.conv()?;
                    let t = be.relu(&stack);
                    let t = be.conv3d(&t, w, b, SAME)?;
                    stack = be.concat_channels(&[stack, t])?;
                }
                let (w, b) = p.conv()?;
                h = be.conv3d(&stack, w, b, [0; 3])?;
            }
            let (w, b) = p.conv()?;
            be.conv3d(&h, w, b, SAME)?
        }
    };
    if p.next != params.len() {
        return Err(Error::Validation(format!(
            "model consumed {} of {} parameter tensors",
            p.next,
            params.len()
        )));
    }
    be.global_skip_add(x, &residual)
}

/// One stored parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Parameter {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("parameter shape checked on construction")
    }
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub best_val_ssim: Option<f64>,
    pub seed: u64,
    /// Free-form additions (loss name, subject split, ...).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Architecture, weights and metadata of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub parameters: Vec<Parameter>,
    pub metadata: TrainingMetadata,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    parameters: Vec<ParamEntry>,
    metadata: TrainingMetadata,
}

/// Weights that start at zero so every residual branch, and the network as a
/// whole, is the identity map before training.
pub fn is_zero_init(name: &str) -> bool {
    name == "tail.weight" || name.ends_with(".conv2.weight")
}

/// Kaiming (fan-in) normal weights and zero biases drawn from `cfg.seed`,
/// except for the [`is_zero_init`] weights.
pub fn init_parameters(cfg: &ModelConfig) -> Result<ModelCheckpoint> {
    let specs = parameter_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let parameters = specs
        .into_iter()
        .map(|s| {
            let values = if s.is_weight() && !is_zero_init(&s.name) {
                let std = (2.0 / s.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..s.numel()).map(|_| normal.sample(&mut rng) as f32).collect()
            } else {
                vec![0.0; s.numel()]
            };
            Parameter {
                name: s.name,
                shape: s.shape,
                values,
            }
        })
        .collect();
    Ok(ModelCheckpoint {
        config: cfg.clone(),
        parameters,
        metadata: TrainingMetadata {
            seed: cfg.seed,
            ..TrainingMetadata::default()
        },
    })
}

impl ModelCheckpoint {
    /// Builds a checkpoint from `f64` tensors, rounding to `f32`.
    pub fn from_tensors(
        config: &ModelConfig,
        tensors: &[Tensor],
        metadata: TrainingMetadata,
    ) -> Result<Self> {
        let specs = parameter_specs(config)?;
        if specs.len() != tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let parameters = specs
            .into_iter()
            .zip(tensors)
            .map(|(s, t)| {
                if s.shape != t.shape() {
                    return Err(Error::Shape(format!(
                        "{}: expected {:?}, got {:?}",
                        s.name,
                        s.shape,
                        t.shape()
                    )));
                }
                Ok(Parameter {
                    name: s.name,
                    shape: s.shape,
                    values: t.data().iter().map(|&v| v as f32).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            parameters,
            metadata,
        })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.parameters.iter().map(Parameter::to_tensor).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters.iter().map(|p| p.values.len()).sum()
    }

    /// Checks names and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        let specs = parameter_specs(&self.config)?;
        if specs.len() != self.parameters.len() {
            return Err(Error::Format(format!(
                "config needs {} parameter tensors, checkpoint has {}",
                specs.len(),
                self.parameters.len()
            )));
        }
        for (s, p) in specs.iter().zip(&self.parameters) {
            if s.name != p.name || s.shape != p.shape {
                return Err(Error::Format(format!(
                    "parameter {:?} {:?} does not match expected {:?} {:?}",
                    p.name, p.shape, s.name, s.shape
                )));
            }
            if p.values.len() != s.numel() {
                return Err(Error::Corruption(format!(
                    "{}: {} values for shape {:?}",
                    p.name,
                    p.values.len(),
                    p.shape
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("{} has non-finite values", p.name)));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let parameters = self
            .parameters
            .iter()
            .map(|p| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                };
                offset += 4 * p.values.len();
                e
            })
            .collect();
        let manifest = serde_json::to_string(&Manifest {
            config: self.config.clone(),
            parameters,
            metadata: self.metadata.clone(),
        })
        .expect("manifest serialization cannot fail");
        let mut out = Vec::with_capacity(8 + manifest.len() + offset);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for p in &self.parameters {
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
            return Err(Error::Format("missing CKPT magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let start = 8usize
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("manifest length exceeds file size".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[8..start])
            .map_err(|e| Error::Format(format!("bad checkpoint manifest: {e}")))?;
        let payload = &bytes[start..];
        let mut parameters = Vec::with_capacity(manifest.parameters.len());
        let mut expected_offset = 0;
        for e in manifest.parameters {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset {
                return Err(Error::Corruption(format!(
                    "{}: offset {} but previous tensors end at {expected_offset}",
                    e.name, e.offset
                )));
            }
            let end = e.offset + 4 * n;
            if end > payload.len() {
                return Err(Error::Corruption(format!(
                    "{}: payload truncated ({} bytes, need {end})",
                    e.name,
                    payload.len()
                )));
            }
            let values = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset = end;
            parameters.push(Parameter {
                name: e.name,
                shape: e.shape,
                values,
            });
        }
        if expected_offset != payload.len() {
            return Err(Error::Corruption(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        let ckpt = Self {
            config: manifest.config,
            parameters,
            metadata: manifest.metadata,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
