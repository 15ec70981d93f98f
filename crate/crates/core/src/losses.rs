//! Training objectives: mean squared error, SSIM and a feature-space loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::quality::{DEFAULT_SSIM_WINDOW, SSIM_K1, SSIM_K2};

/// Channel progression of the feature extractor.
pub const EXTRACTOR_CHANNELS: [usize; 4] = [1, 8, 16, 16];
/// Stabilizer of the per-voxel channel normalization.
pub const FEATURE_NORM_EPS: f64 = 1e-4;
/// Smallest spatial extent that survives three 2x reductions.
pub const PERCEPTUAL_MIN_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Ssim,
    Perceptual,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Ssim => "ssim",
            LossKind::Perceptual => "perceptual",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "ssim" => Ok(LossKind::Ssim),
            "perceptual" => Ok(LossKind::Perceptual),
            _ => Err(Error::Validation(format!("unknown loss {s:?}"))),
        }
    }
}

fn default_window() -> usize {
    DEFAULT_SSIM_WINDOW
}

fn default_layer_weights() -> [f64; 3] {
    [1.0 / 3.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_window")]
    pub ssim_window: usize,
    #[serde(default)]
    pub perceptual_seed: u64,
    #[serde(default = "default_layer_weights")]
    pub layer_weights: [f64; 3],
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ssim_window: DEFAULT_SSIM_WINDOW,
            perceptual_seed: 0,
            layer_weights: default_layer_weights(),
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(LossKind::Mse)
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `mean((pred - target)^2)`.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "mse_loss")?;
    let d = g.sub(pred, target)?;
    let s = g.square(d);
    Ok(g.mean(s))
}

/// `1 - mean SSIM` over the valid-window map, with `target` as reference.
///
/// Window means are convolutions with a constant kernel. The dynamic range
/// `L` is taken from the whole target batch and does not receive gradient.
pub fn ssim_loss(g: &mut Graph, pred: Var, target: Var, window: usize) -> Result<Var> {
    same_shape(g, pred, target, "ssim_loss")?;
    let [_, c, d, h, w] = g.value(target).dims5()?;
    if c != 1 {
        return Err(Error::Shape(format!("ssim_loss expects one channel, got {c}")));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::Validation(format!(
            "SSIM window must be odd and positive, got {window}"
        )));
    }
    if d.min(h).min(w) < window {
        return Err(Error::Validation(format!(
            "spatial dims {:?} are smaller than the SSIM window {window}",
            [d, h, w]
        )));
    }
    let t = g.value(target).data();
    let (lo, hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let l = hi - lo;
    if !(l > 0.0) {
        return Err(Error::Degenerate("ssim_loss target is constant".into()));
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);

    let kernel = g.constant(Tensor::full(
        vec![1, 1, window, window, window],
        1.0 / (window * window * window) as f64,
    ));
    let zero = g.constant(Tensor::zeros(vec![1]));
    let box_mean = |g: &mut Graph, v: Var| g.conv3d(v, kernel, zero, [0; 3]);

    let xx = g.square(target);
    let yy = g.square(pred);
    let xy = g.mul(target, pred)?;
    let mx = box_mean(g, target)?;
    let my = box_mean(g, pred)?;
    let mxx = box_mean(g, xx)?;
    let myy = box_mean(g, yy)?;
    let mxy = box_mean(g, xy)?;

    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxmy = g.mul(mx, my)?;
    let vx = g.sub(mxx, mx2)?;
    let vy = g.sub(myy, my2)?;
    let cov = g.sub(mxy, mxmy)?;

    let a = g.scale(mxmy, 2.0);
    let a = g.add_scalar(a, c1)?;
    let b = g.scale(cov, 2.0);
    let b = g.add_scalar(b, c2)?;
    let num = g.mul(a, b)?;
    let e = g.add(mx2, my2)?;
    let e = g.add_scalar(e, c1)?;
    let f = g.add(vx, vy)?;
    let f = g.add_scalar(f, c2)?;
    let den = g.mul(e, f)?;
    let map = g.div(num, den)?;
    let m = g.mean(map);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Fixed, randomly initialized 3D feature network standing in for a
/// pretrained image classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor)>,
    layer_weights: [f64; 3],
}

impl FeatureExtractor {
    /// Kaiming-normal conv weights and zero biases from `seed`.
    pub fn new(seed: u64, layer_weights: [f64; 3]) -> Result<Self> {
        if layer_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Validation(format!(
                "layer weights must be finite and non-negative, got {layer_weights:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = EXTRACTOR_CHANNELS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let std = (2.0 / (cin * 27) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let w = (0..cout * cin * 27).map(|_| normal.sample(&mut rng)).collect();
                (
                    Tensor::new(vec![cout, cin, 3, 3, 3], w).expect("static shape"),
                    Tensor::zeros(vec![cout]),
                )
            })
            .collect();
        Ok(Self {
            layers,
            layer_weights,
        })
    }

    pub fn from_spec(spec: &LossSpec) -> Result<Self> {
        Self::new(spec.perceptual_seed, spec.layer_weights)
    }

    pub fn layer_weights(&self) -> [f64; 3] {
        self.layer_weights
    }

    /// Channel-normalized feature maps after each stage.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let [_, c, d, h, w] = g.value(x).dims5()?;
        if c != 1 {
            return Err(Error::Shape(format!("extractor expects one channel, got {c}")));
        }
        if d.min(h).min(w) < PERCEPTUAL_MIN_DIM {
            return Err(Error::Validation(format!(
                "perceptual loss needs at least {PERCEPTUAL_MIN_DIM} voxels per axis, got {:?}",
                [d, h, w]
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for (w, b) in &self.layers {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv3d(cur, w, b, [1; 3])?;
            let y = g.relu(y);
            cur = g.avg_pool2(y)?;
            out.push(g.normalize_channels(cur, FEATURE_NORM_EPS)?);
        }
        Ok(out)
    }
}

/// `sum_l w_l * mean((phi_l(pred) - phi_l(target))^2)`.
pub fn perceptual_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    extractor: &FeatureExtractor,
) -> Result<Var> {
    same_shape(g, pred, target, "perceptual_loss")?;
    let fp = extractor.features(g, pred)?;
    let ft = extractor.features(g, target)?;
    let mut total: Option<Var> = None;
    for ((a, b), &wl) in fp.into_iter().zip(ft).zip(&extractor.layer_weights) {
        let d = g.sub(a, b)?;
        let s = g.square(d);
        let m = g.mean(s);
        let term = g.scale(m, wl);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("extractor has layers"))
}

/// A loss ready to be applied, with its extractor built once.
#[derive(Debug, Clone)]
pub struct Loss {
    spec: LossSpec,
    extractor: Option<FeatureExtractor>,
}

impl Loss {
    pub fn new(spec: LossSpec) -> Result<Self> {
        let extractor = match spec.kind {
            LossKind::Perceptual => Some(FeatureExtractor::from_spec(&spec)?),
            _ => None,
        };
        Ok(Self { spec, extractor })
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn apply(&self, g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
        match self.spec.kind {
            LossKind::Mse => mse_loss(g, pred, target),
            LossKind::Ssim => ssim_loss(g, pred, target, self.spec.ssim_window),
            LossKind::Perceptual => perceptual_loss(
                g,
                pred,
                target,
                self.extractor.as_ref().expect("built in new"),
            ),
        }
    }
}
