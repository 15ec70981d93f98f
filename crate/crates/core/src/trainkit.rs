//! Subject splits, training pairs and patch augmentation, Adam, early
//! stopping and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::autodiff::{Eager, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fourier::{kspace_truncate_downsample, kspace_zerofill_upsample};
use crate::losses::{Loss, LossSpec};
use crate::models::{forward, init_parameters, ModelCheckpoint, ModelConfig, TrainingMetadata};
use crate::quality;
use crate::volgrid::{trilinear_resample, zscore_normalize, Rotation, Volume, ZScoreStats};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Smallest per-axis extent accepted for full-volume inference.
pub const MIN_PREDICT_DIM: usize = 3;

/// Subject-level partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    /// Subjects that appear in more than one partition.
    pub fn overlaps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .train
            .iter()
            .chain(&self.validation)
            .filter(|s| self.test.contains(s))
            .chain(self.train.iter().filter(|s| self.validation.contains(s)))
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Seeded shuffle, then contiguous train/validation/test blocks.
///
/// Validation and test receive `max(1, floor(ratio * n))` subjects each;
/// training receives the remainder.
pub fn split_subjects(subjects: &[usize], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let n = subjects.len();
    if n < 3 {
        return Err(Error::Validation(format!(
            "need at least 3 subjects for a three-way split, got {n}"
        )));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Validation(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut unique = subjects.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != n {
        return Err(Error::Validation("subject ids must be unique".into()));
    }
    let n_val = ((ratios[1] * n as f64).floor() as usize).max(1);
    let n_test = ((ratios[2] * n as f64).floor() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::Validation(format!(
            "ratios {ratios:?} leave no training subjects out of {n}"
        )));
    }
    let n_train = n - n_val - n_test;
    let mut order = subjects.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |r: std::ops::Range<usize>| {
        let mut v = order[r].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitAssignment {
        train: part(0..n_train),
        validation: part(n_train..n_train + n_val),
        test: part(n_train + n_val..n),
        ratios,
        seed,
    })
}

/// Zero-filled network input and high-resolution target, both z-scored with
/// the statistics of the high-resolution volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: Volume,
    pub target: Volume,
    pub subject: usize,
    pub echo: usize,
    pub stats: ZScoreStats,
}

/// z-score `hr`, truncate its spectrum by 2 and zero-fill back.
pub fn make_pair(hr: &Volume, subject: usize, echo: usize) -> Result<SamplePair> {
    let (target, stats) = zscore_normalize(hr)?;
    let lr = kspace_truncate_downsample(&target)?;
    let input = kspace_zerofill_upsample(&lr, None)?;
    Ok(SamplePair {
        input,
        target,
        subject,
        echo,
        stats,
    })
}

/// `(subject, echo, hr)` triples to training pairs.
pub fn make_pairs<'a>(
    hr: impl IntoIterator<Item = (usize, usize, &'a Volume)>,
) -> Result<Vec<SamplePair>> {
    hr.into_iter()
        .map(|(s, e, v)| make_pair(v, s, e))
        .collect()
}

/// Patch augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    pub flips: bool,
    pub rotations: bool,
    pub max_in_plane_deg: f64,
    pub max_through_plane_deg: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flips: true,
            rotations: true,
            max_in_plane_deg: 15.0,
            max_through_plane_deg: 5.0,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            flips: false,
            rotations: false,
            ..Self::default()
        }
    }
}

/// Sub-volume of `dims` starting at voxel `offset`.
pub fn crop(v: &Volume, offset: [usize; 3], dims: [usize; 3]) -> Result<Volume> {
    let vd = v.dims();
    if (0..3).any(|a| dims[a] == 0 || offset[a] + dims[a] > vd[a]) {
        return Err(Error::Validation(format!(
            "crop {dims:?} at {offset:?} does not fit in {vd:?}"
        )));
    }
    Ok(Volume::from_fn(dims, v.spacing(), |i, j, k| {
        v.get(i + offset[0], j + offset[1], k + offset[2])
    })?)
}

/// Mirrors `v` along each axis whose flag is set.
pub fn flip(v: &Volume, axes: [bool; 3]) -> Volume {
    let d = v.dims();
    let m = |f: bool, i: usize, n: usize| if f { n - 1 - i } else { i };
    Volume::from_fn(d, v.spacing(), |i, j, k| {
        v.get(m(axes[0], i, d[0]), m(axes[1], j, d[1]), m(axes[2], k, d[2]))
    })
    .expect("flip keeps a valid volume valid")
}

/// The random choices behind one augmented patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchDraw {
    pub offset: [usize; 3],
    pub flips: [bool; 3],
    pub rotation: Rotation,
}

/// Draws the crop offset, flips and rotation, in that order.
pub fn draw_patch(
    dims: [usize; 3],
    patch: [usize; 3],
    aug: &Augmentation,
    rng: &mut impl Rng,
) -> Result<PatchDraw> {
    if (0..3).any(|a| patch[a] == 0 || patch[a] > dims[a]) {
        return Err(Error::Validation(format!(
            "patch {patch:?} does not fit in volume {dims:?}"
        )));
    }
    let offset = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - patch[a]));
    let flips = if aug.flips {
        [0, 1, 2].map(|_| rng.random_bool(0.5))
    } else {
        [false; 3]
    };
    let rotation = if aug.rotations {
        let a = aug.max_in_plane_deg;
        let b = aug.max_through_plane_deg;
        Rotation::new(
            if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 },
            if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 },
        )
    } else {
        Rotation::IDENTITY
    };
    Ok(PatchDraw {
        offset,
        flips,
        rotation,
    })
}

/// Applies a draw to one volume: crop, flip, then rotate about the patch
/// center with zero fill.
pub fn apply_draw(v: &Volume, patch: [usize; 3], draw: &PatchDraw) -> Result<Volume> {
    let c = crop(v, draw.offset, patch)?;
    let f = flip(&c, draw.flips);
    if draw.rotation.is_identity() {
        Ok(f)
    } else {
        trilinear_resample(&f, patch, draw.rotation)
    }
}

/// Aligned, identically augmented input and target patches.
pub fn sample_patch(
    pair: &SamplePair,
    patch: [usize; 3],
    aug: &Augmentation,
    rng: &mut impl Rng,
) -> Result<(Volume, Volume)> {
    let draw = draw_patch(pair.target.dims(), patch, aug, rng)?;
    Ok((
        apply_draw(&pair.input, patch, &draw)?,
        apply_draw(&pair.target, patch, &draw)?,
    ))
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let ok = state.m[i].len() == p.numel()
            && grads[i].is_none_or(|g| g.len() == p.numel());
        if !ok {
            return Err(Error::Shape(format!(
                "adam: parameter {i} with shape {:?} mismatches its gradient or moments",
                p.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i].map_or(0.0, |g| g[j]);
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *theta -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Tracks the best validation score and decides when to stop.
///
/// Training stops once `max(patience, 1)` epochs have passed without a
/// strict improvement. The snapshot taken at the best epoch is retained.
#[derive(Debug, Clone)]
pub struct EarlyStopping<T> {
    patience: usize,
    epochs_seen: usize,
    best: Option<(usize, f64, T)>,
}

impl<T> EarlyStopping<T> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            epochs_seen: 0,
            best: None,
        }
    }

    /// Records the next epoch (1-based numbering). Returns `true` when
    /// training should stop after this epoch. `snapshot` is only called on
    /// improvement.
    pub fn observe(&mut self, score: f64, snapshot: impl FnOnce() -> T) -> bool {
        self.epochs_seen += 1;
        let improved = score.is_finite()
            && self.best.as_ref().is_none_or(|(_, b, _)| score > *b);
        if improved {
            self.best = Some((self.epochs_seen, score, snapshot()));
        }
        self.epochs_since_best() >= self.patience.max(1)
    }

    pub fn epochs_since_best(&self) -> usize {
        self.epochs_seen - self.best.as_ref().map_or(0, |b| b.0)
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs_seen
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn best(&self) -> Option<&T> {
        self.best.as_ref().map(|b| &b.2)
    }

    pub fn into_best(self) -> Option<(usize, f64, T)> {
        self.best
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    4
}
fn default_patch() -> [usize; 3] {
    [64, 64, 16]
}
fn default_patience() -> usize {
    100
}
fn default_max_epochs() -> usize {
    10_000
}
fn default_steps_per_epoch() -> usize {
    32
}
fn default_window() -> usize {
    quality::DEFAULT_SSIM_WINDOW
}

/// Training hyper-parameters. Patch dims are `(x, y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patch")]
    pub patch_dims: [usize; 3],
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    /// Hard cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub augmentation: Augmentation,
    #[serde(default = "default_window")]
    pub val_ssim_window: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossSpec::default(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            patch_dims: default_patch(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            steps_per_epoch: default_steps_per_epoch(),
            max_steps: None,
            augmentation: Augmentation::default(),
            val_ssim_window: default_window(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.patch_dims.contains(&0) {
            return Err(Error::Validation("patch dims must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Validation("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters, optimizer state and loss of a model under training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    loss: Loss,
}

impl Trainer {
    pub fn new(config: &ModelConfig, loss: &LossSpec) -> Result<Self> {
        let params = init_parameters(config)?.tensors();
        Ok(Self {
            config: config.clone(),
            adam: AdamState::new(&params),
            params,
            loss: Loss::new(loss.clone())?,
        })
    }

    /// Loss value at the current parameters, without updating them.
    pub fn evaluate_loss(&self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let (x, y) = (g.constant(input.clone()), g.constant(target.clone()));
        let ps: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let pred = forward(&self.config, &mut g, &ps, &x)?;
        let l = self.loss.apply(&mut g, pred, y)?;
        Ok(g.value(l).item())
    }

    /// One forward/backward/Adam step; returns the loss before the update.
    /// The update is skipped when the loss or a gradient is not finite.
    pub fn step(&mut self, input: &Tensor, target: &Tensor, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (x, y) = (g.constant(input.clone()), g.constant(target.clone()));
        let ps: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let pred = forward(&self.config, &mut g, &ps, &x)?;
        let l = self.loss.apply(&mut g, pred, y)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Ok(value);
        }
        g.backward(l)?;
        let grads: Vec<Option<&[f64]>> = ps.iter().map(|&p| g.grad(p)).collect();
        if grads.iter().flatten().any(|gr| gr.iter().any(|v| !v.is_finite())) {
            return Ok(f64::NAN);
        }
        adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        Ok(value)
    }
}

/// Runs the network on one z-scored input volume with `f64` parameters.
pub fn predict_with(config: &ModelConfig, params: &[Tensor], input: &Volume) -> Result<Volume> {
    if input.dims().iter().any(|&d| d < MIN_PREDICT_DIM) {
        return Err(Error::Validation(format!(
            "input dims {:?} below the minimum of {MIN_PREDICT_DIM} per axis",
            input.dims()
        )));
    }
    let ps: Vec<Rc<Tensor>> = params.iter().cloned().map(Rc::new).collect();
    let x = Rc::new(Tensor::from_volume(input));
    let y = forward(config, &mut Eager, &ps, &x)?;
    y.to_volume(0, 0, input.spacing())
}

/// Full-volume prediction with a stored checkpoint.
pub fn predict_volume(checkpoint: &ModelCheckpoint, input: &Volume) -> Result<Volume> {
    predict_with(&checkpoint.config, &checkpoint.tensors(), input)
}

/// SSIM of `pred` (z-scored) against the pair's target, both mapped back to
/// the original intensity scale.
pub fn pair_ssim(pair: &SamplePair, pred: &Volume, window: usize) -> Result<f64> {
    let hr = pair.stats.denormalize(&pair.target)?;
    let p = pair.stats.denormalize(pred)?;
    quality::ssim(&hr, &p, window)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ssim: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochRecord>,
    /// Mean validation SSIM of the zero-filled inputs themselves.
    pub baseline_val_ssim: f64,
    pub steps: usize,
}

fn batch(
    pairs: &[&SamplePair],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let mut inputs = Vec::with_capacity(cfg.batch_size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let pair = pairs[rng.random_range(0..pairs.len())];
        let (i, t) = sample_patch(pair, cfg.patch_dims, &cfg.augmentation, rng)?;
        inputs.push(i);
        targets.push(t);
    }
    Ok((
        Tensor::from_volumes(&inputs.iter().collect::<Vec<_>>())?,
        Tensor::from_volumes(&targets.iter().collect::<Vec<_>>())?,
    ))
}

/// Trains on the pairs of `split.train`, selecting the epoch with the best
/// mean validation SSIM. `on_epoch` sees every log record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    pairs: &[SamplePair],
    split: &SplitAssignment,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_pairs: Vec<&SamplePair> = pairs
        .iter()
        .filter(|p| split.train.contains(&p.subject))
        .collect();
    let val_pairs: Vec<&SamplePair> = pairs
        .iter()
        .filter(|p| split.validation.contains(&p.subject))
        .collect();
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Validation(format!(
            "empty partition: {} training and {} validation volumes",
            train_pairs.len(),
            val_pairs.len()
        )));
    }
    if !split.overlaps().is_empty() {
        return Err(Error::Leakage(format!(
            "subjects {:?} appear in more than one partition",
            split.overlaps()
        )));
    }
    for p in &train_pairs {
        let d = p.target.dims();
        if (0..3).any(|a| cfg.patch_dims[a] > d[a]) {
            return Err(Error::Validation(format!(
                "patch {:?} larger than volume {d:?}",
                cfg.patch_dims
            )));
        }
    }

    let window = cfg.val_ssim_window;
    let baseline_val_ssim = val_pairs
        .iter()
        .map(|p| pair_ssim(p, &p.input, window))
        .sum::<Result<f64>>()?
        / val_pairs.len() as f64;

    let mut trainer = Trainer::new(&cfg.model, &cfg.loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper: EarlyStopping<Vec<Tensor>> = EarlyStopping::new(cfg.patience);
    let mut log = Vec::new();
    let mut steps = 0;
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut n = 0;
        while n < cfg.steps_per_epoch && steps < step_cap {
            let (x, y) = batch(&train_pairs, cfg, &mut rng)?;
            let l = trainer.step(&x, &y, cfg.learning_rate)?;
            steps += 1;
            n += 1;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: steps,
                    detail: format!("non-finite loss or gradient ({l})"),
                });
            }
            loss_sum += l;
        }
        let mut val = 0.0;
        for p in &val_pairs {
            let pred = predict_with(&trainer.config, &trainer.params, &p.input)?;
            val += pair_ssim(p, &pred, window)?;
        }
        let val_ssim = val / val_pairs.len() as f64;
        let stop = stopper.observe(val_ssim, || trainer.params.clone());
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            val_ssim,
            best_epoch: stopper.best_epoch().unwrap_or(0),
        };
        on_epoch(&record);
        log.push(record);
        if stop || steps >= step_cap {
            break;
        }
    }

    let (best_epoch, best_ssim, params) = stopper.into_best().ok_or_else(|| {
        Error::Divergence {
            epoch: log.len(),
            step: steps,
            detail: "validation SSIM was never finite".into(),
        }
    })?;
    let metadata = TrainingMetadata {
        epoch: best_epoch,
        best_val_ssim: Some(best_ssim),
        seed: cfg.seed,
        extra: Default::default(),
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::from_tensors(&cfg.model, &params, metadata)?,
        log,
        baseline_val_ssim,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier;
    use rand::Rng;
    use crate::losses::LossKind;
    use crate::models::Architecture;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |i, j, k| (i + 10 * j + 100 * k) as f32).unwrap()
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    #[test]
    fn thirteen_subjects_split_nine_two_two() {
        let ids: Vec<usize> = (0..13).collect();
        let s = split_subjects(&ids, DEFAULT_RATIOS, 3).unwrap();
        // floor(7.8) = 7, floor(2.6) = 2, floor(2.6) = 2; remainder 2 to train
        let n = 13.0f64;
        let (v, t) = ((0.2 * n).floor() as usize, (0.2 * n).floor() as usize);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (13 - v - t, v, t));
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (9, 2, 2));
        assert_eq!(s, split_subjects(&ids, DEFAULT_RATIOS, 3).unwrap());
        assert!(s.overlaps().is_empty());
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_subjects(&[0, 1], DEFAULT_RATIOS, 0), Err(Error::Validation(_))));
        assert!(matches!(
            split_subjects(&[0, 1, 2, 3], [0.5, 0.2, 0.2], 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(split_subjects(&[0, 0, 2], DEFAULT_RATIOS, 0), Err(Error::Validation(_))));
        let s = split_subjects(&[4, 5, 6], DEFAULT_RATIOS, 0).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn leaky_split_detected() {
        let s = SplitAssignment {
            train: vec![0, 1],
            validation: vec![2],
            test: vec![1, 3],
            ratios: DEFAULT_RATIOS,
            seed: 0,
        };
        assert_eq!(s.overlaps(), vec![1]);
    }

    #[test]
    fn bandlimited_pair_is_exact() {
        // cosines inside the low-resolution band survive truncation
        let dims = [8, 8, 4];
        let hr = Volume::from_fn(dims, [1.0; 3], |i, j, k| {
            let t = std::f64::consts::TAU;
            (3.0 + (t * i as f64 / 8.0).cos() + 0.5 * (t * j as f64 / 8.0).sin()
                + 0.25 * (t * k as f64 / 4.0).cos()) as f32
        })
        .unwrap();
        let p = make_pair(&hr, 0, 0).unwrap();
        for (a, b) in p.input.data().iter().zip(p.target.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn pair_means_vanish() {
        let p = make_pair(&random_volume([8, 8, 4], 1), 2, 1).unwrap();
        assert!(p.input.mean().abs() < 1e-5);
        assert!(p.target.mean().abs() < 1e-5);
        assert_eq!((p.subject, p.echo), (2, 1));
        assert!(matches!(make_pair(&random_volume([7, 8, 4], 1), 0, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn pair_input_matches_direct_zerofill() {
        let hr = random_volume([8, 6, 4], 2);
        let p = make_pair(&hr, 0, 0).unwrap();
        let zf = fourier::kspace_zerofill_upsample(
            &fourier::kspace_truncate_downsample(&hr).unwrap(),
            None,
        )
        .unwrap();
        let zf_scored = p.stats.normalize(&zf).unwrap();
        for (a, b) in p.input.data().iter().zip(zf_scored.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn raw_crop_is_aligned() {
        let v = ramp([10, 9, 8]);
        let pair = SamplePair {
            input: v.clone(),
            target: v.clone(),
            subject: 0,
            echo: 0,
            stats: ZScoreStats { mean: 0.0, stddev: 1.0 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut probe = rng.clone();
            let draw = draw_patch(v.dims(), [4, 3, 2], &Augmentation::none(), &mut probe).unwrap();
            let (i, t) = sample_patch(&pair, [4, 3, 2], &Augmentation::none(), &mut rng).unwrap();
            assert_eq!(i, t);
            let o = draw.offset;
            for z in 0..2 {
                for y in 0..3 {
                    for x in 0..4 {
                        assert_eq!(t.get(x, y, z), v.get(x + o[0], y + o[1], z + o[2]));
                    }
                }
            }
        }
    }

    #[test]
    fn patch_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            draw_patch([4, 4, 4], [5, 4, 4], &Augmentation::none(), &mut rng),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_rotation_keeps_crop() {
        let v = random_volume([8, 8, 4], 3);
        let draw = PatchDraw {
            offset: [1, 2, 0],
            flips: [false; 3],
            rotation: Rotation::IDENTITY,
        };
        let a = apply_draw(&v, [6, 5, 4], &draw).unwrap();
        let b = trilinear_resample(&crop(&v, [1, 2, 0], [6, 5, 4]).unwrap(), [6, 5, 4], Rotation::new(0.0, 0.0)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn augmented_patches_stay_aligned() {
        // identical volumes must give identical patches under any draw
        let v = random_volume([12, 12, 6], 4);
        let pair = SamplePair {
            input: v.clone(),
            target: v,
            subject: 0,
            echo: 0,
            stats: ZScoreStats { mean: 0.0, stddev: 1.0 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (a, b) = sample_patch(&pair, [8, 8, 4], &Augmentation::default(), &mut rng).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adam_first_step_is_sign() {
        let lr = 1e-3;
        let g = [0.3, -2.0, 0.05, -7.5, 1e-3, -1e-7];
        let mut p = vec![Tensor::zeros(vec![6])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(&g)], &mut st, lr).unwrap();
        for (x, gv) in p[0].data().iter().zip(g) {
            // at t = 1 the corrected moments are g and |g|
            let exact = -lr * gv / (gv.abs() + ADAM_EPS);
            assert!((x - exact).abs() < 1e-15);
            // the sign approximation is off by lr * eps / |g|
            if gv.abs() >= 1e-2 {
                assert!((x + lr * gv.signum()).abs() < 1e-6 * lr);
            }
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut p = vec![Tensor::full(vec![3], 1.5)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Some(&[0.0; 3])], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.5; 3]);
        adam_step(&mut p, &[Some(&[1.0, -2.0, 3.0])], &mut st, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.5; 3]);
        assert!(matches!(
            adam_step(&mut p, &[Some(&[1.0])], &mut st, 0.1),
            Err(Error::Shape(_))
        ));
    }

    /// Independent scalar re-derivation of the update rule.
    fn scalar_adam(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (mut th, mut m, mut v) = (theta0, 0.0f64, 0.0f64);
        let mut out = vec![th];
        for t in 1..=steps {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + 1e-8);
            out.push(th);
        }
        out
    }

    #[test]
    fn adam_quadratic_converges() {
        let want = scalar_adam(1.0, 0.1, 100);
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        for w in &want[1..] {
            let g = [2.0 * p[0].item()];
            adam_step(&mut p, &[Some(&g)], &mut st, 0.1).unwrap();
            assert!((p[0].item() - w).abs() < 1e-12);
        }
        assert!(p[0].item().abs() < 0.1);
        // |theta| overshoots zero around step 12 and oscillates with
        // decaying amplitude; it is not monotone
        assert!(want.windows(2).skip(1).any(|w| w[1].abs() > w[0].abs()));
    }

    #[test]
    fn early_stopping_patience_hundred() {
        let mut es = EarlyStopping::new(100);
        let mut seq = vec![0.5, 0.6];
        seq.extend(std::iter::repeat_n(0.6, 100));
        seq.extend([0.9; 10]);
        let mut stopped = None;
        for (i, s) in seq.iter().enumerate() {
            if es.observe(*s, || i + 1) {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(102));
        assert_eq!(es.best(), Some(&2));
    }

    #[test]
    fn early_stopping_patience_zero() {
        let mut es = EarlyStopping::new(0);
        assert!(!es.observe(0.1, || ()));
        assert!(!es.observe(0.2, || ()));
        assert!(es.observe(0.2, || ()));
        assert_eq!(es.best_epoch(), Some(2));
    }

    #[test]
    fn early_stopping_ignores_nan() {
        let mut es = EarlyStopping::new(2);
        assert!(!es.observe(f64::NAN, || 1));
        assert!(es.best().is_none());
        assert!(!es.observe(0.3, || 2));
        assert!(!es.observe(f64::NAN, || 3));
        assert!(es.observe(0.1, || 4));
        assert_eq!(es.best(), Some(&2));
    }

    #[test]
    fn train_config_json_defaults() {
        let cfg: TrainConfig = serde_json::from_str(
            r#"{"model": {"architecture": "resnet", "channels": 32, "blocks": 16, "growth": 16,
                "initial_channels": 32, "dense_blocks": 4, "layers_per_dense_block": 4, "seed": 0},
                "loss": {"kind": "mse"}, "learning_rate": 1e-4, "patience": 100}"#,
        )
        .unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.patch_dims, [64, 64, 16]);
        assert_eq!(cfg.batch_size, 4);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    fn tiny_setup() -> (TrainConfig, Vec<SamplePair>, SplitAssignment) {
        let hr: Vec<Volume> = (0..4)
            .map(|s| {
                Volume::from_fn([8, 8, 8], [1.0; 3], |i, j, k| {
                    let r = (i as f32 - 3.5).powi(2) + (j as f32 - 3.5).powi(2) + (k as f32 - 3.5).powi(2);
                    if r < 6.0 + s as f32 { 2.0 } else { 0.5 + 0.01 * (i + j) as f32 }
                })
                .unwrap()
            })
            .collect();
        let pairs = make_pairs(hr.iter().enumerate().map(|(s, v)| (s, 0, v))).unwrap();
        let split = SplitAssignment {
            train: vec![0, 1],
            validation: vec![2],
            test: vec![3],
            ratios: DEFAULT_RATIOS,
            seed: 0,
        };
        let cfg = TrainConfig {
            model: ModelConfig {
                channels: 4,
                blocks: 1,
                ..ModelConfig::resnet()
            },
            learning_rate: 1e-3,
            batch_size: 2,
            patch_dims: [8, 8, 8],
            patience: 2,
            max_epochs: 4,
            steps_per_epoch: 3,
            augmentation: Augmentation::none(),
            seed: 5,
            ..TrainConfig::default()
        };
        (cfg, pairs, split)
    }

    #[test]
    fn train_is_deterministic_and_keeps_best() {
        let (cfg, pairs, split) = tiny_setup();
        let mut seen = Vec::new();
        let a = train(&cfg, &pairs, &split, |r| seen.push(r.clone())).unwrap();
        let b = train(&cfg, &pairs, &split, |_| {}).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(seen, a.log);
        let best = a.log.iter().map(|r| r.val_ssim).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.checkpoint.metadata.best_val_ssim, Some(best));
        let e = a.checkpoint.metadata.epoch;
        assert_eq!(a.log[e - 1].val_ssim, best);
        for r in &a.log[..e - 1] {
            assert!(r.val_ssim < best);
        }
    }

    #[test]
    fn train_step_cap() {
        let (mut cfg, pairs, split) = tiny_setup();
        cfg.max_steps = Some(4);
        let out = train(&cfg, &pairs, &split, |_| {}).unwrap();
        assert_eq!(out.steps, 4);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn train_rejects_empty_and_leaky_splits() {
        let (cfg, pairs, mut split) = tiny_setup();
        split.validation = vec![9];
        assert!(matches!(train(&cfg, &pairs, &split, |_| {}), Err(Error::Validation(_))));
        split.validation = vec![1];
        assert!(matches!(train(&cfg, &pairs, &split, |_| {}), Err(Error::Leakage(_))));
    }

    #[test]
    fn divergence_reports_epoch() {
        let (mut cfg, pairs, split) = tiny_setup();
        cfg.learning_rate = 1e300;
        match train(&cfg, &pairs, &split, |_| {}) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn predict_identity_and_determinism() {
        let cfg = ModelConfig {
            channels: 4,
            blocks: 1,
            ..ModelConfig::resnet()
        };
        let mut ckpt = init_parameters(&cfg).unwrap();
        let v = random_volume([6, 5, 4], 7);
        let a = predict_volume(&ckpt, &v).unwrap();
        assert_eq!(a, predict_volume(&ckpt, &v).unwrap());
        let n = ckpt.parameters.len();
        for p in &mut ckpt.parameters[n - 2..] {
            p.values.iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(predict_volume(&ckpt, &v).unwrap(), v);
        assert!(matches!(
            predict_volume(&ckpt, &random_volume([6, 2, 4], 7)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn overfit_one_batch_mse() {
        let cfg = ModelConfig {
            architecture: Architecture::Resnet,
            channels: 8,
            blocks: 2,
            ..ModelConfig::default()
        };
        let (_, pairs, _) = tiny_setup();
        let x = Tensor::from_volume(&pairs[0].input);
        let y = Tensor::from_volume(&pairs[0].target);
        let mut t = Trainer::new(&cfg, &LossSpec::new(LossKind::Mse)).unwrap();
        let first = t.evaluate_loss(&x, &y).unwrap();
        for _ in 0..60 {
            t.step(&x, &y, 1e-3).unwrap();
        }
        assert!(t.evaluate_loss(&x, &y).unwrap() < 0.5 * first);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn split_is_disjoint_and_complete(seed in any::<u64>(), n in 3usize..40) {
            let ids: Vec<usize> = (100..100 + n).collect();
            let s = split_subjects(&ids, DEFAULT_RATIOS, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &ids);
            prop_assert!(s.overlaps().is_empty());
            // every echo of a subject follows the subject
            let echoes: Vec<(usize, usize)> = ids.iter().flat_map(|&i| (0..3).map(move |e| (i, e))).collect();
            for (sub, _) in echoes {
                let homes = [&s.train, &s.validation, &s.test].iter().filter(|l| l.contains(&sub)).count();
                prop_assert_eq!(homes, 1);
            }
        }

        #[test]
        fn flip_is_involution(seed in any::<u64>(), fx in any::<bool>(), fy in any::<bool>(), fz in any::<bool>()) {
            let v = random_volume([5, 4, 3], seed);
            prop_assert_eq!(flip(&flip(&v, [fx, fy, fz]), [fx, fy, fz]), v);
        }

        #[test]
        fn early_stop_returns_argmax(seed in any::<u64>(), patience in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut es = EarlyStopping::new(patience);
            let mut stop_at = None;
            for (i, s) in seq.iter().enumerate() {
                if es.observe(*s, || i + 1) {
                    stop_at = Some(i + 1);
                    break;
                }
            }
            let end = stop_at.unwrap_or(seq.len());
            let best = *es.best().unwrap();
            for (i, s) in seq[..end].iter().enumerate() {
                prop_assert!(*s <= seq[best - 1]);
                if i + 1 < best { prop_assert!(*s < seq[best - 1]); }
            }
            if let Some(e) = stop_at { prop_assert_eq!(e, best + patience.max(1)); }
        }

        #[test]
        fn adam_zero_lr_is_bit_identical(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut p = vec![Tensor::new(vec![6], vals.clone()).unwrap()];
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[Some(&g)], &mut st, 0.0).unwrap();
            prop_assert_eq!(p[0].data(), vals.as_slice());
        }
    }
}
