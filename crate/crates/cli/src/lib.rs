//! Pipeline commands behind the `mrsr` binary.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage (bad flags) |
//! | 3 | invalid input: validation, format, shape or degenerate data |
//! | 4 | I/O error |
//! | 5 | training diverged |
//! | 6 | train/test leakage refused |

pub mod manifest;
pub mod render;

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use mrsr_core::fourier::{kspace_truncate_downsample, kspace_zerofill_upsample};
use mrsr_core::losses::LossKind;
use mrsr_core::models::ModelCheckpoint;
use mrsr_core::phantom::{self, PhantomSpec};
use mrsr_core::quality::{self, MetricsTriple, ReportEntry};
use mrsr_core::trainkit::{self, SamplePair, SplitAssignment, TrainConfig};
use mrsr_core::volgrid::{read_volume, trilinear_resample, write_volume, Rotation, ZScoreStats};
use mrsr_core::{Error, Result, Volume};
use serde::{Deserialize, Serialize};

use manifest::{read_json, write_json, RunRecorder};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_LEAKAGE: i32 = 6;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Leakage(_) => EXIT_LEAKAGE,
        _ => EXIT_INVALID,
    }
}

pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const ZEROFILL: &str = "zero-fill";
pub const TRILINEAR: &str = "trilinear";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

/// `*.vol` files of `dir` in name order.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    require_dir(dir)?;
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "vol") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut d = [0; 3];
    for (slot, p) in d.iter_mut().zip(parts) {
        *slot = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(d)
}

// ---------------------------------------------------------------- phantom

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 13)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Volume dims as X,Y,Z (each even).
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<[usize; 3]>,
    #[arg(long)]
    pub echoes: Option<usize>,
    /// Rician noise level as a fraction of the intensity range.
    #[arg(long)]
    pub noise: Option<f64>,
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut spec = PhantomSpec::default();
    if let Some(d) = args.dims {
        spec.dims = d;
    }
    if let Some(e) = args.echoes {
        spec.echoes = e;
    }
    if let Some(n) = args.noise {
        spec.noise_sigma = n;
    }
    spec.validate()?;
    let mut rec = RunRecorder::start(
        "phantom",
        &serde_json::json!({ "args": args, "spec": spec }),
        Some(args.seed),
    )?;
    let (manifest, volumes) = phantom::generate_dataset(&spec, args.subjects, args.seed)?;
    phantom::write_dataset(&args.out, &manifest, &volumes)?;
    for f in &manifest.files {
        rec.output(args.out.join(&f.file));
    }
    rec.output(args.out.join(phantom::MANIFEST_FILE));
    rec.finish(&args.out)?;
    Ok(())
}

// ---------------------------------------------------------------- degrade / upsample

#[derive(Debug, Clone, Args, Serialize)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Copies the dataset manifest along so later stages can resolve subjects.
fn carry_dataset_manifest(from: &Path, to: &Path, rec: &mut RunRecorder) -> Result<()> {
    let src = from.join(phantom::MANIFEST_FILE);
    if src.is_file() {
        let dst = to.join(phantom::MANIFEST_FILE);
        fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        rec.output(dst);
    }
    Ok(())
}

pub fn cmd_degrade(args: &DegradeArgs) -> Result<()> {
    let files = list_volumes(&args.input)?;
    create_dir(&args.out)?;
    let mut rec = RunRecorder::start("degrade", args, None)?;
    for f in &files {
        let lr = kspace_truncate_downsample(&read_volume(f)?)?;
        let dst = args.out.join(file_name(f));
        write_volume(&dst, &lr)?;
        rec.input(f);
        rec.output(dst);
    }
    carry_dataset_manifest(&args.input, &args.out, &mut rec)?;
    rec.finish(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMethod {
    Zerofill,
    Trilinear,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct UpsampleArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: UpsampleMethod,
    /// Taper width (in k-space samples) of the optional edge filter.
    #[arg(long)]
    pub edge_filter: Option<usize>,
}

/// Factor-2 upsampling of an LR volume.
pub fn upsample(v: &Volume, method: UpsampleMethod, edge_filter: Option<usize>) -> Result<Volume> {
    match method {
        UpsampleMethod::Zerofill => kspace_zerofill_upsample(v, edge_filter),
        UpsampleMethod::Trilinear => {
            if edge_filter.is_some() {
                return Err(Error::Validation(
                    "--edge-filter only applies to zerofill".into(),
                ));
            }
            let d = v.dims();
            let up = trilinear_resample(v, [2 * d[0], 2 * d[1], 2 * d[2]], Rotation::IDENTITY)?;
            let s = v.spacing();
            Volume::new(up.dims(), [s[0] / 2.0, s[1] / 2.0, s[2] / 2.0], up.into_data())
        }
    }
}

pub fn cmd_upsample(args: &UpsampleArgs) -> Result<()> {
    let files = list_volumes(&args.input)?;
    create_dir(&args.out)?;
    let mut rec = RunRecorder::start("upsample", args, None)?;
    for f in &files {
        let up = upsample(&read_volume(f)?, args.method, args.edge_filter)?;
        let dst = args.out.join(file_name(f));
        write_volume(&dst, &up)?;
        rec.input(f);
        rec.output(dst);
    }
    carry_dataset_manifest(&args.input, &args.out, &mut rec)?;
    rec.finish(&args.out)?;
    Ok(())
}

// ---------------------------------------------------------------- train

fn default_ratios() -> [f64; 3] {
    trainkit::DEFAULT_RATIOS
}

/// Training config file: [`TrainConfig`] fields plus the split settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
    /// Defaults to the training seed.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            split_ratios: default_ratios(),
            split_seed: None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// HR volumes of a dataset directory with z-scored training pairs.
pub fn load_pairs(data: &Path) -> Result<(phantom::DatasetManifest, Vec<Volume>, Vec<SamplePair>)> {
    require_dir(data)?;
    let (manifest, volumes) = phantom::load_dataset(data)?;
    let pairs = trainkit::make_pairs(volumes.iter().map(|v| (v.subject, v.echo, &v.volume)))?;
    Ok((manifest, volumes.into_iter().map(|v| v.volume).collect(), pairs))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg: RunConfig = read_json(&args.config)?;
    cfg.train.validate()?;
    let (manifest, _, pairs) = load_pairs(&args.data)?;
    let split_seed = cfg.split_seed.unwrap_or(cfg.train.seed);
    let split = trainkit::split_subjects(&manifest.subjects, cfg.split_ratios, split_seed)?;
    create_dir(&args.out)?;
    let mut rec = RunRecorder::start(
        "train",
        &serde_json::json!({ "args": args, "config": cfg }),
        Some(cfg.train.seed),
    )?;
    rec.input(&args.config);
    rec.input(&args.data);

    let split_path = args.out.join(SPLIT_FILE);
    write_json(&split_path, &split)?;
    rec.output(&split_path);

    let log_path = args.out.join(LOG_FILE);
    fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
    let mut log = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log_err = None;
    let outcome = trainkit::train(&cfg.train, &pairs, &split, |r| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    });
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    rec.output(&log_path);
    let mut outcome = outcome?;

    let extra = &mut outcome.checkpoint.metadata.extra;
    extra.insert("loss".into(), serde_json::to_value(&cfg.train.loss)?);
    extra.insert("split".into(), serde_json::to_value(&split)?);
    extra.insert("steps".into(), outcome.steps.into());
    extra.insert("baseline_val_ssim".into(), outcome.baseline_val_ssim.into());
    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt_path)?;
    rec.output(&ckpt_path);
    rec.finish(&args.out)?;
    Ok(())
}

/// Subject split recorded in a checkpoint by `train`.
pub fn checkpoint_split(ckpt: &ModelCheckpoint) -> Result<Option<SplitAssignment>> {
    match ckpt.metadata.extra.get("split") {
        None => Ok(None),
        Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
    }
}

fn checkpoint_loss(ckpt: &ModelCheckpoint) -> Option<LossKind> {
    let v = ckpt.metadata.extra.get("loss")?;
    v.get("kind").and_then(|k| serde_json::from_value(k.clone()).ok())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// Report JSON path; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Split JSON; defaults to the split stored in the first checkpoint.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = quality::DEFAULT_SSIM_WINDOW)]
    pub ssim_window: usize,
}

/// Refuses checkpoints trained or validated on any test subject.
pub fn check_leakage(test: &[usize], name: &str, split: &SplitAssignment) -> Result<()> {
    let mut leaked: Vec<usize> = split
        .train
        .iter()
        .chain(&split.validation)
        .filter(|s| test.contains(s))
        .copied()
        .collect();
    leaked.sort_unstable();
    leaked.dedup();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!(
            "{name} was trained or validated on test subjects {leaked:?}"
        )))
    }
}

fn method_name(ckpt: &ModelCheckpoint) -> String {
    match ckpt.config.architecture {
        mrsr_core::models::Architecture::Resnet => "ResNet".into(),
        mrsr_core::models::Architecture::Densenet => "DenseNet".into(),
    }
}

/// Per-volume entries for zero-fill, trilinear and every checkpoint, all on
/// the HR intensity scale.
/// Scores each (HR, pair) against the HR volume as read from disk.
pub fn evaluate_entries(
    pairs: &[(&Volume, &SamplePair)],
    checkpoints: &[(String, String, ModelCheckpoint)],
    window: usize,
) -> Result<Vec<ReportEntry>> {
    let mut entries = Vec::new();
    for &(hr, p) in pairs {
        let stats: ZScoreStats = p.stats;
        let volume = phantom::volume_file_name(p.subject, p.echo);
        let mut push = |method: &str, loss: &str, z: &Volume| -> Result<()> {
            let test = stats.denormalize(z)?;
            entries.push(ReportEntry {
                method: method.into(),
                loss: loss.into(),
                volume: volume.clone(),
                metrics: MetricsTriple::compute(hr, &test, window)?,
            });
            Ok(())
        };
        push(ZEROFILL, "-", &p.input)?;
        let lr = kspace_truncate_downsample(&p.target)?;
        push(TRILINEAR, "-", &upsample(&lr, UpsampleMethod::Trilinear, None)?)?;
        for (name, loss, ckpt) in checkpoints {
            push(name, loss, &trainkit::predict_volume(ckpt, &p.input)?)?;
        }
    }
    Ok(entries)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (manifest, hr, pairs) = load_pairs(&args.data)?;
    let mut rec = RunRecorder::start("evaluate", args, None)?;
    rec.input(&args.data);

    let mut ckpts = Vec::new();
    for path in &args.checkpoints {
        ckpts.push((path.clone(), ModelCheckpoint::load(path)?));
        rec.input(path);
    }
    let split: SplitAssignment = match (&args.split, ckpts.first()) {
        (Some(p), _) => {
            rec.input(p);
            read_json(p)?
        }
        (None, Some((path, c))) => checkpoint_split(c)?.ok_or_else(|| {
            Error::Validation(format!("{} carries no subject split", path.display()))
        })?,
        (None, None) => {
            return Err(Error::Validation(
                "no test split: pass --split or at least one checkpoint".into(),
            ))
        }
    };
    if !split.overlaps().is_empty() {
        return Err(Error::Leakage(format!(
            "split assigns subjects {:?} to more than one partition",
            split.overlaps()
        )));
    }
    if let Some(s) = split.test.iter().find(|s| !manifest.subjects.contains(s)) {
        return Err(Error::Validation(format!("test subject {s} not in the dataset")));
    }

    // display names, disambiguated by file stem when they collide
    let mut named = Vec::new();
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (path, c) in &ckpts {
        if let Some(cs) = checkpoint_split(c)? {
            check_leakage(&split.test, &path.display().to_string(), &cs)?;
        }
        let loss = checkpoint_loss(c).map(|k| k.to_string().to_uppercase()).unwrap_or("?".into());
        *seen.entry((method_name(c), loss)).or_default() += 1;
    }
    for (path, c) in ckpts {
        let loss = checkpoint_loss(&c).map(|k| k.to_string().to_uppercase()).unwrap_or("?".into());
        let base = method_name(&c);
        let name = if seen[&(base.clone(), loss.clone())] > 1 {
            format!("{base} ({})", file_stem(&path))
        } else {
            base
        };
        named.push((name, loss, c));
    }

    let test: Vec<(&Volume, &SamplePair)> =
        hr.iter().zip(&pairs).filter(|(_, p)| split.test.contains(&p.subject)).collect();
    let entries = evaluate_entries(&test, &named, args.ssim_window)?;
    let mut report = quality::aggregate_report(&entries)?;
    report.notes.push(format!(
        "test subjects {:?}; metrics on the HR intensity scale, SSIM window {}",
        split.test, args.ssim_window
    ));
    if named.iter().any(|(_, l, _)| l == "PERCEPTUAL") {
        report.notes.push(
            "perceptual loss uses a fixed seeded convolutional extractor, not pretrained VGG features"
                .into(),
        );
    }

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&args.out, &report)?;
    rec.output(&args.out);
    let table = report.render_table(Some(ZEROFILL));
    let txt = args.out.with_extension("txt");
    fs::write(&txt, &table).map_err(|e| Error::io(&txt, e))?;
    rec.output(&txt);
    print!("{table}");
    let dir = args.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    rec.finish(dir)?;
    Ok(())
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub hr: PathBuf,
    /// LR volume at half the HR dims (zero-filled for display) or already on the HR grid.
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub slice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMetrics {
    pub name: String,
    pub image: String,
    pub residual: String,
    pub residual_min: f64,
    pub residual_max: f64,
    pub metrics: MetricsTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub slice: usize,
    pub hr_image: String,
    pub panels: Vec<PanelMetrics>,
}

fn range_tag(lo: f64, hi: f64) -> String {
    format!("[{lo:.2},{hi:.2}]")
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let hr = read_volume(&args.hr)?;
    let lr_raw = read_volume(&args.lr)?;
    let d = hr.dims();
    let lr = if lr_raw.dims() == d {
        lr_raw
    } else if lr_raw.dims().iter().zip(d).all(|(&l, h)| 2 * l == h) {
        kspace_zerofill_upsample(&lr_raw, None)?
    } else {
        return Err(Error::Shape(format!(
            "LR dims {:?} neither match nor halve HR dims {d:?}",
            lr_raw.dims()
        )));
    };
    if args.slice >= d[2] {
        return Err(Error::Validation(format!(
            "slice {} out of bounds for nz = {}",
            args.slice, d[2]
        )));
    }
    create_dir(&args.out)?;
    let mut rec = RunRecorder::start("compare", args, None)?;
    rec.input(&args.hr);
    rec.input(&args.lr);

    let stats = ZScoreStats::of(&hr)?;
    let hr_z = render::slice_values(&stats.normalize(&hr)?, args.slice)?;
    let sd = [d[0], d[1], 1];
    let hr_name = "hr.png".to_string();
    let p = args.out.join(&hr_name);
    render::save_png(&p, &render::slice_image(sd, &hr_z, render::IMAGE_WINDOW))?;
    rec.output(p);

    let mut inputs = vec![("input".to_string(), lr)];
    for (i, p) in args.pred.iter().enumerate() {
        let v = read_volume(p)?;
        if v.dims() != d {
            return Err(Error::Shape(format!(
                "{}: dims {:?} differ from HR {d:?}",
                p.display(),
                v.dims()
            )));
        }
        rec.input(p);
        inputs.push((format!("pred{i}_{}", file_stem(p)), v));
    }

    let hr_slice = hr.slice_z(args.slice)?;
    let mut panels = Vec::new();
    for (name, v) in &inputs {
        let z = render::slice_values(&stats.normalize(v)?, args.slice)?;
        let image = format!("{name}.png");
        let p = args.out.join(&image);
        render::save_png(&p, &render::slice_image(sd, &z, render::IMAGE_WINDOW))?;
        rec.output(p);

        let r: Vec<f64> = z.iter().zip(&hr_z).map(|(a, b)| a - b).collect();
        let (lo, hi) = r
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let residual = format!("{name}_residual_{}.png", range_tag(lo, hi));
        let p = args.out.join(&residual);
        render::save_png(&p, &render::slice_image(sd, &r, render::residual_window(&r)))?;
        rec.output(p);

        let slice = v.slice_z(args.slice)?;
        let w = quality::DEFAULT_SSIM_WINDOW.min(d[0]).min(d[1]);
        let w = if w % 2 == 0 { w - 1 } else { w };
        let l = quality::dynamic_range(&hr_slice)?;
        let mse = quality::mse(&hr_slice, &slice)?;
        panels.push(PanelMetrics {
            name: name.clone(),
            image,
            residual,
            residual_min: lo,
            residual_max: hi,
            metrics: MetricsTriple {
                psnr: quality::psnr(&hr_slice, &slice)?,
                nrmse: mse.sqrt() / l,
                ssim: quality::ssim_windowed(&hr_slice, &slice, [w, w, 1])?,
            },
        });
    }
    let report = CompareReport {
        slice: args.slice,
        hr_image: hr_name,
        panels,
    };
    let p = args.out.join("metrics.json");
    write_json(&p, &report)?;
    rec.output(p);
    rec.finish(&args.out)?;
    Ok(())
}
