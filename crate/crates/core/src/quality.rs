//! Full-reference quality metrics (PSNR, NRMSE, SSIM) and Table-style
//! aggregation.
//!
//! All three metrics share one dynamic range `L = max(reference) -
//! min(reference)`. The reference is privileged: swapping arguments changes
//! `L` and therefore the result.
//!
//! SSIM uses a uniform cubic window in valid mode (no padding) and averages
//! the per-window index over every window position. Window variances and the
//! covariance are population moments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::Volume;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DEFAULT_SSIM_WINDOW: usize = 7;

/// Dynamic range of the reference; errors when the reference is constant.
pub fn dynamic_range(reference: &Volume) -> Result<f64> {
    let (lo, hi) = reference.min_max();
    let l = hi as f64 - lo as f64;
    if !(l > 0.0) {
        return Err(Error::Degenerate(
            "reference volume is constant (dynamic range 0)".into(),
        ));
    }
    Ok(l)
}

fn check_dims(reference: &Volume, test: &Volume) -> Result<()> {
    if reference.dims() != test.dims() {
        return Err(Error::Validation(format!(
            "dims mismatch: reference {:?} vs test {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    Ok(())
}

pub fn mse(reference: &Volume, test: &Volume) -> Result<f64> {
    check_dims(reference, test)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// `10 log10(L^2 / MSE)` in dB; `f64::INFINITY` when the volumes are
/// identical.
pub fn psnr(reference: &Volume, test: &Volume) -> Result<f64> {
    let l = dynamic_range(reference)?;
    let mse = mse(reference, test)?;
    Ok(psnr_from(mse, l))
}

/// `sqrt(MSE) / L`.
pub fn nrmse(reference: &Volume, test: &Volume) -> Result<f64> {
    let l = dynamic_range(reference)?;
    Ok(mse(reference, test)?.sqrt() / l)
}

fn psnr_from(mse: f64, l: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (l * l / mse).log10()
    }
}

/// Valid-mode box means with a `w[0] x w[1] x w[2]` window, computed as
/// three separable passes of direct sums.
pub(crate) fn box_mean(data: &[f64], dims: [usize; 3], w: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let mut cur = data.to_vec();
    let mut cd = dims;
    for axis in 0..3 {
        let od = {
            let mut d = cd;
            d[axis] = cd[axis] - w[axis] + 1;
            d
        };
        let stride = match axis {
            0 => 1,
            1 => cd[0],
            _ => cd[0] * cd[1],
        };
        let mut out = Vec::with_capacity(od.iter().product());
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let base = i + cd[0] * (j + cd[1] * k);
                    let mut s = 0.0;
                    for t in 0..w[axis] {
                        s += cur[base + t * stride];
                    }
                    out.push(s);
                }
            }
        }
        cur = out;
        cd = od;
    }
    let norm = 1.0 / (w[0] * w[1] * w[2]) as f64;
    for v in &mut cur {
        *v *= norm;
    }
    (cur, cd)
}

/// The per-window SSIM index from window moments.
#[inline]
pub fn ssim_index(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
}

/// Mean SSIM with a uniform cubic window of odd size `window`.
pub fn ssim(reference: &Volume, test: &Volume, window: usize) -> Result<f64> {
    ssim_windowed(reference, test, [window; 3])
}

/// Mean SSIM with an arbitrary odd box window (e.g. `[7, 7, 1]` for
/// single-slice volumes).
pub fn ssim_windowed(reference: &Volume, test: &Volume, window: [usize; 3]) -> Result<f64> {
    check_dims(reference, test)?;
    if window.iter().any(|&w| w == 0 || w % 2 == 0) {
        return Err(Error::Validation(format!(
            "SSIM window must be odd and positive, got {window:?}"
        )));
    }
    let dims = reference.dims();
    if (0..3).any(|a| dims[a] < window[a]) {
        return Err(Error::Validation(format!(
            "volume {dims:?} is smaller than the SSIM window {window:?}"
        )));
    }
    let l = dynamic_range(reference)?;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);

    let x = reference.to_f64();
    let y = test.to_f64();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

    let (mx, _) = box_mean(&x, dims, window);
    let (my, _) = box_mean(&y, dims, window);
    let (mxx, _) = box_mean(&xx, dims, window);
    let (myy, _) = box_mean(&yy, dims, window);
    let (mxy, _) = box_mean(&xy, dims, window);

    let total: f64 = (0..mx.len())
        .map(|i| {
            let vx = mxx[i] - mx[i] * mx[i];
            let vy = myy[i] - my[i] * my[i];
            let cov = mxy[i] - mx[i] * my[i];
            ssim_index(mx[i], my[i], vx, vy, cov, c1, c2)
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// PSNR, NRMSE and SSIM of one test volume against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    #[serde(with = "json_f64")]
    pub psnr: f64,
    pub nrmse: f64,
    pub ssim: f64,
}

impl MetricsTriple {
    pub fn compute(reference: &Volume, test: &Volume, window: usize) -> Result<Self> {
        let l = dynamic_range(reference)?;
        let mse = mse(reference, test)?;
        Ok(Self {
            psnr: psnr_from(mse, l),
            nrmse: mse.sqrt() / l,
            ssim: ssim(reference, test, window)?,
        })
    }

    /// PSNR and NRMSE derive from the same MSE and range:
    /// `psnr = -20 log10(nrmse)`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        if self.nrmse == 0.0 {
            return self.psnr == f64::INFINITY;
        }
        (self.psnr + 20.0 * self.nrmse.log10()).abs() <= tol
    }
}

/// One per-volume measurement fed into [`aggregate_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: String,
    pub loss: String,
    pub volume: String,
    pub metrics: MetricsTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(with = "json_f64_vec")]
    pub per_volume: Vec<f64>,
    #[serde(with = "json_f64")]
    pub mean: f64,
    /// Population standard deviation over `per_volume`.
    #[serde(with = "json_f64")]
    pub sd: f64,
}

impl MetricSummary {
    pub fn from_values(per_volume: Vec<f64>) -> Self {
        let n = per_volume.len() as f64;
        let mean = per_volume.iter().sum::<f64>() / n;
        let sd = (per_volume.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        Self {
            per_volume,
            mean,
            sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub loss: String,
    pub volumes: Vec<String>,
    pub psnr: MetricSummary,
    pub nrmse: MetricSummary,
    pub ssim: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: Vec<MethodReport>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Groups entries by (method, loss), sorted by that key; per-volume order
/// follows the input order.
pub fn aggregate_report(entries: &[ReportEntry]) -> Result<MetricsReport> {
    if entries.is_empty() {
        return Err(Error::Validation("no report entries".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&ReportEntry>> = BTreeMap::new();
    for e in entries {
        groups
            .entry((e.method.clone(), e.loss.clone()))
            .or_default()
            .push(e);
    }
    let methods = groups
        .into_iter()
        .map(|((name, loss), es)| MethodReport {
            name,
            loss,
            volumes: es.iter().map(|e| e.volume.clone()).collect(),
            psnr: MetricSummary::from_values(es.iter().map(|e| e.metrics.psnr).collect()),
            nrmse: MetricSummary::from_values(es.iter().map(|e| e.metrics.nrmse).collect()),
            ssim: MetricSummary::from_values(es.iter().map(|e| e.metrics.ssim).collect()),
        })
        .collect();
    Ok(MetricsReport {
        methods,
        notes: Vec::new(),
    })
}

/// `"32.29 (1.19)"`.
pub fn format_mean_sd(s: &MetricSummary) -> String {
    format!("{:.2} ({:.2})", s.mean, s.sd)
}

impl MetricsReport {
    /// Renders a text table with mean (SD) cells; the best mean per column is
    /// wrapped in `**`. When `baseline` names a method, a delta section
    /// reports every other method's change relative to it (NRMSE as
    /// baseline minus method, so positive means better in every column).
    pub fn render_table(&self, baseline: Option<&str>) -> String {
        let best = |pick: fn(&MethodReport) -> f64, higher: bool| {
            self.methods
                .iter()
                .map(pick)
                .filter(|v| !v.is_nan())
                .fold(None, |acc: Option<f64>, v| match acc {
                    None => Some(v),
                    Some(a) if (higher && v > a) || (!higher && v < a) => Some(v),
                    some => some,
                })
        };
        let best_psnr = best(|m| m.psnr.mean, true);
        let best_nrmse = best(|m| m.nrmse.mean, false);
        let best_ssim = best(|m| m.ssim.mean, true);
        let cell = |s: &MetricSummary, b: Option<f64>| {
            let txt = format_mean_sd(s);
            if b == Some(s.mean) {
                let (m, rest) = txt.split_once(' ').unwrap();
                format!("**{m}** {rest}")
            } else {
                txt
            }
        };

        let header = [
            "Method".to_string(),
            "Loss function".to_string(),
            "PSNR (SD) ↑".to_string(),
            "NRMSE (SD) ↓".to_string(),
            "SSIM (SD) ↑".to_string(),
        ];
        let rows: Vec<[String; 5]> = self
            .methods
            .iter()
            .map(|m| {
                [
                    m.name.clone(),
                    m.loss.clone(),
                    cell(&m.psnr, best_psnr),
                    cell(&m.nrmse, best_nrmse),
                    cell(&m.ssim, best_ssim),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].chars().count())
                    .chain([header[c].chars().count()])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (c, txt) in cells.iter().enumerate() {
                if c > 0 {
                    s.push_str(" | ");
                }
                let pad = widths[c] - txt.chars().count();
                s.push_str(txt);
                s.push_str(&" ".repeat(pad));
            }
            s.trim_end().to_string()
        };
        let mut out = String::new();
        out.push_str(&line(&header));
        out.push('\n');
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&rule.join("-|-"));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
            out.push('\n');
        }

        if let Some(base) = baseline.and_then(|b| self.methods.iter().find(|m| m.name == b)) {
            out.push('\n');
            let _ = writeln!(out, "Change relative to {} (positive = better):", base.name);
            for m in self.methods.iter().filter(|m| m.name != base.name) {
                let _ = writeln!(
                    out,
                    "  {} / {}: PSNR {:+.2} dB, NRMSE {:+.2}, SSIM {:+.2}",
                    m.name,
                    m.loss,
                    m.psnr.mean - base.psnr.mean,
                    base.nrmse.mean - m.nrmse.mean,
                    m.ssim.mean - base.ssim.mean
                );
            }
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }
}

/// JSON has no infinity; non-finite values are written as the strings
/// `"inf"`, `"-inf"` or `"nan"`.
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Text(String),
    }

    pub(super) fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    pub(super) fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("not a number: {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }
}

mod json_f64_vec {
    use super::json_f64::{from_repr, to_repr, Repr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(from_repr)
            .collect()
    }
}
