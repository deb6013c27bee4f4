//! Pointwise errors, SSIM, spatial/temporal Pearson correlation, error maps,
//! the Laplacian leakage index, the bilinear baseline and report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{Pads, Tensor};
use crate::training::select_channels;

/// `(mse, mae)` over the region left after stripping `crop`.
pub fn pointwise_errors(pred: &Tensor<f32>, target: &Tensor<f32>, crop: Pads) -> Result<(f64, f64)> {
    same_shape("pointwise_errors", pred, target)?;
    let (p, t) = if crop.is_zero() {
        (pred.clone(), target.clone())
    } else {
        (
            pred.crop(crop.top, crop.bottom, crop.left, crop.right)?,
            target.crop(crop.top, crop.bottom, crop.left, crop.right)?,
        )
    };
    let n = p.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&a, &b) in p.data().iter().zip(t.data()) {
        let d = a as f64 - b as f64;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n, ae / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// One window spanning the whole field with uniform weights.
    pub global: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        SsimOptions {
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
            global: false,
        }
    }
}

impl SsimOptions {
    /// Normalized 1-D Gaussian window weights.
    pub fn weights(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let mut w: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    }
}

fn plane(op: &'static str, x: &Tensor<f32>) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(Error::dim(op, format!("expected [H,W], got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, o: &SsimOptions) -> f64 {
    ((2.0 * mx * my + o.c1) * (2.0 * cxy + o.c2)) / ((mx * mx + my * my + o.c1) * (vx + vy + o.c2))
}

/// Mean local SSIM over all window positions fully inside the field.
pub fn ssim(pred: &Tensor<f32>, target: &Tensor<f32>, opts: &SsimOptions) -> Result<f64> {
    same_shape("ssim", pred, target)?;
    let (h, w) = plane("ssim", pred)?;
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    if opts.global {
        let n = (h * w) as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(&y) {
            vx += (a - mx) * (a - mx);
            vy += (b - my) * (b - my);
            cxy += (a - mx) * (b - my);
        }
        return Ok(ssim_formula(mx, my, vx / n, vy / n, cxy / n, opts));
    }
    let k = opts.window;
    if k == 0 || h < k || w < k {
        return Err(Error::Config(format!(
            "field {h}x{w} smaller than the {k}x{k} SSIM window"
        )));
    }
    let g = opts.weights();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let filter = |src: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                rows[r * ow + c] = (0..k).map(|i| g[i] * src[r * w + c + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
            }
        }
        out
    };
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter(&x), filter(&y));
    let (sxx, syy, sxy) = (filter(&xx), filter(&yy), filter(&xy));
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            ssim_formula(mx[i], my[i], vx, vy, cxy, opts)
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

/// Pearson correlation, or `None` when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub skipped: usize,
}

impl Summary {
    pub fn of(values: &[f64], skipped: usize) -> Self {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                n,
                skipped,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Summary {
            mean,
            std: var.sqrt(),
            n,
            skipped,
        }
    }
}

fn correlation_summary(op: &str, rs: Vec<Option<f64>>) -> Result<Summary> {
    let total = rs.len();
    let defined: Vec<f64> = rs.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(Error::Data(format!(
            "{op}: all {total} correlations undefined (constant fields)"
        )));
    }
    Ok(Summary::of(&defined, total - defined.len()))
}

fn as_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn check_series(op: &'static str, preds: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::dim(op, format!("{} vs {} days", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data(format!("{op}: empty series")));
    }
    for (p, t) in preds.iter().zip(targets) {
        same_shape(op, p, t)?;
        if p.shape() != preds[0].shape() {
            return Err(Error::dim(op, "days differ in shape"));
        }
    }
    Ok(())
}

/// Per-day Pearson over the grid, summarized over days.
pub fn spatial_corr_series(preds: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Result<Summary> {
    check_series("spatial_corr_series", preds, targets)?;
    let rs = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| pearson(&as_f64(p), &as_f64(t)))
        .collect();
    correlation_summary("spatial_corr_series", rs)
}

/// Per-gridpoint Pearson over days, summarized over space.
pub fn temporal_corr_field(preds: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Result<Summary> {
    check_series("temporal_corr_field", preds, targets)?;
    if preds.len() < 2 {
        return Err(Error::Data("temporal_corr_field: need at least two days".into()));
    }
    let cells = preds[0].len();
    let rs = (0..cells)
        .map(|i| {
            let a: Vec<f64> = preds.iter().map(|p| p.data()[i] as f64).collect();
            let b: Vec<f64> = targets.iter().map(|t| t.data()[i] as f64).collect();
            pearson(&a, &b)
        })
        .collect();
    correlation_summary("temporal_corr_field", rs)
}

/// Per-pixel mean absolute error over days.
pub fn error_map(preds: &[Tensor<f32>], targets: &[Tensor<f32>]) -> Result<Tensor<f64>> {
    check_series("error_map", preds, targets)?;
    let mut acc = vec![0.0; preds[0].len()];
    for (p, t) in preds.iter().zip(targets) {
        for ((a, &x), &y) in acc.iter_mut().zip(p.data()).zip(t.data()) {
            *a += (x as f64 - y as f64).abs();
        }
    }
    let n = preds.len() as f64;
    Tensor::new(preds[0].shape(), acc.into_iter().map(|a| a / n).collect())
}

fn laplacian_energy(x: &Tensor<f32>) -> Result<f64> {
    let (h, w) = plane("leakage_index", x)?;
    if h < 3 || w < 3 {
        return Err(Error::Config(format!("field {h}x{w} too small for a Laplacian")));
    }
    let d = x.data();
    let mut e = 0.0;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let i = r * w + c;
            let lap = d[i - w] as f64 + d[i + w] as f64 + d[i - 1] as f64 + d[i + 1] as f64
                - 4.0 * d[i] as f64;
            e += lap * lap;
        }
    }
    Ok(e / ((h - 2) * (w - 2)) as f64)
}

/// High-frequency energy of `pred` relative to `target` (1 when matched).
pub fn leakage_index(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    same_shape("leakage_index", pred, target)?;
    let et = laplacian_energy(target)?;
    if et == 0.0 {
        return Err(Error::Data("leakage_index: target has no Laplacian energy".into()));
    }
    Ok(laplacian_energy(pred)? / et)
}

/// Bilinear interpolation of the coarse field to the fine grid.
pub fn bilinear_baseline(coarse: &Tensor<f32>, hi_h: usize, hi_w: usize) -> Result<Tensor<f32>> {
    coarse.resize_bilinear(hi_h, hi_w)
}

/// Unpadded per-day predictions `[N, H, W]` of one model over a split.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub model: String,
    pub variables: Vec<String>,
    pub days: Vec<Tensor<f32>>,
}

/// Ground truth of `samples`, cropped to the unpadded grid.
pub fn targets(dataset: &Dataset, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    let p = dataset.grid().pads();
    samples
        .iter()
        .map(|s| s.target.crop(p.top, p.bottom, p.left, p.right))
        .collect()
}

/// Runs one model (or a single-variable family of models, one per variable)
/// over `samples` in eval mode.
pub fn predict(name: &str, members: &[Model<f32>], dataset: &Dataset, samples: &[Sample]) -> Result<Predictions> {
    let pads = dataset.grid().pads();
    let (hp, wp) = dataset.grid().padded();
    let mut variables = Vec::new();
    let mut plans = Vec::new();
    for m in members {
        let cfg = m.config();
        if (cfg.height, cfg.width) != (hp, wp) {
            return Err(Error::Config(format!(
                "{name}: model grid {}x{} does not match data grid {hp}x{wp}",
                cfg.height, cfg.width
            )));
        }
        let idx = cfg
            .variables
            .iter()
            .map(|v| dataset.variable_index(v))
            .collect::<Result<Vec<_>>>()?;
        variables.extend(cfg.variables.iter().cloned());
        plans.push((m, idx));
    }
    let mut days = Vec::with_capacity(samples.len());
    for s in samples {
        let mut planes = Vec::with_capacity(variables.len());
        for (m, idx) in &plans {
            let y = m.predict(&select_channels(&s.input, idx)?)?;
            let y = y.crop(pads.top, pads.bottom, pads.left, pads.right)?;
            planes.extend((0..idx.len()).map(|k| y.channel(k)));
        }
        days.push(Tensor::stack(&planes)?);
    }
    Ok(Predictions {
        model: name.to_string(),
        variables,
        days,
    })
}

/// The bilinear row, produced from the coarse fields of `samples`.
pub fn predict_bilinear(dataset: &Dataset, samples: &[Sample]) -> Result<Predictions> {
    let g = dataset.grid();
    let days = samples
        .iter()
        .map(|s| bilinear_baseline(&s.coarse, g.hi_h, g.hi_w))
        .collect::<Result<Vec<_>>>()?;
    Ok(Predictions {
        model: BILINEAR.to_string(),
        variables: dataset.variables().to_vec(),
        days,
    })
}

pub const BILINEAR: &str = "bilinear";

/// Metric names in report order.
pub const METRICS: [&str; 6] = ["mse", "mae", "ssim", "spatial_corr", "temporal_corr", "leakage"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub variable: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub skipped: usize,
}

/// Metrics and error maps for one model from one seed.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub model: String,
    pub rows: Vec<MetricRow>,
    pub error_maps: Vec<(String, Tensor<f64>)>,
}

/// Scores predictions against cropped targets. Baseline and models share
/// this path.
pub fn evaluate(preds: &Predictions, targets: &[Tensor<f32>], dataset_vars: &[String], opts: &SsimOptions) -> Result<RunMetrics> {
    if preds.days.len() != targets.len() {
        return Err(Error::dim(
            "evaluate",
            format!("{} predicted days vs {} targets", preds.days.len(), targets.len()),
        ));
    }
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for (k, var) in preds.variables.iter().enumerate() {
        let v = dataset_vars
            .iter()
            .position(|d| d == var)
            .ok_or_else(|| Error::Data(format!("{}: unknown variable '{var}'", preds.model)))?;
        let p: Vec<Tensor<f32>> = preds.days.iter().map(|d| d.channel(k)).collect();
        let t: Vec<Tensor<f32>> = targets.iter().map(|d| d.channel(v)).collect();
        let mut mse = Vec::new();
        let mut mae = Vec::new();
        let mut ss = Vec::new();
        let mut leak = Vec::new();
        let mut leak_skipped = 0;
        for (a, b) in p.iter().zip(&t) {
            let (e2, e1) = pointwise_errors(a, b, Pads::default())?;
            mse.push(e2);
            mae.push(e1);
            ss.push(ssim(a, b, opts)?);
            match leakage_index(a, b) {
                Ok(l) => leak.push(l),
                Err(Error::Data(_)) => leak_skipped += 1,
                Err(e) => return Err(e),
            }
        }
        let summaries = [
            Summary::of(&mse, 0),
            Summary::of(&mae, 0),
            Summary::of(&ss, 0),
            spatial_corr_series(&p, &t).unwrap_or(Summary::of(&[], p.len())),
            temporal_corr_field(&p, &t).unwrap_or(Summary::of(&[], p[0].len())),
            Summary::of(&leak, leak_skipped),
        ];
        for (metric, s) in METRICS.iter().zip(summaries) {
            rows.push(MetricRow {
                model: preds.model.clone(),
                variable: var.clone(),
                metric: metric.to_string(),
                mean: s.mean,
                std: s.std,
                n: s.n,
                skipped: s.skipped,
            });
        }
        maps.push((var.clone(), error_map(&p, &t)?));
    }
    Ok(RunMetrics {
        model: preds.model.clone(),
        rows,
        error_maps: maps,
    })
}

/// Seed-averaged metrics across models.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub variables: Vec<String>,
    pub models: Vec<String>,
    pub seeds: usize,
    pub rows: Vec<MetricRow>,
    pub error_maps: Vec<(String, String, Tensor<f64>)>,
}

/// Averages repeated runs of the same model (one per seed) cell by cell.
/// `n` and `skipped` are summed across seeds.
pub fn make_report(variables: &[String], runs: &[RunMetrics]) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::Data("make_report: no runs".into()));
    }
    let mut models: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<&str, Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        grouped.entry(&r.model).or_default().push(r);
    }
    let mut seeds = 0;
    let mut rows = Vec::new();
    let mut error_maps = Vec::new();
    for model in &models {
        let group = &grouped[model.as_str()];
        if model != BILINEAR {
            seeds = seeds.max(group.len());
        }
        let first = group[0];
        let mut vars: Vec<&String> = first.rows.iter().map(|r| &r.variable).collect();
        vars.dedup();
        let mut sorted_vars = vars.clone();
        sorted_vars.sort();
        let mut expected: Vec<&String> = variables.iter().collect();
        expected.sort();
        if sorted_vars != expected {
            return Err(Error::Data(format!(
                "model '{model}' covers variables {vars:?}, expected {variables:?}"
            )));
        }
        for r in group.iter().skip(1) {
            if r.rows.len() != first.rows.len()
                || r.rows
                    .iter()
                    .zip(&first.rows)
                    .any(|(a, b)| a.variable != b.variable || a.metric != b.metric)
            {
                return Err(Error::Data(format!("runs of '{model}' have inconsistent variable sets")));
            }
        }
        let k = group.len() as f64;
        for var in variables {
            for metric in METRICS {
                let cells: Vec<&MetricRow> = group
                    .iter()
                    .map(|r| {
                        r.rows
                            .iter()
                            .find(|x| &x.variable == var && x.metric == metric)
                            .expect("checked")
                    })
                    .collect();
                rows.push(MetricRow {
                    model: model.clone(),
                    variable: var.clone(),
                    metric: metric.to_string(),
                    mean: cells.iter().map(|c| c.mean).sum::<f64>() / k,
                    std: cells.iter().map(|c| c.std).sum::<f64>() / k,
                    n: cells.iter().map(|c| c.n).sum(),
                    skipped: cells.iter().map(|c| c.skipped).sum(),
                });
            }
            let maps: Vec<&Tensor<f64>> = group
                .iter()
                .map(|r| &r.error_maps.iter().find(|(v, _)| v == var).expect("checked").1)
                .collect();
            let mean = Tensor::from_fn(maps[0].shape(), |i| {
                maps.iter().map(|m| m.data()[i]).sum::<f64>() / k
            });
            error_maps.push((model.clone(), var.clone(), mean));
        }
    }
    Ok(MetricsReport {
        variables: variables.to_vec(),
        models,
        seeds: seeds.max(1),
        rows,
        error_maps,
    })
}

fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.4e}")
    }
}

impl MetricsReport {
    pub fn cell(&self, model: &str, variable: &str, metric: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.variable == variable && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,variable,metric,mean,std,n,skipped\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.9e},{:.9e},{},{}",
                r.model, r.variable, r.metric, r.mean, r.std, r.n, r.skipped
            )
            .unwrap();
        }
        s
    }

    /// Models whose cell is best for `(variable, metric)`; ties (equal at
    /// printed precision) are all returned.
    pub fn best(&self, variable: &str, metric: &str) -> Vec<String> {
        let higher_better = matches!(metric, "ssim" | "spatial_corr" | "temporal_corr");
        let key = |x: f64| -> f64 {
            let v = fmt_num(x).parse::<f64>().unwrap_or(f64::NAN);
            if metric == "leakage" {
                (v - 1.0).abs()
            } else {
                v
            }
        };
        let scores: Vec<(String, f64)> = self
            .models
            .iter()
            .filter_map(|m| self.cell(m, variable, metric).map(|c| (m.clone(), key(c.mean))))
            .filter(|(_, v)| !v.is_nan())
            .collect();
        let target = scores.iter().map(|(_, v)| *v).fold(
            if higher_better { f64::NEG_INFINITY } else { f64::INFINITY },
            |a, b| if higher_better { a.max(b) } else { a.min(b) },
        );
        scores
            .into_iter()
            .filter(|(_, v)| *v == target)
            .map(|(m, _)| m)
            .collect()
    }

    /// Per-metric tables (rows = models, columns = variables); best cells
    /// carry a trailing `*`.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let title = if self.seeds > 1 {
            format!("Mean performance across {} independent runs", self.seeds)
        } else {
            "Performance (single run)".to_string()
        };
        writeln!(s, "{title}; std uses the population convention; * marks the best value (ties included)").unwrap();
        let width = self.models.iter().map(|m| m.len()).max().unwrap_or(8).max(8);
        for (metric, label, with_std) in [
            ("mse", "MSE", false),
            ("mae", "MAE", false),
            ("ssim", "SSIM", false),
            ("spatial_corr", "Spatial correlation (mean ± std over days)", true),
            ("temporal_corr", "Temporal correlation (mean ± std over grid points)", true),
        ] {
            writeln!(s, "\n{label}").unwrap();
            let col = if with_std { 24 } else { 12 };
            write!(s, "{:<width$}", "model").unwrap();
            for v in &self.variables {
                write!(s, " {v:>col$}").unwrap();
            }
            writeln!(s).unwrap();
            let best: Vec<Vec<String>> = self.variables.iter().map(|v| self.best(v, metric)).collect();
            for m in &self.models {
                write!(s, "{m:<width$}").unwrap();
                for (vi, v) in self.variables.iter().enumerate() {
                    let cell = match self.cell(m, v, metric) {
                        Some(c) if with_std => format!("{} ± {}", fmt_num(c.mean), fmt_num(c.std)),
                        Some(c) => fmt_num(c.mean),
                        None => "-".into(),
                    };
                    let mark = if best[vi].contains(m) { "*" } else { " " };
                    write!(s, " {:>col$}", format!("{cell}{mark}")).unwrap();
                }
                writeln!(s).unwrap();
            }
            if with_std {
                write!(s, "{:<width$}", "skipped").unwrap();
                for v in &self.variables {
                    let skipped: usize = self
                        .models
                        .iter()
                        .filter_map(|m| self.cell(m, v, metric))
                        .map(|c| c.skipped)
                        .sum();
                    write!(s, " {skipped:>col$}").unwrap();
                }
                writeln!(s).unwrap();
            }
        }
        s
    }

    /// Leakage index per variable for every model, with the 1E1D-vs-1EMD
    /// comparison. `fingerprint` lists the variables carrying the static
    /// land pattern.
    pub fn leakage_table(&self, fingerprint: &[&str]) -> String {
        let mut s = String::from(
            "Leakage index (mean squared Laplacian of prediction / of target; 1 = matched high-frequency content)\n",
        );
        write!(s, "{:<10}{:>12}", "variable", "fingerprint").unwrap();
        for m in &self.models {
            write!(s, " {m:>12}").unwrap();
        }
        writeln!(s).unwrap();
        let (mut closer, mut compared) = (0, 0);
        for v in &self.variables {
            let fp = if fingerprint.contains(&v.as_str()) { "yes" } else { "no" };
            write!(s, "{v:<10}{fp:>12}").unwrap();
            for m in &self.models {
                let cell = self.cell(m, v, "leakage").map(|c| format!("{:.4}", c.mean));
                write!(s, " {:>12}", cell.unwrap_or_else(|| "-".into())).unwrap();
            }
            writeln!(s).unwrap();
            if let (Some(a), Some(b)) = (self.cell("vit_1e1d", v, "leakage"), self.cell("vit_1emd", v, "leakage")) {
                compared += 1;
                if (b.mean - 1.0).abs() < (a.mean - 1.0).abs() {
                    closer += 1;
                }
            }
        }
        if compared > 0 {
            writeln!(
                s,
                "1EMD is closer to the target's high-frequency energy than 1E1D on {closer} of {compared} variables"
            )
            .unwrap();
        }
        s
    }

    /// Writes `metrics.csv`, `table.txt`, `leakage.txt` and
    /// `heatmaps/<model>_<var>.pgm` (+ `.txt` scale) under `dir`.
    pub fn write(&self, dir: &Path, fingerprint: &[&str]) -> Result<()> {
        let maps = dir.join("heatmaps");
        std::fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
        let put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("metrics.csv", self.to_csv())?;
        put("table.txt", self.to_table())?;
        put("leakage.txt", self.leakage_table(fingerprint))?;
        for var in &self.variables {
            let of_var: Vec<&(String, String, Tensor<f64>)> =
                self.error_maps.iter().filter(|(_, v, _)| v == var).collect();
            let lo = of_var.iter().flat_map(|(_, _, t)| t.data()).copied().fold(f64::INFINITY, f64::min);
            let hi = of_var.iter().flat_map(|(_, _, t)| t.data()).copied().fold(f64::NEG_INFINITY, f64::max);
            for (model, _, map) in of_var {
                let stem = format!("{model}_{var}");
                let p = maps.join(format!("{stem}.pgm"));
                std::fs::write(&p, pgm(map, lo, hi)?).map_err(|e| Error::io(&p, e))?;
                let p = maps.join(format!("{stem}.txt"));
                let text = format!(
                    "mean absolute error, {var}, {model}\nblack = {lo:.9e}\nwhite = {hi:.9e}\nscale shared by all models for this variable\n"
                );
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }
}

/// 8-bit binary PGM with linear scaling of `[lo, hi]` onto `[0, 255]`.
pub fn pgm(map: &Tensor<f64>, lo: f64, hi: f64) -> Result<Vec<u8>> {
    let [h, w] = *map.shape() else {
        return Err(Error::dim("pgm", format!("expected [H,W], got {:?}", map.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = hi - lo;
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}
