//! Sweeps over one design axis: train a model per variant and seed, then
//! compare validation mAP.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::candidates::SamplingMethod;
use crate::decoder::{Aggregation, EncodingMode};
use crate::error::{bail, Error, Result};
use crate::train::{evaluate_split, train, RunConfig};

pub const RUNS_FILE: &str = "ablation_runs.csv";
pub const SUMMARY_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Sampling,
    Encoding,
    Layers,
    Aggregation,
    Ensemble,
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sampling" => Self::Sampling,
            "encoding" => Self::Encoding,
            "layers" => Self::Layers,
            "aggregation" => Self::Aggregation,
            "ensemble" => Self::Ensemble,
            _ => bail!(Argument, "unknown ablation axis {s:?} (sampling, encoding, layers, aggregation, ensemble)"),
        })
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sampling => "sampling",
            Self::Encoding => "encoding",
            Self::Layers => "layers",
            Self::Aggregation => "aggregation",
            Self::Ensemble => "ensemble",
        }
    }

    fn default_values(self) -> &'static str {
        match self {
            Self::Sampling => "fps,kps,kps_nms",
            Self::Encoding => "none,fixed,iterative_center,iterative_center_size",
            Self::Layers => "0..6",
            Self::Aggregation => "roi_max,roi_average,vote,attention",
            Self::Ensemble => "last,ensemble",
        }
    }
}

/// One point on an ablation axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub cfg: RunConfig,
}

/// Parses `a..b` (inclusive) or a comma list of integers.
pub fn parse_layer_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Argument(format!("bad layer range {s:?} (expected e.g. 0..6 or 0,1,3)"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

/// Expands an axis into variants of `base`. `values` overrides the axis
/// defaults (comma list, or a range for layers).
pub fn variants(base: &RunConfig, axis: AblationAxis, values: Option<&str>) -> Result<Vec<Variant>> {
    let values = values.unwrap_or(axis.default_values());
    let mut out = Vec::new();
    if axis == AblationAxis::Layers {
        for l in parse_layer_range(values)? {
            let mut cfg = base.clone();
            cfg.model.decoder.layers = l;
            out.push(Variant { label: l.to_string(), cfg });
        }
    } else {
        for v in values.split(',').map(str::trim) {
            let mut cfg = base.clone();
            match axis {
                AblationAxis::Sampling => cfg.model.sampling = SamplingMethod::from_str(v)?,
                AblationAxis::Encoding => cfg.model.decoder.mode = EncodingMode::from_str(v)?,
                AblationAxis::Aggregation => cfg.model.decoder.aggregation = Aggregation::from_str(v)?,
                AblationAxis::Ensemble => {
                    cfg.ensemble = match v {
                        "last" => false,
                        "ensemble" => true,
                        _ => bail!(Argument, "unknown ensemble value {v:?} (last, ensemble)"),
                    }
                }
                AblationAxis::Layers => unreachable!(),
            }
            out.push(Variant { label: v.to_string(), cfg });
        }
    }
    if out.is_empty() {
        bail!(Argument, "ablation axis {} has no values", axis.name());
    }
    for v in &out {
        v.cfg.validate()?;
    }
    Ok(out)
}

/// Validation mAP of one trained variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    pub map: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub label: String,
    pub runs: usize,
    pub mean: [f64; 2],
    /// Standard error of the mean over seeds.
    pub se: [f64; 2],
}

/// Mean and standard error of the mean (sample standard deviation over √n).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Tied values share the average of their positions.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; zero when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn summarize(variants: &[Variant], runs: &[AblationRun]) -> Vec<AblationSummary> {
    variants
        .iter()
        .map(|v| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.label == v.label).collect();
            let mut mean = [0.0; 2];
            let mut se = [0.0; 2];
            for t in 0..2 {
                let xs: Vec<f64> = mine.iter().map(|r| r.map[t]).collect();
                (mean[t], se[t]) = mean_se(&xs);
            }
            AblationSummary {
                label: v.label.clone(),
                runs: mine.len(),
                mean,
                se,
            }
        })
        .collect()
}

/// Per-seed mAP for the label, in seed order.
pub fn series(runs: &[AblationRun], label: &str, threshold: usize) -> Vec<f64> {
    let mut v: Vec<(u64, f64)> = runs.iter().filter(|r| r.label == label).map(|r| (r.seed, r.map[threshold])).collect();
    v.sort_by_key(|x| x.0);
    v.into_iter().map(|x| x.1).collect()
}

pub fn runs_csv(axis: &str, runs: &[AblationRun]) -> String {
    let mut s = format!("{axis},seed,mAP@0.25,mAP@0.5\n");
    for r in runs {
        writeln!(s, "{},{},{:.6},{:.6}", r.label, r.seed, r.map[0], r.map[1]).unwrap();
    }
    s
}

pub fn summary_csv(axis: &str, rows: &[AblationSummary]) -> String {
    let mut s = format!("{axis},runs,mAP@0.25,se@0.25,mAP@0.5,se@0.5\n");
    for r in rows {
        writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6}", r.label, r.runs, r.mean[0], r.se[0], r.mean[1], r.se[1]).unwrap();
    }
    s
}

/// Trains every variant for seeds `first_seed..first_seed + trials` and
/// evaluates on the validation split. Variants that differ only in the
/// ensemble flag share one trained model. With `out`, each training run
/// is written to `<out>/<label>/seed<k>`.
pub fn run_variants(
    variants: &[Variant],
    first_seed: u64,
    trials: usize,
    out: Option<&Path>,
    mut progress: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    if trials == 0 {
        bail!(Argument, "ablation needs at least one trial");
    }
    let mut runs = Vec::with_capacity(variants.len() * trials);
    for k in 0..trials as u64 {
        let seed = first_seed + k;
        let mut done = vec![false; variants.len()];
        for i in 0..variants.len() {
            if done[i] {
                continue;
            }
            let mut cfg = variants[i].cfg.clone();
            cfg.seed = seed;
            cfg.ensemble = false;
            let data = cfg.generate_dataset()?;
            if data.val.is_empty() {
                bail!(Config, "ablation needs validation scenes");
            }
            let dir = out.map(|d| d.join(&variants[i].label).join(format!("seed{seed}")));
            let trained = train(&cfg, &data, dir.as_deref())?;
            for j in i..variants.len() {
                let mut other = variants[j].cfg.clone();
                other.seed = seed;
                other.ensemble = false;
                if done[j] || other != cfg {
                    continue;
                }
                done[j] = true;
                let mut eval_cfg = cfg.clone();
                eval_cfg.ensemble = variants[j].cfg.ensemble;
                let (report, _) = evaluate_split(&trained.detector, &trained.store, &data.val, &eval_cfg)?;
                let run = AblationRun {
                    label: variants[j].label.clone(),
                    seed,
                    map: [report.map[0], report.map[1]],
                };
                progress(&run);
                runs.push(run);
            }
        }
    }
    Ok(runs)
}

/// Runs an axis sweep and writes the per-run and summary tables.
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    values: Option<&str>,
    out: &Path,
    progress: impl FnMut(&AblationRun),
) -> Result<Vec<AblationSummary>> {
    let vs = variants(base, axis, values)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let runs = run_variants(&vs, base.seed, base.trials, Some(out), progress)?;
    let rows = summarize(&vs, &runs);
    for (name, text) in [(RUNS_FILE, runs_csv(axis.name(), &runs)), (SUMMARY_FILE, summary_csv(axis.name(), &rows))] {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}
