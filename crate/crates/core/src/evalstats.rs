//! Ranking metrics, study-level bootstrap intervals, Platt calibration,
//! label-efficiency scaling fits, equivalence testing and related summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::percentile_sorted;
use crate::seed::{rng_indexed, sub_seed};

pub const DEFAULT_REPLICATES: usize = 2000;
pub const EQUIVALENCE_BAND: f64 = 0.05;
/// Minimum training positives for a class to enter a scaling fit.
pub const MIN_TRAIN_POSITIVES: usize = 30;
pub const MIN_TEST_POSITIVES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub study_ids: Vec<String>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, study_ids: Vec<String>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != study_ids.len() {
            return Err(Error::shape(
                "scored_set",
                format!("{} scores, {} labels, {} ids", scores.len(), labels.len(), study_ids.len()),
            ));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidArgument("scores contain NaN".into()));
        }
        Ok(Self {
            scores,
            labels,
            study_ids,
        })
    }

    /// Study ids default to the row index.
    pub fn unnamed(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| i.to_string()).collect();
        Self::new(scores, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.len() - p;
        if p == 0 || n == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{p} positives and {n} negatives; both classes are required"
            )));
        }
        Ok((p, n))
    }

    pub fn select(&self, rows: &[usize]) -> ScoredSet {
        ScoredSet {
            scores: rows.iter().map(|&i| self.scores[i]).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            study_ids: rows.iter().map(|&i| self.study_ids[i].clone()).collect(),
        }
    }

    /// Rows grouped by study, groups ordered by first appearance.
    pub fn study_groups(&self) -> Vec<Vec<usize>> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, id) in self.study_ids.iter().enumerate() {
            let g = *index.entry(id.as_str()).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(i);
        }
        groups
    }

    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> ScoredSet {
        ScoredSet {
            scores: self.scores.iter().map(|&s| f(s)).collect(),
            ..self.clone()
        }
    }
}

/// Rows sorted by ascending score, split into runs of equal score.
fn tie_runs(s: &ScoredSet) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut runs: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let pos = usize::from(s.labels[i] == 1);
        match runs.last_mut() {
            Some(r) if r.0 == s.scores[i] => {
                r.1 += pos;
                r.2 += 1 - pos;
            }
            _ => runs.push((s.scores[i], pos, 1 - pos)),
        }
    }
    runs
}

/// Tie-aware AUROC via midranks. The numerator is kept as the integer
/// `2·wins + ties`, so the result equals pairwise counting exactly.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.class_counts()?;
    let mut below_neg: u128 = 0;
    let mut twice_u: u128 = 0;
    for (_, pos, neg) in tie_runs(s) {
        let (pos, neg) = (pos as u128, neg as u128);
        twice_u += 2 * pos * below_neg + pos * neg;
        below_neg += neg;
    }
    Ok(twice_u as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Average precision with step-wise interpolation: each distinct threshold
/// contributes `ΔRecall · Precision`.
pub fn auprc(s: &ScoredSet) -> Result<f64> {
    let (p, _) = s.class_counts()?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    for (_, pos, neg) in tie_runs(s).into_iter().rev() {
        tp += pos;
        fp += neg;
        if pos > 0 {
            ap += (pos as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Counts with the rule `score >= threshold` → positive.
pub fn confusion(s: &ScoredSet, threshold: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&sc, &l) in s.scores.iter().zip(&s.labels) {
        match (sc >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn sensitivity(s: &ScoredSet, threshold: f64) -> Result<f64> {
    let (p, _) = s.class_counts()?;
    Ok(confusion(s, threshold).tp as f64 / p as f64)
}

pub fn specificity(s: &ScoredSet, threshold: f64) -> Result<f64> {
    let (_, n) = s.class_counts()?;
    Ok(confusion(s, threshold).tn as f64 / n as f64)
}

pub fn balanced_accuracy(s: &ScoredSet, threshold: f64) -> Result<f64> {
    Ok(0.5 * (sensitivity(s, threshold)? + specificity(s, threshold)?))
}

pub fn f1_at(s: &ScoredSet, threshold: f64) -> Result<f64> {
    s.class_counts()?;
    let c = confusion(s, threshold);
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// Threshold maximizing balanced accuracy over the distinct scores; ties go
/// to the lowest threshold.
pub fn select_threshold(val: &ScoredSet) -> Result<f64> {
    let (p, n) = val.class_counts()?;
    let runs = tie_runs(val);
    // Threshold at run j: rows in runs j.. are predicted positive.
    let mut tp = p;
    let mut tn = 0usize;
    let mut best = (f64::NEG_INFINITY, runs[0].0);
    for &(score, pos, neg) in &runs {
        let ba = 0.5 * (tp as f64 / p as f64 + tn as f64 / n as f64);
        if ba > best.0 {
            best = (ba, score);
        }
        tp -= pos;
        tn += neg;
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub replicates: usize,
    /// Replicates skipped because the metric was undefined on them.
    pub degenerate: usize,
    pub seed: u64,
}

impl BootstrapCi {
    pub fn halfwidth(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

/// Study-level resample: draws studies with replacement and returns the
/// concatenated row indices.
fn resample_rows(groups: &[Vec<usize>], rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut rows = Vec::new();
    for _ in 0..groups.len() {
        rows.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
    }
    rows
}

fn percentile_ci(
    estimate: f64,
    values: Vec<Result<f64>>,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    let mut ok = Vec::with_capacity(values.len());
    let mut degenerate = 0;
    for v in values {
        match v {
            Ok(x) if x.is_finite() => ok.push(x),
            Ok(_) | Err(Error::UndefinedMetric(_)) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if replicates == 0 || degenerate * 2 > replicates || ok.is_empty() {
        return Err(Error::UnreliableCi {
            degenerate,
            replicates,
        });
    }
    ok.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        estimate,
        lo: percentile_sorted(&ok, 2.5),
        hi: percentile_sorted(&ok, 97.5),
        replicates,
        degenerate,
        seed,
    })
}

/// 2.5/97.5 percentile interval of `metric` over study-level resamples.
/// Replicate `r` uses its own derived stream, so results do not depend on
/// how replicates are scheduled across threads.
pub fn bootstrap_ci<F>(metric: F, s: &ScoredSet, replicates: usize, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&ScoredSet) -> Result<f64> + Sync,
{
    let estimate = metric(s)?;
    let groups = s.study_groups();
    let base = sub_seed(seed, "evalstats/bootstrap");
    let values: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_indexed(base, r as u64);
            metric(&s.select(&resample_rows(&groups, &mut rng)))
        })
        .collect();
    percentile_ci(estimate, values, replicates, seed)
}

/// Bootstrap of `metric(a) − metric(b)` where both sets are resampled with
/// the same studies. Both sets must cover the same study ids.
pub fn paired_bootstrap_delta<F>(
    metric: F,
    a: &ScoredSet,
    b: &ScoredSet,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapCi>
where
    F: Fn(&ScoredSet) -> Result<f64> + Sync,
{
    let ga = a.study_groups();
    let ids: Vec<&str> = ga.iter().map(|g| a.study_ids[g[0]].as_str()).collect();
    let by_id: BTreeMap<&str, Vec<usize>> = b
        .study_groups()
        .into_iter()
        .map(|g| (b.study_ids[g[0]].as_str(), g))
        .collect();
    if by_id.len() != ids.len() || ids.iter().any(|id| !by_id.contains_key(id)) {
        return Err(Error::InvalidArgument(
            "paired bootstrap needs the same studies in both score sets".into(),
        ));
    }
    let gb: Vec<&Vec<usize>> = ids.iter().map(|id| &by_id[id]).collect();
    let estimate = metric(a)? - metric(b)?;
    let base = sub_seed(seed, "evalstats/paired_bootstrap");
    let values: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_indexed(base, r as u64);
            let mut ra = Vec::new();
            let mut rb = Vec::new();
            for _ in 0..ga.len() {
                let k = rng.random_range(0..ga.len());
                ra.extend_from_slice(&ga[k]);
                rb.extend_from_slice(gb[k]);
            }
            Ok(metric(&a.select(&ra))? - metric(&b.select(&rb))?)
        })
        .collect();
    percentile_ci(estimate, values, replicates, seed)
}

/// Same difference with the two sets resampled independently.
pub fn unpaired_bootstrap_delta<F>(
    metric: F,
    a: &ScoredSet,
    b: &ScoredSet,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapCi>
where
    F: Fn(&ScoredSet) -> Result<f64> + Sync,
{
    let (ga, gb) = (a.study_groups(), b.study_groups());
    let estimate = metric(a)? - metric(b)?;
    let base = sub_seed(seed, "evalstats/unpaired_bootstrap");
    let values: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_indexed(base, r as u64);
            let ra = resample_rows(&ga, &mut rng);
            let rb = resample_rows(&gb, &mut rng);
            Ok(metric(&a.select(&ra))? - metric(&b.select(&rb))?)
        })
        .collect();
    percentile_ci(estimate, values, replicates, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattFit {
    pub a: f64,
    pub b: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PlattFit {
    pub fn apply(&self, score: f64) -> f64 {
        sigmoid(self.a * score + self.b)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const PLATT_MAX_ITER: usize = 100;

/// Maximum-likelihood `(a, b)` for `p = sigmoid(a·score + b)` by Newton
/// steps with backtracking; stops once the mean gradient norm drops below 1e-10.
pub fn platt_calibrate(val: &ScoredSet) -> Result<PlattFit> {
    val.class_counts()?;
    let nll = |a: f64, b: f64| -> f64 {
        val.scores
            .iter()
            .zip(&val.labels)
            .map(|(&s, &y)| {
                let z = a * s + b;
                log1p_exp(z) - f64::from(y) * z
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, 0.0);
    let mut f = nll(a, b);
    let n = val.len() as f64;
    for it in 0..PLATT_MAX_ITER {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&s, &y) in val.scores.iter().zip(&val.labels) {
            let p = sigmoid(a * s + b);
            let r = p - f64::from(y);
            let w = p * (1.0 - p);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        if ga.hypot(gb) < 1e-10 * n {
            return Ok(PlattFit {
                a,
                b,
                iterations: it,
                converged: true,
            });
        }
        // Small ridge keeps the system solvable when the Hessian degenerates.
        let ridge = 1e-12 * (haa + hbb).max(1.0);
        let (haa, hbb) = (haa + ridge, hbb + ridge);
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det);
        if !da.is_finite() || !db.is_finite() {
            da = ga;
            db = gb;
        }
        let mut step = 1.0;
        loop {
            let (na, nb) = (a - step * da, b - step * db);
            let nf = nll(na, nb);
            // Near the optimum the summed NLL only changes at rounding level.
            if nf <= f + 1e-13 * f.abs() || step < 1e-10 {
                a = na;
                b = nb;
                f = nf;
                break;
            }
            step *= 0.5;
        }
    }
    warn!("Platt scaling did not converge in {PLATT_MAX_ITER} iterations (classes may be separable)");
    Ok(PlattFit {
        a,
        b,
        iterations: PLATT_MAX_ITER,
        converged: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub class: String,
    pub n_pos: usize,
    pub n_test_pos: usize,
    pub f1: f64,
}

impl ScalingPoint {
    pub fn eligible(&self) -> bool {
        self.n_pos >= MIN_TRAIN_POSITIVES && self.n_test_pos >= MIN_TEST_POSITIVES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    /// Classical OLS covariance of (slope, intercept), row-major 2×2.
    pub covariance: [f64; 4],
    pub classes: Vec<String>,
}

fn eligible(points: &[ScalingPoint]) -> Result<Vec<&ScalingPoint>> {
    let e: Vec<&ScalingPoint> = points.iter().filter(|p| p.eligible()).collect();
    if e.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "scaling fit needs >= 3 eligible classes, got {}",
            e.len()
        )));
    }
    Ok(e)
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::UndefinedMetric("all classes have the same positive count".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Ordinary least squares of F1 on `log10(n_pos)` over eligible classes.
pub fn fit_label_scaling(points: &[ScalingPoint]) -> Result<ScalingFit> {
    let e = eligible(points)?;
    let xs: Vec<f64> = e.iter().map(|p| (p.n_pos as f64).log10()).collect();
    let ys: Vec<f64> = e.iter().map(|p| p.f1).collect();
    let (slope, intercept) = ols(&xs, &ys)?;
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - slope * x - intercept).collect();
    let n = xs.len() as f64;
    let sigma2 = residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2.0).max(1.0);
    let mx = xs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let var_slope = sigma2 / sxx;
    let var_int = sigma2 * (1.0 / n + mx * mx / sxx);
    let cov = -mx * sigma2 / sxx;
    Ok(ScalingFit {
        slope,
        intercept,
        residuals,
        covariance: [var_slope, cov, cov, var_int],
        classes: e.iter().map(|p| p.class.clone()).collect(),
    })
}

/// Shared-slope fit across two systems: `F1 = s·log10(n) + c_sys`.
fn shared_slope(a: &[&ScalingPoint], b: &[&ScalingPoint]) -> Result<(f64, f64, f64)> {
    // Within-system centering eliminates the intercepts.
    let stats = |pts: &[&ScalingPoint]| {
        let xs: Vec<f64> = pts.iter().map(|p| (p.n_pos as f64).log10()).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.f1).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        (mx, my, sxx, sxy)
    };
    let (mxa, mya, sxxa, sxya) = stats(a);
    let (mxb, myb, sxxb, sxyb) = stats(b);
    if sxxa + sxxb <= 0.0 {
        return Err(Error::UndefinedMetric("no spread in positive counts".into()));
    }
    let s = (sxya + sxyb) / (sxxa + sxxb);
    Ok((s, mya - s * mxa, myb - s * mxb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEquivalence {
    /// Fold-increase in positives system B needs to match system A.
    pub factor: f64,
    pub ci: BootstrapCi,
    pub shared_slope: f64,
    pub intercept_a: f64,
    pub intercept_b: f64,
    /// Bootstrap interval of `slope_a − slope_b`.
    pub slope_diff_ci: (f64, f64),
    /// False when the slope-difference interval excludes zero.
    pub slopes_compatible: bool,
}

/// `10^((c_A − c_B)/s)` under a shared slope, with a bootstrap over classes.
pub fn data_equivalence(
    a: &[ScalingPoint],
    b: &[ScalingPoint],
    replicates: usize,
    seed: u64,
) -> Result<DataEquivalence> {
    let (ea, eb) = (eligible(a)?, eligible(b)?);
    let factor_of = |pa: &[&ScalingPoint], pb: &[&ScalingPoint]| -> Result<(f64, f64)> {
        let (s, ca, cb) = shared_slope(pa, pb)?;
        let xa: Vec<f64> = pa.iter().map(|p| (p.n_pos as f64).log10()).collect();
        let ya: Vec<f64> = pa.iter().map(|p| p.f1).collect();
        let xb: Vec<f64> = pb.iter().map(|p| (p.n_pos as f64).log10()).collect();
        let yb: Vec<f64> = pb.iter().map(|p| p.f1).collect();
        let diff = ols(&xa, &ya)?.0 - ols(&xb, &yb)?.0;
        Ok((10f64.powf((ca - cb) / s), diff))
    };
    let (s, ca, cb) = shared_slope(&ea, &eb)?;
    let (factor, _) = factor_of(&ea, &eb)?;
    let base = sub_seed(seed, "evalstats/scaling_bootstrap");
    let draws: Vec<Result<(f64, f64)>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_indexed(base, r as u64);
            let ra: Vec<&ScalingPoint> = (0..ea.len()).map(|_| ea[rng.random_range(0..ea.len())]).collect();
            let rb: Vec<&ScalingPoint> = (0..eb.len()).map(|_| eb[rng.random_range(0..eb.len())]).collect();
            factor_of(&ra, &rb)
        })
        .collect();
    let mut factors = Vec::with_capacity(replicates);
    let mut diffs = Vec::new();
    for d in draws {
        match d {
            Ok((f, diff)) => {
                factors.push(Ok(f));
                diffs.push(diff);
            }
            Err(e) => factors.push(Err(e)),
        }
    }
    let ci = percentile_ci(factor, factors, replicates, seed)?;
    diffs.sort_by(f64::total_cmp);
    let slope_diff_ci = (percentile_sorted(&diffs, 2.5), percentile_sorted(&diffs, 97.5));
    let slopes_compatible = slope_diff_ci.0 <= 0.0 && slope_diff_ci.1 >= 0.0;
    if !slopes_compatible {
        warn!("slope difference interval {slope_diff_ci:?} excludes zero; shared-slope factor is approximate");
    }
    Ok(DataEquivalence {
        factor,
        ci,
        shared_slope: s,
        intercept_a: ca,
        intercept_b: cb,
        slope_diff_ci,
        slopes_compatible,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Equivalent,
    NotShown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub delta: f64,
    pub ci: (f64, f64),
    pub band: f64,
    pub verdict: Verdict,
}

pub fn equivalence_verdict(ci: (f64, f64), band: f64) -> Verdict {
    if ci.0 > -band && ci.1 < band {
        Verdict::Equivalent
    } else {
        Verdict::NotShown
    }
}

/// `AUROC(transfer) − AUROC(native)` with a paired study-level bootstrap.
pub fn cross_modal_delta(
    transfer: &ScoredSet,
    native: &ScoredSet,
    replicates: usize,
    seed: u64,
    band: f64,
) -> Result<EquivalenceResult> {
    let ci = paired_bootstrap_delta(auroc, transfer, native, replicates, seed)?;
    Ok(EquivalenceResult {
        delta: ci.estimate,
        ci: (ci.lo, ci.hi),
        band,
        verdict: equivalence_verdict((ci.lo, ci.hi), band),
    })
}

/// Logit changes after a left-right flip for one study with a known lesion side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub right: bool,
    pub delta_l: f64,
    pub delta_r: f64,
}

/// `(Δ_L − Δ_R)/2`: positive when flipping moved evidence from right to left.
pub fn laterality_statistic(delta_l: f64, delta_r: f64) -> f64 {
    0.5 * (delta_l - delta_r)
}

/// AUROC of the flip statistic against "lesion is on the right".
pub fn laterality_flip_auroc(records: &[FlipRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no eligible studies for the flip test".into()));
    }
    let s = ScoredSet::unnamed(
        records.iter().map(|r| laterality_statistic(r.delta_l, r.delta_r)).collect(),
        records.iter().map(|r| u8::from(r.right)).collect(),
    )?;
    auroc(&s)
}

/// Min-normalized co-occurrence `|i∩j| / min(|i|,|j|)`; `None` where a class
/// has no positives.
pub fn cooccurrence(labels: &[Vec<u8>], classes: usize) -> Result<Vec<Vec<Option<f64>>>> {
    if let Some(r) = labels.iter().find(|r| r.len() != classes) {
        return Err(Error::shape("cooccurrence", format!("row of {} labels, expected {classes}", r.len())));
    }
    let count = |i: usize, j: usize| labels.iter().filter(|r| r[i] == 1 && r[j] == 1).count();
    let sizes: Vec<usize> = (0..classes).map(|i| count(i, i)).collect();
    Ok((0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| {
                    let m = sizes[i].min(sizes[j]);
                    (m > 0).then(|| count(i, j) as f64 / m as f64)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub value: f64,
    /// Set when the half-width was zero and `value` is a sentinel.
    pub degenerate: bool,
}

/// `S = Δ / halfwidth`; `|S| > 1` exactly when the interval `Δ ± halfwidth` excludes 0.
pub fn subgroup_separation(delta: f64, halfwidth: f64) -> Separation {
    if halfwidth > 0.0 {
        return Separation {
            value: delta / halfwidth,
            degenerate: false,
        };
    }
    Separation {
        value: if delta == 0.0 { 0.0 } else { f64::INFINITY.copysign(delta) },
        degenerate: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub class: String,
    pub value: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, class: &str, value: f64, ci: Option<&BootstrapCi>, n: usize) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            class: class.to_string(),
            value,
            ci_lo: ci.map(|c| c.lo),
            ci_hi: ci.map(|c| c.hi),
            n,
            replicates: ci.map_or(0, |c| c.replicates),
            seed: ci.map_or(0, |c| c.seed),
        });
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.rows).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for r in &self.rows {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rows = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self { rows })
    }
}
