//! Classification metrics, calibration, and the Wilcoxon signed-rank test.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Fraction of predictions equal to the label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1. A class with no predictions and no
/// positives contributes 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_pair(preds.len(), labels.len())?;
    if classes == 0 {
        return Err(Error::InvalidInput(
            "macro F1 needs at least one class".into(),
        ));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::InvalidInput(format!(
            "class {bad} out of range for {classes} classes"
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Empty("metric on empty input".into()));
    }
    if a != b {
        return Err(Error::mismatch(a, b, "predictions vs labels"));
    }
    Ok(())
}

/// Equal-width confidence bins on `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBins {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
}

/// Bins are right-closed, `(lo, hi]`, with confidence 0 in the first bin.
pub fn reliability_bins(
    confidences: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<ReliabilityBins> {
    check_pair(confidences.len(), correct.len())?;
    if bins == 0 {
        return Err(Error::InvalidInput("need at least one bin".into()));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidInput(format!("confidence {c} outside [0,1]")));
    }
    let mut counts = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64).ceil() as usize)
            .saturating_sub(1)
            .min(bins - 1);
        counts[b] += 1;
        conf_sum[b] += c;
        hit_sum[b] += ok as usize;
    }
    let per_bin = |num: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..bins)
            .map(|b| {
                if counts[b] == 0 {
                    0.0
                } else {
                    num(b) / counts[b] as f64
                }
            })
            .collect()
    };
    Ok(ReliabilityBins {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        mean_confidence: per_bin(&|b| conf_sum[b]),
        accuracy: per_bin(&|b| hit_sum[b] as f64),
        counts,
    })
}

impl ReliabilityBins {
    /// `sum_b (n_b / N) |acc_b - conf_b|`.
    pub fn ece(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        (0..self.counts.len())
            .map(|b| {
                self.counts[b] as f64 / n as f64
                    * (self.accuracy[b] - self.mean_confidence[b]).abs()
            })
            .sum()
    }
}

pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    Ok(reliability_bins(confidences, correct, bins)?.ece())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Number of nonzero differences used.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Largest sample size handled by exact enumeration of the null.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped and tied magnitudes get average ranks. For up
/// to [`WILCOXON_EXACT_MAX`] nonzero differences the null distribution of
/// `W+` is enumerated exactly (conditional on the observed ranks); above that
/// the normal approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput("non-finite difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::Statistics(
            "all differences are zero; test undefined".into(),
        ));
    }
    if nz.len() < 5 {
        return Err(Error::Statistics(format!(
            "need at least 5 nonzero differences, got {}",
            nz.len()
        )));
    }
    let n = nz.len();
    let ranks2 = doubled_ranks(&nz);
    let w2_plus: u64 = nz
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let w_plus = w2_plus as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX {
        let pmf = signed_rank_null_pmf(&ranks2);
        let lower: f64 = pmf[..=w2_plus as usize].iter().sum();
        let upper: f64 = pmf[w2_plus as usize..].iter().sum();
        let p_value = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult {
            w_plus,
            n,
            p_value,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_groups(&nz)
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum::<f64>()
        / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let dev = w_plus - mean;
    let corrected = if dev.abs() <= 0.5 {
        0.0
    } else {
        dev.abs() - 0.5
    };
    let z = corrected / var.sqrt();
    let p_value = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(WilcoxonResult {
        w_plus,
        n,
        p_value,
        exact: false,
    })
}

/// Null PMF of `2 W+` for the given doubled ranks: each rank's sign is an
/// independent fair coin. Index `k` holds `P(2 W+ = k)`.
pub fn signed_rank_null_pmf(ranks2: &[u64]) -> Vec<f64> {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for k in (0..=reach).rev() {
            let c = counts[k];
            if c != 0.0 {
                counts[k + r] += c;
            }
        }
        reach += r;
    }
    let scale = 0.5f64.powi(ranks2.len() as i32);
    counts.iter().map(|c| c * scale).collect()
}

/// Twice the average rank of each |d|, so tied half-ranks stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, doubled.
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < mags.len() {
        let mut j = i;
        while j + 1 < mags.len() && mags[j + 1] == mags[i] {
            j += 1;
        }
        if j > i {
            groups.push(j - i + 1);
        }
        i = j + 1;
    }
    groups
}
