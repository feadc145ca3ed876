//! Classification and segmentation metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn check_binary(scores: usize, labels: &[usize]) -> Result<(usize, usize)> {
    if scores != labels.len() {
        return Err(Error::ShapeMismatch(format!("{scores} scores for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::DegenerateLabels(format!("label {bad} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Mann–Whitney estimate: `(#{pos > neg} + 0.5 #{ties}) / (n_pos n_neg)`,
/// via mid-ranks.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check_binary(scores.len(), labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr)` from the highest threshold down, one point per
/// distinct score.
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores.len(), labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last_of_tie {
            pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
    }
    Ok(pts)
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// `2|A ∩ B| / (|A| + |B|)` for label `class`; 1 when both are empty.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} voxels", pred.len(), gt.len())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == class, g == class);
        a += p as usize;
        b += g as usize;
        both += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

/// In-mask voxels with at least one face neighbour outside the mask (or
/// outside the grid). `dims` is row-major, slowest axis first.
pub fn boundary(mask: &[bool], dims: &[usize]) -> Vec<bool> {
    let st = strides(dims);
    let mut out = vec![false; mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        out[i] = dims.iter().zip(&st).any(|(&d, &s)| {
            let c = (i / s) % d;
            c == 0 || c + 1 == d || !mask[i - s] || !mask[i + s]
        });
    }
    out
}

/// Exact squared distance transform of a 1D sampled function on the grid
/// `x_i = i * h` (lower envelope of parabolas).
fn edt_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let (p, xq, xp) = (v[k], q as f64 * h, v[k] as f64 * h);
            let s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * h;
        while z[j + 1] < x {
            j += 1;
        }
        let d = x - v[j] as f64 * h;
        *o = d * d + f[v[j]];
    }
}

/// Euclidean distance from every voxel to the nearest `true` voxel of
/// `features`, with per-axis `spacing`. Infinite when there are none.
pub fn distance_transform(features: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    assert_eq!(dims.len(), spacing.len());
    let st = strides(dims);
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    for (axis, (&n, &s)) in dims.iter().zip(&st).enumerate() {
        let mut line = vec![0f64; n];
        let mut out = vec![0f64; n];
        for start in 0..d.len() {
            if (start / s) % n != 0 {
                continue;
            }
            for (k, l) in line.iter_mut().enumerate() {
                *l = d[start + k * s];
            }
            edt_1d(&line, spacing[axis], &mut out);
            for (k, &o) in out.iter().enumerate() {
                d[start + k * s] = o;
            }
        }
    }
    d.into_iter().map(f64::sqrt).collect()
}

/// Nearest-rank percentile of an unsorted sample (`q` in (0, 100]).
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

/// 95th percentile of the pooled boundary-to-boundary distances in both
/// directions.
pub fn hd95(pred: &[bool], gt: &[bool], dims: &[usize], spacing: &[f64]) -> Result<f64> {
    let n: usize = dims.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "masks of {} and {} voxels for dims {dims:?}",
            pred.len(),
            gt.len()
        )));
    }
    let (pe, ge) = (!pred.iter().any(|&v| v), !gt.iter().any(|&v| v));
    match (pe, ge) {
        (true, true) => return Ok(0.0),
        (true, false) => return Err(Error::EmptyMask("pred")),
        (false, true) => return Err(Error::EmptyMask("gt")),
        _ => {}
    }
    let bp = boundary(pred, dims);
    let bg = boundary(gt, dims);
    let to_gt = distance_transform(&bg, dims, spacing);
    let to_pred = distance_transform(&bp, dims, spacing);
    let mut pooled: Vec<f64> = bp
        .iter()
        .zip(&to_gt)
        .filter(|(b, _)| **b)
        .map(|(_, &d)| d)
        .chain(bg.iter().zip(&to_pred).filter(|(b, _)| **b).map(|(_, &d)| d))
        .collect();
    Ok(nearest_rank(&mut pooled, 95.0))
}

pub fn class_mask(labels: &[u8], class: u8) -> Vec<bool> {
    labels.iter().map(|&l| l == class).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Thresholds positive-class probabilities at 0.5 (inclusive).
pub fn classification_metrics(probs: &[f64], labels: &[usize]) -> Result<ClassificationMetrics> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= 0.5, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, probs.len()),
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Welch's t statistic and Welch–Satterthwaite degrees of freedom.
pub fn welch_statistic(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    (t, df)
}

/// Two-sided Welch t-test p-value across folds.
pub fn fold_ttest(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "fold_ttest needs equal fold counts >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let (t, df) = welch_statistic(a, b);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}
