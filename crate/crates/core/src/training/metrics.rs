//! Evaluation metrics. Undefined values are `None` and serialise as `null`.

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {a} vs {b}"
        )));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("metric over no samples".into()));
    }
    Ok(())
}

pub fn mean_absolute_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred.len(), target.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// `1 - SS_res / SS_tot`; `None` when the targets have zero variance.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<Option<f64>> {
    check_len(pred.len(), target.len())?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(None);
    }
    let ss_res: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (t - p) * (t - p))
        .sum();
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Matthews correlation for any number of classes. A zero denominator
/// yields 0.
pub fn mcc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let mut conf = vec![0u64; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[t * k + p] += 1;
    }
    let s = pred.len() as f64;
    let c: f64 = (0..k).map(|i| conf[i * k + i] as f64).sum();
    let t_k: Vec<f64> = (0..k)
        .map(|i| (0..k).map(|j| conf[i * k + j] as f64).sum())
        .collect();
    let p_k: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| conf[i * k + j] as f64).sum())
        .collect();
    let cov_pt = c * s - t_k.iter().zip(&p_k).map(|(t, p)| t * p).sum::<f64>();
    let cov_pp = s * s - p_k.iter().map(|p| p * p).sum::<f64>();
    let cov_tt = s * s - t_k.iter().map(|t| t * t).sum::<f64>();
    let denom = (cov_pp * cov_tt).sqrt();
    Ok(if denom == 0.0 { 0.0 } else { cov_pt / denom })
}

/// Area under the ROC curve via the rank-sum statistic with midranks for
/// ties. `None` unless both classes are present.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| labels[o]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}
