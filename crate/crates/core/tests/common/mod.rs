//! Brute-force reference implementations shared by integration tests.
#![allow(dead_code)]

/// R² straight from the definition, with explicit loops.
pub fn r2_oracle(pred: &[f64], target: &[f64]) -> Option<f64> {
    let n = target.len() as f64;
    let mut mean = 0.0;
    for t in target {
        mean += t;
    }
    mean /= n;
    let (mut res, mut tot) = (0.0, 0.0);
    for i in 0..target.len() {
        res += (target[i] - pred[i]) * (target[i] - pred[i]);
        tot += (target[i] - mean) * (target[i] - mean);
    }
    if tot == 0.0 {
        None
    } else {
        Some(1.0 - res / tot)
    }
}

/// MCC as the Pearson correlation of flattened one-hot label matrices.
pub fn mcc_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let n = pred.len();
    let x: Vec<f64> = pred
        .iter()
        .flat_map(|&c| (0..k).map(move |j| f64::from(u8::from(j == c))))
        .collect();
    let y: Vec<f64> = truth
        .iter()
        .flat_map(|&c| (0..k).map(move |j| f64::from(u8::from(j == c))))
        .collect();
    let col_mean = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                out[j] += m[i * k + j] / n as f64;
            }
        }
        out
    };
    let (mx, my) = (col_mean(&x), col_mean(&y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..k {
            let a = x[i * k + j] - mx[j];
            let b = y[i * k + j] - my[j];
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// AUROC by counting every positive/negative pair; ties count one half.
pub fn auroc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}
