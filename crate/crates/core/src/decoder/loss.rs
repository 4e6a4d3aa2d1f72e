//! Training losses: sigmoid focal loss for query classification, Gaussian
//! focal loss for heatmaps, L1 on encoded boxes, and greedy matching.

use crate::ops::sigmoid;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const GFL_ALPHA: f64 = 2.0;
pub const GFL_BETA: f64 = 4.0;
const LOG_EPS: f64 = 1e-12;

/// `ln σ(x)` and `ln(1 - σ(x))` without cancellation.
fn log_sigmoids(x: f64) -> (f64, f64) {
    let lp = -crate::ops::softplus(-x);
    let lq = -crate::ops::softplus(x);
    (lp, lq)
}

/// Sigmoid focal loss summed over classes and averaged over queries, with
/// its gradient with respect to the logits. `logits` and `targets` are
/// `n_queries` rows of equal length; targets are 0 or 1.
pub fn focal_loss(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len().max(1) as f64;
    let (a, g) = (FOCAL_ALPHA, FOCAL_GAMMA);
    let mut total = 0.0;
    let grads = logits
        .iter()
        .zip(targets)
        .map(|(row, trow)| {
            row.iter()
                .zip(trow)
                .map(|(&x, &y)| {
                    let p = sigmoid(x);
                    let (lp, lq) = log_sigmoids(x);
                    // dp/dx = p (1 - p)
                    let dpdx = p * (1.0 - p);
                    if y > 0.5 {
                        let q = 1.0 - p;
                        total += -a * q.powf(g) * lp;
                        // d/dx[-a q^g ln p] with dq/dx = -p q, d ln p/dx = q
                        (a * g * q.powf(g - 1.0) * dpdx * lp - a * q.powf(g) * q) / n
                    } else {
                        total += -(1.0 - a) * p.powf(g) * lq;
                        (-(1.0 - a) * g * p.powf(g - 1.0) * dpdx * lq + (1.0 - a) * p.powf(g) * p) / n
                    }
                })
                .collect()
        })
        .collect();
    (total / n, grads)
}

/// Gaussian focal loss on probabilities `p` against soft targets `t`,
/// normalised by the number of exact positives (`t == 1`), at least one.
pub fn gaussian_focal_loss(p: &[f64], t: &[f64]) -> f64 {
    let n_pos = t.iter().filter(|x| **x == 1.0).count().max(1) as f64;
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            if t == 1.0 {
                -(1.0 - p).powf(GFL_ALPHA) * (p + LOG_EPS).ln()
            } else {
                -(1.0 - t).powf(GFL_BETA) * p.powf(GFL_ALPHA) * (1.0 - p + LOG_EPS).ln()
            }
        })
        .sum::<f64>()
        / n_pos
}

/// [`gaussian_focal_loss`] evaluated on `sigmoid(logits)` together with its
/// gradient with respect to the logits.
pub fn gaussian_focal_loss_logits(logits: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let p: Vec<f64> = logits.iter().map(|x| sigmoid(*x)).collect();
    let n_pos = t.iter().filter(|x| **x == 1.0).count().max(1) as f64;
    let (a, b) = (GFL_ALPHA, GFL_BETA);
    let grad = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let dpdx = p * (1.0 - p);
            let dldp = if t == 1.0 {
                let q = 1.0 - p;
                a * q.powf(a - 1.0) * (p + LOG_EPS).ln() - q.powf(a) / (p + LOG_EPS)
            } else {
                let wt = (1.0 - t).powf(b);
                let lq = (1.0 - p + LOG_EPS).ln();
                -wt * (a * p.powf(a - 1.0) * lq - p.powf(a) / (1.0 - p + LOG_EPS))
            };
            dldp * dpdx / n_pos
        })
        .collect();
    (gaussian_focal_loss(&p, t), grad)
}

/// Mean absolute error over the encoded box vectors of matched pairs, and its
/// gradient with respect to the predictions.
pub fn l1_box_loss(pred: &[Vec<f64>], target: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n: usize = pred.iter().map(|p| p.len()).sum();
    if n == 0 {
        return (0.0, pred.iter().map(|p| vec![0.0; p.len()]).collect());
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(a, b)| {
                    let d = a - b;
                    total += d.abs();
                    if d > 0.0 {
                        inv
                    } else if d < 0.0 {
                        -inv
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (total * inv, grads)
}

/// Greedy one-to-one matching of targets to queries by ascending distance
/// between target centres and query reference points (both in cells).
/// Returns `(target, query)` pairs; ties break by target then query index.
pub fn greedy_match(targets: &[[f64; 2]], refs: &[[f64; 2]]) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(targets.len() * refs.len());
    for (ti, t) in targets.iter().enumerate() {
        for (qi, r) in refs.iter().enumerate() {
            let d = (t[0] - r[0]).powi(2) + (t[1] - r[1]).powi(2);
            pairs.push((d, ti, qi));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut t_used = vec![false; targets.len()];
    let mut q_used = vec![false; refs.len()];
    let mut out = Vec::new();
    for (_, ti, qi) in pairs {
        if !t_used[ti] && !q_used[qi] {
            t_used[ti] = true;
            q_used[qi] = true;
            out.push((ti, qi));
        }
    }
    out.sort_unstable();
    out
}
