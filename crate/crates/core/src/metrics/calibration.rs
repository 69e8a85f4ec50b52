use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RETENTION_POINTS: usize = 20;

/// Sample Pearson correlation. Fails for fewer than two points, unequal
/// lengths or a constant argument.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson_r", format!("{} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite input"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman_rho", format!("{} vs {}", x.len(), y.len())));
    }
    pearson_r(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionCurve {
    pub fractions: Vec<f64>,
    pub errors: Vec<f64>,
    pub r_auc: f64,
}

/// Mean error of the most certain predictions as the retained fraction grows
/// from `1/n_points` to 1. Fraction `k/n` keeps the `ceil(k N / n)` volumes
/// with the lowest uncertainty, ties broken by input order.
pub fn retention_curve(errors: &[f64], uncertainties: &[f64], n_points: usize) -> Result<RetentionCurve> {
    if errors.len() != uncertainties.len() {
        return Err(Error::shape("retention_curve", format!("{} vs {}", errors.len(), uncertainties.len())));
    }
    if errors.len() < 2 || n_points == 0 {
        return Err(Error::InvalidArgument("retention curve needs two volumes and one point".into()));
    }
    let n = errors.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainties[a].total_cmp(&uncertainties[b]));
    let mut fractions = Vec::with_capacity(n_points);
    let mut means = Vec::with_capacity(n_points);
    for k in 1..=n_points {
        let keep = (k * n).div_ceil(n_points).max(1);
        fractions.push(k as f64 / n_points as f64);
        // The full set is summed in input order so the last point is the plain mean.
        let kept = if keep == n { errors.iter().sum::<f64>() } else { order[..keep].iter().map(|&i| errors[i]).sum() };
        means.push(kept / keep as f64);
    }
    let r_auc = fractions.windows(2).zip(means.windows(2)).map(|(f, e)| (f[1] - f[0]) * (e[0] + e[1]) / 2.0).sum();
    Ok(RetentionCurve { fractions, errors: means, r_auc })
}
