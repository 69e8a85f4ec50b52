//! Kernel classifier that re-labels ambiguous pixels of a propagated mask.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Soft values at or above this are confident foreground.
pub const CONFIDENT_FG: f32 = 0.8;
/// Soft values at or below this are confident background.
pub const CONFIDENT_BG: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// RBF bandwidth in `exp(-gamma * |f - f'|^2)`.
    pub gamma: f64,
    pub n_support: usize,
    pub ridge: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { gamma: 10.0, n_support: 256, ridge: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub mask: Vec<u8>,
    /// Set when the confident pixels held a single class and the mask was
    /// thresholded instead.
    pub degenerate: bool,
}

fn threshold(mask: &[f32]) -> Vec<u8> {
    mask.iter().map(|&v| u8::from(v >= 0.5)).collect()
}

fn features(i: usize, intensities: &[f32], h: usize, w: usize) -> [f64; 3] {
    [intensities[i] as f64, (i % w) as f64 / w as f64, (i / w) as f64 / h as f64]
}

fn rbf(a: &[f64; 3], b: &[f64; 3], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Re-labels pixels whose soft value lies strictly between the confidence
/// thresholds with a ridge-regularized RBF kernel classifier fitted on up to
/// `n_support` confident pixels (half from each class). Features are
/// intensity and normalized column and row. Confident pixels are thresholded
/// at 0.5.
pub fn refine_mask_kernel(
    mask: &[f32],
    intensities: &[f32],
    h: usize,
    w: usize,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<Refined> {
    if mask.len() != h * w || intensities.len() != h * w {
        return Err(Error::shape("refine_mask_kernel", format!("{} and {} values for {h}x{w}", mask.len(), intensities.len())));
    }
    if cfg.gamma <= 0.0 || cfg.ridge <= 0.0 || cfg.n_support < 2 {
        return Err(Error::InvalidArgument("refinement needs gamma > 0, ridge > 0 and at least 2 support points".into()));
    }
    let mut out = threshold(mask);
    let ambiguous: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] > CONFIDENT_BG && mask[i] < CONFIDENT_FG).collect();
    if ambiguous.is_empty() {
        return Ok(Refined { mask: out, degenerate: false });
    }
    let fg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] >= CONFIDENT_FG).collect();
    let bg: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] <= CONFIDENT_BG).collect();
    if fg.is_empty() || bg.is_empty() {
        log::warn!("refinement skipped: confident pixels contain a single class");
        return Ok(Refined { mask: out, degenerate: true });
    }
    let mut rng = Stream::new(seed, "refine-support");
    let n_fg = (cfg.n_support / 2).min(fg.len());
    let n_bg = (cfg.n_support - n_fg).min(bg.len());
    let mut support: Vec<(usize, f64)> = Vec::with_capacity(n_fg + n_bg);
    let mut pick = |pool: &[usize], n: usize, label: f64| {
        let mut idx = sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        support.extend(idx.into_iter().map(|k| (pool[k], label)));
    };
    pick(&fg, n_fg, 1.0);
    pick(&bg, n_bg, -1.0);

    let feats: Vec<[f64; 3]> = support.iter().map(|&(i, _)| features(i, intensities, h, w)).collect();
    let n = feats.len();
    let gram = DMatrix::from_fn(n, n, |a, b| rbf(&feats[a], &feats[b], cfg.gamma) + if a == b { cfg.ridge } else { 0.0 });
    let targets = DVector::from_iterator(n, support.iter().map(|&(_, y)| y));
    let alpha = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("kernel matrix is not positive definite".into()))?
        .solve(&targets);
    for &i in &ambiguous {
        let f = features(i, intensities, h, w);
        let score: f64 = feats.iter().zip(alpha.iter()).map(|(s, a)| a * rbf(s, &f, cfg.gamma)).sum();
        out[i] = u8::from(score > 0.0);
    }
    Ok(Refined { mask: out, degenerate: false })
}
