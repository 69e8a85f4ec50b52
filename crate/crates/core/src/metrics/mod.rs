//! Segmentation accuracy, surface agreement, calibration and trend metrics.

mod calibration;
mod overlap;
mod surface;
mod trend;

pub use calibration::{pearson_r, retention_curve, spearman_rho, RetentionCurve, DEFAULT_RETENTION_POINTS};
pub use overlap::{dsc, label_components_2d};
pub use surface::{
    average_hausdorff, boundary, directed_distances, surface_dice, AhdResult, DistanceMethod, BRUTE_FORCE_LIMIT,
    DEFAULT_SURFACE_TOLERANCE_MM,
};
pub use trend::{trend_analysis, trend_flags, DistanceUnit, SliceRecord, Stat, TrendBucket, TrendFlags, TrendSeries};

/// Mean and sample standard deviation (`n - 1` denominator; zero for a single
/// value). `None` for an empty input.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
