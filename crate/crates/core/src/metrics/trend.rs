//! Per-slice metrics grouped by distance from the annotated slice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::calibration::spearman_rho;
use super::mean_std;

/// Per-slice values of one propagated volume. `None` marks a value that is
/// undefined for the slice and is left out of the aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice: usize,
    pub distance_slices: usize,
    pub distance_mm: f64,
    pub dsc: Option<f64>,
    pub surface_dice: Option<f64>,
    pub uncertainty: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    Slices,
    /// Buckets of the given width in millimetres.
    Mm(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        mean_std(values).map(|(mean, std)| Stat { mean, std, n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendBucket {
    /// Lower edge of the bucket (slices, or mm for [`DistanceUnit::Mm`]).
    pub distance: f64,
    /// Number of slices in the bucket.
    pub count: usize,
    pub dsc: Option<Stat>,
    pub surface_dice: Option<Stat>,
    pub uncertainty: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSeries {
    pub unit: DistanceUnit,
    pub buckets: Vec<TrendBucket>,
}

/// Groups slice records by distance from the annotated slice.
pub fn trend_analysis<'a>(records: impl IntoIterator<Item = &'a SliceRecord>, unit: DistanceUnit) -> TrendSeries {
    let mut groups: BTreeMap<u64, Vec<&SliceRecord>> = BTreeMap::new();
    for r in records {
        let key = match unit {
            DistanceUnit::Slices => r.distance_slices as u64,
            DistanceUnit::Mm(w) => (r.distance_mm / w + 1e-9).floor() as u64,
        };
        groups.entry(key).or_default().push(r);
    }
    let buckets = groups
        .into_iter()
        .map(|(key, rs)| {
            let collect = |f: fn(&SliceRecord) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            TrendBucket {
                distance: match unit {
                    DistanceUnit::Slices => key as f64,
                    DistanceUnit::Mm(w) => key as f64 * w,
                },
                count: rs.len(),
                dsc: Stat::of(&collect(|r| r.dsc)),
                surface_dice: Stat::of(&collect(|r| r.surface_dice)),
                uncertainty: Stat::of(&collect(|r| r.uncertainty)),
            }
        })
        .collect();
    TrendSeries { unit, buckets }
}

/// Rank correlations of bucket means against distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendFlags {
    pub dsc_rho: Option<f64>,
    pub surface_dice_rho: Option<f64>,
    pub uncertainty_rho: Option<f64>,
    /// `dsc_rho <= 0`.
    pub dsc_non_increasing: Option<bool>,
    /// `uncertainty_rho >= 0`.
    pub uncertainty_non_decreasing: Option<bool>,
}

/// Spearman ρ between bucket distance and bucket mean, over buckets whose
/// statistic rests on at least `min_count` slices.
pub fn trend_flags(series: &TrendSeries, min_count: usize) -> TrendFlags {
    let rho = |f: fn(&TrendBucket) -> Option<Stat>| {
        let (d, m): (Vec<f64>, Vec<f64>) =
            series.buckets.iter().filter_map(|b| f(b).filter(|s| s.n >= min_count).map(|s| (b.distance, s.mean))).unzip();
        spearman_rho(&d, &m).ok()
    };
    let dsc_rho = rho(|b| b.dsc);
    let uncertainty_rho = rho(|b| b.uncertainty);
    TrendFlags {
        dsc_rho,
        surface_dice_rho: rho(|b| b.surface_dice),
        uncertainty_rho,
        dsc_non_increasing: dsc_rho.map(|r| r <= 0.0),
        uncertainty_non_decreasing: uncertainty_rho.map(|r| r >= 0.0),
    }
}
