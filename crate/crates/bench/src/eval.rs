//! Per-volume and per-slice evaluation of one propagated prediction.

use serde::{Deserialize, Serialize};

use spuq_core::metrics::{
    average_hausdorff, dsc, label_components_2d, surface_dice, DistanceMethod, SliceRecord,
};
use spuq_core::phantom::{PhantomKind, PhantomSpec};
use spuq_core::sliceprop::PropagationRecord;
use spuq_core::uq::UqPrediction;
use spuq_core::volume::{MaskVolume, Volume3D};
use spuq_core::Result;

/// Metrics of one evaluated volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEval {
    pub id: String,
    pub kind: PhantomKind,
    pub annotated_slice: usize,
    pub dsc: f64,
    pub surface_dice: f64,
    /// Undefined when the prediction is empty.
    pub ahd: Option<f64>,
    /// Directed ground-truth-to-prediction surface distance.
    pub asd: Option<f64>,
    pub uncertainty: Option<f64>,
    pub slices: Vec<SliceRecord>,
    pub failure: Option<FailureStats>,
}

impl VolumeEval {
    /// Calibration error on the percent scale.
    pub fn error(&self) -> f64 {
        100.0 - self.dsc
    }
}

/// Failure-mode measurements on the geometries built to provoke them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "geometry", rename_all = "snake_case")]
pub enum FailureStats {
    CappedCylinder {
        cap_depth: usize,
        /// Predicted foreground voxels in slices at or beyond the cap.
        overextension_voxels: usize,
        /// Mean variance in the trunk's footprint beyond the cap.
        uncertainty_beyond_cap: Option<f64>,
        /// Mean variance over the ground-truth trunk.
        uncertainty_trunk: Option<f64>,
    },
    BranchingY {
        split_depth: usize,
        dsc_before_split: Option<f64>,
        dsc_at_split: Option<f64>,
        /// Dice of each branch over the branch slices, prediction pixels
        /// assigned to the nearest branch centroid.
        branch_dsc: Vec<f64>,
    },
}

fn slice_mask(m: &MaskVolume, z: usize) -> MaskVolume {
    let d = m.dims();
    MaskVolume::new(spuq_core::volume::Dims::new(d.height, d.width, 1), m.spacing(), m.slice(z).to_vec())
        .expect("slice of a valid grid")
}

fn dice_2d(a: &[u8], b: &[u8]) -> Option<f64> {
    let (pa, pb) = (a.iter().filter(|&&v| v != 0).count(), b.iter().filter(|&&v| v != 0).count());
    let both = a.iter().zip(b).filter(|(x, y)| **x != 0 && **y != 0).count();
    (pa + pb > 0).then(|| 100.0 * 2.0 * both as f64 / (pa + pb) as f64)
}

/// Per-slice records. Slices where prediction and ground truth are both
/// empty carry no DSC or surface dice.
pub fn slice_records(
    pred: &MaskVolume,
    gt: &MaskVolume,
    records: &[PropagationRecord],
    per_slice_uncertainty: Option<&[Option<f64>]>,
    tolerance_mm: f64,
) -> Result<Vec<SliceRecord>> {
    records
        .iter()
        .map(|r| {
            let (p, g) = (pred.slice(r.slice), gt.slice(r.slice));
            let d = dice_2d(p, g);
            let sd = match d {
                Some(_) => Some(surface_dice(&slice_mask(pred, r.slice), &slice_mask(gt, r.slice), tolerance_mm, DistanceMethod::Auto)?),
                None => None,
            };
            Ok(SliceRecord {
                slice: r.slice,
                distance_slices: r.distance_slices,
                distance_mm: r.distance_mm,
                dsc: d,
                surface_dice: sd,
                uncertainty: per_slice_uncertainty.and_then(|u| u[r.slice]),
            })
        })
        .collect()
}

fn mean_over(values: &[f32], mask: impl Iterator<Item = bool>) -> Option<f64> {
    let (s, n) = values.iter().zip(mask).filter(|(_, m)| *m).fold((0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Over-extension and uncertainty around the cap of a capped cylinder.
pub fn capped_stats(spec: &PhantomSpec, pred: &MaskVolume, gt: &MaskVolume, variance: Option<&Volume3D>) -> FailureStats {
    let dims = gt.dims();
    let plane = dims.plane();
    let cap = spec.cap_depth.min(dims.depth);
    let overextension_voxels = (cap..dims.depth).map(|z| pred.slice_count(z)).sum();
    // Footprint: last labelled trunk slice grown by two pixels.
    let last = gt.slice(cap.saturating_sub(1));
    let (h, w) = (dims.height, dims.width);
    let footprint: Vec<bool> = (0..plane)
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            (-2isize..=2).any(|dy| {
                (-2isize..=2).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && last[ny as usize * w + nx as usize] != 0
                })
            })
        })
        .collect();
    let (beyond, trunk) = match variance {
        Some(v) => (
            mean_over(&v.data()[cap * plane..], (cap * plane..dims.len()).map(|i| footprint[i % plane])),
            mean_over(&v.data()[..cap * plane], gt.data()[..cap * plane].iter().map(|&g| g != 0)),
        ),
        None => (None, None),
    };
    FailureStats::CappedCylinder { cap_depth: cap, overextension_voxels, uncertainty_beyond_cap: beyond, uncertainty_trunk: trunk }
}

/// Dice around the split of a branching phantom.
pub fn branching_stats(spec: &PhantomSpec, pred: &MaskVolume, gt: &MaskVolume) -> FailureStats {
    let dims = gt.dims();
    let (h, w) = (dims.height, dims.width);
    let split = spec.split_depth;
    let at = |z: usize| (z < dims.depth).then(|| dice_2d(pred.slice(z), gt.slice(z))).flatten();
    let mut inter = [0usize; 2];
    let mut sizes = [0usize; 2];
    for z in split..dims.depth {
        let (labels, n) = label_components_2d(gt.slice(z), h, w);
        if n != 2 {
            continue;
        }
        let mut cent = [(0f64, 0f64, 0usize); 2];
        for (i, &l) in labels.iter().enumerate() {
            if l > 0 {
                let c = &mut cent[l as usize - 1];
                c.0 += (i % w) as f64;
                c.1 += (i / w) as f64;
                c.2 += 1;
            }
        }
        let cent: Vec<(f64, f64)> = cent.iter().map(|c| (c.0 / c.2 as f64, c.1 / c.2 as f64)).collect();
        for (i, &p) in pred.slice(z).iter().enumerate() {
            if p == 0 {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let d = |c: (f64, f64)| (x - c.0).powi(2) + (y - c.1).powi(2);
            let k = usize::from(d(cent[1]) < d(cent[0]));
            sizes[k] += 1;
            inter[k] += usize::from(labels[i] as usize == k + 1);
        }
        for &l in &labels {
            if l > 0 {
                sizes[l as usize - 1] += 1;
            }
        }
    }
    let branch_dsc = (0..2).map(|k| if sizes[k] == 0 { 100.0 } else { 200.0 * inter[k] as f64 / sizes[k] as f64 }).collect();
    FailureStats::BranchingY { split_depth: split, dsc_before_split: split.checked_sub(1).and_then(at), dsc_at_split: at(split), branch_dsc }
}

/// Scores one prediction against its ground truth.
pub fn evaluate(
    id: &str,
    spec: &PhantomSpec,
    prediction: &UqPrediction,
    gt: &MaskVolume,
    annotated_slice: usize,
    tolerance_mm: f64,
) -> Result<VolumeEval> {
    let pred = &prediction.mask;
    let scores = prediction.scores.as_ref();
    let ahd = if pred.count() > 0 && gt.count() > 0 { Some(average_hausdorff(pred, gt, DistanceMethod::Auto)?) } else { None };
    let failure = match spec.kind {
        PhantomKind::CappedCylinder => Some(capped_stats(spec, pred, gt, scores.map(|s| &s.per_voxel))),
        PhantomKind::BranchingY => Some(branching_stats(spec, pred, gt)),
        _ => None,
    };
    Ok(VolumeEval {
        id: id.to_string(),
        kind: spec.kind,
        annotated_slice,
        dsc: dsc(pred, gt)?,
        surface_dice: surface_dice(pred, gt, tolerance_mm, DistanceMethod::Auto)?,
        ahd: ahd.map(|a| a.ahd),
        asd: ahd.map(|a| a.gt_to_pred),
        uncertainty: scores.and_then(|s| s.per_volume),
        slices: slice_records(pred, gt, &prediction.records, scores.map(|s| s.per_slice.as_slice()), tolerance_mm)?,
        failure,
    })
}
