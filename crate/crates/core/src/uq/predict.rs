//! Prediction distributions and their uncertainty summaries.

use rayon::prelude::*;

use super::{TrainedArtifacts, UqKind, UqStrategy};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::sliceprop::{propagate, PropagateOptions, Propagation, PropagationRecord, PropagatorModel, Sampling, SliceAnnotation};
use crate::volume::{Dims, MaskVolume, Volume3D};

/// Radius in voxels of the ball that grows the predicted mask into the
/// region over which variance is averaged.
pub const REGION_RADIUS: usize = 3;

/// Stack of soft predictions with their voxelwise mean and population
/// variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    pub samples: Vec<Volume3D>,
    pub mean: Volume3D,
    pub variance: Volume3D,
}

impl PredictionDistribution {
    pub fn from_samples(samples: Vec<Volume3D>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("no prediction samples".into()))?;
        if samples.iter().any(|s| !s.same_shape(first)) {
            return Err(Error::shape("prediction_distribution", "samples differ in shape"));
        }
        let n = samples.len() as f64;
        let len = first.data().len();
        let mut mean = vec![0f32; len];
        let mut var = vec![0f32; len];
        for i in 0..len {
            let m = samples.iter().map(|s| s.data()[i] as f64).sum::<f64>() / n;
            let v = samples.iter().map(|s| (s.data()[i] as f64 - m).powi(2)).sum::<f64>() / n;
            mean[i] = m as f32;
            var[i] = v.max(0.0) as f32;
        }
        let (dims, spacing) = (first.dims(), first.spacing());
        Ok(PredictionDistribution {
            mean: Volume3D::new(dims, spacing, mean)?,
            variance: Volume3D::new(dims, spacing, var)?,
            samples,
        })
    }
}

/// Variance summaries over the neighbourhood of the predicted mask.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyScores {
    pub per_voxel: Volume3D,
    /// Mean variance over the region voxels of each slice; `None` when the
    /// slice has no region voxel.
    pub per_slice: Vec<Option<f64>>,
    /// Mean variance over the whole region; `None` when it is empty.
    pub per_volume: Option<f64>,
    pub region: MaskVolume,
}

fn ball_offsets(r: usize) -> Vec<(isize, isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Mask grown by a voxel ball of radius `r`.
pub(crate) fn dilate(mask: &MaskVolume, r: usize) -> MaskVolume {
    let Dims { height, width, depth } = mask.dims();
    let mut out = MaskVolume::filled(mask.dims(), mask.spacing(), 0);
    let offsets = ball_offsets(r);
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (x, y, z) = mask.dims().coords(i);
        for &(dx, dy, dz) in &offsets {
            let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if nx >= 0 && ny >= 0 && nz >= 0 && (nx as usize) < width && (ny as usize) < height && (nz as usize) < depth {
                out.set(nx as usize, ny as usize, nz as usize, 1);
            }
        }
    }
    out
}

/// Averages `variance` over the ball dilation of `predicted`.
pub fn uncertainty_scores(variance: &Volume3D, predicted: &MaskVolume) -> Result<UncertaintyScores> {
    if !variance.same_shape(predicted) {
        return Err(Error::shape("uncertainty_scores", format!("{:?} vs {:?}", variance.dims(), predicted.dims())));
    }
    let region = dilate(predicted, REGION_RADIUS);
    let dims = variance.dims();
    let plane = dims.plane();
    let mut per_slice = Vec::with_capacity(dims.depth);
    let (mut total, mut count) = (0f64, 0usize);
    for z in 0..dims.depth {
        let (mut s, mut n) = (0f64, 0usize);
        for i in z * plane..(z + 1) * plane {
            if region.data()[i] != 0 {
                s += variance.data()[i] as f64;
                n += 1;
            }
        }
        per_slice.push((n > 0).then(|| s / n as f64));
        total += s;
        count += n;
    }
    Ok(UncertaintyScores {
        per_voxel: variance.clone(),
        per_slice,
        per_volume: (count > 0).then(|| total / count as f64),
        region,
    })
}

fn run(model: &PropagatorModel, volume: &Volume3D, ann: &SliceAnnotation, opts: &PropagateOptions, sampling: Sampling) -> Result<Propagation> {
    propagate(model, volume, ann, opts, sampling)
}

/// Draws the strategy's prediction samples. Sample `i` uses the stream
/// `(seed, "predict-sample", i)`, so the result does not depend on thread
/// scheduling.
pub fn sample_predictions(
    strategy: &UqStrategy,
    artifacts: &TrainedArtifacts,
    volume: &Volume3D,
    ann: &SliceAnnotation,
    opts: &PropagateOptions,
    seed: u64,
) -> Result<(PredictionDistribution, Vec<PropagationRecord>)> {
    strategy.validate()?;
    artifacts.check(strategy)?;
    let stream = |i: usize| Stream::derive(seed, "predict-sample", i as u64);
    let runs: Vec<Propagation> = match (strategy.kind, artifacts) {
        (UqKind::None, TrainedArtifacts::Single(m)) => vec![run(m, volume, ann, opts, Sampling::default())?],
        (UqKind::DeepEnsemble, TrainedArtifacts::Members(ms)) => {
            ms.par_iter().map(|m| run(m, volume, ann, opts, Sampling::default())).collect::<Result<_>>()?
        }
        (UqKind::BatchEnsemble, TrainedArtifacts::Single(m)) => (0..m.members)
            .into_par_iter()
            .map(|i| run(m, volume, ann, opts, Sampling { stream: None, member: Some(i) }))
            .collect::<Result<_>>()?,
        (UqKind::McDropout | UqKind::ConcreteDropout, TrainedArtifacts::Single(m)) => (0..strategy.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut s = stream(i);
                run(m, volume, ann, opts, Sampling { stream: Some(&mut s), member: None })
            })
            .collect::<Result<_>>()?,
        (UqKind::Swag, TrainedArtifacts::Swag { model, stats }) => (0..strategy.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut m = model.clone();
                m.params = stats.sample(strategy.swag.sample_scale, &mut stream(i))?;
                run(&m, volume, ann, opts, Sampling::default())
            })
            .collect::<Result<_>>()?,
        _ => unreachable!("artifacts checked above"),
    };
    let records = runs[0].records.clone();
    let dist = PredictionDistribution::from_samples(runs.into_iter().map(|r| r.soft).collect())?;
    Ok((dist, records))
}

/// Hard mask, distribution and uncertainty scores of one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct UqPrediction {
    /// Mean soft mask thresholded at 0.5, annotated slice verbatim.
    pub mask: MaskVolume,
    pub distribution: PredictionDistribution,
    /// Absent for the deterministic baseline.
    pub scores: Option<UncertaintyScores>,
    pub records: Vec<PropagationRecord>,
}

pub fn predict_with_uq(
    strategy: &UqStrategy,
    artifacts: &TrainedArtifacts,
    volume: &Volume3D,
    ann: &SliceAnnotation,
    opts: &PropagateOptions,
    seed: u64,
) -> Result<UqPrediction> {
    let (distribution, records) = sample_predictions(strategy, artifacts, volume, ann, opts, seed)?;
    let mut mask = distribution.mean.threshold();
    mask.slice_mut(ann.slice_index).copy_from_slice(&ann.mask);
    let scores = match strategy.kind {
        UqKind::None => None,
        _ => Some(uncertainty_scores(&distribution.variance, &mask)?),
    };
    Ok(UqPrediction { mask, distribution, scores, records })
}
