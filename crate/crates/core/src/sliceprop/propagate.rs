//! Slice-by-slice mask propagation from a single annotated slice.

use serde::{Deserialize, Serialize};

use super::affinity::{compute_affinity, verify_and_correct, warp_with_affinity};
use super::flow::{apply_ddf, predict_ddf};
use super::model::{Arch, PropagatorModel};
use super::network::Bound;
use super::refine::{refine_mask_kernel, RefineConfig, CONFIDENT_BG, CONFIDENT_FG};
use super::train::edge_tensor;
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};
use crate::rng::{derive_seed, Stream};
use crate::volume::{MaskVolume, Volume3D};

/// One annotated axial slice (0-based index) and its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceAnnotation {
    pub slice_index: usize,
    pub mask: Vec<u8>,
}

/// Slice with the largest foreground area, ties going to the lowest index.
pub fn select_annotated_slice(gt: &MaskVolume) -> Result<SliceAnnotation> {
    let mut best: Option<(usize, usize)> = None;
    for z in 0..gt.dims().depth {
        let n = gt.slice_count(z);
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((z, n));
        }
    }
    let (z, _) = best.ok_or(Error::EmptyMask("ground truth has no foreground slice"))?;
    Ok(SliceAnnotation { slice_index: z, mask: gt.slice(z).to_vec() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagateOptions {
    /// Cycle-consistency correction (affinity propagator).
    pub verify: bool,
    pub verify_threshold: f64,
    /// Kernel refinement after every warp (flow propagator).
    pub refine: bool,
    pub refine_config: RefineConfig,
    pub seed: u64,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        PropagateOptions { verify: true, verify_threshold: 0.8, refine: true, refine_config: RefineConfig::default(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationRecord {
    pub slice: usize,
    pub distance_slices: usize,
    pub distance_mm: f64,
    /// The verification step suppressed pixels on this slice.
    pub corrected: bool,
    /// Refinement fell back to thresholding on this slice.
    pub refine_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// Soft mask carried between slices, in `[0, 1]`.
    pub soft: Volume3D,
    /// `soft` thresholded at 0.5, with the annotation verbatim.
    pub mask: MaskVolume,
    /// One record per slice, ordered by slice index.
    pub records: Vec<PropagationRecord>,
}

/// Source of randomness and ensemble member for one propagation.
#[derive(Debug, Default)]
pub struct Sampling<'a> {
    /// Activates dropout or concrete gates when present.
    pub stream: Option<&'a mut Stream>,
    pub member: Option<usize>,
}

struct Step {
    soft: Vec<f32>,
    corrected: bool,
    degenerate: bool,
}

/// Propagates `ann` through `volume` in both directions with either
/// propagator. The annotated slice is copied unchanged.
pub fn propagate(
    model: &PropagatorModel,
    volume: &Volume3D,
    ann: &SliceAnnotation,
    opts: &PropagateOptions,
    sampling: Sampling,
) -> Result<Propagation> {
    let dims = volume.dims();
    let plane = dims.plane();
    if ann.slice_index >= dims.depth {
        return Err(Error::IndexOutOfRange { what: "annotated slice", index: ann.slice_index, len: dims.depth });
    }
    if ann.mask.len() != plane {
        return Err(Error::shape("propagate", format!("annotation of {} pixels vs {}x{}", ann.mask.len(), dims.height, dims.width)));
    }
    if let Some(m) = sampling.member {
        if m >= model.members {
            return Err(Error::IndexOutOfRange { what: "ensemble member", index: m, len: model.members });
        }
    }
    let Sampling { mut stream, member } = sampling;
    let mut steps: Vec<Option<Step>> = (0..dims.depth).map(|_| None).collect();
    let start: Vec<f32> = ann.mask.iter().map(|&v| f32::from(v.min(1))).collect();
    steps[ann.slice_index] = Some(Step { soft: start.clone(), corrected: false, degenerate: false });

    match &model.arch {
        Arch::Affinity(arch) => {
            let mut feats: Vec<Option<Tensor>> = vec![None; dims.depth];
            let mut feature = |z: usize, stream: &mut Option<&mut Stream>| -> Result<Tensor> {
                if feats[z].is_none() {
                    let mut tape = Tape::new();
                    let bound = Bound::new(&mut tape, model, false, member);
                    let e = tape.constant(edge_tensor(volume, z, arch.edge_channels)?);
                    let f = bound.features(&mut tape, e, stream.as_deref_mut())?;
                    feats[z] = Some(tape.value(f).clone());
                }
                Ok(feats[z].clone().expect("filled above"))
            };
            for upward in [true, false] {
                let mut cur = start.clone();
                let mut z = ann.slice_index;
                while let Some(next) = neighbour(z, upward, dims.depth) {
                    let (fs, ft) = (feature(z, &mut stream)?, feature(next, &mut stream)?);
                    let fwd = compute_affinity(&fs, &ft, arch.window_radius, arch.temperature)?;
                    let warped = warp_with_affinity(&fwd, &cur)?;
                    let (soft, corrected) = if opts.verify {
                        let bwd = compute_affinity(&ft, &fs, arch.window_radius, arch.temperature)?;
                        let v = verify_and_correct(&cur, &warped, &fwd, &bwd, opts.verify_threshold)?;
                        (v.mask, v.corrected)
                    } else {
                        (warped, false)
                    };
                    steps[next] = Some(Step { soft: soft.clone(), corrected, degenerate: false });
                    cur = soft;
                    z = next;
                }
            }
        }
        Arch::Flow(_) => {
            let fields = predict_ddf(model, volume, stream.as_deref_mut(), member)?;
            for upward in [true, false] {
                let mut cur = start.clone();
                let mut z = ann.slice_index;
                while let Some(next) = neighbour(z, upward, dims.depth) {
                    let field = if upward { &fields.forward[z] } else { &fields.backward[next] };
                    let warped = apply_ddf(field, &cur)?;
                    let (soft, degenerate) = if opts.refine {
                        let seed = derive_seed(opts.seed, "refine", next as u64);
                        let r = refine_mask_kernel(&warped, volume.slice(next), dims.height, dims.width, &opts.refine_config, seed)?;
                        // Confident pixels stay soft; only the ambiguous band takes the refined label.
                        let merged = warped
                            .iter()
                            .zip(&r.mask)
                            .map(|(&w, &m)| if w > CONFIDENT_BG && w < CONFIDENT_FG { f32::from(m) } else { w })
                            .collect();
                        (merged, r.degenerate)
                    } else {
                        (warped, false)
                    };
                    steps[next] = Some(Step { soft: soft.clone(), corrected: false, degenerate });
                    cur = soft;
                    z = next;
                }
            }
        }
    }

    let mut soft = Vec::with_capacity(dims.len());
    let mut records = Vec::with_capacity(dims.depth);
    let dz = volume.spacing()[2] as f64;
    for (z, step) in steps.into_iter().enumerate() {
        let step = step.expect("both directions cover every slice");
        soft.extend(step.soft.iter().map(|v| v.clamp(0.0, 1.0)));
        let distance = z.abs_diff(ann.slice_index);
        records.push(PropagationRecord {
            slice: z,
            distance_slices: distance,
            distance_mm: distance as f64 * dz,
            corrected: step.corrected,
            refine_degenerate: step.degenerate,
        });
    }
    let soft = Volume3D::new(dims, volume.spacing(), soft)?;
    let mut mask = soft.threshold();
    mask.slice_mut(ann.slice_index).copy_from_slice(&ann.mask);
    Ok(Propagation { soft, mask, records })
}

fn neighbour(z: usize, upward: bool, depth: usize) -> Option<usize> {
    if upward {
        (z + 1 < depth).then_some(z + 1)
    } else {
        z.checked_sub(1)
    }
}

/// Deterministic propagation with an affinity model.
pub fn propagate_affinity(model: &PropagatorModel, volume: &Volume3D, ann: &SliceAnnotation, opts: &PropagateOptions) -> Result<Propagation> {
    model.affinity_arch()?;
    propagate(model, volume, ann, opts, Sampling::default())
}

/// Deterministic propagation with a flow model.
pub fn propagate_flow(model: &PropagatorModel, volume: &Volume3D, ann: &SliceAnnotation, opts: &PropagateOptions) -> Result<Propagation> {
    model.flow_arch()?;
    propagate(model, volume, ann, opts, Sampling::default())
}
