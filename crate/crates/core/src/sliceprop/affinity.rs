//! Windowed affinity matrices between adjacent slices.

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};

/// Row-stochastic correspondence weights from a source slice to a target
/// slice. Row `p` holds the weights of target pixel `p` over the
/// `(2R+1)^2` source window centred on `p`, in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub source: usize,
    pub target: usize,
    pub radius: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f32>,
}

impl AffinityMatrix {
    pub fn window_len(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    pub fn row(&self, p: usize) -> &[f32] {
        let k = self.window_len();
        &self.weights[p * k..(p + 1) * k]
    }

    /// Affinity that maps every pixel to itself.
    pub fn identity(height: usize, width: usize, radius: usize) -> Self {
        let k = (2 * radius + 1).pow(2);
        let mut weights = vec![0f32; height * width * k];
        for p in 0..height * width {
            weights[p * k + k / 2] = 1.0;
        }
        AffinityMatrix { source: 0, target: 0, radius, height, width, weights }
    }
}

/// Softmax over each target pixel's source window of
/// `<feat_tgt(p), feat_src(q)> / (temperature * sqrt(C))`. Features are
/// `[C, H, W]`. Window positions outside the slice get zero weight.
pub fn compute_affinity(feat_src: &Tensor, feat_tgt: &Tensor, radius: usize, temperature: f32) -> Result<AffinityMatrix> {
    if radius == 0 || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("affinity needs radius >= 1 and temperature > 0, got {radius}, {temperature}")));
    }
    let (c, h, w) = match *feat_src.shape() {
        [c, h, w] if feat_tgt.shape() == feat_src.shape() => (c, h, w),
        _ => return Err(Error::shape("compute_affinity", format!("{:?} vs {:?}", feat_src.shape(), feat_tgt.shape()))),
    };
    let mut tape = Tape::new();
    let s = tape.constant(feat_src.clone());
    let t = tape.constant(feat_tgt.clone());
    let logits = tape.window_logits(t, s, radius, 1.0 / (temperature * (c as f32).sqrt()))?;
    let a = tape.softmax_rows(logits)?;
    Ok(AffinityMatrix { source: 0, target: 0, radius, height: h, width: w, weights: tape.value(a).data().to_vec() })
}

/// `out(p) = sum_q A(p, q) * source(q)`.
pub fn warp_with_affinity(a: &AffinityMatrix, source: &[f32]) -> Result<Vec<f32>> {
    if source.len() != a.height * a.width || a.weights.len() != source.len() * a.window_len() {
        return Err(Error::shape(
            "warp_with_affinity",
            format!("{} source values vs {}x{} affinity", source.len(), a.height, a.width),
        ));
    }
    let (h, w, r) = (a.height as isize, a.width as isize, a.radius as isize);
    let mut out = vec![0f32; source.len()];
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            let row = a.row(p);
            let mut acc = 0f64;
            let mut k = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y + dy, x + dx);
                    if sy >= 0 && sy < h && sx >= 0 && sx < w && row[k] != 0.0 {
                        acc += row[k] as f64 * source[(sy * w + sx) as usize] as f64;
                    }
                    k += 1;
                }
            }
            out[p] = acc as f32;
        }
    }
    Ok(out)
}

fn binary_dsc(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|v| **v).count() + b.iter().filter(|v| **v).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Outcome of the cycle-consistency check.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub mask: Vec<f32>,
    pub corrected: bool,
    /// Dice (fraction) between the thresholded source mask and its round trip.
    pub cycle_dsc: f64,
}

/// Warps `warped` back to the source slice with `a_bwd` and compares the
/// round trip with `source_mask`. When the cycle Dice falls below
/// `threshold`, target pixels whose source window is mostly made of
/// disagreeing pixels (as weighted by `a_fwd`) are set to zero.
pub fn verify_and_correct(
    source_mask: &[f32],
    warped: &[f32],
    a_fwd: &AffinityMatrix,
    a_bwd: &AffinityMatrix,
    threshold: f64,
) -> Result<Verification> {
    let back = warp_with_affinity(a_bwd, warped)?;
    let src: Vec<bool> = source_mask.iter().map(|&v| v >= 0.5).collect();
    let round: Vec<bool> = back.iter().map(|&v| v >= 0.5).collect();
    let cycle_dsc = binary_dsc(&src, &round);
    if cycle_dsc >= threshold {
        return Ok(Verification { mask: warped.to_vec(), corrected: false, cycle_dsc });
    }
    let disagree: Vec<f32> = src.iter().zip(&round).map(|(a, b)| if a != b { 1.0 } else { 0.0 }).collect();
    let support = warp_with_affinity(a_fwd, &disagree)?;
    let mask = warped.iter().zip(&support).map(|(&v, &s)| if s >= 0.5 { 0.0 } else { v }).collect();
    Ok(Verification { mask, corrected: true, cycle_dsc })
}
