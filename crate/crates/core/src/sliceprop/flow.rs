//! Displacement fields between adjacent slices and the boundary-preserving
//! reconstruction loss.

use super::edge::edge_weight_map;
use super::model::PropagatorModel;
use super::network::Bound;
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::rng::Stream;
use crate::volume::Volume3D;

pub const SSIM_C1: f32 = 1e-4;
pub const SSIM_C2: f32 = 9e-4;

/// Per-pair displacement fields in pixels, each `[2, H, W]` (x then y).
///
/// `forward[z]` registers slice `z + 1` onto slice `z`: slice `z` warped by
/// it estimates slice `z + 1`. `backward[z]` does the reverse, estimating
/// slice `z` from slice `z + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationFieldSet {
    pub forward: Vec<Tensor>,
    pub backward: Vec<Tensor>,
}

impl DeformationFieldSet {
    pub fn len(&self) -> usize {
        self.forward.len() + self.backward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Volume as a `[1, D, H, W]` tensor.
pub(crate) fn volume_tensor(volume: &Volume3D) -> Result<Tensor> {
    let d = volume.dims();
    Tensor::new(vec![1, d.depth, d.height, d.width], volume.data().to_vec())
}

/// Field of channel pair `(c, c + 1)` at depth `z` from a `[4, D, H, W]` output.
pub(crate) fn field_var(tape: &mut Tape, out: Var, c: usize, z: usize) -> Result<Var> {
    let (d, h, w) = match *tape.shape(out) {
        [4, d, h, w] => (d, h, w),
        _ => return Err(Error::shape("field", format!("{:?}", tape.shape(out)))),
    };
    let plane = h * w;
    let fx = tape.narrow(out, (c * d + z) * plane, &[plane])?;
    let fy = tape.narrow(out, ((c + 1) * d + z) * plane, &[plane])?;
    tape.concat(&[fx, fy], &[2, h, w])
}

/// Runs the network once over the whole volume and returns its `2(D-1)`
/// fields. `stream` activates the stochastic regularizer; `member` selects a
/// batch-ensemble member.
pub fn predict_ddf(
    model: &PropagatorModel,
    volume: &Volume3D,
    stream: Option<&mut Stream>,
    member: Option<usize>,
) -> Result<DeformationFieldSet> {
    model.flow_arch()?;
    let depth = volume.dims().depth;
    if depth < 2 {
        return Err(Error::InvalidArgument(format!("flow prediction needs depth >= 2, got {depth}")));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, model, false, member);
    let x = tape.constant(volume_tensor(volume)?);
    let out = bound.fields(&mut tape, x, stream)?;
    let mut set = DeformationFieldSet { forward: Vec::new(), backward: Vec::new() };
    for z in 0..depth - 1 {
        let f = field_var(&mut tape, out, 0, z)?;
        let b = field_var(&mut tape, out, 2, z)?;
        set.forward.push(tape.value(f).clone());
        set.backward.push(tape.value(b).clone());
    }
    Ok(set)
}

/// Bilinear sample of `image` at `p + field(p)`, clamped to the border.
pub fn apply_ddf(field: &Tensor, image: &[f32]) -> Result<Vec<f32>> {
    let (h, w) = match *field.shape() {
        [2, h, w] => (h, w),
        _ => return Err(Error::shape("apply_ddf", format!("{:?}", field.shape()))),
    };
    let mut tape = Tape::new();
    let img = tape.constant(Tensor::new(vec![h, w], image.to_vec())?);
    let f = tape.constant(field.clone());
    let out = tape.grid_sample_2d(img, f)?;
    Ok(tape.value(out).data().to_vec())
}

/// `lambda * (1 - SSIM) + (1 - lambda) * mean(C(x) * |x_hat - x|)` recorded
/// on `tape`, where `C(x)` is the normalized Sobel magnitude of the target.
pub(crate) fn boundary_loss_var(tape: &mut Tape, x_hat: Var, x: &Tensor, lambda: f32, window: usize) -> Result<Var> {
    let (h, w) = match *x.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::shape("boundary_loss", format!("{:?}", x.shape()))),
    };
    let weight = Tensor::new(vec![h, w], edge_weight_map(x.data(), h, w))?;
    let target = tape.constant(x.clone());
    let ssim = tape.ssim(x_hat, target, window, SSIM_C1, SSIM_C2)?;
    let dissim = tape.scale(ssim, -lambda)?;
    let dissim = tape.add_scalar(dissim, lambda)?;
    let l1 = tape.weighted_l1(x_hat, target, &weight)?;
    let l1 = tape.scale(l1, 1.0 - lambda)?;
    tape.add(dissim, l1)
}

/// Boundary-preserving loss of a reconstruction `x_hat` of slice `x`, both
/// `h x w`.
pub fn boundary_loss(x_hat: &[f32], x: &[f32], h: usize, w: usize, lambda: f32, window: usize) -> Result<f32> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let mut tape = Tape::new();
    let xh = tape.constant(Tensor::new(vec![h, w], x_hat.to_vec())?);
    let loss = boundary_loss_var(&mut tape, xh, &Tensor::new(vec![h, w], x.to_vec())?, lambda, window)?;
    Ok(tape.value(loss).item())
}
