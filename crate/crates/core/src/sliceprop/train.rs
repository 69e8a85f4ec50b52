//! Self-supervised training of both propagators.

use rand::seq::SliceRandom;
use rand::Rng;

use super::edge::edge_profile;
use super::flow::{boundary_loss_var, field_var, volume_tensor};
use super::model::{AffinityArch, Arch, FlowArch, PropagatorModel, Regularization};
use super::network::Bound;
use crate::error::{Error, Result};
use crate::grad::{InitMode, InitSpec, Sgd, SgdConfig, Tape, Tensor, Var};
use crate::rng::Stream;
use crate::volume::Volume3D;

/// Drop probabilities are kept inside `(P_MIN, 1 - P_MIN)`.
pub const P_MIN: f32 = 1e-4;

/// Steps averaged at each end of a loss history by [`smoothed_ratio`].
pub const SMOOTHING_WINDOW: usize = 20;

/// Mean of the last `window` losses over the mean of the first `window`.
pub fn smoothed_ratio(history: &[f32], window: usize) -> Option<f64> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    let first = mean(&history[..w]);
    (first > 0.0).then(|| mean(&history[history.len() - w..]) / first)
}

/// Edge profile of slice `z` as an `[E, H, W]` tensor.
pub(crate) fn edge_tensor(volume: &Volume3D, z: usize, channels: usize) -> Result<Tensor> {
    let d = volume.dims();
    Tensor::new(vec![channels, d.height, d.width], edge_profile(volume.slice(z), d.height, d.width, channels)?)
}

fn slice_tensor(volume: &Volume3D, z: usize) -> Result<Tensor> {
    let d = volume.dims();
    Tensor::new(vec![d.height, d.width], volume.slice(z).to_vec())
}

fn check_volumes(volumes: &[Volume3D], min_depth: usize) -> Result<()> {
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one volume".into()));
    }
    let dims = volumes[0].dims();
    for v in volumes {
        if v.dims() != dims {
            return Err(Error::shape("train", format!("{:?} vs {:?}", v.dims(), dims)));
        }
        if v.dims().depth < min_depth {
            return Err(Error::InvalidArgument(format!("training volumes need depth >= {min_depth}, got {}", v.dims().depth)));
        }
    }
    Ok(())
}

/// Reconstruction of one slice from its neighbour through the affinity.
fn affinity_pair_loss(
    tape: &mut Tape,
    bound: &Bound,
    arch: &AffinityArch,
    volume: &Volume3D,
    src: usize,
    tgt: usize,
    noise: &mut Stream,
) -> Result<Var> {
    let es = tape.constant(edge_tensor(volume, src, arch.edge_channels)?);
    let et = tape.constant(edge_tensor(volume, tgt, arch.edge_channels)?);
    let fs = bound.features(tape, es, Some(noise))?;
    let ft = bound.features(tape, et, Some(noise))?;
    let scale = 1.0 / (arch.temperature * (arch.feature_channels as f32).sqrt());
    let logits = tape.window_logits(ft, fs, arch.window_radius, scale)?;
    let weights = tape.softmax_rows(logits)?;
    let source = tape.constant(slice_tensor(volume, src)?);
    let recon = tape.window_warp(weights, source, arch.window_radius)?;
    let target = tape.constant(slice_tensor(volume, tgt)?);
    tape.mse(recon, target)
}

/// Reconstructs up to `neighborhood` slices on each side of `d` by
/// composing warps, returning the summed boundary loss and the term count.
fn flow_source_loss(
    tape: &mut Tape,
    fields: Var,
    arch: &FlowArch,
    volume: &Volume3D,
    d: usize,
) -> Result<(Option<Var>, usize)> {
    let depth = volume.dims().depth;
    let mut total: Option<Var> = None;
    let mut terms = 0;
    for upward in [true, false] {
        let mut cur = tape.constant(slice_tensor(volume, d)?);
        for j in 1..=arch.neighborhood {
            let (field, target) = if upward {
                if d + j >= depth {
                    break;
                }
                (field_var(tape, fields, 0, d + j - 1)?, d + j)
            } else {
                if j > d {
                    break;
                }
                (field_var(tape, fields, 2, d - j)?, d - j)
            };
            cur = tape.grid_sample_2d(cur, field)?;
            let loss = boundary_loss_var(tape, cur, &slice_tensor(volume, target)?, arch.lambda, arch.ssim_window)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
            terms += 1;
        }
    }
    Ok((total, terms))
}

/// Data loss of one step for one batch-ensemble member (or the plain net).
fn step_loss(
    tape: &mut Tape,
    bound: &Bound,
    volumes: &[Volume3D],
    batch: &[(usize, usize, bool)],
    noise: &mut Stream,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut terms = 0usize;
    let mut push = |tape: &mut Tape, v: Var, n: usize| -> Result<()> {
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
        terms += n;
        Ok(())
    };
    match &bound.model.arch {
        Arch::Affinity(arch) => {
            for &(vi, z, upward) in batch {
                let (src, tgt) = if upward { (z, z + 1) } else { (z + 1, z) };
                let l = affinity_pair_loss(tape, bound, arch, &volumes[vi], src, tgt, noise)?;
                push(tape, l, 1)?;
            }
        }
        Arch::Flow(arch) => {
            // One network pass per volume; all sources of the step share it.
            let vi = batch[0].0;
            let x = tape.constant(volume_tensor(&volumes[vi])?);
            let fields = bound.fields(tape, x, Some(noise))?;
            for &(_, d, _) in batch {
                if let (Some(l), n) = flow_source_loss(tape, fields, arch, &volumes[vi], d)? {
                    push(tape, l, n)?;
                }
            }
        }
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty training batch".into()))?;
    tape.scale(total, 1.0 / terms as f32)
}

/// Draws the step's training pairs. Flow steps visit volumes in shuffled
/// epochs so that every window of steps sees a balanced mix of phantoms.
fn sample_batch(
    model: &PropagatorModel,
    volumes: &[Volume3D],
    batch_size: usize,
    rng: &mut Stream,
    epoch: &mut Vec<usize>,
) -> Vec<(usize, usize, bool)> {
    let depth = volumes[0].dims().depth;
    match model.arch {
        Arch::Affinity(_) => (0..batch_size)
            .map(|_| (rng.random_range(0..volumes.len()), rng.random_range(0..depth - 1), rng.random_bool(0.5)))
            .collect(),
        Arch::Flow(_) => {
            if epoch.is_empty() {
                epoch.extend(0..volumes.len());
                epoch.shuffle(rng);
            }
            let vi = epoch.pop().expect("refilled above");
            (0..batch_size).map(|_| (vi, rng.random_range(0..depth), true)).collect()
        }
    }
}

fn clamp_gates(model: &mut PropagatorModel) {
    let lo = (P_MIN / (1.0 - P_MIN)).ln();
    let keys: Vec<String> = model.params.keys().filter(|k| k.ends_with(".gate_logit")).cloned().collect();
    for k in keys {
        let t = model.params.get_mut(&k).expect("key listed above");
        let v = t.data()[0];
        if !(lo..=-lo).contains(&v) {
            log::warn!("{k}: drop probability left ({P_MIN}, {}), clamped", 1.0 - P_MIN);
            t.data_mut()[0] = v.clamp(lo, -lo);
        }
    }
}

/// Runs `cfg.steps` SGD steps on self-supervised reconstruction losses,
/// calling `observer(step, model)` after every update. Training reads only
/// intensities. The data stream depends on `seed` alone, so models that
/// differ only in initialization see identical batches.
pub fn train_with_observer(
    mut model: PropagatorModel,
    volumes: &[Volume3D],
    cfg: &SgdConfig,
    seed: u64,
    mut observer: impl FnMut(usize, &PropagatorModel),
) -> Result<PropagatorModel> {
    cfg.validate()?;
    let min_depth = match &model.arch {
        Arch::Affinity(_) => 2,
        Arch::Flow(f) => (2 * f.neighborhood + 1).max(2),
    };
    check_volumes(volumes, min_depth)?;
    let mut data_rng = Stream::derive(seed, "train-data", model.loss_history.len() as u64);
    let mut noise = Stream::derive(seed, "train-noise", model.loss_history.len() as u64);
    let mut sgd = Sgd::new();
    let mut epoch = Vec::new();
    let keys: Vec<String> = model.params.keys().cloned().collect();
    let members: Vec<Option<usize>> = if model.members > 0 { (0..model.members).map(Some).collect() } else { vec![None] };
    for step in 0..cfg.steps {
        let batch = sample_batch(&model, volumes, cfg.batch_size, &mut data_rng, &mut epoch);
        let mut tape = Tape::new();
        let mut data_loss: Option<Var> = None;
        let mut bound = Bound::new(&mut tape, &model, true, None);
        for &m in &members {
            bound.member = m;
            let l = step_loss(&mut tape, &bound, volumes, &batch, &mut noise)
                .map_err(|e| diverged(e, step, &model.loss_history))?;
            data_loss = Some(match data_loss {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let data_loss = tape.scale(data_loss.expect("at least one member"), 1.0 / members.len() as f32)?;
        let loss = match bound.concrete_penalty(&mut tape)? {
            Some(p) => tape.add(data_loss, p)?,
            None => data_loss,
        };
        let value = tape.value(data_loss).item();
        if !value.is_finite() || !tape.value(loss).item().is_finite() {
            return Err(Error::Diverged { step, loss: value, history: model.loss_history.clone() });
        }
        tape.backward(loss)?;
        let zeros: Vec<Vec<f32>> = keys.iter().map(|k| vec![0.0; model.params[k].len()]).collect();
        let grads: Vec<&[f32]> = keys
            .iter()
            .zip(&zeros)
            .map(|(k, z)| tape.grad(bound.vars[k]).map(|g| g.data()).unwrap_or(z))
            .collect();
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step, loss: value, history: model.loss_history.clone() });
        }
        let grads: Vec<Vec<f32>> = grads.into_iter().map(<[f32]>::to_vec).collect();
        drop(bound);
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut Tensor> = model.params.values_mut().collect();
        sgd.step(&mut params, &grad_refs, cfg)?;
        if matches!(model.regularization, Regularization::Concrete { .. }) {
            clamp_gates(&mut model);
        }
        model.loss_history.push(value);
        observer(step, &model);
    }
    Ok(model)
}

fn diverged(e: Error, step: usize, history: &[f32]) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f32::NAN, history: history.to_vec() },
        other => other,
    }
}

/// [`train_with_observer`] without an observer.
pub fn train(model: PropagatorModel, volumes: &[Volume3D], cfg: &SgdConfig, seed: u64) -> Result<PropagatorModel> {
    train_with_observer(model, volumes, cfg, seed, |_, _| {})
}

/// Trains a plain affinity propagator from a base initialization.
pub fn train_affinity_model(volumes: &[Volume3D], cfg: &SgdConfig, arch: AffinityArch, seed: u64) -> Result<PropagatorModel> {
    let model = PropagatorModel::new(Arch::Affinity(arch), &InitSpec::new(InitMode::Base, seed), Regularization::None, 0)?;
    train(model, volumes, cfg, seed)
}

/// Trains a plain flow propagator from a base initialization.
pub fn train_flow_model(volumes: &[Volume3D], cfg: &SgdConfig, arch: FlowArch, seed: u64) -> Result<PropagatorModel> {
    let model = PropagatorModel::new(Arch::Flow(arch), &InitSpec::new(InitMode::Base, seed), Regularization::None, 0)?;
    train(model, volumes, cfg, seed)
}
