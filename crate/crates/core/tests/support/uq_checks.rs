//! Degeneracy and sampler checks for the uncertainty strategies. Each check
//! returns the measured quantity so callers choose how to report it.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use spuq_core::grad::{InitMode, InitSpec, SgdConfig, Tensor};
use spuq_core::phantom::{generate, jittered_spec, PhantomKind};
use spuq_core::rng::Stream;
use spuq_core::sliceprop::{
    propagate, select_annotated_slice, train, train_with_observer, PropagateOptions, PropagatorKind,
    PropagatorModel, Regularization, Sampling, SliceAnnotation,
};
use spuq_core::uq::{predict_with_uq, swag_collect, BatchEnsembleLayer, SwagConfig, SwagStats, TrainedArtifacts, UqKind, UqStrategy};
use spuq_core::volume::{Dims, MaskVolume, Volume3D};

pub const DIMS: Dims = Dims::new(32, 32, 24);

pub struct Fixture {
    pub train: Vec<Volume3D>,
    pub volume: Volume3D,
    pub gt: MaskVolume,
    pub ann: SliceAnnotation,
}

pub fn fixture(seed: u64) -> Fixture {
    let train = (0..3)
        .map(|i| generate(&jittered_spec(PhantomKind::ALL[i % 4], DIMS, seed + i as u64)).unwrap().0)
        .collect();
    let (volume, gt) = generate(&jittered_spec(PhantomKind::Ellipsoid, DIMS, seed + 100)).unwrap();
    let ann = select_annotated_slice(&gt).unwrap();
    Fixture { train, volume, gt, ann }
}

pub fn short_sgd(kind: PropagatorKind, steps: usize) -> SgdConfig {
    SgdConfig { steps, ..kind.default_sgd() }
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max)
}

/// Largest deviation between the factorized batch-ensemble layer and the
/// explicitly materialized member weight, over random layers.
pub fn batch_layer_oracle_gap(seed: u64, trials: usize) -> f64 {
    let mut rng = Stream::new(seed, "batch-oracle");
    let mut worst = 0f64;
    for _ in 0..trials {
        let (out, inp, members) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(2..5));
        let mut t = |n: usize, lo: f32, hi: f32| Tensor::from_fn(vec![n], |_| rng.random_range(lo..hi));
        let weight = t(out * inp, -1.0, 1.0).reshape(vec![out, inp]).unwrap();
        let bias = t(out, -1.0, 1.0);
        let r: Vec<Tensor> = (0..members).map(|_| t(out, 0.5, 1.5)).collect();
        let s: Vec<Tensor> = (0..members).map(|_| t(inp, 0.5, 1.5)).collect();
        let x = t(inp, -1.0, 1.0);
        let layer = BatchEnsembleLayer::new(weight, bias.clone(), r.clone(), s).unwrap();
        for m in 0..members {
            let y = layer.forward(&x, m).unwrap();
            let wm = layer.materialize(m).unwrap();
            for o in 0..out {
                let dot: f64 = (0..inp).map(|i| wm.data()[o * inp + i] as f64 * x.data()[i] as f64).sum();
                let expect = dot + r[m].data()[o] as f64 * bias.data()[o] as f64;
                worst = worst.max((y.data()[o] as f64 - expect).abs());
            }
        }
    }
    worst
}

/// Batch-ensemble network with all factors at one versus the same shared
/// weights without factors: largest soft-mask difference over all members.
pub fn batch_unit_factor_gap(kind: PropagatorKind, fx: &Fixture) -> f64 {
    let members = 3;
    let model = PropagatorModel::new(kind.default_arch(), &InitSpec::new(InitMode::Base, 3), Regularization::None, members).unwrap();
    let mut model = train(model, &fx.train, &short_sgd(kind, 4), 3).unwrap();
    model.reset_factors();
    let mut shared = model.clone();
    shared.members = 0;
    shared.params.retain(|k, _| !k.contains(".r.") && !k.contains(".s."));
    let opts = PropagateOptions::default();
    let base = propagate(&shared, &fx.volume, &fx.ann, &opts, Sampling::default()).unwrap();
    (0..members)
        .map(|m| {
            let p = propagate(&model, &fx.volume, &fx.ann, &opts, Sampling { stream: None, member: Some(m) }).unwrap();
            max_abs(p.soft.data(), base.soft.data())
        })
        .fold(0.0, f64::max)
}

pub struct Degenerate {
    pub max_variance: f64,
    pub masks_equal: bool,
}

/// MC dropout at rate 0 against the deterministic prediction of the same weights.
pub fn mc_rate_zero(kind: PropagatorKind, fx: &Fixture) -> Degenerate {
    let model = PropagatorModel::new(kind.default_arch(), &InitSpec::new(InitMode::Base, 5), Regularization::Dropout { rate: 0.0 }, 0).unwrap();
    let model = train(model, &fx.train, &short_sgd(kind, 4), 5).unwrap();
    let art = TrainedArtifacts::Single(model);
    let opts = PropagateOptions::default();
    let mc = UqStrategy { n_samples: 5, dropout_rate: 0.0, ..UqStrategy::new(UqKind::McDropout) };
    let p = predict_with_uq(&mc, &art, &fx.volume, &fx.ann, &opts, 9).unwrap();
    let base = predict_with_uq(&UqStrategy::new(UqKind::None), &art, &fx.volume, &fx.ann, &opts, 9).unwrap();
    Degenerate {
        max_variance: p.distribution.variance.data().iter().fold(0f64, |m, &v| m.max(v as f64)),
        masks_equal: p.mask == base.mask,
    }
}

fn swag_artifacts(kind: PropagatorKind, fx: &Fixture, swag: &SwagConfig) -> (PropagatorModel, SwagStats) {
    let model = PropagatorModel::new(kind.default_arch(), &InitSpec::new(InitMode::Base, 7), Regularization::None, 0).unwrap();
    let cfg = short_sgd(kind, 4);
    let model = train(model, &fx.train, &cfg, 7).unwrap();
    swag_collect(model, &fx.train, &cfg, swag, 7).unwrap()
}

/// SWAG at scale 0 against the deterministic prediction at the mean weights.
pub fn swag_scale_zero(kind: PropagatorKind, fx: &Fixture) -> Degenerate {
    let swag = SwagConfig { collect_every: 1, n_collect: 3, sample_scale: 0.0 };
    let (model, stats) = swag_artifacts(kind, fx, &swag);
    let mut at_mean = model.clone();
    at_mean.params = stats.mean_params().unwrap();
    let opts = PropagateOptions::default();
    let strategy = UqStrategy { n_samples: 4, swag, ..UqStrategy::new(UqKind::Swag) };
    let p = predict_with_uq(&strategy, &TrainedArtifacts::Swag { model, stats }, &fx.volume, &fx.ann, &opts, 2).unwrap();
    let base = predict_with_uq(&UqStrategy::new(UqKind::None), &TrainedArtifacts::Single(at_mean), &fx.volume, &fx.ann, &opts, 2).unwrap();
    Degenerate {
        max_variance: p.distribution.variance.data().iter().fold(0f64, |m, &v| m.max(v as f64)),
        masks_equal: p.mask == base.mask,
    }
}

/// Largest difference between the collected SWAG mean and the arithmetic
/// mean of independently recorded snapshots of the same run.
pub fn swag_mean_gap(kind: PropagatorKind, fx: &Fixture) -> f64 {
    let swag = SwagConfig { collect_every: 2, n_collect: 3, sample_scale: 0.5 };
    let model = PropagatorModel::new(kind.default_arch(), &InitSpec::new(InitMode::Base, 7), Regularization::None, 0).unwrap();
    let cfg = short_sgd(kind, 4);
    let model = train(model, &fx.train, &cfg, 7).unwrap();
    let (_, stats) = swag_collect(model.clone(), &fx.train, &cfg, &swag, 7).unwrap();

    let extra = SgdConfig { steps: swag.collect_every * swag.n_collect, ..cfg };
    let mut snaps: Vec<BTreeMap<String, Tensor>> = Vec::new();
    train_with_observer(model, &fx.train, &extra, 7, |step, m| {
        if (step + 1) % swag.collect_every == 0 {
            snaps.push(m.params.clone());
        }
    })
    .unwrap();
    assert_eq!(snaps.len(), swag.n_collect);
    let mut worst = 0f64;
    for (k, mean) in &stats.mean {
        for (i, &m) in mean.iter().enumerate() {
            let oracle = snaps.iter().map(|s| s[k].data()[i] as f64).sum::<f64>() / snaps.len() as f64;
            worst = worst.max((m - oracle).abs());
        }
    }
    worst
}

/// Worst relative error of the per-weight empirical variance of `draws`
/// samples against `scale^2 * variance`, over 64 weights with spread-out
/// variances.
pub fn swag_sampler_rel_err(seed: u64, draws: usize, scale: f32) -> f64 {
    let mut rng = Stream::new(seed, "swag-snapshots");
    let snaps: Vec<BTreeMap<String, Tensor>> = (0..5)
        .map(|_| {
            BTreeMap::from([
                ("a".to_string(), Tensor::from_fn(vec![4, 8], |i| (1.0 + i as f32 * 0.1) * rng.random_range(-1.0..1.0))),
                ("b".to_string(), Tensor::from_fn(vec![32], |_| rng.random_range(-0.2..0.2))),
            ])
        })
        .collect();
    let stats = SwagStats::from_snapshots(&snaps).unwrap();
    let mut stream = Stream::new(seed, "swag-draws");
    let samples: Vec<_> = (0..draws).map(|_| stats.sample(scale, &mut stream).unwrap()).collect();
    let mut worst = 0f64;
    for key in ["a", "b"] {
        let var = stats.variance(key).unwrap();
        for (i, &v) in var.iter().enumerate() {
            let xs: Vec<f64> = samples.iter().map(|s| s[key].data()[i] as f64).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let emp = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            let expect = (scale as f64).powi(2) * v;
            worst = worst.max((emp - expect).abs() / expect);
        }
    }
    worst
}

