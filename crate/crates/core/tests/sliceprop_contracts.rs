use proptest::prelude::*;
use spuq_core::grad::{InitMode, InitSpec, SgdConfig, Tensor};
use spuq_core::metrics::dsc;
use spuq_core::phantom::{generate, jittered_spec, PhantomKind, PhantomSpec};
use spuq_core::sliceprop::{
    apply_ddf, compute_affinity, predict_ddf, propagate, select_annotated_slice, train, train_affinity_model,
    train_flow_model, verify_and_correct, warp_with_affinity, AffinityArch, AffinityMatrix, FlowArch, PropagateOptions,
    PropagatorKind, PropagatorModel, Regularization, Sampling, SliceAnnotation,
};
use spuq_core::volume::{Dims, MaskVolume, Volume3D};

const DIMS: Dims = Dims::new(32, 32, 24);

fn training_set(seed: u64) -> Vec<Volume3D> {
    (0..4).map(|i| generate(&jittered_spec(PhantomKind::Ellipsoid, DIMS, seed + i)).unwrap().0).collect()
}

fn fresh(kind: PropagatorKind) -> PropagatorModel {
    PropagatorModel::new(kind.default_arch(), &InitSpec::new(InitMode::Base, 0), Regularization::None, 0).unwrap()
}

fn mask_from_areas(areas: &[usize]) -> MaskVolume {
    let dims = Dims::new(4, 4, areas.len());
    let mut m = MaskVolume::filled(dims, [1.0; 3], 0);
    for (z, &a) in areas.iter().enumerate() {
        m.slice_mut(z)[..a].fill(1);
    }
    m
}

#[test]
fn annotated_slice_is_the_largest_with_lowest_index_on_ties() {
    assert_eq!(select_annotated_slice(&mask_from_areas(&[3, 9, 9, 1])).unwrap().slice_index, 1);
    assert_eq!(select_annotated_slice(&mask_from_areas(&[0, 0, 5, 0])).unwrap().slice_index, 2);
    assert!(select_annotated_slice(&mask_from_areas(&[0, 0, 0])).is_err());
}

#[test]
fn ellipsoid_annotation_is_the_equatorial_slice() {
    for seed in 0..5 {
        let mut spec = PhantomSpec::new(PhantomKind::Ellipsoid, DIMS, seed);
        spec.center_z += seed as f32 - 2.0;
        spec.center[0] += 0.4 * seed as f32;
        spec.drift = [0.0; 2];
        spec.sway = [0.0; 3];
        spec.radius_z = 5.0;
        let (_, gt) = generate(&spec).unwrap();
        // analytic cross-section area pi * rx * ry * (1 - ((z - c) / rz)^2)
        let area = |z: usize| {
            let w = (z as f32 - spec.center_z) / spec.radius_z;
            std::f32::consts::PI * spec.radius * spec.radius_y * (1.0 - w * w).max(0.0)
        };
        let expect = (0..DIMS.depth).max_by(|&a, &b| area(a).total_cmp(&area(b))).unwrap();
        assert_eq!(select_annotated_slice(&gt).unwrap().slice_index, expect, "centre {}", spec.center_z);
    }
}

#[test]
fn annotation_is_kept_verbatim_and_empty_annotations_stay_empty() {
    let (vol, gt) = generate(&jittered_spec(PhantomKind::BranchingY, DIMS, 2)).unwrap();
    let ann = select_annotated_slice(&gt).unwrap();
    let opts = PropagateOptions::default();
    for kind in PropagatorKind::ALL {
        let model = fresh(kind);
        let p = propagate(&model, &vol, &ann, &opts, Sampling::default()).unwrap();
        assert_eq!(p.mask.slice(ann.slice_index), ann.mask.as_slice());
        assert_eq!(p.records.len(), DIMS.depth);
        assert!(p.records.iter().enumerate().all(|(z, r)| r.slice == z && r.distance_slices == z.abs_diff(ann.slice_index)));

        let empty = SliceAnnotation { slice_index: 5, mask: vec![0; DIMS.plane()] };
        let p = propagate(&model, &vol, &empty, &opts, Sampling::default()).unwrap();
        assert_eq!(p.mask.count(), 0, "{}", kind.name());
    }
}

#[test]
fn zero_fields_replicate_the_annotation() {
    let (vol, gt) = generate(&jittered_spec(PhantomKind::Ellipsoid, DIMS, 3)).unwrap();
    let model = fresh(PropagatorKind::Flow);
    let fields = predict_ddf(&model, &vol, None, None).unwrap();
    assert_eq!(fields.len(), 2 * (DIMS.depth - 1));
    assert!(fields.forward.iter().chain(&fields.backward).all(|f| f.data().iter().all(|&v| v == 0.0)));
    let ann = select_annotated_slice(&gt).unwrap();
    for refine in [false, true] {
        let opts = PropagateOptions { refine, ..Default::default() };
        let p = propagate(&model, &vol, &ann, &opts, Sampling::default()).unwrap();
        for z in 0..DIMS.depth {
            assert_eq!(p.mask.slice(z), ann.mask.as_slice(), "slice {z}, refine {refine}");
        }
    }
}

#[test]
fn opposite_displacements_round_trip_on_smooth_images() {
    let (h, w) = (24, 24);
    let img: Vec<f32> = (0..h * w)
        .map(|i| {
            let (x, y) = ((i % w) as f32 / w as f32, (i / w) as f32 / h as f32);
            0.5 + 0.25 * (3.0 * x).sin() * (2.0 * y).cos()
        })
        .collect();
    let field = Tensor::from_fn(vec![2, h, w], |i| if i < h * w { 0.7 } else { -0.4 });
    let neg = Tensor::from_fn(vec![2, h, w], |i| -field.data()[i]);
    let back = apply_ddf(&neg, &apply_ddf(&field, &img).unwrap()).unwrap();
    let range = img.iter().cloned().fold(f32::MIN, f32::max) - img.iter().cloned().fold(f32::MAX, f32::min);
    let mut worst = 0f32;
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            worst = worst.max((back[y * w + x] - img[y * w + x]).abs());
        }
    }
    assert!(worst <= 0.05 * range, "{worst} vs range {range}");
}

#[test]
fn zero_steps_return_the_initialization() {
    let vols = training_set(10);
    for kind in PropagatorKind::ALL {
        let cfg = SgdConfig { steps: 0, ..kind.default_sgd() };
        let trained = train(fresh(kind), &vols, &cfg, 1).unwrap();
        assert_eq!(trained.params, fresh(kind).params);
        assert!(trained.loss_history.is_empty());
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let vols = training_set(20);
    let cfg = SgdConfig { steps: 6, ..PropagatorKind::Affinity.default_sgd() };
    let a = train_affinity_model(&vols, &cfg, AffinityArch::default(), 9).unwrap();
    let b = train_affinity_model(&vols, &cfg, AffinityArch::default(), 9).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.params, b.params);
    let cfg = SgdConfig { steps: 4, ..PropagatorKind::Flow.default_sgd() };
    let a = train_flow_model(&vols, &cfg, FlowArch::default(), 9).unwrap();
    let b = train_flow_model(&vols, &cfg, FlowArch::default(), 9).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    let c = train_flow_model(&vols, &cfg, FlowArch::default(), 10).unwrap();
    assert_ne!(a.loss_history, c.loss_history);
}

#[test]
fn shallow_volumes_are_rejected() {
    let (vol, _) = generate(&jittered_spec(PhantomKind::Ellipsoid, DIMS, 1)).unwrap();
    let thin = Volume3D::new(Dims::new(32, 32, 1), [1.0; 3], vol.slice(0).to_vec()).unwrap();
    assert!(predict_ddf(&fresh(PropagatorKind::Flow), &thin, None, None).is_err());
    let cfg = SgdConfig { steps: 1, ..PropagatorKind::Affinity.default_sgd() };
    assert!(train_affinity_model(&[thin], &cfg, AffinityArch::default(), 0).is_err());
}

/// Per-slice DSC of a propagation through a volume whose slices are all identical.
fn constant_anatomy_slice_dsc(kind: PropagatorKind, model: &PropagatorModel) -> Vec<f64> {
    let (vol, gt) = generate(&PhantomSpec::new(PhantomKind::ConstantTube, DIMS, 4)).unwrap();
    let ann = select_annotated_slice(&gt).unwrap();
    let p = propagate(model, &vol, &ann, &PropagateOptions::default(), Sampling::default()).unwrap();
    assert_eq!(p.mask.dims(), vol.dims(), "{}", kind.name());
    (0..DIMS.depth)
        .map(|z| {
            let one = |m: &MaskVolume| MaskVolume::new(Dims::new(32, 32, 1), [1.0; 3], m.slice(z).to_vec()).unwrap();
            dsc(&one(&p.mask), &one(&gt)).unwrap() / 100.0
        })
        .collect()
}

#[test]
fn constant_anatomy_propagates_almost_perfectly() {
    // the benchmark's mix of phantom kinds, with the default schedules
    let vols: Vec<Volume3D> =
        (0..4).map(|i| generate(&jittered_spec(PhantomKind::ALL[i as usize], DIMS, 30 + i)).unwrap().0).collect();
    let affinity = train_affinity_model(&vols, &PropagatorKind::Affinity.default_sgd(), AffinityArch::default(), 0).unwrap();
    let worst = constant_anatomy_slice_dsc(PropagatorKind::Affinity, &affinity).into_iter().fold(1.0, f64::min);
    assert!(worst >= 0.99, "affinity worst slice DSC {worst}");
    let flow = train_flow_model(&vols, &PropagatorKind::Flow.default_sgd(), FlowArch::default(), 0).unwrap();
    let worst = constant_anatomy_slice_dsc(PropagatorKind::Flow, &flow).into_iter().fold(1.0, f64::min);
    assert!(worst >= 0.95, "flow worst slice DSC {worst}");
}

#[test]
fn zero_threshold_never_corrects() {
    let (h, w) = (6, 6);
    let src: Vec<f32> = (0..h * w).map(|i| if i % w < 3 { 1.0 } else { 0.0 }).collect();
    let mut bwd = AffinityMatrix::identity(h, w, 1);
    // send every target pixel to the top-left corner's background neighbour
    bwd.weights.iter_mut().for_each(|v| *v = 0.0);
    for p in 0..h * w {
        bwd.weights[p * 9 + 4] = if src[p] > 0.5 { 0.0 } else { 1.0 };
    }
    let fwd = AffinityMatrix::identity(h, w, 1);
    let v = verify_and_correct(&src, &src, &fwd, &bwd, 0.0).unwrap();
    assert!(!v.corrected);
    assert_eq!(v.mask, src);
    let v = verify_and_correct(&src, &src, &fwd, &bwd, 0.8).unwrap();
    assert!(v.corrected);
    assert!(v.mask.iter().all(|&x| x == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affinity_rows_are_distributions_and_warps_stay_in_range(
        c in 1usize..4,
        radius in 1usize..3,
        temperature in 0.05f32..2.0,
        seed in any::<u64>(),
    ) {
        let (h, w) = (5, 6);
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f32 / (1u64 << 31) as f32) * 6.0 - 3.0
        };
        let src = Tensor::from_fn(vec![c, h, w], |_| next());
        let tgt = Tensor::from_fn(vec![c, h, w], |_| next());
        let a = compute_affinity(&src, &tgt, radius, temperature).unwrap();
        for p in 0..h * w {
            let row = a.row(p);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row {} sums to {}", p, sum);
        }
        let mask: Vec<f32> = (0..h * w).map(|_| (next() / 6.0 + 0.5).clamp(0.0, 1.0)).collect();
        let out = warp_with_affinity(&a, &mask).unwrap();
        prop_assert!(out.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
        let ones = warp_with_affinity(&a, &vec![1.0; h * w]).unwrap();
        prop_assert!(ones.iter().all(|&v| (v - 1.0).abs() <= 1e-6));
    }
}
