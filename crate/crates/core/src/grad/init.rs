//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Uniform in `±1/sqrt(fan_in)`, the usual framework default.
    Base,
    KaimingUniform,
    XavierUniform,
    CustomNormal,
}

impl InitMode {
    /// Deep-ensemble member order.
    pub const ALL: [InitMode; 4] = [InitMode::Base, InitMode::KaimingUniform, InitMode::XavierUniform, InitMode::CustomNormal];

    pub fn name(self) -> &'static str {
        match self {
            InitMode::Base => "base",
            InitMode::KaimingUniform => "kaiming_uniform",
            InitMode::XavierUniform => "xavier_uniform",
            InitMode::CustomNormal => "custom_normal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub mode: InitMode,
    pub seed: u64,
    pub custom_normal_std: f32,
}

impl InitSpec {
    pub fn new(mode: InitMode, seed: u64) -> Self {
        InitSpec { mode, seed, custom_normal_std: 0.05 }
    }
}

/// `(fan_in, fan_out)` of a weight tensor laid out as `[out, in, kernel...]`.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp, rest @ ..] => {
            let k: usize = rest.iter().product();
            (inp * k, out * k)
        }
    }
}

/// Draws a weight tensor. `stream_index` separates tensors that share a spec.
pub fn init_weights(shape: &[usize], spec: &InitSpec, stream_index: u64) -> Tensor {
    let mut rng = Stream::derive(spec.seed, spec.mode.name(), stream_index);
    let (fan_in, fan_out) = fans(shape);
    let uniform = |bound: f64, rng: &mut Stream| {
        Tensor::from_fn(shape.to_vec(), |_| if bound > 0.0 { rng.random_range(-bound..bound) as f32 } else { 0.0 })
    };
    match spec.mode {
        InitMode::Base => uniform(1.0 / (fan_in.max(1) as f64).sqrt(), &mut rng),
        InitMode::KaimingUniform => uniform((6.0 / fan_in.max(1) as f64).sqrt(), &mut rng),
        InitMode::XavierUniform => uniform((6.0 / (fan_in + fan_out).max(1) as f64).sqrt(), &mut rng),
        InitMode::CustomNormal => {
            let std = spec.custom_normal_std.max(0.0) as f64;
            if std == 0.0 {
                return Tensor::zeros(shape.to_vec());
            }
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape.to_vec(), |_| normal.sample(&mut rng) as f32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn custom_normal_zero_std_is_zero() {
        let spec = InitSpec { custom_normal_std: 0.0, ..InitSpec::new(InitMode::CustomNormal, 3) };
        assert!(init_weights(&[4, 3, 3, 3], &spec, 0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_within_bound() {
        let shape = [16, 8, 3, 3];
        let bound = (6.0f64 / 72.0).sqrt() as f32;
        let t = init_weights(&shape, &InitSpec::new(InitMode::KaimingUniform, 1), 0);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.8 * bound));
    }

    #[test]
    fn xavier_and_base_bounds() {
        let shape = [16, 8, 3, 3];
        let x = init_weights(&shape, &InitSpec::new(InitMode::XavierUniform, 1), 0);
        let xb = (6.0f64 / (72.0 + 144.0)).sqrt() as f32;
        assert!(x.data().iter().all(|v| v.abs() <= xb));
        let b = init_weights(&shape, &InitSpec::new(InitMode::Base, 1), 0);
        assert!(b.data().iter().all(|v| v.abs() <= 1.0 / 72f32.sqrt()));
    }

    #[test]
    fn deterministic_per_spec() {
        for mode in InitMode::ALL {
            let spec = InitSpec::new(mode, 42);
            assert_eq!(init_weights(&[5, 4, 3], &spec, 2), init_weights(&[5, 4, 3], &spec, 2));
            assert_ne!(init_weights(&[5, 4, 3], &spec, 2), init_weights(&[5, 4, 3], &spec, 3));
        }
    }

    #[test]
    fn fan_computation() {
        assert_eq!(fans(&[8, 4, 3, 3]), (36, 72));
        assert_eq!(fans(&[8, 4, 3, 3, 3]), (108, 216));
        assert_eq!(fans(&[5, 7]), (7, 5));
    }
}
