//! Propagator hyperparameters and trained parameter sets.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{init_weights, InitSpec, SgdConfig, Tensor};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagatorKind {
    Affinity,
    Flow,
}

impl PropagatorKind {
    pub const ALL: [PropagatorKind; 2] = [PropagatorKind::Affinity, PropagatorKind::Flow];

    pub fn name(self) -> &'static str {
        match self {
            PropagatorKind::Affinity => "affinity",
            PropagatorKind::Flow => "flow",
        }
    }

    /// Optimizer settings tuned on the phantom suite. The affinity loss is
    /// a small MSE on blurred reconstructions and needs a far larger step.
    pub fn default_sgd(self) -> SgdConfig {
        match self {
            PropagatorKind::Affinity => SgdConfig { learning_rate: 5.0, momentum: 0.9, steps: 200, batch_size: 4 },
            PropagatorKind::Flow => SgdConfig { learning_rate: 0.3, momentum: 0.9, steps: 600, batch_size: 4 },
        }
    }

    pub fn default_arch(self) -> Arch {
        match self {
            PropagatorKind::Affinity => Arch::Affinity(AffinityArch::default()),
            PropagatorKind::Flow => Arch::Flow(FlowArch::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityArch {
    pub edge_channels: usize,
    pub hidden_channels: usize,
    pub feature_channels: usize,
    pub window_radius: usize,
    pub temperature: f32,
}

impl Default for AffinityArch {
    fn default() -> Self {
        AffinityArch { edge_channels: 4, hidden_channels: 16, feature_channels: 8, window_radius: 5, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowArch {
    /// Channels of the full- and half-resolution encoder levels.
    pub channels: [usize; 2],
    /// Weight of the SSIM term in the boundary-preserving loss.
    pub lambda: f32,
    pub ssim_window: usize,
    /// Neighbours reconstructed on each side of a source slice in training.
    pub neighborhood: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        FlowArch { channels: [8, 16], lambda: 0.85, ssim_window: 7, neighborhood: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Affinity(AffinityArch),
    Flow(FlowArch),
}

impl Arch {
    pub fn kind(&self) -> PropagatorKind {
        match self {
            Arch::Affinity(_) => PropagatorKind::Affinity,
            Arch::Flow(_) => PropagatorKind::Flow,
        }
    }
}

/// Stochastic regularization built into the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regularization {
    None,
    /// Inverted dropout after every hidden ReLU.
    Dropout { rate: f32 },
    /// Relaxed-Bernoulli channel gates after every hidden ReLU, with one
    /// learned drop probability per layer.
    Concrete { temperature: f32, weight_reg: f32, dropout_reg: f32, init_p: f32 },
}

/// One convolution of a network: parameter prefix, channels and kernel.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerDef {
    pub name: &'static str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<usize>,
    /// Followed by ReLU and the stochastic regularizer.
    pub hidden: bool,
    pub zero_init: bool,
}

pub(crate) fn layers(arch: &Arch) -> Vec<LayerDef> {
    let l = |name, cin, cout, kernel: &[usize], hidden, zero_init| LayerDef {
        name,
        cin,
        cout,
        kernel: kernel.to_vec(),
        hidden,
        zero_init,
    };
    match arch {
        Arch::Affinity(a) => vec![
            l("conv1", a.edge_channels, a.hidden_channels, &[3, 3], true, false),
            l("conv2", a.hidden_channels, a.hidden_channels, &[3, 3], true, false),
            l("conv3", a.hidden_channels, a.feature_channels, &[3, 3], false, false),
        ],
        Arch::Flow(f) => vec![
            l("enc1", 1, f.channels[0], &[3, 3, 3], true, false),
            l("enc2", f.channels[0], f.channels[1], &[3, 3, 3], true, false),
            l("dec", f.channels[1], f.channels[0], &[3, 3, 3], true, false),
            l("out", f.channels[0], 4, &[3, 3, 3], false, true),
        ],
    }
}

pub(crate) fn weight_key(layer: &str) -> String {
    format!("{layer}.weight")
}

pub(crate) fn bias_key(layer: &str) -> String {
    format!("{layer}.bias")
}

pub(crate) fn gate_key(layer: &str) -> String {
    format!("{layer}.gate_logit")
}

pub(crate) fn in_factor_key(layer: &str, member: usize) -> String {
    format!("{layer}.s.{member}")
}

pub(crate) fn out_factor_key(layer: &str, member: usize) -> String {
    format!("{layer}.r.{member}")
}

/// A slice propagator: architecture, parameters and training history.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatorModel {
    pub arch: Arch,
    pub regularization: Regularization,
    /// Batch-ensemble members sharing the weights (0 for a plain network).
    pub members: usize,
    pub params: BTreeMap<String, Tensor>,
    pub loss_history: Vec<f32>,
}

impl PropagatorModel {
    /// Freshly initialized network. Biases start at zero, the flow network's
    /// output layer is all zeros, batch-ensemble factors are `1 + N(0, 0.1)`.
    pub fn new(arch: Arch, init: &InitSpec, regularization: Regularization, members: usize) -> Result<Self> {
        if members == 1 {
            return Err(Error::InvalidArgument("a batch ensemble needs at least two members".into()));
        }
        match regularization {
            Regularization::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
            }
            Regularization::Concrete { temperature, init_p, .. } if temperature <= 0.0 || !(0.0..1.0).contains(&init_p) || init_p == 0.0 => {
                return Err(Error::InvalidArgument("concrete dropout needs temperature > 0 and p in (0, 1)".into()));
            }
            _ => {}
        }
        let mut params = BTreeMap::new();
        let factor = Normal::new(0.0f32, 0.1).expect("valid std");
        for (i, layer) in layers(&arch).iter().enumerate() {
            let mut shape = vec![layer.cout, layer.cin];
            shape.extend(&layer.kernel);
            let w = if layer.zero_init { Tensor::zeros(shape) } else { init_weights(&shape, init, i as u64) };
            params.insert(weight_key(layer.name), w);
            params.insert(bias_key(layer.name), Tensor::zeros(vec![layer.cout]));
            if layer.hidden {
                if let Regularization::Concrete { init_p, .. } = regularization {
                    params.insert(gate_key(layer.name), Tensor::scalar((init_p / (1.0 - init_p)).ln()));
                }
            }
            for m in 0..members {
                let mut rng = Stream::derive(init.seed, "batch-ensemble-factors", (i * members + m) as u64);
                let mut draw = |n: usize| Tensor::from_fn(vec![n], |_| 1.0 + factor.sample(&mut rng));
                params.insert(in_factor_key(layer.name, m), draw(layer.cin));
                params.insert(out_factor_key(layer.name, m), draw(layer.cout));
            }
        }
        Ok(PropagatorModel { arch, regularization, members, params, loss_history: Vec::new() })
    }

    pub fn kind(&self) -> PropagatorKind {
        self.arch.kind()
    }

    pub fn param(&self, key: &str) -> Result<&Tensor> {
        self.params.get(key).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {key}")))
    }

    /// Learned drop probability of each gated layer, in layer order.
    pub fn dropout_probabilities(&self) -> Vec<(String, f32)> {
        layers(&self.arch)
            .iter()
            .filter_map(|l| {
                self.params.get(&gate_key(l.name)).map(|t| (l.name.to_string(), crate::grad::sigmoid(t.item() as f64) as f32))
            })
            .collect()
    }

    /// Sets all batch-ensemble factors to one.
    pub fn reset_factors(&mut self) {
        for (k, v) in self.params.iter_mut() {
            if k.contains(".r.") || k.contains(".s.") {
                v.data_mut().iter_mut().for_each(|x| *x = 1.0);
            }
        }
    }

    pub(crate) fn affinity_arch(&self) -> Result<&AffinityArch> {
        match &self.arch {
            Arch::Affinity(a) => Ok(a),
            Arch::Flow(_) => Err(Error::InvalidArgument("expected an affinity propagator".into())),
        }
    }

    pub(crate) fn flow_arch(&self) -> Result<&FlowArch> {
        match &self.arch {
            Arch::Flow(f) => Ok(f),
            Arch::Affinity(_) => Err(Error::InvalidArgument("expected a flow propagator".into())),
        }
    }
}
