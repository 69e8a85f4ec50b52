//! Epistemic uncertainty strategies wrapped around either propagator.

mod batch;
mod predict;
mod swag;

pub use batch::BatchEnsembleLayer;
pub use predict::{
    predict_with_uq, sample_predictions, uncertainty_scores, PredictionDistribution, UncertaintyScores, UqPrediction,
    REGION_RADIUS,
};
pub use swag::SwagStats;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{InitMode, InitSpec, SgdConfig};
use crate::rng::derive_seed;
use crate::sliceprop::{train, train_with_observer, Arch, PropagatorModel, Regularization};
use crate::volume::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UqKind {
    None,
    DeepEnsemble,
    BatchEnsemble,
    McDropout,
    ConcreteDropout,
    Swag,
}

impl UqKind {
    pub const ALL: [UqKind; 6] =
        [UqKind::None, UqKind::DeepEnsemble, UqKind::BatchEnsemble, UqKind::McDropout, UqKind::ConcreteDropout, UqKind::Swag];

    pub fn name(self) -> &'static str {
        match self {
            UqKind::None => "none",
            UqKind::DeepEnsemble => "deep_ensemble",
            UqKind::BatchEnsemble => "batch_ensemble",
            UqKind::McDropout => "mc_dropout",
            UqKind::ConcreteDropout => "concrete_dropout",
            UqKind::Swag => "swag",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcreteConfig {
    pub temperature: f32,
    pub weight_reg: f32,
    pub dropout_reg: f32,
    pub init_p: f32,
}

impl Default for ConcreteConfig {
    fn default() -> Self {
        ConcreteConfig { temperature: 0.1, weight_reg: 1e-6, dropout_reg: 1e-5, init_p: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwagConfig {
    /// SGD steps between snapshots after the base run.
    pub collect_every: usize,
    pub n_collect: usize,
    pub sample_scale: f32,
}

impl Default for SwagConfig {
    fn default() -> Self {
        SwagConfig { collect_every: 5, n_collect: 20, sample_scale: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqStrategy {
    pub kind: UqKind,
    pub n_members: usize,
    pub n_samples: usize,
    pub dropout_rate: f32,
    pub concrete: ConcreteConfig,
    pub swag: SwagConfig,
}

impl Default for UqStrategy {
    fn default() -> Self {
        UqStrategy {
            kind: UqKind::None,
            n_members: 4,
            n_samples: 30,
            dropout_rate: 0.2,
            concrete: ConcreteConfig::default(),
            swag: SwagConfig::default(),
        }
    }
}

impl UqStrategy {
    pub fn new(kind: UqKind) -> Self {
        UqStrategy { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match self.kind {
            UqKind::DeepEnsemble | UqKind::BatchEnsemble if self.n_members < 2 => {
                bad(format!("{} needs at least 2 members, got {}", self.kind.name(), self.n_members))
            }
            UqKind::McDropout | UqKind::ConcreteDropout | UqKind::Swag if self.n_samples < 2 => {
                bad(format!("{} needs at least 2 samples, got {}", self.kind.name(), self.n_samples))
            }
            UqKind::McDropout if !(0.0..1.0).contains(&self.dropout_rate) => {
                bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate))
            }
            UqKind::ConcreteDropout
                if !(self.concrete.temperature > 0.0 && self.concrete.init_p > 0.0 && self.concrete.init_p < 1.0) =>
            {
                bad("concrete dropout needs temperature > 0 and initial p in (0, 1)".into())
            }
            UqKind::Swag if self.swag.collect_every == 0 || self.swag.n_collect < 2 || self.swag.sample_scale < 0.0 => {
                bad("swag needs collect_every >= 1, n_collect >= 2 and a nonnegative scale".into())
            }
            _ => Ok(()),
        }
    }

    /// Regularization built into the network for this strategy.
    pub fn regularization(&self) -> Regularization {
        match self.kind {
            UqKind::McDropout => Regularization::Dropout { rate: self.dropout_rate },
            UqKind::ConcreteDropout => Regularization::Concrete {
                temperature: self.concrete.temperature,
                weight_reg: self.concrete.weight_reg,
                dropout_reg: self.concrete.dropout_reg,
                init_p: self.concrete.init_p,
            },
            _ => Regularization::None,
        }
    }
}

/// Everything a strategy needs at prediction time.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedArtifacts {
    /// One network: the baseline, batch ensemble and both dropout variants.
    Single(PropagatorModel),
    /// Independently trained deep-ensemble members.
    Members(Vec<PropagatorModel>),
    /// Base network plus the weight moments collected after it.
    Swag { model: PropagatorModel, stats: SwagStats },
}

impl TrainedArtifacts {
    pub fn describe(&self) -> &'static str {
        match self {
            TrainedArtifacts::Single(_) => "single model",
            TrainedArtifacts::Members(_) => "ensemble members",
            TrainedArtifacts::Swag { .. } => "swag moments",
        }
    }

    pub fn models(&self) -> Vec<&PropagatorModel> {
        match self {
            TrainedArtifacts::Single(m) | TrainedArtifacts::Swag { model: m, .. } => vec![m],
            TrainedArtifacts::Members(ms) => ms.iter().collect(),
        }
    }

    pub(crate) fn check(&self, strategy: &UqStrategy) -> Result<()> {
        let ok = match (strategy.kind, self) {
            (UqKind::DeepEnsemble, TrainedArtifacts::Members(ms)) => !ms.is_empty(),
            (UqKind::Swag, TrainedArtifacts::Swag { .. }) => true,
            (UqKind::BatchEnsemble, TrainedArtifacts::Single(m)) => m.members >= 2,
            (UqKind::None | UqKind::McDropout | UqKind::ConcreteDropout, TrainedArtifacts::Single(_)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ArtifactMismatch { expected: strategy.kind.name().into(), found: self.describe().into() })
        }
    }
}

/// Initialization of deep-ensemble member `m`: the four modes in order,
/// cycling when there are more members.
pub fn member_init(m: usize, seed: u64) -> InitSpec {
    InitSpec::new(InitMode::ALL[m % InitMode::ALL.len()], derive_seed(seed, "ensemble-member", m as u64))
}

/// Builds and trains the networks required by `strategy`. Every member and
/// variant uses the same data stream, derived from `seed`.
pub fn train_uq(strategy: &UqStrategy, arch: &Arch, volumes: &[Volume3D], cfg: &SgdConfig, seed: u64) -> Result<TrainedArtifacts> {
    strategy.validate()?;
    let base_init = InitSpec::new(InitMode::Base, seed);
    match strategy.kind {
        UqKind::DeepEnsemble => {
            let members = (0..strategy.n_members)
                .into_par_iter()
                .map(|m| {
                    let model = PropagatorModel::new(arch.clone(), &member_init(m, seed), Regularization::None, 0)?;
                    train(model, volumes, cfg, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainedArtifacts::Members(members))
        }
        UqKind::BatchEnsemble => {
            let model = PropagatorModel::new(arch.clone(), &base_init, Regularization::None, strategy.n_members)?;
            Ok(TrainedArtifacts::Single(train(model, volumes, cfg, seed)?))
        }
        UqKind::Swag => {
            let model = PropagatorModel::new(arch.clone(), &base_init, Regularization::None, 0)?;
            let model = train(model, volumes, cfg, seed)?;
            let (model, stats) = swag_collect(model, volumes, cfg, &strategy.swag, seed)?;
            Ok(TrainedArtifacts::Swag { model, stats })
        }
        UqKind::None | UqKind::McDropout | UqKind::ConcreteDropout => {
            let model = PropagatorModel::new(arch.clone(), &base_init, strategy.regularization(), 0)?;
            Ok(TrainedArtifacts::Single(train(model, volumes, cfg, seed)?))
        }
    }
}

/// Continues SGD from a trained model for `n_collect * collect_every`
/// steps, recording the weights every `collect_every` steps.
pub fn swag_collect(
    model: PropagatorModel,
    volumes: &[Volume3D],
    cfg: &SgdConfig,
    swag: &SwagConfig,
    seed: u64,
) -> Result<(PropagatorModel, SwagStats)> {
    if swag.collect_every == 0 || swag.n_collect < 2 {
        return Err(Error::InvalidArgument("swag needs collect_every >= 1 and n_collect >= 2".into()));
    }
    let extra = SgdConfig { steps: swag.collect_every * swag.n_collect, ..cfg.clone() };
    let mut stats = SwagStats::new(&model.params);
    let trained = train_with_observer(model.clone(), volumes, &extra, seed, |step, m| {
        if (step + 1) % swag.collect_every == 0 {
            stats.collect(&m.params);
        }
    })?;
    // The template keeps the base run's history and the collection steps.
    let mut template = model;
    template.loss_history = trained.loss_history;
    Ok((template, stats))
}
