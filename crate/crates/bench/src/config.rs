//! JSON run configurations. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spuq_core::grad::SgdConfig;
use spuq_core::metrics::{DEFAULT_RETENTION_POINTS, DEFAULT_SURFACE_TOLERANCE_MM};
use spuq_core::sliceprop::{AffinityArch, Arch, FlowArch, PropagateOptions, PropagatorKind};
use spuq_core::uq::{UqKind, UqStrategy};

use crate::error::{BenchError, Result};

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BenchError::json(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| BenchError::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| BenchError::io(path, e))
}

/// Training configuration of one propagator and strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub propagator: PropagatorKind,
    #[serde(default)]
    pub strategy: UqStrategy,
    /// Defaults to the propagator's tuned settings.
    #[serde(default)]
    pub sgd: Option<SgdConfig>,
    #[serde(default)]
    pub arch: Option<Arch>,
    /// Suite directory or manifest file.
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }

    pub fn sgd(&self) -> SgdConfig {
        self.sgd.clone().unwrap_or_else(|| self.propagator.default_sgd())
    }

    pub fn arch(&self) -> Arch {
        self.arch.clone().unwrap_or_else(|| self.propagator.default_arch())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.exists() {
            return Err(BenchError::MissingInputs(vec![self.dataset.display().to_string()]));
        }
        if self.arch().kind() != self.propagator {
            return Err(BenchError::Config(format!("architecture does not belong to the {} propagator", self.propagator.name())));
        }
        self.sgd().validate()?;
        self.strategy.validate()?;
        Ok(())
    }
}

/// Hyperparameters shared by every cell of a benchmark matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub propagators: Vec<PropagatorKind>,
    pub strategies: Vec<UqKind>,
    /// Strategy hyperparameters; `kind` is replaced by each cell's strategy.
    pub strategy: UqStrategy,
    pub affinity_sgd: SgdConfig,
    pub flow_sgd: SgdConfig,
    pub affinity_arch: AffinityArch,
    pub flow_arch: FlowArch,
    pub propagate: PropagateOptions,
    pub surface_tolerance_mm: f64,
    pub retention_points: usize,
    /// Random uncertainty orderings averaged for the reference R-AUC.
    pub random_orderings: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 0,
            propagators: PropagatorKind::ALL.to_vec(),
            strategies: UqKind::ALL.to_vec(),
            strategy: UqStrategy::default(),
            affinity_sgd: PropagatorKind::Affinity.default_sgd(),
            flow_sgd: PropagatorKind::Flow.default_sgd(),
            affinity_arch: AffinityArch::default(),
            flow_arch: FlowArch::default(),
            propagate: PropagateOptions::default(),
            surface_tolerance_mm: DEFAULT_SURFACE_TOLERANCE_MM,
            retention_points: DEFAULT_RETENTION_POINTS,
            random_orderings: 100,
        }
    }
}

impl BenchmarkConfig {
    pub fn sgd(&self, p: PropagatorKind) -> &SgdConfig {
        match p {
            PropagatorKind::Affinity => &self.affinity_sgd,
            PropagatorKind::Flow => &self.flow_sgd,
        }
    }

    pub fn arch(&self, p: PropagatorKind) -> Arch {
        match p {
            PropagatorKind::Affinity => Arch::Affinity(self.affinity_arch.clone()),
            PropagatorKind::Flow => Arch::Flow(self.flow_arch.clone()),
        }
    }

    pub fn strategy(&self, kind: UqKind) -> UqStrategy {
        UqStrategy { kind, ..self.strategy }
    }

    /// Cells in matrix order: propagators outer, strategies inner.
    pub fn cells(&self) -> Vec<(PropagatorKind, UqKind)> {
        self.propagators.iter().flat_map(|&p| self.strategies.iter().map(move |&s| (p, s))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.propagators.is_empty() || self.strategies.is_empty() {
            return Err(BenchError::Config("benchmark matrix is empty".into()));
        }
        if !(self.surface_tolerance_mm > 0.0) {
            return Err(BenchError::Config("surface tolerance must be positive".into()));
        }
        if self.retention_points == 0 || self.random_orderings == 0 {
            return Err(BenchError::Config("retention points and random orderings must be positive".into()));
        }
        for p in &self.propagators {
            self.sgd(*p).validate()?;
        }
        for &s in &self.strategies {
            self.strategy(s).validate()?;
        }
        Ok(())
    }

    /// Restricts the matrix to cells matching `filter`, a comma-separated
    /// list of `propagator:strategy` pairs where either side may be `*`.
    /// `all` keeps everything.
    pub fn apply_matrix_filter(&mut self, filter: &str) -> Result<()> {
        let filter = filter.trim();
        if filter.is_empty() || filter == "all" {
            return Ok(());
        }
        let mut keep = Vec::new();
        for item in filter.split(',') {
            let (p, s) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| BenchError::Config(format!("matrix entry {item:?} is not propagator:strategy")))?;
            let props: Vec<PropagatorKind> = match p {
                "*" => PropagatorKind::ALL.to_vec(),
                _ => vec![PropagatorKind::ALL
                    .into_iter()
                    .find(|k| k.name() == p)
                    .ok_or_else(|| BenchError::Config(format!("unknown propagator {p:?}")))?],
            };
            let strats: Vec<UqKind> = match s {
                "*" => UqKind::ALL.to_vec(),
                _ => vec![UqKind::ALL
                    .into_iter()
                    .find(|k| k.name() == s)
                    .ok_or_else(|| BenchError::Config(format!("unknown strategy {s:?}")))?],
            };
            for &pk in &props {
                for &sk in &strats {
                    keep.push((pk, sk));
                }
            }
        }
        self.propagators.retain(|p| keep.iter().any(|(k, _)| k == p));
        self.strategies.retain(|s| keep.iter().any(|(_, k)| k == s));
        let cells = self.cells();
        if cells.iter().any(|c| !keep.contains(c)) {
            return Err(BenchError::Config(format!("matrix filter {filter:?} is not a cross product of propagators and strategies")));
        }
        Ok(())
    }
}
