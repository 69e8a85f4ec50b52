//! Strategy training with a content-addressed checkpoint cache.
//!
//! Networks are cached one checkpoint per key, where the key is the SHA-256
//! of everything that determines the trained weights. Strategies that train
//! the same network share an entry: the baseline doubles as the starting
//! point of SWAG collection. Ensemble members have their own initializations
//! and therefore their own keys.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use spuq_core::grad::{InitMode, InitSpec, SgdConfig};
use spuq_core::sliceprop::{train, Arch, PropagatorModel, Regularization};
use spuq_core::uq::{member_init, swag_collect, SwagConfig, SwagStats, TrainedArtifacts, UqKind, UqStrategy};
use spuq_core::volume::Volume3D;

use crate::checkpoint::Checkpoint;
use crate::error::{BenchError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("plain data serializes"))
}

/// Content hash of a set of training volumes.
pub fn volumes_hash(volumes: &[Volume3D]) -> String {
    let mut h = Sha256::new();
    for v in volumes {
        h.update(serde_json::to_vec(&v.dims()).expect("dims serialize"));
        for x in v.spacing().iter().chain(v.data()) {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Inputs that fully determine one trained network.
#[derive(Serialize)]
struct NetworkKey<'a> {
    arch: &'a Arch,
    sgd: &'a SgdConfig,
    regularization: Regularization,
    members: usize,
    init: InitSpec,
    seed: u64,
    data: &'a str,
}

#[derive(Serialize)]
struct SwagKey<'a> {
    base: &'a str,
    swag: &'a SwagConfig,
}

/// Checkpoint cache directory; `None` disables caching.
#[derive(Clone, Debug, Default)]
pub struct Cache {
    pub dir: Option<PathBuf>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| BenchError::io(d, e))?;
        }
        Ok(Cache { dir })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.ckpt")))
    }

    fn lookup(&self, key: &str) -> Result<Option<Checkpoint>> {
        match self.path(key) {
            Some(p) if p.exists() => {
                debug!("cache hit {}", p.display());
                Ok(Some(Checkpoint::load(&p)?))
            }
            _ => Ok(None),
        }
    }

    fn store(&self, key: &str, strategy: &UqStrategy, model: &PropagatorModel, swag: Option<&SwagStats>) -> Result<()> {
        if let Some(p) = self.path(key) {
            Checkpoint::new(strategy, None, None, model.clone(), swag.cloned()).save(&p)?;
        }
        Ok(())
    }

    fn network(
        &self,
        key: &NetworkKey,
        strategy: &UqStrategy,
        volumes: &[Volume3D],
        build: impl FnOnce() -> spuq_core::Result<PropagatorModel>,
    ) -> Result<(String, PropagatorModel)> {
        let hash = hash_json(key);
        if let Some(c) = self.lookup(&hash)? {
            return Ok((hash, c.model));
        }
        let model = train(build()?, volumes, key.sgd, key.seed)?;
        self.store(&hash, strategy, &model, None)?;
        Ok((hash, model))
    }
}

/// Trains (or loads from `cache`) the networks `strategy` needs. Produces
/// the same artifacts as [`spuq_core::uq::train_uq`].
pub fn train_artifacts(
    strategy: &UqStrategy,
    arch: &Arch,
    volumes: &[Volume3D],
    sgd: &SgdConfig,
    seed: u64,
    cache: &Cache,
) -> Result<TrainedArtifacts> {
    strategy.validate()?;
    let data = volumes_hash(volumes);
    let base_init = InitSpec::new(InitMode::Base, seed);
    let key = |regularization, members, init| NetworkKey { arch, sgd, regularization, members, init, seed, data: &data };
    info!("training {} {}", arch.kind().name(), strategy.kind.name());
    let artifacts = match strategy.kind {
        UqKind::DeepEnsemble => {
            let members = (0..strategy.n_members)
                .into_par_iter()
                .map(|m| {
                    let init = member_init(m, seed);
                    let k = key(Regularization::None, 0, init);
                    Ok(cache.network(&k, strategy, volumes, || PropagatorModel::new(arch.clone(), &init, Regularization::None, 0))?.1)
                })
                .collect::<Result<Vec<_>>>()?;
            TrainedArtifacts::Members(members)
        }
        UqKind::BatchEnsemble => {
            let k = key(Regularization::None, strategy.n_members, base_init);
            let (_, m) = cache.network(&k, strategy, volumes, || {
                PropagatorModel::new(arch.clone(), &base_init, Regularization::None, strategy.n_members)
            })?;
            TrainedArtifacts::Single(m)
        }
        UqKind::Swag => {
            let k = key(Regularization::None, 0, base_init);
            let (base_hash, base) =
                cache.network(&k, strategy, volumes, || PropagatorModel::new(arch.clone(), &base_init, Regularization::None, 0))?;
            let swag_hash = hash_json(&SwagKey { base: &base_hash, swag: &strategy.swag });
            match cache.lookup(&swag_hash)? {
                Some(Checkpoint { model, swag: Some(stats), .. }) => TrainedArtifacts::Swag { model, stats },
                _ => {
                    let (model, stats) = swag_collect(base, volumes, sgd, &strategy.swag, seed)?;
                    cache.store(&swag_hash, strategy, &model, Some(&stats))?;
                    TrainedArtifacts::Swag { model, stats }
                }
            }
        }
        UqKind::None | UqKind::McDropout | UqKind::ConcreteDropout => {
            let reg = strategy.regularization();
            let k = key(reg, 0, base_init);
            let (_, m) = cache.network(&k, strategy, volumes, || PropagatorModel::new(arch.clone(), &base_init, reg, 0))?;
            TrainedArtifacts::Single(m)
        }
    };
    Ok(artifacts)
}

/// Resolves the cache directory: the environment variable wins over the flag.
pub fn resolve_cache_dir(flag: Option<&Path>, env: Option<String>) -> Option<PathBuf> {
    env.filter(|s| !s.is_empty()).map(PathBuf::from).or_else(|| flag.map(Path::to_path_buf))
}
