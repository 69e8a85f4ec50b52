//! Loading phantom suites from disk.
//!
//! Training only ever goes through [`load_training_volumes`], which reads
//! the volume files of the training split and nothing else.

use std::fs;
use std::path::{Path, PathBuf};

use spuq_core::phantom::{load_manifest, read_mask, read_volume, Manifest, PhantomEntry, Split, MANIFEST_FILE};
use spuq_core::volume::{Dims, MaskVolume, Volume3D};

use crate::error::{BenchError, Result};
use crate::training::sha256_hex;

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// SHA-256 of the manifest file bytes.
pub fn manifest_hash(path: &Path) -> Result<String> {
    let p = manifest_path(path);
    let bytes = fs::read(&p).map_err(|e| BenchError::io(&p, e))?;
    Ok(sha256_hex(&bytes))
}

/// Volumes of the training split. Mask files are never opened.
pub fn load_training_volumes(path: &Path) -> Result<(Manifest, Vec<Volume3D>)> {
    let (manifest, dir) = load_manifest(path)?;
    let volumes = manifest.entries(Split::Train).map(|e| read_volume(dir.join(&e.volume_path))).collect::<Result<_, _>>()?;
    Ok((manifest, volumes))
}

/// Common dimensions of a set of volumes, if they agree.
pub fn common_dims(volumes: &[Volume3D]) -> Option<Dims> {
    let first = volumes.first()?.dims();
    volumes.iter().all(|v| v.dims() == first).then_some(first)
}

#[derive(Clone, Debug)]
pub struct EvalCase {
    pub entry: PhantomEntry,
    pub volume: Volume3D,
    pub mask: MaskVolume,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub manifest_hash: String,
    pub train: Vec<Volume3D>,
    pub eval: Vec<EvalCase>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_hash = manifest_hash(path)?;
        let (manifest, train) = load_training_volumes(path)?;
        let (_, dir) = load_manifest(path)?;
        let eval = manifest
            .entries(Split::Eval)
            .map(|e| {
                Ok(EvalCase {
                    entry: e.clone(),
                    volume: read_volume(dir.join(&e.volume_path))?,
                    mask: read_mask(dir.join(&e.mask_path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if train.is_empty() || eval.is_empty() {
            return Err(BenchError::Config("dataset needs both training and evaluation phantoms".into()));
        }
        Ok(Dataset { manifest, manifest_hash, train, eval })
    }
}
