//! Train/eval phantom suites on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{generate, jittered_spec, write_mask, write_volume, PhantomKind, PhantomSpec};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::volume::Dims;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomEntry {
    pub id: String,
    pub kind: PhantomKind,
    /// Relative to the manifest's directory.
    pub volume_path: String,
    pub mask_path: String,
    pub split: Split,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub n_per_kind: usize,
    pub phantoms: Vec<PhantomEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &PhantomEntry> {
        self.phantoms.iter().filter(move |p| p.split == split)
    }
}

/// Every third phantom of each kind, starting with the first, is a training
/// volume; the rest are evaluation volumes.
fn split_for(i: usize) -> Split {
    if i % 3 == 0 {
        Split::Train
    } else {
        Split::Eval
    }
}

/// Writes `n_per_kind` phantoms of every kind plus `manifest.json` to `out`.
pub fn generate_suite(out: impl AsRef<Path>, seed: u64, n_per_kind: usize, dims: Dims) -> Result<Manifest> {
    let out = out.as_ref();
    if n_per_kind == 0 {
        return Err(Error::InvalidArgument("n_per_kind must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut phantoms = Vec::new();
    for (k, kind) in PhantomKind::ALL.into_iter().enumerate() {
        for i in 0..n_per_kind {
            let id = format!("{}_{i:03}", kind.name());
            let spec = jittered_spec(kind, dims, derive_seed(seed, "phantom", (k * n_per_kind + i) as u64));
            let (vol, mask) = generate(&spec)?;
            let entry = PhantomEntry {
                volume_path: format!("{id}_volume.bin"),
                mask_path: format!("{id}_mask.bin"),
                id,
                kind,
                split: split_for(i),
                spec,
            };
            write_volume(out.join(&entry.volume_path), &vol)?;
            write_mask(out.join(&entry.mask_path), &mask)?;
            phantoms.push(entry);
        }
    }
    let manifest = Manifest { seed, n_per_kind, phantoms };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest, returning it with the directory its paths are relative to.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, PathBuf)> {
    let path = path.as_ref();
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const DIMS: Dims = Dims::new(32, 32, 24);

    #[test]
    fn counts_and_distinct_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_suite(dir.path(), 5, 2, DIMS).unwrap();
        assert_eq!(m.phantoms.len(), 8);
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with("_volume.bin")).count(), 8);
        assert_eq!(files.iter().filter(|f| f.to_string_lossy().ends_with("_mask.bin")).count(), 8);
        assert!(dir.path().join(MANIFEST_FILE).exists());
        let seeds: HashSet<u64> = m.phantoms.iter().map(|p| p.spec.seed).collect();
        assert_eq!(seeds.len(), 8);
    }

    #[test]
    fn default_suite_has_sixteen_eval_volumes() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_suite(dir.path(), 1, 6, DIMS).unwrap();
        assert_eq!(m.entries(Split::Eval).count(), 16);
        assert_eq!(m.entries(Split::Train).count(), 8);
        let (loaded, base) = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(base, dir.path());
    }

    #[test]
    fn rerun_is_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_suite(a.path(), 3, 1, DIMS).unwrap();
        generate_suite(b.path(), 3, 1, DIMS).unwrap();
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }
}
