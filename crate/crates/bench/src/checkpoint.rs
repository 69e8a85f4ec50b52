//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `SPUQCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! payload. The payload holds every parameter tensor as little-endian `f32`
//! in header order, followed (for SWAG) by the first and second moments as
//! little-endian `f64`, again in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spuq_core::grad::Tensor;
use spuq_core::sliceprop::{Arch, PropagatorKind, PropagatorModel, Regularization};
use spuq_core::uq::{SwagStats, TrainedArtifacts, UqKind, UqStrategy};
use spuq_core::volume::Dims;

use crate::error::{BenchError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPUQCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwagEntry {
    pub n_collected: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub propagator: PropagatorKind,
    pub strategy: UqStrategy,
    /// Index of a deep-ensemble member.
    pub member: Option<usize>,
    /// Dimensions of the training volumes.
    pub input_dims: Option<Dims>,
    pub arch: Arch,
    pub regularization: Regularization,
    pub members: usize,
    pub loss_history: Vec<f32>,
    /// Learned concrete-dropout probabilities, informational.
    pub dropout_probabilities: Vec<(String, f32)>,
    pub tensors: Vec<TensorEntry>,
    pub swag: Option<SwagEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: PropagatorModel,
    pub swag: Option<SwagStats>,
}

impl Checkpoint {
    pub fn new(
        strategy: &UqStrategy,
        member: Option<usize>,
        input_dims: Option<Dims>,
        model: PropagatorModel,
        swag: Option<SwagStats>,
    ) -> Self {
        let entries = |shapes: &mut dyn Iterator<Item = (&String, &[usize])>| {
            shapes.map(|(k, s)| TensorEntry { name: k.clone(), shape: s.to_vec() }).collect::<Vec<_>>()
        };
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            propagator: model.kind(),
            strategy: *strategy,
            member,
            input_dims,
            arch: model.arch.clone(),
            regularization: model.regularization,
            members: model.members,
            loss_history: model.loss_history.clone(),
            dropout_probabilities: model.dropout_probabilities(),
            tensors: entries(&mut model.params.iter().map(|(k, t)| (k, t.shape()))),
            swag: swag.as_ref().map(|s| SwagEntry {
                n_collected: s.n_collected,
                tensors: entries(&mut s.shapes.iter().map(|(k, v)| (k, v.as_slice()))),
            }),
        };
        Checkpoint { header, model, swag }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| BenchError::json("<checkpoint header>", e))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in &self.header.tensors {
            for v in self.model.params[&e.name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(s) = &self.swag {
            for moments in [&s.mean, &s.sq_mean] {
                for e in &self.header.swag.as_ref().expect("header mirrors stats").tensors {
                    for v in &moments[&e.name] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| BenchError::Checkpoint { path: path.to_path_buf(), reason };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < len {
            return Err(bad(format!("header of {len} bytes truncated")));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..len]).map_err(|e| BenchError::json(path, e))?;
        let mut reader = Reader { data: &body[len..], path };
        let mut params = BTreeMap::new();
        for e in &header.tensors {
            let n = e.shape.iter().product();
            let data = reader.f32s(n)?;
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(err.to_string()))?;
            params.insert(e.name.clone(), t);
        }
        let swag = match &header.swag {
            Some(entry) => {
                let read_all = |reader: &mut Reader| -> Result<BTreeMap<String, Vec<f64>>> {
                    entry.tensors.iter().map(|e| Ok((e.name.clone(), reader.f64s(e.shape.iter().product())?))).collect()
                };
                let mean = read_all(&mut reader)?;
                let sq_mean = read_all(&mut reader)?;
                let shapes = entry.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
                Some(SwagStats { shapes, mean, sq_mean, n_collected: entry.n_collected })
            }
            None => None,
        };
        if !reader.data.is_empty() {
            return Err(bad(format!("{} trailing bytes", reader.data.len())));
        }
        let model = PropagatorModel {
            arch: header.arch.clone(),
            regularization: header.regularization,
            members: header.members,
            params,
            loss_history: header.loss_history.clone(),
        };
        if model.kind() != header.propagator {
            return Err(bad("propagator does not match architecture".into()));
        }
        Ok(Checkpoint { header, model, swag })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write then rename so concurrent readers never see a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| BenchError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| BenchError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| BenchError::io(path, e))?;
        Checkpoint::from_bytes(path, &bytes)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.data.len() < n {
            return Err(BenchError::Checkpoint {
                path: self.path.to_path_buf(),
                reason: format!("payload truncated: need {n} more bytes, have {}", self.data.len()),
            });
        }
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        Ok(head)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// File name of checkpoint `index` of a trained strategy.
fn artifact_file(artifacts: &TrainedArtifacts, index: usize) -> String {
    match artifacts {
        TrainedArtifacts::Members(_) => format!("member_{index}.ckpt"),
        _ => "model.ckpt".into(),
    }
}

/// Writes one checkpoint per network of `artifacts` into `dir`.
pub fn save_artifacts(
    dir: impl AsRef<Path>,
    strategy: &UqStrategy,
    input_dims: Option<Dims>,
    artifacts: &TrainedArtifacts,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let checkpoints: Vec<Checkpoint> = match artifacts {
        TrainedArtifacts::Single(m) => vec![Checkpoint::new(strategy, None, input_dims, m.clone(), None)],
        TrainedArtifacts::Members(ms) => {
            ms.iter().enumerate().map(|(i, m)| Checkpoint::new(strategy, Some(i), input_dims, m.clone(), None)).collect()
        }
        TrainedArtifacts::Swag { model, stats } => {
            vec![Checkpoint::new(strategy, None, input_dims, model.clone(), Some(stats.clone()))]
        }
    };
    checkpoints
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let path = dir.join(artifact_file(artifacts, i));
            c.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Reassembles the artifacts of one strategy from its checkpoint files.
pub fn load_artifacts(paths: &[PathBuf]) -> Result<(CheckpointHeader, TrainedArtifacts)> {
    let mut loaded: Vec<Checkpoint> = paths.iter().map(Checkpoint::load).collect::<Result<_>>()?;
    let first = loaded.first().ok_or_else(|| BenchError::Config("no checkpoint given".into()))?;
    let header = first.header.clone();
    for c in &loaded[1..] {
        if c.header.strategy != header.strategy || c.header.propagator != header.propagator {
            return Err(BenchError::Config("checkpoints come from different strategies".into()));
        }
    }
    let kind = header.strategy.kind;
    let artifacts = match kind {
        UqKind::DeepEnsemble => {
            loaded.sort_by_key(|c| c.header.member);
            TrainedArtifacts::Members(loaded.into_iter().map(|c| c.model).collect())
        }
        _ if loaded.len() != 1 => {
            return Err(BenchError::Config(format!("{} expects one checkpoint, got {}", kind.name(), loaded.len())))
        }
        UqKind::Swag => {
            let c = loaded.pop().expect("one checkpoint");
            let stats = c.swag.ok_or_else(|| BenchError::Config("swag checkpoint without moments".into()))?;
            TrainedArtifacts::Swag { model: c.model, stats }
        }
        _ => TrainedArtifacts::Single(loaded.pop().expect("one checkpoint").model),
    };
    Ok((header, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use spuq_core::grad::{InitMode, InitSpec};

    fn model(reg: Regularization) -> PropagatorModel {
        let mut m =
            PropagatorModel::new(PropagatorKind::Affinity.default_arch(), &InitSpec::new(InitMode::Base, 3), reg, 0).unwrap();
        m.loss_history = vec![0.5, 0.25, 0.1];
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model(Regularization::Concrete { temperature: 0.1, weight_reg: 1e-6, dropout_reg: 1e-5, init_p: 0.1 });
        let stats = SwagStats::from_snapshots(&[m.params.clone(), model(Regularization::None).params]).unwrap();
        let c = Checkpoint::new(&UqStrategy::new(UqKind::Swag), None, Some(Dims::new(32, 32, 24)), m, Some(stats));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(Path::new("x"), &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let c = Checkpoint::new(&UqStrategy::default(), None, None, model(Regularization::None), None);
        let bytes = c.to_bytes().unwrap();
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 1]), Err(BenchError::Checkpoint { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(p, &wrong), Err(BenchError::Checkpoint { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(p, &long).is_err());
    }

    #[test]
    fn ensemble_members_reload_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let members: Vec<_> = (0..3)
            .map(|i| {
                let mut m = model(Regularization::None);
                m.loss_history = vec![i as f32];
                m
            })
            .collect();
        let art = TrainedArtifacts::Members(members);
        let mut paths = save_artifacts(dir.path(), &UqStrategy::new(UqKind::DeepEnsemble), None, &art).unwrap();
        paths.reverse();
        let (header, back) = load_artifacts(&paths).unwrap();
        assert_eq!(header.strategy.kind, UqKind::DeepEnsemble);
        assert_eq!(back, art);
    }
}
