//! Subcommand implementations, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use spuq_core::phantom::{generate_suite, read_mask, read_volume, write_mask, write_volume, Manifest};
use spuq_core::rng::derive_seed;
use spuq_core::sliceprop::{select_annotated_slice, PropagateOptions, PropagationRecord};
use spuq_core::uq::{predict_with_uq, train_uq, UqKind};
use spuq_core::volume::Dims;
use spuq_core::Error as CoreError;

use crate::benchmark::{run_benchmark, BenchmarkRun};
use crate::checkpoint::{load_artifacts, save_artifacts};
use crate::config::{read_json, write_json, BenchmarkConfig, RunConfig};
use crate::dataset::{common_dims, load_training_volumes, manifest_hash};
use crate::error::{BenchError, Result};
use crate::report::{read_csv, write_trends, CellTrend, SliceRow, SLICES_CSV};
use crate::training::Cache;

pub const LOSS_HISTORY_CSV: &str = "loss_history.csv";

pub fn cmd_generate(out: &Path, seed: u64, n_per_kind: usize, dims: Dims) -> Result<Manifest> {
    let m = generate_suite(out, seed, n_per_kind, dims)?;
    info!("wrote {} phantoms to {}", m.phantoms.len(), out.display());
    Ok(m)
}

fn write_history(path: &Path, histories: &[&[f32]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    w.write_record(["member", "step", "loss"]).map_err(|e| BenchError::csv(path, e))?;
    for (m, h) in histories.iter().enumerate() {
        for (step, loss) in h.iter().enumerate() {
            w.write_record([m.to_string(), step.to_string(), loss.to_string()]).map_err(|e| BenchError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

/// Trains the networks of one run configuration from the training volumes
/// alone and writes checkpoints, the loss history and the configuration
/// into the output directory. On divergence the partial history is kept.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let out = &config.output;
    fs::create_dir_all(out).map_err(|e| BenchError::io(out, e))?;
    write_json(out.join("run_config.json"), config)?;
    let hash_path = out.join("manifest.sha256");
    fs::write(&hash_path, format!("{}\n", manifest_hash(&config.dataset)?)).map_err(|e| BenchError::io(&hash_path, e))?;
    let (_, volumes) = load_training_volumes(&config.dataset)?;
    let arch = config.arch();
    match train_uq(&config.strategy, &arch, &volumes, &config.sgd(), config.seed) {
        Ok(artifacts) => {
            let histories: Vec<&[f32]> = artifacts.models().iter().map(|m| m.loss_history.as_slice()).collect();
            write_history(&out.join(LOSS_HISTORY_CSV), &histories)?;
            save_artifacts(out, &config.strategy, common_dims(&volumes), &artifacts)
        }
        Err(e) => {
            if let CoreError::Diverged { history, .. } = &e {
                write_history(&out.join(LOSS_HISTORY_CSV), &[history])?;
            }
            Err(e.into())
        }
    }
}

#[derive(Serialize)]
struct PropagateOutput<'a> {
    strategy: UqKind,
    annotated_slice: usize,
    /// Whether an uncertainty volume was written.
    uncertainty: bool,
    per_volume_uncertainty: Option<f64>,
    per_slice_uncertainty: Option<&'a [Option<f64>]>,
    records: &'a [PropagationRecord],
}

pub const MASK_FILE: &str = "mask.bin";
pub const UNCERTAINTY_FILE: &str = "uncertainty.bin";
pub const RECORDS_FILE: &str = "propagation.json";

/// Propagates the largest ground-truth slice through `volume` and writes the
/// mask, the variance volume (when the strategy has one) and the records.
pub fn cmd_propagate(
    checkpoints: &[PathBuf],
    volume: &Path,
    gt: &Path,
    out: &Path,
    opts: &PropagateOptions,
    seed: u64,
) -> Result<()> {
    let (header, artifacts) = load_artifacts(checkpoints)?;
    let vol = read_volume(volume)?;
    let gt = read_mask(gt)?;
    if !vol.same_shape(&gt) {
        return Err(BenchError::Config(format!("volume {:?} and ground truth {:?} differ in shape", vol.dims(), gt.dims())));
    }
    if let Some(d) = header.input_dims {
        if d != vol.dims() {
            return Err(BenchError::Config(format!("checkpoint was trained on {d:?} volumes, got {:?}", vol.dims())));
        }
    }
    let ann = select_annotated_slice(&gt)?;
    let pred = predict_with_uq(&header.strategy, &artifacts, &vol, &ann, opts, derive_seed(seed, "predict", 0))?;
    fs::create_dir_all(out).map_err(|e| BenchError::io(out, e))?;
    write_mask(out.join(MASK_FILE), &pred.mask)?;
    if let Some(s) = &pred.scores {
        write_volume(out.join(UNCERTAINTY_FILE), &s.per_voxel)?;
    }
    let record = PropagateOutput {
        strategy: header.strategy.kind,
        annotated_slice: ann.slice_index,
        uncertainty: pred.scores.is_some(),
        per_volume_uncertainty: pred.scores.as_ref().and_then(|s| s.per_volume),
        per_slice_uncertainty: pred.scores.as_ref().map(|s| s.per_slice.as_slice()),
        records: &pred.records,
    };
    write_json(out.join(RECORDS_FILE), &record)
}

pub fn cmd_benchmark(config: &BenchmarkConfig, dataset: &Path, out: &Path, cache_dir: Option<PathBuf>, jobs: usize) -> Result<BenchmarkRun> {
    let cache = Cache::new(cache_dir)?;
    run_benchmark(config, dataset, out, &cache, jobs)
}

/// Rebuilds the trend files of a finished benchmark from its slice table.
pub fn cmd_analyze_trend(results_dir: &Path) -> Result<Vec<CellTrend>> {
    let required = [SLICES_CSV, crate::report::RESULTS_CSV];
    let missing: Vec<String> =
        required.iter().map(|f| results_dir.join(f)).filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(BenchError::MissingInputs(missing));
    }
    let rows: Vec<SliceRow> = read_csv(&results_dir.join(SLICES_CSV))?;
    write_trends(results_dir, &rows)
}

/// Loads a benchmark configuration, or the defaults when no file is given.
pub fn load_benchmark_config(path: Option<&Path>) -> Result<BenchmarkConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(BenchmarkConfig::default()),
    }
}
