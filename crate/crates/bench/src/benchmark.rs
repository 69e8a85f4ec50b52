//! The propagator × strategy benchmark matrix.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use spuq_core::phantom::PhantomKind;
use spuq_core::rng::derive_seed;
use spuq_core::sliceprop::{select_annotated_slice, PropagateOptions, PropagatorKind};
use spuq_core::uq::{predict_with_uq, TrainedArtifacts, UqKind, UqStrategy};

use crate::checkpoint::save_artifacts;
use crate::config::{write_json, BenchmarkConfig};
use crate::dataset::{common_dims, Dataset, EvalCase};
use crate::error::{BenchError, Result};
use crate::eval::{capped_stats, evaluate, VolumeEval};
use crate::report::{write_report, CellResult, Report, VolumeFailure};
use crate::training::{train_artifacts, Cache};

pub const RUN_CONFIG_JSON: &str = "run_config.json";
pub const MANIFEST_HASH_FILE: &str = "manifest.sha256";
pub const TIMINGS_JSON: &str = "timings.json";

/// Provenance record written next to the reports.
#[derive(Serialize)]
struct RunRecord<'a> {
    dataset: &'a Path,
    manifest_sha256: &'a str,
    cells: Vec<String>,
    config: &'a BenchmarkConfig,
}

#[derive(Serialize)]
struct CellTiming {
    cell: String,
    train_seconds: f64,
    predict_seconds: f64,
}

pub struct BenchmarkRun {
    pub report: Report,
    pub cells: Vec<CellResult>,
    pub seconds: f64,
}

fn write_loss_history(path: &Path, artifacts: &TrainedArtifacts) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    w.write_record(["member", "step", "loss"]).map_err(|e| BenchError::csv(path, e))?;
    for (m, model) in artifacts.models().iter().enumerate() {
        for (step, loss) in model.loss_history.iter().enumerate() {
            w.write_record([m.to_string(), step.to_string(), loss.to_string()]).map_err(|e| BenchError::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

struct CellContext<'a> {
    config: &'a BenchmarkConfig,
    data: &'a Dataset,
    cache: &'a Cache,
    out: &'a Path,
}

/// Predicts and scores one evaluation volume.
fn evaluate_case(
    ctx: &CellContext,
    strategy: &UqStrategy,
    artifacts: &TrainedArtifacts,
    index: usize,
    case: &EvalCase,
) -> Result<(VolumeEval, Option<VolumeFailure>)> {
    let ann = select_annotated_slice(&case.mask)?;
    let seed = derive_seed(ctx.config.seed, "predict", index as u64);
    let pred = predict_with_uq(strategy, artifacts, &case.volume, &ann, &ctx.config.propagate, seed)?;
    let eval = evaluate(&case.entry.id, &case.entry.spec, &pred, &case.mask, ann.slice_index, ctx.config.surface_tolerance_mm)?;
    let plain = if case.entry.kind == PhantomKind::CappedCylinder {
        let opts = PropagateOptions { verify: false, refine: false, ..ctx.config.propagate.clone() };
        let p = predict_with_uq(strategy, artifacts, &case.volume, &ann, &opts, seed)?;
        let stats = capped_stats(&case.entry.spec, &p.mask, &case.mask, p.scores.as_ref().map(|s| &s.per_voxel));
        Some(VolumeFailure { id: case.entry.id.clone(), stats })
    } else {
        None
    };
    Ok((eval, plain))
}

fn run_cell(ctx: &CellContext, propagator: PropagatorKind, kind: UqKind) -> Result<(CellResult, CellTiming)> {
    let label = crate::report::cell_label(propagator.name(), kind.name());
    let dir = cell_dir(ctx.out, propagator, kind);
    fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
    let strategy = ctx.config.strategy(kind);
    let t = Instant::now();
    let artifacts = train_artifacts(
        &strategy,
        &ctx.config.arch(propagator),
        &ctx.data.train,
        ctx.config.sgd(propagator),
        ctx.config.seed,
        ctx.cache,
    )?;
    let train_seconds = t.elapsed().as_secs_f64();
    save_artifacts(dir.join("checkpoints"), &strategy, common_dims(&ctx.data.train), &artifacts)?;
    write_loss_history(&dir.join("loss_history.csv"), &artifacts)?;
    info!("{label}: trained in {train_seconds:.1}s, predicting {} volumes", ctx.data.eval.len());
    let t = Instant::now();
    let outcomes = ctx
        .data
        .eval
        .par_iter()
        .enumerate()
        .map(|(i, case)| evaluate_case(ctx, &strategy, &artifacts, i, case))
        .collect::<Result<Vec<_>>>()?;
    let (evals, plain): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let cell = CellResult { propagator, strategy: kind, error: None, evals, plain_capped: plain.into_iter().flatten().collect() };
    write_json(dir.join("cell.json"), &cell)?;
    let timing = CellTiming { cell: label, train_seconds, predict_seconds: t.elapsed().as_secs_f64() };
    Ok((cell, timing))
}

/// Runs every cell of the matrix with at most `jobs` worker threads and
/// writes the reports into `out`. A failing cell is recorded and the run
/// continues; the error is returned after the reports are written.
pub fn run_benchmark(config: &BenchmarkConfig, dataset: &Path, out: &Path, cache: &Cache, jobs: usize) -> Result<BenchmarkRun> {
    config.validate()?;
    let start = Instant::now();
    let data = Dataset::load(dataset)?;
    fs::create_dir_all(out).map_err(|e| BenchError::io(out, e))?;
    let cells = config.cells();
    let record = RunRecord {
        dataset,
        manifest_sha256: &data.manifest_hash,
        cells: cells.iter().map(|(p, s)| crate::report::cell_label(p.name(), s.name())).collect(),
        config,
    };
    write_json(out.join(RUN_CONFIG_JSON), &record)?;
    let hash_path = out.join(MANIFEST_HASH_FILE);
    fs::write(&hash_path, format!("{}\n", data.manifest_hash)).map_err(|e| BenchError::io(&hash_path, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BenchError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let ctx = CellContext { config, data: &data, cache, out };
    let outcomes: Vec<(PropagatorKind, UqKind, Result<(CellResult, CellTiming)>)> =
        pool.install(|| cells.par_iter().map(|&(p, s)| (p, s, run_cell(&ctx, p, s))).collect());

    let mut results = Vec::new();
    let mut timings = Vec::new();
    let mut failed = 0;
    for (propagator, strategy, outcome) in outcomes {
        match outcome {
            Ok((cell, timing)) => {
                results.push(cell);
                timings.push(timing);
            }
            Err(e) => {
                warn!("cell {}:{} failed: {e}", propagator.name(), strategy.name());
                failed += 1;
                results.push(CellResult { propagator, strategy, error: Some(e.to_string()), evals: Vec::new(), plain_capped: Vec::new() });
            }
        }
    }
    let report = write_report(out, &results, config.retention_points, config.random_orderings, config.seed)?;
    write_json(out.join(TIMINGS_JSON), &timings)?;
    if failed > 0 {
        return Err(BenchError::CellsFailed { failed, total: results.len() });
    }
    Ok(BenchmarkRun { report, cells: results, seconds: start.elapsed().as_secs_f64() })
}

/// Directory of one cell's outputs.
pub fn cell_dir(out: &Path, propagator: PropagatorKind, strategy: UqKind) -> PathBuf {
    out.join("cells").join(crate::report::cell_label(propagator.name(), strategy.name()))
}
