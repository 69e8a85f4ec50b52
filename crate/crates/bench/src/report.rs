//! Aggregate report files written after a benchmark run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spuq_core::metrics::{
    mean_std, pearson_r, retention_curve, trend_analysis, trend_flags, DistanceUnit, RetentionCurve, SliceRecord,
    TrendFlags, TrendSeries,
};
use spuq_core::rng::Stream;
use spuq_core::sliceprop::PropagatorKind;
use spuq_core::uq::UqKind;

use crate::config::write_json;
use crate::error::{BenchError, Result};
use crate::eval::{FailureStats, VolumeEval};

pub const RESULTS_CSV: &str = "results.csv";
pub const SLICES_CSV: &str = "slices.csv";
pub const TREND_CSV: &str = "trend.csv";
pub const TREND_FLAGS_JSON: &str = "trend_flags.json";
pub const RETENTION_CSV: &str = "retention.csv";
pub const TABLE_JSON: &str = "table1.json";
pub const TABLE_MD: &str = "table1.md";
pub const FAILURE_JSON: &str = "failure_report.json";

pub const BANNER: &str = "Results on procedurally generated phantoms. \
These volumes are not the clinical datasets of the original study and the numbers are not comparable with it.";

/// Distance bucket whose drop from bucket 0 is reported.
pub const DROP_BUCKET: usize = 5;

/// Failure-mode statistics of one evaluated volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeFailure {
    pub id: String,
    pub stats: FailureStats,
}

/// Outcome of one (propagator, strategy) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub propagator: PropagatorKind,
    pub strategy: UqKind,
    pub error: Option<String>,
    pub evals: Vec<VolumeEval>,
    pub plain_capped: Vec<VolumeFailure>,
}

impl CellResult {
    pub fn label(&self) -> String {
        cell_label(self.propagator.name(), self.strategy.name())
    }
}

pub fn cell_label(propagator: &str, strategy: &str) -> String {
    format!("{propagator}_{strategy}")
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::csv(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| BenchError::csv(path, e))
}

#[derive(Serialize)]
struct ResultRow<'a> {
    propagator: &'a str,
    strategy: &'a str,
    volume: &'a str,
    kind: &'a str,
    annotated_slice: usize,
    dsc: f64,
    surface_dice: f64,
    ahd: Option<f64>,
    asd: Option<f64>,
    uncertainty: Option<f64>,
    error: f64,
}

/// One row of `slices.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub propagator: String,
    pub strategy: String,
    pub volume: String,
    pub slice: usize,
    pub distance_slices: usize,
    pub distance_mm: f64,
    pub dsc: Option<f64>,
    pub surface_dice: Option<f64>,
    pub uncertainty: Option<f64>,
}

impl SliceRow {
    fn record(&self) -> SliceRecord {
        SliceRecord {
            slice: self.slice,
            distance_slices: self.distance_slices,
            distance_mm: self.distance_mm,
            dsc: self.dsc,
            surface_dice: self.surface_dice,
            uncertainty: self.uncertainty,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<MeanStd> {
        mean_std(values).map(|(mean, std)| MeanStd { mean, std, n: values.len() })
    }
}

/// One row of the Table-1-shaped summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub propagator: PropagatorKind,
    pub strategy: UqKind,
    pub n_volumes: usize,
    pub failed: Option<String>,
    pub dsc: Option<MeanStd>,
    pub surface_dice: Option<MeanStd>,
    pub ahd: Option<MeanStd>,
    /// Pearson r between per-volume uncertainty and 100 - DSC.
    pub r: Option<f64>,
    /// Why `r` is missing for a strategy that has uncertainty.
    pub r_status: Option<String>,
    /// R-AUC of the model's own uncertainty ordering.
    pub r_auc: Option<f64>,
    /// R-AUC when volumes are ordered by their true error.
    pub r_auc_oracle: Option<f64>,
    /// Mean R-AUC over random orderings.
    pub r_auc_random: Option<f64>,
    /// Volumes with a defined uncertainty, used for r and R-AUC.
    pub n_calibration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub banner: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Serialize)]
struct RetentionRow<'a> {
    propagator: &'a str,
    strategy: &'a str,
    ordering: &'a str,
    fraction: f64,
    error: f64,
    r_auc: f64,
}

struct Calibration {
    row_r: Option<f64>,
    r_status: Option<String>,
    curves: Vec<(&'static str, RetentionCurve)>,
    n: usize,
}

fn mean_curve(curves: &[RetentionCurve]) -> RetentionCurve {
    let k = curves.len() as f64;
    let n = curves[0].errors.len();
    RetentionCurve {
        fractions: curves[0].fractions.clone(),
        errors: (0..n).map(|i| curves.iter().map(|c| c.errors[i]).sum::<f64>() / k).collect(),
        r_auc: curves.iter().map(|c| c.r_auc).sum::<f64>() / k,
    }
}

fn calibration(cell: &CellResult, points: usize, random_orderings: usize, seed: u64) -> Result<Calibration> {
    let with_unc = cell.strategy != UqKind::None;
    let used: Vec<&VolumeEval> = cell.evals.iter().filter(|e| !with_unc || e.uncertainty.is_some()).collect();
    let errors: Vec<f64> = used.iter().map(|e| e.error()).collect();
    let mut out = Calibration { row_r: None, r_status: None, curves: Vec::new(), n: used.len() };
    if used.len() < 2 {
        out.r_status = with_unc.then(|| format!("only {} volumes with defined uncertainty", used.len()));
        return Ok(out);
    }
    if with_unc {
        let unc: Vec<f64> = used.iter().map(|e| e.uncertainty.expect("filtered")).collect();
        match pearson_r(&unc, &errors) {
            Ok(r) => out.row_r = Some(r),
            Err(e) => out.r_status = Some(e.to_string()),
        }
        out.curves.push(("model", retention_curve(&errors, &unc, points)?));
    }
    out.curves.push(("oracle", retention_curve(&errors, &errors, points)?));
    let mut stream = Stream::new(seed, "retention-random");
    let random = (0..random_orderings)
        .map(|_| {
            let u: Vec<f64> = (0..errors.len()).map(|_| stream.open01()).collect();
            retention_curve(&errors, &u, points)
        })
        .collect::<spuq_core::Result<Vec<_>>>()?;
    out.curves.push(("random", mean_curve(&random)));
    Ok(out)
}

/// Per-cell trend series with its flags and the drop at [`DROP_BUCKET`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTrend {
    pub propagator: String,
    pub strategy: String,
    /// Buckets need this many slice values to enter the rank correlation:
    /// the number of evaluated volumes.
    pub min_count: usize,
    pub flags: TrendFlags,
    pub dsc_drop: Option<f64>,
    pub surface_dice_drop: Option<f64>,
    pub series: TrendSeries,
}

/// Trend of each cell present in `rows`, in first-appearance order.
pub fn cell_trends(rows: &[SliceRow]) -> Vec<CellTrend> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&SliceRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.propagator.clone(), r.strategy.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &groups[&key];
            let volumes: BTreeSet<&str> = rs.iter().map(|r| r.volume.as_str()).collect();
            let records: Vec<SliceRecord> = rs.iter().map(|r| r.record()).collect();
            let series = trend_analysis(&records, DistanceUnit::Slices);
            let min_count = volumes.len();
            let at = |d: usize| series.buckets.iter().find(|b| b.distance == d as f64);
            let drop = |f: fn(&spuq_core::metrics::TrendBucket) -> Option<spuq_core::metrics::Stat>| {
                Some(f(at(0)?)?.mean - f(at(DROP_BUCKET)?)?.mean)
            };
            CellTrend {
                flags: trend_flags(&series, min_count),
                dsc_drop: drop(|b| b.dsc),
                surface_dice_drop: drop(|b| b.surface_dice),
                propagator: key.0,
                strategy: key.1,
                min_count,
                series,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct TrendRow<'a> {
    propagator: &'a str,
    strategy: &'a str,
    distance_bucket: f64,
    count: usize,
    dsc_mean: Option<f64>,
    dsc_std: Option<f64>,
    dsc_n: usize,
    surface_dice_mean: Option<f64>,
    surface_dice_std: Option<f64>,
    surface_dice_n: usize,
    uncertainty_mean: Option<f64>,
    uncertainty_std: Option<f64>,
    uncertainty_n: usize,
}

fn trend_rows(t: &CellTrend) -> Vec<TrendRow<'_>> {
    t.series
        .buckets
        .iter()
        .map(|b| TrendRow {
            propagator: &t.propagator,
            strategy: &t.strategy,
            distance_bucket: b.distance,
            count: b.count,
            dsc_mean: b.dsc.map(|s| s.mean),
            dsc_std: b.dsc.map(|s| s.std),
            dsc_n: b.dsc.map_or(0, |s| s.n),
            surface_dice_mean: b.surface_dice.map(|s| s.mean),
            surface_dice_std: b.surface_dice.map(|s| s.std),
            surface_dice_n: b.surface_dice.map_or(0, |s| s.n),
            uncertainty_mean: b.uncertainty.map(|s| s.mean),
            uncertainty_std: b.uncertainty.map(|s| s.std),
            uncertainty_n: b.uncertainty.map_or(0, |s| s.n),
        })
        .collect()
}

/// Writes `trend.csv`, one `trend_<propagator>_<strategy>.csv` per cell and
/// `trend_flags.json` into `dir`.
pub fn write_trends(dir: &Path, rows: &[SliceRow]) -> Result<Vec<CellTrend>> {
    let trends = cell_trends(rows);
    write_csv(&dir.join(TREND_CSV), trends.iter().flat_map(trend_rows))?;
    for t in &trends {
        write_csv(&dir.join(format!("trend_{}.csv", cell_label(&t.propagator, &t.strategy))), trend_rows(t))?;
    }
    write_json(dir.join(TREND_FLAGS_JSON), &trends)?;
    Ok(trends)
}

fn summarize(values: impl Iterator<Item = f64>) -> Option<MeanStd> {
    MeanStd::of(&values.collect::<Vec<_>>())
}

/// Failure-mode statistics of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub propagator: PropagatorKind,
    pub strategy: UqKind,
    /// Capped phantoms, default pipeline.
    pub capped: Vec<VolumeFailure>,
    /// Capped phantoms without verification or refinement.
    pub capped_plain: Vec<VolumeFailure>,
    pub branching: Vec<VolumeFailure>,
    /// Share of plain capped runs with foreground beyond the cap.
    pub overextended_fraction: Option<f64>,
    pub plain_uncertainty_beyond_cap: Option<f64>,
    pub plain_uncertainty_trunk: Option<f64>,
    pub branching_dsc_before_split: Option<f64>,
    pub branching_dsc_at_split: Option<f64>,
}

fn failure_summary(cell: &CellResult) -> FailureSummary {
    let pick = |kind| -> Vec<VolumeFailure> {
        cell.evals
            .iter()
            .filter(|e| e.kind == kind)
            .filter_map(|e| e.failure.clone().map(|stats| VolumeFailure { id: e.id.clone(), stats }))
            .collect()
    };
    let capped_plain = cell.plain_capped.clone();
    let mut over = Vec::new();
    let (mut beyond, mut trunk) = (Vec::new(), Vec::new());
    for p in &capped_plain {
        if let FailureStats::CappedCylinder { overextension_voxels, uncertainty_beyond_cap, uncertainty_trunk, .. } = p.stats {
            over.push(overextension_voxels > 0);
            beyond.extend(uncertainty_beyond_cap);
            trunk.extend(uncertainty_trunk);
        }
    }
    let branching = pick(spuq_core::phantom::PhantomKind::BranchingY);
    let (mut before, mut at) = (Vec::new(), Vec::new());
    for b in &branching {
        if let FailureStats::BranchingY { dsc_before_split, dsc_at_split, .. } = b.stats {
            before.extend(dsc_before_split);
            at.extend(dsc_at_split);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    FailureSummary {
        propagator: cell.propagator,
        strategy: cell.strategy,
        capped: pick(spuq_core::phantom::PhantomKind::CappedCylinder),
        overextended_fraction: (!over.is_empty()).then(|| over.iter().filter(|&&o| o).count() as f64 / over.len() as f64),
        plain_uncertainty_beyond_cap: mean(&beyond),
        plain_uncertainty_trunk: mean(&trunk),
        branching_dsc_before_split: mean(&before),
        branching_dsc_at_split: mean(&at),
        capped_plain,
        branching,
    }
}

fn fmt_stat(s: &Option<MeanStd>) -> String {
    s.map_or("-".into(), |s| format!("{:.2} ± {:.2}", s.mean, s.std))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

fn strategy_title(kind: UqKind) -> &'static str {
    match kind {
        UqKind::None => "Base (w/o UQ)",
        UqKind::DeepEnsemble => "Deep Ensemble",
        UqKind::BatchEnsemble => "Batch Ensemble",
        UqKind::McDropout => "MC Dropout",
        UqKind::ConcreteDropout => "Concrete Dropout",
        UqKind::Swag => "SWAG",
    }
}

pub fn table_markdown(table: &Table) -> String {
    let mut s = format!("> {}\n\n", table.banner);
    s.push_str("| Propagator | Method | DSC | SurfaceDice | AHD | r | R-AUC |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in &table.rows {
        if let Some(err) = &r.failed {
            s.push_str(&format!("| {} | {} | failed: {} | | | | |\n", r.propagator.name(), strategy_title(r.strategy), err));
            continue;
        }
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.propagator.name(),
            strategy_title(r.strategy),
            fmt_stat(&r.dsc),
            fmt_stat(&r.surface_dice),
            fmt_stat(&r.ahd),
            fmt_opt(r.r),
            fmt_opt(r.r_auc),
        ));
    }
    s
}

/// Everything aggregated from a finished matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: Table,
    pub trends: Vec<CellTrend>,
    pub failures: Vec<FailureSummary>,
}

/// Writes every aggregate file for `cells` into `dir`.
pub fn write_report(dir: &Path, cells: &[CellResult], retention_points: usize, random_orderings: usize, seed: u64) -> Result<Report> {
    fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
    let results = cells.iter().flat_map(|c| {
        c.evals.iter().map(move |e| ResultRow {
            propagator: c.propagator.name(),
            strategy: c.strategy.name(),
            volume: &e.id,
            kind: e.kind.name(),
            annotated_slice: e.annotated_slice,
            dsc: e.dsc,
            surface_dice: e.surface_dice,
            ahd: e.ahd,
            asd: e.asd,
            uncertainty: e.uncertainty,
            error: e.error(),
        })
    });
    write_csv(&dir.join(RESULTS_CSV), results)?;

    let slices: Vec<SliceRow> = cells
        .iter()
        .flat_map(|c| {
            c.evals.iter().flat_map(move |e| {
                e.slices.iter().map(move |s| SliceRow {
                    propagator: c.propagator.name().into(),
                    strategy: c.strategy.name().into(),
                    volume: e.id.clone(),
                    slice: s.slice,
                    distance_slices: s.distance_slices,
                    distance_mm: s.distance_mm,
                    dsc: s.dsc,
                    surface_dice: s.surface_dice,
                    uncertainty: s.uncertainty,
                })
            })
        })
        .collect();
    write_csv(&dir.join(SLICES_CSV), &slices)?;
    let trends = write_trends(dir, &slices)?;

    let mut rows = Vec::new();
    let mut retention = Vec::new();
    for c in cells {
        let cal = calibration(c, retention_points, random_orderings, seed)?;
        for (ordering, curve) in &cal.curves {
            for (f, e) in curve.fractions.iter().zip(&curve.errors) {
                retention.push(RetentionRow {
                    propagator: c.propagator.name(),
                    strategy: c.strategy.name(),
                    ordering,
                    fraction: *f,
                    error: *e,
                    r_auc: curve.r_auc,
                });
            }
        }
        let auc = |name: &str| cal.curves.iter().find(|(o, _)| *o == name).map(|(_, c)| c.r_auc);
        rows.push(TableRow {
            propagator: c.propagator,
            strategy: c.strategy,
            n_volumes: c.evals.len(),
            failed: c.error.clone(),
            dsc: summarize(c.evals.iter().map(|e| e.dsc)),
            surface_dice: summarize(c.evals.iter().map(|e| e.surface_dice)),
            ahd: summarize(c.evals.iter().filter_map(|e| e.ahd)),
            r: cal.row_r,
            r_status: cal.r_status,
            r_auc: auc("model"),
            r_auc_oracle: auc("oracle"),
            r_auc_random: auc("random"),
            n_calibration: cal.n,
        });
    }
    write_csv(&dir.join(RETENTION_CSV), retention)?;
    let table = Table {
        banner: BANNER.into(),
        columns: ["DSC", "SurfaceDice", "AHD", "r", "R-AUC"].map(String::from).to_vec(),
        rows,
    };
    write_json(dir.join(TABLE_JSON), &table)?;
    let md = table_markdown(&table);
    let md_path = dir.join(TABLE_MD);
    fs::write(&md_path, md).map_err(|e| BenchError::io(&md_path, e))?;

    let failures: Vec<FailureSummary> = cells.iter().map(failure_summary).collect();
    write_json(dir.join(FAILURE_JSON), &failures)?;
    Ok(Report { table, trends, failures })
}
