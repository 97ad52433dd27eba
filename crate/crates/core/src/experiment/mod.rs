//! Sweep runner: expands an [`ExperimentSpec`] into training runs, executes
//! them on a small thread pool, appends one CSV row per run and derives
//! per-cell aggregates and SVG plots from the rows.

mod plot;
mod stats;
mod table;

pub use plot::{emit_plot, render_svg, PlotKind, Series};
pub use stats::{median, pearson, ranks, relative_change, spearman, Change};
pub use table::{columns, factors_from_header, read_rows, write_table, RowWriter, RunStatus, SweepRow};

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::datasets::{Scenario, World, WorldConfig};
use crate::encoders::DEFAULT_WIDTH;
use crate::error::{Error, Result};
use crate::seed::{child_rng, stable_hash};
use crate::training::{train_with_log, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    UrrTable,
    TempSweep,
    DepthSweep,
    AlignCorr,
    BetaSweep,
    Homeostasis,
}

impl ExperimentKind {
    pub fn axis(self) -> SweepAxis {
        match self {
            ExperimentKind::TempSweep => SweepAxis::Temperature,
            ExperimentKind::DepthSweep => SweepAxis::Depth,
            _ => SweepAxis::Beta,
        }
    }
}

/// The run parameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Beta,
    Temperature,
    Depth,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Temperature => "temperature",
            SweepAxis::Depth => "depth",
        }
    }

    pub fn value_of(self, row: &SweepRow) -> f64 {
        match self {
            SweepAxis::Beta => row.beta,
            SweepAxis::Temperature => row.temperature_init,
            SweepAxis::Depth => row.depth as f64,
        }
    }

    /// Guesses the varied parameter from the rows themselves.
    pub fn infer(rows: &[SweepRow]) -> Self {
        let distinct = |f: &dyn Fn(&SweepRow) -> String| rows.iter().map(f).collect::<HashSet<_>>().len() > 1;
        if distinct(&|r| r.depth.to_string()) {
            SweepAxis::Depth
        } else if distinct(&|r| r.temperature_init.to_string()) && !rows.iter().any(|r| r.temperature_trainable) {
            SweepAxis::Temperature
        } else {
            SweepAxis::Beta
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScenarioPolicy {
    /// Each entry lists the withheld factor names of one scenario.
    Explicit(Vec<Vec<String>>),
    Random { count: usize },
}

fn default_seeds() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub world: WorldConfig,
    pub scenarios: ScenarioPolicy,
    /// Values of the swept parameter (see [`ExperimentKind::axis`]).
    pub sweep: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Settings shared by every run; the swept field is overridden.
    #[serde(default)]
    pub train: TrainConfig,
    /// Output directory; the command line falls back to
    /// `<output root>/<name>`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("experiment name must be a non-empty file name"));
        }
        if self.sweep.is_empty() {
            return Err(Error::config("sweep list is empty"));
        }
        if self.sweep.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sweep values must be finite"));
        }
        if self.sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sweep values must be strictly increasing"));
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds must be >= 1"));
        }
        match self.kind.axis() {
            SweepAxis::Beta if self.sweep.iter().any(|&b| b < 0.0) => {
                return Err(Error::config("beta values must be >= 0"));
            }
            SweepAxis::Temperature if self.sweep.iter().any(|&t| t <= 0.0) => {
                return Err(Error::config("temperatures must be > 0"));
            }
            SweepAxis::Depth if self.sweep.iter().any(|&d| d < 1.0 || d.fract() != 0.0) => {
                return Err(Error::config("depths must be integers >= 1"));
            }
            _ => {}
        }
        match &self.scenarios {
            ScenarioPolicy::Explicit(list) if list.is_empty() => {
                return Err(Error::config("explicit scenario list is empty"));
            }
            ScenarioPolicy::Random { count: 0 } => return Err(Error::config("random scenario count must be >= 1")),
            _ => {}
        }
        self.train.validate()
    }

    /// Training configuration of one cell for seed index `seed`.
    fn run_config(&self, value: f64, train_seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = train_seed;
        match self.kind {
            ExperimentKind::TempSweep => {
                cfg.loss.temperature_init = value;
                cfg.loss.temperature_trainable = false;
            }
            ExperimentKind::DepthSweep => {
                let width = cfg.alpha_hidden.first().copied().unwrap_or(DEFAULT_WIDTH);
                cfg.alpha_hidden = vec![width; value as usize - 1];
            }
            ExperimentKind::BetaSweep => {
                cfg.loss.beta = value;
                cfg.loss.temperature_trainable = false;
            }
            ExperimentKind::Homeostasis => {
                cfg.loss.beta = value;
                cfg.loss.temperature_trainable = true;
            }
            ExperimentKind::UrrTable | ExperimentKind::AlignCorr => cfg.loss.beta = value,
        }
        cfg
    }
}

/// `count` scenarios whose withheld sets are drawn uniformly from the
/// nonempty proper subsets of the world's factors.
pub fn random_scenarios(world: &Arc<World>, count: usize, seed: u64) -> Result<Vec<Scenario>> {
    let f = world.factors().len();
    if f < 2 {
        return Err(Error::config("random scenarios need a world with at least two factors"));
    }
    if f > 62 {
        return Err(Error::config("random scenarios support at most 62 factors"));
    }
    if count == 0 {
        return Err(Error::config("scenario count must be >= 1"));
    }
    let mut rng = child_rng(seed, "scenarios");
    let top = (1u64 << f) - 2;
    (0..count)
        .map(|_| {
            let mask = rng.random_range(1..=top);
            let withheld = (0..f).filter(|i| mask >> i & 1 == 1).collect();
            Scenario::from_withheld_indices(world.clone(), withheld)
        })
        .collect()
}

/// One planned training run.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub run_id: String,
    pub scenario: Scenario,
    pub value: f64,
    pub seed_index: usize,
    pub config: TrainConfig,
}

/// Expands a spec into its runs (cells × seeds), in a fixed order.
///
/// Runs that differ only in the swept value share their training seed, so
/// each sweep is a paired comparison.
pub fn plan(spec: &ExperimentSpec) -> Result<Vec<RunPlan>> {
    spec.validate()?;
    let world = Arc::new(World::build(&spec.world)?);
    let scenarios = match &spec.scenarios {
        ScenarioPolicy::Explicit(list) => list
            .iter()
            .map(|w| {
                let names: Vec<&str> = w.iter().map(String::as_str).collect();
                Scenario::withholding(world.clone(), &names)
            })
            .collect::<Result<Vec<_>>>()?,
        ScenarioPolicy::Random { count } => random_scenarios(&world, *count, spec.base_seed)?,
    };
    let axis = spec.kind.axis();
    let mut runs = Vec::new();
    for (k, scenario) in scenarios.iter().enumerate() {
        let key = format!("{k}:{}", scenario.label());
        for &value in &spec.sweep {
            for s in 0..spec.seeds {
                let train_seed = stable_hash(spec.base_seed, &format!("{key}/seed{s}"));
                runs.push(RunPlan {
                    run_id: format!("{key}/{}={value}/seed{s}", axis.name()),
                    scenario: scenario.clone(),
                    value,
                    seed_index: s,
                    config: spec.run_config(value, train_seed),
                });
            }
        }
    }
    Ok(runs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::config(format!("precision must be 32 or 64, got {other}"))),
        }
    }
}

/// Trains and evaluates one planned run, never failing: errors become a
/// row with status `failed`. Per-epoch progress goes to `log` if given.
pub fn execute(plan: &RunPlan, precision: Precision, log: Option<&Path>) -> SweepRow {
    let start = Instant::now();
    let mut log_file = log.and_then(|p| fs::File::create(p).ok());
    if let Some(f) = log_file.as_mut() {
        let _ = writeln!(f, "# {}", plan.run_id);
        let _ = writeln!(f, "epoch,learning_rate,mean_loss,temperature");
    }
    let on_epoch = |r: &crate::training::EpochRecord| {
        if let Some(f) = log_file.as_mut() {
            let _ = writeln!(f, "{},{},{},{}", r.epoch, r.learning_rate, r.mean_loss, r.temperature);
        }
    };
    let result = match precision {
        Precision::F32 => train_with_log::<f32>(&plan.config, &plan.scenario, on_epoch).map(|r| r.report),
        Precision::F64 => train_with_log::<f64>(&plan.config, &plan.scenario, on_epoch).map(|r| r.report),
    };
    let world = plan.scenario.world();
    let factors: Vec<String> = world.factors().iter().map(|f| f.name.clone()).collect();
    let mut row = SweepRow {
        run_id: plan.run_id.clone(),
        world: world.name(),
        scenario: plan.scenario.label(),
        beta: plan.config.loss.beta,
        temperature_init: plan.config.loss.temperature_init,
        temperature_trainable: plan.config.loss.temperature_trainable,
        temperature_final: f64::NAN,
        depth: plan.config.alpha_depth(),
        seed: plan.seed_index as u64,
        urr: factors.iter().map(|f| (f.clone(), None)).collect(),
        urr_mean: f64::NAN,
        cka: f64::NAN,
        mi_essence: f64::NAN,
        essence_accuracy: f64::NAN,
        loss_final: f64::NAN,
        wall_seconds: 0.0,
        status: RunStatus::Failed,
        error: String::new(),
    };
    match result {
        Ok(report) => {
            for (name, v) in &report.urr {
                if let Some(slot) = row.urr.iter_mut().find(|(n, _)| n == name) {
                    slot.1 = Some(*v);
                }
            }
            row.urr_mean = report.urr_mean();
            row.temperature_final = report.temperature_final;
            row.cka = report.cka;
            row.mi_essence = report.mi_essence_nats;
            row.essence_accuracy = report.essence_accuracy;
            row.loss_final = report.loss_final;
            row.status = RunStatus::Ok;
        }
        Err(e) => {
            row.error = e.to_string();
            if let Some(f) = log_file.as_mut() {
                let _ = writeln!(f, "# failed: {e}");
            }
        }
    }
    row.wall_seconds = start.elapsed().as_secs_f64();
    row
}

/// Runner settings that are not part of the experiment itself.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub precision: Precision,
    /// Print one progress line per finished run to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub csv: PathBuf,
    pub planned: usize,
    pub skipped: usize,
    pub executed: usize,
    pub failed: usize,
    pub aggregates: Aggregates,
}

fn log_name(run_id: &str) -> String {
    run_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect::<String>()
        + ".log"
}

/// Runs every planned run not already present in `<out_dir>/runs.csv`,
/// then writes aggregates and plots next to it.
pub fn run_experiment(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunSummary> {
    let plans = plan(spec)?;
    let factors: Vec<String> = plans[0]
        .scenario
        .world()
        .factors()
        .iter()
        .map(|f| f.name.clone())
        .collect();
    let logs = opts.out_dir.join("logs");
    fs::create_dir_all(&logs)?;
    let spec_copy = serde_json::to_string_pretty(spec).map_err(|e| Error::config(e.to_string()))?;
    fs::write(opts.out_dir.join("spec.json"), spec_copy + "\n")?;

    let csv = opts.out_dir.join("runs.csv");
    let done: HashSet<String> = if csv.exists() {
        read_rows(&csv)?.1.into_iter().map(|r| r.run_id).collect()
    } else {
        HashSet::new()
    };
    let mut writer = RowWriter::open(&csv, &factors)?;
    let todo: Vec<&RunPlan> = plans.iter().filter(|p| !done.contains(&p.run_id)).collect();

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<SweepRow>();
    let workers = opts.workers.clamp(1, todo.len().max(1));
    let mut failed = 0;
    let mut write_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, todo, logs) = (&next, &todo, &logs);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(p) = todo.get(i) else { break };
                let row = execute(p, opts.precision, Some(&logs.join(log_name(&p.run_id))));
                if tx.send(row).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (k, row) in rx.iter().enumerate() {
            if !row.is_ok() {
                failed += 1;
            }
            if opts.verbose {
                eprintln!(
                    "[{}/{}] {} {} urr={:.3} cka={:.3} tau={:.4} ({:.1}s){}",
                    k + 1,
                    todo.len(),
                    row.run_id,
                    if row.is_ok() { "ok" } else { "FAILED" },
                    row.urr_mean,
                    row.cka,
                    row.temperature_final,
                    row.wall_seconds,
                    if row.error.is_empty() { String::new() } else { format!(": {}", row.error) }
                );
            }
            if write_error.is_none() {
                if let Err(e) = writer.append(&row) {
                    write_error = Some(e);
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                }
            }
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    let aggregates = report(&csv, &opts.out_dir, Some(spec.kind.axis()))?;
    Ok(RunSummary {
        csv,
        planned: plans.len(),
        skipped: plans.len() - todo.len(),
        executed: todo.len(),
        failed,
        aggregates,
    })
}

/// Metrics summarised per cell, in output column order.
pub const METRICS: [&str; 6] = [
    "urr_mean",
    "cka",
    "mi_essence",
    "essence_accuracy",
    "temperature_final",
    "loss_final",
];

fn metric(row: &SweepRow, name: &str) -> f64 {
    match name {
        "urr_mean" => row.urr_mean,
        "cka" => row.cka,
        "mi_essence" => row.mi_essence,
        "essence_accuracy" => row.essence_accuracy,
        "temperature_final" => row.temperature_final,
        "loss_final" => row.loss_final,
        _ => f64::NAN,
    }
}

/// Medians over the seeds of one (scenario, swept value) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAggregate {
    pub scenario: String,
    pub value: f64,
    pub runs: usize,
    pub failed: usize,
    /// Median of each entry of [`METRICS`]; NaN when no run succeeded.
    pub medians: Vec<f64>,
    /// Change of each median relative to the scenario's baseline cell.
    pub relative: Vec<Change>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregates {
    pub axis: SweepAxis,
    pub cells: Vec<CellAggregate>,
    /// Per factor: (swept value, median URR over every successful run that
    /// withholds the factor).
    pub factor_urr: Vec<(String, Vec<(f64, f64)>)>,
    /// Spearman correlation between cell medians of mean URR and CKA.
    pub spearman_urr_cka: Option<f64>,
}

impl Aggregates {
    pub fn cell(&self, scenario: &str, value: f64) -> Option<&CellAggregate> {
        self.cells.iter().find(|c| c.scenario == scenario && c.value == value)
    }

    pub fn median_of(&self, scenario: &str, value: f64, metric: &str) -> Option<f64> {
        let k = METRICS.iter().position(|m| *m == metric)?;
        self.cell(scenario, value).map(|c| c.medians[k])
    }
}

/// Cell medians, relative changes, per-factor URR curves and the URR–CKA
/// rank correlation. The baseline of a scenario is its cell with the
/// smallest swept value (β = 0 in a β sweep that includes it).
pub fn aggregate(rows: &[SweepRow], factors: &[String], axis: SweepAxis) -> Aggregates {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        let k = (r.scenario.clone(), axis.value_of(r));
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut cells: Vec<CellAggregate> = keys
        .iter()
        .map(|(scenario, value)| {
            let members: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| &r.scenario == scenario && axis.value_of(r) == *value)
                .collect();
            let ok: Vec<&&SweepRow> = members.iter().filter(|r| r.is_ok()).collect();
            let medians = METRICS
                .iter()
                .map(|m| median(&ok.iter().map(|r| metric(r, m)).collect::<Vec<_>>()).unwrap_or(f64::NAN))
                .collect();
            CellAggregate {
                scenario: scenario.clone(),
                value: *value,
                runs: members.len(),
                failed: members.len() - ok.len(),
                medians,
                relative: Vec::new(),
            }
        })
        .collect();
    let baselines: Vec<Vec<f64>> = cells
        .iter()
        .map(|c| {
            cells
                .iter()
                .filter(|b| b.scenario == c.scenario)
                .min_by(|a, b| a.value.total_cmp(&b.value))
                .map(|b| b.medians.clone())
                .unwrap_or_default()
        })
        .collect();
    for (c, base) in cells.iter_mut().zip(baselines) {
        c.relative = c.medians.iter().zip(&base).map(|(&v, &b)| relative_change(v, b)).collect();
    }

    let mut values: Vec<f64> = keys.iter().map(|k| k.1).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let factor_urr = factors
        .iter()
        .filter_map(|f| {
            let curve: Vec<(f64, f64)> = values
                .iter()
                .filter_map(|&v| {
                    let xs: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.is_ok() && axis.value_of(r) == v)
                        .filter_map(|r| r.urr_of(f))
                        .collect();
                    median(&xs).map(|m| (v, m))
                })
                .collect();
            (!curve.is_empty()).then(|| (f.clone(), curve))
        })
        .collect();

    let pairs: Vec<(f64, f64)> = cells
        .iter()
        .map(|c| (c.medians[0], c.medians[1]))
        .filter(|(u, k)| u.is_finite() && k.is_finite())
        .collect();
    let spearman_urr_cka = if pairs.len() >= 3 {
        let (u, k): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        spearman(&u, &k).ok()
    } else {
        None
    };
    Aggregates {
        axis,
        cells,
        factor_urr,
        spearman_urr_cka,
    }
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Writes `aggregates.csv`, `factor_urr.csv`, `summary.json` and SVG plots
/// into `dir`.
pub fn write_aggregates(agg: &Aggregates, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let axis = agg.axis.name();
    let mut header = vec!["scenario".to_string(), axis.to_string(), "runs".into(), "failed".into()];
    header.extend(METRICS.iter().map(|m| format!("median_{m}")));
    for m in METRICS {
        header.push(format!("rel_{m}"));
        header.push(format!("rel_{m}_absolute"));
    }
    let rows: Vec<Vec<String>> = agg
        .cells
        .iter()
        .map(|c| {
            let mut r = vec![c.scenario.clone(), fmt(c.value), c.runs.to_string(), c.failed.to_string()];
            r.extend(c.medians.iter().map(|&m| fmt(m)));
            for ch in &c.relative {
                r.push(fmt(ch.value));
                r.push(u8::from(ch.absolute).to_string());
            }
            r
        })
        .collect();
    write_table(fs::File::create(dir.join("aggregates.csv"))?, &header, &rows)?;

    let factor_rows: Vec<Vec<String>> = agg
        .factor_urr
        .iter()
        .flat_map(|(f, curve)| curve.iter().map(move |(v, u)| vec![f.clone(), fmt(*v), fmt(*u)]))
        .collect();
    write_table(
        fs::File::create(dir.join("factor_urr.csv"))?,
        &["factor".into(), axis.into(), "median_urr".into()],
        &factor_rows,
    )?;

    let summary = serde_json::json!({
        "axis": axis,
        "cells": agg.cells.len(),
        "runs": agg.cells.iter().map(|c| c.runs).sum::<usize>(),
        "failed": agg.cells.iter().map(|c| c.failed).sum::<usize>(),
        "spearman_urr_cka": agg.spearman_urr_cka,
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::config(e.to_string()))? + "\n",
    )?;

    let x_label = match agg.axis {
        SweepAxis::Beta => "beta",
        SweepAxis::Temperature => "temperature",
        SweepAxis::Depth => "number of layers",
    };
    let series: Vec<Series> = agg.factor_urr.iter().map(|(f, c)| Series::new(f.clone(), c.clone())).collect();
    if !series.is_empty() {
        emit_plot(&series, PlotKind::Line, x_label, "URR", &dir.join("urr_by_factor.svg"))?;
    }
    let scatter: Vec<(f64, f64)> = agg
        .cells
        .iter()
        .map(|c| (c.medians[0], c.medians[1]))
        .filter(|(u, k)| u.is_finite() && k.is_finite())
        .collect();
    if !scatter.is_empty() {
        emit_plot(
            &[Series::new("cells", scatter)],
            PlotKind::Scatter,
            "URR (mean over withheld factors)",
            "alignment (CKA)",
            &dir.join("cka_vs_urr.svg"),
        )?;
    }
    let mut scenarios: Vec<&str> = agg.cells.iter().map(|c| c.scenario.as_str()).collect();
    scenarios.dedup();
    for (k, m) in METRICS.iter().enumerate() {
        let series: Vec<Series> = scenarios
            .iter()
            .map(|s| {
                let pts = agg
                    .cells
                    .iter()
                    .filter(|c| c.scenario == *s)
                    .map(|c| (c.value, c.relative[k].value))
                    .collect();
                Series::new(*s, pts)
            })
            .filter(|s| s.points.iter().any(|p| p.1.is_finite()))
            .collect();
        if !series.is_empty() {
            emit_plot(
                &series,
                PlotKind::Line,
                x_label,
                &format!("relative change of {m}"),
                &dir.join(format!("relchange_{m}.svg")),
            )?;
        }
    }
    Ok(())
}

/// Recomputes aggregates from a runs file alone and writes them to `dir`.
/// The axis comes from `axis`, else from a `spec.json` beside the file,
/// else from the rows.
pub fn report(csv: &Path, dir: &Path, axis: Option<SweepAxis>) -> Result<Aggregates> {
    let (factors, rows) = read_rows(csv)?;
    if rows.is_empty() {
        return Err(Error::config(format!("{} has no rows", csv.display())));
    }
    let axis = axis
        .or_else(|| {
            let spec = csv.parent()?.join("spec.json");
            let text = fs::read_to_string(spec).ok()?;
            serde_json::from_str::<ExperimentSpec>(&text).ok().map(|s| s.kind.axis())
        })
        .unwrap_or_else(|| SweepAxis::infer(&rows));
    let agg = aggregate(&rows, &factors, axis);
    write_aggregates(&agg, dir)?;
    Ok(agg)
}

/// Runs a single training configuration outside any sweep, returning its
/// row (used for reproducibility checks).
pub fn single_run<T: Scalar>(config: &TrainConfig, scenario: &Scenario, run_id: &str) -> SweepRow {
    let plan = RunPlan {
        run_id: run_id.to_string(),
        scenario: scenario.clone(),
        value: config.loss.beta,
        seed_index: 0,
        config: config.clone(),
    };
    let precision = if T::BITS == 32 { Precision::F32 } else { Precision::F64 };
    execute(&plan, precision, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::WorldConfig;

    fn spec(kind: ExperimentKind, sweep: Vec<f64>) -> ExperimentSpec {
        ExperimentSpec {
            name: "t".into(),
            kind,
            world: WorldConfig::minisprites(0),
            scenarios: ScenarioPolicy::Explicit(vec![vec!["posX".into()]]),
            sweep,
            seeds: 2,
            base_seed: 0,
            train: TrainConfig::default(),
            out_dir: None,
        }
    }

    #[test]
    fn empty_or_unsorted_sweep_is_rejected() {
        assert!(matches!(plan(&spec(ExperimentKind::BetaSweep, vec![])), Err(Error::Config(_))));
        assert!(spec(ExperimentKind::BetaSweep, vec![0.1, 0.0]).validate().is_err());
        assert!(spec(ExperimentKind::DepthSweep, vec![1.5]).validate().is_err());
        assert!(spec(ExperimentKind::TempSweep, vec![0.0, 0.1]).validate().is_err());
    }

    #[test]
    fn plan_expands_cells_and_seeds() {
        let runs = plan(&spec(ExperimentKind::BetaSweep, vec![0.0, 0.1, 0.3])).unwrap();
        assert_eq!(runs.len(), 6);
        let ids: HashSet<_> = runs.iter().map(|r| r.run_id.clone()).collect();
        assert_eq!(ids.len(), 6);
        assert!(runs.iter().all(|r| !r.config.loss.temperature_trainable));
        // paired: same seed index, same training seed across β
        assert_eq!(runs[0].config.seed, runs[2].config.seed);
        assert_ne!(runs[0].config.seed, runs[1].config.seed);
    }

    #[test]
    fn depth_and_temperature_overrides() {
        let runs = plan(&spec(ExperimentKind::DepthSweep, vec![1.0, 5.0])).unwrap();
        assert_eq!(runs[0].config.alpha_depth(), 1);
        assert_eq!(runs[2].config.alpha_depth(), 5);
        let runs = plan(&spec(ExperimentKind::TempSweep, vec![0.01, 0.5])).unwrap();
        assert_eq!(runs[2].config.loss.temperature_init, 0.5);
        assert!(!runs[2].config.loss.temperature_trainable);
    }

    #[test]
    fn spec_parses_from_json() {
        let s = ExperimentSpec::from_json(
            r#"{"name": "b", "kind": "beta-sweep", "world": {"kind": "minisprites"},
                "scenarios": {"random": {"count": 3}}, "sweep": [0, 0.1],
                "train": {"epochs": 2}}"#,
        )
        .unwrap();
        assert_eq!(s.seeds, 5);
        assert_eq!(s.train.epochs, 2);
        assert!(ExperimentSpec::from_json(r#"{"name": "b", "kind": "nope"}"#).is_err());
    }

    #[test]
    fn random_scenarios_are_proper_and_reproducible() {
        let world = Arc::new(World::build(&WorldConfig::minisprites(0)).unwrap());
        let a = random_scenarios(&world, 200, 3).unwrap();
        let b = random_scenarios(&world, 200, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.withheld(), y.withheld());
            assert!((1..=4).contains(&x.withheld().len()));
        }
    }
}
