//! Multi-seed aggregation, ablation tables and validation-driven grid search.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mixtrade::backtest::{BacktestReport, Metrics};

use crate::config::{AblationSection, RunConfig};
use crate::pipeline::{backtest, prepare, train_run, PreparedData, TrainedRun};

/// Mean and sample standard deviation per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl Aggregate {
    pub fn from_metrics(metrics: &[Metrics]) -> Self {
        let rows: Vec<[f64; 5]> = metrics.iter().map(Metrics::values).collect();
        Self::from_rows(&rows)
    }

    pub fn from_rows(rows: &[[f64; 5]]) -> Self {
        let n = rows.len();
        let mut mean = [f64::NAN; 5];
        let mut std = [f64::NAN; 5];
        for j in 0..5 {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let (m, s) = mean_std(&col);
            mean[j] = m;
            std[j] = s;
        }
        Self { n, mean, std }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("n={}\n", self.n);
        for (j, name) in Metrics::NAMES.iter().enumerate() {
            let _ = writeln!(out, "{name}.mean={}", self.mean[j]);
            let _ = writeln!(out, "{name}.std={}", self.std[j]);
        }
        out
    }
}

/// Mean and sample (n − 1) standard deviation; the deviation of one value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One ablation row: an expert count and component toggles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub n_experts: usize,
    pub ablation: AblationSection,
}

impl Variant {
    pub fn label(&self) -> String {
        let a = &self.ablation;
        let mark = |on: bool, tag: &str| if on { tag.to_string() } else { "-".to_string() };
        format!(
            "{}|{}|{}|{}{}",
            self.n_experts,
            mark(a.multi_task, "MT"),
            mark(a.uncertainty, "U"),
            mark(a.router, "R"),
            if a.collaborative { "|C" } else { "" }
        )
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.n_experts = self.n_experts;
        c.ablation = self.ablation;
        c
    }

    fn new(n_experts: usize, multi_task: bool, uncertainty: bool, router: bool) -> Self {
        Self {
            n_experts,
            ablation: AblationSection {
                multi_task,
                uncertainty,
                router,
                collaborative: false,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Experts,
    MultiTask,
    Uncertainty,
    Router,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "experts" => Ok(Axis::Experts),
            "multi_task" | "multitask" => Ok(Axis::MultiTask),
            "uncertainty" => Ok(Axis::Uncertainty),
            "router" => Ok(Axis::Router),
            other => Err(format!(
                "unknown ablation axis `{other}` (experts|multi_task|uncertainty|router)"
            )),
        }
    }
}

/// The six component rows: single expert with and without multi-task, then
/// `n` experts adding multi-task, uncertainty and routers in turn.
pub fn component_variants(n: usize) -> Vec<Variant> {
    vec![
        Variant::new(1, false, false, false),
        Variant::new(1, true, false, false),
        Variant::new(n, false, false, false),
        Variant::new(n, true, false, false),
        Variant::new(n, true, true, false),
        Variant::new(n, true, true, true),
    ]
}

/// Cross product over the chosen axes, other settings taken from `base`.
/// Single-expert rows cannot use uncertainty losses or routers, so those
/// combinations are dropped.
pub fn axis_variants(base: &RunConfig, axes: &[Axis]) -> Vec<Variant> {
    let choices = |axis: Axis, current: bool| -> Vec<bool> {
        if axes.contains(&axis) {
            vec![false, true]
        } else {
            vec![current]
        }
    };
    let n = base.model.n_experts;
    let experts = if axes.contains(&Axis::Experts) {
        vec![1, n.max(2)]
    } else {
        vec![n]
    };
    let a = base.ablation;
    let mut out = Vec::new();
    for &e in &experts {
        for mt in choices(Axis::MultiTask, a.multi_task) {
            for u in choices(Axis::Uncertainty, a.uncertainty) {
                for r in choices(Axis::Router, a.router) {
                    if e == 1 && (u || r) && (axes.contains(&Axis::Uncertainty) || axes.contains(&Axis::Router)) {
                        continue;
                    }
                    let (u, r) = if e == 1 { (false, false) } else { (u, r) };
                    let v = Variant {
                        n_experts: e,
                        ablation: AblationSection {
                            multi_task: mt,
                            uncertainty: u,
                            router: r,
                            collaborative: a.collaborative,
                        },
                    };
                    if !out.contains(&v) {
                        out.push(v);
                    }
                }
            }
        }
    }
    out
}

/// The base configuration at every expert count in `range`.
pub fn expert_sweep(base: &RunConfig, range: std::ops::RangeInclusive<usize>) -> Vec<Variant> {
    range
        .map(|n| Variant {
            n_experts: n,
            ablation: base.ablation,
        })
        .collect()
}

/// Outcome of one variant on one seed.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub seed: u64,
    pub run: TrainedRun,
    pub test: BacktestReport,
}

impl CellResult {
    pub fn experts_used(&self) -> f64 {
        let v = &self.test.experts_used_mean;
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub cells: Vec<CellResult>,
    pub aggregate: Aggregate,
    pub experts_used: f64,
}

/// Trains and tests every variant on every seed, in parallel. Results keep
/// variant and seed order.
pub fn run_variants(base: &RunConfig, variants: &[Variant]) -> Result<Vec<VariantResult>> {
    let seeds = base.run.seeds.clone();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let cells: Vec<Result<CellResult>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let config = variants[v].apply(base);
            config.validate()?;
            let data = prepare(&config, seed)?;
            let run = train_run(&config, &data, seed)?;
            let test = backtest(&config, &run.checkpoint, data.test.open())?;
            Ok(CellResult { seed, run, test })
        })
        .collect();
    let mut cells = cells.into_iter();
    let mut out = Vec::with_capacity(variants.len());
    for variant in variants {
        let group: Vec<CellResult> = cells.by_ref().take(seeds.len()).collect::<Result<_>>()?;
        let metrics: Vec<Metrics> = group.iter().map(|c| c.test.metrics).collect();
        let used: Vec<f64> = group.iter().map(CellResult::experts_used).collect();
        out.push(VariantResult {
            variant: variant.clone(),
            aggregate: Aggregate::from_metrics(&metrics),
            experts_used: mean_std(&used).0,
            cells: group,
        });
    }
    Ok(out)
}

/// CSV table with one row per variant: means and standard deviations.
pub fn ablation_table(results: &[VariantResult]) -> String {
    let mut out = String::from("variant,n_experts,multi_task,uncertainty,router,collaborative,seeds");
    for name in Metrics::NAMES {
        let _ = write!(out, ",{name}_mean,{name}_std");
    }
    out.push_str(",experts_used_mean\n");
    for r in results {
        let a = &r.variant.ablation;
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant.label(),
            r.variant.n_experts,
            a.multi_task,
            a.uncertainty,
            a.router,
            a.collaborative,
            r.aggregate.n
        );
        for j in 0..5 {
            let _ = write!(out, ",{},{}", r.aggregate.mean[j], r.aggregate.std[j]);
        }
        let _ = writeln!(out, ",{}", r.experts_used);
    }
    out
}

/// Hyper-parameter axes searched by [`grid_search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub n_experts: Vec<usize>,
    pub lambda: Vec<f64>,
    pub hidden: Vec<usize>,
    pub lr: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n_experts: (2..=8).collect(),
            lambda: vec![0.1, 0.5, 1.0, 5.0, 10.0],
            hidden: vec![16, 32, 64],
            lr: vec![1e-5, 1e-4, 1e-3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub n_experts: usize,
    pub lambda: f64,
    pub hidden: usize,
    pub lr: f64,
}

impl Grid {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &n_experts in &self.n_experts {
            for &lambda in &self.lambda {
                for &hidden in &self.hidden {
                    for &lr in &self.lr {
                        out.push(GridCell {
                            n_experts,
                            lambda,
                            hidden,
                            lr,
                        });
                    }
                }
            }
        }
        out
    }
}

impl GridCell {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.n_experts = self.n_experts;
        c.model.lambda = self.lambda;
        c.model.backbone = vec![self.hidden; base.model.backbone.len().max(1)];
        c.model.expert_hidden = self.hidden;
        c.train.lr = self.lr;
        c
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub cell: GridCell,
    /// Mean validation total return over seeds, or the failure message.
    pub valid_tr: Result<f64, String>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub cells: Vec<CellOutcome>,
    pub best: usize,
    pub best_config: RunConfig,
    /// Test-split reads that happened before the winner was fixed.
    pub test_reads_during_selection: usize,
    pub test_reports: Vec<(u64, BacktestReport)>,
    pub test_aggregate: Aggregate,
}

/// Scores every cell by mean validation total return, then tests the winner
/// once. Cells that fail to train (for example by diverging) are skipped.
pub fn grid_search(base: &RunConfig, grid: &Grid) -> Result<GridOutcome> {
    let cells = grid.cells();
    if cells.is_empty() {
        bail!("grid search needs at least one cell; every grid axis must be non-empty");
    }
    let seeds = base.run.seeds.clone();
    let data: Vec<PreparedData> = seeds
        .iter()
        .map(|&s| prepare(base, s))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let scored: Vec<Result<(f64, TrainedRun), String>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let config = cells[c].apply(base);
            config.validate().map_err(|e| format!("{e:#}"))?;
            let run = train_run(&config, &data[s], seeds[s]).map_err(|e| format!("{e:#}"))?;
            let report = backtest(&config, &run.checkpoint, &data[s].valid).map_err(|e| format!("{e:#}"))?;
            if !report.metrics.tr.is_finite() {
                return Err(format!("validation total return is {}", report.metrics.tr));
            }
            Ok((report.metrics.tr, run))
        })
        .collect();

    let mut outcomes = Vec::with_capacity(cells.len());
    let mut runs: Vec<Option<Vec<TrainedRun>>> = Vec::with_capacity(cells.len());
    let mut scored = scored.into_iter();
    for cell in &cells {
        let group: Result<Vec<(f64, TrainedRun)>, String> = scored.by_ref().take(seeds.len()).collect();
        match group {
            Ok(group) => {
                let trs: Vec<f64> = group.iter().map(|(tr, _)| *tr).collect();
                outcomes.push(CellOutcome {
                    cell: *cell,
                    valid_tr: Ok(mean_std(&trs).0),
                });
                runs.push(Some(group.into_iter().map(|(_, r)| r).collect()));
            }
            Err(e) => {
                log::warn!("grid cell {cell:?} skipped: {e}");
                outcomes.push(CellOutcome {
                    cell: *cell,
                    valid_tr: Err(e),
                });
                runs.push(None);
            }
        }
    }
    let best = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.valid_tr.as_ref().ok().map(|tr| (i, *tr)))
        .fold(None::<(usize, f64)>, |acc, (i, tr)| match acc {
            Some((_, b)) if b >= tr => acc,
            _ => Some((i, tr)),
        })
        .map(|(i, _)| i);
    let Some(best) = best else {
        bail!("every grid cell failed; see warnings for the individual errors");
    };
    let test_reads_during_selection = data.iter().map(|d| d.test.reads()).sum();
    let best_config = cells[best].apply(base);
    let winners = runs[best].take().expect("winning cell has runs");
    let mut test_reports = Vec::with_capacity(seeds.len());
    for (d, run) in data.iter().zip(&winners) {
        let report = backtest(&best_config, &run.checkpoint, d.test.open())?;
        test_reports.push((run.checkpoint.seed, report));
    }
    let metrics: Vec<Metrics> = test_reports.iter().map(|(_, r)| r.metrics).collect();
    Ok(GridOutcome {
        cells: outcomes,
        best,
        best_config,
        test_reads_during_selection,
        test_aggregate: Aggregate::from_metrics(&metrics),
        test_reports,
    })
}

pub fn grid_table(outcome: &GridOutcome) -> String {
    let mut out = String::from("cell,n_experts,lambda,hidden,lr,status,valid_tr_mean,selected\n");
    for (i, o) in outcome.cells.iter().enumerate() {
        let (status, tr) = match &o.valid_tr {
            Ok(tr) => ("ok", tr.to_string()),
            Err(_) => ("failed", String::new()),
        };
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{status},{tr},{}",
            o.cell.n_experts,
            o.cell.lambda,
            o.cell.hidden,
            o.cell.lr,
            i == outcome.best
        );
    }
    out
}
