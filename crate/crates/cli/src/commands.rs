//! Command-line surface: argument definitions and one function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mixtrade::backtest::{equity_curve_svg, parse_metrics_text, Metrics};
use mixtrade::checkpoint::Checkpoint;
use mixtrade::marketdata::{write_csv, Sample, FEATURE_NAMES};

use crate::config::RunConfig;
use crate::experiments::{
    ablation_table, axis_variants, expert_sweep, grid_search, grid_table, mean_std, run_variants, component_variants,
    Axis, Grid, Variant,
};
use crate::pipeline::{backtest, load_market, prepare, train_run, write_backtest, write_training};

#[derive(Debug, Parser)]
#[command(name = "mixtrade", version, about = "Mixture-of-experts stock selection: train, route, backtest")]
pub struct Cli {
    /// Worker threads for parallel experiment cells (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build feature windows and labels and write them as CSV.
    Featurize(FeaturizeArgs),
    /// Train experts (and routers unless disabled) for every seed.
    Train(CommonArgs),
    /// Run the top-k strategy with trained checkpoints.
    Backtest(BacktestArgs),
    /// Compare component toggles across seeds.
    Ablate(AblateArgs),
    /// Pick hyper-parameters by validation total return, then test the winner.
    Gridsearch(GridArgs),
    /// Aggregate metrics files and render equity curves under a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.n_experts=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seed list; replaces `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        resolve_config(self.config.as_deref(), &self.overrides, &self.seeds)
    }
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Also write the raw market bars as one CSV per stock under `market/`.
    #[arg(long)]
    pub export_market: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// A single checkpoint file.
    #[arg(long, conflicts_with = "run_dir", required_unless_present = "run_dir")]
    pub checkpoint: Option<PathBuf>,
    /// A `train` output directory; every `seed_*/checkpoint.json` is tested.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Config for rebuilding the data; defaults to the run directory's snapshot.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Components,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// The six component rows at the configured expert count.
    #[arg(long, value_enum, conflicts_with_all = ["axes", "expert_sweep"])]
    pub preset: Option<Preset>,
    /// Comma-separated subset of experts,multi_task,uncertainty,router.
    #[arg(long, value_delimiter = ',', conflicts_with = "expert_sweep")]
    pub axes: Vec<Axis>,
    /// Expert counts as `lo..hi` (inclusive), e.g. `2..8`.
    #[arg(long, value_parser = parse_range)]
    pub expert_sweep: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// TOML file with any of `n_experts`, `lambda`, `hidden`, `lr` arrays.
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected lo..hi, got `{s}`"))?;
    let lo: usize = lo.trim().parse().map_err(|e| format!("range start: {e}"))?;
    let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|e| format!("range end: {e}"))?;
    if lo == 0 || hi < lo {
        return Err(format!("range {lo}..{hi} must be non-empty and start at 1 or more"));
    }
    Ok((lo, hi))
}

pub fn resolve_config(path: Option<&Path>, overrides: &[String], seeds: &[u64]) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        config.apply_override(o)?;
    }
    if !seeds.is_empty() {
        config.run.seeds = seeds.to_vec();
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Featurize(a) => cmd_featurize(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Backtest(a) => cmd_backtest(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gridsearch(a) => cmd_gridsearch(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn write_snapshot(dir: &Path, config: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("config.toml"), config.to_toml())
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn samples_csv(samples: &[Sample], split: &str, window: usize) -> String {
    let mut out = String::from("stock,date,label_date,split,y,r");
    for lag in (0..=window).rev() {
        for name in FEATURE_NAMES {
            let _ = write!(out, ",{name}_lag{lag}");
        }
    }
    out.push('\n');
    for s in samples {
        let _ = write!(out, "{},{},{},{split},{},{}", s.stock, s.date, s.label_date, s.y, s.r);
        for v in s.flatten() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_featurize(args: &FeaturizeArgs) -> Result<()> {
    let config = args.common.resolve()?;
    let out = &args.common.out;
    write_snapshot(out, &config)?;
    for &seed in &config.run.seeds {
        let dir = seed_dir(out, seed);
        create_dir(&dir)?;
        if args.export_market {
            let frame = load_market(&config, seed)?;
            write_csv(&frame, dir.join("market"))?;
        }
        let data = prepare(&config, seed)?;
        write(&dir.join("manifest.txt"), data.manifest().to_text())?;
        let k = data.config.window;
        write(&dir.join("train.csv"), samples_csv(&data.train, "train", k))?;
        write(&dir.join("valid.csv"), samples_csv(&data.valid, "valid", k))?;
        write(&dir.join("test.csv"), samples_csv(data.test.open(), "test", k))?;
        log::info!("seed {seed}: features written to {}", dir.display());
    }
    Ok(())
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let config = args.resolve()?;
    write_snapshot(&args.out, &config)?;
    for &seed in &config.run.seeds {
        let data = prepare(&config, seed)?;
        let run = train_run(&config, &data, seed)?;
        let dir = seed_dir(&args.out, seed);
        write_training(&dir, &run, &data.manifest())?;
        write_snapshot(&dir, &config)?;
        log::info!("seed {seed}: checkpoint written to {}", dir.display());
    }
    Ok(())
}

pub fn cmd_backtest(args: &BacktestArgs) -> Result<()> {
    let checkpoints: Vec<PathBuf> = match (&args.checkpoint, &args.run_dir) {
        (Some(c), _) => vec![c.clone()],
        (None, Some(dir)) => {
            let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path().join("checkpoint.json")))
                .filter(|p| p.is_file())
                .collect();
            found.sort();
            if found.is_empty() {
                bail!("no seed_*/checkpoint.json under {}", dir.display());
            }
            found
        }
        (None, None) => bail!("either --checkpoint or --run-dir is required"),
    };
    let snapshot = match (&args.config, &args.run_dir, &args.checkpoint) {
        (Some(p), _, _) => Some(p.clone()),
        (None, Some(dir), _) => Some(dir.join("config.toml")),
        (None, None, Some(c)) => c.parent().map(|d| d.join("config.toml")).filter(|p| p.is_file()),
        (None, None, None) => None,
    };
    let mut config = resolve_config(snapshot.as_deref(), &args.overrides, &[])?;
    if let Some(k) = args.top_k {
        config.backtest.top_k = k;
        config.validate()?;
    }
    write_snapshot(&args.out, &config)?;
    let split = match args.split {
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
    };
    let mut rows = Vec::new();
    for path in &checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let data = prepare(&config, ckpt.seed)?;
        ckpt.check_data(&data.config, &data.normalizer)
            .with_context(|| format!("checkpoint {} does not match the data", path.display()))?;
        let samples = match args.split {
            SplitArg::Valid => &data.valid,
            SplitArg::Test => data.test.open(),
        };
        let report = backtest(&config, &ckpt, samples)?;
        let dir = seed_dir(&args.out, ckpt.seed).join(split);
        write_backtest(&dir, &report, &format!("seed {} {split}", ckpt.seed))?;
        write_snapshot(&dir, &config)?;
        log::info!("seed {}: {split} TR={:.6} SR={:.6}", ckpt.seed, report.metrics.tr, report.metrics.sr);
        rows.push(report.metrics.values());
    }
    write(&args.out.join("aggregate.txt"), aggregate_text(&rows))
}

fn aggregate_text(rows: &[[f64; 5]]) -> String {
    let mut out = format!("n={}\n", rows.len());
    for (j, name) in Metrics::NAMES.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let (m, s) = mean_std(&col);
        let _ = writeln!(out, "{name}.mean={m}");
        let _ = writeln!(out, "{name}.std={s}");
    }
    out
}

fn ablation_variants(args: &AblateArgs, base: &RunConfig) -> Result<Vec<Variant>> {
    if let Some((lo, hi)) = args.expert_sweep {
        return Ok(expert_sweep(base, lo..=hi));
    }
    if !args.axes.is_empty() {
        return Ok(axis_variants(base, &args.axes));
    }
    match args.preset {
        Some(Preset::Components) | None => {
            if base.model.n_experts < 2 {
                bail!("invalid config field `model.n_experts`: the component table needs at least 2 experts");
            }
            Ok(component_variants(base.model.n_experts))
        }
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = args.common.resolve()?;
    let variants = ablation_variants(args, &base)?;
    let out = &args.common.out;
    write_snapshot(out, &base)?;
    log::info!("{} variants x {} seeds", variants.len(), base.run.seeds.len());
    let results = run_variants(&base, &variants)?;
    for (i, r) in results.iter().enumerate() {
        let dir = out.join(format!("variant_{i}"));
        write_snapshot(&dir, &r.variant.apply(&base))?;
        for cell in &r.cells {
            let sd = seed_dir(&dir, cell.seed);
            write_backtest(&sd.join("test"), &cell.test, &format!("{} seed {}", r.variant.label(), cell.seed))?;
        }
        write(&dir.join("aggregate.txt"), r.aggregate.to_text())?;
    }
    write(&out.join("ablation.csv"), ablation_table(&results))
}

pub fn cmd_gridsearch(args: &GridArgs) -> Result<()> {
    let base = args.common.resolve()?;
    let grid: Grid = match &args.grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading grid {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing grid {}", p.display()))?
        }
        None => Grid::default(),
    };
    let out = &args.common.out;
    write_snapshot(out, &base)?;
    write(&out.join("grid.toml"), toml::to_string(&grid).context("serializing grid")?)?;
    let outcome = grid_search(&base, &grid)?;
    write(&out.join("gridsearch.csv"), grid_table(&outcome))?;
    write(&out.join("best.toml"), outcome.best_config.to_toml())?;
    let test_dir = out.join("test");
    write_snapshot(&test_dir, &outcome.best_config)?;
    for (seed, report) in &outcome.test_reports {
        write_backtest(&seed_dir(&test_dir, *seed), report, &format!("best cell seed {seed}"))?;
    }
    write(&test_dir.join("aggregate.txt"), outcome.test_aggregate.to_text())?;
    log::info!(
        "best cell {:?}, test TR mean {}",
        outcome.cells[outcome.best].cell,
        outcome.test_aggregate.mean[0]
    );
    Ok(())
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|f| f == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_equity_csv(path: &Path) -> Result<(Vec<chrono::NaiveDate>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut dates = Vec::new();
    let mut values = vec![1.0];
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split(',');
        let (Some(d), Some(v)) = (fields.next(), fields.next()) else {
            bail!("{}:{}: expected date,net_value", path.display(), i + 1);
        };
        dates.push(d.parse().with_context(|| format!("{}:{}: date", path.display(), i + 1))?);
        values.push(v.parse().with_context(|| format!("{}:{}: net_value", path.display(), i + 1))?);
    }
    Ok((dates, values))
}

/// Every `metrics.txt` under `dir`, relative path first.
pub fn collect_metrics(dir: &Path) -> Result<Vec<(String, BTreeMap<String, f64>)>> {
    let mut files = Vec::new();
    find_files(dir, "metrics.txt", &mut files)?;
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let values = parse_metrics_text(&text)
                .map_err(|e| anyhow::anyhow!(e))
                .with_context(|| format!("parsing {}", p.display()))?;
            let rel = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
            Ok((rel, values))
        })
        .collect()
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let reports = collect_metrics(&args.dir)?;
    if reports.is_empty() {
        bail!("no metrics.txt files under {}", args.dir.display());
    }
    let mut table = String::from("file");
    for name in Metrics::NAMES {
        let _ = write!(table, ",{name}");
    }
    table.push('\n');
    let mut rows = Vec::with_capacity(reports.len());
    for (rel, values) in &reports {
        let mut row = [f64::NAN; 5];
        let _ = write!(table, "{rel}");
        for (j, name) in Metrics::NAMES.iter().enumerate() {
            row[j] = *values
                .get(*name)
                .with_context(|| format!("{rel} has no `{name}` entry"))?;
            let _ = write!(table, ",{}", row[j]);
        }
        table.push('\n');
        rows.push(row);
    }
    write(&args.dir.join("reports.csv"), table)?;
    write(&args.dir.join("aggregate.txt"), aggregate_text(&rows))?;

    let mut curves = Vec::new();
    find_files(&args.dir, "equity.csv", &mut curves)?;
    for path in curves {
        let (dates, values) = read_equity_csv(&path)?;
        let dir = path.parent().unwrap_or(&args.dir);
        let title = dir.strip_prefix(&args.dir).unwrap_or(dir).display().to_string();
        write(&dir.join("equity.svg"), equity_curve_svg(&dates, &values, &title))?;
    }
    Ok(())
}
