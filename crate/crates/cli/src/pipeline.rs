//! Single-seed orchestration: data, Stage 1, Stage 2, signals and backtest.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{Context, Result};
use rand::Rng;

use mixtrade::backtest::{
    equity_svg, realized_returns, run_strategy, signals_from_model, write_report, BacktestReport,
};
use mixtrade::checkpoint::Checkpoint;
use mixtrade::marketdata::{
    build_dataset, load_csv, synth_market_with, Dataset, DatasetConfig, Manifest, MarketFrame, Normalizer, Sample,
    SplitSpec,
};
use mixtrade::moe::{train_stage1, MoEModel, SampleMatrix, TrainLog};
use mixtrade::router::{train_stage2, RouterBank, RouterLog};
use mixtrade::seed::{component_rng, Component};

use crate::config::{DataSource, RunConfig};

/// A value that is counted every time it is read, so experiments can prove
/// they never looked at it.
#[derive(Debug)]
pub struct HeldOut<T> {
    value: T,
    reads: AtomicUsize,
}

impl<T> HeldOut<T> {
    pub fn new(value: T) -> Self {
        Self {
            value,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn open(&self) -> &T {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.value
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

/// Samples for one seed with the test split held out.
#[derive(Debug)]
pub struct PreparedData {
    pub config: DatasetConfig,
    pub split: SplitSpec,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: HeldOut<Vec<Sample>>,
    pub normalizer: Normalizer,
    test_count: usize,
}

impl PreparedData {
    pub fn from_dataset(d: Dataset) -> Self {
        Self {
            config: d.config,
            split: d.split,
            test_count: d.test.len(),
            train: d.train,
            valid: d.valid,
            test: HeldOut::new(d.test),
            normalizer: d.normalizer,
        }
    }

    pub fn input_dim(&self) -> usize {
        (self.config.window + 1) * mixtrade::marketdata::FEATURE_COUNT
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            window: self.config.window,
            horizon: self.config.horizon,
            split: self.split,
            counts: [self.train.len(), self.valid.len(), self.test_count],
            normalizer: self.normalizer.clone(),
        }
    }
}

/// Seed of the synthetic market used by run seed `seed`.
pub fn market_seed(config: &RunConfig, seed: u64) -> u64 {
    config
        .data
        .synth
        .market_seed
        .unwrap_or_else(|| component_rng(seed, Component::Market).random())
}

pub fn load_market(config: &RunConfig, seed: u64) -> Result<MarketFrame> {
    let d = &config.data;
    match d.source {
        DataSource::Synth => Ok(synth_market_with(
            market_seed(config, seed),
            d.synth.stocks,
            d.synth.days,
            d.synth.regime,
            &d.synth.params,
        )?),
        DataSource::Csv => {
            let path = d.csv_path.as_ref().context("data.csv_path is not set")?;
            load_csv(path).with_context(|| format!("loading market data from {}", path.display()))
        }
    }
}

pub fn prepare(config: &RunConfig, seed: u64) -> Result<PreparedData> {
    let frame = load_market(config, seed)?;
    let split = match (config.data.valid_start, config.data.test_start) {
        (Some(v), Some(t)) => SplitSpec::new(v, t)?,
        _ => SplitSpec::by_fraction(frame.calendar(), config.data.train_fraction, config.data.valid_fraction)?,
    };
    let dataset = build_dataset(&frame, config.dataset_config(), split).context("building samples")?;
    Ok(PreparedData::from_dataset(dataset))
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub stage1: TrainLog,
    pub stage2: Option<RouterLog>,
}

/// Stage 1, then Stage 2 when routing is enabled.
pub fn train_run(config: &RunConfig, data: &PreparedData, seed: u64) -> Result<TrainedRun> {
    let train = SampleMatrix::from_samples(&data.train, &data.normalizer)?;
    let valid = SampleMatrix::from_samples(&data.valid, &data.normalizer)?;
    let mut init = component_rng(seed, Component::ExpertInit);
    let model = MoEModel::new(config.moe_config(data.input_dim()), &mut init)?;
    log::info!(
        "seed {seed}: {} experts, {} parameters, {} train / {} valid samples",
        model.n_experts(),
        model.param_count(),
        train.rows(),
        valid.rows()
    );
    let (model, stage1) = train_stage1(model, &train, &valid, &config.train_config(seed))
        .with_context(|| format!("stage 1 training for seed {seed}"))?;
    let (router, stage2) = if config.uses_router() {
        let mut init = component_rng(seed, Component::RouterInit);
        let bank = RouterBank::new(
            model.config.embedding_dim(),
            model.n_experts(),
            config.router_config(),
            &mut init,
        )?;
        let (bank, log) = train_stage2(bank, &model, &train, &config.router_train_config(seed))
            .with_context(|| format!("stage 2 training for seed {seed}"))?;
        (Some(bank), Some(log))
    } else {
        (None, None)
    };
    let checkpoint = Checkpoint::new(
        seed,
        data.config,
        data.normalizer.clone(),
        config.ablation.multi_task,
        model,
        router,
    )?;
    Ok(TrainedRun {
        checkpoint,
        stage1,
        stage2,
    })
}

/// Trades `samples` with the checkpoint's model and routers.
pub fn backtest(config: &RunConfig, checkpoint: &Checkpoint, samples: &[Sample]) -> Result<BacktestReport> {
    let signals = signals_from_model(&checkpoint.model, checkpoint.router.as_ref(), samples, &checkpoint.normalizer)?;
    let realized = realized_returns(samples)?;
    Ok(run_strategy(&signals, &realized, &config.strategy_config(checkpoint.multi_task))?)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn write_training(dir: &Path, run: &TrainedRun, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    run.checkpoint.save(&dir.join("checkpoint.json"))?;
    write(&dir.join("stage1_log.csv"), run.stage1.to_csv())?;
    if let Some(log) = &run.stage2 {
        write(&dir.join("stage2_log.csv"), log.to_csv())?;
    }
    write(&dir.join("manifest.txt"), manifest.to_text())
}

/// Report files plus an SVG equity plot.
pub fn write_backtest(dir: &Path, report: &BacktestReport, title: &str) -> Result<()> {
    write_report(dir, report)?;
    write(&dir.join("equity.svg"), equity_svg(report, title))
}
