//! Run configuration: a TOML file with one table per concern, every field
//! optional. Command-line `--set section.key=value` overrides are applied on
//! top of the file before validation.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use mixtrade::backtest::{DownsideMode, MetricOptions, StrategyConfig};
use mixtrade::marketdata::{DatasetConfig, Regime, SynthParams};
use mixtrade::moe::{LossWeights, MoeConfig, Objective, TrainConfig};
use mixtrade::router::{PrefixMode, RouterConfig, RouterTrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synth,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub stocks: usize,
    pub days: usize,
    pub regime: Regime,
    /// Fixed market seed. When absent the market is drawn from each run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub market_seed: Option<u64>,
    pub params: SynthParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            stocks: 20,
            days: 800,
            regime: Regime::Trend,
            market_seed: None,
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    pub synth: SynthSection,
    /// Explicit split boundaries; when absent the fractions below apply.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_start: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_start: Option<NaiveDate>,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub window: usize,
    pub horizon: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            csv_path: None,
            synth: SynthSection::default(),
            valid_start: None,
            test_start: None,
            train_fraction: 0.7,
            valid_fraction: 0.15,
            window: 4,
            horizon: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_experts: usize,
    pub backbone: Vec<usize>,
    pub expert_hidden: usize,
    /// Multiplier on the raw return output of every expert head.
    pub return_scale: f64,
    pub lambda: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            n_experts: 4,
            backbone: vec![32, 32],
            expert_hidden: 32,
            return_scale: mixtrade::moe::DEFAULT_RETURN_SCALE,
            lambda: w.lambda,
            w1: w.w1,
            w2: w.w2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub omega: f64,
    pub gate_threshold: f64,
    pub prefix_mode: PrefixMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RouterSection {
    fn default() -> Self {
        let r = RouterConfig::default();
        let t = RouterTrainConfig::default();
        Self {
            omega: r.omega,
            gate_threshold: r.gate_threshold,
            prefix_mode: r.prefix_mode,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub top_k: usize,
    pub cost: f64,
    pub annualize_sharpe: bool,
    pub downside: DownsideMode,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            top_k: 4,
            cost: 0.0,
            annualize_sharpe: false,
            downside: DownsideMode::Deviation,
        }
    }
}

/// Component toggles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Train the return head and use it in the strategy filter.
    pub multi_task: bool,
    /// Variation-ratio and volatility losses.
    pub uncertainty: bool,
    /// Stage-2 routers; off means every expert is always consulted.
    pub router: bool,
    /// Fit the expert average instead of each expert.
    pub collaborative: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            multi_task: true,
            uncertainty: true,
            router: true,
            collaborative: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: vec![0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub router: RouterSection,
    pub backtest: BacktestSection,
    pub ablation: AblationSection,
}

fn field_error(field: &str, message: impl std::fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("invalid config field `{field}`: {message}")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing run configuration")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Sets one dotted key, e.g. `model.n_experts=2` or `run.seeds=[1,2]`.
    /// Values are parsed as TOML, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .with_context(|| format!("override `{assignment}` is not key=value"))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Table::try_from(&*self).context("serializing configuration")?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut root;
        for part in path {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .with_context(|| format!("override `{key}`: `{part}` is not a table"))?;
        }
        table.insert(last.to_string(), value);
        *self = RunConfig::deserialize(toml::Value::Table(root))
            .with_context(|| format!("applying override `{assignment}`"))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(field_error("run.seeds", "at least one seed is required"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Csv if d.csv_path.is_none() => {
                return Err(field_error("data.csv_path", "required when data.source = \"csv\""))
            }
            DataSource::Synth if d.synth.days < 60 => {
                return Err(field_error("data.synth.days", "synthetic markets need at least 60 days"))
            }
            DataSource::Synth if d.synth.stocks == 0 => {
                return Err(field_error("data.synth.stocks", "must be positive"))
            }
            _ => {}
        }
        match (d.valid_start, d.test_start) {
            (Some(v), Some(t)) if t <= v => {
                return Err(field_error("data.test_start", "must be after data.valid_start"))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(field_error(
                    "data.valid_start",
                    "set both data.valid_start and data.test_start, or neither",
                ))
            }
            _ => {}
        }
        if !(d.train_fraction > 0.0 && d.valid_fraction > 0.0 && d.train_fraction + d.valid_fraction < 1.0) {
            return Err(field_error(
                "data.train_fraction",
                "train and valid fractions must be positive and sum to less than 1",
            ));
        }
        if d.horizon == 0 {
            return Err(field_error("data.horizon", "must be at least 1"));
        }
        let m = &self.model;
        if m.n_experts == 0 {
            return Err(field_error("model.n_experts", "must be at least 1"));
        }
        if m.backbone.is_empty() || m.backbone.contains(&0) {
            return Err(field_error("model.backbone", "needs at least one positive width"));
        }
        if m.expert_hidden == 0 {
            return Err(field_error("model.expert_hidden", "must be positive"));
        }
        if !(m.return_scale.is_finite() && m.return_scale > 0.0) {
            return Err(field_error("model.return_scale", format!("must be positive and finite, got {}", m.return_scale)));
        }
        for (name, v) in [("model.lambda", m.lambda), ("model.w1", m.w1), ("model.w2", m.w2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(field_error(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        for (name, lr) in [("train.lr", self.train.lr), ("router.lr", self.router.lr)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(field_error(name, format!("must be finite and non-negative, got {lr}")));
            }
        }
        for (name, v) in [
            ("train.batch_size", self.train.batch_size),
            ("train.epochs", self.train.epochs),
            ("router.batch_size", self.router.batch_size),
            ("router.epochs", self.router.epochs),
            ("backtest.top_k", self.backtest.top_k),
        ] {
            if v == 0 {
                return Err(field_error(name, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.router.gate_threshold) {
            return Err(field_error("router.gate_threshold", "must lie in [0, 1]"));
        }
        if !self.router.omega.is_finite() || self.router.omega < 0.0 {
            return Err(field_error("router.omega", "must be finite and non-negative"));
        }
        if !self.backtest.cost.is_finite() || self.backtest.cost < 0.0 {
            return Err(field_error("backtest.cost", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            window: self.data.window,
            horizon: self.data.horizon,
        }
    }

    pub fn moe_config(&self, input_dim: usize) -> MoeConfig {
        MoeConfig {
            input_dim,
            backbone_hidden: self.model.backbone.clone(),
            expert_hidden: self.model.expert_hidden,
            n_experts: self.model.n_experts,
            return_scale: self.model.return_scale,
        }
    }

    /// Loss weights after the ablation toggles: no multi-task drops every
    /// return term, no uncertainty (or a single expert) drops both penalties.
    pub fn loss_weights(&self) -> LossWeights {
        let a = &self.ablation;
        let uncertainty = a.uncertainty && self.model.n_experts >= 2;
        LossWeights {
            lambda: if a.multi_task { self.model.lambda } else { 0.0 },
            w1: if uncertainty { self.model.w1 } else { 0.0 },
            w2: if uncertainty && a.multi_task { self.model.w2 } else { 0.0 },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            weights: self.loss_weights(),
            objective: if self.ablation.collaborative {
                Objective::Collaborative
            } else {
                Objective::Individual
            },
            seed,
        }
    }

    pub fn uses_router(&self) -> bool {
        self.ablation.router && self.model.n_experts >= 2
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            gate_threshold: self.router.gate_threshold,
            omega: self.router.omega,
            prefix_mode: self.router.prefix_mode,
        }
    }

    pub fn router_train_config(&self, seed: u64) -> RouterTrainConfig {
        RouterTrainConfig {
            epochs: self.router.epochs,
            batch_size: self.router.batch_size,
            lr: self.router.lr,
            seed,
        }
    }

    /// Strategy settings; without a trained return head the sign-agreement
    /// filter has nothing to agree with and is switched off.
    pub fn strategy_config(&self, multi_task: bool) -> StrategyConfig {
        StrategyConfig {
            top_k: self.backtest.top_k,
            uncertainty_filter: multi_task,
            cost: self.backtest.cost,
            metrics: MetricOptions {
                annualize_sharpe: self.backtest.annualize_sharpe,
                downside: self.backtest.downside,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("[model]\nn_experts = 2\n[run]\nseeds = [3, 4]\n").unwrap();
        assert_eq!(c.model.n_experts, 2);
        assert_eq!(c.run.seeds, vec![3, 4]);
        assert_eq!(c.train.epochs, 10);
        assert!(RunConfig::from_toml("[model]\nexperts = 2\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("model.n_experts=6").unwrap();
        c.apply_override("run.seeds=[1,2,3]").unwrap();
        c.apply_override("data.synth.regime=noise").unwrap();
        c.apply_override("data.valid_start=2014-01-02").unwrap();
        assert_eq!(c.model.n_experts, 6);
        assert_eq!(c.run.seeds, vec![1, 2, 3]);
        assert_eq!(c.data.synth.regime, Regime::Noise);
        assert!(c.data.valid_start.is_some());
        assert!(c.apply_override("model.n_experts=many").is_err());
        assert!(c.apply_override("nonsense").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.model.n_experts = 0;
        assert!(c.validate().unwrap_err().to_string().contains("model.n_experts"));
        let mut c = RunConfig::default();
        c.data.source = DataSource::Csv;
        assert!(c.validate().unwrap_err().to_string().contains("data.csv_path"));
        let mut c = RunConfig::default();
        c.train.lr = f64::NAN;
        assert!(c.validate().unwrap_err().to_string().contains("train.lr"));
    }

    #[test]
    fn ablation_toggles_shape_the_losses() {
        let mut c = RunConfig::default();
        assert_eq!(c.loss_weights(), LossWeights::default());
        c.ablation.uncertainty = false;
        assert_eq!((c.loss_weights().w1, c.loss_weights().w2), (0.0, 0.0));
        c.ablation = AblationSection {
            multi_task: false,
            ..AblationSection::default()
        };
        let w = c.loss_weights();
        assert_eq!((w.lambda, w.w1, w.w2), (0.0, 1.0, 0.0));
        assert!(!c.strategy_config(false).uncertainty_filter);
        c.model.n_experts = 1;
        assert!(!c.uses_router());
        assert_eq!(c.loss_weights().w1, 0.0);
    }
}
