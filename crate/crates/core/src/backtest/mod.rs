//! Daily top-k strategy over aggregated expert predictions, with the
//! sign-agreement filter, equity simulation and ratio metrics.

use chrono::NaiveDate;

mod metrics;
mod report;
mod strategy;

pub use metrics::{metric_mdd_cr, metric_sor, metric_sr, metric_tr, DownsideMode, MetricOptions, Metrics};
pub use report::{equity_csv, equity_curve_svg, equity_svg, metrics_text, parse_metrics_text, positions_csv, write_report};
pub use strategy::{
    is_certain, realized_returns, run_strategy, select_stocks, signals_from_model, BacktestReport, DailyReturns,
    DailySignal, Position, StockSignal, StrategyConfig,
};

use crate::moe::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum BacktestError {
    #[error("calendar misalignment at {date}: {detail}")]
    Misaligned { date: NaiveDate, detail: String },
    #[error("no trading days to simulate")]
    Empty,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}
