//! Price bars, the eleven ratio features, labels, windowed samples and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

mod dataset;
mod features;
mod io;
mod synth;

pub use dataset::{build_dataset, Dataset, DatasetConfig, Manifest, Normalizer, Sample, SplitSpec, SplitName};
pub use features::{
    compute_features, features_at, make_labels, FeatureRow, Label, FEATURE_COUNT, FEATURE_NAMES,
    MA_WINDOWS, MIN_HISTORY,
};
pub use io::{load_csv, load_csv_with_warnings, write_csv};
pub use synth::{synth_market, synth_market_with, Regime, SynthParams};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{file}:{line}: field `{field}`: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        field: String,
        message: String,
    },
    #[error("{file}:{line}: {message}")]
    Validation {
        file: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One daily OHLC bar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: Option<f64>,
}

impl Bar {
    /// Checks positivity and `low ≤ min(open, close) ≤ max(open, close) ≤ high`.
    pub fn validate(&self) -> Result<(), String> {
        let prices = [
            ("open", self.open),
            ("high", self.high),
            ("low", self.low),
            ("close", self.close),
            ("adj_close", self.adj_close),
        ];
        for (name, v) in prices {
            if !v.is_finite() || v <= 0.0 {
                return Err(format!("{name} must be a positive finite price, got {v}"));
            }
        }
        if self.high < self.low {
            return Err(format!("high {} is below low {}", self.high, self.low));
        }
        let lo = self.open.min(self.close);
        let hi = self.open.max(self.close);
        if self.low > lo || hi > self.high {
            return Err(format!(
                "open/close [{lo}, {hi}] outside low/high [{}, {}]",
                self.low, self.high
            ));
        }
        Ok(())
    }
}

/// Per-stock bar series aligned on a shared trading calendar. Days on which a
/// stock has no bar are `None`; nothing is forward-filled.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketFrame {
    calendar: Vec<NaiveDate>,
    stocks: BTreeMap<String, Vec<Option<Bar>>>,
}

impl MarketFrame {
    /// Aligns per-stock series on the union of their dates. Each series must be
    /// strictly increasing in date and every bar must validate.
    pub fn from_series(series: BTreeMap<String, Vec<Bar>>) -> Result<Self, DataError> {
        if series.is_empty() {
            return Err(DataError::Invalid("market frame has no stocks".to_string()));
        }
        let mut days = BTreeSet::new();
        for (id, bars) in &series {
            for pair in bars.windows(2) {
                if pair[1].date <= pair[0].date {
                    return Err(DataError::Invalid(format!(
                        "stock {id}: dates not strictly increasing at {}",
                        pair[1].date
                    )));
                }
            }
            for bar in bars {
                bar.validate()
                    .map_err(|m| DataError::Invalid(format!("stock {id} on {}: {m}", bar.date)))?;
                days.insert(bar.date);
            }
        }
        let calendar: Vec<NaiveDate> = days.into_iter().collect();
        let stocks = series
            .into_iter()
            .map(|(id, bars)| {
                let mut aligned = vec![None; calendar.len()];
                for bar in bars {
                    let slot = calendar.binary_search(&bar.date).expect("date is in calendar");
                    aligned[slot] = Some(bar);
                }
                (id, aligned)
            })
            .collect();
        Ok(Self { calendar, stocks })
    }

    pub fn calendar(&self) -> &[NaiveDate] {
        &self.calendar
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.stocks.len()
    }

    pub fn stock_ids(&self) -> impl Iterator<Item = &str> {
        self.stocks.keys().map(String::as_str)
    }

    pub fn series(&self, id: &str) -> Option<&[Option<Bar>]> {
        self.stocks.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Option<Bar>])> {
        self.stocks.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Keeps calendar days `0..=last` only.
    pub fn truncated(&self, last: usize) -> Self {
        let end = (last + 1).min(self.calendar.len());
        Self {
            calendar: self.calendar[..end].to_vec(),
            stocks: self
                .stocks
                .iter()
                .map(|(k, v)| (k.clone(), v[..end].to_vec()))
                .collect(),
        }
    }

    /// Removes one stock's bar on the given calendar days.
    pub fn with_missing_days(mut self, id: &str, days: &[usize]) -> Self {
        if let Some(series) = self.stocks.get_mut(id) {
            for &d in days {
                if d < series.len() {
                    series[d] = None;
                }
            }
        }
        self
    }
}
