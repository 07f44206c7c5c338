use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::features::{features_at, make_labels, FeatureRow, FEATURE_COUNT, FEATURE_NAMES};
use super::{DataError, MarketFrame};
use crate::numerics::Tensor2;

/// Window length and label horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Window holds `window + 1` feature rows (days t−window..=t).
    pub window: usize,
    pub horizon: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 4,
            horizon: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// Chronological split: train is every day before `valid_start`, valid is
/// `[valid_start, test_start)`, test is everything from `test_start` on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub valid_start: NaiveDate,
    pub test_start: NaiveDate,
}

impl SplitSpec {
    pub fn new(valid_start: NaiveDate, test_start: NaiveDate) -> Result<Self, DataError> {
        if test_start <= valid_start {
            return Err(DataError::Config(format!(
                "test split must start after the validation split ({test_start} <= {valid_start})"
            )));
        }
        Ok(Self {
            valid_start,
            test_start,
        })
    }

    /// Boundaries at the given fractions of the calendar.
    pub fn by_fraction(calendar: &[NaiveDate], train: f64, valid: f64) -> Result<Self, DataError> {
        if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
            return Err(DataError::Config(format!(
                "split fractions train={train}, valid={valid} must be positive and sum below 1"
            )));
        }
        let n = calendar.len();
        let v = ((n as f64) * train).round() as usize;
        let t = ((n as f64) * (train + valid)).round() as usize;
        if v == 0 || t <= v || t >= n {
            return Err(DataError::Config(format!(
                "calendar of {n} days is too short for the requested split"
            )));
        }
        Self::new(calendar[v], calendar[t])
    }

    pub fn split_of(&self, date: NaiveDate) -> SplitName {
        if date < self.valid_start {
            SplitName::Train
        } else if date < self.test_start {
            SplitName::Valid
        } else {
            SplitName::Test
        }
    }
}

/// One stock-day training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub stock: String,
    /// Calendar index of the anchor day t.
    pub anchor: usize,
    pub date: NaiveDate,
    pub label_date: NaiveDate,
    /// Feature rows for days t−k..=t, oldest first.
    pub window: Vec<FeatureRow>,
    pub y: u8,
    pub r: f64,
}

impl Sample {
    pub fn flatten(&self) -> Vec<f64> {
        self.window.iter().flat_map(|row| row.0).collect()
    }
}

/// Per-feature z-score statistics, fitted on training windows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; FEATURE_COUNT],
    pub std: [f64; FEATURE_COUNT],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURE_COUNT],
            std: [1.0; FEATURE_COUNT],
        }
    }

    /// Pools every feature row of every window. Zero-variance features keep
    /// unit scale.
    pub fn fit(samples: &[Sample]) -> Self {
        let rows: Vec<&FeatureRow> = samples.iter().flat_map(|s| &s.window).collect();
        if rows.is_empty() {
            return Self::identity();
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; FEATURE_COUNT];
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(row.0) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; FEATURE_COUNT];
        for row in &rows {
            for ((acc, v), m) in var.iter_mut().zip(row.0).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    pub fn apply(&self, sample: &Sample) -> Vec<f64> {
        sample
            .window
            .iter()
            .flat_map(|row| {
                (0..FEATURE_COUNT).map(move |j| (row.0[j] - self.mean[j]) / self.std[j])
            })
            .collect()
    }

    /// Normalized, flattened windows stacked as rows.
    pub fn design_matrix(&self, samples: &[Sample]) -> Tensor2 {
        let cols = samples.first().map_or(0, |s| s.window.len() * FEATURE_COUNT);
        let mut data = Vec::with_capacity(samples.len() * cols);
        for s in samples {
            data.extend(self.apply(s));
        }
        Tensor2::new(samples.len(), cols, data).expect("all windows share one length")
    }
}

/// Samples per split plus the train-fitted normalizer.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub split: SplitSpec,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub normalizer: Normalizer,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        (self.config.window + 1) * FEATURE_COUNT
    }

    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            window: self.config.window,
            horizon: self.config.horizon,
            split: self.split,
            counts: [self.train.len(), self.valid.len(), self.test.len()],
            normalizer: self.normalizer.clone(),
        }
    }
}

/// Builds windowed samples for every stock and assigns them to splits by
/// anchor day. A sample needs every window row and its label day, and the
/// label day must fall in the same split as the anchor.
pub fn build_dataset(
    frame: &MarketFrame,
    config: DatasetConfig,
    split: SplitSpec,
) -> Result<Dataset, DataError> {
    if frame.n_stocks() == 0 || frame.n_days() == 0 {
        return Err(DataError::Config("market frame is empty".to_string()));
    }
    if config.horizon == 0 {
        return Err(DataError::Config("label horizon must be at least 1 day".to_string()));
    }
    let calendar = frame.calendar();
    let mut by_split: BTreeMap<SplitName, Vec<Sample>> = BTreeMap::new();

    for (id, series) in frame.iter() {
        let features: Vec<Option<FeatureRow>> =
            (0..series.len()).map(|t| features_at(series, t)).collect();
        for t in config.window..series.len() {
            let Some(label) = make_labels(series, t, config.horizon) else {
                continue;
            };
            let window: Option<Vec<FeatureRow>> =
                features[t - config.window..=t].iter().copied().collect();
            let Some(window) = window else {
                continue;
            };
            let date = calendar[t];
            let label_date = calendar[t + config.horizon];
            let name = split.split_of(date);
            if split.split_of(label_date) != name {
                continue;
            }
            by_split.entry(name).or_default().push(Sample {
                stock: id.to_string(),
                anchor: t,
                date,
                label_date,
                window,
                y: label.y,
                r: label.r,
            });
        }
    }

    let mut take = |name: SplitName| -> Result<Vec<Sample>, DataError> {
        let mut samples = by_split.remove(&name).unwrap_or_default();
        if samples.is_empty() {
            return Err(DataError::Config(format!(
                "{} split is empty (valid_start={}, test_start={}, window={}, horizon={})",
                name.as_str(),
                split.valid_start,
                split.test_start,
                config.window,
                config.horizon
            )));
        }
        samples.sort_by(|a, b| a.anchor.cmp(&b.anchor).then_with(|| a.stock.cmp(&b.stock)));
        Ok(samples)
    };
    let train = take(SplitName::Train)?;
    let valid = take(SplitName::Valid)?;
    let test = take(SplitName::Test)?;
    let normalizer = Normalizer::fit(&train);
    Ok(Dataset {
        config,
        split,
        train,
        valid,
        test,
        normalizer,
    })
}

/// Plain `key=value` record of how a dataset was built.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub window: usize,
    pub horizon: usize,
    pub split: SplitSpec,
    pub counts: [usize; 3],
    pub normalizer: Normalizer,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "window={}", self.window);
        let _ = writeln!(out, "horizon={}", self.horizon);
        let _ = writeln!(out, "valid_start={}", self.split.valid_start);
        let _ = writeln!(out, "test_start={}", self.split.test_start);
        let _ = writeln!(out, "train_samples={}", self.counts[0]);
        let _ = writeln!(out, "valid_samples={}", self.counts[1]);
        let _ = writeln!(out, "test_samples={}", self.counts[2]);
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            let _ = writeln!(out, "mean.{name}={:?}", self.normalizer.mean[j]);
            let _ = writeln!(out, "std.{name}={:?}", self.normalizer.std[j]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DataError::Invalid(format!("manifest line {}: expected key=value", n + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String, DataError> {
            map.get(key)
                .ok_or_else(|| DataError::Invalid(format!("manifest is missing `{key}`")))
        };
        let num = |key: &str| -> Result<f64, DataError> {
            get(key)?
                .parse()
                .map_err(|e| DataError::Invalid(format!("manifest `{key}`: {e}")))
        };
        let count = |key: &str| -> Result<usize, DataError> {
            get(key)?
                .parse()
                .map_err(|e| DataError::Invalid(format!("manifest `{key}`: {e}")))
        };
        let date = |key: &str| -> Result<NaiveDate, DataError> {
            get(key)?
                .parse()
                .map_err(|e| DataError::Invalid(format!("manifest `{key}`: {e}")))
        };
        let mut normalizer = Normalizer::identity();
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            normalizer.mean[j] = num(&format!("mean.{name}"))?;
            normalizer.std[j] = num(&format!("std.{name}"))?;
        }
        Ok(Self {
            window: count("window")?,
            horizon: count("horizon")?,
            split: SplitSpec::new(date("valid_start")?, date("test_start")?)?,
            counts: [
                count("train_samples")?,
                count("valid_samples")?,
                count("test_samples")?,
            ],
            normalizer,
        })
    }
}
