use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bar, DataError, MarketFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Log returns follow a slowly varying, persistent drift.
    Trend,
    /// Log price reverts toward a fixed level.
    #[serde(rename = "meanrevert")]
    MeanRevert,
    /// Driftless random walk.
    Noise,
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "trend" => Ok(Regime::Trend),
            "meanrevert" | "mean_revert" | "mean-revert" => Ok(Regime::MeanRevert),
            "noise" => Ok(Regime::Noise),
            other => Err(format!("unknown regime `{other}` (trend|meanrevert|noise)")),
        }
    }
}

/// Generator constants. All rates are daily and in log-return units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub volatility: f64,
    /// Long-run drift shared by every stock (trend regime).
    pub drift: f64,
    /// Cross-sectional spread of per-stock long-run drifts (trend regime).
    pub drift_dispersion: f64,
    /// AR(1) persistence of the latent drift (trend regime).
    pub drift_persistence: f64,
    /// Stationary standard deviation of the latent drift around its mean.
    pub drift_volatility: f64,
    /// Pull toward the anchor level per day (mean-revert regime).
    pub reversion: f64,
    pub open_gap: f64,
    pub wick: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            volatility: 0.015,
            drift: 0.0005,
            drift_dispersion: 0.0005,
            drift_persistence: 0.97,
            drift_volatility: 0.004,
            reversion: 0.1,
            open_gap: 0.003,
            wick: 0.005,
        }
    }
}

fn business_days(n: usize) -> Vec<NaiveDate> {
    let mut day = NaiveDate::from_ymd_opt(2012, 9, 3).expect("valid date");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(day);
        }
        day = day.succ_opt().expect("date in range");
    }
    out
}

/// Geometric random-walk market with [`SynthParams::default`] constants.
pub fn synth_market(seed: u64, n_stocks: usize, n_days: usize, regime: Regime) -> Result<MarketFrame, DataError> {
    synth_market_with(seed, n_stocks, n_days, regime, &SynthParams::default())
}

/// Geometric random-walk market, deterministic in `seed`.
pub fn synth_market_with(
    seed: u64,
    n_stocks: usize,
    n_days: usize,
    regime: Regime,
    params: &SynthParams,
) -> Result<MarketFrame, DataError> {
    if n_days < 60 {
        return Err(DataError::Config(format!(
            "synthetic markets need at least 60 days, got {n_days}"
        )));
    }
    if n_stocks == 0 {
        return Err(DataError::Config("synthetic market needs at least one stock".to_string()));
    }
    let calendar = business_days(n_days);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n_stocks.to_string().len().max(2);
    let mut series = BTreeMap::new();

    for s in 0..n_stocks {
        let mut noise = || -> f64 { StandardNormal.sample(&mut rng) };
        let start_price = 20.0 + 80.0 * (noise().abs().min(3.0) / 3.0);
        let long_run = params.drift + params.drift_dispersion * noise();
        let innovation = params.drift_volatility * (1.0 - params.drift_persistence.powi(2)).sqrt();
        let mut latent = long_run + params.drift_volatility * noise();
        let level = start_price.ln();

        let mut log_close = level;
        let mut prev_close = start_price;
        let mut bars = Vec::with_capacity(n_days);
        for (d, &date) in calendar.iter().enumerate() {
            if d > 0 {
                let step = match regime {
                    Regime::Trend => {
                        latent = long_run
                            + params.drift_persistence * (latent - long_run)
                            + innovation * noise();
                        latent + params.volatility * noise()
                    }
                    Regime::MeanRevert => {
                        params.reversion * (level - log_close) + params.volatility * noise()
                    }
                    Regime::Noise => params.volatility * noise(),
                };
                log_close += step;
            }
            let close = log_close.exp();
            let open = if d == 0 {
                close
            } else {
                prev_close * (params.open_gap * noise()).exp()
            };
            let high = open.max(close) * (params.wick * noise().abs()).exp();
            let low = open.min(close) * (-params.wick * noise().abs()).exp();
            let volume = 1e6 * (0.3 * noise()).exp();
            bars.push(Bar {
                date,
                open,
                high,
                low,
                close,
                adj_close: close,
                volume: Some(volume.round()),
            });
            prev_close = close;
        }
        series.insert(format!("S{s:0width$}"), bars);
    }
    MarketFrame::from_series(series)
}
