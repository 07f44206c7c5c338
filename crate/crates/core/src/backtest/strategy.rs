use std::cmp::Ordering;
use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::metrics::{MetricOptions, Metrics};
use super::BacktestError;
use crate::marketdata::{Normalizer, Sample};
use crate::moe::MoEModel;
use crate::router::{route_inference, RouterBank};

/// Consistent sign on both tasks, with `p_up = 0.5` and `r̂ = 0` read as up.
pub fn is_certain(p_up: f64, r_hat: f64) -> bool {
    (p_up >= 0.5 && r_hat >= 0.0) || (p_up < 0.5 && r_hat < 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StockSignal {
    pub stock: String,
    pub p_up: f64,
    pub r_hat: f64,
    pub experts_used: usize,
}

impl StockSignal {
    pub fn certain(&self) -> bool {
        is_certain(self.p_up, self.r_hat)
    }
}

/// Predictions formed at the close of `date` for trading on `trade_date`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailySignal {
    pub date: NaiveDate,
    pub trade_date: NaiveDate,
    pub stocks: Vec<StockSignal>,
}

/// Realized returns per stock for the trade following `date`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DailyReturns {
    pub date: NaiveDate,
    pub returns: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub top_k: usize,
    /// Restrict purchases to certain stocks with `p_up ≥ 0.5`. When off, the
    /// top `k` stocks by `p_up` are bought every day.
    pub uncertainty_filter: bool,
    /// Proportional cost per side; a held position pays it twice a day.
    pub cost: f64,
    pub metrics: MetricOptions,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            top_k: 4,
            uncertainty_filter: true,
            cost: 0.0,
            metrics: MetricOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub date: NaiveDate,
    pub held: Vec<String>,
    pub weights: Vec<f64>,
    pub realized: Vec<f64>,
    pub portfolio_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    /// Trade date of each simulated day.
    pub dates: Vec<NaiveDate>,
    /// Net value before the first day (1.0) and after every day.
    pub equity: Vec<f64>,
    pub daily_returns: Vec<f64>,
    pub positions: Vec<Position>,
    /// Mean experts consulted across each day's universe.
    pub experts_used_mean: Vec<f64>,
    pub metrics: Metrics,
}

impl BacktestReport {
    /// Days on which at least one stock was held.
    pub fn traded_days(&self) -> Vec<NaiveDate> {
        self.positions
            .iter()
            .filter(|p| !p.held.is_empty())
            .map(|p| p.date)
            .collect()
    }
}

fn rank(a: &StockSignal, b: &StockSignal) -> Ordering {
    b.p_up
        .total_cmp(&a.p_up)
        .then_with(|| b.r_hat.total_cmp(&a.r_hat))
        .then_with(|| a.stock.cmp(&b.stock))
}

/// Stocks bought on one day, best first.
pub fn select_stocks<'a>(signal: &'a DailySignal, config: &StrategyConfig) -> Vec<&'a StockSignal> {
    let mut pool: Vec<&StockSignal> = signal
        .stocks
        .iter()
        .filter(|s| !config.uncertainty_filter || (s.certain() && s.p_up >= 0.5))
        .collect();
    pool.sort_by(|a, b| rank(a, b));
    pool.truncate(config.top_k);
    pool
}

/// Daily top-k simulation with equal weights; cash earns nothing.
pub fn run_strategy(
    signals: &[DailySignal],
    realized: &[DailyReturns],
    config: &StrategyConfig,
) -> Result<BacktestReport, BacktestError> {
    if config.top_k == 0 {
        return Err(BacktestError::Config("top_k must be positive".to_string()));
    }
    if !config.cost.is_finite() || config.cost < 0.0 {
        return Err(BacktestError::Config(format!("invalid transaction cost {}", config.cost)));
    }
    if signals.is_empty() {
        return Err(BacktestError::Empty);
    }
    for (i, s) in signals.iter().enumerate() {
        match realized.get(i) {
            Some(r) if r.date == s.date => {}
            Some(r) => {
                return Err(BacktestError::Misaligned {
                    date: s.date.min(r.date),
                    detail: format!("signal day {} vs return day {}", s.date, r.date),
                })
            }
            None => {
                return Err(BacktestError::Misaligned {
                    date: s.date,
                    detail: "no realized returns for this signal day".to_string(),
                })
            }
        }
    }
    if let Some(extra) = realized.get(signals.len()) {
        return Err(BacktestError::Misaligned {
            date: extra.date,
            detail: "realized returns without a signal".to_string(),
        });
    }

    let mut equity = Vec::with_capacity(signals.len() + 1);
    equity.push(1.0);
    let mut daily_returns = Vec::with_capacity(signals.len());
    let mut positions = Vec::with_capacity(signals.len());
    let mut experts_used_mean = Vec::with_capacity(signals.len());
    for (signal, day) in signals.iter().zip(realized) {
        let chosen = select_stocks(signal, config);
        let mut realized_returns = Vec::with_capacity(chosen.len());
        for s in &chosen {
            let r = day.returns.get(&s.stock).ok_or_else(|| BacktestError::Misaligned {
                date: signal.date,
                detail: format!("no realized return for held stock {}", s.stock),
            })?;
            realized_returns.push(*r);
        }
        let ret = if chosen.is_empty() {
            0.0
        } else {
            realized_returns.iter().sum::<f64>() / chosen.len() as f64 - 2.0 * config.cost
        };
        let prev = *equity.last().expect("curve starts at 1");
        equity.push(prev * (1.0 + ret));
        daily_returns.push(ret);
        let weight = if chosen.is_empty() { 0.0 } else { 1.0 / chosen.len() as f64 };
        positions.push(Position {
            date: signal.trade_date,
            held: chosen.iter().map(|s| s.stock.clone()).collect(),
            weights: vec![weight; chosen.len()],
            realized: realized_returns,
            portfolio_return: ret,
        });
        let used = signal.stocks.iter().map(|s| s.experts_used as f64).sum::<f64>();
        experts_used_mean.push(if signal.stocks.is_empty() {
            0.0
        } else {
            used / signal.stocks.len() as f64
        });
    }
    let metrics = Metrics::compute(&equity, &daily_returns, &config.metrics);
    Ok(BacktestReport {
        dates: signals.iter().map(|s| s.trade_date).collect(),
        equity,
        daily_returns,
        positions,
        experts_used_mean,
        metrics,
    })
}

/// Groups consecutive samples by anchor date. Input must be sorted by date.
fn day_groups(samples: &[Sample]) -> Result<Vec<&[Sample]>, BacktestError> {
    if samples.windows(2).any(|w| w[1].date < w[0].date) {
        return Err(BacktestError::Config("samples must be sorted by date".to_string()));
    }
    Ok(samples.chunk_by(|a, b| a.date == b.date).collect())
}

/// Aggregated predictions per stock-day. Without a bank every expert is used.
pub fn signals_from_model(
    model: &MoEModel,
    bank: Option<&RouterBank>,
    samples: &[Sample],
    normalizer: &Normalizer,
) -> Result<Vec<DailySignal>, BacktestError> {
    let groups = day_groups(samples)?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let routes = route_inference(bank, model, &normalizer.design_matrix(samples))?;
    let mut offset = 0;
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let stocks = group
            .iter()
            .zip(&routes[offset..offset + group.len()])
            .map(|(s, route)| StockSignal {
                stock: s.stock.clone(),
                p_up: route.stats.p_up,
                r_hat: route.stats.r_hat,
                experts_used: route.m,
            })
            .collect();
        out.push(DailySignal {
            date: group[0].date,
            trade_date: group[0].label_date,
            stocks,
        });
        offset += group.len();
    }
    Ok(out)
}

/// Each sample's realized return, grouped like [`signals_from_model`].
pub fn realized_returns(samples: &[Sample]) -> Result<Vec<DailyReturns>, BacktestError> {
    Ok(day_groups(samples)?
        .into_iter()
        .map(|group| DailyReturns {
            date: group[0].date,
            returns: group.iter().map(|s| (s.stock.clone(), s.r)).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn day(n: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 3, n).unwrap()
    }

    fn sig(stock: &str, p: f64, r: f64) -> StockSignal {
        StockSignal {
            stock: stock.to_string(),
            p_up: p,
            r_hat: r,
            experts_used: 4,
        }
    }

    fn returns(d: u32, pairs: &[(&str, f64)]) -> DailyReturns {
        DailyReturns {
            date: day(d),
            returns: pairs.iter().map(|(s, r)| (s.to_string(), *r)).collect(),
        }
    }

    fn signal(d: u32, stocks: Vec<StockSignal>) -> DailySignal {
        DailySignal {
            date: day(d),
            trade_date: day(d + 1),
            stocks,
        }
    }

    #[test]
    fn certainty_rule() {
        assert!(is_certain(0.7, 0.01));
        assert!(is_certain(0.5, 0.0));
        assert!(is_certain(0.2, -0.01));
        assert!(!is_certain(0.7, -0.01));
        assert!(!is_certain(0.3, 0.0));
    }

    #[test]
    fn top_one_picks_highest_probability() {
        let signals = [signal(1, vec![sig("A", 0.9, 0.01), sig("B", 0.8, 0.02)])];
        let real = [returns(1, &[("A", 0.03), ("B", -0.01)])];
        let config = StrategyConfig {
            top_k: 1,
            ..StrategyConfig::default()
        };
        let report = run_strategy(&signals, &real, &config).unwrap();
        assert_eq!(report.positions[0].held, vec!["A".to_string()]);
        assert_eq!(report.daily_returns, vec![0.03]);
    }

    #[test]
    fn uncertain_day_holds_cash() {
        let signals = [signal(1, vec![sig("A", 0.9, -0.01), sig("B", 0.3, 0.02)])];
        let real = [returns(1, &[("A", 0.03), ("B", 0.05)])];
        let report = run_strategy(&signals, &real, &StrategyConfig::default()).unwrap();
        assert!(report.positions[0].held.is_empty());
        assert_eq!(report.equity, vec![1.0, 1.0]);
    }

    #[test]
    fn three_day_compounding() {
        let signals: Vec<DailySignal> = (1..=3).map(|d| signal(d, vec![sig("A", 0.9, 0.01)])).collect();
        let real = [
            returns(1, &[("A", 0.10)]),
            returns(2, &[("A", -0.05)]),
            returns(3, &[("A", 0.02)]),
        ];
        let report = run_strategy(&signals, &real, &StrategyConfig::default()).unwrap();
        assert_abs_diff_eq!(report.equity[1], 1.10, epsilon = 1e-12);
        assert_abs_diff_eq!(report.equity[2], 1.045, epsilon = 1e-12);
        assert_abs_diff_eq!(report.equity[3], 1.0659, epsilon = 1e-12);
        assert_abs_diff_eq!(report.metrics.tr, 0.0659, epsilon = 1e-12);
    }

    #[test]
    fn ties_break_on_return_then_id() {
        let s = signal(1, vec![sig("C", 0.7, 0.01), sig("B", 0.7, 0.02), sig("A", 0.7, 0.01)]);
        let config = StrategyConfig {
            top_k: 3,
            ..StrategyConfig::default()
        };
        let order: Vec<&str> = select_stocks(&s, &config).iter().map(|s| s.stock.as_str()).collect();
        assert_eq!(order, vec!["B", "A", "C"]);
    }

    #[test]
    fn equal_weights_and_costs() {
        let signals = [signal(1, vec![sig("A", 0.9, 0.01), sig("B", 0.8, 0.02)])];
        let real = [returns(1, &[("A", 0.03), ("B", -0.01)])];
        let config = StrategyConfig {
            cost: 0.001,
            ..StrategyConfig::default()
        };
        let report = run_strategy(&signals, &real, &config).unwrap();
        assert_eq!(report.positions[0].weights, vec![0.5, 0.5]);
        assert_abs_diff_eq!(report.daily_returns[0], 0.01 - 0.002, epsilon = 1e-15);
    }

    #[test]
    fn misalignment_names_the_day() {
        let signals = [signal(1, vec![sig("A", 0.9, 0.01)]), signal(2, vec![sig("A", 0.9, 0.01)])];
        let real = [returns(1, &[("A", 0.0)]), returns(3, &[("A", 0.0)])];
        match run_strategy(&signals, &real, &StrategyConfig::default()) {
            Err(BacktestError::Misaligned { date, .. }) => assert_eq!(date, day(2)),
            other => panic!("unexpected {other:?}"),
        }
        let real = [returns(1, &[("A", 0.0)])];
        assert!(run_strategy(&signals, &real, &StrategyConfig::default()).is_err());
    }

    #[test]
    fn filter_off_trades_every_day() {
        let signals = [
            signal(1, vec![sig("A", 0.9, -0.01)]),
            signal(2, vec![sig("A", 0.9, 0.01)]),
        ];
        let real = [returns(1, &[("A", 0.01)]), returns(2, &[("A", 0.01)])];
        let on = run_strategy(&signals, &real, &StrategyConfig::default()).unwrap();
        let off = run_strategy(
            &signals,
            &real,
            &StrategyConfig {
                uncertainty_filter: false,
                ..StrategyConfig::default()
            },
        )
        .unwrap();
        assert_eq!(on.traded_days(), vec![day(3)]);
        assert_eq!(off.traded_days(), vec![day(2), day(3)]);
    }
}
