use serde::{Deserialize, Serialize};

use super::Bar;

pub const FEATURE_COUNT: usize = 11;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "z_open",
    "z_high",
    "z_low",
    "z_close",
    "z_adj_close",
    "z_d_5",
    "z_d_10",
    "z_d_15",
    "z_d_20",
    "z_d_25",
    "z_d_30",
];

/// Moving-average lengths behind `z_d_*`.
pub const MA_WINDOWS: [usize; 6] = [5, 10, 15, 20, 25, 30];

/// Smallest day index with a full feature row (30 adjusted closes ending at t).
pub const MIN_HISTORY: usize = 29;

/// Feature vector for one stock-day, in [`FEATURE_NAMES`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow(pub [f64; FEATURE_COUNT]);

/// Movement and return targets over the label horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub y: u8,
    pub r: f64,
}

/// Features at day `t` of a contiguous bar sequence, or `None` when the
/// history is too short.
pub fn compute_features(bars: &[Bar], t: usize) -> Option<FeatureRow> {
    if t < MIN_HISTORY || t >= bars.len() {
        return None;
    }
    let cur = &bars[t];
    let prev = &bars[t - 1];
    let mut z = [0.0; FEATURE_COUNT];
    z[0] = cur.open / cur.close - 1.0;
    z[1] = cur.high / cur.close - 1.0;
    z[2] = cur.low / cur.close - 1.0;
    z[3] = cur.close / prev.close - 1.0;
    z[4] = cur.adj_close / prev.adj_close - 1.0;

    // single backward pass; MA_WINDOWS is ascending
    let mut acc = 0.0;
    let mut next = 0;
    for (n, bar) in bars[..=t].iter().rev().take(MA_WINDOWS[5]).enumerate() {
        acc += bar.adj_close;
        if n + 1 == MA_WINDOWS[next] {
            z[5 + next] = acc / MA_WINDOWS[next] as f64 / cur.adj_close - 1.0;
            next += 1;
        }
    }
    Some(FeatureRow(z))
}

/// Features at calendar day `t` of an aligned series; `None` if any bar in
/// the 30-day lookback is missing.
pub fn features_at(series: &[Option<Bar>], t: usize) -> Option<FeatureRow> {
    if t < MIN_HISTORY || t >= series.len() {
        return None;
    }
    let window: Option<Vec<Bar>> = series[t - MIN_HISTORY..=t].iter().cloned().collect();
    compute_features(&window?, MIN_HISTORY)
}

/// Labels from close prices at `t` and `t + horizon`; `None` when either bar is
/// missing or beyond the series.
pub fn make_labels(series: &[Option<Bar>], t: usize, horizon: usize) -> Option<Label> {
    let now = series.get(t)?.as_ref()?;
    let later = series.get(t + horizon)?.as_ref()?;
    let y = u8::from(later.close > now.close);
    let r = (later.close - now.close) / now.close;
    Some(Label { y, r })
}
