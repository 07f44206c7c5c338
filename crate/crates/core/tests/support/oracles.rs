//! Naive reference implementations written straight from the formulas.

use chrono::NaiveDate;
use mixtrade::marketdata::Bar;
use mixtrade::moe::ExpertOutputs;
use mixtrade::numerics::Tensor2;
use rand::Rng;

pub fn random_bars<R: Rng>(rng: &mut R, n: usize) -> Vec<Bar> {
    let start = NaiveDate::from_ymd_opt(2015, 1, 5).unwrap();
    let mut close: f64 = rng.random_range(5.0..500.0);
    let mut adj = close * rng.random_range(0.5..1.0);
    (0..n)
        .map(|i| {
            let step = rng.random_range(-0.08..0.08);
            close *= 1.0 + step;
            adj *= 1.0 + step + rng.random_range(-0.001..0.001);
            let open = close * (1.0 + rng.random_range(-0.03..0.03));
            let high = open.max(close) * (1.0 + rng.random_range(0.0..0.03));
            let low = open.min(close) * (1.0 - rng.random_range(0.0..0.03));
            Bar {
                date: start + chrono::Days::new(i as u64),
                open,
                high,
                low,
                close,
                adj_close: adj,
                volume: Some(1000.0),
            }
        })
        .collect()
}

/// Table of the eleven features at day `t`, one formula per line.
pub fn naive_features(bars: &[Bar], t: usize) -> [f64; 11] {
    let b = &bars[t];
    let p = &bars[t - 1];
    let ma = |k: usize| -> f64 {
        let mut s = 0.0;
        let mut i = 0;
        while i < k {
            s += bars[t - i].adj_close;
            i += 1;
        }
        s / k as f64
    };
    [
        b.open / b.close - 1.0,
        b.high / b.close - 1.0,
        b.low / b.close - 1.0,
        b.close / p.close - 1.0,
        b.adj_close / p.adj_close - 1.0,
        ma(5) / b.adj_close - 1.0,
        ma(10) / b.adj_close - 1.0,
        ma(15) / b.adj_close - 1.0,
        ma(20) / b.adj_close - 1.0,
        ma(25) / b.adj_close - 1.0,
        ma(30) / b.adj_close - 1.0,
    ]
}

pub fn naive_labels(bars: &[Bar], t: usize, tau: usize) -> (u8, f64) {
    let now = bars[t].close;
    let later = bars[t + tau].close;
    let y = if later > now { 1 } else { 0 };
    (y, later / now - 1.0)
}

pub fn naive_curve(returns: &[f64]) -> Vec<f64> {
    let mut curve = vec![1.0];
    for r in returns {
        let last = *curve.last().unwrap();
        curve.push(last * (1.0 + r));
    }
    curve
}

fn all_equal(xs: &[f64]) -> bool {
    xs.iter().all(|&x| x == xs[0])
}

/// Population standard deviation by the two-pass rule, exactly 0 for equal inputs.
fn pop_std(xs: &[f64]) -> f64 {
    if all_equal(xs) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mut m = 0.0;
    for x in xs {
        m += x / n;
    }
    let mut ss = 0.0;
    for x in xs {
        ss += (x - m).powi(2) / n;
    }
    ss.sqrt()
}

fn avg(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

/// `[tr, sr, cr, sor, mdd]` by hand rules: NaN Sharpe for zero spread,
/// infinite Calmar without drawdown, infinite Sortino without a negative
/// return or with zero downside spread.
pub fn naive_metrics(returns: &[f64]) -> [f64; 5] {
    let curve = naive_curve(returns);
    let tr = curve[curve.len() - 1] / curve[0] - 1.0;
    let sd = pop_std(returns);
    let sr = if returns.len() < 2 || sd == 0.0 { f64::NAN } else { avg(returns) / sd };
    let mut mdd: f64 = 0.0;
    for j in 0..curve.len() {
        for i in 0..=j {
            if curve[i] > curve[j] {
                mdd = mdd.max((curve[i] - curve[j]) / curve[i]);
            }
        }
    }
    let cr = if mdd == 0.0 { f64::INFINITY } else { avg(returns) / mdd };
    let neg: Vec<f64> = returns.iter().copied().filter(|r| *r < 0.0).collect();
    let sor = if neg.is_empty() || pop_std(&neg) == 0.0 {
        f64::INFINITY
    } else {
        avg(returns) / pop_std(&neg)
    };
    [tr, sr, cr, sor, mdd]
}

/// Same value, or both NaN, or the same infinity.
pub fn metric_matches(a: f64, b: f64, tol: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= tol
}

/// Random daily return series, with a share of deliberately degenerate ones.
pub fn random_returns<R: Rng>(rng: &mut R, case: usize) -> Vec<f64> {
    let n = rng.random_range(10..=100);
    match case % 6 {
        0 => vec![rng.random_range(-0.02..0.02); n],
        1 => (0..n).map(|_| rng.random_range(0.0..0.03)).collect(),
        2 => {
            let neg = -rng.random_range(0.001..0.03);
            (0..n).map(|i| if i % 3 == 0 { neg } else { rng.random_range(0.0..0.03) }).collect()
        }
        3 => (0..n).map(|i| if i % 4 == 0 { 0.0 } else { rng.random_range(-0.05..0.05) }).collect(),
        _ => (0..n).map(|_| rng.random_range(-0.05..0.05)).collect(),
    }
}

/// Label for router `k` from plain loops over the first `k` experts.
pub fn naive_router_label(outputs: &ExpertOutputs, row: usize, k: usize, y: u8, r: f64) -> u8 {
    let mut down = 0.0;
    let mut up = 0.0;
    let mut ret = 0.0;
    for i in 0..k {
        let l = outputs.logits(i, row);
        down += l[0];
        up += l[1];
        ret += outputs.r_hat(i, row);
    }
    let (down, up, ret) = (down / k as f64, up / k as f64, ret / k as f64);
    let predicted = if up >= down { 1 } else { 0 };
    let sign_pred = if ret >= 0.0 { 1 } else { -1 };
    let sign_true = if r >= 0.0 { 1 } else { -1 };
    if predicted == y && sign_pred == sign_true {
        0
    } else {
        1
    }
}

/// Expert outputs drawn from a small value set so ties and zero returns occur.
pub fn tie_heavy_outputs<R: Rng>(rng: &mut R, n: usize, rows: usize) -> ExpertOutputs {
    let pick = |rng: &mut R, vals: &[f64]| vals[rng.random_range(0..vals.len())];
    let heads = (0..n)
        .map(|_| {
            let mut data = Vec::with_capacity(rows * 3);
            for _ in 0..rows {
                data.push(pick(rng, &[-1.0, 0.0, 0.5, 1.0]));
                data.push(pick(rng, &[-1.0, 0.0, 0.5, 1.0]));
                data.push(pick(rng, &[-0.02, 0.0, 0.01, 0.02]));
            }
            Tensor2::new(rows, 3, data).unwrap()
        })
        .collect();
    ExpertOutputs::new(heads).unwrap()
}
