use serde::{Deserialize, Serialize};

/// Risk measure in the Sortino denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsideMode {
    /// Population standard deviation of the negative returns.
    #[default]
    Deviation,
    /// Population variance of the negative returns.
    Variance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Multiply the Sharpe ratio by √252.
    pub annualize_sharpe: bool,
    pub downside: DownsideMode,
}

/// The four ratio metrics plus maximum drawdown. Total return is a fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tr: f64,
    pub sr: f64,
    pub cr: f64,
    pub sor: f64,
    pub mdd: f64,
}

impl Metrics {
    pub fn compute(curve: &[f64], returns: &[f64], options: &MetricOptions) -> Self {
        let (mdd, cr) = metric_mdd_cr(curve, returns);
        Self {
            tr: metric_tr(curve),
            sr: metric_sr(returns, options.annualize_sharpe),
            cr,
            sor: metric_sor(returns, options.downside),
            mdd,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name.to_ascii_lowercase().as_str() {
            "tr" => Some(self.tr),
            "sr" => Some(self.sr),
            "cr" => Some(self.cr),
            "sor" => Some(self.sor),
            "mdd" => Some(self.mdd),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 5] = ["tr", "sr", "cr", "sor", "mdd"];

    pub fn values(&self) -> [f64; 5] {
        [self.tr, self.sr, self.cr, self.sor, self.mdd]
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance; exactly zero when every value is equal.
fn population_variance(xs: &[f64]) -> f64 {
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// `(last − first) / first`; NaN for curves shorter than two points.
pub fn metric_tr(curve: &[f64]) -> f64 {
    match (curve.first(), curve.last()) {
        (Some(&first), Some(&last)) if curve.len() >= 2 => (last - first) / first,
        _ => {
            log::warn!("total return needs at least two curve points");
            f64::NAN
        }
    }
}

/// Mean over population standard deviation of daily returns. NaN when the
/// deviation is zero or fewer than two returns are given.
pub fn metric_sr(returns: &[f64], annualize: bool) -> f64 {
    if returns.len() < 2 {
        log::warn!("Sharpe ratio needs at least two returns");
        return f64::NAN;
    }
    let sd = population_variance(returns).sqrt();
    if sd == 0.0 {
        log::warn!("Sharpe ratio undefined: returns have zero deviation");
        return f64::NAN;
    }
    let sr = mean(returns) / sd;
    if annualize {
        sr * 252f64.sqrt()
    } else {
        sr
    }
}

/// Maximum drawdown from the running peak, and mean daily return over it.
/// A curve without drawdown gives `CR = +∞`.
pub fn metric_mdd_cr(curve: &[f64], returns: &[f64]) -> (f64, f64) {
    if curve.len() < 2 || returns.is_empty() {
        log::warn!("drawdown metrics need at least two curve points");
        return (f64::NAN, f64::NAN);
    }
    let mut peak = curve[0];
    let mut mdd: f64 = 0.0;
    for &v in curve {
        peak = peak.max(v);
        mdd = mdd.max((peak - v) / peak);
    }
    if mdd == 0.0 {
        log::warn!("Calmar ratio reported as +inf: curve has no drawdown");
        return (0.0, f64::INFINITY);
    }
    (mdd, mean(returns) / mdd)
}

/// Mean daily return over the downside deviation of the negative returns.
/// `+∞` when there are no negative returns or they are all equal.
pub fn metric_sor(returns: &[f64], mode: DownsideMode) -> f64 {
    let negatives: Vec<f64> = returns.iter().copied().filter(|&r| r < 0.0).collect();
    if negatives.is_empty() {
        log::warn!("Sortino ratio reported as +inf: no negative returns");
        return f64::INFINITY;
    }
    let var = population_variance(&negatives);
    let dd = match mode {
        DownsideMode::Deviation => var.sqrt(),
        DownsideMode::Variance => var,
    };
    if dd == 0.0 {
        log::warn!("Sortino ratio reported as +inf: zero downside deviation");
        return f64::INFINITY;
    }
    mean(returns) / dd
}
