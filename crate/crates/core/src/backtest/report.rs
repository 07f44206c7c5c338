use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::strategy::BacktestReport;
use super::{BacktestError, Metrics};

/// `key=value` lines: the five metrics plus day counts.
pub fn metrics_text(report: &BacktestReport) -> String {
    let m = &report.metrics;
    let mut out = String::new();
    for (name, value) in Metrics::NAMES.iter().zip(m.values()) {
        let _ = writeln!(out, "{name}={value}");
    }
    let _ = writeln!(out, "days={}", report.daily_returns.len());
    let _ = writeln!(out, "traded_days={}", report.traded_days().len());
    let used = if report.experts_used_mean.is_empty() {
        0.0
    } else {
        report.experts_used_mean.iter().sum::<f64>() / report.experts_used_mean.len() as f64
    };
    let _ = writeln!(out, "experts_used_mean={used}");
    let _ = writeln!(out, "final_net_value={}", report.equity.last().copied().unwrap_or(1.0));
    out
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_metrics_text(text: &str) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|e| format!("line {}: value of `{}`: {e}", i + 1, k.trim()))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

pub fn equity_csv(report: &BacktestReport) -> String {
    let mut out = String::from("date,net_value,daily_return,n_held,experts_used_mean\n");
    for (i, date) in report.dates.iter().enumerate() {
        let _ = writeln!(
            out,
            "{date},{},{},{},{}",
            report.equity[i + 1],
            report.daily_returns[i],
            report.positions[i].held.len(),
            report.experts_used_mean[i]
        );
    }
    out
}

/// One row per held stock per day; cash days get an empty stock field.
pub fn positions_csv(report: &BacktestReport) -> String {
    let mut out = String::from("date,stock,weight,realized_return,portfolio_return\n");
    for p in &report.positions {
        if p.held.is_empty() {
            let _ = writeln!(out, "{},,0,0,{}", p.date, p.portfolio_return);
        }
        for ((s, w), r) in p.held.iter().zip(&p.weights).zip(&p.realized) {
            let _ = writeln!(out, "{},{s},{w},{r},{}", p.date, p.portfolio_return);
        }
    }
    out
}

/// Equity curve as a standalone SVG line chart.
pub fn equity_svg(report: &BacktestReport, title: &str) -> String {
    equity_curve_svg(&report.dates, &report.equity, title)
}

/// Line chart of `values`; `dates` label the first and last points on the axis.
pub fn equity_curve_svg(dates: &[chrono::NaiveDate], values: &[f64], title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let steps = (values.len().max(2) - 1) as f64;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / steps;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
        .collect();
    let first = dates.first().map(|d| d.to_string()).unwrap_or_default();
    let last = dates.last().map(|d| d.to_string()).unwrap_or_default();
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="25" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD},{PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    if (lo..=hi).contains(&1.0) {
        let _ = writeln!(
            svg,
            r##"<line x1="{PAD}" y1="{y1:.2}" x2="{}" y2="{y1:.2}" stroke="#999" stroke-dasharray="4 4"/>"##,
            W - PAD,
            y1 = y(1.0)
        );
    }
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
        points.join(" ")
    );
    for (v, anchor_y) in [(hi, y(hi)), (lo, y(lo))] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.4}</text>"#,
            PAD - 5.0,
            anchor_y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="11">{first}</text>"#,
        H - PAD + 18.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{last}</text>"#,
        W - PAD,
        H - PAD + 18.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes `metrics.txt`, `equity.csv` and `positions.csv` into `dir`.
pub fn write_report(dir: &Path, report: &BacktestReport) -> Result<(), BacktestError> {
    let io = |path: &Path, source| BacktestError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (name, body) in [
        ("metrics.txt", metrics_text(report)),
        ("equity.csv", equity_csv(report)),
        ("positions.csv", positions_csv(report)),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| io(&path, e))?;
    }
    Ok(())
}
