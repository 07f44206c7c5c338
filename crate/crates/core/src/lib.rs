//! Uncertainty-aware mixture-of-experts for daily stock selection.
//!
//! A shared MLP backbone feeds several expert heads that each predict the
//! next-day movement (two logits) and return. Experts are trained jointly with
//! an individual loss plus variation-ratio and volatility penalties; a bank of
//! gating networks then learns when to consult one more expert. The backtester
//! trades the top-k "certain" stocks each day and reports total return,
//! Sharpe, Calmar and Sortino ratios.

pub mod numerics;
pub mod seed;
pub mod marketdata;
pub mod moe;
pub mod router;
pub mod backtest;
pub mod checkpoint;
