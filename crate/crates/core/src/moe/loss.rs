use serde::{Deserialize, Serialize};

use super::model::{ExpertOutputs, HEAD_WIDTH};
use super::ModelError;
use crate::numerics::{Tape, Tensor2, Var};

/// Weights of the regression, variation-ratio and volatility terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            w1: 1.0,
            w2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("lambda", self.lambda), ("w1", self.w1), ("w2", self.w2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which supervised loss drives Stage 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Every expert is fitted to the targets on its own.
    #[default]
    Individual,
    /// Only the expert average is fitted to the targets.
    Collaborative,
}

/// Batch targets: movement class per row and a rows x 1 return column.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<usize>,
    pub returns: Tensor2,
}

impl Targets {
    pub fn new(y: &[u8], r: &[f64]) -> Result<Self, ModelError> {
        if y.len() != r.len() {
            return Err(ModelError::Config(format!(
                "{} movement labels but {} returns",
                y.len(),
                r.len()
            )));
        }
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(ModelError::Config(format!("movement label must be 0 or 1, got {bad}")));
        }
        Ok(Self {
            labels: y.iter().map(|&v| v as usize).collect(),
            returns: Tensor2::column(r.to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss terms recorded on a tape; uncertainty terms are absent when their
/// weight is zero.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub supervised: Var,
    pub variation_ratio: Option<Var>,
    pub volatility: Option<Var>,
}

/// Per-expert logit and return columns of a taped forward pass.
#[derive(Clone, Debug)]
pub struct TapeLosses {
    logits: Vec<Var>,
    returns: Vec<Var>,
}

impl TapeLosses {
    /// Splits each rows x [`HEAD_WIDTH`] head into logits and return.
    pub fn split(tape: &mut Tape, heads: &[Var]) -> Result<Self, ModelError> {
        if heads.is_empty() {
            return Err(ModelError::Config("no expert heads to score".to_string()));
        }
        let mut logits = Vec::with_capacity(heads.len());
        let mut returns = Vec::with_capacity(heads.len());
        for &h in heads {
            logits.push(tape.cols(h, 0, 2)?);
            returns.push(tape.cols(h, 2, HEAD_WIDTH - 2)?);
        }
        Ok(Self { logits, returns })
    }

    pub fn n_experts(&self) -> usize {
        self.logits.len()
    }

    fn cross_entropy(tape: &mut Tape, logits: Var, targets: &Targets) -> Result<Var, ModelError> {
        let log_p = tape.log_softmax_rows(logits)?;
        let picked = tape.pick_cols(log_p, &targets.labels)?;
        let mean = tape.mean(picked)?;
        Ok(tape.scale(mean, -1.0)?)
    }

    fn squared_error(tape: &mut Tape, predicted: Var, targets: &Targets) -> Result<Var, ModelError> {
        let r = tape.constant(targets.returns.clone());
        let diff = tape.sub(predicted, r)?;
        let sq = tape.square(diff)?;
        Ok(tape.mean(sq)?)
    }

    fn weighted(tape: &mut Tape, ce: Var, mse: Var, lambda: f64) -> Result<Var, ModelError> {
        if lambda == 0.0 {
            return Ok(ce);
        }
        let reg = tape.scale(mse, lambda)?;
        Ok(tape.add(ce, reg)?)
    }

    /// Mean over experts of CE plus `lambda` times mean over experts of MSE.
    pub fn individual(&self, tape: &mut Tape, targets: &Targets, lambda: f64) -> Result<Var, ModelError> {
        let mut ce = Vec::with_capacity(self.n_experts());
        let mut mse = Vec::with_capacity(self.n_experts());
        for (&l, &r) in self.logits.iter().zip(&self.returns) {
            ce.push(Self::cross_entropy(tape, l, targets)?);
            mse.push(Self::squared_error(tape, r, targets)?);
        }
        let ce = tape.average(&ce)?;
        let mse = tape.average(&mse)?;
        Self::weighted(tape, ce, mse, lambda)
    }

    /// CE on the mean logits plus `lambda` times MSE of the mean return.
    pub fn collaborative(&self, tape: &mut Tape, targets: &Targets, lambda: f64) -> Result<Var, ModelError> {
        let logits = tape.average(&self.logits)?;
        let ret = tape.average(&self.returns)?;
        let ce = Self::cross_entropy(tape, logits, targets)?;
        let mse = Self::squared_error(tape, ret, targets)?;
        Self::weighted(tape, ce, mse, lambda)
    }

    /// Mean over rows of `min(n − s, s) / n`, `s` the summed up-probability.
    pub fn variation_ratio(&self, tape: &mut Tape) -> Result<Var, ModelError> {
        let n = self.n_experts() as f64;
        let mut s: Option<Var> = None;
        for &l in &self.logits {
            let p = tape.softmax_rows(l)?;
            let up = tape.cols(p, 1, 1)?;
            s = Some(match s {
                Some(acc) => tape.add(acc, up)?,
                None => up,
            });
        }
        let s = s.expect("at least one expert");
        let neg = tape.scale(s, -1.0)?;
        let down = tape.offset(neg, n)?;
        let m = tape.min(down, s)?;
        let vr = tape.scale(m, 1.0 / n)?;
        Ok(tape.mean(vr)?)
    }

    /// Mean over rows of the population variance of expert returns, in the
    /// pairwise form `Σ_{i<j} (r_i − r_j)² / n²`.
    pub fn volatility(&self, tape: &mut Tape) -> Result<Var, ModelError> {
        let n = self.returns.len();
        let first = self.returns[0];
        let zero = tape.sub(first, first)?;
        let mut acc = tape.square(zero)?;
        for i in 0..n {
            for j in i + 1..n {
                let d = tape.sub(self.returns[i], self.returns[j])?;
                let sq = tape.square(d)?;
                acc = tape.add(acc, sq)?;
            }
        }
        let var = tape.scale(acc, 1.0 / (n * n) as f64)?;
        Ok(tape.mean(var)?)
    }

    /// Supervised objective plus `w1·L_vr + w2·L_vol`, each term counted once.
    pub fn total(
        &self,
        tape: &mut Tape,
        targets: &Targets,
        weights: &LossWeights,
        objective: Objective,
    ) -> Result<LossBreakdown, ModelError> {
        let supervised = match objective {
            Objective::Individual => self.individual(tape, targets, weights.lambda)?,
            Objective::Collaborative => self.collaborative(tape, targets, weights.lambda)?,
        };
        let mut total = supervised;
        let mut variation_ratio = None;
        let mut volatility = None;
        if weights.w1 > 0.0 {
            let vr = self.variation_ratio(tape)?;
            let term = tape.scale(vr, weights.w1)?;
            total = tape.add(total, term)?;
            variation_ratio = Some(vr);
        }
        if weights.w2 > 0.0 {
            let vol = self.volatility(tape)?;
            let term = tape.scale(vol, weights.w2)?;
            total = tape.add(total, term)?;
            volatility = Some(vol);
        }
        Ok(LossBreakdown {
            total,
            supervised,
            variation_ratio,
            volatility,
        })
    }
}

fn constant_heads(tape: &mut Tape, outputs: &ExpertOutputs) -> Result<TapeLosses, ModelError> {
    let heads: Vec<Var> = outputs
        .heads()
        .iter()
        .map(|h| tape.constant(h.clone()))
        .collect();
    TapeLosses::split(tape, &heads)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64, ModelError> {
    Ok(tape.value(v)?.item())
}

fn checked_targets(outputs: &ExpertOutputs, y: &[u8], r: &[f64]) -> Result<Targets, ModelError> {
    let targets = Targets::new(y, r)?;
    if targets.len() != outputs.rows() {
        return Err(ModelError::Config(format!(
            "{} targets for {} output rows",
            targets.len(),
            outputs.rows()
        )));
    }
    Ok(targets)
}

/// Batch-mean individual loss of fixed outputs.
pub fn loss_individual(outputs: &ExpertOutputs, y: &[u8], r: &[f64], lambda: f64) -> Result<f64, ModelError> {
    let targets = checked_targets(outputs, y, r)?;
    let mut tape = Tape::new();
    let heads = constant_heads(&mut tape, outputs)?;
    let v = heads.individual(&mut tape, &targets, lambda)?;
    scalar(&tape, v)
}

/// Batch-mean collaborative loss of fixed outputs, regression weight 1.
pub fn loss_collaborative(outputs: &ExpertOutputs, y: &[u8], r: &[f64]) -> Result<f64, ModelError> {
    let targets = checked_targets(outputs, y, r)?;
    let mut tape = Tape::new();
    let heads = constant_heads(&mut tape, outputs)?;
    let v = heads.collaborative(&mut tape, &targets, 1.0)?;
    scalar(&tape, v)
}

/// Batch-mean soft variation ratio.
pub fn loss_variation_ratio(outputs: &ExpertOutputs) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let heads = constant_heads(&mut tape, outputs)?;
    let v = heads.variation_ratio(&mut tape)?;
    scalar(&tape, v)
}

/// Batch-mean population variance of predicted returns.
pub fn loss_volatility(outputs: &ExpertOutputs) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let heads = constant_heads(&mut tape, outputs)?;
    let v = heads.volatility(&mut tape)?;
    scalar(&tape, v)
}

/// Batch-mean total loss with the individual objective.
pub fn loss_total(outputs: &ExpertOutputs, y: &[u8], r: &[f64], weights: &LossWeights) -> Result<f64, ModelError> {
    let targets = checked_targets(outputs, y, r)?;
    let mut tape = Tape::new();
    let heads = constant_heads(&mut tape, outputs)?;
    let b = heads.total(&mut tape, &targets, weights, Objective::Individual)?;
    scalar(&tape, b.total)
}

/// Variation ratio of one row from hard votes: an expert votes up when its
/// up-probability is at least one half.
pub fn variation_ratio_hard(outputs: &ExpertOutputs, row: usize) -> f64 {
    let n = outputs.n_experts();
    let up = (0..n).filter(|&i| outputs.p_up(i, row) >= 0.5).count();
    let share = up as f64 / n as f64;
    (1.0 - share).min(share)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ln2() -> f64 {
        std::f64::consts::LN_2
    }

    /// Logits `[0, ln(p/(1−p))]` give up-probability `p`.
    fn logits_for(p: f64) -> [f64; 2] {
        [0.0, (p / (1.0 - p)).ln()]
    }

    #[test]
    fn single_expert_at_even_odds() {
        let out = ExpertOutputs::single(&[[0.0, 0.0]], &[0.03]).unwrap();
        let v = loss_individual(&out, &[1], &[0.03], 0.85).unwrap();
        assert_abs_diff_eq!(v, ln2(), epsilon = 1e-15);
    }

    #[test]
    fn zero_lambda_is_pure_cross_entropy() {
        let out = ExpertOutputs::single(&[logits_for(0.8), logits_for(0.3)], &[0.5, -0.5]).unwrap();
        let v = loss_individual(&out, &[1], &[0.0], 0.0).unwrap();
        let expected = (-(0.8f64).ln() - (0.3f64).ln()) / 2.0;
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn two_expert_hand_oracle() {
        let out = ExpertOutputs::single(&[logits_for(0.7), logits_for(0.4)], &[0.02, -0.01]).unwrap();
        let v = loss_individual(&out, &[0], &[0.01], 0.5).unwrap();
        let ce = (-(0.3f64).ln() - (0.6f64).ln()) / 2.0;
        let mse = (0.01f64.powi(2) + 0.02f64.powi(2)) / 2.0;
        assert_abs_diff_eq!(v, ce + 0.5 * mse, epsilon = 1e-10);
    }

    #[test]
    fn collaborative_degenerate_cases() {
        let single = ExpertOutputs::single(&[logits_for(0.65)], &[0.04]).unwrap();
        assert_abs_diff_eq!(
            loss_collaborative(&single, &[1], &[0.01]).unwrap(),
            loss_individual(&single, &[1], &[0.01], 1.0).unwrap(),
            epsilon = 1e-15
        );
        let copies = ExpertOutputs::single(&[[0.3, -0.2], [0.3, -0.2]], &[0.01, 0.01]).unwrap();
        assert_abs_diff_eq!(
            loss_collaborative(&copies, &[0], &[0.02]).unwrap(),
            loss_individual(&copies, &[0], &[0.02], 1.0).unwrap(),
            epsilon = 1e-15
        );
        for a in [0.5, 3.0, 40.0] {
            let opposite = ExpertOutputs::single(&[[a, -a], [-a, a]], &[0.0, 0.0]).unwrap();
            assert_abs_diff_eq!(loss_collaborative(&opposite, &[1], &[0.0]).unwrap(), ln2(), epsilon = 1e-15);
        }
    }

    #[test]
    fn variation_ratio_examples() {
        let sure = ExpertOutputs::single(&[[0.0, 60.0]; 4], &[0.0; 4]).unwrap();
        assert_eq!(loss_variation_ratio(&sure).unwrap(), 0.0);
        let even = ExpertOutputs::single(&[[0.0, 0.0]; 4], &[0.0; 4]).unwrap();
        assert_eq!(loss_variation_ratio(&even).unwrap(), 0.5);
        let split = ExpertOutputs::single(&[[0.0, 60.0], [0.0, 60.0], [0.0, 60.0], [60.0, 0.0]], &[0.0; 4]).unwrap();
        assert_eq!(variation_ratio_hard(&split, 0), 0.25);
        assert_abs_diff_eq!(loss_variation_ratio(&split).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn volatility_examples() {
        let same = ExpertOutputs::single(&[[0.0, 0.0]; 3], &[0.02; 3]).unwrap();
        assert_eq!(loss_volatility(&same).unwrap(), 0.0);
        let pair = ExpertOutputs::single(&[[0.0, 0.0]; 2], &[0.01, -0.01]).unwrap();
        assert_abs_diff_eq!(loss_volatility(&pair).unwrap(), 1e-4, epsilon = 1e-16);
        let shifted = ExpertOutputs::single(&[[0.0, 0.0]; 2], &[0.51, 0.49]).unwrap();
        assert_abs_diff_eq!(loss_volatility(&shifted).unwrap(), 1e-4, epsilon = 1e-15);
    }

    #[test]
    fn total_is_additive() {
        let out = ExpertOutputs::single(
            &[logits_for(0.9), logits_for(0.6), logits_for(0.2), logits_for(0.5)],
            &[0.03, -0.01, 0.02, 0.0],
        )
        .unwrap();
        let (y, r) = ([1u8], [0.015]);
        let ind = loss_individual(&out, &y, &r, 0.85).unwrap();
        let none = LossWeights {
            w1: 0.0,
            w2: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(loss_total(&out, &y, &r, &none).unwrap(), ind);
        let sum = ind + loss_variation_ratio(&out).unwrap() + loss_volatility(&out).unwrap();
        let total = loss_total(&out, &y, &r, &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(total, sum, epsilon = 1e-15);
    }

    #[test]
    fn rejects_mismatched_targets() {
        let out = ExpertOutputs::single(&[[0.0, 0.0]], &[0.0]).unwrap();
        assert!(loss_individual(&out, &[1, 0], &[0.0, 0.0], 1.0).is_err());
        assert!(loss_individual(&out, &[2], &[0.0], 1.0).is_err());
        assert!(LossWeights { lambda: -1.0, w1: 1.0, w2: 1.0 }.validate().is_err());
    }
}
