use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{LossWeights, Objective, TapeLosses, Targets};
use super::model::MoEModel;
use super::ModelError;
use crate::marketdata::{Normalizer, Sample};
use crate::numerics::{Adam, Tape, Tensor2};
use crate::seed::{component_rng, Component};

/// Normalized inputs and targets stacked for batched training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    pub x: Tensor2,
    pub targets: Targets,
}

impl SampleMatrix {
    pub fn new(x: Tensor2, targets: Targets) -> Result<Self, ModelError> {
        if x.rows() != targets.len() {
            return Err(ModelError::Config(format!(
                "{} input rows but {} targets",
                x.rows(),
                targets.len()
            )));
        }
        Ok(Self { x, targets })
    }

    pub fn from_samples(samples: &[Sample], normalizer: &Normalizer) -> Result<Self, ModelError> {
        let y: Vec<u8> = samples.iter().map(|s| s.y).collect();
        let r: Vec<f64> = samples.iter().map(|s| s.r).collect();
        Self::new(normalizer.design_matrix(samples), Targets::new(&y, &r)?)
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            targets: Targets {
                labels: rows.iter().map(|&i| self.targets.labels[i]).collect(),
                returns: self.targets.returns.select_rows(rows),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub objective: Objective,
    /// Master seed; batch order draws from its expert-shuffle stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            weights: LossWeights::default(),
            objective: Objective::Individual,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("epochs and batch_size must be positive".to_string()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ModelError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        self.weights.validate()
    }
}

/// Loss components averaged over one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub supervised: f64,
    pub variation_ratio: f64,
    pub volatility: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub l_ind: f64,
    pub l_vr: f64,
    pub l_vol: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss,L_ind,L_vr,L_vol\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.valid_loss, e.l_ind, e.l_vr, e.l_vol
            ));
        }
        out
    }
}

fn score(
    model: &MoEModel,
    tape: &mut Tape,
    data: &SampleMatrix,
    config: &TrainConfig,
    trainable: bool,
) -> Result<(super::model::BoundMoe, super::loss::LossBreakdown), ModelError> {
    let bound = if trainable {
        model.bind(tape)
    } else {
        model.bind_frozen(tape)
    };
    let x = tape.constant(data.x.clone());
    let (_, heads) = bound.forward(tape, x)?;
    let losses = TapeLosses::split(tape, &heads)?;
    let breakdown = losses.total(tape, &data.targets, &config.weights, config.objective)?;
    Ok((bound, breakdown))
}

fn values(tape: &Tape, b: &super::loss::LossBreakdown) -> Result<LossValues, ModelError> {
    let get = |v: Option<crate::numerics::Var>| -> Result<f64, ModelError> {
        Ok(match v {
            Some(v) => tape.value(v)?.item(),
            None => 0.0,
        })
    };
    Ok(LossValues {
        total: tape.value(b.total)?.item(),
        supervised: tape.value(b.supervised)?.item(),
        variation_ratio: get(b.variation_ratio)?,
        volatility: get(b.volatility)?,
    })
}

/// Losses of `model` on `data` without recording gradients.
pub fn evaluate(model: &MoEModel, data: &SampleMatrix, config: &TrainConfig) -> Result<LossValues, ModelError> {
    let mut tape = Tape::new();
    let (_, b) = score(model, &mut tape, data, config, false)?;
    values(&tape, &b)
}

/// Mini-batch Adam over the Stage-1 loss. Returns the parameters of the
/// epoch with the lowest validation loss.
pub fn train_stage1(
    mut model: MoEModel,
    train: &SampleMatrix,
    valid: &SampleMatrix,
    config: &TrainConfig,
) -> Result<(MoEModel, TrainLog), ModelError> {
    config.validate()?;
    if train.rows() == 0 || valid.rows() == 0 {
        return Err(ModelError::Config("stage 1 needs non-empty train and valid splits".to_string()));
    }
    if model.n_experts() < 2 && (config.weights.w1 > 0.0 || config.weights.w2 > 0.0) {
        return Err(ModelError::Config(
            "uncertainty losses need at least two experts; set w1 = w2 = 0".to_string(),
        ));
    }
    let mut rng = component_rng(config.seed, Component::ExpertShuffle);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, MoEModel)> = None;
    let mut tape = Tape::new();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossValues::default();
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = train.select(chunk);
            tape.clear();
            let (bound, breakdown) = score(&model, &mut tape, &batch, config, true)?;
            let v = values(&tape, &breakdown)?;
            if !v.total.is_finite() {
                return Err(ModelError::Divergence {
                    stage: "stage 1",
                    epoch,
                    step,
                    loss: v.total,
                });
            }
            let grads = tape.backward(breakdown.total)?;
            let grads = bound
                .vars()
                .into_iter()
                .map(|var| grads.wrt(var))
                .collect::<Result<Vec<_>, _>>()?;
            adam.step(&mut model.params_mut(), &grads)?;
            let w = chunk.len() as f64;
            sums.total += w * v.total;
            sums.supervised += w * v.supervised;
            sums.variation_ratio += w * v.variation_ratio;
            sums.volatility += w * v.volatility;
        }
        let n = train.rows() as f64;
        let valid_loss = evaluate(&model, valid, config)?.total;
        if !valid_loss.is_finite() {
            return Err(ModelError::Divergence {
                stage: "stage 1 validation",
                epoch,
                step,
                loss: valid_loss,
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss: sums.total / n,
            valid_loss,
            l_ind: sums.supervised / n,
            l_vr: sums.variation_ratio / n,
            l_vol: sums.volatility / n,
        };
        log::info!(
            "stage 1 epoch {epoch}: train {:.6} valid {:.6} (ind {:.6}, vr {:.6}, vol {:.6})",
            entry.train_loss,
            entry.valid_loss,
            entry.l_ind,
            entry.l_vr,
            entry.l_vol
        );
        log.epochs.push(entry);
        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            best = Some((valid_loss, model.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, log))
}
