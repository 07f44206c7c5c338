use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{softmax, Activation, BoundDense, DenseLayer, Tape, Tensor2, Var};

/// Width of each expert's output row: two movement logits and one return.
pub const HEAD_WIDTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub input_dim: usize,
    /// Backbone hidden widths; the last one is the embedding size.
    pub backbone_hidden: Vec<usize>,
    pub expert_hidden: usize,
    pub n_experts: usize,
    /// Fixed multiplier on each head's raw return output.
    #[serde(default = "default_return_scale")]
    pub return_scale: f64,
}

/// Daily returns are of order 1e-2; the head emits them in those units.
pub const DEFAULT_RETURN_SCALE: f64 = 0.01;

fn default_return_scale() -> f64 {
    DEFAULT_RETURN_SCALE
}

impl MoeConfig {
    pub fn new(input_dim: usize, hidden: usize, n_experts: usize) -> Self {
        Self {
            input_dim,
            backbone_hidden: vec![hidden, hidden],
            expert_hidden: hidden,
            n_experts,
            return_scale: DEFAULT_RETURN_SCALE,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone_hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.expert_hidden == 0 || self.n_experts == 0 {
            return Err(ModelError::Config(format!(
                "input_dim, expert_hidden and n_experts must be positive: {self:?}"
            )));
        }
        if !(self.return_scale.is_finite() && self.return_scale > 0.0) {
            return Err(ModelError::Config(format!(
                "return_scale must be positive and finite, got {}",
                self.return_scale
            )));
        }
        if self.backbone_hidden.is_empty() || self.backbone_hidden.contains(&0) {
            return Err(ModelError::Config(
                "backbone needs at least one non-empty hidden layer".to_string(),
            ));
        }
        Ok(())
    }
}

/// One expert: a LeakyReLU hidden layer and a linear output of [`HEAD_WIDTH`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertHead {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

/// Shared MLP backbone plus independent expert heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    pub config: MoeConfig,
    pub backbone: Vec<DenseLayer>,
    pub experts: Vec<ExpertHead>,
}

/// Result of a batched forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeForward {
    pub embedding: Tensor2,
    pub outputs: ExpertOutputs,
}

/// Tape handles for a bound model, in [`MoEModel::params`] order.
#[derive(Clone, Debug)]
pub struct BoundMoe {
    return_scale: f64,
    backbone: Vec<BoundDense>,
    experts: Vec<(BoundDense, BoundDense)>,
}

impl MoEModel {
    pub fn new<R: Rng + ?Sized>(config: MoeConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.backbone_hidden.len());
        let mut width = config.input_dim;
        for &h in &config.backbone_hidden {
            backbone.push(DenseLayer::init(width, h, Activation::LeakyRelu, rng));
            width = h;
        }
        let experts = (0..config.n_experts)
            .map(|_| ExpertHead {
                hidden: DenseLayer::init(width, config.expert_hidden, Activation::LeakyRelu, rng),
                output: DenseLayer::init(config.expert_hidden, HEAD_WIDTH, Activation::Identity, rng),
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            experts,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self.backbone.iter().flat_map(DenseLayer::params).collect();
        for e in &self.experts {
            out.extend(e.hidden.params());
            out.extend(e.output.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = self
            .backbone
            .iter_mut()
            .flat_map(DenseLayer::params_mut)
            .collect();
        for e in &mut self.experts {
            out.extend(e.hidden.params_mut());
            out.extend(e.output.params_mut());
        }
        out
    }

    fn check_input(&self, x: &Tensor2) -> Result<(), ModelError> {
        if x.cols() != self.config.input_dim {
            return Err(ModelError::Config(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Backbone embedding for a batch.
    pub fn embed(&self, x: &Tensor2) -> Result<Tensor2, ModelError> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.backbone {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Output rows of expert `i` for a batch of embeddings.
    pub fn expert_head(&self, i: usize, embedding: &Tensor2) -> Result<Tensor2, ModelError> {
        let head = &self.experts[i];
        let mut out = head.output.forward(&head.hidden.forward(embedding)?)?;
        for row in 0..out.rows() {
            let v = out.get(row, HEAD_WIDTH - 1) * self.config.return_scale;
            out.set(row, HEAD_WIDTH - 1, v);
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor2) -> Result<MoeForward, ModelError> {
        let embedding = self.embed(x)?;
        let heads = (0..self.n_experts())
            .map(|i| self.expert_head(i, &embedding))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MoeForward {
            embedding,
            outputs: ExpertOutputs::new(heads)?,
        })
    }

    /// Registers every parameter as trainable.
    pub fn bind(&self, tape: &mut Tape) -> BoundMoe {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant (no gradients flow).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundMoe {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundMoe {
        let mut bind = |layer: &DenseLayer| {
            if trainable {
                layer.bind(tape)
            } else {
                BoundDense {
                    weight: tape.constant(layer.weight.clone()),
                    bias: tape.constant(layer.bias.clone()),
                    activation: layer.activation,
                }
            }
        };
        BoundMoe {
            return_scale: self.config.return_scale,
            backbone: self.backbone.iter().map(&mut bind).collect(),
            experts: self
                .experts
                .iter()
                .map(|e| (bind(&e.hidden), bind(&e.output)))
                .collect(),
        }
    }
}

impl BoundMoe {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.backbone.iter().flat_map(BoundDense::vars).collect();
        for (h, o) in &self.experts {
            out.extend(h.vars());
            out.extend(o.vars());
        }
        out
    }

    /// Returns the embedding and one batch x [`HEAD_WIDTH`] value per expert.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>), ModelError> {
        let mut h = x;
        for layer in &self.backbone {
            h = layer.forward(tape, h)?;
        }
        let mut heads = Vec::with_capacity(self.experts.len());
        for (hidden, output) in &self.experts {
            let z = hidden.forward(tape, h)?;
            let out = output.forward(tape, z)?;
            let logits = tape.cols(out, 0, HEAD_WIDTH - 1)?;
            let raw = tape.cols(out, HEAD_WIDTH - 1, 1)?;
            let ret = tape.scale(raw, self.return_scale)?;
            heads.push(tape.concat_cols(&[logits, ret])?);
        }
        Ok((h, heads))
    }
}

/// Mean predictions of an expert prefix for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefixStats {
    /// Mean of the experts' softmax up-probabilities.
    pub p_up: f64,
    /// Mean predicted return.
    pub r_hat: f64,
    /// Mean logits `[down, up]`.
    pub logits: [f64; 2],
}

impl PrefixStats {
    /// Mean up-logit margin `logit_up − logit_down`.
    pub fn logit_margin(&self) -> f64 {
        self.logits[1] - self.logits[0]
    }
}

/// Raw per-expert outputs for a batch: each tensor is rows x [`HEAD_WIDTH`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOutputs {
    heads: Vec<Tensor2>,
}

impl ExpertOutputs {
    pub fn new(heads: Vec<Tensor2>) -> Result<Self, ModelError> {
        let rows = heads.first().map(Tensor2::rows).ok_or_else(|| {
            ModelError::Config("expert outputs need at least one expert".to_string())
        })?;
        if heads.iter().any(|h| h.shape() != (rows, HEAD_WIDTH)) {
            return Err(ModelError::Config(format!(
                "every expert output must be {rows} x {HEAD_WIDTH}"
            )));
        }
        Ok(Self { heads })
    }

    /// Single-sample outputs from per-expert logits and returns.
    pub fn single(logits: &[[f64; 2]], returns: &[f64]) -> Result<Self, ModelError> {
        if logits.len() != returns.len() {
            return Err(ModelError::Config(
                "one return per expert is required".to_string(),
            ));
        }
        Self::new(
            logits
                .iter()
                .zip(returns)
                .map(|(l, &r)| Tensor2::row_vector(vec![l[0], l[1], r]))
                .collect(),
        )
    }

    pub fn n_experts(&self) -> usize {
        self.heads.len()
    }

    pub fn rows(&self) -> usize {
        self.heads[0].rows()
    }

    pub fn heads(&self) -> &[Tensor2] {
        &self.heads
    }

    pub fn logits(&self, expert: usize, row: usize) -> [f64; 2] {
        let h = &self.heads[expert];
        [h.get(row, 0), h.get(row, 1)]
    }

    pub fn p_up(&self, expert: usize, row: usize) -> f64 {
        softmax(&self.logits(expert, row))[1]
    }

    pub fn r_hat(&self, expert: usize, row: usize) -> f64 {
        self.heads[expert].get(row, 2)
    }

    /// Averages over experts `0..k`, summed in index order.
    pub fn prefix(&self, k: usize, row: usize) -> PrefixStats {
        let mut p = 0.0;
        let mut r = 0.0;
        let mut l = [0.0; 2];
        for i in 0..k {
            p += self.p_up(i, row);
            r += self.r_hat(i, row);
            let li = self.logits(i, row);
            l[0] += li[0];
            l[1] += li[1];
        }
        let kf = k as f64;
        PrefixStats {
            p_up: p / kf,
            r_hat: r / kf,
            logits: [l[0] / kf, l[1] / kf],
        }
    }

    pub fn ensemble(&self, row: usize) -> PrefixStats {
        self.prefix(self.n_experts(), row)
    }

    /// Reorders experts; `order[j]` is the source index of new expert `j`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            heads: order.iter().map(|&i| self.heads[i].clone()).collect(),
        }
    }
}
