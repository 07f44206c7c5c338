//! Stage-2 gating: one shared reduction layer and `n − 1` decision layers that
//! decide, expert by expert, whether consulting one more expert is worth it.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::moe::{MoEModel, ModelError, PrefixStats, SampleMatrix};
use crate::numerics::{softmax, Activation, Adam, BoundDense, DenseLayer, Tape, Tensor2, Var};
use crate::seed::{component_rng, Component};

pub const REDUCED_DIM: usize = 8;
/// Router input width: reduced embedding plus two prefix statistics.
pub const ROUTER_INPUT: usize = REDUCED_DIM + 2;
const V_CLAMP: f64 = 1e-7;

/// Which prefix movement statistic the routers see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixMode {
    /// Mean up-probability of the prefix.
    #[default]
    Probability,
    /// Mean up-minus-down logit margin of the prefix.
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub gate_threshold: f64,
    pub omega: f64,
    pub prefix_mode: PrefixMode,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            gate_threshold: 0.5,
            omega: 1.7,
            prefix_mode: PrefixMode::Probability,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterBank {
    /// Embedding to [`REDUCED_DIM`], LeakyReLU.
    pub reduce: DenseLayer,
    /// Router `k` (index `k − 1`) maps [`ROUTER_INPUT`] to one sigmoid unit.
    pub deciders: Vec<DenseLayer>,
    pub config: RouterConfig,
}

#[derive(Clone, Debug)]
struct BoundBank {
    reduce: BoundDense,
    deciders: Vec<BoundDense>,
}

impl BoundBank {
    fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.reduce.vars().to_vec();
        for d in &self.deciders {
            out.extend(d.vars());
        }
        out
    }
}

impl RouterBank {
    pub fn new<R: Rng + ?Sized>(
        embedding_dim: usize,
        n_experts: usize,
        config: RouterConfig,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if n_experts < 2 {
            return Err(ModelError::Config(format!(
                "routers need at least two experts, got {n_experts}"
            )));
        }
        if !(config.gate_threshold >= 0.0 && config.gate_threshold <= 1.0) {
            return Err(ModelError::Config(format!(
                "gate threshold must lie in [0, 1], got {}",
                config.gate_threshold
            )));
        }
        if !config.omega.is_finite() || config.omega < 0.0 {
            return Err(ModelError::Config(format!("omega must be non-negative, got {}", config.omega)));
        }
        let reduce = DenseLayer::init(embedding_dim, REDUCED_DIM, Activation::LeakyRelu, rng);
        let deciders = (1..n_experts)
            .map(|_| DenseLayer::init(ROUTER_INPUT, 1, Activation::Sigmoid, rng))
            .collect();
        Ok(Self {
            reduce,
            deciders,
            config,
        })
    }

    pub fn n_routers(&self) -> usize {
        self.deciders.len()
    }

    /// Number of experts this bank gates.
    pub fn n_experts(&self) -> usize {
        self.deciders.len() + 1
    }

    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self.reduce.params().to_vec();
        for d in &self.deciders {
            out.extend(d.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = self.reduce.params_mut().into_iter().collect();
        for d in &mut self.deciders {
            out.extend(d.params_mut());
        }
        out
    }

    fn bind(&self, tape: &mut Tape) -> BoundBank {
        BoundBank {
            reduce: self.reduce.bind(tape),
            deciders: self.deciders.iter().map(|d| d.bind(tape)).collect(),
        }
    }

    /// The two prefix statistics fed to every router.
    pub fn prefix_features(&self, stats: &PrefixStats) -> [f64; 2] {
        prefix_features(self.config.prefix_mode, stats)
    }

    fn check_k(&self, k: usize) -> Result<(), ModelError> {
        if k == 0 || k > self.n_routers() {
            return Err(ModelError::Config(format!(
                "router index {k} outside 1..={}",
                self.n_routers()
            )));
        }
        Ok(())
    }

    /// Activation `v_k` of router `k` for one raw embedding.
    pub fn activation(&self, embedding: &[f64], stats: &PrefixStats, k: usize) -> Result<f64, ModelError> {
        self.check_k(k)?;
        let (e, _) = normalize_rows(&Tensor2::row_vector(embedding.to_vec()));
        let reduced = self.reduce.forward(&e)?;
        let prefix = Tensor2::row_vector(self.prefix_features(stats).to_vec());
        Ok(self.decide(&reduced, &prefix, k)?[0])
    }

    /// Router `k` on already reduced embeddings and rows x 2 prefix features.
    fn decide(&self, reduced: &Tensor2, prefix: &Tensor2, k: usize) -> Result<Vec<f64>, ModelError> {
        let input = Tensor2::concat_cols(&[reduced, prefix])?;
        Ok(self.deciders[k - 1].forward(&input)?.into_data())
    }
}

fn prefix_features(mode: PrefixMode, stats: &PrefixStats) -> [f64; 2] {
    match mode {
        PrefixMode::Probability => [stats.p_up, stats.r_hat],
        PrefixMode::Logit => [stats.logit_margin(), stats.r_hat],
    }
}

/// Scales each row to unit L2 norm; all-zero rows stay zero. Returns the
/// number of zero rows.
pub fn normalize_rows(e: &Tensor2) -> (Tensor2, usize) {
    let mut out = e.clone();
    let cols = e.cols();
    let mut zeros = 0;
    for r in 0..e.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zeros += 1;
        }
    }
    if zeros > 0 {
        log::warn!("{zeros} zero embedding(s) left unnormalized");
    }
    (out, zeros)
}

fn sign_positive(x: f64) -> bool {
    x >= 0.0
}

/// `0` when the prefix gets both the movement class (mean-logit argmax, ties
/// up) and the return sign (zero counts as positive) right, else `1`.
pub fn make_router_label(mean_logits: [f64; 2], mean_return: f64, y: u8, r: f64) -> u8 {
    let predicted = u8::from(mean_logits[1] >= mean_logits[0]);
    let movement_ok = predicted == y;
    let sign_ok = sign_positive(mean_return) == sign_positive(r);
    u8::from(!(movement_ok && sign_ok))
}

/// Router-`k` label of one sample from the first `k` experts.
pub fn make_router_labels(outputs: &crate::moe::ExpertOutputs, row: usize, y: u8, r: f64, k: usize) -> u8 {
    let stats = outputs.prefix(k, row);
    make_router_label(stats.logits, stats.r_hat, y, r)
}

fn router_loss_on_tape(tape: &mut Tape, v: Var, y_on: &[u8], omega: f64) -> Result<Var, ModelError> {
    let v = tape.clamp(v, V_CLAMP, 1.0 - V_CLAMP)?;
    let ln_v = tape.ln(v)?;
    let neg = tape.scale(v, -1.0)?;
    let one_minus = tape.offset(neg, 1.0)?;
    let ln_1mv = tape.ln(one_minus)?;
    let on = tape.constant(Tensor2::column(y_on.iter().map(|&y| -omega * f64::from(y)).collect()));
    let off = tape.constant(Tensor2::column(y_on.iter().map(|&y| -(1.0 - f64::from(y))).collect()));
    let a = tape.mul(on, ln_v)?;
    let b = tape.mul(off, ln_1mv)?;
    let rows = tape.add(a, b)?;
    Ok(tape.mean(rows)?)
}

/// Weighted binary cross-entropy of one activation.
pub fn router_loss(v: f64, y_on: u8, omega: f64) -> f64 {
    let mut tape = Tape::new();
    let var = tape.constant(Tensor2::scalar(v));
    let loss = router_loss_on_tape(&mut tape, var, &[y_on], omega).expect("scalar shapes agree");
    tape.value(loss).expect("live tape").item()
}

/// Frozen Stage-1 quantities the routers train on.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterData {
    /// Unit-norm backbone embeddings.
    pub embedding: Tensor2,
    /// For `k = 1..n−1`, rows x 2 prefix features.
    pub prefix: Vec<Tensor2>,
    /// For `k = 1..n−1`, one `y_on` per row.
    pub labels: Vec<Vec<u8>>,
}

impl RouterData {
    pub fn build(model: &MoEModel, data: &SampleMatrix, mode: PrefixMode) -> Result<Self, ModelError> {
        let forward = model.forward(&data.x)?;
        let (embedding, _) = normalize_rows(&forward.embedding);
        let n = model.n_experts();
        let mut prefix = Vec::with_capacity(n.saturating_sub(1));
        let mut labels = Vec::with_capacity(n.saturating_sub(1));
        for k in 1..n {
            let mut feats = Vec::with_capacity(data.rows() * 2);
            let mut ys = Vec::with_capacity(data.rows());
            for row in 0..data.rows() {
                let stats = forward.outputs.prefix(k, row);
                feats.extend(prefix_features(mode, &stats));
                let y = data.targets.labels[row] as u8;
                let r = data.targets.returns.get(row, 0);
                ys.push(make_router_label(stats.logits, stats.r_hat, y, r));
            }
            prefix.push(Tensor2::new(data.rows(), 2, feats)?);
            labels.push(ys);
        }
        Ok(Self {
            embedding,
            prefix,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.embedding.rows()
    }

    /// Share of `y_on = 1` labels per router.
    pub fn on_rates(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|l| l.iter().map(|&v| f64::from(v)).sum::<f64>() / l.len().max(1) as f64)
            .collect()
    }

    fn select(&self, rows: &[usize]) -> Self {
        Self {
            embedding: self.embedding.select_rows(rows),
            prefix: self.prefix.iter().map(|p| p.select_rows(rows)).collect(),
            labels: self
                .labels
                .iter()
                .map(|l| rows.iter().map(|&i| l[i]).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Master seed; batch order draws from its router-shuffle stream.
    pub seed: u64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterLog {
    /// Mean summed router loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub on_rates: Vec<f64>,
}

impl RouterLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,router_loss\n");
        for (i, l) in self.epoch_loss.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, l));
        }
        out
    }
}

/// Trains all routers jointly on the sum of their losses, with the Stage-1
/// model frozen.
pub fn train_stage2(
    bank: RouterBank,
    model: &MoEModel,
    train: &SampleMatrix,
    config: &RouterTrainConfig,
) -> Result<(RouterBank, RouterLog), ModelError> {
    if bank.n_experts() != model.n_experts() {
        return Err(ModelError::Config(format!(
            "bank gates {} experts but the model has {}",
            bank.n_experts(),
            model.n_experts()
        )));
    }
    let data = RouterData::build(model, train, bank.config.prefix_mode)?;
    train_routers(bank, &data, config)
}

/// Router training on precomputed inputs and labels.
pub fn train_routers(
    mut bank: RouterBank,
    data: &RouterData,
    config: &RouterTrainConfig,
) -> Result<(RouterBank, RouterLog), ModelError> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(ModelError::Config("epochs and batch_size must be positive".to_string()));
    }
    if !config.lr.is_finite() || config.lr < 0.0 {
        return Err(ModelError::Config(format!("invalid router learning rate {}", config.lr)));
    }
    if data.rows() == 0 {
        return Err(ModelError::Config("router training set is empty".to_string()));
    }
    if data.prefix.len() != bank.n_routers() {
        return Err(ModelError::Config(format!(
            "router data has {} prefixes for {} routers",
            data.prefix.len(),
            bank.n_routers()
        )));
    }
    let mut rng = component_rng(config.seed, Component::RouterShuffle);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut log = RouterLog {
        on_rates: data.on_rates(),
        ..RouterLog::default()
    };
    let mut tape = Tape::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch = data.select(chunk);
            tape.clear();
            let (bound, total) = bank.objective_on_tape(&mut tape, &batch)?;
            let value = tape.value(total)?.item();
            if !value.is_finite() {
                return Err(ModelError::Divergence {
                    stage: "stage 2",
                    epoch,
                    step,
                    loss: value,
                });
            }
            let grads = tape.backward(total)?;
            let grads = bound
                .vars()
                .into_iter()
                .map(|v| grads.wrt(v))
                .collect::<Result<Vec<_>, _>>()?;
            adam.step(&mut bank.params_mut(), &grads)?;
            sum += value * chunk.len() as f64;
        }
        let mean = sum / data.rows() as f64;
        log::info!("stage 2 epoch {epoch}: router loss {mean:.6}");
        log.epoch_loss.push(mean);
    }
    Ok((bank, log))
}

impl RouterBank {
    fn objective_on_tape(&self, tape: &mut Tape, data: &RouterData) -> Result<(BoundBank, Var), ModelError> {
        let bound = self.bind(tape);
        let e = tape.constant(data.embedding.clone());
        let reduced = bound.reduce.forward(tape, e)?;
        let mut total: Option<Var> = None;
        for (k, decider) in bound.deciders.iter().enumerate() {
            let prefix = tape.constant(data.prefix[k].clone());
            let input = tape.concat_cols(&[reduced, prefix])?;
            let v = decider.forward(tape, input)?;
            let loss = router_loss_on_tape(tape, v, &data.labels[k], self.config.omega)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        Ok((bound, total.expect("at least one router")))
    }
}

/// Summed router loss over `data` and its gradient, one tensor per entry of
/// [`RouterBank::params`].
pub fn router_objective(bank: &RouterBank, data: &RouterData) -> Result<(f64, Vec<Tensor2>), ModelError> {
    if data.prefix.len() != bank.n_routers() {
        return Err(ModelError::Config(format!(
            "router data has {} prefixes for {} routers",
            data.prefix.len(),
            bank.n_routers()
        )));
    }
    let mut tape = Tape::new();
    let (bound, total) = bank.objective_on_tape(&mut tape, data)?;
    let value = tape.value(total)?.item();
    let grads = tape.backward(total)?;
    let grads = bound
        .vars()
        .into_iter()
        .map(|v| grads.wrt(v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((value, grads))
}

/// Outcome of sequential expert activation for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Route {
    /// Number of experts consulted.
    pub m: usize,
    pub stats: PrefixStats,
}

struct Running {
    p: f64,
    r: f64,
    l: [f64; 2],
}

impl Running {
    fn stats(&self, k: usize) -> PrefixStats {
        let kf = k as f64;
        PrefixStats {
            p_up: self.p / kf,
            r_hat: self.r / kf,
            logits: [self.l[0] / kf, self.l[1] / kf],
        }
    }
}

/// Consults experts in order, asking router `k` after expert `k` whether to
/// continue. Without a bank every expert is used. Experts are only evaluated
/// on the rows that reach them.
pub fn route_inference(bank: Option<&RouterBank>, model: &MoEModel, x: &Tensor2) -> Result<Vec<Route>, ModelError> {
    let n = model.n_experts();
    if let Some(b) = bank {
        if b.n_experts() != n {
            return Err(ModelError::Config(format!(
                "bank gates {} experts but the model has {n}",
                b.n_experts()
            )));
        }
    }
    let embedding = model.embed(x)?;
    let reduced = match bank {
        Some(b) => Some(b.reduce.forward(&normalize_rows(&embedding).0)?),
        None => None,
    };
    let rows = x.rows();
    let mut running: Vec<Running> = (0..rows)
        .map(|_| Running {
            p: 0.0,
            r: 0.0,
            l: [0.0; 2],
        })
        .collect();
    let mut used = vec![0usize; rows];
    let mut active: Vec<usize> = (0..rows).collect();
    for k in 1..=n {
        if active.is_empty() {
            break;
        }
        let head = model.expert_head(k - 1, &embedding.select_rows(&active))?;
        for (j, &row) in active.iter().enumerate() {
            let logits = [head.get(j, 0), head.get(j, 1)];
            let acc = &mut running[row];
            acc.p += softmax(&logits)[1];
            acc.r += head.get(j, 2);
            acc.l[0] += logits[0];
            acc.l[1] += logits[1];
            used[row] = k;
        }
        if k == n {
            break;
        }
        if let (Some(b), Some(reduced)) = (bank, &reduced) {
            let feats: Vec<f64> = active
                .iter()
                .flat_map(|&row| b.prefix_features(&running[row].stats(k)))
                .collect();
            let prefix = Tensor2::new(active.len(), 2, feats)?;
            let v = b.decide(&reduced.select_rows(&active), &prefix, k)?;
            active = active
                .iter()
                .zip(v)
                .filter(|(_, v)| *v >= b.config.gate_threshold)
                .map(|(&row, _)| row)
                .collect();
        }
    }
    Ok(running
        .iter()
        .zip(used)
        .map(|(acc, m)| Route {
            m,
            stats: acc.stats(m),
        })
        .collect())
}
