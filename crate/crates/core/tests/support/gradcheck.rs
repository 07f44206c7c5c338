//! Central finite differences against the reverse-mode tape.

use mixtrade::moe::{LossWeights, MoEModel, MoeConfig, Objective, TapeLosses, Targets};
use mixtrade::numerics::{Tape, Tensor2};
use mixtrade::router::{normalize_rows, router_objective, RouterBank, RouterConfig, RouterData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_PARAMS: usize = 200;
/// Denominator floor so that gradients at rounding level are compared absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Individual,
    Collaborative,
    VariationRatio,
    Volatility,
    Total,
    TotalCollaborative,
    Router,
}

pub const ALL_LOSSES: [LossKind; 7] = [
    LossKind::Individual,
    LossKind::Collaborative,
    LossKind::VariationRatio,
    LossKind::Volatility,
    LossKind::Total,
    LossKind::TotalCollaborative,
    LossKind::Router,
];

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub kind: LossKind,
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

struct Instance {
    model: MoEModel,
    x: Tensor2,
    targets: Targets,
    weights: LossWeights,
}

/// Dense random parameters, biases included, keep pre-activations clear of the
/// LeakyReLU kink at the scale of the difference step.
fn scramble(params: Vec<&mut Tensor2>, rng: &mut ChaCha8Rng) {
    for p in params {
        for v in p.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let input = rng.random_range(2..=5);
        let hidden = rng.random_range(2..=4);
        let n = rng.random_range(2..=4);
        let mut config = MoeConfig::new(input, hidden, n);
        config.backbone_hidden = vec![hidden; rng.random_range(1..=2)];
        config.expert_hidden = rng.random_range(2..=4);
        config.return_scale = rng.random_range(0.01..1.0);
        let mut model = MoEModel::new(config, rng).unwrap();
        if model.param_count() > MAX_PARAMS {
            continue;
        }
        scramble(model.params_mut(), rng);
        let rows = rng.random_range(2..=6);
        let x = Tensor2::new(rows, input, (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y: Vec<u8> = (0..rows).map(|_| rng.random_range(0..=1)).collect();
        let r: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.05..0.05)).collect();
        let weights = LossWeights {
            lambda: rng.random_range(0.1..10.0),
            w1: rng.random_range(0.1..2.0),
            w2: rng.random_range(0.1..2.0),
        };
        return Instance {
            model,
            x,
            targets: Targets::new(&y, &r).unwrap(),
            weights,
        };
    }
}

fn model_loss(inst: &Instance, model: &MoEModel, kind: LossKind, want_grad: bool) -> (f64, Vec<Tensor2>) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(inst.x.clone());
    let (_, heads) = bound.forward(&mut tape, x).unwrap();
    let losses = TapeLosses::split(&mut tape, &heads).unwrap();
    let w = &inst.weights;
    let loss = match kind {
        LossKind::Individual => losses.individual(&mut tape, &inst.targets, w.lambda).unwrap(),
        LossKind::Collaborative => losses.collaborative(&mut tape, &inst.targets, w.lambda).unwrap(),
        LossKind::VariationRatio => losses.variation_ratio(&mut tape).unwrap(),
        LossKind::Volatility => losses.volatility(&mut tape).unwrap(),
        LossKind::Total => losses.total(&mut tape, &inst.targets, w, Objective::Individual).unwrap().total,
        LossKind::TotalCollaborative => {
            losses
                .total(&mut tape, &inst.targets, w, Objective::Collaborative)
                .unwrap()
                .total
        }
        LossKind::Router => unreachable!("router loss is checked on a bank"),
    };
    let value = tape.value(loss).unwrap().item();
    if !want_grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    let grads = bound.vars().into_iter().map(|v| grads.wrt(v).unwrap()).collect();
    (value, grads)
}

/// Compares every parameter's gradient and returns the largest relative error.
fn compare<T: Clone>(
    base: &T,
    analytic: &[Tensor2],
    params_mut: impl Fn(&mut T) -> Vec<&mut Tensor2>,
    value: impl Fn(&T) -> f64,
) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut probe = base.clone();
    for (p, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            count += 1;
            let orig = params_mut(&mut probe)[p].data()[idx];
            params_mut(&mut probe)[p].data_mut()[idx] = orig + STEP;
            let plus = value(&probe);
            params_mut(&mut probe)[p].data_mut()[idx] = orig - STEP;
            let minus = value(&probe);
            params_mut(&mut probe)[p].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let e = relative_error(grad.data()[idx], numeric);
            worst = worst.max(e);
        }
    }
    (count, worst)
}

fn check_router(seed: u64, rng: &mut ChaCha8Rng) -> CheckResult {
    let emb = rng.random_range(2..=6);
    let n = rng.random_range(2..=4);
    let config = RouterConfig {
        omega: rng.random_range(0.5..3.0),
        ..RouterConfig::default()
    };
    let mut bank = RouterBank::new(emb, n, config, rng).unwrap();
    scramble(bank.params_mut(), rng);
    let rows = rng.random_range(2..=6);
    let raw = Tensor2::new(rows, emb, (0..rows * emb).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (embedding, _) = normalize_rows(&raw);
    let prefix = (1..n)
        .map(|_| {
            let v: Vec<f64> = (0..rows)
                .flat_map(|_| [rng.random_range(0.05..0.95), rng.random_range(-0.05..0.05)])
                .collect();
            Tensor2::new(rows, 2, v).unwrap()
        })
        .collect();
    let labels = (1..n).map(|_| (0..rows).map(|_| rng.random_range(0..=1)).collect()).collect();
    let data = RouterData {
        embedding,
        prefix,
        labels,
    };
    let (_, analytic) = router_objective(&bank, &data).unwrap();
    let (params, worst) = compare(&bank, &analytic, |b| b.params_mut(), |b| {
        router_objective(b, &data).unwrap().0
    });
    assert!(params <= MAX_PARAMS, "router bank has {params} parameters");
    CheckResult {
        kind: LossKind::Router,
        seed,
        params,
        max_rel_error: worst,
    }
}

/// One randomized instance of `kind`, drawn from `seed`.
pub fn check(kind: LossKind, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if kind == LossKind::Router {
        return check_router(seed, &mut rng);
    }
    let inst = random_instance(&mut rng);
    let (_, analytic) = model_loss(&inst, &inst.model, kind, true);
    let (params, worst) = compare(&inst.model, &analytic, |m| m.params_mut(), |m| {
        model_loss(&inst, m, kind, false).0
    });
    CheckResult {
        kind,
        seed,
        params,
        max_rel_error: worst,
    }
}

/// `models` instances per loss kind.
pub fn suite(models: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for kind in ALL_LOSSES {
        for seed in 0..models {
            out.push(check(kind, 1000 + seed));
        }
    }
    out
}
