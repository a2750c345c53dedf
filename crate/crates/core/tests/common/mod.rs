#![allow(dead_code)]

use std::sync::OnceLock;

use funcreg_core::data::{generate_benchmark, BenchmarkData, ShiftBenchmark};
use funcreg_core::model::{ModelConfig, ModelState, Params};
use funcreg_core::regularizers::*;
use funcreg_core::training::{pretrain, Phase, TrainConfig};
use funcreg_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Far,
    Fcr,
    L2sp,
    Ldifs,
    Car,
    Lipsum,
    EmaDistill,
    Combined,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::Ce,
        LossKind::Far,
        LossKind::Fcr,
        LossKind::L2sp,
        LossKind::Ldifs,
        LossKind::Car,
        LossKind::Lipsum,
        LossKind::EmaDistill,
        LossKind::Combined,
    ];
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap()
}

/// A 61-parameter model whose live weights sit away from the snapshot and
/// the EMA shadow, so every regularizer has a non-trivial gradient.
pub struct Toy {
    pub state: ModelState,
    pub x: Tensor,
    pub x_aug: Tensor,
    pub labels: Vec<usize>,
    pub reg: RegularizerConfig,
    pub context: Tensor,
}

pub fn toy(seed: u64) -> Toy {
    let cfg = ModelConfig {
        hidden: vec![5],
        embed_dim: 4,
        init_seed: seed,
        head_trainable: true,
    };
    let p0 = Params::init(4, 3, &cfg).unwrap();
    let mut state = ModelState::new(p0.clone());
    state.take_snapshot();
    state.init_ema(0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let flat: Vec<f64> = p0
        .flatten()
        .iter()
        .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    state.params = p0.with_flat(&flat).unwrap();
    let x = gaussian(&mut rng, &[6, 4], 1.0);
    let x_aug = x.add(&gaussian(&mut rng, &[6, 4], 0.3)).unwrap();
    let reg = RegularizerConfig {
        lambda_far: 0.7,
        lambda_fcr: 1.3,
        seed,
        ..RegularizerConfig::default()
    };
    let context = context_prototypes(&reg, 4).unwrap();
    Toy {
        state,
        x,
        x_aug,
        labels: (0..6).map(|i| i % 3).collect(),
        reg,
        context,
    }
}

fn build(toy: &Toy, kind: LossKind, params: &Params, tape: &mut Tape) -> (Var, Vec<Var>) {
    let live = params.bind(tape, true);
    let st = &toy.state;
    let loss = match kind {
        LossKind::Ce => {
            let xv = tape.constant(toy.x.clone());
            let z = live.logits(tape, xv).unwrap();
            tape.cross_entropy(z, &toy.labels).unwrap()
        }
        LossKind::Far => far_loss(tape, &live, st, &toy.x_aug, OutputSpace::Probabilities).unwrap(),
        LossKind::Fcr => fcr_loss(tape, &live, &toy.x, &toy.x_aug).unwrap(),
        LossKind::L2sp => l2sp_loss(tape, &live, st).unwrap(),
        LossKind::Ldifs => ldifs_loss(tape, &live, st, &toy.x).unwrap(),
        LossKind::Car => car_loss(tape, &live, st, &toy.x, &toy.context).unwrap(),
        LossKind::Lipsum => lipsum_loss(tape, &live, st, &toy.x, &toy.reg, 3).unwrap(),
        LossKind::EmaDistill => ema_distill_loss(tape, &live, st, &toy.x).unwrap(),
        LossKind::Combined => {
            let batch = LossBatch {
                x: &toy.x,
                labels: &toy.labels,
                x_aug: Some(&toy.x_aug),
                step_seed: 3,
            };
            let cfg = RegularizerConfig {
                method: Method::FarFcr,
                ..toy.reg.clone()
            };
            combined_loss(tape, &live, st, &batch, &cfg, &RunAux::default())
                .unwrap()
                .0
        }
    };
    (loss, live.vars())
}

pub fn loss_at(toy: &Toy, kind: LossKind, flat: &[f64]) -> f64 {
    let params = toy.state.params.with_flat(flat).unwrap();
    let mut tape = Tape::new();
    let (loss, _) = build(toy, kind, &params, &mut tape);
    tape.value(loss).item()
}

/// Backward-pass gradient, flattened in parameter order. Untouched
/// tensors contribute zeros.
pub fn analytic_grad(toy: &Toy, kind: LossKind) -> Vec<f64> {
    let mut tape = Tape::new();
    let (loss, vars) = build(toy, kind, &toy.state.params, &mut tape);
    let grads = tape.backward(loss).unwrap();
    vars.iter()
        .flat_map(|&v| match grads.get(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect()
}

pub fn numeric_grad(toy: &Toy, kind: LossKind, h: f64) -> Vec<f64> {
    let base = toy.state.params.flatten();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            (loss_at(toy, kind, &plus) - loss_at(toy, kind, &minus)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn grad_check(kind: LossKind, seed: u64) -> f64 {
    let t = toy(seed);
    relative_error(&analytic_grad(&t, kind), &numeric_grad(&t, kind, 1e-5))
}

/// Default benchmark plus a model pretrained on it, built once per process.
pub fn pretrained() -> &'static (BenchmarkData, Params) {
    static CELL: OnceLock<(BenchmarkData, Params)> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = ShiftBenchmark::default();
        let data = generate_benchmark(&spec).unwrap();
        let params = Params::init(spec.input_dim(), spec.num_classes, &ModelConfig::default()).unwrap();
        let mut state = ModelState::new(params);
        let cfg = TrainConfig {
            phase: Phase::Pretrain,
            ..TrainConfig::default()
        };
        pretrain(&mut state, &data.pretrain, &[], &cfg).unwrap();
        (data, state.params)
    })
}
