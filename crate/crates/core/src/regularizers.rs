//! Fine-tuning objectives.
//!
//! The total loss is cross-entropy plus the regularizers selected by a
//! [`RegularizerConfig`]:
//!
//! * **FAR** (functional alignment): `(1/N) Σ |f_θ(x̃ᵢ) − f₀(x̃ᵢ)|²`, the
//!   batch estimate of the L2(μ) distance between the live model and the
//!   frozen pretrained snapshot, measured on augmented inputs `x̃`.
//! * **FCR** (functional consistency): `(1/N) Σ KL(f_θ(xᵢ) ‖ f_θ(x̃ᵢ))`, the
//!   divergence between clean and augmented predictions of the live model.
//!   Gradients flow through both branches.
//! * Baselines, adapted to the prototype-head model: L2-SP (encoder
//!   parameter distance), LDIFS (feature distance), CAR (KL over a fixed
//!   random context head), Lipsum (random-probe feature projections) and
//!   EMA self-distillation.
//!
//! Snapshot and teacher branches are evaluated off-tape and enter the graph
//! as constants, so they never receive gradients.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelState, Params};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Far,
    Fcr,
    FarFcr,
    L2sp,
    Ldifs,
    Car,
    Lipsum,
    EmaDistill,
}

impl Method {
    pub fn uses_far(self) -> bool {
        matches!(self, Method::Far | Method::FarFcr)
    }

    pub fn uses_fcr(self) -> bool {
        matches!(self, Method::Fcr | Method::FarFcr)
    }

    /// Whether a training step needs augmented inputs.
    pub fn needs_augmentation(self) -> bool {
        self.uses_far() || self.uses_fcr()
    }

    pub fn needs_snapshot(self) -> bool {
        matches!(
            self,
            Method::Far
                | Method::FarFcr
                | Method::L2sp
                | Method::Ldifs
                | Method::Car
                | Method::Lipsum
        )
    }

    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            Method::L2sp | Method::Ldifs | Method::Car | Method::Lipsum | Method::EmaDistill
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Far => "far",
            Method::Fcr => "fcr",
            Method::FarFcr => "far_fcr",
            Method::L2sp => "l2sp",
            Method::Ldifs => "ldifs",
            Method::Car => "car",
            Method::Lipsum => "lipsum",
            Method::EmaDistill => "ema_distill",
        }
    }
}

/// Output space compared by FAR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub method: Method,
    /// FAR weight (λ₁).
    pub lambda_far: f64,
    /// FCR weight (λ₂).
    pub lambda_fcr: f64,
    /// Weight of whichever baseline regularizer is selected.
    pub lambda_baseline: f64,
    pub lipsum_probes: usize,
    pub car_contexts: usize,
    pub ema_decay: f64,
    pub output_space: OutputSpace,
    /// Seeds the CAR context head and the Lipsum probes.
    pub seed: u64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            method: Method::FarFcr,
            lambda_far: 1.0,
            lambda_fcr: 1.0,
            lambda_baseline: 1.0,
            lipsum_probes: 80,
            car_contexts: 8,
            ema_decay: 0.999,
            output_space: OutputSpace::Probabilities,
            seed: 0,
        }
    }
}

impl RegularizerConfig {
    pub fn with_method(method: Method) -> Self {
        RegularizerConfig {
            method,
            ..Self::default()
        }
    }

    /// Hard errors come back as `Err`; suspicious but legal combinations
    /// come back as warning strings.
    pub fn validate(&self) -> Result<Vec<String>> {
        for (name, v) in [
            ("lambda_far", self.lambda_far),
            ("lambda_fcr", self.lambda_fcr),
            ("lambda_baseline", self.lambda_baseline),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and nonnegative"
                )));
            }
        }
        if self.lipsum_probes == 0 {
            return Err(Error::Config("lipsum_probes must be at least 1".into()));
        }
        if self.car_contexts < 2 {
            return Err(Error::Config(format!(
                "car_contexts = {} must be at least 2",
                self.car_contexts
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay = {} outside (0, 1)",
                self.ema_decay
            )));
        }
        let mut warnings = Vec::new();
        let m = self.method;
        if !m.uses_far() && self.lambda_far > 0.0 && m != Method::None && !m.is_baseline() {
            warnings.push(format!(
                "lambda_far = {} has no effect with method {}",
                self.lambda_far,
                m.name()
            ));
        }
        if !m.uses_fcr() && self.lambda_fcr > 0.0 && m.uses_far() {
            warnings.push(format!(
                "lambda_fcr = {} has no effect with method {}",
                self.lambda_fcr,
                m.name()
            ));
        }
        if m.uses_far() && self.lambda_far == 0.0 {
            warnings.push(format!(
                "method {} with lambda_far = 0 disables FAR",
                m.name()
            ));
        }
        if m.uses_fcr() && self.lambda_fcr == 0.0 {
            warnings.push(format!(
                "method {} with lambda_fcr = 0 disables FCR",
                m.name()
            ));
        }
        Ok(warnings)
    }
}

/// Unit-norm rows drawn from the keyed stream `parts`.
pub fn random_unit_rows(rows: usize, dim: usize, parts: &[u64]) -> Tensor {
    let mut r = rng::keyed(parts);
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        data.extend(v.iter().map(|a| a / n));
    }
    Tensor::new(vec![rows, dim], data).expect("consistent shape")
}

/// Fixed CAR context head `[C × D]`, unit rows.
pub fn context_prototypes(cfg: &RegularizerConfig, dim: usize) -> Result<Tensor> {
    if cfg.car_contexts < 2 {
        return Err(Error::Config(format!(
            "car_contexts = {} must be at least 2",
            cfg.car_contexts
        )));
    }
    Ok(random_unit_rows(
        cfg.car_contexts,
        dim,
        &[cfg.seed, stream::CONTEXT],
    ))
}

/// Lipsum probes `[M × D]` for one step, unit rows.
pub fn lipsum_probes(cfg: &RegularizerConfig, dim: usize, step_seed: u64) -> Tensor {
    random_unit_rows(
        cfg.lipsum_probes,
        dim,
        &[cfg.seed, stream::LIPSUM, step_seed],
    )
}

fn output(tape: &mut Tape, logits: Var, space: OutputSpace) -> Result<Var> {
    match space {
        OutputSpace::Probabilities => tape.softmax(logits),
        OutputSpace::Logits => Ok(logits),
    }
}

fn output_off_tape(logits: Tensor, space: OutputSpace) -> Result<Tensor> {
    match space {
        OutputSpace::Probabilities => logits.softmax(),
        OutputSpace::Logits => Ok(logits),
    }
}

/// FAR from the live model's logits on `x̃` and the snapshot's (frozen)
/// logits on the same inputs.
pub fn far_from_logits(
    tape: &mut Tape,
    live_logits: Var,
    snapshot_logits: &Tensor,
    space: OutputSpace,
) -> Result<Var> {
    let live = output(tape, live_logits, space)?;
    let frozen = tape.constant(output_off_tape(snapshot_logits.clone(), space)?);
    tape.mean_squared_l2(live, frozen)
}

pub fn far_loss(
    tape: &mut Tape,
    live: &BoundParams,
    state: &ModelState,
    x_aug: &Tensor,
    space: OutputSpace,
) -> Result<Var> {
    let snapshot = state.require_snapshot()?;
    let xv = tape.constant(x_aug.clone());
    let z = live.logits(tape, xv)?;
    far_from_logits(tape, z, &snapshot.logits(x_aug)?, space)
}

pub fn fcr_from_logits(tape: &mut Tape, clean_logits: Var, aug_logits: Var) -> Result<Var> {
    let p = tape.softmax(clean_logits)?;
    let q = tape.softmax(aug_logits)?;
    tape.kl_divergence(p, q)
}

pub fn fcr_loss(tape: &mut Tape, live: &BoundParams, x: &Tensor, x_aug: &Tensor) -> Result<Var> {
    if x.shape() != x_aug.shape() {
        return Err(Error::shape(
            "fcr_loss",
            format!("{:?} vs {:?}", x.shape(), x_aug.shape()),
        ));
    }
    let xv = tape.constant(x.clone());
    let xa = tape.constant(x_aug.clone());
    let clean = live.logits(tape, xv)?;
    let aug = live.logits(tape, xa)?;
    fcr_from_logits(tape, clean, aug)
}

/// `‖θ_enc − θ_enc,0‖²` over encoder parameters only.
pub fn l2sp_loss(tape: &mut Tape, live: &BoundParams, state: &ModelState) -> Result<Var> {
    let snapshot = state.require_snapshot()?;
    let mut total: Option<Var> = None;
    for (var, t0) in live
        .encoder_vars()
        .into_iter()
        .zip(snapshot.encoder.tensors())
    {
        let anchor = tape.constant(t0.clone());
        let d = tape.sub(var, anchor)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("encoder has layers"))
}

pub fn ldifs_from_features(
    tape: &mut Tape,
    live_features: Var,
    snapshot_features: &Tensor,
) -> Result<Var> {
    let frozen = tape.constant(snapshot_features.clone());
    tape.mean_squared_l2(live_features, frozen)
}

pub fn ldifs_loss(
    tape: &mut Tape,
    live: &BoundParams,
    state: &ModelState,
    x: &Tensor,
) -> Result<Var> {
    let snapshot = state.require_snapshot()?;
    let xv = tape.constant(x.clone());
    let f = live.features(tape, xv)?;
    ldifs_from_features(tape, f, &snapshot.features(x)?)
}

/// `KL(softmax(φ₀ Cᵀ) ‖ softmax(φ Cᵀ))` for the context head `C`.
pub fn car_from_features(
    tape: &mut Tape,
    live_features: Var,
    snapshot_features: &Tensor,
    context: &Tensor,
) -> Result<Var> {
    if context.rows() < 2 {
        return Err(Error::Config(format!(
            "{} context prototypes; need at least 2",
            context.rows()
        )));
    }
    let c = tape.constant(context.clone());
    let teacher = tape.constant(snapshot_features.matmul_t(context)?.softmax()?);
    let z = tape.matmul_t(live_features, c)?;
    let student = tape.softmax(z)?;
    tape.kl_divergence(teacher, student)
}

pub fn car_loss(
    tape: &mut Tape,
    live: &BoundParams,
    state: &ModelState,
    x: &Tensor,
    context: &Tensor,
) -> Result<Var> {
    let snapshot = state.require_snapshot()?;
    let xv = tape.constant(x.clone());
    let f = live.features(tape, xv)?;
    car_from_features(tape, f, &snapshot.features(x)?, context)
}

/// `(1/2M) Σᵢ (probeᵢ·(φ − φ₀))²`, averaged over the batch.
pub fn lipsum_from_features(
    tape: &mut Tape,
    live_features: Var,
    snapshot_features: &Tensor,
    probes: &Tensor,
) -> Result<Var> {
    let m = probes.rows();
    let p = tape.constant(probes.clone());
    let frozen = tape.constant(snapshot_features.matmul_t(probes)?);
    let proj = tape.matmul_t(live_features, p)?;
    let msq = tape.mean_squared_l2(proj, frozen)?;
    tape.scale(msq, 1.0 / (2.0 * m as f64))
}

pub fn lipsum_loss(
    tape: &mut Tape,
    live: &BoundParams,
    state: &ModelState,
    x: &Tensor,
    cfg: &RegularizerConfig,
    step_seed: u64,
) -> Result<Var> {
    let snapshot = state.require_snapshot()?;
    let xv = tape.constant(x.clone());
    let f = live.features(tape, xv)?;
    let probes = lipsum_probes(cfg, snapshot.encoder.output_dim(), step_seed);
    lipsum_from_features(tape, f, &snapshot.features(x)?, &probes)
}

/// `KL(p_teacher ‖ p_student)` with the EMA shadow as teacher.
pub fn ema_distill_from_logits(
    tape: &mut Tape,
    live_logits: Var,
    teacher_logits: &Tensor,
) -> Result<Var> {
    let teacher = tape.constant(teacher_logits.softmax()?);
    let student = tape.softmax(live_logits)?;
    tape.kl_divergence(teacher, student)
}

pub fn ema_distill_loss(
    tape: &mut Tape,
    live: &BoundParams,
    state: &ModelState,
    x: &Tensor,
) -> Result<Var> {
    let teacher = &state.require_ema()?.params;
    let xv = tape.constant(x.clone());
    let z = live.logits(tape, xv)?;
    ema_distill_from_logits(tape, z, &teacher.logits(x)?)
}

/// One mini-batch as seen by the objective.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    /// Augmented copy of `x`; required when FAR or FCR is active.
    pub x_aug: Option<&'a Tensor>,
    /// Keys per-step randomness (Lipsum probes).
    pub step_seed: u64,
}

/// Unweighted component values. Components the method does not use are
/// `None` and never computed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub far: Option<f64>,
    pub fcr: Option<f64>,
    /// The selected baseline regularizer.
    pub reg: Option<f64>,
    pub total: f64,
}

/// Per-run constants the objective needs (the CAR context head).
#[derive(Debug, Clone, Default)]
pub struct RunAux {
    pub context: Option<Tensor>,
}

impl RunAux {
    pub fn for_config(cfg: &RegularizerConfig, params: &Params) -> Result<Self> {
        let context = if cfg.method == Method::Car {
            Some(context_prototypes(cfg, params.encoder.output_dim())?)
        } else {
            None
        };
        Ok(RunAux { context })
    }
}

/// `L_CE + λ₁·FAR + λ₂·FCR` for the FAR/FCR methods, `L_CE + λ·R` for the
/// baselines, plain `L_CE` for `none`.
pub fn combined_loss(
    tape: &mut Tape,
    live: &BoundParams,
    state: &ModelState,
    batch: &LossBatch<'_>,
    cfg: &RegularizerConfig,
    aux: &RunAux,
) -> Result<(Var, LossBreakdown)> {
    let method = cfg.method;
    let xv = tape.constant(batch.x.clone());
    let features = live.features(tape, xv)?;
    let logits = live.logits_from_features(tape, features)?;
    let ce = tape.cross_entropy(logits, batch.labels)?;
    let mut breakdown = LossBreakdown {
        ce: tape.value(ce).item(),
        ..LossBreakdown::default()
    };
    let mut total = ce;

    if method.needs_augmentation() {
        let x_aug = batch.x_aug.ok_or_else(|| {
            Error::Contract(format!("method {} needs augmented inputs", method.name()))
        })?;
        if x_aug.shape() != batch.x.shape() {
            return Err(Error::shape(
                "combined_loss",
                format!("x {:?} vs x_aug {:?}", batch.x.shape(), x_aug.shape()),
            ));
        }
        let xa = tape.constant(x_aug.clone());
        let aug_logits = live.logits(tape, xa)?;
        if method.uses_far() {
            let snapshot = state.require_snapshot()?;
            let far =
                far_from_logits(tape, aug_logits, &snapshot.logits(x_aug)?, cfg.output_space)?;
            breakdown.far = Some(tape.value(far).item());
            let w = tape.scale(far, cfg.lambda_far)?;
            total = tape.add(total, w)?;
        }
        if method.uses_fcr() {
            let fcr = fcr_from_logits(tape, logits, aug_logits)?;
            breakdown.fcr = Some(tape.value(fcr).item());
            let w = tape.scale(fcr, cfg.lambda_fcr)?;
            total = tape.add(total, w)?;
        }
    }

    if method.is_baseline() {
        let reg = match method {
            Method::L2sp => l2sp_loss(tape, live, state)?,
            Method::Ldifs => {
                let snap = state.require_snapshot()?.features(batch.x)?;
                ldifs_from_features(tape, features, &snap)?
            }
            Method::Car => {
                let context = aux
                    .context
                    .as_ref()
                    .ok_or_else(|| Error::State("CAR context head not initialized".into()))?;
                let snap = state.require_snapshot()?.features(batch.x)?;
                car_from_features(tape, features, &snap, context)?
            }
            Method::Lipsum => {
                let snap = state.require_snapshot()?;
                let probes = lipsum_probes(cfg, snap.encoder.output_dim(), batch.step_seed);
                lipsum_from_features(tape, features, &snap.features(batch.x)?, &probes)?
            }
            Method::EmaDistill => {
                let teacher = state.require_ema()?.params.logits(batch.x)?;
                ema_distill_from_logits(tape, logits, &teacher)?
            }
            _ => unreachable!(),
        };
        breakdown.reg = Some(tape.value(reg).item());
        let w = tape.scale(reg, cfg.lambda_baseline)?;
        total = tape.add(total, w)?;
    }

    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

/// Off-tape evaluation of [`combined_loss`] on the live parameters.
pub fn evaluate_combined(
    state: &ModelState,
    batch: &LossBatch<'_>,
    cfg: &RegularizerConfig,
    aux: &RunAux,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let live = state.params.bind(&mut tape, false);
    combined_loss(&mut tape, &live, state, batch, cfg, aux).map(|(_, b)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderParams, Linear, ModelConfig, PrototypeHead};

    fn tiny_state() -> ModelState {
        let cfg = ModelConfig {
            hidden: vec![5],
            embed_dim: 3,
            init_seed: 2,
            head_trainable: true,
        };
        ModelState::new(Params::init(4, 3, &cfg).unwrap())
    }

    fn inputs(seed: u64, rows: usize) -> Tensor {
        let mut r = rng::keyed(&[seed]);
        Tensor::new(
            vec![rows, 4],
            (0..rows * 4).map(|_| r.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn perturb(p: &Params, seed: u64, scale: f64) -> Params {
        let mut r = rng::keyed(&[seed, 77]);
        let flat: Vec<f64> = p
            .flatten()
            .iter()
            .map(|v| v + scale * r.random_range(-1.0..1.0))
            .collect();
        p.with_flat(&flat).unwrap()
    }

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn all_regularizers_vanish_at_the_snapshot() {
        let mut s = tiny_state();
        s.take_snapshot();
        s.init_ema(0.9).unwrap();
        let x = inputs(1, 6);
        let cfg = RegularizerConfig::default();
        let ctx = context_prototypes(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let losses = [
            far_loss(&mut tape, &live, &s, &x, OutputSpace::Probabilities).unwrap(),
            far_loss(&mut tape, &live, &s, &x, OutputSpace::Logits).unwrap(),
            fcr_loss(&mut tape, &live, &x, &x).unwrap(),
            l2sp_loss(&mut tape, &live, &s).unwrap(),
            ldifs_loss(&mut tape, &live, &s, &x).unwrap(),
            car_loss(&mut tape, &live, &s, &x, &ctx).unwrap(),
            lipsum_loss(&mut tape, &live, &s, &x, &cfg, 3).unwrap(),
            ema_distill_loss(&mut tape, &live, &s, &x).unwrap(),
        ];
        for (i, l) in losses.into_iter().enumerate() {
            assert!(
                value(&tape, l).abs() <= 1e-12,
                "loss {i}: {}",
                value(&tape, l)
            );
        }
    }

    #[test]
    fn missing_snapshot_or_ema_is_a_state_error() {
        let s = tiny_state();
        let x = inputs(1, 2);
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        assert!(matches!(
            far_loss(&mut tape, &live, &s, &x, OutputSpace::Probabilities),
            Err(Error::State(_))
        ));
        assert!(matches!(
            l2sp_loss(&mut tape, &live, &s),
            Err(Error::State(_))
        ));
        assert!(matches!(
            ema_distill_loss(&mut tape, &live, &s, &x),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn far_maximal_simplex_distance() {
        let mut tape = Tape::new();
        // live probs ≈ [1, 0], snapshot probs ≈ [0, 1]
        let live = tape.param(Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap());
        let snap = Tensor::new(vec![1, 2], vec![-60.0, 60.0]).unwrap();
        let far = far_from_logits(&mut tape, live, &snap, OutputSpace::Probabilities).unwrap();
        assert!((value(&tape, far) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn far_matches_direct_summation() {
        let mut s = tiny_state();
        s.take_snapshot();
        s.params = perturb(&s.params, 4, 0.3);
        let x_aug = inputs(9, 4);
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let far = far_loss(&mut tape, &live, &s, &x_aug, OutputSpace::Probabilities).unwrap();

        // oracle: hand-rolled forward + softmax + (1/4) ΣΣ Δ²
        let probs = |p: &Params| -> Vec<Vec<f64>> {
            (0..4)
                .map(|i| {
                    let mut h = x_aug.row(i).to_vec();
                    for (li, l) in p.encoder.layers.iter().enumerate() {
                        let (din, dout) = (l.weight.shape()[0], l.weight.shape()[1]);
                        let mut next = l.bias.data().to_vec();
                        for o in 0..dout {
                            for k in 0..din {
                                next[o] += h[k] * l.weight.data()[k * dout + o];
                            }
                        }
                        if li + 1 < p.encoder.layers.len() {
                            next.iter_mut().for_each(|v| *v = v.max(0.0));
                        }
                        h = next;
                    }
                    let z: Vec<f64> = (0..3)
                        .map(|c| (0..3).map(|d| h[d] * p.head.prototypes.at(c, d)).sum())
                        .collect();
                    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
                    let t: f64 = e.iter().sum();
                    e.iter().map(|v| v / t).collect()
                })
                .collect()
        };
        let (a, b) = (probs(&s.params), probs(s.snapshot().unwrap()));
        let oracle: f64 = a
            .iter()
            .zip(&b)
            .map(|(r, q)| r.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((value(&tape, far) - oracle).abs() < 1e-12);
    }

    #[test]
    fn fcr_examples() {
        let s = tiny_state();
        let x = inputs(2, 5);
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let same = fcr_loss(&mut tape, &live, &x, &x).unwrap();
        assert!(value(&tape, same).abs() <= 1e-12);

        let clean = tape.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let aug = tape.param(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let kl = fcr_from_logits(&mut tape, clean, aug).unwrap();
        assert!((value(&tape, kl) - 0.143841).abs() < 1e-6);

        let mut zero = s.clone();
        zero.params.encoder = zero.params.encoder.zeros_like();
        let live = zero.params.bind(&mut tape, true);
        let other = inputs(3, 5);
        let c = fcr_loss(&mut tape, &live, &x, &other).unwrap();
        assert_eq!(value(&tape, c), 0.0);
    }

    #[test]
    fn l2sp_examples() {
        let mut s = tiny_state();
        s.take_snapshot();
        s.params.encoder.layers[0].weight.data_mut()[3] += 0.25;
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let l = l2sp_loss(&mut tape, &live, &s).unwrap();
        assert!((value(&tape, l) - 0.0625).abs() < 1e-15);

        // head moves are not penalized
        s.params.head.prototypes.data_mut()[0] += 5.0;
        let live = s.params.bind(&mut tape, true);
        let l = l2sp_loss(&mut tape, &live, &s).unwrap();
        assert!((value(&tape, l) - 0.0625).abs() < 1e-15);

        // flatten-and-sum oracle
        s.params = perturb(s.snapshot().unwrap(), 5, 0.1);
        let live = s.params.bind(&mut tape, true);
        let l = l2sp_loss(&mut tape, &live, &s).unwrap();
        let enc = |p: &Params| {
            p.encoder
                .tensors()
                .flat_map(|t| t.data().to_vec())
                .collect::<Vec<_>>()
        };
        let oracle: f64 = enc(&s.params)
            .iter()
            .zip(enc(s.snapshot().unwrap()))
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!((value(&tape, l) - oracle).abs() < 1e-12);
    }

    fn linear_encoder(w: Tensor) -> EncoderParams {
        let d = w.shape()[1];
        EncoderParams {
            layers: vec![Linear {
                weight: w,
                bias: Tensor::zeros(&[d]),
            }],
        }
    }

    #[test]
    fn ldifs_examples() {
        // zero encoder (live) against identity encoder (snapshot)
        let head = PrototypeHead {
            prototypes: Tensor::identity(3),
            trainable: true,
        };
        let mut s = ModelState::new(Params {
            encoder: linear_encoder(Tensor::identity(3)),
            head,
        });
        s.take_snapshot();
        s.params.encoder = s.params.encoder.zeros_like();
        let x = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.5, -2.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let l = ldifs_loss(&mut tape, &live, &s, &x).unwrap();
        // direct oracle: φ = 0, φ₀ = x, so (|x₁|² + |x₂|²)/2
        assert!((value(&tape, l) - (1.0 + 5.25) / 2.0).abs() < 1e-15);

        // doubling (φ − φ₀) quadruples the loss
        s.params.encoder = linear_encoder(Tensor::identity(3).scale(-1.0));
        let live = s.params.bind(&mut tape, true);
        let doubled = ldifs_loss(&mut tape, &live, &s, &x).unwrap();
        assert!((value(&tape, doubled) - 4.0 * value(&tape, l)).abs() < 1e-12);
    }

    #[test]
    fn car_examples() {
        // two contexts with hand-set features: live φ = 0 → uniform student
        let ctx = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let snap = Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let mut tape = Tape::new();
        let live = tape.param(Tensor::zeros(&[1, 2]));
        let l = car_from_features(&mut tape, live, &snap, &ctx).unwrap();
        let (p0, p1) = (2.0 / 3.0, 1.0 / 3.0);
        let oracle = p0 * (p0 / 0.5f64).ln() + p1 * (p1 / 0.5f64).ln();
        assert!((value(&tape, l) - oracle).abs() < 1e-15);

        // constant shift of every context logit: adding c·(1,1)/… along a
        // direction orthogonal to both context rows is not possible in 2-D,
        // so shift the features of both models along (1, 1) with a context
        // head whose rows have equal projections on it.
        let ctx = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let live_v = Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let base = {
            let lv = tape.param(live_v.clone());
            let l = car_from_features(&mut tape, lv, &snap, &ctx).unwrap();
            value(&tape, l)
        };
        let shift = |t: &Tensor| {
            t.add(&Tensor::new(vec![1, 2], vec![0.7, 0.7]).unwrap())
                .unwrap()
        };
        let lv = tape.param(shift(&live_v));
        let l = car_from_features(&mut tape, lv, &shift(&snap), &ctx).unwrap();
        assert!((value(&tape, l) - base).abs() < 1e-12);

        let one = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let lv = tape.param(live_v);
        assert!(matches!(
            car_from_features(&mut tape, lv, &snap, &one),
            Err(Error::Config(_))
        ));
        let bad = RegularizerConfig {
            car_contexts: 1,
            ..RegularizerConfig::default()
        };
        assert!(matches!(context_prototypes(&bad, 3), Err(Error::Config(_))));
    }

    #[test]
    fn lipsum_single_aligned_probe() {
        let diff = [0.6, -0.8, 2.0];
        let norm_sq: f64 = diff.iter().map(|v| v * v).sum();
        let n = norm_sq.sqrt();
        let probe = Tensor::new(vec![1, 3], diff.iter().map(|v| v / n).collect()).unwrap();
        let mut tape = Tape::new();
        let live = tape.param(Tensor::new(vec![1, 3], diff.to_vec()).unwrap());
        let l = lipsum_from_features(&mut tape, live, &Tensor::zeros(&[1, 3]), &probe).unwrap();
        assert!((value(&tape, l) - norm_sq / 2.0).abs() < 1e-12);
    }

    #[test]
    fn lipsum_many_probes_approach_closed_form() {
        // Monte-Carlo oracle: E[(u·d)²] = |d|²/D for u uniform on the sphere
        let d = [0.5, -1.0, 0.25, 2.0];
        let norm_sq: f64 = d.iter().map(|v| v * v).sum();
        let cfg = RegularizerConfig {
            lipsum_probes: 10_000,
            ..RegularizerConfig::default()
        };
        let probes = lipsum_probes(&cfg, 4, 0);
        let mut tape = Tape::new();
        let live = tape.param(Tensor::new(vec![1, 4], d.to_vec()).unwrap());
        let l = lipsum_from_features(&mut tape, live, &Tensor::zeros(&[1, 4]), &probes).unwrap();
        let closed = norm_sq / (2.0 * 4.0);
        assert!((value(&tape, l) - closed).abs() / closed < 0.05);
    }

    #[test]
    fn lipsum_probes_resample_per_step() {
        let cfg = RegularizerConfig::default();
        assert_eq!(lipsum_probes(&cfg, 4, 1), lipsum_probes(&cfg, 4, 1));
        assert_ne!(lipsum_probes(&cfg, 4, 1), lipsum_probes(&cfg, 4, 2));
        for i in 0..cfg.lipsum_probes {
            let n: f64 = lipsum_probes(&cfg, 4, 1).row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_distill_examples() {
        let mut tape = Tape::new();
        let student = tape.param(Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let teacher = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let l = ema_distill_from_logits(&mut tape, student, &teacher).unwrap();
        assert!((value(&tape, l) - 0.143841).abs() < 1e-6);
        let g = tape.backward(l).unwrap();
        assert!(g.get(student).is_some());
    }

    fn batch_inputs() -> (Tensor, Vec<usize>, Tensor) {
        (inputs(11, 6), vec![0, 1, 2, 0, 1, 2], inputs(12, 6))
    }

    #[test]
    fn combined_degenerates_to_cross_entropy() {
        let mut s = tiny_state();
        s.take_snapshot();
        let (x, y, xa) = batch_inputs();
        let batch = LossBatch {
            x: &x,
            labels: &y,
            x_aug: Some(&xa),
            step_seed: 0,
        };
        let none = evaluate_combined(
            &s,
            &batch,
            &RegularizerConfig::with_method(Method::None),
            &RunAux::default(),
        )
        .unwrap();
        assert_eq!(none.far, None);
        assert_eq!(none.fcr, None);
        assert_eq!(none.total, none.ce);

        let zero = RegularizerConfig {
            lambda_far: 0.0,
            lambda_fcr: 0.0,
            ..RegularizerConfig::default()
        };
        let b = evaluate_combined(&s, &batch, &zero, &RunAux::default()).unwrap();
        assert_eq!(b.total, b.ce);

        // θ = θ₀ and x̃ = x: both regularizers vanish
        let batch = LossBatch {
            x: &x,
            labels: &y,
            x_aug: Some(&x),
            step_seed: 0,
        };
        let b = evaluate_combined(
            &s,
            &batch,
            &RegularizerConfig::default(),
            &RunAux::default(),
        )
        .unwrap();
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn combined_equals_component_sum() {
        let mut s = tiny_state();
        s.take_snapshot();
        s.init_ema(0.9).unwrap();
        s.params = perturb(&s.params, 8, 0.2);
        let (x, y, xa) = batch_inputs();
        let batch = LossBatch {
            x: &x,
            labels: &y,
            x_aug: Some(&xa),
            step_seed: 5,
        };
        let cfg = RegularizerConfig {
            lambda_far: 0.7,
            lambda_fcr: 1.9,
            ..RegularizerConfig::default()
        };
        let b = evaluate_combined(&s, &batch, &cfg, &RunAux::default()).unwrap();

        // independent recomputation through the standalone losses
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let z = live.logits(&mut tape, xv).unwrap();
        let ce = tape.cross_entropy(z, &y).unwrap();
        let far = far_loss(&mut tape, &live, &s, &xa, OutputSpace::Probabilities).unwrap();
        let fcr = fcr_loss(&mut tape, &live, &x, &xa).unwrap();
        let want = value(&tape, ce) + 0.7 * value(&tape, far) + 1.9 * value(&tape, fcr);
        assert!((b.total - want).abs() < 1e-12);
        assert_eq!(b.far.unwrap(), value(&tape, far));
    }

    #[test]
    fn far_and_fcr_are_batch_permutation_invariant() {
        let mut s = tiny_state();
        s.take_snapshot();
        s.params = perturb(&s.params, 3, 0.3);
        let (x, _, xa) = batch_inputs();
        let perm = [3, 0, 5, 1, 4, 2];
        let (px, pxa) = (
            x.select_rows(&perm).unwrap(),
            xa.select_rows(&perm).unwrap(),
        );
        let mut tape = Tape::new();
        let live = s.params.bind(&mut tape, true);
        let a = far_loss(&mut tape, &live, &s, &xa, OutputSpace::Probabilities).unwrap();
        let b = far_loss(&mut tape, &live, &s, &pxa, OutputSpace::Probabilities).unwrap();
        assert!((value(&tape, a) - value(&tape, b)).abs() < 1e-14);
        let a = fcr_loss(&mut tape, &live, &x, &xa).unwrap();
        let b = fcr_loss(&mut tape, &live, &px, &pxa).unwrap();
        assert!((value(&tape, a) - value(&tape, b)).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(RegularizerConfig::default().validate().unwrap().is_empty());
        let bad = RegularizerConfig {
            lambda_far: -1.0,
            ..RegularizerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegularizerConfig {
            lambda_fcr: f64::NAN,
            ..RegularizerConfig::default()
        };
        assert!(bad.validate().is_err());
        let warn = RegularizerConfig {
            method: Method::Far,
            lambda_far: 0.0,
            lambda_fcr: 1.0,
            ..RegularizerConfig::default()
        };
        assert!(!warn.validate().unwrap().is_empty());
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_keys() {
        let cfg = RegularizerConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"method\":\"far_fcr\""));
        assert_eq!(
            serde_json::from_str::<RegularizerConfig>(&text).unwrap(),
            cfg
        );
        assert!(serde_json::from_str::<RegularizerConfig>(r#"{"lambda_3": 1}"#).is_err());
    }
}
