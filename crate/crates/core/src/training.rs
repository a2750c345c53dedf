//! Pretraining and fine-tuning loops, AdamW and the learning-rate schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentPolicy};
use crate::autodiff::Tape;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{ModelState, Params};
use crate::regularizers::{
    combined_loss, LossBatch, LossBreakdown, Method, RegularizerConfig, RunAux,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            epochs: 20,
            batch_size: 64,
            peak_lr: 1e-3,
            warmup_steps: 50,
            schedule: Schedule::Cosine,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak_lr = {} must be positive",
                self.peak_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay = {} must be nonnegative",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps = {} must be positive",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Learning rate for 0-based `step` out of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let w = cfg.warmup_steps;
    if step < w {
        return peak * step as f64 / w as f64;
    }
    match cfg.schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            let span = total_steps.saturating_sub(w);
            if span == 0 {
                return peak;
            }
            let progress = ((step - w) as f64 / span as f64).min(1.0);
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        AdamHyper {
            lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One AdamW update of a single tensor. `t` is the 1-based step count.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: &AdamHyper,
) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] -= h.lr * (mhat / (vhat.sqrt() + h.eps) + h.weight_decay * theta[i]);
    }
}

/// Moments per parameter tensor, in [`Params::named_tensors`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Applies one AdamW step. Tensors whose gradient is `None` (frozen) are
/// left untouched, weight decay included.
pub fn optimizer_step(
    params: &mut Params,
    grads: &[Option<&Tensor>],
    state: &mut AdamState,
    h: &AdamHyper,
) -> Result<()> {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.m.len() != names.len() {
        return Err(Error::shape(
            "optimizer_step",
            format!(
                "{} params, {} grads, {} moment slots",
                names.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (name, g) in names.iter().zip(grads) {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
    }
    state.step += 1;
    let t = state.step;
    for (i, theta) in params.tensors_mut().into_iter().enumerate() {
        let Some(g) = grads[i] else { continue };
        if g.shape() != theta.shape() || state.m[i].len() != theta.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{}: gradient {:?} vs parameter {:?}",
                    names[i],
                    g.shape(),
                    theta.shape()
                ),
            ));
        }
        adamw_update(
            theta.data_mut(),
            g.data(),
            &mut state.m[i],
            &mut state.v[i],
            t,
            h,
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_far: Option<f64>,
    pub loss_fcr: Option<f64>,
    pub loss_reg: Option<f64>,
    pub loss_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub split: String,
    pub acc: f64,
    pub loss: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    steps: Vec<StepRecord>,
    evals: Vec<EvalRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunLog {
    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.evals.is_empty()
    }

    pub fn push_step(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if r.step <= last.step {
                return Err(Error::Contract(format!(
                    "step {} logged after step {}",
                    r.step, last.step
                )));
            }
        }
        self.steps.push(r);
        Ok(())
    }

    pub fn push_eval(&mut self, r: EvalRecord) -> Result<()> {
        if let Some(last) = self.evals.last() {
            if r.step < last.step {
                return Err(Error::Contract(format!(
                    "eval at step {} logged after step {}",
                    r.step, last.step
                )));
            }
        }
        self.evals.push(r);
        Ok(())
    }

    pub fn last_eval(&self, split: &str) -> Option<&EvalRecord> {
        self.evals.iter().rev().find(|e| e.split == split)
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,lr,loss_ce,loss_far,loss_fcr,loss_reg,grad_norm\n");
        for r in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.lr,
                r.loss_ce,
                opt(r.loss_far),
                opt(r.loss_fcr),
                opt(r.loss_reg),
                r.grad_norm
            )
            .unwrap();
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("step,split,acc,loss,recall_macro,f1_macro\n");
        for r in &self.evals {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.split, r.acc, r.loss, r.recall_macro, r.f1_macro
            )
            .unwrap();
        }
        out
    }

    /// Writes `steps.csv` and `eval.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("steps.csv"), self.steps_csv())?;
        fs::write(dir.join("eval.csv"), self.evals_csv())?;
        Ok(())
    }
}

/// What an observer sees before each optimizer step.
pub struct StepView<'a> {
    pub step: usize,
    /// Parameters before the update.
    pub state: &'a ModelState,
    pub batch: LossBatch<'a>,
    pub breakdown: &'a LossBreakdown,
}

fn evaluate_into(
    log: &mut RunLog,
    params: &Params,
    step: usize,
    splits: &[&Dataset],
) -> Result<()> {
    for s in splits {
        let m = evaluate(params, s)?;
        log.push_eval(EvalRecord {
            step,
            split: m.split,
            acc: m.acc,
            loss: m.loss,
            recall_macro: m.recall_macro,
            f1_macro: m.f1_macro,
        })?;
    }
    Ok(())
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    }
}

fn run_loop(
    state: &mut ModelState,
    train: &Dataset,
    eval_splits: &[&Dataset],
    cfg: &TrainConfig,
    reg: &RegularizerConfig,
    augment: &AugmentPolicy,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunLog> {
    cfg.validate()?;
    let mut log = RunLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let aux = RunAux::for_config(reg, &state.params)?;
    let mut adam = AdamState::new(&state.params);
    let total = cfg.epochs * cfg.steps_per_epoch(train.len());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for b in batches(train, cfg.batch_size, cfg.seed, epoch as u64)? {
            let x_aug = if reg.method.needs_augmentation() {
                Some(apply_policy(augment, &b.x, step as u64)?)
            } else {
                None
            };
            let batch = LossBatch {
                x: &b.x,
                labels: &b.labels,
                x_aug: x_aug.as_ref(),
                step_seed: step as u64,
            };
            let mut tape = Tape::new();
            let live = state.params.bind(&mut tape, true);
            let (loss, breakdown) = combined_loss(&mut tape, &live, state, &batch, reg, &aux)
                .map_err(|e| at_step(step, e))?;
            if !breakdown.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "step {step}: loss is {}",
                    breakdown.total
                )));
            }
            observer(&StepView {
                step,
                state,
                batch,
                breakdown: &breakdown,
            });
            let grads = tape.backward(loss).map_err(|e| at_step(step, e))?;
            let per_param: Vec<Option<&Tensor>> =
                live.vars().into_iter().map(|v| grads.get(v)).collect();
            let grad_norm = per_param
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            let lr = lr_at(step, total, cfg);
            optimizer_step(
                &mut state.params,
                &per_param,
                &mut adam,
                &AdamHyper::from_config(cfg, lr),
            )
            .map_err(|e| at_step(step, e))?;
            if reg.method == Method::EmaDistill {
                state.ema_update(reg.ema_decay)?;
            }
            log.push_step(StepRecord {
                step,
                lr,
                loss_ce: breakdown.ce,
                loss_far: breakdown.far,
                loss_fcr: breakdown.fcr,
                loss_reg: breakdown.reg,
                loss_total: breakdown.total,
                grad_norm,
            })?;
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                evaluate_into(&mut log, &state.params, step, eval_splits)?;
            }
        }
        log::debug!("epoch {} done at step {step}", epoch + 1);
    }
    if cfg.eval_every == 0 || step % cfg.eval_every != 0 {
        evaluate_into(&mut log, &state.params, step, eval_splits)?;
    }
    Ok(log)
}

/// Fine-tunes `state` on `train`. The snapshot is taken here, from the
/// parameters passed in; an EMA shadow is started when the method needs one.
pub fn finetune(
    state: &mut ModelState,
    train: &Dataset,
    eval_splits: &[&Dataset],
    cfg: &TrainConfig,
    reg: &RegularizerConfig,
    augment: &AugmentPolicy,
) -> Result<RunLog> {
    finetune_observed(state, train, eval_splits, cfg, reg, augment, &mut |_| {})
}

/// [`finetune`] with a callback run before every optimizer step.
pub fn finetune_observed(
    state: &mut ModelState,
    train: &Dataset,
    eval_splits: &[&Dataset],
    cfg: &TrainConfig,
    reg: &RegularizerConfig,
    augment: &AugmentPolicy,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunLog> {
    for w in reg.validate()? {
        log::warn!("{w}");
    }
    augment.validate()?;
    if train.num_classes != state.params.num_classes() {
        return Err(Error::shape(
            "finetune",
            format!(
                "{} has {} classes, model has {}",
                train.name,
                train.num_classes,
                state.params.num_classes()
            ),
        ));
    }
    state.take_snapshot();
    if reg.method == Method::EmaDistill {
        state.init_ema(reg.ema_decay)?;
    }
    run_loop(state, train, eval_splits, cfg, reg, augment, observer)
}

/// Plain cross-entropy training of encoder and head.
pub fn pretrain(
    state: &mut ModelState,
    train: &Dataset,
    eval_splits: &[&Dataset],
    cfg: &TrainConfig,
) -> Result<RunLog> {
    if train.num_classes != state.params.num_classes() {
        return Err(Error::shape(
            "pretrain",
            format!(
                "{} has {} classes, model has {}",
                train.name,
                train.num_classes,
                state.params.num_classes()
            ),
        ));
    }
    state.params.head.trainable = true;
    let reg = RegularizerConfig::with_method(Method::None);
    run_loop(
        state,
        train,
        eval_splits,
        cfg,
        &reg,
        &AugmentPolicy::identity(),
        &mut |_| {},
    )
}

/// Model for fine-tuning: the pretrained encoder and the prototype rows of
/// `classes`, in that order.
pub fn finetune_init(
    pretrained: &Params,
    classes: &[usize],
    head_trainable: bool,
) -> Result<Params> {
    let mut head = pretrained.head.select(classes)?;
    head.trainable = head_trainable;
    Ok(Params {
        encoder: pretrained.encoder.clone(),
        head,
    })
}
