//! Perturbation robustness study, FAR/FCR ablation and weight interpolation.
//!
//! A perturbation direction lives in one of four spaces:
//!
//! * parameter: unit vector over all flattened parameters, applied as `θ + m·u`;
//! * feature: unit vector in `R^D` added to every embedding before the head;
//! * logit: unit vector in `R^K` added to every logit row;
//! * function: a random network `g: R^{d_in} → R^K` scaled by
//!   `c = sqrt(mean |g(x)|²)` over the evaluated split, so `g/c` has unit
//!   empirical L2(μ) norm there, added as `z(x) + m·g(x)/c`.
//!
//! Feature, logit and function directions are the same for every example
//! of a split; the function direction's effect varies with `x`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::data::{BenchmarkData, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate, evaluate_report, metrics_from_logits, zero_shot_transfer_eval, SplitMetrics,
};
use crate::model::{interpolate_weights, EncoderParams, ModelState, Params};
use crate::plot::line_plot;
use crate::regularizers::{Method, RegularizerConfig};
use crate::rng::{self, stream};
use crate::tensor::Tensor;
use crate::training::{finetune, finetune_init, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Parameter,
    Feature,
    Logit,
    Function,
}

impl Space {
    pub const ALL: [Space; 4] = [
        Space::Parameter,
        Space::Feature,
        Space::Logit,
        Space::Function,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Space::Parameter => "parameter",
            Space::Feature => "feature",
            Space::Logit => "logit",
            Space::Function => "function",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

/// How nominal magnitudes map to parameter-space step lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ParameterScale {
    /// Step length `m · scale`.
    Absolute { scale: f64 },
    /// Step length `m · pct/100 · ‖θ‖₂`.
    RelativeNormPct { pct: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    pub spaces: Vec<Space>,
    pub n_directions: usize,
    pub magnitudes: Vec<f64>,
    pub parameter_scale: ParameterScale,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            spaces: Space::ALL.to_vec(),
            n_directions: 10,
            magnitudes: vec![0.1, 0.2, 0.3, 0.4, 0.5, 1.0],
            parameter_scale: ParameterScale::Absolute { scale: 0.0004 },
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    /// Magnitude 0 is allowed and reproduces the unperturbed model.
    pub fn validate(&self) -> Result<()> {
        if self.n_directions == 0 {
            return Err(Error::Config("n_directions must be at least 1".into()));
        }
        if self.spaces.is_empty() || self.magnitudes.is_empty() {
            return Err(Error::Config(
                "need at least one space and one magnitude".into(),
            ));
        }
        if let Some(m) = self
            .magnitudes
            .iter()
            .find(|m| !(m.is_finite() && **m >= 0.0))
        {
            return Err(Error::Config(format!(
                "magnitude {m} must be finite and nonnegative"
            )));
        }
        match self.parameter_scale {
            ParameterScale::Absolute { scale: s } | ParameterScale::RelativeNormPct { pct: s }
                if !(s.is_finite() && s > 0.0) =>
            {
                Err(Error::Config(format!(
                    "parameter scale {s} must be positive"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    Parameter(Vec<f64>),
    Feature(Vec<f64>),
    Logit(Vec<f64>),
    /// Unnormalized random network; see [`Direction::function_scale`].
    Function(EncoderParams),
}

impl Direction {
    pub fn space(&self) -> Space {
        match self {
            Direction::Parameter(_) => Space::Parameter,
            Direction::Feature(_) => Space::Feature,
            Direction::Logit(_) => Space::Logit,
            Direction::Function(_) => Space::Function,
        }
    }

    /// `c = sqrt((1/N) Σ |g(xᵢ)|²)` over `x`.
    pub fn function_scale(net: &EncoderParams, x: &Tensor) -> Result<f64> {
        let g = net.forward(x)?;
        let c = (g.data().iter().map(|v| v * v).sum::<f64>() / x.rows().max(1) as f64).sqrt();
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Numeric(format!(
                "function direction has empirical norm {c}"
            )));
        }
        Ok(c)
    }
}

fn unit_gaussian(n: usize, parts: &[u64]) -> Vec<f64> {
    let mut r = rng::keyed(parts);
    let v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

/// Draws one unit direction in `space` for a model shaped like `params`.
pub fn sample_unit_direction(space: Space, params: &Params, seed: u64) -> Result<Direction> {
    let key = [seed, stream::DIRECTION, space.tag()];
    Ok(match space {
        Space::Parameter => Direction::Parameter(unit_gaussian(params.num_params(), &key)),
        Space::Feature => Direction::Feature(unit_gaussian(params.encoder.output_dim(), &key)),
        Space::Logit => Direction::Logit(unit_gaussian(params.num_classes(), &key)),
        Space::Function => {
            let mut dims = vec![params.encoder.input_dim()];
            dims.extend(
                params.encoder.layers[..params.encoder.layers.len() - 1]
                    .iter()
                    .map(|l| l.weight.shape()[1]),
            );
            dims.push(params.num_classes());
            Direction::Function(EncoderParams::init(&dims, rng::mix(&key))?)
        }
    })
}

fn scaled(dir: &[f64], m: f64) -> Tensor {
    Tensor::new(vec![dir.len()], dir.iter().map(|v| m * v).collect()).expect("vector")
}

/// Logits of the perturbed model on `x`. `magnitude` is the actual step
/// length. The model is not modified.
pub fn perturbed_logits(
    params: &Params,
    dir: &Direction,
    magnitude: f64,
    x: &Tensor,
) -> Result<Tensor> {
    match dir {
        Direction::Parameter(u) => {
            if u.len() != params.num_params() {
                return Err(Error::shape(
                    "perturb",
                    format!(
                        "direction of {} for {} parameters",
                        u.len(),
                        params.num_params()
                    ),
                ));
            }
            let flat: Vec<f64> = params
                .flatten()
                .iter()
                .zip(u)
                .map(|(t, d)| t + magnitude * d)
                .collect();
            params.with_flat(&flat)?.logits(x)
        }
        Direction::Feature(u) => {
            if u.len() != params.encoder.output_dim() {
                return Err(Error::shape(
                    "perturb",
                    format!(
                        "feature direction of {} for D={}",
                        u.len(),
                        params.encoder.output_dim()
                    ),
                ));
            }
            params
                .features(x)?
                .add_bias(&scaled(u, magnitude))?
                .matmul_t(&params.head.prototypes)
        }
        Direction::Logit(u) => {
            if u.len() != params.num_classes() {
                return Err(Error::shape(
                    "perturb",
                    format!(
                        "logit direction of {} for K={}",
                        u.len(),
                        params.num_classes()
                    ),
                ));
            }
            params.logits(x)?.add_bias(&scaled(u, magnitude))
        }
        Direction::Function(net) => {
            if net.output_dim() != params.num_classes()
                || net.input_dim() != params.encoder.input_dim()
            {
                return Err(Error::shape(
                    "perturb",
                    "function direction does not match the model",
                ));
            }
            let c = Direction::function_scale(net, x)?;
            let g = net.forward(x)?;
            params.logits(x)?.add(&g.scale(magnitude / c))
        }
    }
}

/// Step length in parameter space for nominal magnitude `m`.
pub fn parameter_step(params: &Params, scale: ParameterScale, m: f64) -> f64 {
    match scale {
        ParameterScale::Absolute { scale } => m * scale,
        ParameterScale::RelativeNormPct { pct } => {
            let norm = params.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
            m * pct / 100.0 * norm
        }
    }
}

/// Metrics of the perturbed model on `split`.
pub fn perturbed_eval(
    params: &Params,
    dir: &Direction,
    magnitude: f64,
    split: &Dataset,
) -> Result<SplitMetrics> {
    let logits = perturbed_logits(params, dir, magnitude, &split.features_tensor()?)?;
    metrics_from_logits(&split.name, &logits, &split.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub space: Space,
    pub direction: usize,
    /// Nominal magnitude; parameter space maps it through [`ParameterScale`].
    pub magnitude: f64,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationAggregate {
    pub space: Space,
    pub magnitude: f64,
    pub split: String,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// Baseline accuracy minus `acc_mean`.
    pub acc_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub baseline: Vec<SplitMetrics>,
    pub records: Vec<PerturbationRecord>,
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl PerturbationReport {
    pub fn aggregate(&self) -> Vec<PerturbationAggregate> {
        let mut groups: BTreeMap<(Space, u64, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.records {
            let g = groups
                .entry((r.space, r.magnitude.to_bits(), r.split.clone()))
                .or_default();
            g.0.push(r.loss);
            g.1.push(r.acc);
        }
        let mut out: Vec<PerturbationAggregate> = groups
            .into_iter()
            .map(|((space, m, split), (losses, accs))| {
                let (loss_mean, loss_std) = mean_std(&losses);
                let (acc_mean, acc_std) = mean_std(&accs);
                let base = self
                    .baseline
                    .iter()
                    .find(|b| b.split == split)
                    .map_or(f64::NAN, |b| b.acc);
                PerturbationAggregate {
                    space,
                    magnitude: f64::from_bits(m),
                    split,
                    loss_mean,
                    loss_std,
                    acc_mean,
                    acc_std,
                    acc_drop: base - acc_mean,
                }
            })
            .collect();
        out.sort_by(|a, b| {
            (a.space, &a.split)
                .cmp(&(b.space, &b.split))
                .then(a.magnitude.total_cmp(&b.magnitude))
        });
        out
    }

    pub fn records_csv(&self) -> String {
        let mut s = String::from("space,direction,magnitude,split,loss,acc\n");
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.space.name(),
                r.direction,
                r.magnitude,
                r.split,
                r.loss,
                r.acc
            )
            .unwrap();
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s =
            String::from("space,magnitude,split,loss_mean,loss_std,acc_mean,acc_std,acc_drop\n");
        for a in self.aggregate() {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                a.space.name(),
                a.magnitude,
                a.split,
                a.loss_mean,
                a.loss_std,
                a.acc_mean,
                a.acc_std,
                a.acc_drop
            )
            .unwrap();
        }
        s
    }

    /// `metric` is `"loss"` or `"acc"`; values are averaged over splits.
    pub fn svg(&self, metric: &str) -> String {
        let agg = self.aggregate();
        let mut spaces: Vec<Space> = agg.iter().map(|a| a.space).collect();
        spaces.dedup();
        let series: Vec<(String, Vec<(f64, f64)>)> = spaces
            .iter()
            .map(|&sp| {
                let mut by_m: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
                for a in agg.iter().filter(|a| a.space == sp) {
                    let v = if metric == "loss" {
                        a.loss_mean
                    } else {
                        a.acc_mean
                    };
                    by_m.entry(a.magnitude.to_bits()).or_default().push(v);
                }
                let mut pts: Vec<(f64, f64)> = by_m
                    .into_iter()
                    .map(|(m, v)| (f64::from_bits(m), mean_std(&v).0))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (sp.name().to_string(), pts)
            })
            .collect();
        line_plot(
            &format!("{metric} under perturbation"),
            "magnitude",
            metric,
            &series,
        )
    }
}

/// Full sweep over spaces × directions × magnitudes × splits. Evaluations
/// run in parallel; records come back sorted by key.
pub fn run_perturbation_study(
    params: &Params,
    spec: &PerturbationSpec,
    splits: &[&Dataset],
) -> Result<PerturbationReport> {
    spec.validate()?;
    let baseline = splits
        .iter()
        .map(|s| evaluate(params, s))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &space in &spec.spaces {
        for d in 0..spec.n_directions {
            jobs.push((space, d));
        }
    }
    let xs = splits
        .iter()
        .map(|s| s.features_tensor())
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<PerturbationRecord> = jobs
        .par_iter()
        .map(|&(space, d)| -> Result<Vec<PerturbationRecord>> {
            let dir = sample_unit_direction(space, params, rng::mix(&[spec.seed, d as u64]))?;
            let mut out = Vec::new();
            for &m in &spec.magnitudes {
                let step = match space {
                    Space::Parameter => parameter_step(params, spec.parameter_scale, m),
                    _ => m,
                };
                for (split, x) in splits.iter().zip(&xs) {
                    let logits = perturbed_logits(params, &dir, step, x)?;
                    let met = metrics_from_logits(&split.name, &logits, &split.labels)?;
                    out.push(PerturbationRecord {
                        space,
                        direction: d,
                        magnitude: m,
                        split: split.name.clone(),
                        loss: met.loss,
                        acc: met.acc,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let order: BTreeMap<&str, usize> = splits
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    records.sort_by(|a, b| {
        (a.space, a.direction)
            .cmp(&(b.space, b.direction))
            .then(a.magnitude.total_cmp(&b.magnitude))
            .then(order[a.split.as_str()].cmp(&order[b.split.as_str()]))
    });
    Ok(PerturbationReport { baseline, records })
}

/// Everything a fine-tuning run needs besides data and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSetup {
    pub train: TrainConfig,
    pub regularizer: RegularizerConfig,
    pub augment: AugmentPolicy,
    pub head_trainable: bool,
}

impl Default for FinetuneSetup {
    fn default() -> Self {
        FinetuneSetup {
            train: TrainConfig::default(),
            regularizer: RegularizerConfig::default(),
            augment: AugmentPolicy::default(),
            head_trainable: true,
        }
    }
}

impl FinetuneSetup {
    /// Same setup with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.train.seed = seed;
        s.regularizer.seed = seed;
        s.augment.seed = seed;
        s
    }
}

/// Outcome of one fine-tuning run on the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub params: Params,
    pub id_acc: f64,
    pub ood_avg: f64,
    pub ood: Vec<SplitMetrics>,
    /// Held-out-class accuracy with the frozen pretrained prototypes.
    pub heldout_zs: f64,
}

/// Fine-tunes from `pretrained` (all classes) on the ID split and scores it.
pub fn finetune_on_benchmark(
    pretrained: &Params,
    data: &BenchmarkData,
    setup: &FinetuneSetup,
) -> Result<RunOutcome> {
    let mut state = ModelState::new(finetune_init(
        pretrained,
        &data.finetune_classes,
        setup.head_trainable,
    )?);
    finetune(
        &mut state,
        &data.id_train,
        &[],
        &setup.train,
        &setup.regularizer,
        &setup.augment,
    )?;
    let report = evaluate_report(&state.params, data)?;
    let heldout_zs = if data.heldout_classes.is_empty() || data.heldout.is_empty() {
        f64::NAN
    } else {
        zero_shot_transfer_eval(
            &pretrained.head.prototypes,
            &state.params.encoder,
            &data.heldout,
            &data.heldout_classes,
            &data.finetune_classes,
        )?
    };
    Ok(RunOutcome {
        id_acc: report.id().acc,
        ood_avg: report.ood_avg,
        ood: report.ood().to_vec(),
        heldout_zs,
        params: state.params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ft,
    FtFar,
    FtFcr,
    FtFarFcr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Ft,
        Variant::FtFar,
        Variant::FtFcr,
        Variant::FtFarFcr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ft => "FT",
            Variant::FtFar => "FT+FAR",
            Variant::FtFcr => "FT+FCR",
            Variant::FtFarFcr => "FT+FAR+FCR",
        }
    }

    pub fn method(self) -> Method {
        match self {
            Variant::Ft => Method::None,
            Variant::FtFar => Method::Far,
            Variant::FtFcr => Method::Fcr,
            Variant::FtFarFcr => Method::FarFcr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub id_acc: f64,
    pub ood_avg: f64,
    pub heldout_zs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub id_mean: f64,
    pub id_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
    /// Accuracy points over the pretrained (zero-shot) model.
    pub id_gain: f64,
    pub ood_gain: f64,
    pub heldout_zs_mean: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub pretrained_id: f64,
    pub pretrained_ood: f64,
    pub pretrained_heldout_zs: f64,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == v.name())
            .expect("all variants present")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,id_mean,id_std,ood_mean,ood_std,id_gain,ood_gain,heldout_zs_mean,n_seeds\n",
        );
        writeln!(
            s,
            "pretrained,{},0,{},0,0,0,{},0",
            self.pretrained_id, self.pretrained_ood, self.pretrained_heldout_zs
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.variant,
                r.id_mean,
                r.id_std,
                r.ood_mean,
                r.ood_std,
                r.id_gain,
                r.ood_gain,
                r.heldout_zs_mean,
                r.n_seeds
            )
            .unwrap();
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("variant,seed,id_acc,ood_avg,heldout_zs\n");
        for r in &self.runs {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.variant.name(),
                r.seed,
                r.id_acc,
                r.ood_avg,
                r.heldout_zs
            )
            .unwrap();
        }
        s
    }
}

/// Runs FT, FT+FAR, FT+FCR and FT+FAR+FCR for every seed. The λ values and
/// all other settings come from `base`; only the method changes.
pub fn run_ablation(
    pretrained: &Params,
    data: &BenchmarkData,
    base: &FinetuneSetup,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let zs = finetune_init(pretrained, &data.finetune_classes, base.head_trainable)?;
    let zs_report = evaluate_report(&zs, data)?;
    let zs_heldout = if data.heldout_classes.is_empty() || data.heldout.is_empty() {
        f64::NAN
    } else {
        zero_shot_transfer_eval(
            &pretrained.head.prototypes,
            &pretrained.encoder,
            &data.heldout,
            &data.heldout_classes,
            &data.finetune_classes,
        )?
    };

    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let mut setup = base.with_seed(seed);
            setup.regularizer.method = variant.method();
            let out = finetune_on_benchmark(pretrained, data, &setup)?;
            log::info!(
                "{} seed {seed}: id {:.4} ood {:.4}",
                variant.name(),
                out.id_acc,
                out.ood_avg
            );
            Ok(AblationRun {
                variant,
                seed,
                id_acc: out.id_acc,
                ood_avg: out.ood_avg,
                heldout_zs: out.heldout_zs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = Variant::ALL
        .iter()
        .map(|&v| {
            let sel: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            let (id_mean, id_std) = mean_std(&sel.iter().map(|r| r.id_acc).collect::<Vec<_>>());
            let (ood_mean, ood_std) = mean_std(&sel.iter().map(|r| r.ood_avg).collect::<Vec<_>>());
            let (zs_mean, _) = mean_std(&sel.iter().map(|r| r.heldout_zs).collect::<Vec<_>>());
            AblationRow {
                variant: v.name().to_string(),
                id_mean,
                id_std,
                ood_mean,
                ood_std,
                id_gain: id_mean - zs_report.id().acc,
                ood_gain: ood_mean - zs_report.ood_avg,
                heldout_zs_mean: zs_mean,
                n_seeds: sel.len(),
            }
        })
        .collect();
    Ok(AblationTable {
        pretrained_id: zs_report.id().acc,
        pretrained_ood: zs_report.ood_avg,
        pretrained_heldout_zs: zs_heldout,
        runs,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    pub alpha: f64,
    pub metrics: SplitMetrics,
}

/// Evaluates `(1−α)·θ₀ + α·θ_ft` for every α on every split.
pub fn run_interpolation_sweep(
    theta0: &Params,
    theta_ft: &Params,
    alphas: &[f64],
    splits: &[&Dataset],
) -> Result<Vec<InterpolationPoint>> {
    let models = alphas
        .iter()
        .map(|&a| interpolate_weights(theta0, theta_ft, a))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(alphas.len() * splits.len());
    for (&alpha, model) in alphas.iter().zip(&models) {
        for split in splits {
            out.push(InterpolationPoint {
                alpha,
                metrics: evaluate(model, split)?,
            });
        }
    }
    Ok(out)
}

pub fn interpolation_csv(curve: &[InterpolationPoint]) -> String {
    let mut s = String::from("alpha,split,acc,loss,recall_macro,f1_macro\n");
    for p in curve {
        let m = &p.metrics;
        writeln!(
            s,
            "{},{},{},{},{},{}",
            p.alpha, m.split, m.acc, m.loss, m.recall_macro, m.f1_macro
        )
        .unwrap();
    }
    s
}

pub fn interpolation_svg(curve: &[InterpolationPoint]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for p in curve {
        if !names.contains(&p.metrics.split.as_str()) {
            names.push(&p.metrics.split);
        }
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = names
        .iter()
        .map(|n| {
            let pts = curve
                .iter()
                .filter(|p| p.metrics.split == *n)
                .map(|p| (p.alpha, p.metrics.acc))
                .collect();
            (n.to_string(), pts)
        })
        .collect();
    line_plot("weight interpolation", "alpha", "accuracy", &series)
}

/// `start:end:step`, endpoints included within tolerance.
pub fn parse_alpha_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("alpha range {text:?}; expected start:end:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0 && step.is_finite() && start.is_finite() && end.is_finite() && end >= start) {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    let mut out: Vec<f64> = (0..=n).map(|i| start + i as f64 * step).collect();
    // snap the final point onto `end` when it lands within tolerance
    if let Some(last) = out.last_mut() {
        if (*last - end).abs() < 1e-9 {
            *last = end;
        }
    }
    if out.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Config(format!("alpha range {text:?} leaves [0, 1]")));
    }
    Ok(out)
}

/// `(1/N) Σ |softmax z_θ(x̃) − softmax z₀(x̃)|²` on a fixed augmented set.
pub fn function_distance(params: &Params, reference: &Params, x_aug: &Tensor) -> Result<f64> {
    let a = params.logits(x_aug)?.softmax()?;
    let b = reference.logits(x_aug)?.softmax()?;
    Ok(crate::autodiff::mean_squared_l2_value(&a, &b))
}
