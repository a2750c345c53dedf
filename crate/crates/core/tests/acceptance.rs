//! Acceptance criteria 1–10. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

mod common;

use std::time::{Duration, Instant};

use common::*;
use funcreg_core::analysis::*;
use funcreg_core::augment::{apply_policy, AugmentPolicy};
use funcreg_core::autodiff::kl_value;
use funcreg_core::checkpoint::encode;
use funcreg_core::data::{batches, generate_benchmark, save_csv, ShiftBenchmark};
use funcreg_core::metrics::{evaluate, macro_f1};
use funcreg_core::model::{ModelState, Params};
use funcreg_core::regularizers::*;
use funcreg_core::training::*;
use funcreg_core::{Tape, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn ft_setup(method: Method) -> FinetuneSetup {
    let mut s = FinetuneSetup::default();
    s.regularizer.method = method;
    s
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, LossKind::Ce, 0);
    for kind in LossKind::ALL {
        for seed in 0..20 {
            let e = grad_check(kind, seed);
            if e.is_nan() || e > worst.0 {
                worst = (e, kind, seed);
            }
        }
    }
    let el = t.elapsed();
    outcome(
        worst.0 < 1e-4 && el < Duration::from_secs(10),
        format!(
            "9 losses x 20 seeds, {} params, max relative error {:.2e} ({:?}, seed {}), {}",
            toy(0).state.params.num_params(),
            worst.0,
            worst.1,
            worst.2,
            secs(el)
        ),
    )
}

fn zero_at_origin() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let t = toy(seed);
        let mut state = ModelState::new(t.state.snapshot().unwrap().clone());
        state.take_snapshot();
        state.init_ema(0.9).unwrap();
        let mut tape = Tape::new();
        let live = state.params.bind(&mut tape, true);
        let values = [
            far_loss(&mut tape, &live, &state, &t.x_aug, OutputSpace::Probabilities).unwrap(),
            far_loss(&mut tape, &live, &state, &t.x_aug, OutputSpace::Logits).unwrap(),
            fcr_loss(&mut tape, &live, &t.x, &t.x).unwrap(),
            l2sp_loss(&mut tape, &live, &state).unwrap(),
            ldifs_loss(&mut tape, &live, &state, &t.x).unwrap(),
            car_loss(&mut tape, &live, &state, &t.x, &t.context).unwrap(),
            lipsum_loss(&mut tape, &live, &state, &t.x, &t.reg, 0).unwrap(),
            ema_distill_loss(&mut tape, &live, &state, &t.x).unwrap(),
        ];
        for v in values {
            worst = worst.max(tape.value(v).item().abs());
        }
    }
    outcome(
        worst <= 1e-12,
        format!("max |R(theta0)| over 7 regularizers x 5 seeds = {worst:.1e}"),
    )
}

/// Plain fine-tuning written out independently of the library loop.
fn duplicate_ft_loop(start: &Params, train: &funcreg_core::data::Dataset, cfg: &TrainConfig) -> Params {
    let mut params = start.clone();
    let mut adam = AdamState::new(&params);
    let total = cfg.epochs * cfg.steps_per_epoch(train.len());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for b in batches(train, cfg.batch_size, cfg.seed, epoch as u64).unwrap() {
            let mut tape = Tape::new();
            let live = params.bind(&mut tape, true);
            let xv = tape.constant(b.x.clone());
            let z = live.logits(&mut tape, xv).unwrap();
            let loss = tape.cross_entropy(z, &b.labels).unwrap();
            let g = tape.backward(loss).unwrap();
            let grads: Vec<Option<&Tensor>> = live.vars().into_iter().map(|v| g.get(v)).collect();
            let h = AdamHyper::from_config(cfg, lr_at(step, total, cfg));
            optimizer_step(&mut params, &grads, &mut adam, &h).unwrap();
            step += 1;
        }
    }
    params
}

fn bits(p: &Params) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

fn degeneracy() -> Outcome {
    let (data, pre) = pretrained();
    let start = finetune_init(pre, &data.finetune_classes, true).unwrap();
    let cfg = TrainConfig::default();
    let run = |reg: RegularizerConfig| {
        let mut s = ModelState::new(start.clone());
        finetune(&mut s, &data.id_train, &[], &cfg, &reg, &AugmentPolicy::default()).unwrap();
        s.params
    };
    let plain = run(RegularizerConfig::with_method(Method::None));
    let zeroed = run(RegularizerConfig {
        method: Method::FarFcr,
        lambda_far: 0.0,
        lambda_fcr: 0.0,
        ..RegularizerConfig::default()
    });
    let oracle = duplicate_ft_loop(&start, &data.id_train, &cfg);
    let same_plain = bits(&zeroed) == bits(&plain);
    let same_oracle = bits(&plain) == bits(&oracle);
    outcome(
        same_plain && same_oracle,
        format!(
            "lambda1=lambda2=0 vs plain FT bit-identical: {same_plain}; plain FT vs duplicate loop: {same_oracle}; moved {:.3} from start",
            plain.distance(&start).unwrap()
        ),
    )
}

fn plain_ft_model() -> &'static RunOutcome {
    static CELL: std::sync::OnceLock<RunOutcome> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let (data, pre) = pretrained();
        finetune_on_benchmark(pre, data, &ft_setup(Method::None)).unwrap()
    })
}

fn perturbation_ordering() -> Outcome {
    let t = Instant::now();
    let (data, _) = pretrained();
    let ft = plain_ft_model();
    let splits = data.eval_splits();
    let report = run_perturbation_study(&ft.params, &PerturbationSpec::default(), &splits).unwrap();
    let agg = report.aggregate();
    let mean_drop = |space: Space, split: &str| {
        let v: Vec<f64> = agg
            .iter()
            .filter(|a| a.space == space && a.split == split)
            .map(|a| a.acc_drop)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut held = 0;
    let mut parts = Vec::new();
    for s in &splits {
        let f = mean_drop(Space::Function, &s.name);
        let l = mean_drop(Space::Logit, &s.name);
        let e = mean_drop(Space::Feature, &s.name);
        let ok = f <= l && f <= e;
        held += ok as usize;
        parts.push(format!(
            "{}[fn {:+.4} logit {:+.4} feat {:+.4} param {:+.4}{}]",
            s.name,
            f,
            l,
            e,
            mean_drop(Space::Parameter, &s.name),
            if ok { "" } else { " x" }
        ));
    }
    let el = t.elapsed();
    outcome(
        held >= 4 && el < Duration::from_secs(120),
        format!(
            "function <= logit and <= feature on {held}/5 splits (mean acc drop over magnitudes): {}; {}",
            parts.join(" "),
            secs(el)
        ),
    )
}

fn ablation() -> &'static (AblationTable, Duration) {
    static CELL: std::sync::OnceLock<(AblationTable, Duration)> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let (data, pre) = pretrained();
        let t = Instant::now();
        let table = run_ablation(pre, data, &FinetuneSetup::default(), &[0, 1, 2, 3, 4]).unwrap();
        (table, t.elapsed())
    })
}

fn far_fcr_ordering() -> Outcome {
    let (table, el) = ablation();
    let ft = table.row(Variant::Ft).ood_mean;
    let far = table.row(Variant::FtFar).ood_mean;
    let both = table.row(Variant::FtFarFcr).ood_mean;
    let fcr = table.row(Variant::FtFcr).ood_mean;
    outcome(
        ft < far && far <= both && both - ft >= 0.02 && *el < Duration::from_secs(300),
        format!(
            "OOD mean over 5 seeds: FT {ft:.4} < FT+FAR {far:.4} <= FT+FAR+FCR {both:.4}, gain {:+.2} points (FT+FCR {fcr:.4}, zero-shot {:.4}); {}",
            100.0 * (both - ft),
            table.pretrained_ood,
            secs(*el)
        ),
    )
}

fn lambda_monotonicity() -> Outcome {
    let (data, pre) = pretrained();
    let reference = finetune_init(pre, &data.finetune_classes, true).unwrap();
    let x = data.id_test.features_tensor().unwrap();
    let lambdas = [0.0, 0.1, 1.0, 10.0];
    let mut violations = 0;
    let mut pairs = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let mut setup = ft_setup(Method::Far).with_seed(seed);
        let x_aug = apply_policy(&setup.augment, &x, 1_000_000).unwrap();
        let d: Vec<f64> = lambdas
            .iter()
            .map(|&l| {
                setup.regularizer.lambda_far = l;
                let o = finetune_on_benchmark(pre, data, &setup).unwrap();
                function_distance(&o.params, &reference, &x_aug).unwrap()
            })
            .collect();
        for w in d.windows(2) {
            pairs += 1;
            violations += (w[1] > w[0]) as usize;
        }
        rows.push(format!(
            "[{}]",
            d.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
        ));
    }
    let rate = violations as f64 / pairs as f64;
    outcome(
        rate <= 0.05,
        format!(
            "{violations}/{pairs} violations; distance per seed at lambda1 = 0, 0.1, 1, 10: {}",
            rows.join(" ")
        ),
    )
}

fn interpolation_endpoints() -> Outcome {
    let (data, pre) = pretrained();
    let ft = plain_ft_model();
    let theta0 = finetune_init(pre, &data.finetune_classes, true).unwrap();
    let splits = data.eval_splits();
    let t = Instant::now();
    let alphas = parse_alpha_range("0:1:0.1").unwrap();
    let curve = run_interpolation_sweep(&theta0, &ft.params, &alphas, &splits).unwrap();
    let el = t.elapsed();
    let first: Vec<_> = curve.iter().filter(|p| p.alpha == 0.0).map(|p| p.metrics.clone()).collect();
    let last: Vec<_> = curve.iter().filter(|p| p.alpha == 1.0).map(|p| p.metrics.clone()).collect();
    let at0: Vec<_> = splits.iter().map(|s| evaluate(&theta0, s).unwrap()).collect();
    let at1: Vec<_> = splits.iter().map(|s| evaluate(&ft.params, s).unwrap()).collect();
    let complete = alphas.len() == 11 && curve.len() == 11 * splits.len();
    outcome(
        complete && first == at0 && last == at1 && el < Duration::from_secs(30),
        format!(
            "{} alphas x {} splits, alpha=0 exact: {}, alpha=1 exact: {}; {}",
            alphas.len(),
            splits.len(),
            first == at0,
            last == at1,
            secs(el)
        ),
    )
}

fn metric_oracles() -> Outcome {
    let f1 = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    // F1 of class 0 is 2/3, class 1 is 4/5
    let f1_hand = (2.0 / 3.0 + 4.0 / 5.0) / 2.0;
    let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let q = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
    let kl = kl_value(&p, &q);
    let mut theta = [0.0];
    let (mut m, mut v) = ([0.0], [0.0]);
    let h = AdamHyper {
        lr: 0.1,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, &h);
    // bias-corrected moments are both exactly 1
    let adam_hand = -0.1 * (1.0 / (1.0 + 1e-8));
    let ok = (f1 - f1_hand).abs() <= 1e-9
        && (f1 - 0.733333).abs() < 1e-6
        && (kl - 0.143841).abs() <= 1e-6
        && (theta[0] - adam_hand).abs() <= 1e-9;
    outcome(
        ok,
        format!(
            "macro F1 {f1:.9} (hand {f1_hand:.9}), KL {kl:.6}, AdamW step {:.10} (hand {adam_hand:.10})",
            theta[0]
        ),
    )
}

fn determinism() -> Outcome {
    let (data, pre) = pretrained();
    let dir = tempfile::tempdir().unwrap();
    let run = || {
        let spec = ShiftBenchmark::default();
        let d = generate_benchmark(&spec).unwrap();
        let path = dir.path().join("id_train.csv");
        save_csv(&d.id_train, &path).unwrap();
        let data_csv = std::fs::read(&path).unwrap();
        let mut state = ModelState::new(finetune_init(pre, &data.finetune_classes, true).unwrap());
        let cfg = TrainConfig {
            eval_every: 20,
            ..TrainConfig::default()
        };
        let log = finetune(
            &mut state,
            &data.id_train,
            &data.eval_splits(),
            &cfg,
            &RegularizerConfig::default(),
            &AugmentPolicy::default(),
        )
        .unwrap();
        let spec = PerturbationSpec {
            n_directions: 2,
            magnitudes: vec![0.5],
            ..PerturbationSpec::default()
        };
        let pert = run_perturbation_study(&state.params, &spec, &data.eval_splits()).unwrap();
        let (manifest, payload) = encode(&state.params);
        (
            data_csv,
            log.steps_csv(),
            log.evals_csv(),
            pert.records_csv(),
            serde_json::to_string(&manifest).unwrap(),
            payload,
        )
    };
    let a = run();
    let b = run();
    outcome(
        a == b,
        format!(
            "data CSV, steps/eval CSV, perturbation CSV, checkpoint manifest and {}-byte payload identical across reruns: {}",
            a.5.len(),
            a == b
        ),
    )
}

fn cross_class_transfer() -> Outcome {
    let (table, _) = ablation();
    let zs = table.pretrained_heldout_zs;
    let ft = table.row(Variant::Ft).heldout_zs_mean;
    let both = table.row(Variant::FtFarFcr).heldout_zs_mean;
    let (d_ft, d_both) = (zs - ft, zs - both);
    outcome(
        d_both < d_ft,
        format!(
            "held-out zero-shot {zs:.4}; degradation FT {d_ft:+.4}, FT+FAR+FCR {d_both:+.4} (5 seeds)"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("zero at origin", zero_at_origin),
        ("zero-weight degeneracy", degeneracy),
        ("perturbation-space ordering", perturbation_ordering),
        ("FAR/FCR ordering", far_fcr_ordering),
        ("regularization-pressure monotonicity", lambda_monotonicity),
        ("interpolation endpoints", interpolation_endpoints),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
        ("cross-class transfer", cross_class_transfer),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += (!o.pass) as usize;
        println!(
            "criterion {:>2} {}: {}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            name,
            o.detail
        );
    }
    println!("acceptance: {}/10 passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
