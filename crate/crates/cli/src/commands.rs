use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use funcreg_core::analysis::{
    interpolation_csv, interpolation_svg, parse_alpha_range, run_ablation,
    run_interpolation_sweep, run_perturbation_study, FinetuneSetup, PerturbationSpec,
};
use funcreg_core::checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint};
use funcreg_core::data::{
    generate_benchmark, load_benchmark_dir, save_benchmark_dir, BenchmarkData, ShiftBenchmark,
};
use funcreg_core::metrics::{evaluate_report, zero_shot_transfer_eval, MetricsReport};
use funcreg_core::model::{ModelState, Params};
use funcreg_core::training::{finetune, finetune_init, pretrain, Phase, RunLog, TrainConfig};

use crate::config::{config_hash, read_json, RunConfig, RunManifest};
use crate::exit::Failure;

pub const MODEL_STEM: &str = "model";
pub const METRICS_JSON: &str = "metrics.json";
pub const REPORT_HEADER: &str = "run,method,seed,id_acc,ood_avg,ood_min,id_f1_macro,heldout_zs";

fn out_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(path);
    Ok(())
}

fn load_data(dir: &Path) -> anyhow::Result<BenchmarkData> {
    if !dir.is_dir() {
        return Err(Failure::Data(format!("data directory {} not found", dir.display())).into());
    }
    load_benchmark_dir(dir).with_context(|| format!("loading data from {}", dir.display()))
}

fn load_model(stem: &Path) -> anyhow::Result<Params> {
    load_checkpoint(stem).with_context(|| format!("loading checkpoint {}", stem.display()))
}

fn save_model(params: &Params, dir: &Path, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let stem = dir.join(MODEL_STEM);
    save_checkpoint(params, &stem)?;
    let (json, bin) = checkpoint_paths(&stem);
    manifest.outputs.extend([json, bin]);
    Ok(())
}

fn save_log(log: &RunLog, dir: &Path, manifest: &mut RunManifest) -> anyhow::Result<()> {
    write(dir, "steps.csv", &log.steps_csv(), manifest)?;
    write(dir, "eval.csv", &log.evals_csv(), manifest)
}

fn finish(mut manifest: RunManifest, dir: &Path, start: Instant) -> anyhow::Result<()> {
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    manifest.write(dir)?;
    log::info!("{} done in {:.1}s, outputs in {}", manifest.command, manifest.wall_clock_secs, dir.display());
    Ok(())
}

fn pretrain_config(train: &TrainConfig) -> TrainConfig {
    if train.phase != Phase::Pretrain {
        log::info!("running the train section as a pretraining phase");
    }
    TrainConfig {
        phase: Phase::Pretrain,
        ..train.clone()
    }
}

pub fn gen_data(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let spec: ShiftBenchmark = read_json(spec_path, "benchmark spec")?;
    let data = generate_benchmark(&spec)?;
    out_dir(out)?;
    save_benchmark_dir(&data, out)?;
    let mut manifest = RunManifest::new("gen-data", config_hash(&spec));
    manifest.seed = Some(spec.seed);
    manifest.inputs.push(spec_path.to_path_buf());
    for entry in fs::read_dir(out)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            manifest.outputs.push(path);
        }
    }
    manifest.outputs.sort();
    manifest.outputs.push(out.join("manifest.json"));
    finish(manifest, out, start)
}

pub fn cmd_pretrain(config_path: &Path, data_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg: RunConfig = read_json(config_path, "config")?;
    cfg.validate()?;
    let data = load_data(data_dir)?;
    let train = pretrain_config(&cfg.train);
    let params = Params::init(data.pretrain.dim, data.pretrain.num_classes, &cfg.model)?;
    let mut state = ModelState::new(params);
    log::info!("pretraining on {} examples for {} epochs", data.pretrain.len(), train.epochs);
    let log = pretrain(&mut state, &data.pretrain, &[&data.pretrain_test], &train)?;
    out_dir(out)?;
    let mut manifest = RunManifest::new("pretrain", config_hash(&cfg));
    manifest.seed = Some(train.seed);
    manifest.inputs.extend([config_path.to_path_buf(), data_dir.to_path_buf()]);
    save_model(&state.params, out, &mut manifest)?;
    save_log(&log, out, &mut manifest)?;
    finish(manifest, out, start)
}

pub fn cmd_finetune(config_path: &Path, data_dir: &Path, pretrained: &Path, out: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg: RunConfig = read_json(config_path, "config")?;
    cfg.validate()?;
    let data = load_data(data_dir)?;
    let pre = load_model(pretrained)?;
    let mut state = ModelState::new(finetune_init(&pre, &data.finetune_classes, cfg.model.head_trainable)?);
    log::info!(
        "fine-tuning with {} on {} examples for {} epochs",
        cfg.regularizer.method.name(),
        data.id_train.len(),
        cfg.train.epochs
    );
    let train = TrainConfig {
        phase: Phase::Finetune,
        ..cfg.train.clone()
    };
    let log = finetune(&mut state, &data.id_train, &data.eval_splits(), &train, &cfg.regularizer, &cfg.augment)?;
    let report = evaluate_report(&state.params, &data)?;
    log::info!("ID acc {:.4}, OOD avg {:.4}", report.id().acc, report.ood_avg);

    out_dir(out)?;
    let mut manifest = RunManifest::new("finetune", config_hash(&cfg));
    manifest.method = Some(cfg.regularizer.method.name().to_string());
    manifest.seed = Some(cfg.train.seed);
    manifest.inputs.extend([config_path.to_path_buf(), data_dir.to_path_buf(), pretrained.to_path_buf()]);
    save_model(&state.params, out, &mut manifest)?;
    save_log(&log, out, &mut manifest)?;
    write(out, METRICS_JSON, &(report.to_json() + "\n"), &mut manifest)?;
    write(out, "metrics.csv", &report.to_csv(), &mut manifest)?;
    if !data.heldout.is_empty() {
        let zs = zero_shot_transfer_eval(
            &pre.head.prototypes,
            &state.params.encoder,
            &data.heldout,
            &data.heldout_classes,
            &data.finetune_classes,
        )?;
        write(out, "heldout_zs.csv", &format!("heldout_zs\n{zs}\n"), &mut manifest)?;
    }
    finish(manifest, out, start)
}

pub fn cmd_perturb(model: &Path, spec_path: &Path, data_dir: &Path, out: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let spec: PerturbationSpec = read_json(spec_path, "perturbation spec")?;
    spec.validate()?;
    let params = load_model(model)?;
    let data = load_data(data_dir)?;
    let splits = data.eval_splits();
    log::info!(
        "{} spaces x {} directions x {} magnitudes x {} splits",
        spec.spaces.len(),
        spec.n_directions,
        spec.magnitudes.len(),
        splits.len()
    );
    let report = run_perturbation_study(&params, &spec, &splits)?;
    out_dir(out)?;
    let mut manifest = RunManifest::new("perturb", config_hash(&spec));
    manifest.seed = Some(spec.seed);
    manifest.inputs.extend([model.to_path_buf(), spec_path.to_path_buf(), data_dir.to_path_buf()]);
    write(out, "perturbation.csv", &report.records_csv(), &mut manifest)?;
    write(out, "perturbation_summary.csv", &report.aggregate_csv(), &mut manifest)?;
    write(out, "perturbation_acc.svg", &report.svg("acc"), &mut manifest)?;
    write(out, "perturbation_loss.svg", &report.svg("loss"), &mut manifest)?;
    finish(manifest, out, start)
}

pub fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::Usage(format!("seed {s:?} is not a non-negative integer")))
        })
        .collect::<Result<_, _>>()?;
    Ok(seeds)
}

pub fn cmd_ablate(
    config_path: &Path,
    seeds: &[u64],
    data_dir: Option<&Path>,
    pretrained: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let cfg: RunConfig = read_json(config_path, "config")?;
    cfg.validate()?;
    let data = match data_dir {
        Some(d) => load_data(d)?,
        None => generate_benchmark(&cfg.data)?,
    };
    let pre = match pretrained {
        Some(p) => load_model(p)?,
        None => {
            log::info!("no checkpoint given; pretraining with default settings");
            let train = TrainConfig {
                phase: Phase::Pretrain,
                seed: cfg.train.seed,
                ..TrainConfig::default()
            };
            let mut state =
                ModelState::new(Params::init(data.pretrain.dim, data.pretrain.num_classes, &cfg.model)?);
            pretrain(&mut state, &data.pretrain, &[], &train)?;
            state.params
        }
    };
    let base = FinetuneSetup {
        train: cfg.train.clone(),
        regularizer: cfg.regularizer.clone(),
        augment: cfg.augment.clone(),
        head_trainable: cfg.model.head_trainable,
    };
    log::info!("ablation over seeds {seeds:?}");
    let table = run_ablation(&pre, &data, &base, seeds)?;
    out_dir(out)?;
    let mut manifest = RunManifest::new("ablate", config_hash(&cfg));
    manifest.inputs.push(config_path.to_path_buf());
    manifest.inputs.extend(data_dir.map(Path::to_path_buf));
    manifest.inputs.extend(pretrained.map(Path::to_path_buf));
    write(out, "ablation.csv", &table.to_csv(), &mut manifest)?;
    write(out, "ablation_runs.csv", &table.runs_csv(), &mut manifest)?;
    finish(manifest, out, start)
}

pub fn cmd_interpolate(
    pretrained: &Path,
    finetuned: &Path,
    alphas: &str,
    data_dir: &Path,
    out: &Path,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let alphas = parse_alpha_range(alphas).map_err(|e| Failure::Usage(e.to_string()))?;
    let data = load_data(data_dir)?;
    let pre = load_model(pretrained)?;
    let ft = load_model(finetuned)?;
    // a pretrained checkpoint over all classes is cut down to the task head
    let theta0 = if pre.num_classes() == ft.num_classes() {
        pre
    } else {
        finetune_init(&pre, &data.finetune_classes, ft.head.trainable)?
    };
    let curve = run_interpolation_sweep(&theta0, &ft, &alphas, &data.eval_splits())?;
    out_dir(out)?;
    let key = serde_json::json!({
        "alphas": alphas,
        "pretrained": pretrained,
        "finetuned": finetuned,
    });
    let mut manifest = RunManifest::new("interpolate", config_hash(&key));
    manifest.inputs.extend([pretrained.to_path_buf(), finetuned.to_path_buf(), data_dir.to_path_buf()]);
    write(out, "interpolation.csv", &interpolation_csv(&curve), &mut manifest)?;
    write(out, "interpolation.svg", &interpolation_svg(&curve), &mut manifest)?;
    finish(manifest, out, start)
}

/// One row of the consolidated table.
fn report_row(dir: &Path) -> anyhow::Result<String> {
    if !dir.is_dir() {
        return Err(Failure::Data(format!("run directory {} not found", dir.display())).into());
    }
    let manifest = RunManifest::read(dir)?;
    let path = dir.join(METRICS_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let metrics: MetricsReport =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let heldout = fs::read_to_string(dir.join("heldout_zs.csv"))
        .ok()
        .and_then(|t| t.lines().nth(1).map(str::to_string))
        .unwrap_or_default();
    let ood_min = metrics.ood().iter().map(|m| m.acc).fold(f64::INFINITY, f64::min);
    let opt = |v: Option<String>| v.unwrap_or_default();
    Ok(format!(
        "{},{},{},{},{},{},{},{}",
        dir.display(),
        opt(manifest.method),
        opt(manifest.seed.map(|s| s.to_string())),
        metrics.id().acc,
        metrics.ood_avg,
        if ood_min.is_finite() { ood_min.to_string() } else { String::new() },
        metrics.id().f1_macro,
        heldout
    ))
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let missing: Vec<String> = runs.iter().filter(|r| !r.is_dir()).map(|r| r.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Failure::Data(format!("run directories not found: {}", missing.join(", "))).into());
    }
    let mut table = String::from(REPORT_HEADER);
    table.push('\n');
    for dir in runs {
        table.push_str(&report_row(dir)?);
        table.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    fs::write(out, table).with_context(|| format!("writing {}", out.display()))?;
    log::info!("report over {} runs written to {}", runs.len(), out.display());
    Ok(())
}
