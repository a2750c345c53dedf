//! Synthetic covariate-shift benchmark and dataset I/O.
//!
//! Every example is a class template (an 8×8 intensity grid by default)
//! pushed through its domain's transform (rotation, translation, contrast,
//! intensity shift, background texture) followed by per-example Gaussian
//! noise. Domains never
//! touch labels, so all splits share the same conditional label
//! distribution and differ only in their input marginals.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{rotate_grid, translate_grid, FEATURE_MAX, FEATURE_MIN};
use crate::error::{Error, Location, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Labelled examples stored as a dense `[n × dim]` feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Size of the label space; every label is `< num_classes`.
    pub num_classes: usize,
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let name = name.into();
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{name}: {} values for {} examples of width {dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index(format!(
                "{name}: label {bad} with {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name,
            num_classes,
            dim,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// All features as one `[n × dim]` tensor.
    pub fn features_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::State(format!("{}: empty dataset", self.name)));
        }
        Tensor::new(vec![self.len(), self.dim], self.features.clone())
    }

    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.example(i));
            y.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![idx.len(), self.dim], x)?, y))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

/// One input domain. Transforms act on templates only, never on labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub intensity_shift: f64,
    #[serde(default)]
    pub background_texture_seed: u64,
    /// Scale of the additive background texture; 0 disables it.
    #[serde(default)]
    pub texture_amplitude: f64,
    /// Shift of the template along both axes, in pixels.
    #[serde(default)]
    pub translate_px: f64,
    /// Multiplier on template intensities.
    #[serde(default = "unit")]
    pub contrast: f64,
}

fn unit() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn identity(id: &str) -> Self {
        DomainSpec {
            domain_id: id.to_string(),
            rotation_deg: 0.0,
            noise_sigma: 0.0,
            intensity_shift: 0.0,
            background_texture_seed: 0,
            texture_amplitude: 0.0,
            translate_px: 0.0,
            contrast: 1.0,
        }
    }

    fn same_transform(&self, other: &DomainSpec) -> bool {
        self.rotation_deg == other.rotation_deg
            && self.noise_sigma == other.noise_sigma
            && self.intensity_shift == other.intensity_shift
            && self.texture_amplitude == other.texture_amplitude
            && self.translate_px == other.translate_px
            && self.contrast == other.contrast
            && (self.texture_amplitude == 0.0
                || self.background_texture_seed == other.background_texture_seed)
    }

    fn texture(&self, cells: usize) -> Vec<f64> {
        if self.texture_amplitude == 0.0 {
            return vec![0.0; cells];
        }
        let mut r = rng::keyed(&[self.background_texture_seed, stream::TEXTURE]);
        (0..cells)
            .map(|_| self.texture_amplitude * r.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Deterministic part of the domain transform, applied to one template.
    pub fn transform(&self, template: &[f64], side: usize) -> Vec<f64> {
        let mut out = if self.rotation_deg == 0.0 {
            template.to_vec()
        } else {
            rotate_grid(template, side, self.rotation_deg)
        };
        if self.translate_px != 0.0 {
            out = translate_grid(&out, side, self.translate_px, self.translate_px);
        }
        for (v, t) in out.iter_mut().zip(self.texture(template.len())) {
            *v = self.contrast * *v + self.intensity_shift + t;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub pretrain_test: usize,
    pub id_train: usize,
    pub id_test: usize,
    pub ood_test: usize,
    pub heldout: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            pretrain: 4000,
            pretrain_test: 1000,
            id_train: 300,
            id_test: 600,
            ood_test: 600,
            heldout: 400,
        }
    }
}

/// Benchmark description. Classes `0..finetune_classes` form the
/// downstream task; the rest are only seen during pretraining and are used
/// for cross-class zero-shot evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftBenchmark {
    pub num_classes: usize,
    pub finetune_classes: usize,
    pub grid_side: usize,
    pub pretrain_domains: Vec<DomainSpec>,
    pub id_domain: DomainSpec,
    pub ood_domains: Vec<DomainSpec>,
    pub seed: u64,
    pub min_per_class: usize,
    pub sizes: SplitSizes,
}

fn domain(id: &str, rot: f64, noise: f64, shift: f64, tex_seed: u64, tex_amp: f64) -> DomainSpec {
    DomainSpec {
        domain_id: id.to_string(),
        rotation_deg: rot,
        noise_sigma: noise,
        intensity_shift: shift,
        background_texture_seed: tex_seed,
        texture_amplitude: tex_amp,
        translate_px: 0.0,
        contrast: 1.0,
    }
}

impl Default for ShiftBenchmark {
    fn default() -> Self {
        ShiftBenchmark {
            num_classes: 10,
            finetune_classes: 6,
            grid_side: 8,
            pretrain_domains: vec![
                domain("pre_plain", 0.0, 0.1, 0.0, 101, 0.2),
                domain("pre_rot_pos", 25.0, 0.15, 0.0, 102, 0.2),
                domain("pre_rot_neg", -25.0, 0.2, 0.0, 103, 0.2),
                domain("pre_rot_wide", 50.0, 0.25, 0.0, 104, 0.2),
                domain("pre_rot_wide_neg", -50.0, 0.3, 0.0, 105, 0.2),
                domain("pre_noisy", 0.0, 0.35, 0.0, 106, 0.2),
            ],
            id_domain: domain("id", 0.0, 0.2, 0.0, 201, 1.4),
            ood_domains: vec![
                domain("ood_rot60", 60.0, 0.15, 0.0, 0, 0.0),
                domain("ood_noise", 0.0, 0.6, 0.0, 0, 0.0),
                DomainSpec {
                    translate_px: 1.0,
                    ..domain("ood_translate", 0.0, 0.15, 0.0, 0, 0.0)
                },
                DomainSpec {
                    contrast: 0.5,
                    ..domain("ood_contrast", 0.0, 0.15, 0.0, 0, 0.0)
                },
            ],
            seed: 0,
            min_per_class: 5,
            sizes: SplitSizes::default(),
        }
    }
}

/// All generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkData {
    pub pretrain: Dataset,
    pub pretrain_test: Dataset,
    pub id_train: Dataset,
    pub id_test: Dataset,
    pub ood_tests: Vec<Dataset>,
    /// Held-out-class examples drawn from the OOD domains; labels are global
    /// class ids.
    pub heldout: Dataset,
    pub finetune_classes: Vec<usize>,
    pub heldout_classes: Vec<usize>,
}

impl BenchmarkData {
    /// ID test split followed by every OOD split.
    pub fn eval_splits(&self) -> Vec<&Dataset> {
        std::iter::once(&self.id_test)
            .chain(&self.ood_tests)
            .collect()
    }
}

impl ShiftBenchmark {
    pub fn input_dim(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_classes < 2
            || self.finetune_classes < 2
            || self.finetune_classes > self.num_classes
        {
            return cfg(format!(
                "num_classes {} / finetune_classes {}",
                self.num_classes, self.finetune_classes
            ));
        }
        if self.grid_side < 2 {
            return cfg(format!("grid_side {}", self.grid_side));
        }
        if self.pretrain_domains.is_empty() {
            return cfg("no pretraining domains".into());
        }
        let all = self
            .pretrain_domains
            .iter()
            .chain(std::iter::once(&self.id_domain))
            .chain(&self.ood_domains);
        for d in all {
            if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite())
                || !d.rotation_deg.is_finite()
                || !d.intensity_shift.is_finite()
                || !d.texture_amplitude.is_finite()
                || !d.translate_px.is_finite()
                || !d.contrast.is_finite()
            {
                return cfg(format!(
                    "domain {}: invalid transform parameters",
                    d.domain_id
                ));
            }
        }
        if self
            .ood_domains
            .iter()
            .any(|d| d.same_transform(&self.id_domain) || d.domain_id == self.id_domain.domain_id)
        {
            return cfg("an OOD domain coincides with the ID domain".into());
        }
        for (i, a) in self.ood_domains.iter().enumerate() {
            for b in &self.ood_domains[i + 1..] {
                if a.same_transform(b) || a.domain_id == b.domain_id {
                    return cfg(format!(
                        "OOD domains {} and {} coincide",
                        a.domain_id, b.domain_id
                    ));
                }
            }
        }
        let s = &self.sizes;
        let ft = self.finetune_classes * self.min_per_class;
        let checks = [
            (
                "pretrain",
                s.pretrain,
                self.num_classes * self.min_per_class,
            ),
            (
                "pretrain_test",
                s.pretrain_test,
                self.num_classes * self.min_per_class,
            ),
            ("id_train", s.id_train, ft),
            ("id_test", s.id_test, ft),
            ("ood_test", s.ood_test, ft),
            (
                "heldout",
                s.heldout,
                (self.num_classes - self.finetune_classes) * self.min_per_class,
            ),
        ];
        for (name, n, need) in checks {
            if n < need {
                return cfg(format!("split {name}: {n} examples, need at least {need}"));
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> Vec<Vec<f64>> {
        templates(self.num_classes, self.grid_side, self.seed)
    }
}

/// Class templates. The first twelve are fixed shapes (bar, plus, ring,
/// disk, L, T, double bar, checkerboard, U, triangle, corners, Z); further
/// classes get seeded random patterns.
pub fn templates(num_classes: usize, side: usize, seed: u64) -> Vec<Vec<f64>> {
    type Shape = fn(f64, f64, usize, usize) -> bool;
    let shapes: [Shape; 12] = [
        |_, v, _, _| (v - 0.5).abs() < 0.13,
        |u, v, _, _| (v - 0.5).abs() < 0.13 || (u - 0.5).abs() < 0.13,
        |u, v, _, _| {
            let d = (u - 0.5).abs().max((v - 0.5).abs());
            (0.25..0.4).contains(&d)
        },
        |u, v, _, _| ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() < 0.26,
        |u, v, _, _| (u < 0.3 && v > 0.1) || (v > 0.7 && u < 0.9),
        |u, v, _, _| (v < 0.3 && u > 0.1 && u < 0.9) || ((u - 0.5).abs() < 0.13 && v < 0.9),
        |_, v, _, _| (v - 0.2).abs() < 0.07 || (v - 0.8).abs() < 0.07,
        |_, _, r, c| ((r / 2) + (c / 2)) % 2 == 0,
        |u, v, _, _| (u < 0.3 || u > 0.7 || v > 0.7) && v > 0.1,
        |u, v, _, _| v > 0.2 && v < 0.9 && (u - 0.5).abs() < (v - 0.2) * 0.6,
        |u, v, _, _| (u < 0.26 || u > 0.74) && (v < 0.26 || v > 0.74),
        |u, v, _, _| v < 0.26 || v > 0.74 || (u + v - 1.0).abs() < 0.13,
    ];
    let mut r = rng::keyed(&[seed, stream::TEMPLATES]);
    (0..num_classes)
        .map(|k| {
            let mut grid = vec![0.0; side * side];
            for row in 0..side {
                for col in 0..side {
                    let u = (col as f64 + 0.5) / side as f64;
                    let v = (row as f64 + 0.5) / side as f64;
                    let on = match shapes.get(k) {
                        Some(f) => f(u, v, row, col),
                        None => r.random::<f64>() < 0.35,
                    };
                    if on {
                        grid[row * side + col] = 1.0;
                    }
                }
            }
            grid
        })
        .collect()
}

/// Generates one split. `classes[i]` is the template used for local label
/// `labels_as[i]`; labels cycle so every class count differs by at most one.
#[allow(clippy::too_many_arguments)]
fn generate_split(
    name: &str,
    spec: &ShiftBenchmark,
    templates: &[Vec<f64>],
    classes: &[usize],
    global_labels: bool,
    domains: &[&DomainSpec],
    n: usize,
    split_tag: u64,
) -> Result<Dataset> {
    let side = spec.grid_side;
    let dim = side * side;
    let transformed: Vec<Vec<Vec<f64>>> = domains
        .iter()
        .map(|d| {
            classes
                .iter()
                .map(|&c| d.transform(&templates[c], side))
                .collect()
        })
        .collect();
    let mut r = rng::keyed(&[spec.seed, stream::SPLIT, split_tag]);
    let k = classes.len();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let local = i % k;
        let d = (i / k) % domains.len();
        let sigma = domains[d].noise_sigma;
        for &v in &transformed[d][local] {
            let noise = if sigma > 0.0 {
                sigma * r.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            features.push((v + noise).clamp(FEATURE_MIN, FEATURE_MAX));
        }
        labels.push(if global_labels { classes[local] } else { local });
    }
    let num_classes = if global_labels { spec.num_classes } else { k };
    Dataset::new(name, num_classes, dim, features, labels)
}

/// Generates every split of the benchmark. Each split draws from its own
/// keyed RNG stream, so the result is a pure function of `spec`.
pub fn generate_benchmark(spec: &ShiftBenchmark) -> Result<BenchmarkData> {
    spec.validate()?;
    let templates = spec.templates();
    let all: Vec<usize> = (0..spec.num_classes).collect();
    let ft: Vec<usize> = (0..spec.finetune_classes).collect();
    let held: Vec<usize> = (spec.finetune_classes..spec.num_classes).collect();
    let pre: Vec<&DomainSpec> = spec.pretrain_domains.iter().collect();
    let id = [&spec.id_domain];
    let s = &spec.sizes;

    let pretrain = generate_split(
        "pretrain", spec, &templates, &all, true, &pre, s.pretrain, 0,
    )?;
    let pretrain_test = generate_split(
        "pretrain_test",
        spec,
        &templates,
        &all,
        true,
        &pre,
        s.pretrain_test,
        1,
    )?;
    let id_train = generate_split("id_train", spec, &templates, &ft, false, &id, s.id_train, 2)?;
    let id_test = generate_split("id_test", spec, &templates, &ft, false, &id, s.id_test, 3)?;
    let ood_tests = spec
        .ood_domains
        .iter()
        .enumerate()
        .map(|(j, d)| {
            generate_split(
                &d.domain_id,
                spec,
                &templates,
                &ft,
                false,
                &[d],
                s.ood_test,
                100 + j as u64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let heldout = if held.is_empty() {
        Dataset {
            name: "heldout".into(),
            num_classes: spec.num_classes,
            dim: spec.input_dim(),
            features: Vec::new(),
            labels: Vec::new(),
        }
    } else {
        // held-out classes are seen under the shifted domains; the
        // pretraining mixture is the fallback when there are none
        let ood: Vec<&DomainSpec> = spec.ood_domains.iter().collect();
        let domains = if ood.is_empty() { &pre } else { &ood };
        generate_split(
            "heldout", spec, &templates, &held, true, domains, s.heldout, 4,
        )?
    };
    Ok(BenchmarkData {
        pretrain,
        pretrain_test,
        id_train,
        id_test,
        ood_tests,
        heldout,
        finetune_classes: ft,
        heldout_classes: held,
    })
}

/// One mini-batch; `indices` point into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shuffled mini-batches for one epoch; the permutation is keyed by
/// `(seed, epoch)` and the final partial batch is kept.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::State(format!(
            "{}: cannot batch an empty dataset",
            dataset.name
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::keyed(&[seed, stream::SHUFFLE, epoch]));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let (x, labels) = dataset.gather(&indices).expect("indices in range");
        Batch { x, labels, indices }
    }))
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.dim).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..dataset.len() {
        let mut rec = vec![dataset.labels[i].to_string()];
        rec.extend(dataset.example(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            location: Location::Line(0),
            msg: format!("{other:?}"),
        },
    }
}

pub fn load_csv(path: &Path, name: &str, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_io)?;
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_io)?,
        None => {
            return Err(Error::Parse {
                location: Location::Line(1),
                msg: "missing header".into(),
            })
        }
    };
    let dim = header.len().saturating_sub(1);
    let header_ok = dim > 0
        && &header[0] == "label"
        && header
            .iter()
            .skip(1)
            .enumerate()
            .all(|(j, h)| h == format!("x{j}"));
    if !header_ok {
        return Err(Error::Parse {
            location: Location::Line(1),
            msg: format!(
                "expected header label,x0,...,x{{d-1}}, got {:?}",
                header.iter().take(4).collect::<Vec<_>>()
            ),
        });
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_io)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse {
            location: Location::Line(line),
            msg,
        };
        if rec.len() != dim + 1 {
            return Err(bad(format!("{} fields, expected {}", rec.len(), dim + 1)));
        }
        let label: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label {:?} is not a class index", &rec[0])))?;
        if label >= num_classes {
            return Err(Error::Index(format!(
                "line {line}: label {label} with {num_classes} classes"
            )));
        }
        for cell in rec.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| bad(format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite cell {cell:?}")));
            }
            features.push(v);
        }
        labels.push(label);
    }
    Dataset::new(name, num_classes, dim, features, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub finetune_classes: Vec<usize>,
    pub heldout_classes: Vec<usize>,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    /// One of `pretrain`, `pretrain_test`, `id_train`, `id_test`, `ood`, `heldout`.
    pub role: String,
    pub file: String,
    pub num_classes: usize,
    pub n: usize,
}

/// Writes every split as `<name>.csv` plus a `manifest.json`.
pub fn save_benchmark_dir(data: &BenchmarkData, dir: &Path) -> Result<DataManifest> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    let mut put = |d: &Dataset, role: &str| -> Result<()> {
        let file = format!("{}.csv", d.name);
        save_csv(d, &dir.join(&file))?;
        splits.push(SplitEntry {
            name: d.name.clone(),
            role: role.to_string(),
            file,
            num_classes: d.num_classes,
            n: d.len(),
        });
        Ok(())
    };
    put(&data.pretrain, "pretrain")?;
    put(&data.pretrain_test, "pretrain_test")?;
    put(&data.id_train, "id_train")?;
    put(&data.id_test, "id_test")?;
    for d in &data.ood_tests {
        put(d, "ood")?;
    }
    put(&data.heldout, "heldout")?;
    let manifest = DataManifest {
        finetune_classes: data.finetune_classes.clone(),
        heldout_classes: data.heldout_classes.clone(),
        splits,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn load_benchmark_dir(dir: &Path) -> Result<BenchmarkData> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: DataManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: Location::Line(e.line() as u64),
        msg: format!("{}: {e}", path.display()),
    })?;
    let load = |e: &SplitEntry| load_csv(&dir.join(&e.file), &e.name, e.num_classes);
    let one = |role: &str| -> Result<Dataset> {
        let e = manifest
            .splits
            .iter()
            .find(|s| s.role == role)
            .ok_or_else(|| Error::Config(format!("{}: no {role} split", path.display())))?;
        load(e)
    };
    Ok(BenchmarkData {
        pretrain: one("pretrain")?,
        pretrain_test: one("pretrain_test")?,
        id_train: one("id_train")?,
        id_test: one("id_test")?,
        ood_tests: manifest
            .splits
            .iter()
            .filter(|s| s.role == "ood")
            .map(load)
            .collect::<Result<_>>()?,
        heldout: one("heldout")?,
        finetune_classes: manifest.finetune_classes.clone(),
        heldout_classes: manifest.heldout_classes.clone(),
    })
}
