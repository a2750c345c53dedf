//! Encoder + prototype-head classifier.
//!
//! Logits are inner products between encoder features and a table of class
//! prototypes, the same structure a contrastive image/text model uses for
//! zero-shot prediction. The prototype table can be frozen (zero-shot use)
//! or trained together with the encoder (fine-tuning).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[d_in × d_out]`
    pub weight: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

/// MLP with ReLU between layers and no activation after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHead {
    /// `[K × D]`
    pub prototypes: Tensor,
    pub trainable: bool,
}

/// The trainable parameter set: encoder plus prototype head.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: EncoderParams,
    pub head: PrototypeHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Embedding (feature) dimension `D`.
    pub embed_dim: usize,
    pub init_seed: u64,
    /// Whether the prototype head is updated during fine-tuning.
    pub head_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            embed_dim: 16,
            init_seed: 0,
            head_trainable: true,
        }
    }
}

impl EncoderParams {
    /// He-normal weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("encoder dims {dims:?}")));
        }
        let mut rng = rng::keyed(&[seed, stream::INIT, 0]);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let std = (2.0 / d_in as f64).sqrt();
                let data = (0..d_in * d_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Linear {
                    weight: Tensor::new(vec![d_in, d_out], data).expect("consistent shape"),
                    bias: Tensor::zeros(&[d_out]),
                }
            })
            .collect();
        Ok(EncoderParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("encoder", "no layers"));
        }
        let mut d = self.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 2 || s[0] != d || l.bias.len() != s[1] {
                return Err(Error::shape(
                    "encoder",
                    format!(
                        "layer {i}: weight {s:?}, bias {:?}, expected input {d}",
                        l.bias.shape()
                    ),
                ));
            }
            d = s[1];
        }
        Ok(())
    }

    /// Off-tape forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x, self.input_dim())?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?.add_bias(&l.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

fn check_input(x: &Tensor, d_in: usize) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != d_in {
        return Err(Error::shape(
            "forward",
            format!("input {:?}, encoder expects [B x {d_in}]", x.shape()),
        ));
    }
    Ok(())
}

impl PrototypeHead {
    /// Random rows with norm ≈ 1.
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "{num_classes} classes; need at least 2"
            )));
        }
        let mut rng = rng::keyed(&[seed, stream::INIT, 1]);
        let std = 1.0 / (dim as f64).sqrt();
        let data = (0..num_classes * dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(PrototypeHead {
            prototypes: Tensor::new(vec![num_classes, dim], data)?,
            trainable: true,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    /// Head restricted to the given class rows, in order.
    pub fn select(&self, classes: &[usize]) -> Result<PrototypeHead> {
        Ok(PrototypeHead {
            prototypes: self.prototypes.select_rows(classes)?,
            trainable: self.trainable,
        })
    }
}

impl Params {
    pub fn init(input_dim: usize, num_classes: usize, cfg: &ModelConfig) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.embed_dim);
        let mut head = PrototypeHead::init(num_classes, cfg.embed_dim, cfg.init_seed)?;
        head.trainable = cfg.head_trainable;
        Ok(Params {
            encoder: EncoderParams::init(&dims, cfg.init_seed)?,
            head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let p = self.head.prototypes.shape();
        if p.len() != 2 || p[1] != self.encoder.output_dim() || p[0] < 2 {
            return Err(Error::shape(
                "prototype head",
                format!("{p:?} for embedding dim {}", self.encoder.output_dim()),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.features(x)?.matmul_t(&self.head.prototypes)
    }

    /// Canonical tensor order: `encoder.{i}.weight`, `encoder.{i}.bias`, …,
    /// `head.prototypes`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        out.push(("head.prototypes".to_string(), &self.head.prototypes));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.prototypes);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Copy of `self` with every parameter replaced from a flat vector laid
    /// out as in [`Params::flatten`].
    pub fn with_flat(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "with_flat",
                format!("{} values for {} parameters", flat.len(), self.num_params()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn same_layout(&self, other: &Params) -> Result<()> {
        let a = self.named_tensors();
        let b = other.named_tensors();
        if a.len() != b.len()
            || a.iter()
                .zip(&b)
                .any(|((_, x), (_, y))| x.shape() != y.shape())
        {
            return Err(Error::shape("params", "parameter layouts differ"));
        }
        Ok(())
    }

    /// Euclidean distance between flattened parameter vectors.
    pub fn distance(&self, other: &Params) -> Result<f64> {
        self.same_layout(other)?;
        Ok(self
            .flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Places parameters on the tape. With `track == false` every tensor is
    /// a constant; otherwise the head is tracked only when it is trainable.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let leaf = |tape: &mut Tape, t: &Tensor, tracked: bool| {
            if tracked {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .encoder
            .layers
            .iter()
            .map(|l| (leaf(tape, &l.weight, track), leaf(tape, &l.bias, track)))
            .collect();
        let prototypes = leaf(tape, &self.head.prototypes, track && self.head.trainable);
        BoundParams { layers, prototypes }
    }
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<(Var, Var)>,
    pub prototypes: Var,
}

impl BoundParams {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let d_in = tape.value(self.layers[0].0).shape()[0];
        check_input(tape.value(x), d_in)?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn logits_from_features(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        tape.matmul_t(features, self.prototypes)
    }

    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        self.logits_from_features(tape, f)
    }

    /// Vars in [`Params::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.push(self.prototypes);
        out
    }

    pub fn encoder_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// `(1 − α)·θ₀ + α·θ_ft`, elementwise.
pub fn interpolate_weights(theta0: &Params, theta_ft: &Params, alpha: f64) -> Result<Params> {
    theta0.same_layout(theta_ft)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "interpolation alpha {alpha} outside [0, 1]"
        )));
    }
    let flat: Vec<f64> = theta0
        .flatten()
        .iter()
        .zip(theta_ft.flatten())
        .map(|(a, b)| (1.0 - alpha) * a + alpha * b)
        .collect();
    let mut out = theta0.with_flat(&flat)?;
    out.head.trainable = theta_ft.head.trainable;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    pub params: Params,
    pub decay: f64,
}

/// Live parameters plus the optional frozen snapshot and EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Params,
    snapshot: Option<Params>,
    ema: Option<EmaShadow>,
}

impl ModelState {
    pub fn new(params: Params) -> Self {
        ModelState {
            params,
            snapshot: None,
            ema: None,
        }
    }

    /// Deep-copies the live parameters into the snapshot. A second call
    /// replaces the earlier snapshot.
    pub fn take_snapshot(&mut self) {
        self.snapshot = Some(self.params.clone());
    }

    pub fn snapshot(&self) -> Option<&Params> {
        self.snapshot.as_ref()
    }

    pub fn require_snapshot(&self) -> Result<&Params> {
        self.snapshot
            .as_ref()
            .ok_or_else(|| Error::State("no pretrained snapshot taken".into()))
    }

    /// Starts the EMA shadow as a copy of the live parameters.
    pub fn init_ema(&mut self, decay: f64) -> Result<()> {
        check_decay(decay)?;
        self.ema = Some(EmaShadow {
            params: self.params.clone(),
            decay,
        });
        Ok(())
    }

    pub fn ema(&self) -> Option<&EmaShadow> {
        self.ema.as_ref()
    }

    pub fn require_ema(&self) -> Result<&EmaShadow> {
        self.ema
            .as_ref()
            .ok_or_else(|| Error::State("EMA shadow not initialized".into()))
    }

    /// `shadow ← ρ·shadow + (1−ρ)·live`.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
        }
        let live = &self.params;
        let shadow = self
            .ema
            .as_mut()
            .ok_or_else(|| Error::State("EMA shadow not initialized".into()))?;
        for (s, (_, l)) in shadow
            .params
            .tensors_mut()
            .into_iter()
            .zip(live.named_tensors())
        {
            for (sv, lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv = decay * *sv + (1.0 - decay) * lv;
            }
        }
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if decay > 0.0 && decay < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("EMA decay {decay} outside (0, 1)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Params {
        let cfg = ModelConfig {
            hidden: vec![5],
            embed_dim: 3,
            init_seed: 7,
            head_trainable: true,
        };
        Params::init(4, 3, &cfg).unwrap()
    }

    fn identity_model() -> Params {
        Params {
            encoder: EncoderParams {
                layers: vec![Linear {
                    weight: Tensor::identity(2),
                    bias: Tensor::zeros(&[2]),
                }],
            },
            head: PrototypeHead {
                prototypes: Tensor::identity(2),
                trainable: false,
            },
        }
    }

    #[test]
    fn zero_encoder_gives_zero_features_and_logits() {
        let mut p = tiny();
        p.encoder = p.encoder.zeros_like();
        let x = Tensor::full(&[2, 4], 0.7);
        assert!(p.features(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_encoder_and_orthonormal_prototypes() {
        let p = identity_model();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(p.features(&x).unwrap().data(), &[1.0, 2.0]);
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(p.logits(&x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let p = tiny();
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(p.logits(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn on_tape_forward_matches_off_tape() {
        let p = tiny();
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let z = bound.logits(&mut tape, xv).unwrap();
        assert_eq!(tape.value(z), &p.logits(&x).unwrap());
    }

    #[test]
    fn snapshot_is_isolated_from_live_params() {
        let mut m = ModelState::new(tiny());
        let x = Tensor::full(&[1, 4], 0.5);
        m.take_snapshot();
        let before = m.snapshot().unwrap().logits(&x).unwrap();
        for t in m.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        assert_eq!(m.snapshot().unwrap().logits(&x).unwrap(), before);
        // a second snapshot replaces the first
        m.take_snapshot();
        assert_eq!(m.snapshot().unwrap(), &m.params);
    }

    #[test]
    fn ema_update_recurrence() {
        let mut m = ModelState::new(identity_model());
        assert!(matches!(m.ema_update(0.9), Err(Error::State(_))));
        m.init_ema(0.9).unwrap();
        let zero = {
            let mut z = m.params.clone();
            for t in z.tensors_mut() {
                t.data_mut().fill(0.0);
            }
            z
        };
        // shadow = 0, live = 1
        m.ema.as_mut().unwrap().params = zero;
        for t in m.params.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        m.ema_update(0.9).unwrap();
        for v in m.ema().unwrap().params.flatten() {
            assert!((v - 0.1).abs() < 1e-15);
        }
        let before = m.ema().unwrap().params.clone();
        m.ema_update(1.0).unwrap();
        assert_eq!(m.ema().unwrap().params, before);
        m.ema_update(0.0).unwrap();
        assert_eq!(m.ema().unwrap().params.flatten(), m.params.flatten());
    }

    #[test]
    fn ema_init_rejects_decay_outside_open_interval() {
        let mut m = ModelState::new(tiny());
        assert!(m.init_ema(1.0).is_err());
        assert!(m.init_ema(0.0).is_err());
        assert!(m.init_ema(0.999).is_ok());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = tiny();
        let b = {
            let mut b = a.clone();
            for t in b.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v + 1.0);
            }
            b
        };
        assert_eq!(
            interpolate_weights(&a, &b, 0.0).unwrap().flatten(),
            a.flatten()
        );
        assert_eq!(
            interpolate_weights(&a, &b, 1.0).unwrap().flatten(),
            b.flatten()
        );

        let zero = a.with_flat(&vec![0.0; a.num_params()]).unwrap();
        let two = a.with_flat(&vec![2.0; a.num_params()]).unwrap();
        assert!(interpolate_weights(&zero, &two, 0.5)
            .unwrap()
            .flatten()
            .iter()
            .all(|&v| v == 1.0));

        let mut other = a.clone();
        other.head = PrototypeHead::init(4, 3, 1).unwrap();
        assert!(matches!(
            interpolate_weights(&a, &other, 0.5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn argmax_invariant_to_shared_positive_prototype_scale() {
        let p = tiny();
        let x = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut scaled = p.clone();
        scaled.head.prototypes = scaled.head.prototypes.scale(3.5);
        assert_eq!(
            p.logits(&x).unwrap().argmax_rows(),
            scaled.logits(&x).unwrap().argmax_rows()
        );
    }
}
