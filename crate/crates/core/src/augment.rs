//! RandAugment-style label-preserving perturbations of grid inputs.
//!
//! A policy applies `n_ops` distinct operations, drawn uniformly from its
//! pool, to every sample at a shared magnitude `m ∈ [0, 1]`. All draws for
//! sample `i` at step `s` come from the stream keyed by
//! `(policy.seed, s, i)`: first the op subset (via
//! `rand::seq::index::sample`), then each op's own parameters in
//! application order.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream, KeyedRng};
use crate::tensor::Tensor;

pub const FEATURE_MIN: f64 = -3.0;
pub const FEATURE_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// σ = 0.5·m
    GaussianNoise,
    /// ±45°·m, sign drawn per sample
    Rotate,
    /// 2·m pixels in a random direction
    Translate,
    /// zeroed square of side ⌊4·m⌋
    Cutout,
    /// factor in [1 − 0.5m, 1 + 0.5m]
    IntensityScale,
    /// γ in [1 − 0.5m, 1 + 0.5m] around the sample mean
    Contrast,
    /// mirror with probability m
    HorizontalFlip,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 7] = [
        AugmentKind::GaussianNoise,
        AugmentKind::Rotate,
        AugmentKind::Translate,
        AugmentKind::Cutout,
        AugmentKind::IntensityScale,
        AugmentKind::Contrast,
        AugmentKind::HorizontalFlip,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub n_ops: usize,
    pub magnitude: f64,
    pub ops: Vec<AugmentKind>,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    /// Flips are left out of the default pool: mirrored templates can
    /// collide with other classes.
    fn default() -> Self {
        AugmentPolicy {
            n_ops: 2,
            magnitude: 0.5,
            ops: AugmentKind::ALL[..6].to_vec(),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            n_ops: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Config(format!(
                "augment magnitude {} outside [0, 1]",
                self.magnitude
            )));
        }
        if self.n_ops > self.ops.len() {
            return Err(Error::Config(format!(
                "augment n_ops {} exceeds pool of {}",
                self.n_ops,
                self.ops.len()
            )));
        }
        Ok(())
    }
}

/// The RNG stream used for sample `index` at `step_seed`.
pub fn sample_rng(policy: &AugmentPolicy, step_seed: u64, index: u64) -> KeyedRng {
    rng::keyed(&[policy.seed, stream::AUGMENT, step_seed, index])
}

pub fn grid_side(dim: usize) -> Result<usize> {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::shape(
            "augment",
            format!("feature width {dim} is not a square grid"),
        ));
    }
    Ok(side)
}

/// Augments every row of `x`. A pure function of `(policy, x, step_seed)`.
pub fn apply_policy(policy: &AugmentPolicy, x: &Tensor, step_seed: u64) -> Result<Tensor> {
    let dim = x.cols();
    let side = grid_side(dim)?;
    let n_ops = policy.n_ops.min(policy.ops.len());
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        let mut grid = x.row(i).to_vec();
        if n_ops > 0 {
            let mut r = sample_rng(policy, step_seed, i as u64);
            let picks = index::sample(&mut r, policy.ops.len(), n_ops);
            for p in picks.iter() {
                grid = apply_op(policy.ops[p], policy.magnitude, &grid, side, &mut r);
            }
            for v in &mut grid {
                *v = v.clamp(FEATURE_MIN, FEATURE_MAX);
            }
        }
        out.extend(grid);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// One op on one grid (no clamping).
pub fn apply_op(
    kind: AugmentKind,
    m: f64,
    grid: &[f64],
    side: usize,
    r: &mut KeyedRng,
) -> Vec<f64> {
    let unit_range = |r: &mut KeyedRng| 1.0 + 0.5 * m * (2.0 * r.random::<f64>() - 1.0);
    match kind {
        AugmentKind::GaussianNoise => {
            let sigma = 0.5 * m;
            grid.iter()
                .map(|v| v + sigma * r.sample::<f64, _>(StandardNormal))
                .collect()
        }
        AugmentKind::Rotate => {
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            rotate_grid(grid, side, sign * 45.0 * m)
        }
        AugmentKind::Translate => {
            let phi = r.random::<f64>() * std::f64::consts::TAU;
            let d = 2.0 * m;
            translate_grid(grid, side, d * phi.cos(), d * phi.sin())
        }
        AugmentKind::Cutout => {
            let s = (4.0 * m).floor() as usize;
            if s == 0 {
                return grid.to_vec();
            }
            let s = s.min(side);
            let top = r.random_range(0..=side - s);
            let left = r.random_range(0..=side - s);
            let mut out = grid.to_vec();
            for row in top..top + s {
                out[row * side + left..row * side + left + s].fill(0.0);
            }
            out
        }
        AugmentKind::IntensityScale => {
            let f = unit_range(r);
            grid.iter().map(|v| v * f).collect()
        }
        AugmentKind::Contrast => {
            let gamma = unit_range(r);
            let mean = grid.iter().sum::<f64>() / grid.len() as f64;
            grid.iter().map(|v| mean + gamma * (v - mean)).collect()
        }
        AugmentKind::HorizontalFlip => {
            if r.random::<f64>() < m {
                let mut out = grid.to_vec();
                for row in out.chunks_mut(side) {
                    row.reverse();
                }
                out
            } else {
                grid.to_vec()
            }
        }
    }
}

fn bilinear(grid: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= side as f64 || xx >= side as f64 {
            0.0
        } else {
            grid[yy as usize * side + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Bilinear rotation about the grid centre with zero padding. At 90° the
/// output is `out[r][c] = in[side−1−c][r]`.
pub fn rotate_grid(grid: &[f64], side: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return grid.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let center = (side as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(grid.len());
    for row in 0..side {
        for col in 0..side {
            let dy = row as f64 - center;
            let dx = col as f64 - center;
            let sx = c * dx + s * dy + center;
            let sy = -s * dx + c * dy + center;
            out.push(bilinear(grid, side, sy, sx));
        }
    }
    out
}

/// Bilinear shift by `(dx, dy)` pixels with zero padding.
pub fn translate_grid(grid: &[f64], side: usize, dx: f64, dy: f64) -> Vec<f64> {
    if dx == 0.0 && dy == 0.0 {
        return grid.to_vec();
    }
    let mut out = Vec::with_capacity(grid.len());
    for row in 0..side {
        for col in 0..side {
            out.push(bilinear(grid, side, row as f64 - dy, col as f64 - dx));
        }
    }
    out
}
