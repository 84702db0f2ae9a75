//! Positive and negative visual views.
//!
//! The positive view scales each patch row by `1 + lambda * fused[j]`. The
//! negative view replaces masked patch rows with forward-diffused copies
//! `sqrt(abar_T) v + sqrt(1 - abar_T) eps`, leaving every other row as is.
//! Corruption happens in feature space; no re-encoding pass is needed.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, PndError, Result};
use crate::matrix::Matrix;
use crate::salience::{EvidenceMask, PatchSalience};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_NOISE_STEP: usize = 500;

const DUMP_MAGIC: &[u8; 8] = b"PNDFEAT\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    Original,
    Positive,
    Negative,
    Noise,
}

/// Patch-grid feature matrix `[grid_side^2 x d_feat]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    variant: FeatureVariant,
    grid_side: usize,
    values: Matrix,
}

impl VisualFeatures {
    /// Wraps encoder output as an original view.
    pub fn original(grid_side: usize, values: Matrix) -> Result<Self> {
        Self::with_variant(FeatureVariant::Original, grid_side, values)
    }

    fn with_variant(variant: FeatureVariant, grid_side: usize, values: Matrix) -> Result<Self> {
        if grid_side == 0 || values.rows() != grid_side * grid_side {
            return Err(PndError::shape(format!(
                "{} patches do not form a {grid_side}x{grid_side} grid",
                values.rows()
            )));
        }
        if values.cols() == 0 {
            return Err(PndError::shape("feature dimension must be positive"));
        }
        ensure_finite(values.as_slice(), "visual features")?;
        Ok(Self {
            variant,
            grid_side,
            values,
        })
    }

    pub fn variant(&self) -> FeatureVariant {
        self.variant
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn n_patches(&self) -> usize {
        self.values.rows()
    }

    pub fn d_feat(&self) -> usize {
        self.values.cols()
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        self.values.row(j)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Writes a debug dump: 16-byte header (8-byte magic, `n_patches` u32,
    /// `d_feat` u32) followed by little-endian f32 values, row-major.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        let n = u32::try_from(self.n_patches()).map_err(|_| PndError::shape("too many patches"))?;
        let d = u32::try_from(self.d_feat()).map_err(|_| PndError::shape("feature dim too large"))?;
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&n.to_le_bytes())?;
        out.write_all(&d.to_le_bytes())?;
        for &v in self.values.as_slice() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump back as an original view (values rounded to f32).
    pub fn read_dump<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..8] != DUMP_MAGIC {
            return Err(PndError::input("bad feature dump magic"));
        }
        let n = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
        let mut raw = vec![0u8; n * d * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let side = crate::salience::square_side(n)
            .ok_or_else(|| PndError::shape(format!("{n} patches is not a square grid")))?;
        Self::original(side, Matrix::new(n, d, data)?)
    }
}

/// Linear-beta forward diffusion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleParams {
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
}

impl TryFrom<ScheduleParams> for NoiseSchedule {
    type Error = PndError;

    fn try_from(p: ScheduleParams) -> Result<Self> {
        build_schedule(p.num_steps, p.beta_start, p.beta_end)
    }
}

impl From<NoiseSchedule> for ScheduleParams {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleParams {
            num_steps: s.num_steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(DEFAULT_NUM_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    /// Cumulative products, index `t - 1` holding the value after `t` steps.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal retention after `step` forward steps; step 0 is the clean input.
    pub fn alpha_bar_at(&self, step: usize) -> Result<f64> {
        match step {
            0 => Ok(1.0),
            t if t <= self.num_steps => Ok(self.alpha_bar[t - 1]),
            t => Err(PndError::config(format!(
                "noise step {t} exceeds schedule length {}",
                self.num_steps
            ))),
        }
    }
}

pub fn build_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(PndError::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(PndError::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(num_steps);
    let mut acc = 1.0;
    for s in 0..num_steps {
        let beta = if num_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * s as f64 / (num_steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        num_steps,
        beta_start,
        beta_end,
        alpha_bar,
    })
}

/// Amplifies each patch by `1 + lambda * fused[j]`.
pub fn enhance_positive(
    features: &VisualFeatures,
    fused: &PatchSalience,
    lambda: f64,
) -> Result<VisualFeatures> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(PndError::config(format!("lambda must be >= 0, got {lambda}")));
    }
    if fused.len() != features.n_patches() {
        return Err(PndError::shape(format!(
            "fused map has {} entries for {} patches",
            fused.len(),
            features.n_patches()
        )));
    }
    let mut values = features.values.clone();
    for (j, &weight) in fused.values.iter().enumerate() {
        let gain = 1.0 + lambda * weight;
        for v in values.row_mut(j) {
            *v *= gain;
        }
    }
    VisualFeatures::with_variant(FeatureVariant::Positive, features.grid_side, values)
}

fn check_alpha_bar(alpha_bar_t: f64) -> Result<()> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(PndError::config(format!(
            "alpha_bar must lie in (0, 1], got {alpha_bar_t}"
        )));
    }
    Ok(())
}

/// Noise for one patch row. Each row draws from its own ChaCha stream, so a
/// row's noise does not depend on which other rows are materialized.
fn corrupt_row(row: &[f64], patch: usize, signal: f64, noise: f64, seed: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patch as u64);
    for (o, &v) in out.iter_mut().zip(row) {
        let eps: f64 = StandardNormal.sample(&mut rng);
        *o = signal * v + noise * eps;
    }
}

/// Forward-diffuses every patch at retention `alpha_bar_t`.
pub fn ddpm_corrupt(features: &VisualFeatures, alpha_bar_t: f64, seed: u64) -> Result<VisualFeatures> {
    check_alpha_bar(alpha_bar_t)?;
    let signal = alpha_bar_t.sqrt();
    let noise = (1.0 - alpha_bar_t).sqrt();
    let mut values = Matrix::zeros(features.n_patches(), features.d_feat());
    for j in 0..features.n_patches() {
        corrupt_row(features.patch(j), j, signal, noise, seed, values.row_mut(j));
    }
    VisualFeatures::with_variant(FeatureVariant::Noise, features.grid_side, values)
}

/// Masked rows from `noised`, all others from `features`.
pub fn compose_negative(
    features: &VisualFeatures,
    noised: &VisualFeatures,
    mask: &EvidenceMask,
) -> Result<VisualFeatures> {
    if noised.n_patches() != features.n_patches() || mask.len() != features.n_patches() {
        return Err(PndError::shape(format!(
            "patch counts differ: original {}, noised {}, mask {}",
            features.n_patches(),
            noised.n_patches(),
            mask.len()
        )));
    }
    if noised.d_feat() != features.d_feat() {
        return Err(PndError::shape("original and noised feature dims differ"));
    }
    let mut values = features.values.clone();
    for (j, _) in mask.values.iter().enumerate().filter(|(_, &m)| m) {
        values.row_mut(j).copy_from_slice(noised.patch(j));
    }
    VisualFeatures::with_variant(FeatureVariant::Negative, features.grid_side, values)
}

/// Same result as `compose_negative(v, ddpm_corrupt(v, abar, seed), mask)`,
/// but only the masked rows are ever noised.
pub fn negative_view(
    features: &VisualFeatures,
    mask: &EvidenceMask,
    alpha_bar_t: f64,
    seed: u64,
) -> Result<VisualFeatures> {
    check_alpha_bar(alpha_bar_t)?;
    if mask.len() != features.n_patches() {
        return Err(PndError::shape(format!(
            "mask has {} entries for {} patches",
            mask.len(),
            features.n_patches()
        )));
    }
    let signal = alpha_bar_t.sqrt();
    let noise = (1.0 - alpha_bar_t).sqrt();
    let mut values = features.values.clone();
    for j in (0..features.n_patches()).filter(|&j| mask.is_set(j)) {
        let row = features.patch(j).to_vec();
        corrupt_row(&row, j, signal, noise, seed, values.row_mut(j));
    }
    VisualFeatures::with_variant(FeatureVariant::Negative, features.grid_side, values)
}
