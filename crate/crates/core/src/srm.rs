//! Constrained high-pass residual filters.
//!
//! Each of the `M` length-5 kernels is kept on the set
//! `{w : w[2] = -1, sum(w) = 0}`: a prediction-error filter that removes
//! DC and, in general, most slowly varying content. The filtered channels
//! are combined by a learnable 1x1 convolution into one residual waveform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::nn::layers::gaussian;
use crate::nn::Tensor2;
use crate::signal::Signal;

pub const KERNEL_LEN: usize = 5;
pub const CENTER: usize = 2;

/// Rounds of the shift applied by [`project_kernel`] before giving up on an
/// exact floating-point fixed point.
const MAX_PROJECTION_ROUNDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrmFilterBank {
    /// `M x 5` filter taps.
    pub kernels: Tensor2,
    /// One weight per filter for the 1x1 mix.
    pub mix_weights: Vec<f64>,
    pub mix_bias: f64,
}

/// Residual produced by [`apply_bank`].
#[derive(Debug, Clone)]
pub struct NoiseResidual {
    /// Per-filter outputs, `M x T`.
    pub feature_maps: Tensor2,
    /// Mixed single-channel residual of length `T`.
    pub x_noise: Vec<f64>,
}

impl SrmFilterBank {
    /// Taps from a seeded standard normal, projected once; mix weights from
    /// `N(0, 1/M)` and a zero bias.
    pub fn init(m_filters: usize, rng_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Self::init_with(m_filters, &mut rng)
    }

    pub fn init_with<R: rand::Rng>(m_filters: usize, rng: &mut R) -> Result<Self> {
        if m_filters == 0 {
            return Err(SonarError::InvalidConfig(
                "at least one SRM filter required".into(),
            ));
        }
        let taps = (0..m_filters * KERNEL_LEN)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut kernels = Tensor2::from_vec(m_filters, KERNEL_LEN, taps)?;
        project_constraints(&mut kernels)?;
        let mix = gaussian(rng, 1, m_filters, (1.0 / m_filters as f64).sqrt());
        Ok(Self {
            kernels,
            mix_weights: mix.into_vec(),
            mix_bias: 0.0,
        })
    }

    pub fn m_filters(&self) -> usize {
        self.kernels.rows()
    }

    pub fn kernel(&self, i: usize) -> [f64; KERNEL_LEN] {
        self.kernels.row(i).try_into().expect("kernel length")
    }

    pub fn project(&mut self) -> Result<()> {
        project_constraints(&mut self.kernels)
    }

    /// Largest `|sum(w)|` and whether every center tap is exactly `-1`.
    pub fn constraint_report(&self) -> (f64, bool) {
        constraint_report(&self.kernels)
    }
}

/// Worst zero-sum violation over all kernels and whether every center is -1.
pub fn constraint_report(kernels: &Tensor2) -> (f64, bool) {
    let mut max_sum = 0.0f64;
    let mut centers_ok = true;
    for r in 0..kernels.rows() {
        let row = kernels.row(r);
        max_sum = max_sum.max(row.iter().sum::<f64>().abs());
        centers_ok &= row[CENTER] == -1.0;
    }
    (max_sum, centers_ok)
}

fn off_center_sum(w: &[f64; KERNEL_LEN]) -> f64 {
    w[0] + w[1] + w[3] + w[4]
}

/// Center exactly -1 and taps summing to zero up to a few ulps of their
/// total magnitude.
fn is_feasible(w: &[f64; KERNEL_LEN]) -> bool {
    let sum: f64 = w.iter().sum();
    let scale: f64 = w.iter().map(|v| v.abs()).sum();
    w[CENTER] == -1.0 && sum.abs() <= 8.0 * f64::EPSILON * scale
}

/// Sets the center tap to -1 and shifts the other four taps uniformly so
/// they sum to 1. Kernels that already satisfy the constraints are left
/// untouched, so the projection is a bitwise fixed point on its output.
pub fn project_kernel(w: &mut [f64; KERNEL_LEN]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(SonarError::Numeric(format!(
            "non-finite filter tap in {w:?}"
        )));
    }
    if is_feasible(w) {
        return Ok(());
    }
    w[CENTER] = -1.0;
    for _ in 0..MAX_PROJECTION_ROUNDS {
        let delta = (off_center_sum(w) - 1.0) / 4.0;
        let mut changed = false;
        for k in [0, 1, 3, 4] {
            let next = w[k] - delta;
            changed |= next != w[k];
            w[k] = next;
        }
        if !changed {
            break;
        }
    }
    Ok(())
}

/// Projects every row of an `M x 5` tap matrix onto the constraint set.
pub fn project_constraints(kernels: &mut Tensor2) -> Result<()> {
    if kernels.cols() != KERNEL_LEN {
        return Err(SonarError::Shape(format!(
            "filters must have {KERNEL_LEN} taps, got {}",
            kernels.cols()
        )));
    }
    for r in 0..kernels.rows() {
        let mut w: [f64; KERNEL_LEN] = kernels.row(r).try_into().expect("row length");
        project_kernel(&mut w)?;
        kernels.row_mut(r).copy_from_slice(&w);
    }
    Ok(())
}

/// `sum_i mix[i] * w_i`, the single kernel equivalent to filtering then mixing.
pub(crate) fn effective_kernel(kernels: &Tensor2, mix: &[f64]) -> [f64; KERNEL_LEN] {
    let mut eff = [0.0; KERNEL_LEN];
    for (i, m) in mix.iter().enumerate() {
        for (e, w) in eff.iter_mut().zip(kernels.row(i)) {
            *e += m * w;
        }
    }
    eff
}

/// Cross-correlation `y[t] = sum_k w[k] x[t + k - 2]`, zero padded so the
/// output has the input's length.
pub(crate) fn correlate(x: &[f64], w: &[f64; KERNEL_LEN]) -> Vec<f64> {
    let n = x.len();
    let mut y = vec![0.0; n];
    for (t, out) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            let idx = t as isize + k as isize - CENTER as isize;
            if idx >= 0 && (idx as usize) < n {
                acc += wk * x[idx as usize];
            }
        }
        *out = acc;
    }
    y
}

/// Adjoint of [`correlate`]: `gx[s] = sum_k g[s - k + 2] w[k]`.
pub(crate) fn correlate_transpose(g: &[f64], w: &[f64; KERNEL_LEN]) -> Vec<f64> {
    let n = g.len();
    let mut gx = vec![0.0; n];
    for (t, &gt) in g.iter().enumerate() {
        for (k, wk) in w.iter().enumerate() {
            let idx = t as isize + k as isize - CENTER as isize;
            if idx >= 0 && (idx as usize) < n {
                gx[idx as usize] += gt * wk;
            }
        }
    }
    gx
}

/// `c[k] = sum_t g[t] x[t + k - 2]`: the gradient of [`correlate`] with
/// respect to each tap.
pub(crate) fn tap_correlations(x: &[f64], g: &[f64]) -> [f64; KERNEL_LEN] {
    let n = x.len();
    let mut c = [0.0; KERNEL_LEN];
    for (k, ck) in c.iter_mut().enumerate() {
        let shift = k as isize - CENTER as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (n as isize - shift).min(n as isize).max(0) as usize;
        let mut acc = 0.0;
        for t in lo..hi {
            acc += g[t] * x[(t as isize + shift) as usize];
        }
        *ck = acc;
    }
    c
}

/// Filters `sig` with every kernel and mixes the channels.
pub fn apply_bank(bank: &SrmFilterBank, sig: &Signal) -> Result<NoiseResidual> {
    let x = sig.samples();
    if x.len() < KERNEL_LEN {
        return Err(SonarError::InvalidInput(format!(
            "signal of {} samples is shorter than the {KERNEL_LEN}-tap filter",
            x.len()
        )));
    }
    if bank.mix_weights.len() != bank.m_filters() {
        return Err(SonarError::Shape(
            "mix weights do not match filter count".into(),
        ));
    }
    let mut feature_maps = Tensor2::zeros(bank.m_filters(), x.len());
    let mut x_noise = vec![bank.mix_bias; x.len()];
    for i in 0..bank.m_filters() {
        let y = correlate(x, &bank.kernel(i));
        let m = bank.mix_weights[i];
        for (o, v) in x_noise.iter_mut().zip(&y) {
            *o += m * v;
        }
        feature_maps.row_mut(i).copy_from_slice(&y);
    }
    Ok(NoiseResidual {
        feature_maps,
        x_noise,
    })
}

/// `(omega, |sum_k w[k] e^{-j omega k}|)` at `n_points` frequencies spaced
/// evenly over `[0, pi]`.
pub fn frequency_response(kernel: &[f64; KERNEL_LEN], n_points: usize) -> Result<Vec<(f64, f64)>> {
    if n_points < 2 {
        return Err(SonarError::InvalidConfig(
            "need at least two response points".into(),
        ));
    }
    Ok((0..n_points)
        .map(|i| {
            let omega = std::f64::consts::PI * i as f64 / (n_points - 1) as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (k, w) in kernel.iter().enumerate() {
                re += w * (omega * k as f64).cos();
                im -= w * (omega * k as f64).sin();
            }
            (omega, re.hypot(im))
        })
        .collect())
}
