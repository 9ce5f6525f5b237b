//! Jensen-Shannon alignment between content and noise embeddings, the
//! weighted cross-entropy, and their combination.
//!
//! The divergence uses log base 2 so it lies in `[0, 1]`; the cross-entropy
//! uses the natural log.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::nn::functional::{log_sum_exp, softmax_rows};
use crate::nn::Tensor2;

/// Probabilities below this are treated as exact zeros (`0 log 0 = 0`);
/// their term contributes neither value nor gradient.
pub const PROB_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_js: f64,
    /// Normalised weights for (fake, real).
    pub class_weights: [f64; 2],
}

impl LossConfig {
    pub fn new(lambda_js: f64, class_weights: [f64; 2]) -> Result<Self> {
        if !lambda_js.is_finite() || lambda_js < 0.0 {
            return Err(SonarError::InvalidConfig(format!(
                "lambda_js must be finite and non-negative, got {lambda_js}"
            )));
        }
        Ok(Self {
            lambda_js,
            class_weights: normalize_weights(class_weights)?,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_js: 1.0,
            class_weights: [0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub wce: f64,
    pub js_raw: f64,
    pub l_js: f64,
    pub total: f64,
    pub pinsker_bound: f64,
}

impl LossBreakdown {
    pub fn new(wce: f64, js_raw: f64, l_js: f64, lambda_js: f64) -> Self {
        Self {
            wce,
            js_raw,
            l_js,
            total: wce + lambda_js * l_js,
            pinsker_bound: pinsker_bound(js_raw),
        }
    }

    /// Average of per-clip breakdowns; the bound is recomputed from the
    /// averaged divergence.
    pub fn mean(items: &[LossBreakdown], lambda_js: f64) -> Self {
        let n = items.len().max(1) as f64;
        let wce = items.iter().map(|b| b.wce).sum::<f64>() / n;
        let js = items.iter().map(|b| b.js_raw).sum::<f64>() / n;
        let l_js = items.iter().map(|b| b.l_js).sum::<f64>() / n;
        Self::new(wce, js, l_js, lambda_js)
    }
}

fn normalize_weights(w: [f64; 2]) -> Result<[f64; 2]> {
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(SonarError::InvalidConfig(format!(
            "class weights must be positive, got {w:?}"
        )));
    }
    let s = w[0] + w[1];
    Ok([w[0] / s, w[1] / s])
}

/// Inverse-prior class weights for (fake, real), normalised to sum to one.
pub fn class_weights_from_counts(n_fake: usize, n_real: usize) -> Result<[f64; 2]> {
    if n_fake == 0 || n_real == 0 {
        return Err(SonarError::InvalidData(format!(
            "both classes required, got {n_fake} fake and {n_real} real"
        )));
    }
    let total = (n_fake + n_real) as f64;
    normalize_weights([total / n_fake as f64, total / n_real as f64])
}

fn js_term(a: f64, m: f64) -> f64 {
    if a < PROB_FLOOR {
        0.0
    } else {
        a * (a / m).log2()
    }
}

/// Base-2 JS divergence of two rows, without validation or clamping.
pub(crate) fn js_row(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        acc += 0.5 * (js_term(a, m) + js_term(b, m));
    }
    acc
}

/// Adds `scale * dJS/dp` and `scale * dJS/dq` into `gp` and `gq`.
pub(crate) fn js_row_grad(p: &[f64], q: &[f64], scale: f64, gp: &mut [f64], gq: &mut [f64]) {
    for i in 0..p.len() {
        let (a, b) = (p[i], q[i]);
        let m = 0.5 * (a + b);
        // d/da [a log2(a/m)] = log2(a/m) + (1 - a/(2m)) / ln 2, d/db = -a/(2m ln 2)
        if a >= PROB_FLOOR {
            gp[i] += scale * 0.5 * ((a / m).log2() + (1.0 - a / (2.0 * m)) / LN_2);
            gq[i] -= scale * 0.5 * a / (2.0 * m * LN_2);
        }
        if b >= PROB_FLOOR {
            gq[i] += scale * 0.5 * ((b / m).log2() + (1.0 - b / (2.0 * m)) / LN_2);
            gp[i] -= scale * 0.5 * b / (2.0 * m * LN_2);
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SonarError::InvalidDistribution(
            "entries must be finite and non-negative".into(),
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(SonarError::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits, clamped to `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(SonarError::InvalidDistribution(format!(
            "lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(js_row(p, q).clamp(0.0, 1.0))
}

/// Softmax each frame of both embeddings and average the per-frame JS.
pub fn framewise_js(z_content: &Tensor2, z_noise: &Tensor2) -> Result<f64> {
    if z_content.shape() != z_noise.shape() || z_content.rows() == 0 {
        return Err(SonarError::Shape(format!(
            "content {:?} vs noise {:?}",
            z_content.shape(),
            z_noise.shape()
        )));
    }
    let (p, q) = (softmax_rows(z_content), softmax_rows(z_noise));
    let total: f64 = (0..p.rows()).map(|r| js_row(p.row(r), q.row(r))).sum();
    Ok((total / p.rows() as f64).clamp(0.0, 1.0))
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(SonarError::InvalidInput(format!(
            "label must be 0 or 1, got {y}"
        )));
    }
    Ok(())
}

/// `y * js + (1 - y) * (1 - js)` for a precomputed divergence.
pub fn alignment_from_js(js: f64, y: u8) -> f64 {
    if y == 1 {
        js
    } else {
        1.0 - js
    }
}

/// Pulls content and noise frames together for reals (`y = 1`) and pushes
/// them apart for fakes (`y = 0`).
pub fn alignment_loss(z_content: &Tensor2, z_noise: &Tensor2, y: u8) -> Result<f64> {
    check_label(y)?;
    Ok(alignment_from_js(framewise_js(z_content, z_noise)?, y))
}

/// `-weights[y] * ln softmax(logits)[y]` with weights normalised to sum one.
pub fn weighted_ce(logits: [f64; 2], y: u8, weights: [f64; 2]) -> Result<f64> {
    check_label(y)?;
    let w = normalize_weights(weights)?;
    Ok(-w[y as usize] * (logits[y as usize] - log_sum_exp(&logits)))
}

/// Bayes-error bound `0.5 * sqrt(2 * js)`.
pub fn pinsker_bound(js: f64) -> f64 {
    0.5 * (2.0 * js.max(0.0)).sqrt()
}

pub fn combined_loss(
    logits: [f64; 2],
    z_content: &Tensor2,
    z_noise: &Tensor2,
    y: u8,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let wce = weighted_ce(logits, y, cfg.class_weights)?;
    let js = framewise_js(z_content, z_noise)?;
    Ok(LossBreakdown::new(
        wce,
        js,
        alignment_from_js(js, y),
        cfg.lambda_js,
    ))
}
