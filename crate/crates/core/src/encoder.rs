//! Content and noise encoders.
//!
//! Both paths share one architecture and nothing else: the input waveform
//! is standardised to zero mean and unit variance, a strided
//! convolutional front-end turns it into frames, a learned
//! position table is added, and `n_blocks` residual self-attention blocks
//! follow. The content path reads the raw signal; the noise path reads the
//! constrained-filter residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::nn::layers::{
    gaussian, linear, multi_head_attention, register_attention, register_linear,
};
use crate::nn::{NodeId, ParamStore, Tape, Tensor2};
use crate::signal::Signal;
use crate::srm::SrmFilterBank;

pub const CONTENT: &str = "content";
pub const NOISE: &str = "noise";

/// Standard deviation of the initial position table.
pub const POS_STD: f64 = 0.02;

/// Added to the waveform variance before standardising.
pub const INPUT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Samples between consecutive frames.
    pub frame_stride: usize,
    /// Samples per frame (front-end kernel width).
    pub frame_len: usize,
    pub ffn_dim: usize,
    /// Rows of the position table; inputs may not produce more frames.
    pub max_frames: usize,
}

impl EncoderConfig {
    /// 64-wide, two blocks, four heads, 25 ms frames every 10 ms at 16 kHz.
    pub fn desk(clip_samples: usize) -> Self {
        let frame_stride = 160;
        Self {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            frame_stride,
            frame_len: 400,
            ffn_dim: 64,
            max_frames: clip_samples.div_ceil(frame_stride).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SonarError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.frame_stride == 0 || self.frame_len == 0 {
            return bad("frame stride and length must be positive");
        }
        if self.ffn_dim == 0 || self.max_frames == 0 {
            return bad("ffn_dim and max_frames must be positive");
        }
        Ok(())
    }

    /// Frames produced for a `samples`-long input.
    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.frame_stride)
    }
}

/// Encoder outputs for one clip, `F x D` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPathOutput {
    pub z_content: Tensor2,
    pub z_noise: Tensor2,
}

pub fn register_encoder<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let residual_gain = 1.0 / (2.0 * cfg.n_blocks.max(1) as f64).sqrt();
    register_linear(store, rng, &format!("{prefix}.fe"), cfg.frame_len, d, 2.0)?;
    store.insert(
        format!("{prefix}.pos"),
        gaussian(rng, cfg.max_frames, d, POS_STD),
    )?;
    for b in 0..cfg.n_blocks {
        register_attention(
            store,
            rng,
            &format!("{prefix}.block{b}.attn"),
            d,
            residual_gain,
        )?;
        register_linear(
            store,
            rng,
            &format!("{prefix}.block{b}.ffn1"),
            d,
            cfg.ffn_dim,
            1.0,
        )?;
        register_linear(
            store,
            rng,
            &format!("{prefix}.block{b}.ffn2"),
            cfg.ffn_dim,
            d,
            residual_gain,
        )?;
    }
    Ok(())
}

/// Encodes a `1 x T` waveform node into an `F x D` embedding node.
pub fn encode<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    waveform: NodeId,
) -> Result<NodeId> {
    let t = tape.value(waveform).cols();
    if t < cfg.frame_stride {
        return Err(SonarError::InvalidInput(format!(
            "signal of {t} samples is shorter than one frame stride ({})",
            cfg.frame_stride
        )));
    }
    let x = tape.standardize_rows(waveform, INPUT_EPS);
    let frames = tape.frames(x, cfg.frame_len, cfg.frame_stride)?;
    let h = linear(tape, store, &format!("{prefix}.fe"), frames)?;
    let h = tape.gelu(h);
    let pos = tape.param_named(store, &format!("{prefix}.pos"))?;
    let mut h = tape.add_positional(h, pos)?;
    for b in 0..cfg.n_blocks {
        let a = multi_head_attention(
            tape,
            store,
            &format!("{prefix}.block{b}.attn"),
            h,
            h,
            cfg.n_heads,
        )?;
        h = tape.add(h, a)?;
        let f = linear(tape, store, &format!("{prefix}.block{b}.ffn1"), h)?;
        let f = tape.gelu(f);
        let f = linear(tape, store, &format!("{prefix}.block{b}.ffn2"), f)?;
        h = tape.add(h, f)?;
    }
    Ok(h)
}

/// Content embedding of a raw signal.
pub fn encode_content(cfg: &EncoderConfig, params: &ParamStore, sig: &Signal) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let x = tape.input(Tensor2::row_vector(sig.samples().to_vec()));
    let z = encode(&mut tape, params, CONTENT, cfg, x)?;
    Ok(tape.value(z).clone())
}

/// Noise embedding: filter-bank residual followed by the noise encoder.
pub fn encode_noise(
    cfg: &EncoderConfig,
    params: &ParamStore,
    bank: &SrmFilterBank,
    sig: &Signal,
) -> Result<Tensor2> {
    let residual = crate::srm::apply_bank(bank, sig)?;
    let mut tape = Tape::new();
    let x = tape.input(Tensor2::row_vector(residual.x_noise));
    let z = encode(&mut tape, params, NOISE, cfg, x)?;
    Ok(tape.value(z).clone())
}
