//! Seeded surrogate real/fake clips.
//!
//! Every clip is a tone complex in the low band plus band-limited noise in
//! 7-8 kHz, each multiplied by a slow log-normal envelope. Real clips share
//! one envelope between the bands (blended with an independent one when
//! `coupling < 1`); fake clips use independent envelopes and a quieter high
//! band.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::parallel::{par_map_range, Execution};
use crate::signal::{band_split, BandSpec, Signal, DEFAULT_FRAME_LEN};

pub const REAL: u8 = 1;
pub const FAKE: u8 = 0;

const ENVELOPE_BAND: BandSpec = BandSpec::new(2.0, 8.0);
const HF_BAND: BandSpec = BandSpec::new(7000.0, 8000.0);
const ENVELOPE_DEPTH: f64 = 0.7;
const HF_LEVEL_DB: f64 = -12.0;
const HF_JITTER_DB: f64 = 2.0;
const NOISE_FLOOR_DB: f64 = -40.0;
const PEAK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub sample_rate_hz: u32,
    pub clip_samples: usize,
    pub n_real: usize,
    pub n_fake: usize,
    /// Extra high-band suppression applied to fakes only.
    pub hf_attenuation_db: f64,
    /// Weight of the shared envelope in the high band of real clips.
    pub coupling: f64,
    pub rng_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            clip_samples: 64_600,
            n_real: 1000,
            n_fake: 1000,
            hf_attenuation_db: 12.0,
            coupling: 1.0,
            rng_seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SonarError::InvalidConfig(m));
        if self.clip_samples < 2 * DEFAULT_FRAME_LEN {
            return bad(format!(
                "clip_samples must be at least {}, got {}",
                2 * DEFAULT_FRAME_LEN,
                self.clip_samples
            ));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return bad(format!(
                "coupling must lie in [0, 1], got {}",
                self.coupling
            ));
        }
        if !(self.hf_attenuation_db >= 0.0) || !self.hf_attenuation_db.is_finite() {
            return bad(format!(
                "hf_attenuation_db must be finite and >= 0, got {}",
                self.hf_attenuation_db
            ));
        }
        if (self.sample_rate_hz as f64) < 2.0 * HF_BAND.high_hz {
            return bad(format!(
                "sample rate {} Hz cannot hold the 7-8 kHz band",
                self.sample_rate_hz
            ));
        }
        if self.n_real == 0 || self.n_fake == 0 {
            return bad(format!(
                "need at least one clip per class, got {} real and {} fake",
                self.n_real, self.n_fake
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    /// 1 real, 0 fake.
    pub label: u8,
    pub signal: Signal,
}

pub fn clip_id(label: u8, index: usize) -> String {
    let kind = if label == REAL { "real" } else { "fake" };
    format!("{kind}_{index:06}")
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn clip_rng(seed: u64, label: u8, index: usize) -> ChaCha8Rng {
    let h = splitmix(splitmix(seed) ^ splitmix(((label as u64) << 56) ^ index as u64));
    ChaCha8Rng::seed_from_u64(h)
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn normalized(mut x: Vec<f64>) -> Vec<f64> {
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

fn band_noise(rng: &mut ChaCha8Rng, cfg: &GenConfig, band: BandSpec) -> Result<Vec<f64>> {
    let noise = Signal::new(white(rng, cfg.clip_samples), cfg.sample_rate_hz)?;
    Ok(band_split(&noise, band)?.into_samples())
}

/// Log-normal envelope `exp(depth * g)` with `g` unit-variance noise
/// restricted to 2-8 Hz.
fn envelope(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Result<Vec<f64>> {
    let mut g = band_noise(rng, cfg, ENVELOPE_BAND)?;
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    let g = normalized(g);
    Ok(g.into_iter().map(|v| (ENVELOPE_DEPTH * v).exp()).collect())
}

fn tone_complex(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Vec<f64> {
    let n_tones = rng.gen_range(2..=4);
    let sr = cfg.sample_rate_hz as f64;
    let tones: Vec<(f64, f64, f64)> = (0..n_tones)
        .map(|_| {
            (
                rng.gen_range(200.0..3500.0),
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let x = (0..cfg.clip_samples)
        .map(|i| {
            let t = i as f64 / sr;
            tones
                .iter()
                .map(|(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum()
        })
        .collect();
    normalized(x)
}

fn synthesize(cfg: &GenConfig, label: u8, index: usize) -> Result<LabeledClip> {
    cfg.validate()?;
    let mut rng = clip_rng(cfg.rng_seed, label, index);
    let lf = tone_complex(&mut rng, cfg);
    let hf = normalized(band_noise(&mut rng, cfg, HF_BAND)?);
    let env = envelope(&mut rng, cfg)?;
    let env_indep = envelope(&mut rng, cfg)?;
    let jitter = rng.gen_range(-HF_JITTER_DB..HF_JITTER_DB);

    let (env_h, level_db): (Vec<f64>, f64) = if label == REAL {
        let c = cfg.coupling;
        let blend = env
            .iter()
            .zip(&env_indep)
            .map(|(a, b)| c * a + (1.0 - c) * b)
            .collect();
        (blend, HF_LEVEL_DB + jitter)
    } else {
        (env_indep, HF_LEVEL_DB + jitter - cfg.hf_attenuation_db)
    };
    let hf_gain = 10f64.powf(level_db / 20.0);

    let mut x: Vec<f64> = (0..cfg.clip_samples)
        .map(|i| lf[i] * env[i] + hf_gain * hf[i] * env_h[i])
        .collect();
    let floor = rms(&x) * 10f64.powf(NOISE_FLOOR_DB / 20.0);
    for v in &mut x {
        *v += floor * rng.sample::<f64, _>(StandardNormal);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Ok(LabeledClip {
        clip_id: clip_id(label, index),
        label,
        signal: Signal::new(x, cfg.sample_rate_hz)?,
    })
}

pub fn generate_real(cfg: &GenConfig, index: usize) -> Result<LabeledClip> {
    synthesize(cfg, REAL, index)
}

pub fn generate_fake(cfg: &GenConfig, index: usize) -> Result<LabeledClip> {
    synthesize(cfg, FAKE, index)
}

/// All reals by index, then all fakes by index.
pub fn generate_dataset(cfg: &GenConfig, exec: Execution) -> Result<Vec<LabeledClip>> {
    cfg.validate()?;
    par_map_range(exec, cfg.n_real + cfg.n_fake, |i| {
        if i < cfg.n_real {
            generate_real(cfg, i)
        } else {
            generate_fake(cfg, i - cfg.n_real)
        }
    })
    .into_iter()
    .collect()
}
