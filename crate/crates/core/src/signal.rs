//! Waveforms, ideal band splitting and low/high band statistics.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};

/// Silence floor added to band power before taking the log.
pub const ENERGY_EPS: f64 = 1e-12;
pub const DEFAULT_FRAME_LEN: usize = 400;
pub const DEFAULT_HOP: usize = 160;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(SonarError::InvalidSignal("no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(SonarError::InvalidSignal(
                "sample rate must be positive".into(),
            ));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SonarError::InvalidSignal(format!(
                "non-finite sample at {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / 2.0
    }

    pub fn mean_square(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Closed frequency interval `[low_hz, high_hz]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandSpec {
    pub const fn new(low_hz: f64, high_hz: f64) -> Self {
        Self { low_hz, high_hz }
    }

    /// 0-4 kHz.
    pub const LOW: BandSpec = BandSpec::new(0.0, 4000.0);
    /// 7-8 kHz.
    pub const HIGH: BandSpec = BandSpec::new(7000.0, 8000.0);

    fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let ok = self.low_hz.is_finite()
            && self.high_hz.is_finite()
            && self.low_hz >= 0.0
            && self.low_hz < self.high_hz
            && self.high_hz <= sample_rate_hz as f64 / 2.0;
        if ok {
            Ok(())
        } else {
            Err(SonarError::InvalidBand {
                low_hz: self.low_hz,
                high_hz: self.high_hz,
                sample_rate_hz,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub e_lf_db: f64,
    pub e_hf_db: f64,
    pub delta_e_db: f64,
    pub pearson_r: f64,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Ideal band-pass: zero every DFT bin whose frequency (folded for negative
/// frequencies) lies outside the closed band.
pub fn band_split(sig: &Signal, band: BandSpec) -> Result<Signal> {
    band.validate(sig.sample_rate_hz)?;
    let n = sig.len();
    let mut buf: Vec<Complex<f64>> = sig.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    fwd.process(&mut buf);
    let bin_hz = sig.sample_rate_hz as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let folded = k.min(n - k) as f64 * bin_hz;
        if folded < band.low_hz || folded > band.high_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    let scale = 1.0 / n as f64;
    Signal::new(
        buf.iter().map(|c| c.re * scale).collect(),
        sig.sample_rate_hz,
    )
}

/// `10 log10(mean square + eps)` of the band-limited signal.
pub fn band_energy_db(sig: &Signal, band: BandSpec) -> Result<f64> {
    let part = band_split(sig, band)?;
    Ok(energy_db(&part))
}

fn energy_db(sig: &Signal) -> f64 {
    10.0 * (sig.mean_square() + ENERGY_EPS).log10()
}

/// Per-frame RMS over frames of `frame_len` samples advanced by `hop`.
pub fn rms_envelope(samples: &[f64], frame_len: usize, hop: usize) -> Result<Vec<f64>> {
    if frame_len == 0 || hop == 0 {
        return Err(SonarError::InvalidConfig(
            "frame length and hop must be positive".into(),
        ));
    }
    if frame_len > samples.len() {
        return Err(SonarError::InsufficientData(format!(
            "frame of {frame_len} samples exceeds signal of {}",
            samples.len()
        )));
    }
    let n_frames = (samples.len() - frame_len) / hop + 1;
    Ok((0..n_frames)
        .map(|f| {
            let w = &samples[f * hop..f * hop + frame_len];
            (w.iter().map(|v| v * v).sum::<f64>() / frame_len as f64).sqrt()
        })
        .collect())
}

/// Pearson correlation; zero when either sequence has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SonarError::InvalidInput(format!(
            "sequences of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(SonarError::InsufficientData(
            "correlation needs at least two points".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between the RMS envelopes of the two bands.
pub fn band_envelope_correlation(
    sig: &Signal,
    lf: BandSpec,
    hf: BandSpec,
    frame_len: usize,
    hop: usize,
) -> Result<f64> {
    let lo = band_split(sig, lf)?;
    let hi = band_split(sig, hf)?;
    envelope_correlation(&lo, &hi, frame_len, hop)
}

fn envelope_correlation(lo: &Signal, hi: &Signal, frame_len: usize, hop: usize) -> Result<f64> {
    let el = rms_envelope(lo.samples(), frame_len, hop)?;
    let eh = rms_envelope(hi.samples(), frame_len, hop)?;
    if el.len() < 2 {
        return Err(SonarError::InsufficientData(format!(
            "{} envelope frame(s); need at least two",
            el.len()
        )));
    }
    pearson(&el, &eh)
}

pub fn band_stats(
    sig: &Signal,
    lf: BandSpec,
    hf: BandSpec,
    frame_len: usize,
    hop: usize,
) -> Result<BandStats> {
    let lo = band_split(sig, lf)?;
    let hi = band_split(sig, hf)?;
    let e_lf_db = energy_db(&lo);
    let e_hf_db = energy_db(&hi);
    Ok(BandStats {
        e_lf_db,
        e_hf_db,
        delta_e_db: e_hf_db - e_lf_db,
        pearson_r: envelope_correlation(&lo, &hi, frame_len, hop)?,
    })
}

/// [`band_stats`] with the 0-4 kHz / 7-8 kHz bands and 25 ms / 10 ms framing
/// at 16 kHz.
pub fn default_band_stats(sig: &Signal) -> Result<BandStats> {
    band_stats(
        sig,
        BandSpec::LOW,
        BandSpec::HIGH,
        DEFAULT_FRAME_LEN,
        DEFAULT_HOP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const SR: u32 = 16_000;

    fn tone(freq: f64, amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SR as f64).sin())
            .collect()
    }

    fn sig(v: Vec<f64>) -> Signal {
        Signal::new(v, SR).unwrap()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn energy(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum()
    }

    #[test]
    fn signal_validation() {
        assert!(Signal::new(vec![], SR).is_err());
        assert!(Signal::new(vec![0.0], 0).is_err());
        assert!(Signal::new(vec![f64::NAN], SR).is_err());
    }

    #[test]
    fn tone_in_and_out_of_band() {
        let s = sig(tone(1000.0, 1.0, 16_000));
        let lo = band_split(&s, BandSpec::LOW).unwrap();
        let dev = lo
            .samples()
            .iter()
            .zip(s.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-9);
        let hi = band_split(&s, BandSpec::HIGH).unwrap();
        assert!(energy(hi.samples()) < 1e-18 * energy(s.samples()));
    }

    #[test]
    fn bands_partition_energy() {
        let s = sig(noise(7, 4000));
        let total = energy(s.samples());
        let lo = energy(band_split(&s, BandSpec::LOW).unwrap().samples());
        let hi = energy(band_split(&s, BandSpec::HIGH).unwrap().samples());
        assert!(lo + hi <= total * (1.0 + 1e-12));
        // tiling bands: closed intervals share no bin when the edge sits
        // between bins (bin spacing 4 Hz here, 4001 is off-grid)
        let lo = energy(
            band_split(&s, BandSpec::new(0.0, 4001.0))
                .unwrap()
                .samples(),
        );
        let hi = energy(
            band_split(&s, BandSpec::new(4002.0, 8000.0))
                .unwrap()
                .samples(),
        );
        assert!(((lo + hi) - total).abs() < 1e-9 * total);
    }

    #[test]
    fn band_validation() {
        let s = sig(vec![0.0; 32]);
        assert!(band_split(&s, BandSpec::new(0.0, 8001.0)).is_err());
        assert!(band_split(&s, BandSpec::new(3000.0, 3000.0)).is_err());
        assert!(band_split(&s, BandSpec::new(-1.0, 100.0)).is_err());
    }

    #[test]
    fn energy_examples() {
        let silence = sig(vec![0.0; 1600]);
        assert!((band_energy_db(&silence, BandSpec::LOW).unwrap() + 120.0).abs() < 1e-9);
        let s = sig(tone(1000.0, 1.0, 16_000));
        let e = band_energy_db(&s, BandSpec::LOW).unwrap();
        assert!((e - 10.0 * 0.5f64.log10()).abs() < 1e-6);
        let loud = sig(tone(1000.0, 10.0, 16_000));
        let e10 = band_energy_db(&loud, BandSpec::LOW).unwrap();
        assert!((e10 - e - 20.0).abs() < 1e-6);
    }

    #[test]
    fn shared_envelope_correlates() {
        let n = 16_000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / SR as f64;
                let env = 1.2 + (2.0 * PI * 3.0 * t).sin();
                env * ((2.0 * PI * 1000.0 * t).sin() + (2.0 * PI * 7500.0 * t).sin())
            })
            .collect();
        let r =
            band_envelope_correlation(&sig(x), BandSpec::LOW, BandSpec::HIGH, 400, 160).unwrap();
        assert!(r >= 0.95, "r = {r}");
    }

    #[test]
    fn independent_envelopes_decorrelate() {
        let n = 16_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mean_r = 0.0;
        for _ in 0..100 {
            // piecewise-constant random envelopes, one level per 50 ms
            let la: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..1.0)).collect();
            let lb: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..1.0)).collect();
            let x: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / SR as f64;
                    let seg = i / 800;
                    la[seg] * (2.0 * PI * 1000.0 * t).sin()
                        + lb[seg] * (2.0 * PI * 7500.0 * t).sin()
                })
                .collect();
            mean_r += band_envelope_correlation(&sig(x), BandSpec::LOW, BandSpec::HIGH, 400, 160)
                .unwrap()
                / 100.0;
        }
        assert!(mean_r.abs() <= 0.2, "mean r = {mean_r}");
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 3.0, 2.0, 5.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(pearson(&a, &[2.0; 4]).unwrap(), 0.0);
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn too_few_frames() {
        let s = sig(tone(1000.0, 1.0, 500));
        assert!(matches!(
            band_envelope_correlation(&s, BandSpec::LOW, BandSpec::HIGH, 400, 160),
            Err(SonarError::InsufficientData(_))
        ));
        let s = sig(tone(1000.0, 1.0, 300));
        assert!(band_envelope_correlation(&s, BandSpec::LOW, BandSpec::HIGH, 400, 160).is_err());
    }

    #[test]
    fn stats_examples() {
        let n = 16_000;
        let low = band_stats(
            &sig(tone(1000.0, 1.0, n)),
            BandSpec::LOW,
            BandSpec::HIGH,
            400,
            160,
        )
        .unwrap();
        assert!(low.delta_e_db <= -60.0);
        assert_eq!(low.delta_e_db, low.e_hf_db - low.e_lf_db);
        let high = default_band_stats(&sig(tone(7500.0, 1.0, n))).unwrap();
        assert!(high.delta_e_db >= 60.0);
        let two: Vec<f64> = tone(1000.0, 1.0, n)
            .iter()
            .zip(tone(7500.0, 1.0, n))
            .map(|(a, b)| a + b)
            .collect();
        let both = default_band_stats(&sig(two)).unwrap();
        assert!(both.delta_e_db.abs() < 0.5);
        assert!((-1.0..=1.0).contains(&both.pearson_r));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn split_is_idempotent_and_linear(seed in 0u64..1000, a in -3.0f64..3.0, lo in 0.0f64..3000.0, width in 100.0f64..4000.0) {
            let band = BandSpec::new(lo, (lo + width).min(8000.0));
            let s1 = sig(noise(seed, 512));
            let s2 = sig(noise(seed + 1, 512));
            let once = band_split(&s1, band).unwrap();
            let twice = band_split(&once, band).unwrap();
            for (x, y) in once.samples().iter().zip(twice.samples()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let mix = sig(s1.samples().iter().zip(s2.samples()).map(|(x, y)| a * x + y).collect());
            let m = band_split(&mix, band).unwrap();
            let b2 = band_split(&s2, band).unwrap();
            for ((mv, x), y) in m.samples().iter().zip(once.samples()).zip(b2.samples()) {
                prop_assert!((mv - (a * x + y)).abs() < 1e-9);
            }
        }

        #[test]
        fn pearson_affine_invariant(scale in 0.1f64..10.0, shift in -5.0f64..5.0, seed in 0u64..100) {
            let a = noise(seed, 30);
            let b = noise(seed + 77, 30);
            let t: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
            prop_assert!((pearson(&a, &b).unwrap() - pearson(&t, &b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn energy_monotone_in_amplitude(g in 1.0f64..5.0, seed in 0u64..100) {
            let s = noise(seed, 256);
            let base = band_energy_db(&sig(s.clone()), BandSpec::LOW).unwrap();
            let louder = band_energy_db(&sig(s.iter().map(|v| v * g).collect()), BandSpec::LOW).unwrap();
            prop_assert!(louder >= base - 1e-12);
        }
    }
}
