//! Equal error rate, DET points, embedding cosine separation and a paired
//! t-test. Scores follow one polarity throughout: higher means more real.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SonarError};
use crate::nn::{dot, Tensor2};

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub clip_id: String,
    /// 1 real, 0 fake.
    pub label: u8,
    pub score: f64,
}

impl ScoredClip {
    pub fn new(clip_id: impl Into<String>, label: u8, score: f64) -> Self {
        Self {
            clip_id: clip_id.into(),
            label,
            score,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

/// One operating point: accept as real iff `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn split_scores(scores: &[ScoredClip]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut real = Vec::new();
    let mut fake = Vec::new();
    for s in scores {
        if !s.score.is_finite() {
            return Err(SonarError::InvalidInput(format!(
                "non-finite score for {}",
                s.clip_id
            )));
        }
        match s.label {
            1 => real.push(s.score),
            0 => fake.push(s.score),
            l => {
                return Err(SonarError::InvalidInput(format!(
                    "label {l} for {}",
                    s.clip_id
                )))
            }
        }
    }
    if real.is_empty() || fake.is_empty() {
        return Err(SonarError::InvalidInput(format!(
            "EER needs both classes, got {} real and {} fake",
            real.len(),
            fake.len()
        )));
    }
    Ok((real, fake))
}

/// FAR and FRR at every distinct score, ascending, plus a final point above
/// the maximum score where nothing is accepted.
pub fn det_curve(scores: &[ScoredClip]) -> Result<Vec<DetPoint>> {
    let (mut real, mut fake) = split_scores(scores)?;
    real.sort_by(f64::total_cmp);
    fake.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = real.iter().chain(&fake).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let (mut ri, mut fi) = (0usize, 0usize);
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for &t in &thresholds {
        // counts strictly below t
        while ri < real.len() && real[ri] < t {
            ri += 1;
        }
        while fi < fake.len() && fake[fi] < t {
            fi += 1;
        }
        points.push(DetPoint {
            threshold: t,
            far: (fake.len() - fi) as f64 / nf,
            frr: ri as f64 / nr,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Locates the first sign change of `far - frr` along an ascending sweep
/// and interpolates linearly between the bracketing points.
pub fn eer_from_det(points: &[DetPoint]) -> (f64, f64) {
    for i in 0..points.len() {
        let d1 = points[i].far - points[i].frr;
        if d1 <= 0.0 {
            if d1 == 0.0 || i == 0 {
                return (points[i].far, points[i].threshold);
            }
            let (a, b) = (points[i - 1], points[i]);
            let d0 = a.far - a.frr;
            let alpha = d0 / (d0 - d1);
            let eer = a.far + alpha * (b.far - a.far);
            let threshold = if b.threshold.is_finite() {
                a.threshold + alpha * (b.threshold - a.threshold)
            } else {
                a.threshold
            };
            return (eer, threshold);
        }
    }
    // unreachable: the final point always has far - frr = -1
    (0.5, f64::NAN)
}

pub fn compute_eer(scores: &[ScoredClip]) -> Result<EerResult> {
    let points = det_curve(scores)?;
    let (eer, threshold) = eer_from_det(&points);
    let n_real = scores.iter().filter(|s| s.label == 1).count();
    if eer > 0.5 {
        log::warn!("EER {eer:.3} above 0.5; scores may have inverted polarity");
    }
    Ok(EerResult {
        eer,
        threshold,
        n_real,
        n_fake: scores.len() - n_real,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the frame-averaged content and noise embeddings.
pub fn pooled_cosine(z_content: &Tensor2, z_noise: &Tensor2) -> Option<f64> {
    cosine(
        z_content.mean_rows().as_slice(),
        z_noise.mean_rows().as_slice(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSeparation {
    pub mean_real: f64,
    pub mean_fake: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins spanning `[-1, 1]`, per class.
    pub histogram_real: Vec<usize>,
    pub histogram_fake: Vec<usize>,
    pub skipped: usize,
}

fn bin(c: f64) -> usize {
    (((c + 1.0) / 2.0 * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

/// Class-conditional statistics of per-clip cosines. Clips whose pooled
/// embedding has zero norm are skipped with a warning.
pub fn cosine_separation<'a, I>(embeddings: I) -> Result<CosineSeparation>
where
    I: IntoIterator<Item = (&'a Tensor2, &'a Tensor2, u8)>,
{
    let mut out = CosineSeparation {
        mean_real: 0.0,
        mean_fake: 0.0,
        histogram_real: vec![0; HISTOGRAM_BINS],
        histogram_fake: vec![0; HISTOGRAM_BINS],
        skipped: 0,
    };
    let mut seen = [0usize; 2];
    let mut sums = [0.0f64; 2];
    for (zc, zn, label) in embeddings {
        seen[(label == 1) as usize] += 1;
        let Some(c) = pooled_cosine(zc, zn) else {
            log::warn!("skipping clip with zero-norm pooled embedding");
            out.skipped += 1;
            continue;
        };
        if label == 1 {
            sums[1] += c;
            out.histogram_real[bin(c)] += 1;
        } else {
            sums[0] += c;
            out.histogram_fake[bin(c)] += 1;
        }
    }
    if seen[0] == 0 || seen[1] == 0 {
        return Err(SonarError::InvalidInput(
            "cosine separation needs both classes".into(),
        ));
    }
    let kept_real: usize = out.histogram_real.iter().sum();
    let kept_fake: usize = out.histogram_fake.iter().sum();
    out.mean_real = if kept_real > 0 {
        sums[1] / kept_real as f64
    } else {
        f64::NAN
    };
    out.mean_fake = if kept_fake > 0 {
        sums[0] / kept_fake as f64
    } else {
        f64::NAN
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// Differences had zero variance; `t` is `0` (equal means) or
    /// `+-inf` and `p` is `1` or `0` accordingly.
    pub zero_variance: bool,
}

/// Two-sided paired t-test on `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(SonarError::InvalidInput(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let k = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / k;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let df = a.len() - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
        return Ok(TTestResult {
            t,
            p,
            df,
            zero_variance: true,
        });
    }
    let t = mean / (var.sqrt() / k.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| SonarError::Numeric(format!("t distribution: {e}")))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTestResult {
        t,
        p,
        df,
        zero_variance: false,
    })
}
