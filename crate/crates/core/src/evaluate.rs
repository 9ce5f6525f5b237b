//! Per-clip scoring and the summary statistics used for validation and
//! evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::losses::framewise_js;
use crate::metrics::{compute_eer, pooled_cosine, EerResult, ScoredClip};
use crate::model::SonarModel;
use crate::parallel::{try_par_map, Execution};
use crate::synth::LabeledClip;

/// One row of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub logit_fake: f64,
    pub logit_real: f64,
    pub p_real: f64,
    pub js_divergence: f64,
    /// Empty when either pooled embedding has zero norm.
    pub cosine_cn: Option<f64>,
    pub label: u8,
}

impl ClipScore {
    /// Detection score, higher is more real. The logit margin orders clips
    /// exactly like `p_real` but does not saturate.
    pub fn score(&self) -> f64 {
        self.logit_real - self.logit_fake
    }
}

pub fn score_clip(model: &SonarModel, clip: &LabeledClip) -> Result<ClipScore> {
    let out = model.forward(&clip.signal)?;
    Ok(ClipScore {
        clip_id: clip.clip_id.clone(),
        logit_fake: out.logits[0],
        logit_real: out.logits[1],
        p_real: out.p_real(),
        js_divergence: framewise_js(&out.z_content, &out.z_noise)?,
        cosine_cn: pooled_cosine(&out.z_content, &out.z_noise),
        label: clip.label,
    })
}

pub fn score_clips(
    model: &SonarModel,
    clips: &[LabeledClip],
    exec: Execution,
) -> Result<Vec<ClipScore>> {
    try_par_map(exec, clips, |c| score_clip(model, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub eer: f64,
    pub threshold: f64,
    pub js_real: f64,
    pub js_fake: f64,
    pub mean_cos_real: f64,
    pub mean_cos_fake: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn scored(scores: &[ClipScore]) -> Vec<ScoredClip> {
    scores
        .iter()
        .map(|s| ScoredClip::new(s.clip_id.clone(), s.label, s.score()))
        .collect()
}

pub fn summarize(scores: &[ClipScore]) -> Result<ScoreSummary> {
    let EerResult {
        eer,
        threshold,
        n_real,
        n_fake,
    } = compute_eer(&scored(scores))?;
    let of = |label: u8| scores.iter().filter(move |s| s.label == label);
    Ok(ScoreSummary {
        eer,
        threshold,
        js_real: mean(of(1).map(|s| s.js_divergence)),
        js_fake: mean(of(0).map(|s| s.js_divergence)),
        mean_cos_real: mean(of(1).filter_map(|s| s.cosine_cn)),
        mean_cos_fake: mean(of(0).filter_map(|s| s.cosine_cn)),
        n_real,
        n_fake,
    })
}

pub fn write_scores(path: &Path, scores: &[ClipScore]) -> Result<()> {
    let csv_err = |source| SonarError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for s in scores {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SonarError::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ClipScore>> {
    if !path.exists() {
        return Err(SonarError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "scores file not found"),
        ));
    }
    let mut r = csv::Reader::from_path(path).map_err(|source| SonarError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ClipScore>, _>>()
        .map_err(|e| SonarError::InvalidData(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(SonarError::InvalidData(format!(
            "{}: no scores",
            path.display()
        )));
    }
    Ok(rows)
}
