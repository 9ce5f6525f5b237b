//! AdamW with decoupled weight decay, cosine learning-rate annealing,
//! per-step filter projection and early stopping on validation EER.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::evaluate::{score_clips, summarize, ScoreSummary};
use crate::losses::{class_weights_from_counts, LossBreakdown, LossConfig};
use crate::model::{ModelConfig, SonarModel, SRM_KERNELS};
use crate::nn::Tensor2;
use crate::parallel::{par_map, Execution};
use crate::srm::constraint_report;
use crate::synth::{LabeledClip, REAL};

/// Largest tolerated `|sum of taps|` of any filter after a step.
pub const CONSTRAINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-3,
            lr_end: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 15,
            batch_size: 16,
            patience: 3,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SonarError::InvalidConfig(m));
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive".into());
        }
        Ok(())
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(SonarError::InvalidInput(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let phase = PI * step as f64 / total_steps as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + phase.cos()))
}

/// First and second moment buffers with a shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor2]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor2::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Decays each parameter by `1 - lr * wd`, then applies the
    /// bias-corrected Adam update. Buffers with `frozen[i]` are untouched.
    /// Gradients are checked before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [Tensor2],
        grads: &[Tensor2],
        frozen: &[bool],
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<()> {
        if grads.len() != params.len()
            || frozen.len() != params.len()
            || self.m.len() != params.len()
        {
            return Err(SonarError::Shape("optimizer buffer count mismatch".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(SonarError::Shape(format!("gradient {i} shape mismatch")));
            }
            if !g.is_finite() {
                return Err(SonarError::Numeric(format!(
                    "non-finite gradient in buffer {i}"
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            let p = params[i].as_mut_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for (j, &g) in grads[i].as_slice().iter().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a strictly lower EER.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, eer: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => eer < b,
        };
        if improved {
            self.best = Some((epoch, eer));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub wce: f64,
    pub js_raw: f64,
    pub l_js: f64,
    pub total: f64,
    pub pinsker_bound: f64,
    /// Largest `|sum of taps|` over the filters after projection.
    pub srm_max_abs_sum: f64,
    pub srm_centers_exact: bool,
}

/// Validation summary after an epoch; epoch 0 is the initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: Option<f64>,
    pub train_wce: Option<f64>,
    pub train_js_raw: Option<f64>,
    pub val_eer: f64,
    pub val_threshold: f64,
    pub val_js_real: f64,
    pub val_js_fake: f64,
    pub val_cos_real: f64,
    pub val_cos_fake: f64,
    /// Lowest validation EER over epochs `1..=epoch`.
    pub best_val_eer: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_model: SonarModel,
    pub best_epoch: usize,
    pub best_val_eer: f64,
    /// Parameters after the last step that completed with a finite loss.
    pub last_model: SonarModel,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Set when a non-finite loss or gradient ended training.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub lambda_js: f64,
}

fn check_classes(clips: &[LabeledClip], what: &str) -> Result<(usize, usize)> {
    let n_real = clips.iter().filter(|c| c.label == REAL).count();
    let n_fake = clips.len() - n_real;
    if n_real == 0 || n_fake == 0 {
        return Err(SonarError::InvalidData(format!(
            "{what} split needs both classes, has {n_real} real and {n_fake} fake"
        )));
    }
    Ok((n_real, n_fake))
}

fn validate_epoch(
    model: &SonarModel,
    val: &[LabeledClip],
    exec: Execution,
) -> Result<ScoreSummary> {
    summarize(&score_clips(model, val, exec)?)
}

fn assert_constraints(model: &SonarModel) -> Result<(f64, bool)> {
    let (max_sum, centers) = constraint_report(model.params().by_name(SRM_KERNELS)?);
    if !centers || !(max_sum <= CONSTRAINT_TOL) {
        return Err(SonarError::Numeric(format!(
            "filter constraints violated: max |sum| {max_sum:e}, centers exact {centers}"
        )));
    }
    Ok((max_sum, centers))
}

fn epoch_record(epoch: usize, s: &ScoreSummary, train: Option<&LossBreakdown>) -> EpochRecord {
    EpochRecord {
        epoch,
        train_total: train.map(|b| b.total),
        train_wce: train.map(|b| b.wce),
        train_js_raw: train.map(|b| b.js_raw),
        val_eer: s.eer,
        val_threshold: s.threshold,
        val_js_real: s.js_real,
        val_js_fake: s.js_fake,
        val_cos_real: s.mean_cos_real,
        val_cos_fake: s.mean_cos_fake,
        best_val_eer: None,
        improved: false,
    }
}

/// Runs the full loop. Gradients of a batch are computed per clip (in
/// parallel when `exec` allows) and summed in batch order, so results do
/// not depend on the execution mode.
pub fn train(
    cfg: &TrainConfig,
    train_clips: &[LabeledClip],
    val_clips: &[LabeledClip],
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.optim.validate()?;
    let (n_real, n_fake) = check_classes(train_clips, "training")?;
    check_classes(val_clips, "validation")?;
    let loss = LossConfig::new(cfg.lambda_js, class_weights_from_counts(n_fake, n_real)?)?;
    let opt = &cfg.optim;

    let mut model = SonarModel::new(cfg.model, opt.seed)?;
    assert_constraints(&model)?;
    let frozen: Vec<bool> = model
        .params()
        .iter()
        .map(|(name, _)| cfg.model.freeze_srm && name == SRM_KERNELS)
        .collect();
    let mut adam = AdamW::new(model.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5348_5546_464c_4521);
    let batches_per_epoch = train_clips.len().div_ceil(opt.batch_size);
    let total_steps = opt.epochs * batches_per_epoch;

    let init = validate_epoch(&model, val_clips, exec)?;
    let mut epochs = vec![epoch_record(0, &init, None)];
    let mut steps = Vec::with_capacity(total_steps);
    let mut stopper = EarlyStopper::new(opt.patience);
    let mut best_model = model.clone();
    let mut stopped_early = false;
    let mut aborted = None;
    let mut order: Vec<usize> = (0..train_clips.len()).collect();

    'epochs: for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(train_clips.len());
        for batch in order.chunks(opt.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let per_clip = par_map(exec, batch, |&i| {
                let c = &train_clips[i];
                model.loss_and_grads(&c.signal, c.label, &loss, scale)
            });
            let mut breakdowns = Vec::with_capacity(batch.len());
            let mut grads: Option<Vec<Tensor2>> = None;
            let mut failure = None;
            for r in per_clip {
                match r {
                    Ok((b, g)) => {
                        breakdowns.push(b);
                        match grads.as_mut() {
                            None => grads = Some(g),
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| a.add_assign(x)),
                        }
                    }
                    Err(SonarError::Numeric(m)) => {
                        failure = Some(m);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let grads = grads.unwrap_or_default();
            let lr = cosine_lr(steps.len(), total_steps, opt.lr_start, opt.lr_end)?;
            if failure.is_none() {
                let mut candidate = model.clone();
                let (values, _) = candidate.params_mut().values_and_grads_mut();
                match adam.step(values, &grads, &frozen, lr, opt) {
                    Ok(()) => {
                        candidate.project_constraints()?;
                        model = candidate;
                    }
                    Err(SonarError::Numeric(m)) => failure = Some(m),
                    Err(e) => return Err(e),
                }
            }
            if let Some(m) = failure {
                log::error!("aborting at step {}: {m}", steps.len() + 1);
                aborted = Some(m);
                break 'epochs;
            }
            let (srm_max_abs_sum, srm_centers_exact) = assert_constraints(&model)?;
            let mean = LossBreakdown::mean(&breakdowns, loss.lambda_js);
            epoch_losses.extend(breakdowns);
            steps.push(StepRecord {
                step: steps.len() + 1,
                epoch,
                lr,
                wce: mean.wce,
                js_raw: mean.js_raw,
                l_js: mean.l_js,
                total: mean.total,
                pinsker_bound: mean.pinsker_bound,
                srm_max_abs_sum,
                srm_centers_exact,
            });
        }

        let summary = validate_epoch(&model, val_clips, exec)?;
        let train_mean = LossBreakdown::mean(&epoch_losses, loss.lambda_js);
        let mut rec = epoch_record(epoch, &summary, Some(&train_mean));
        let decision = stopper.observe(epoch, summary.eer);
        rec.improved = decision.improved;
        rec.best_val_eer = stopper.best().map(|(_, e)| e);
        if decision.improved {
            best_model = model.clone();
        }
        log::info!(
            "epoch {epoch}: loss {:.4} val EER {:.4} js real {:.4} fake {:.4}",
            train_mean.total,
            summary.eer,
            summary.js_real,
            summary.js_fake
        );
        epochs.push(rec);
        if decision.stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_eer) = stopper.best().unwrap_or((0, epochs[0].val_eer));
    Ok(TrainOutcome {
        best_model,
        best_epoch,
        best_val_eer,
        last_model: model,
        steps,
        epochs,
        stopped_early,
        aborted,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |source| SonarError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SonarError::io(path, e))
}

pub fn write_step_history(path: &Path, steps: &[StepRecord]) -> Result<()> {
    write_csv(path, steps)
}

pub fn write_epoch_history(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    write_csv(path, epochs)
}
