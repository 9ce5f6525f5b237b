//! One function per subcommand. Each writes a `config.json` echo of its
//! resolved settings next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use sonar_core::checkpoint;
use sonar_core::encoder::EncoderConfig;
use sonar_core::evaluate::{read_scores, score_clips, scored, summarize, write_scores};
use sonar_core::manifest::{read_manifest, write_manifest, Manifest, Split};
use sonar_core::metrics::{compute_eer, det_curve};
use sonar_core::model::ModelConfig;
use sonar_core::parallel::{try_par_map, Execution};
use sonar_core::signal::default_band_stats;
use sonar_core::srm::{frequency_response, SrmFilterBank};
use sonar_core::synth::{generate_dataset, GenConfig, LabeledClip};
use sonar_core::train::{
    train as run_training, write_epoch_history, write_step_history, OptimConfig, TrainConfig,
};
use sonar_core::SonarError;

use crate::{AnalyzeArgs, EvalArgs, GenDataArgs, InspectArgs, MetricsArgs, SplitArg, TrainArgs};

#[derive(Serialize)]
struct ConfigEcho<'a, A: Serialize, R: Serialize> {
    command: &'a str,
    args: &'a A,
    resolved: R,
    execution: Execution,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Logs the resolved config and writes it to `path`.
fn echo_config<A: Serialize, R: Serialize>(
    path: &Path,
    command: &str,
    args: &A,
    resolved: R,
    exec: Execution,
) -> Result<()> {
    let echo = ConfigEcho {
        command,
        args,
        resolved,
        execution: exec,
    };
    log::info!("{command}: {}", serde_json::to_string(&echo)?);
    write_json(path, &echo)
}

/// `config.json` beside a single-file output, prefixed with its stem so
/// several outputs can share a directory.
fn sibling_config(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    out.with_file_name(format!("{stem}.config.json"))
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn load_clips(manifest: &Manifest, split: SplitArg, exec: Execution) -> Result<Vec<LabeledClip>> {
    let clips = match split {
        SplitArg::All => manifest.load_all(exec)?,
        SplitArg::Train => manifest.load_split(Split::Train, exec)?,
        SplitArg::Val => manifest.load_split(Split::Val, exec)?,
        SplitArg::Test => manifest.load_split(Split::Test, exec)?,
    };
    if clips.is_empty() {
        return Err(SonarError::InvalidData(format!("no clips in split {split:?}")).into());
    }
    Ok(clips)
}

pub fn gen_data(args: &GenDataArgs, exec: Execution) -> Result<()> {
    let cfg = GenConfig {
        sample_rate_hz: args.sample_rate,
        clip_samples: args.clip_samples,
        n_real: args.n_real,
        n_fake: args.n_fake,
        hf_attenuation_db: args.hf_atten_db,
        coupling: args.coupling,
        rng_seed: args.seed,
    };
    cfg.validate()?;
    create_dir(&args.out)?;
    echo_config(&args.out.join("config.json"), "gen-data", args, cfg, exec)?;
    let clips = generate_dataset(&cfg, exec)?;
    let path = write_manifest(&clips, &args.out, args.seed, exec)?;
    log::info!("wrote {} clips, manifest {}", clips.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct BandRow<'a> {
    path: &'a str,
    label: u8,
    e_lf_db: f64,
    e_hf_db: f64,
    delta_e_db: f64,
    pearson_r: f64,
}

#[derive(Serialize)]
struct ClassSummary {
    n: usize,
    mean_r: Option<f64>,
    mean_delta_e_db: Option<f64>,
}

#[derive(Serialize)]
struct AnalyzeSummary {
    real: ClassSummary,
    fake: ClassSummary,
    r_gap: Option<f64>,
    delta_e_gap_db: Option<f64>,
    /// Fewer than two clips in a class.
    insufficient: bool,
}

fn class_summary(rows: &[(u8, sonar_core::signal::BandStats)], label: u8) -> ClassSummary {
    let of: Vec<_> = rows
        .iter()
        .filter(|(l, _)| *l == label)
        .map(|(_, s)| s)
        .collect();
    let mean = |f: fn(&sonar_core::signal::BandStats) -> f64| {
        (!of.is_empty()).then(|| of.iter().map(|s| f(s)).sum::<f64>() / of.len() as f64)
    };
    ClassSummary {
        n: of.len(),
        mean_r: mean(|s| s.pearson_r),
        mean_delta_e_db: mean(|s| s.delta_e_db),
    }
}

pub fn analyze(args: &AnalyzeArgs, exec: Execution) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    create_dir(&args.out)?;
    echo_config(&args.out.join("config.json"), "analyze", args, (), exec)?;
    let entries: Vec<_> = match args.split {
        SplitArg::All => manifest.entries.iter().collect(),
        SplitArg::Train => manifest.split(Split::Train),
        SplitArg::Val => manifest.split(Split::Val),
        SplitArg::Test => manifest.split(Split::Test),
    };
    if entries.is_empty() {
        return Err(SonarError::InvalidData("no clips to analyze".into()).into());
    }
    let stats = try_par_map(exec, &entries, |e| -> sonar_core::Result<_> {
        let clip = manifest.load(&[e], Execution::Sequential)?.remove(0);
        Ok((e.label, default_band_stats(&clip.signal)?))
    })?;

    let path = args.out.join("band_stats.csv");
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for (e, (label, s)) in entries.iter().zip(&stats) {
        w.serialize(BandRow {
            path: &e.path,
            label: *label,
            e_lf_db: s.e_lf_db,
            e_hf_db: s.e_hf_db,
            delta_e_db: s.delta_e_db,
            pearson_r: s.pearson_r,
        })?;
    }
    w.flush()?;

    let real = class_summary(&stats, 1);
    let fake = class_summary(&stats, 0);
    let gap = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    let summary = AnalyzeSummary {
        r_gap: gap(real.mean_r, fake.mean_r),
        delta_e_gap_db: gap(fake.mean_delta_e_db, real.mean_delta_e_db),
        insufficient: real.n < 2 || fake.n < 2,
        real,
        fake,
    };
    if summary.insufficient {
        log::warn!(
            "summary marked insufficient: {} real, {} fake clips",
            summary.real.n,
            summary.fake.n
        );
    }
    write_json(&args.out.join("summary.json"), &summary)
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_eer: f64,
    epochs_run: usize,
    steps: usize,
    stopped_early: bool,
    aborted: Option<String>,
}

pub fn train(args: &TrainArgs, exec: Execution) -> Result<()> {
    let manifest = read_manifest(&args.manifest)?;
    let train_clips = manifest.load_split(Split::Train, exec)?;
    let val_clips = manifest.load_split(Split::Val, exec)?;
    let longest = train_clips
        .iter()
        .chain(&val_clips)
        .map(|c| c.signal.len())
        .max()
        .ok_or_else(|| SonarError::InvalidData("manifest has no train or val clips".into()))?;
    let encoder = EncoderConfig {
        d_model: args.d_model,
        n_blocks: args.blocks,
        n_heads: args.heads,
        ..EncoderConfig::desk(longest)
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            encoder,
            m_filters: args.m_filters,
            mode: args.mode.into(),
            query_source: args.query.into(),
            freeze_srm: args.freeze_srm,
            ..ModelConfig::desk(longest)
        },
        optim: OptimConfig {
            lr_start: args.lr_start,
            lr_end: args.lr_end,
            weight_decay: args.weight_decay,
            epochs: args.epochs,
            batch_size: args.batch,
            patience: args.patience,
            seed: args.seed,
            ..OptimConfig::default()
        },
        lambda_js: args.lambda_js,
    };
    cfg.model.validate()?;
    cfg.optim.validate()?;
    create_dir(&args.out)?;
    #[derive(Serialize)]
    struct Resolved {
        model: ModelConfig,
        optim: OptimConfig,
        lambda_js: f64,
    }
    let resolved = Resolved {
        model: cfg.model,
        optim: cfg.optim,
        lambda_js: cfg.lambda_js,
    };
    echo_config(&args.out.join("config.json"), "train", args, resolved, exec)?;

    let out = run_training(&cfg, &train_clips, &val_clips, exec)?;
    write_step_history(&args.out.join("history.csv"), &out.steps)?;
    write_epoch_history(&args.out.join("epochs.csv"), &out.epochs)?;
    checkpoint::save(
        &args.out.join("best.ckpt"),
        &out.best_model,
        Some(out.best_epoch),
        Some(out.best_val_eer),
    )?;
    let summary = TrainSummary {
        best_epoch: out.best_epoch,
        best_val_eer: out.best_val_eer,
        epochs_run: out.epochs.len().saturating_sub(1),
        steps: out.steps.len(),
        stopped_early: out.stopped_early,
        aborted: out.aborted.clone(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    log::info!(
        "best validation EER {:.4} at epoch {} after {} steps",
        out.best_val_eer,
        out.best_epoch,
        out.steps.len()
    );
    match out.aborted {
        Some(reason) => {
            anyhow::bail!("training aborted, best.ckpt holds the last good model: {reason}")
        }
        None => Ok(()),
    }
}

pub fn eval(args: &EvalArgs, exec: Execution) -> Result<()> {
    let (model, header) = checkpoint::load(&args.ckpt)?;
    let manifest = read_manifest(&args.manifest)?;
    let clips = load_clips(&manifest, args.split, exec)?;
    create_dir(parent_dir(&args.out))?;
    echo_config(&sibling_config(&args.out), "eval", args, &header, exec)?;
    let scores = score_clips(&model, &clips, exec)?;
    write_scores(&args.out, &scores)?;
    log::info!("scored {} clips into {}", scores.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsJson {
    eer: f64,
    threshold: f64,
    mean_cos_real: f64,
    mean_cos_fake: f64,
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let scores = read_scores(&args.scores)?;
    let summary = summarize(&scores)?;
    let eer = compute_eer(&scored(&scores))?;
    let det_path = args
        .det_out
        .clone()
        .unwrap_or_else(|| parent_dir(&args.scores).join("det.csv"));
    create_dir(parent_dir(&det_path))?;
    echo_config(
        &sibling_config(&det_path),
        "metrics",
        args,
        (),
        Execution::Sequential,
    )?;

    let mut w = csv::Writer::from_path(&det_path)
        .with_context(|| format!("writing {}", det_path.display()))?;
    for p in det_curve(&scored(&scores))? {
        w.serialize(p)?;
    }
    w.flush()?;

    let json = MetricsJson {
        eer: eer.eer,
        threshold: eer.threshold,
        mean_cos_real: summary.mean_cos_real,
        mean_cos_fake: summary.mean_cos_fake,
    };
    if let Some(out) = &args.out {
        write_json(out, &json)?;
    }
    println!("{}", serde_json::to_string(&json)?);
    Ok(())
}

#[derive(Serialize)]
struct FilterJson {
    kernels: Vec<[f64; 5]>,
    /// One list of `[omega, magnitude]` pairs per kernel.
    responses: Vec<Vec<[f64; 2]>>,
}

pub fn inspect_filters(args: &InspectArgs) -> Result<()> {
    let bank = match &args.ckpt {
        Some(path) => checkpoint::load(path)?.0.bank()?,
        None => SrmFilterBank::init(args.m_filters.unwrap_or(30), args.seed)?,
    };
    let kernels: Vec<[f64; 5]> = (0..bank.m_filters()).map(|i| bank.kernel(i)).collect();
    let responses = kernels
        .iter()
        .map(|k| {
            Ok(frequency_response(k, args.points)?
                .into_iter()
                .map(|(f, m)| [f, m])
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let json = FilterJson { kernels, responses };
    match &args.out {
        Some(out) => {
            create_dir(parent_dir(out))?;
            echo_config(
                &sibling_config(out),
                "inspect-filters",
                args,
                (),
                Execution::Sequential,
            )?;
            write_json(out, &json)
        }
        None => {
            println!("{}", serde_json::to_string(&json)?);
            Ok(())
        }
    }
}
