use sonar_core::checkpoint;
use sonar_core::encoder::EncoderConfig;
use sonar_core::evaluate::{score_clips, summarize};
use sonar_core::manifest::{read_manifest, write_manifest, Split};
use sonar_core::model::{Mode, ModelConfig, QuerySource};
use sonar_core::nn::{Tape, Tensor2};
use sonar_core::parallel::Execution;
use sonar_core::synth::{generate_dataset, GenConfig};
use sonar_core::train::{train, OptimConfig, TrainConfig, CONSTRAINT_TOL};

fn small(clip_samples: usize, mode: Mode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 16,
            n_blocks: 1,
            n_heads: 2,
            frame_stride: 80,
            frame_len: 160,
            ffn_dim: 16,
            max_frames: clip_samples.div_ceil(80),
        },
        m_filters: 10,
        head_hidden: 16,
        mode,
        query_source: QuerySource::Content,
        freeze_srm: false,
    }
}

#[test]
fn train_from_manifest_and_round_trip_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        clip_samples: 1600,
        n_real: 40,
        n_fake: 40,
        rng_seed: 5,
        ..GenConfig::default()
    };
    let clips = generate_dataset(&gen, Execution::Parallel).unwrap();
    let manifest =
        read_manifest(&write_manifest(&clips, dir.path(), 5, Execution::Parallel).unwrap())
            .unwrap();
    let tr = manifest
        .load_split(Split::Train, Execution::Parallel)
        .unwrap();
    let va = manifest
        .load_split(Split::Val, Execution::Parallel)
        .unwrap();
    assert_eq!((tr.len(), va.len()), (56, 12));

    for mode in [Mode::Lite, Mode::Full] {
        let cfg = TrainConfig {
            model: small(1600, mode),
            optim: OptimConfig {
                epochs: 3,
                batch_size: 8,
                seed: 2,
                ..OptimConfig::default()
            },
            lambda_js: 1.0,
        };
        let out = train(&cfg, &tr, &va, Execution::Parallel).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.steps.len(), 3 * 7);
        assert!(out
            .steps
            .iter()
            .all(|s| s.srm_centers_exact && s.srm_max_abs_sum <= CONSTRAINT_TOL));
        assert!(out
            .steps
            .iter()
            .all(|s| s.total.is_finite() && s.pinsker_bound >= 0.0));
        assert_eq!(out.epochs[0].epoch, 0);
        assert!((1..=3).contains(&out.best_epoch));

        let path = dir.path().join(format!("{mode:?}.ckpt"));
        checkpoint::save(
            &path,
            &out.best_model,
            Some(out.best_epoch),
            Some(out.best_val_eer),
        )
        .unwrap();
        let (loaded, header) = checkpoint::load(&path).unwrap();
        assert_eq!(header.epoch, Some(out.best_epoch));
        let eer = summarize(&score_clips(&loaded, &va, Execution::Sequential).unwrap())
            .unwrap()
            .eer;
        assert!(
            (eer - out.best_val_eer).abs() <= 1e-12,
            "{eer} vs {}",
            out.best_val_eer
        );
    }
}

#[test]
fn lambda_zero_and_one_share_initialisation() {
    let gen = GenConfig {
        clip_samples: 1600,
        n_real: 12,
        n_fake: 12,
        rng_seed: 8,
        ..GenConfig::default()
    };
    let clips = generate_dataset(&gen, Execution::Parallel).unwrap();
    // reals come first, then fakes
    let pick = |ranges: [std::ops::Range<usize>; 2]| {
        ranges
            .into_iter()
            .flat_map(|r| clips[r].to_vec())
            .collect::<Vec<_>>()
    };
    let tr = pick([0..8, 12..20]);
    let va = pick([8..12, 20..24]);
    let run = |lambda_js| {
        let cfg = TrainConfig {
            model: small(1600, Mode::Lite),
            optim: OptimConfig {
                epochs: 1,
                batch_size: 4,
                seed: 1,
                ..OptimConfig::default()
            },
            lambda_js,
        };
        train(&cfg, &tr, &va, Execution::Sequential).unwrap()
    };
    let (a, b) = (run(0.0), run(1.0));
    assert_eq!(a.epochs[0].val_eer.to_bits(), b.epochs[0].val_eer.to_bits());
    assert_eq!(a.steps[0].wce.to_bits(), b.steps[0].wce.to_bits());
    assert_eq!(a.steps[0].js_raw.to_bits(), b.steps[0].js_raw.to_bits());
    assert_ne!(a.steps[1].wce.to_bits(), b.steps[1].wce.to_bits());
}

#[test]
fn attention_output_lies_in_convex_hull_of_values() {
    let v = Tensor2::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 4.0]]).unwrap();
    let k = Tensor2::from_rows(&[vec![0.2, 1.0], vec![-0.7, 0.3], vec![1.5, -0.4]]).unwrap();
    let q = Tensor2::from_rows(&[vec![2.0, 0.1], vec![-1.0, 1.0]]).unwrap();
    let mut t = Tape::new();
    let (qn, kn, vn) = (t.input(q.clone()), t.input(k.clone()), t.input(v.clone()));
    let out = t.attention(qn, kn, vn, 1).unwrap();
    let out = t.value(out).clone();
    for r in 0..q.rows() {
        // recover weights by hand and compare
        let scores: Vec<f64> = (0..k.rows())
            .map(|j| {
                q.row(r)
                    .iter()
                    .zip(k.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / 2f64.sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..2 {
            let expect: f64 = (0..3).map(|j| e[j] / z * v.get(j, c)).sum();
            assert!((out.get(r, c) - expect).abs() < 1e-12);
            let (lo, hi) = (0..3)
                .map(|j| v.get(j, c))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
                    (l.min(x), h.max(x))
                });
            assert!(out.get(r, c) >= lo && out.get(r, c) <= hi);
        }
    }
}
