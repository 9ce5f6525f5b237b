use std::path::Path;
use std::process::{Command, Output};

fn sonar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sonar")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, samples: usize, seed: u64) {
    let out = sonar(&[
        "gen-data",
        "--out",
        path(dir),
        "--n-real",
        &n.to_string(),
        "--n-fake",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--clip-samples",
        &samples.to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_TRAIN: [&str; 12] = [
    "--d-model",
    "16",
    "--blocks",
    "1",
    "--heads",
    "2",
    "--m-filters",
    "10",
    "--epochs",
    "2",
    "--batch",
    "8",
];

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", path(manifest), "--out", path(out)];
    args.extend(SMALL_TRAIN);
    args.extend(extra);
    sonar(&args)
}

#[test]
fn gen_data_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sonar(&["gen-data", "--n-real", "3"])), 2);
    let zero = sonar(&["gen-data", "--out", path(dir.path()), "--n-real", "0"]);
    assert_eq!(code(&zero), 2);
    assert_eq!(
        code(&sonar(&["gen-data", "--out", path(dir.path()), "--bogus"])),
        2
    );
    assert_eq!(code(&sonar(&[])), 2);
}

#[test]
fn gen_data_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 25, 16_000, 4);
    assert!(data.join("config.json").exists());
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("clip_id,path,label,split\n"));
    assert_eq!(manifest.lines().count(), 51);

    let out = dir.path().join("analysis");
    let run = sonar(&[
        "analyze",
        "--manifest",
        path(&data.join("manifest.csv")),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let table = std::fs::read_to_string(out.join("band_stats.csv")).unwrap();
    assert!(table.starts_with("path,label,e_lf_db,e_hf_db,delta_e_db,pearson_r\n"));
    assert_eq!(table.lines().count(), 51);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["insufficient"], false);
    assert!(summary["r_gap"].as_f64().unwrap() >= 0.4);
    assert!(summary["delta_e_gap_db"].as_f64().unwrap() <= -6.0);
    assert!(out.join("config.json").exists());
}

#[test]
fn analyze_empty_and_single_clip_manifests() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 1, 4000, 1);
    let manifest = dir.path().join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let first = lines.next().unwrap();

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, format!("{header}\n")).unwrap();
    let out = dir.path().join("a");
    assert_eq!(
        code(&sonar(&[
            "analyze",
            "--manifest",
            path(&empty),
            "--out",
            path(&out)
        ])),
        2
    );
    let missing = dir.path().join("nope.csv");
    assert_eq!(
        code(&sonar(&[
            "analyze",
            "--manifest",
            path(&missing),
            "--out",
            path(&out)
        ])),
        2
    );

    let single = dir.path().join("single.csv");
    std::fs::write(&single, format!("{header}\n{first}\n")).unwrap();
    let run = sonar(&["analyze", "--manifest", path(&single), "--out", path(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(
        std::fs::read_to_string(out.join("band_stats.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert_eq!(json(&out.join("summary.json"))["insufficient"], true);
}

#[test]
fn train_eval_metrics_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, 100, 1600, 7);
    let manifest = data.join("manifest.csv");

    let (a, b) = (dir.path().join("run_a"), dir.path().join("run_b"));
    for out in [&a, &b] {
        let run = train(&manifest, out, &["--seed", "3"]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    for file in ["history.csv", "epochs.csv", "best.ckpt", "summary.json"] {
        let x = std::fs::read(a.join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(file)).unwrap(), "{file} differs");
    }
    let sequential = dir.path().join("run_seq");
    assert_eq!(
        code(&train(
            &manifest,
            &sequential,
            &["--seed", "3", "--sequential"]
        )),
        0
    );
    assert_eq!(
        std::fs::read(a.join("best.ckpt")).unwrap(),
        std::fs::read(sequential.join("best.ckpt")).unwrap()
    );

    let scores = dir.path().join("eval/scores.csv");
    let run = sonar(&[
        "eval",
        "--manifest",
        path(&manifest),
        "--ckpt",
        path(&a.join("best.ckpt")),
        "--out",
        path(&scores),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&scores).unwrap();
    assert!(
        text.starts_with("clip_id,logit_fake,logit_real,p_real,js_divergence,cosine_cn,label\n")
    );
    assert_eq!(text.lines().count(), 31);
    assert!(dir.path().join("eval/scores.config.json").exists());

    let run = sonar(&["metrics", "--scores", path(&scores)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let m: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    let eer = m["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eer));
    for key in ["threshold", "mean_cos_real", "mean_cos_fake"] {
        assert!(m[key].is_number(), "{key}");
    }
    let det = std::fs::read_to_string(dir.path().join("eval/det.csv")).unwrap();
    assert!(det.starts_with("threshold,far,frr\n"));
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 10, 1600, 2);
    let out = dir.path().join("run");
    let run = train(
        &dir.path().join("manifest.csv"),
        &out,
        &["--lr-start", "-1"],
    );
    assert_eq!(code(&run), 2);
    let run = sonar(&[
        "train",
        "--manifest",
        path(&dir.path().join("none.csv")),
        "--out",
        path(&out),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn eval_missing_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 5, 1600, 2);
    let run = sonar(&[
        "eval",
        "--manifest",
        path(&dir.path().join("manifest.csv")),
        "--ckpt",
        path(&dir.path().join("missing.ckpt")),
        "--out",
        path(&dir.path().join("scores.csv")),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn inspect_filters_fresh_init_is_dc_null() {
    let run = sonar(&[
        "inspect-filters",
        "--m-filters",
        "10",
        "--seed",
        "5",
        "--points",
        "9",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let v: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    let kernels = v["kernels"].as_array().unwrap();
    assert_eq!(kernels.len(), 10);
    for (k, resp) in kernels.iter().zip(v["responses"].as_array().unwrap()) {
        let taps: Vec<f64> = k
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t.as_f64().unwrap())
            .collect();
        assert_eq!(taps.len(), 5);
        assert_eq!(taps[2], -1.0);
        let resp = resp.as_array().unwrap();
        assert_eq!(resp.len(), 9);
        assert_eq!(resp[0][0].as_f64().unwrap(), 0.0);
        assert!(resp[0][1].as_f64().unwrap() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("filters.json");
    assert_eq!(code(&sonar(&["inspect-filters", "--out", path(&out)])), 0);
    assert_eq!(json(&out)["kernels"].as_array().unwrap().len(), 30);
    assert!(dir.path().join("filters.config.json").exists());
    let missing = dir.path().join("x.ckpt");
    assert_eq!(
        code(&sonar(&["inspect-filters", "--ckpt", path(&missing)])),
        2
    );
}
