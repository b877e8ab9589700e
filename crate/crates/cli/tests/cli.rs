use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[dataset]
motions = ["still", "walk"]
clips_per_combo = 4
clip_duration_s = 1.2

[features]
bins = 16

[model]
bins = 16
d = 4
pre_blocks = 1
post_strides = [2, 2]
post_channels = 4
unet_channels = [8, 8]
head_hidden = 8
embed_dim = 8
cpe_hidden = 8

[train]
epochs = 2
batch_size = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_acousticpose"));
    c.env_remove("ACOUSTICPOSE_CACHE").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn simulate(cfg: &Path, out: &Path) -> String {
    ok(&["simulate", "--config", s(cfg), "--out", s(out)]).trim().to_string()
}

#[test]
fn simulate_is_deterministic_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ha = simulate(&cfg, &a);
    assert_eq!(ha.len(), 64);
    assert_eq!(ha, simulate(&cfg, &b));

    let manifest = json(&a.join("manifest.json"));
    let splits = manifest["records"][0]["splits"].as_object().unwrap();
    assert!(splits.contains_key("single-music") && splits.contains_key("cross-music"));
    assert!(a.join("config.resolved.toml").is_file());

    let again = run(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a), "--force"]);

    let other = ok(&["simulate", "--config", s(&cfg), "--seed", "4", "--out", s(&tmp.path().join("c"))]);
    assert_ne!(other.trim(), ha);
}

#[test]
fn chirp_dataset_is_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("chirp");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out), "--bgm-kind", "chirp"]);
    let manifest = json(&out.join("manifest.json"));
    let records = manifest["records"].as_array().unwrap();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r["bgm_kind"] == "chirp"));
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    simulate(&cfg, &data);
    let feats = tmp.path().join("features");
    ok(&["featurize", "--config", s(&cfg), "--data", s(&data), "--out", s(&feats), "--f64"]);
    let index = json(&feats.join("index.json"));
    assert!(index["windows"].as_array().unwrap().len() >= 40);
    assert!(index["failures"].as_array().unwrap().is_empty());

    let init = tmp.path().join("init");
    ok(&["train", "--config", s(&cfg), "--features", s(&feats), "--out", s(&init), "--epochs", "0"]);
    assert!(init.join("initial/params.bin").is_file());
    assert!(!init.join("last").exists());

    let runs: Vec<PathBuf> = ["r1", "r2"].iter().map(|r| tmp.path().join(r)).collect();
    for r in &runs {
        ok(&["train", "--config", s(&cfg), "--features", s(&feats), "--out", s(r)]);
        for f in ["best/params.bin", "last/ema.bin", "train_log.csv", "config.resolved.toml", "run.json"] {
            assert!(r.join(f).is_file(), "{f}");
        }
        ok(&["eval", "--run", s(r)]);
    }
    let m1 = fs::read(runs[0].join("eval_best/metrics.json")).unwrap();
    assert_eq!(m1, fs::read(runs[1].join("eval_best/metrics.json")).unwrap());
    let metrics = json(&runs[0].join("eval_best/metrics.json"));
    assert!(metrics["mae"].as_f64().unwrap() > 0.0);
    let per_joint = fs::read_to_string(runs[0].join("eval_best/per_joint.csv")).unwrap();
    assert!(per_joint.starts_with("joint,name,mean_error,pckh05"));
    assert_eq!(per_joint.lines().count(), 22);
    assert!(runs[0].join("eval_best/baseline/metrics.json").is_file());

    let oracle = tmp.path().join("oracle");
    ok(&["eval", "--run", s(&runs[0]), "--oracle", "--out", s(&oracle)]);
    let m = json(&oracle.join("metrics.json"));
    assert_eq!(m["pckh05"].as_f64(), Some(1.0));
    assert_eq!(m["mae"].as_f64(), Some(0.0));

    // a finished run resumes to a no-op; a different seed is refused
    let before = fs::read(runs[0].join("last/params.bin")).unwrap();
    ok(&["train", "--features", s(&feats), "--out", s(&runs[0]), "--resume"]);
    assert_eq!(before, fs::read(runs[0].join("last/params.bin")).unwrap());
    let other = run(&["train", "--features", s(&feats), "--out", s(&runs[0]), "--resume", "--seed", "9"]);
    assert_eq!(other.status.code(), Some(2));

    // the run directory is not silently overwritten
    let again = run(&["train", "--config", s(&cfg), "--features", s(&feats), "--out", s(&runs[0])]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn featurize_lists_failures_and_signals_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    simulate(&cfg, &data);
    let manifest = json(&data.join("manifest.json"));
    let records = manifest["records"].as_array().unwrap().len();
    let victim = manifest["records"][2]["files"]["recorded"].as_str().unwrap();
    fs::write(data.join(victim), b"not a wav").unwrap();

    let feats = tmp.path().join("features");
    let out = run(&["featurize", "--config", s(&cfg), "--data", s(&data), "--out", s(&feats)]);
    assert_eq!(out.status.code(), Some(3));
    let index = json(&feats.join("index.json"));
    assert_eq!(index["failures"].as_array().unwrap().len(), 1);
    let mut ids: Vec<&str> = index["windows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w["record"].as_str().unwrap())
        .collect();
    ids.dedup();
    assert_eq!(ids.len(), records - 1);
}

#[test]
fn featurize_cache_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    simulate(&cfg, &data);
    let cache = tmp.path().join("cache");
    let featurize = || {
        let out = bin()
            .env("ACOUSTICPOSE_CACHE", &cache)
            .env("RUST_LOG", "info")
            .args(["featurize", "--config", s(&cfg), "--data", s(&data)])
            .output()
            .unwrap();
        assert!(out.status.success());
        (String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
    };
    let (first, _) = featurize();
    assert!(first.trim().starts_with(s(&cache)));
    let (second, log) = featurize();
    assert_eq!(first, second);
    assert!(log.contains("reusing cached features"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(tmp.path())]);
    let err: f64 = out.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-4);
    assert!(tmp.path().join("gradcheck.json").is_file());
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(run(&["gradcheck", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
    let missing = run(&["featurize", "--data", s(&tmp.path().join("nowhere"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn pca_study_writes_points() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("study.toml");
    fs::write(&cfg, "[features]\nbins = 16\n[model]\nbins = 16\npost_strides = [2, 2]\n").unwrap();
    let out = tmp.path().join("study");
    let line = ok(&["pca-study", "--config", s(&cfg), "--out", s(&out)]);
    assert!(line.starts_with("silhouette chirp"));
    for cond in ["chirp", "music"] {
        let csv = fs::read_to_string(out.join(cond).join("pca_points.csv")).unwrap();
        assert!(csv.starts_with("x,y,cluster"));
        assert_eq!(csv.lines().count(), 61);
        assert!(out.join(cond).join("pca.svg").is_file());
    }
    assert!(out.join("study.json").is_file());
}
