use std::fs;
use std::path::{Path, PathBuf};

use acousticpose_core::config::SNAPSHOT_FILE;
use acousticpose_core::eval::{baseline_report, evaluate, mean_pose, stack_poses, MetricReport};
use acousticpose_core::model::{gradcheck_total_loss, Model, ModelConfig};
use acousticpose_core::pipeline::{featurize_dataset, FeatureIndex};
use acousticpose_core::signal::Dtype;
use acousticpose_core::sim::{build_dataset, BgmEntry, BgmSpec, Manifest, SplitTag, MANIFEST_FILE};
use acousticpose_core::study::{separability_study, StudyConfig};
use acousticpose_core::train::{fit, init_head_bias, Checkpoint, TrainSet};
use acousticpose_core::{Error, RunConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{BgmKindArg, CheckpointArg, Global};

pub const CACHE_ENV: &str = "ACOUSTICPOSE_CACHE";
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::Numerical(_) => Failure::Numerical(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = match g.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn require_out<'a>(g: &'a Global, cmd: &str) -> Result<&'a Path, Failure> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::Config(format!("{cmd} needs --out")))
}

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_out(dir: &Path, force: bool) -> CmdResult {
    if is_non_empty(dir) && !force {
        return Err(Failure::Config(format!(
            "{} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

pub fn simulate(g: &Global, kind: BgmKindArg) -> CmdResult {
    let mut cfg = load_config(g)?;
    if kind == BgmKindArg::Chirp {
        cfg.bgm = vec![BgmEntry {
            id: "chirp".into(),
            spec: BgmSpec::chirp(StudyConfig::default().chirp_period_s),
        }];
        cfg.dataset.split.held_out_music.clear();
        cfg.dataset.split.held_out_genre.clear();
    }
    cfg.validate()?;
    let out = require_out(g, "simulate")?;
    prepare_out(out, g.force)?;
    let manifest = build_dataset(&cfg.dataset_config(), out)?;
    cfg.write_snapshot(out)?;
    let path = out.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| io_failure(&path, e))?;
    let hash = sha256_hex(&[&bytes]);
    let hash_path = out.join("manifest.sha256");
    fs::write(&hash_path, format!("{hash}\n")).map_err(|e| io_failure(&hash_path, e))?;
    info!("{} records written to {}", manifest.records.len(), out.display());
    println!("{hash}");
    Ok(())
}

fn feature_dtype(g: &Global) -> Dtype {
    if g.f64 {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

pub fn featurize(g: &Global, data: &Path) -> CmdResult {
    let cfg = load_config(g)?;
    let manifest_path = data.join(MANIFEST_FILE);
    let manifest_bytes = fs::read(&manifest_path).map_err(|e| io_failure(&manifest_path, e))?;
    let manifest = Manifest::load(data)?;
    let out = match (&g.out, std::env::var_os(CACHE_ENV)) {
        (Some(o), _) => o.clone(),
        (None, Some(cache)) => {
            let features = serde_json::to_vec(&cfg.features).map_err(Error::from)?;
            let key = sha256_hex(&[
                &manifest_bytes,
                &features,
                format!("{:?}{}", cfg.eval.split_kind, g.f64).as_bytes(),
            ]);
            let dir = PathBuf::from(cache).join(format!("features-{}", &key[..16]));
            if dir.join("index.json").is_file() && !g.force {
                info!("reusing cached features");
                println!("{}", dir.display());
                return report_failures(&FeatureIndex::load(&dir)?, &manifest);
            }
            dir
        }
        (None, None) => data.join("features"),
    };
    prepare_out(&out, g.force)?;
    let set = featurize_dataset(data, &manifest, &cfg.features, cfg.eval.split_kind)?;
    let n = set.save(&out, feature_dtype(g))?;
    cfg.write_snapshot(&out)?;
    info!("{n} windows from {} clips", set.clips.len());
    println!("{}", out.display());
    report_failures(&FeatureIndex::load(&out)?, &manifest)
}

fn report_failures(index: &FeatureIndex, manifest: &Manifest) -> CmdResult {
    if index.failures.is_empty() {
        return Ok(());
    }
    for f in &index.failures {
        eprintln!("failed: {}: {}", f.id, f.error);
    }
    Err(Failure::Data(format!(
        "{} of {} records could not be featurized",
        index.failures.len(),
        manifest.records.len()
    )))
}

/// Where a run's windows came from, so `eval` can find them again.
#[derive(Debug, Serialize, Deserialize)]
struct RunInfo {
    features: PathBuf,
}

const RUN_INFO: &str = "run.json";

fn check_features(cfg: &RunConfig, index: &FeatureIndex, dir: &Path) -> CmdResult {
    if index.config != cfg.features {
        return Err(Failure::Config(format!(
            "features in {} were computed with a different [features] section",
            dir.display()
        )));
    }
    if index.split_kind != cfg.eval.split_kind {
        return Err(Failure::Config(format!(
            "features in {} follow the {:?} split but the config asks for {:?}",
            dir.display(),
            index.split_kind,
            cfg.eval.split_kind
        )));
    }
    Ok(())
}

pub fn train(g: &Global, features: &Path, epochs: Option<usize>, resume: bool) -> CmdResult {
    let out = require_out(g, "train")?;
    let snapshot = out.join(SNAPSHOT_FILE);
    let mut cfg = if resume && g.config.is_none() {
        let c = RunConfig::load(&snapshot)?;
        match g.seed {
            Some(s) => c.with_seed(s),
            None => c,
        }
    } else {
        load_config(g)?
    };
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let index = FeatureIndex::load(features)?;
    check_features(&cfg, &index, features)?;
    let set = TrainSet::load(features)?;
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.seed)?;
    let ckpt = if resume {
        if RunConfig::load(&snapshot)? != cfg {
            return Err(Failure::Config(format!(
                "{} was trained with a different configuration",
                out.display()
            )));
        }
        let dir = ["last", "initial"]
            .iter()
            .map(|d| out.join(d))
            .find(|d| d.is_dir())
            .ok_or_else(|| Failure::Data(format!("no checkpoint to resume in {}", out.display())))?;
        info!("resuming from {}", dir.display());
        Checkpoint::load(&dir)?
    } else {
        prepare_out(out, g.force)?;
        if cfg.train.init_head_bias_to_mean {
            init_head_bias(&model, &mut store, &set.train)?;
        }
        cfg.write_snapshot(out)?;
        Checkpoint::fresh(store, &cfg.train)
    };
    let features = fs::canonicalize(features).map_err(|e| io_failure(features, e))?;
    write_json(&out.join(RUN_INFO), &RunInfo { features })?;
    info!(
        "{} training / {} validation windows, {} parameters",
        set.train.len(),
        set.val.len(),
        ckpt.params.numel()
    );
    let report = fit(&model, ckpt, &set, &cfg.train, Some(out))?;
    for w in &report.warnings {
        warn!("{w}");
    }
    let p = &report.checkpoint.progress;
    match &report.val {
        Some(v) => println!(
            "epochs {} steps {} val mae {:.5} rmse {:.5} pckh05 {:.4}",
            p.epoch, p.step, v.mae, v.rmse, v.pckh05
        ),
        None => println!("epochs {} steps {}", p.epoch, p.step),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalSummary<'a> {
    checkpoint: &'a str,
    oracle: bool,
    tag: SplitTag,
    model: &'a MetricReport,
    baseline: &'a MetricReport,
}

pub fn eval(g: &Global, run: &Path, features: Option<&Path>, which: CheckpointArg, oracle: bool) -> CmdResult {
    let mut cfg = RunConfig::load(&run.join(SNAPSHOT_FILE))?;
    if g.config.is_some() {
        cfg.eval = load_config(g)?.eval;
    }
    let features = match features {
        Some(f) => f.to_path_buf(),
        None => {
            let path = run.join(RUN_INFO);
            let bytes = fs::read(&path).map_err(|e| io_failure(&path, e))?;
            let info: RunInfo = serde_json::from_slice(&bytes).map_err(Error::from)?;
            info.features
        }
    };
    let index = FeatureIndex::load(&features)?;
    check_features(&cfg, &index, &features)?;
    let (windows, _) = index.load_split(&features, cfg.eval.tag)?;
    if windows.is_empty() {
        return Err(Failure::Data(format!("no {:?} windows in {}", cfg.eval.tag, features.display())));
    }
    let report = if oracle {
        let truth = stack_poses(&windows)?;
        MetricReport::compute(&truth, &truth)?
    } else {
        let (model, _) = Model::new(cfg.model.clone(), cfg.seed)?;
        let ckpt = Checkpoint::load(&run.join(which.dir_name()))?;
        evaluate(&model, &ckpt.ema, &windows, cfg.eval.batch)?
    };
    let (train, _) = index.load_split(&features, SplitTag::Train)?;
    let baseline = baseline_report(&mean_pose(&train)?, &windows)?;
    let out = g.out.clone().unwrap_or_else(|| run.join(format!("eval_{}", which.dir_name())));
    fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
    report.write(&out)?;
    baseline.write(&out.join("baseline"))?;
    cfg.write_snapshot(&out)?;
    let summary = EvalSummary {
        checkpoint: which.dir_name(),
        oracle,
        tag: cfg.eval.tag,
        model: &report,
        baseline: &baseline,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} windows: rmse {:.5} mae {:.5} mpjpe {:.5} pckh05 {:.4} (mean-pose baseline mae {:.5})",
        report.windows, report.rmse, report.mae, report.mpjpe, report.pckh05, baseline.mae
    );
    Ok(())
}

pub fn gradcheck(g: &Global) -> CmdResult {
    let cfg = load_config(g)?;
    let err = gradcheck_total_loss(&ModelConfig::tiny(), cfg.seed)?;
    println!("max relative error {err:.3e}");
    if let Some(out) = &g.out {
        fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
        cfg.write_snapshot(out)?;
        write_json(&out.join("gradcheck.json"), &serde_json::json!({ "max_relative_error": err }))?;
    }
    if err >= GRADCHECK_TOLERANCE {
        return Err(Failure::Numerical(format!(
            "gradient mismatch {err:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

pub fn pca_study(g: &Global) -> CmdResult {
    let cfg = load_config(g)?;
    let out = require_out(g, "pca-study")?;
    let base = StudyConfig::default();
    let study = StudyConfig {
        scene: cfg.scene.clone(),
        features: cfg.features.clone(),
        snr_db: cfg.dataset.snr_db.unwrap_or(base.snr_db),
        seed: cfg.seed,
        ..base
    };
    prepare_out(out, g.force)?;
    let report = separability_study(&study)?;
    for (name, r) in [("chirp", &report.chirp), ("music", &report.music)] {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        r.write_points(&dir.join("pca_points.csv"))?;
        if cfg.eval.svg {
            let title = format!("{name}: silhouette {:.3}", r.silhouette);
            let path = dir.join("pca.svg");
            fs::write(&path, r.to_svg(&title)).map_err(|e| io_failure(&path, e))?;
        }
    }
    write_json(&out.join("study.json"), &report)?;
    cfg.write_snapshot(out)?;
    println!(
        "silhouette chirp {:.4} music {:.4}",
        report.chirp.silhouette, report.music.silhouette
    );
    Ok(())
}
