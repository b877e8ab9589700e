//! Optimization harness: hard-negative batching by sensing music, Adam with
//! cosine annealing, parameter EMA, checkpointing and the epoch loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_tensors, save_tensors, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{csv_err, evaluate, mean_pose, MetricReport};
use crate::model::{LossWeights, Model};
use crate::pipeline::{FeatureIndex, FeatureSet, Window};
use crate::sim::SplitTag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1+k)/(10+k))` over the first steps.
    pub ema_warmup: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub w_alpha: f64,
    pub w_beta: f64,
    pub tau: f64,
    /// Windows of the same music drawn together into a batch.
    pub group_size: usize,
    /// Save `epoch_<k>` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Start the output bias at the mean training pose.
    pub init_head_bias_to_mean: bool,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            batch_size: 64,
            epochs: 30,
            lr_max: 0.003,
            lr_min: 0.001,
            ema_decay: 0.999,
            ema_warmup: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            w_alpha: w.w_alpha,
            w_beta: w.w_beta,
            tau: w.tau,
            group_size: 4,
            checkpoint_every: 0,
            init_head_bias_to_mean: true,
            eval_batch: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_alpha: self.w_alpha,
            w_beta: self.w_beta,
            tau: self.tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        if !(self.lr_max >= self.lr_min && self.lr_min > 0.0) {
            return Err(Error::Config(format!("need lr_max >= lr_min > 0, got {} / {}", self.lr_max, self.lr_min)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Sample indices per optimizer step for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// Set when the plan could not honour the requested batch size.
    pub warning: Option<String>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

fn has_pair(batch: &[usize], groups: &[String]) -> bool {
    let mut seen: Vec<&str> = batch.iter().map(|&i| groups[i].as_str()).collect();
    seen.sort_unstable();
    seen.windows(2).any(|w| w[0] == w[1])
}

/// Shuffled batches in which samples sensed with the same music arrive in
/// runs of `group_size`, so every batch holds same-music negatives.
///
/// `groups[i]` is the music id of sample `i`. Every sample appears exactly
/// once. A batch left without a same-music pair is merged into a neighbour.
pub fn hard_negative_batches(groups: &[String], batch_size: usize, group_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size < 2 || group_size < 1 {
        return Err(Error::Config(format!("batch size {batch_size} / group size {group_size}")));
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if groups.len() <= batch_size {
        let mut all: Vec<usize> = (0..groups.len()).collect();
        all.shuffle(&mut rng);
        let warning = (groups.len() < batch_size)
            .then(|| format!("{} samples is fewer than batch size {batch_size}; using one batch", groups.len()));
        return Ok(BatchPlan {
            batches: vec![all],
            warning,
        });
    }
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    let mut runs = Vec::new();
    for members in by_group.values_mut() {
        members.shuffle(&mut rng);
        runs.extend(members.chunks(group_size).map(|c| c.to_vec()));
    }
    runs.shuffle(&mut rng);
    let order: Vec<usize> = runs.into_iter().flatten().collect();
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();

    let mut i = 0;
    while batches.len() > 1 && i < batches.len() {
        if has_pair(&batches[i], groups) {
            i += 1;
            continue;
        }
        let j = if i + 1 < batches.len() { i + 1 } else { i - 1 };
        let bad = batches.remove(i);
        let j = if j > i { j - 1 } else { j };
        batches[j].extend(bad);
        i = i.min(j);
    }
    Ok(BatchPlan {
        batches,
        warning: None,
    })
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. Non-finite gradients reject the whole step
    /// and leave parameters and moments untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim(format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter {i}; step rejected")));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    shadow.check_compatible(params)?;
    for (s, p) in shadow.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

fn ema_decay_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.ema_warmup {
        cfg.ema_decay.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        cfg.ema_decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam: Adam,
    pub progress: Progress,
}

const STATE_FILE: &str = "state.json";

#[derive(Serialize, Deserialize)]
struct StateFile {
    progress: Progress,
    adam_t: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

impl Checkpoint {
    pub fn fresh(params: ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(&params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            ema: params.clone(),
            params,
            progress: Progress {
                epoch: 0,
                step: 0,
                best_val_mae: None,
                best_epoch: None,
            },
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("params.bin"))?;
        self.ema.save(&dir.join("ema.bin"))?;
        let names = self.params.names();
        save_tensors(&dir.join("adam_m.bin"), names.iter().map(String::as_str).zip(&self.adam.m))?;
        save_tensors(&dir.join("adam_v.bin"), names.iter().map(String::as_str).zip(&self.adam.v))?;
        let state = StateFile {
            progress: self.progress.clone(),
            adam_t: self.adam.t,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = ParamStore::load(&dir.join("params.bin"))?;
        let ema = ParamStore::load(&dir.join("ema.bin"))?;
        ema.check_compatible(&params)?;
        let moments = |file: &str| -> Result<Vec<Tensor>> {
            let loaded = load_tensors(&dir.join(file))?;
            if loaded.len() != params.len() || loaded.iter().zip(params.iter()).any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape()) {
                return Err(Error::Checkpoint(format!("{file} does not match the parameters")));
            }
            Ok(loaded.into_iter().map(|(_, t)| t).collect())
        };
        let path = dir.join(STATE_FILE);
        let state: StateFile = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        Ok(Self {
            adam: Adam {
                beta1: state.adam_beta1,
                beta2: state.adam_beta2,
                eps: state.adam_eps,
                m: moments("adam_m.bin")?,
                v: moments("adam_v.bin")?,
                t: state.adam_t,
            },
            params,
            ema,
            progress: state.progress,
        })
    }
}

/// Sets the output bias to the per-coordinate mean of `windows`' poses.
pub fn init_head_bias(model: &Model, store: &mut ParamStore, windows: &[Window]) -> Result<()> {
    let mean = mean_pose(windows)?;
    let (_, b) = model.output_layer();
    let bias = store.get_mut(b);
    let c = bias.numel();
    if mean.shape()[1] != c {
        return Err(Error::dim(format!("mean pose has {} coordinates, head emits {c}", mean.shape()[1])));
    }
    bias.data_mut().copy_from_slice(&mean.data()[..c]);
    Ok(())
}

/// Training windows with their music ids plus an optional validation set.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub train: Vec<Window>,
    pub groups: Vec<String>,
    pub val: Vec<Window>,
}

impl TrainSet {
    /// Train and validation windows of `fs` under its split assignment.
    pub fn from_features(fs: &FeatureSet) -> Result<Self> {
        let train = fs.windows(SplitTag::Train)?;
        let groups = train.iter().map(|w| fs.clips[w.clip].bgm_id.clone()).collect();
        Ok(Self {
            train,
            groups,
            val: fs.windows(SplitTag::Val)?,
        })
    }

    /// Same as [`TrainSet::from_features`] for a directory written by
    /// [`FeatureSet::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let index = FeatureIndex::load(dir)?;
        let (train, groups) = index.load_split(dir, SplitTag::Train)?;
        let (val, _) = index.load_split(dir, SplitTag::Val)?;
        Ok(Self { train, groups, val })
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::EmptyInput("training split is empty".into()));
        }
        if self.groups.len() != self.train.len() {
            return Err(Error::dim("one music id per training window"));
        }
        Ok(())
    }
}

/// One row of the append-only metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub kind: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub l_pose: f64,
    pub l_smooth: f64,
    pub l_cpe: f64,
    pub l_total: f64,
    pub val_rmse: Option<f64>,
    pub val_mae: Option<f64>,
    pub val_pckh05: Option<f64>,
}

struct Log {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Log {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub checkpoint: Checkpoint,
    /// Validation metrics of the EMA weights after the last epoch.
    pub val: Option<MetricReport>,
    pub log: Vec<LogRow>,
    pub warnings: Vec<String>,
}

fn stack(windows: &[&Window], f: impl Fn(&Window) -> &Tensor) -> Result<Tensor> {
    Tensor::stack(&windows.iter().map(|w| f(w).clone()).collect::<Vec<_>>())
}

/// Losses and parameter gradients of one batch.
pub fn batch_gradients(model: &Model, store: &ParamStore, batch: &[&Window], w: &LossWeights) -> Result<([f64; 4], Vec<Tensor>)> {
    let mut t = Tape::with_params(store);
    let p = Model::bind(&t, store);
    let x = t.constant(stack(batch, |w| &w.x)?);
    let m = t.constant(stack(batch, |w| &w.m)?);
    let truth = t.constant(stack(batch, |w| &w.pose)?);
    let (l, _) = model.losses(&mut t, &p, x, m, truth, w)?;
    let terms = [l.pose, l.smooth, l.cpe, l.total].map(|v| t.value(v).item());
    let grads = t.backward(l.total)?.param_grads(store);
    Ok((terms, grads))
}

fn plans(set: &TrainSet, cfg: &TrainConfig) -> Result<Vec<BatchPlan>> {
    (0..cfg.epochs)
        .map(|e| hard_negative_batches(&set.groups, cfg.batch_size, cfg.group_size, cfg.seed.wrapping_mul(1_000_003).wrapping_add(e as u64)))
        .collect()
}

/// Runs epochs `ckpt.progress.epoch..cfg.epochs`.
///
/// With `out`, appends to `out/train_log.csv` and writes `last/`, `best/`
/// and periodic `epoch_<k>/` checkpoints; a non-finite loss or gradient
/// saves `diverged/` and returns a numerical error.
pub fn fit(model: &Model, ckpt: Checkpoint, set: &TrainSet, cfg: &TrainConfig, out: Option<&Path>) -> Result<FitReport> {
    fit_until(model, ckpt, set, cfg, out, cfg.epochs)
}

/// Like [`fit`] but stops after epoch `stop` while keeping the schedule of
/// the full `cfg.epochs` run, so a later call can resume from `last/`.
pub fn fit_until(model: &Model, mut ckpt: Checkpoint, set: &TrainSet, cfg: &TrainConfig, out: Option<&Path>, stop: usize) -> Result<FitReport> {
    cfg.validate()?;
    set.validate()?;
    ckpt.params.check_compatible(&ckpt.ema)?;
    let plans = plans(set, cfg)?;
    let total_steps: usize = plans.iter().map(BatchPlan::len).sum();
    let mut warnings: Vec<String> = plans.iter().filter_map(|p| p.warning.clone()).take(1).collect();
    if set.val.is_empty() {
        warnings.push("no validation windows; best checkpoint tracks nothing".into());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(Log::open(&dir.join("train_log.csv"))?)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut emit = |row: LogRow, log: &mut Option<Log>| -> Result<()> {
        if let Some(l) = log.as_mut() {
            l.write(&row)?;
        }
        rows.push(row);
        Ok(())
    };
    if ckpt.progress.epoch == 0 && ckpt.progress.step == 0 {
        if let Some(dir) = out {
            ckpt.save(&dir.join("initial"))?;
        }
    }
    let weights = cfg.weights();
    let mut val = None;
    for epoch in ckpt.progress.epoch..stop.min(cfg.epochs) {
        let mut sums = [0.0; 4];
        let plan = &plans[epoch];
        for batch in &plan.batches {
            let lr = cosine_lr(ckpt.progress.step as usize, total_steps, cfg.lr_max, cfg.lr_min);
            let windows: Vec<&Window> = batch.iter().map(|&i| &set.train[i]).collect();
            let outcome = batch_gradients(model, &ckpt.params, &windows, &weights).and_then(|(terms, grads)| {
                if terms.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite loss {terms:?} at step {}", ckpt.progress.step)));
                }
                ckpt.adam.step(ckpt.params.tensors_mut(), &grads, lr)?;
                Ok(terms)
            });
            let terms = match outcome {
                Ok(t) => t,
                Err(Error::Numerical(msg)) => {
                    if let Some(dir) = out {
                        ckpt.save(&dir.join("diverged"))?;
                    }
                    return Err(Error::Numerical(format!("training diverged in epoch {epoch}: {msg}")));
                }
                Err(e) => return Err(e),
            };
            ema_update(&mut ckpt.ema, &ckpt.params, ema_decay_at(cfg, ckpt.progress.step))?;
            ckpt.progress.step += 1;
            for (s, v) in sums.iter_mut().zip(terms) {
                *s += v;
            }
            emit(
                LogRow {
                    kind: "step".into(),
                    epoch,
                    step: ckpt.progress.step,
                    lr,
                    l_pose: terms[0],
                    l_smooth: terms[1],
                    l_cpe: terms[2],
                    l_total: terms[3],
                    val_rmse: None,
                    val_mae: None,
                    val_pckh05: None,
                },
                &mut log,
            )?;
        }
        ckpt.progress.epoch = epoch + 1;
        let n = plan.len().max(1) as f64;
        val = if set.val.is_empty() {
            None
        } else {
            Some(evaluate(model, &ckpt.ema, &set.val, cfg.eval_batch)?)
        };
        let improved = match (&val, ckpt.progress.best_val_mae) {
            (Some(r), Some(best)) => r.mae < best,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            ckpt.progress.best_val_mae = val.as_ref().map(|r| r.mae);
            ckpt.progress.best_epoch = Some(epoch + 1);
        }
        log::info!(
            "epoch {}/{}: loss {:.5} (pose {:.5}) val mae {:?}",
            epoch + 1,
            cfg.epochs,
            sums[3] / n,
            sums[0] / n,
            val.as_ref().map(|r| r.mae)
        );
        emit(
            LogRow {
                kind: "epoch".into(),
                epoch,
                step: ckpt.progress.step,
                lr: cosine_lr(ckpt.progress.step as usize, total_steps, cfg.lr_max, cfg.lr_min),
                l_pose: sums[0] / n,
                l_smooth: sums[1] / n,
                l_cpe: sums[2] / n,
                l_total: sums[3] / n,
                val_rmse: val.as_ref().map(|r| r.rmse),
                val_mae: val.as_ref().map(|r| r.mae),
                val_pckh05: val.as_ref().map(|r| r.pckh05),
            },
            &mut log,
        )?;
        if let Some(dir) = out {
            ckpt.save(&dir.join("last"))?;
            if improved {
                ckpt.save(&dir.join("best"))?;
            }
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                ckpt.save(&dir.join(format!("epoch_{}", epoch + 1)))?;
            }
        }
    }
    Ok(FitReport {
        checkpoint: ckpt,
        val,
        log: rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn groups(spec: &[(&str, usize)]) -> Vec<String> {
        spec.iter().flat_map(|(g, n)| std::iter::repeat(g.to_string()).take(*n)).collect()
    }

    fn assert_partition(plan: &BatchPlan, n: usize) {
        let mut all: Vec<usize> = plan.batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn batches_hold_same_music_pairs() {
        let g = groups(&[("a", 64), ("b", 64)]);
        let plan = hard_negative_batches(&g, 64, 4, 1).unwrap();
        assert_partition(&plan, 128);
        assert!(plan.batches.iter().all(|b| has_pair(b, &g)));
        assert_eq!(plan, hard_negative_batches(&g, 64, 4, 1).unwrap());
        assert_ne!(plan, hard_negative_batches(&g, 64, 4, 2).unwrap());
    }

    #[test]
    fn awkward_group_sizes_still_pair() {
        for seed in 0..20 {
            let g = groups(&[("a", 7), ("b", 5), ("c", 3), ("d", 1), ("e", 2)]);
            let plan = hard_negative_batches(&g, 4, 2, seed).unwrap();
            assert_partition(&plan, g.len());
            assert!(plan.batches.iter().all(|b| has_pair(b, &g)), "seed {seed}: {:?}", plan.batches);
        }
    }

    #[test]
    fn small_dataset_is_one_batch_with_warning() {
        let g = groups(&[("a", 3), ("b", 2)]);
        let plan = hard_negative_batches(&g, 64, 4, 0).unwrap();
        assert_eq!(plan.len(), 1);
        assert!(plan.warning.is_some());
        assert_partition(&plan, 5);
        assert!(hard_negative_batches(&g, 1, 4, 0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.003, 0.001), 0.003);
        assert!((cosine_lr(100, 100, 0.003, 0.001) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.003, 0.001) - 0.002).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 0.003, 0.001);
            assert!(lr <= last);
            last = lr;
        }
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_follows_gradient_sign() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        for _ in 0..50 {
            adam.step(s.tensors_mut(), &[Tensor::new(&[1], vec![2.0]).unwrap()], 0.01).unwrap();
        }
        assert!(s.tensors()[0].item() < 1.0);

        let mut z = scalar_store(1.0);
        let mut adam = Adam::new(&z, 0.9, 0.999, 1e-8);
        adam.step(z.tensors_mut(), &[Tensor::zeros(&[1])], 0.01).unwrap();
        assert_eq!(z.tensors()[0].item(), 1.0);
    }

    #[test]
    fn adam_rejects_nan_without_touching_state() {
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        let before = adam.clone();
        let r = adam.step(s.tensors_mut(), &[Tensor::new(&[1], vec![f64::NAN]).unwrap()], 0.01);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert_eq!(adam, before);
        assert_eq!(s.tensors()[0].item(), 1.0);
    }

    #[test]
    fn adam_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let n = 5;
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_fn(&[n], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        let mut p: Vec<f64> = store.tensors()[0].data().to_vec();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        for step in 1..=10 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lr = 0.003;
            adam.step(store.tensors_mut(), &[Tensor::new(&[n], g.clone()).unwrap()], lr).unwrap();
            for k in 0..n {
                m[k] = 0.9 * m[k] + 0.1 * g[k];
                v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
                let mh = m[k] / (1.0 - 0.9f64.powi(step));
                let vh = v[k] / (1.0 - 0.999f64.powi(step));
                p[k] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for (a, b) in store.tensors()[0].data().iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_limits_and_geometric_convergence() {
        let target = scalar_store(1.0);
        let mut shadow = scalar_store(0.0);
        ema_update(&mut shadow, &target, 1.0).unwrap();
        assert_eq!(shadow.tensors()[0].item(), 0.0);
        ema_update(&mut shadow, &target, 0.0).unwrap();
        assert_eq!(shadow.tensors()[0].item(), 1.0);

        let mut shadow = scalar_store(0.0);
        for k in 1..=100 {
            ema_update(&mut shadow, &target, 0.999).unwrap();
            let expected = 1.0 - 0.999f64.powi(k);
            assert!((shadow.tensors()[0].item() - expected).abs() < 1e-12);
        }
        let mut other = ParamStore::new();
        other.add("y", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(ema_update(&mut shadow, &other, 0.5), Err(Error::Checkpoint(_))));
    }

    fn tiny() -> (Model, ParamStore, TrainSet) {
        let cfg = ModelConfig {
            bins: 8,
            frames: 4,
            d: 4,
            pre_blocks: 1,
            post_strides: vec![2],
            post_channels: 4,
            unet_channels: vec![8, 8],
            head_hidden: 8,
            embed_dim: 8,
            cpe_hidden: 8,
            ..ModelConfig::default()
        };
        let (model, store) = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let mut train = Vec::new();
        let mut groups = Vec::new();
        for i in 0..6 {
            train.push(Window {
                clip: i,
                start: 0,
                x: Tensor::from_fn(&[11, 8, 4], |_| rng.gen_range(-1.0..1.0)),
                m: Tensor::from_fn(&[2, 8, 4], |_| rng.gen_range(-1.0..1.0)),
                pose: Tensor::from_fn(&[4, 63], |_| rng.gen_range(-1.0..1.0)),
            });
            groups.push(if i % 2 == 0 { "a" } else { "b" }.to_string());
        }
        let val = train[..2].to_vec();
        (model, store, TrainSet { train, groups, val })
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            group_size: 2,
            epochs,
            eval_batch: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn logged_total_matches_weighted_sum() {
        let (model, store, set) = tiny();
        let r = fit(&model, Checkpoint::fresh(store, &tiny_cfg(2)), &set, &tiny_cfg(2), None).unwrap();
        assert_eq!(r.log.iter().filter(|l| l.kind == "epoch").count(), 2);
        for row in r.log.iter().filter(|l| l.kind == "step") {
            let sum = row.l_pose + 100.0 * row.l_smooth + row.l_cpe;
            assert!((row.l_total - sum).abs() < 1e-9);
        }
        assert!(r.val.is_some());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (model, store, set) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let full = fit(&model, Checkpoint::fresh(store.clone(), &tiny_cfg(3)), &set, &tiny_cfg(3), None).unwrap();
        fit_until(&model, Checkpoint::fresh(store, &tiny_cfg(3)), &set, &tiny_cfg(3), Some(dir.path()), 1).unwrap();
        let resumed = Checkpoint::load(&dir.path().join("last")).unwrap();
        assert_eq!(resumed.progress.epoch, 1);
        let done = fit(&model, resumed, &set, &tiny_cfg(3), Some(dir.path())).unwrap();
        assert_eq!(done.checkpoint.params.tensors(), full.checkpoint.params.tensors());
        assert_eq!(done.checkpoint.ema.tensors(), full.checkpoint.ema.tensors());
        let rows = read_log(&dir.path().join("train_log.csv")).unwrap();
        assert_eq!(rows.iter().filter(|r| r.kind == "epoch").count(), 3);
        assert!(dir.path().join("initial/params.bin").exists());
        assert!(dir.path().join("best/state.json").exists());
    }

    #[test]
    fn contrastive_weight_changes_training() {
        let (model, store, set) = tiny();
        let with = fit(&model, Checkpoint::fresh(store.clone(), &tiny_cfg(1)), &set, &tiny_cfg(1), None).unwrap();
        let cfg = TrainConfig { w_beta: 0.0, ..tiny_cfg(1) };
        let without = fit(&model, Checkpoint::fresh(store, &cfg), &set, &cfg, None).unwrap();
        assert_ne!(with.checkpoint.params.tensors(), without.checkpoint.params.tensors());
    }

    #[test]
    fn head_bias_starts_at_mean_pose() {
        let (model, mut store, set) = tiny();
        init_head_bias(&model, &mut store, &set.train).unwrap();
        let mean = mean_pose(&set.train).unwrap();
        assert_eq!(store.get(model.output_layer().1).data(), &mean.data()[..63]);
    }

    #[test]
    fn nan_input_saves_diverged_checkpoint() {
        let (model, store, mut set) = tiny();
        set.train[0].x.data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let r = fit(&model, Checkpoint::fresh(store, &tiny_cfg(1)), &set, &tiny_cfg(1), Some(dir.path()));
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert!(dir.path().join("diverged/state.json").exists());
    }
}
