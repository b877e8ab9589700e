//! Dataset records to network-ready windows: log-mel and intensity
//! extraction, frozen training statistics, difference features, and
//! fixed-length time windows aligned with the pose frames.

use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::signal::{
    assemble_input, difference_features, intensity_vector, log_mel, read_feature, resample, standardize_channels,
    time_window, write_feature, ChannelStats, Dtype, FeatureMeta, IntensityFeature, IntensityNorm, LogMelSpectrogram,
    BFormatClip, MelFilterBank, MonoSignal, StatsAccumulator, StereoClip, StftParams, StftProcessor, DEFAULT_SAMPLE_RATE, INPUT_CHANNELS,
    LOG_FLOOR,
};
use crate::sim::{
    load_record, BgmKind, DatasetRecord, Manifest, ManifestRecord, Motion, PoseSequence, SplitKind, SplitTag,
    COORDS_PER_FRAME,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub stft: StftParams,
    pub bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub floor_eps: f64,
    pub intensity_norm: IntensityNorm,
    /// Frames per training window.
    pub window: usize,
    /// Frames between consecutive window starts.
    pub stride: usize,
    /// Standardize each clip with its own statistics instead of the frozen
    /// training-split statistics.
    pub per_clip_standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            stft: StftParams::default(),
            bins: 128,
            f_min: 20.0,
            f_max: 24_000.0,
            floor_eps: LOG_FLOOR,
            intensity_norm: IntensityNorm::L2,
            window: 12,
            stride: 12,
            per_clip_standardize: false,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.bins == 0 || self.window < 2 || self.stride == 0 {
            return Err(Error::Config("features need bins > 0, window >= 2 and stride > 0".into()));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!("mel range {}..{} Hz", self.f_min, self.f_max)));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stft.hop as f64
    }

    pub fn mel_bank(&self) -> Result<MelFilterBank> {
        MelFilterBank::new(self.bins, self.stft.n_fft, self.sample_rate, self.f_min, self.f_max)
    }
}

/// Unstandardized spectral features of one clip.
#[derive(Debug, Clone)]
pub struct RawFeatures {
    /// `[4 × b × T]`
    pub recorded: Tensor,
    /// `[2 × b × T]`
    pub music: Tensor,
    pub intensity: IntensityFeature,
}

/// Frozen per-channel statistics for recorded and music log-mels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub recorded: ChannelStats,
    pub music: ChannelStats,
}

impl FeatureStats {
    pub fn from_raw<'a>(raws: impl IntoIterator<Item = &'a RawFeatures>) -> Result<Self> {
        let (mut r, mut m) = (StatsAccumulator::new(4), StatsAccumulator::new(2));
        let mut any = false;
        for raw in raws {
            r.push(&raw.recorded)?;
            m.push(&raw.music)?;
            any = true;
        }
        if !any {
            return Err(Error::EmptyInput("no clips to compute feature statistics".into()));
        }
        Ok(Self {
            recorded: r.finish(),
            music: m.finish(),
        })
    }
}

/// Reusable STFT plan and mel bank.
#[derive(Debug)]
pub struct Featurizer {
    pub cfg: FeatureConfig,
    stft: StftProcessor,
    bank: MelFilterBank,
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            stft: StftProcessor::new(cfg.stft)?,
            bank: cfg.mel_bank()?,
            cfg,
        })
    }

    fn at_rate(&self, s: &MonoSignal) -> Result<MonoSignal> {
        if s.sample_rate == self.cfg.sample_rate {
            Ok(s.clone())
        } else {
            resample(s, self.cfg.sample_rate)
        }
    }

    fn log_mels(&self, channels: &[&MonoSignal]) -> Result<(Tensor, Vec<crate::signal::StftGrid>)> {
        let grids = channels
            .iter()
            .map(|c| self.stft.process(&self.at_rate(c)?))
            .collect::<Result<Vec<_>>>()?;
        let mels = grids
            .iter()
            .map(|g| log_mel(g, &self.bank, self.cfg.floor_eps))
            .collect::<Result<Vec<_>>>()?;
        Ok((LogMelSpectrogram::stack(&mels)?.values, grids))
    }

    /// Unstandardized features of any recording/music pair.
    pub fn raw_clip(&self, recorded: &BFormatClip, music: &StereoClip) -> Result<RawFeatures> {
        let (recorded, g) = self.log_mels(&recorded.channels())?;
        let (music, _) = self.log_mels(&music.channels())?;
        let intensity = intensity_vector(&g[0], &g[1], &g[2], &g[3], &self.bank, self.cfg.intensity_norm)?;
        Ok(RawFeatures {
            recorded,
            music,
            intensity,
        })
    }

    pub fn raw(&self, rec: &DatasetRecord) -> Result<RawFeatures> {
        let raw = self.raw_clip(&rec.recorded, &rec.music)?;
        let frames = raw.recorded.shape()[2];
        if frames != rec.poses.len() {
            return Err(Error::Alignment(format!(
                "{}: {frames} spectrogram frames for {} pose frames",
                rec.id,
                rec.poses.len()
            )));
        }
        Ok(raw)
    }

    /// Standardized network input `[11 × b × T]` and music features `[2 × b × T]`.
    pub fn finalize(&self, raw: &RawFeatures, stats: &FeatureStats) -> Result<(Tensor, Tensor)> {
        let own;
        let stats = if self.cfg.per_clip_standardize {
            own = FeatureStats::from_raw([raw])?;
            &own
        } else {
            stats
        };
        let s = standardize_channels(&raw.recorded, &stats.recorded)?;
        let m = standardize_channels(&raw.music, &stats.music)?;
        let plane = m.numel() / 2;
        let (b, t) = (m.shape()[1], m.shape()[2]);
        let split = |i: usize| LogMelSpectrogram {
            values: Tensor::new(&[1, b, t], m.data()[i * plane..(i + 1) * plane].to_vec()).expect("music channel"),
        };
        let diffs = difference_features(&LogMelSpectrogram { values: s }, &split(0), &split(1))?;
        let input = assemble_input(&raw.intensity, &diffs)?;
        Ok((input.values, m))
    }
}

/// All features of one clip, standardized.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub id: String,
    pub bgm_id: String,
    pub bgm_kind: BgmKind,
    pub motion: Motion,
    pub split: SplitTag,
    /// `[11 × b × T]`
    pub input: Tensor,
    /// `[2 × b × T]`
    pub music: Tensor,
    pub poses: PoseSequence,
}

impl ClipFeatures {
    pub fn frames(&self) -> usize {
        self.input.shape()[2]
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone)]
pub struct Window {
    pub clip: usize,
    pub start: usize,
    /// `[11 × b × T]`
    pub x: Tensor,
    /// `[2 × b × T]`
    pub m: Tensor,
    /// `[T × 63]`
    pub pose: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

/// Featurized dataset under one split assignment.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub cfg: FeatureConfig,
    pub split_kind: SplitKind,
    pub stats: FeatureStats,
    pub clips: Vec<ClipFeatures>,
    pub failures: Vec<Failure>,
}

fn window_starts(frames: usize, window: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..).map(move |k| k * stride).take_while(move |s| s + window <= frames)
}

impl FeatureSet {
    pub fn bins(&self) -> usize {
        self.cfg.bins
    }

    /// Indices of clips tagged `tag`.
    pub fn clips_in(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.clips.len()).filter(|&i| self.clips[i].split == tag).collect()
    }

    pub fn windows_of(&self, clip: usize) -> Result<Vec<Window>> {
        let c = &self.clips[clip];
        window_starts(c.frames(), self.cfg.window, self.cfg.stride)
            .map(|start| {
                Ok(Window {
                    clip,
                    start,
                    x: time_window(&c.input, start, self.cfg.window)?,
                    m: time_window(&c.music, start, self.cfg.window)?,
                    pose: c.poses.window(start, self.cfg.window)?,
                })
            })
            .collect()
    }

    pub fn windows(&self, tag: SplitTag) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for i in self.clips_in(tag) {
            out.extend(self.windows_of(i)?);
        }
        Ok(out)
    }

    /// Writes one feature file per window plus `index.json`.
    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<usize> {
        let wdir = dir.join("windows");
        fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
        let mut index = Vec::new();
        for (ci, c) in self.clips.iter().enumerate() {
            for w in self.windows_of(ci)? {
                let stem = format!("{}_{:05}", c.id, w.start);
                write_feature(&wdir.join(format!("{stem}.bin")), &w.x, FeatureMeta::input_layout(), self.cfg.stft, dtype)?;
                write_feature(
                    &wdir.join(format!("{stem}_music.bin")),
                    &w.m,
                    vec!["music_left".into(), "music_right".into()],
                    self.cfg.stft,
                    dtype,
                )?;
                let pose_layout = vec!["pose".into()];
                write_feature(&wdir.join(format!("{stem}_pose.bin")), &w.pose, pose_layout, self.cfg.stft, dtype)?;
                index.push(WindowIndex {
                    record: c.id.clone(),
                    bgm_id: c.bgm_id.clone(),
                    split: c.split,
                    start: w.start,
                    input: format!("windows/{stem}.bin"),
                    music: format!("windows/{stem}_music.bin"),
                    pose: format!("windows/{stem}_pose.bin"),
                });
            }
        }
        let n = index.len();
        let summary = FeatureIndex {
            config: self.cfg.clone(),
            split_kind: self.split_kind,
            stats: self.stats.clone(),
            windows: index,
            failures: self.failures.clone(),
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
        Ok(n)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowIndex {
    pub record: String,
    pub bgm_id: String,
    pub split: SplitTag,
    pub start: usize,
    pub input: String,
    pub music: String,
    pub pose: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureIndex {
    pub config: FeatureConfig,
    pub split_kind: SplitKind,
    pub stats: FeatureStats,
    pub windows: Vec<WindowIndex>,
    pub failures: Vec<Failure>,
}

impl FeatureIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        Ok(serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?)
    }

    /// Reads window `i` back as `(x, m, pose)`.
    pub fn read_window(&self, dir: &Path, i: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let w = &self.windows[i];
        let (x, _) = read_feature(&dir.join(&w.input))?;
        let (m, _) = read_feature(&dir.join(&w.music))?;
        let (p, _) = read_feature(&dir.join(&w.pose))?;
        if p.shape().get(1) != Some(&COORDS_PER_FRAME) || x.shape()[0] != INPUT_CHANNELS {
            return Err(Error::Data(format!("window {i} has unexpected shape")));
        }
        Ok((x, m, p))
    }

    /// Windows tagged `tag` with the music id of each, in index order.
    pub fn load_split(&self, dir: &Path, tag: SplitTag) -> Result<(Vec<Window>, Vec<String>)> {
        let mut records: Vec<&str> = Vec::new();
        let mut windows = Vec::new();
        let mut groups = Vec::new();
        for (i, w) in self.windows.iter().enumerate() {
            let clip = match records.iter().position(|r| *r == w.record) {
                Some(k) => k,
                None => {
                    records.push(&w.record);
                    records.len() - 1
                }
            };
            if w.split != tag {
                continue;
            }
            let (x, m, pose) = self.read_window(dir, i)?;
            windows.push(Window {
                clip,
                start: w.start,
                x,
                m,
                pose,
            });
            groups.push(w.bgm_id.clone());
        }
        Ok((windows, groups))
    }
}

/// Loads and featurizes every record of `manifest`; statistics come from the
/// training records of `split_kind`. Records that fail to load are skipped
/// and listed in `failures`.
pub fn featurize_dataset(dir: &Path, manifest: &Manifest, cfg: &FeatureConfig, split_kind: SplitKind) -> Result<FeatureSet> {
    let fz = Featurizer::new(cfg.clone())?;
    let results: Vec<(&ManifestRecord, Result<(RawFeatures, PoseSequence)>)> = manifest
        .records
        .par_iter()
        .map(|r| {
            let res = load_record(dir, r).and_then(|rec| Ok((fz.raw(&rec)?, rec.poses)));
            (r, res)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results {
        match res {
            Ok(v) => ok.push((r, v)),
            Err(e) => {
                warn!("skipping record {}: {e}", r.id);
                failures.push(Failure {
                    id: r.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let stats = FeatureStats::from_raw(
        ok.iter()
            .filter(|(r, _)| r.split(split_kind) == SplitTag::Train)
            .map(|(_, (raw, _))| raw),
    )?;
    let clips = ok
        .into_iter()
        .map(|(r, (raw, poses))| {
            let (input, music) = fz.finalize(&raw, &stats)?;
            Ok(ClipFeatures {
                id: r.id.clone(),
                bgm_id: r.bgm_id.clone(),
                bgm_kind: r.bgm_kind,
                motion: r.motion,
                split: r.split(split_kind),
                input,
                music,
                poses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        cfg: cfg.clone(),
        split_kind,
        stats,
        clips,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_dataset, DatasetConfig};

    #[test]
    fn window_count_for_a_minute() {
        assert_eq!(window_starts(1200, 12, 12).count(), 100);
        assert_eq!(window_starts(30, 12, 6).collect::<Vec<_>>(), vec![0, 6, 12, 18]);
        assert_eq!(window_starts(11, 12, 12).count(), 0);
    }

    #[test]
    fn featurizes_simulated_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let dcfg = DatasetConfig {
            motions: vec![Motion::Still, Motion::Walk],
            clips_per_combo: 2,
            clip_duration_s: 1.2,
            ..DatasetConfig::default()
        };
        let manifest = build_dataset(&dcfg, dir.path()).unwrap();
        // break one record
        fs::write(dir.path().join(&manifest.records[1].files.recorded), b"junk").unwrap();
        let cfg = FeatureConfig {
            bins: 32,
            ..FeatureConfig::default()
        };
        let fs_ = featurize_dataset(dir.path(), &manifest, &cfg, SplitKind::SingleMusic).unwrap();
        assert_eq!(fs_.failures.len(), 1);
        assert_eq!(fs_.clips.len(), manifest.records.len() - 1);
        let w = fs_.windows_of(0).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].x.shape(), &[11, 32, 12]);
        assert_eq!(w[0].m.shape(), &[2, 32, 12]);
        assert_eq!(w[0].pose.shape(), &[12, 63]);
        assert!(w[0].x.is_finite());

        let out = tempfile::tempdir().unwrap();
        let n = fs_.save(out.path(), Dtype::F32).unwrap();
        let idx = FeatureIndex::load(out.path()).unwrap();
        assert_eq!(idx.windows.len(), n);
        let (x, m, p) = idx.read_window(out.path(), 0).unwrap();
        assert_eq!(x.shape(), &[11, 32, 12]);
        assert!(x.max_abs_diff(&w[0].x) < 1e-5 * (1.0 + w[0].x.l2_norm()));
        assert_eq!(m.shape(), &[2, 32, 12]);
        assert_eq!(p.shape(), &[12, 63]);
    }

    #[test]
    fn f64_windows_reload_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let dcfg = DatasetConfig {
            motions: vec![Motion::Walk],
            clips_per_combo: 4,
            clip_duration_s: 1.2,
            ..DatasetConfig::default()
        };
        let manifest = build_dataset(&dcfg, dir.path()).unwrap();
        let cfg = FeatureConfig {
            bins: 16,
            ..FeatureConfig::default()
        };
        let fs_ = featurize_dataset(dir.path(), &manifest, &cfg, SplitKind::CrossMusic).unwrap();
        let out = tempfile::tempdir().unwrap();
        fs_.save(out.path(), Dtype::F64).unwrap();
        let idx = FeatureIndex::load(out.path()).unwrap();
        for tag in [SplitTag::Train, SplitTag::Test] {
            let (loaded, groups) = idx.load_split(out.path(), tag).unwrap();
            let direct = fs_.windows(tag).unwrap();
            assert!(!direct.is_empty());
            assert_eq!(loaded.len(), direct.len());
            for ((a, b), g) in loaded.iter().zip(&direct).zip(&groups) {
                assert_eq!(a.x, b.x);
                assert_eq!(a.m, b.m);
                assert_eq!(a.pose, b.pose);
                assert_eq!(a.start, b.start);
                assert_eq!(g, &fs_.clips[b.clip].bgm_id);
            }
        }
    }

    #[test]
    fn training_stats_standardize_training_clips() {
        let dir = tempfile::tempdir().unwrap();
        let dcfg = DatasetConfig {
            motions: vec![Motion::Squat],
            clips_per_combo: 3,
            clip_duration_s: 0.6,
            ..DatasetConfig::default()
        };
        let manifest = build_dataset(&dcfg, dir.path()).unwrap();
        let cfg = FeatureConfig {
            bins: 16,
            ..FeatureConfig::default()
        };
        let fs_ = featurize_dataset(dir.path(), &manifest, &cfg, SplitKind::CrossMusic).unwrap();
        let mut acc = StatsAccumulator::new(2);
        for i in fs_.clips_in(SplitTag::Train) {
            acc.push(&fs_.clips[i].music).unwrap();
        }
        let s = acc.finish();
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-9);
            assert!((s.std[c] - 1.0).abs() < 1e-9);
        }
    }
}
