use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bgm::{synth_bgm, BgmKind, BgmSpec};
use super::motion::{gen_pose_sequence, Motion, PoseSequence, POSE_FPS};
use super::noise::add_gaussian_noise;
use super::render::{render_recording, SceneConfig};
use super::skeleton::{COORDS_PER_FRAME, JOINT_NAMES, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav, BFormatClip, MonoSignal, StereoClip, WavFormat};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BgmEntry {
    pub id: String,
    pub spec: BgmSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    SingleMusic,
    CrossMusic,
    CrossGenre,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::SingleMusic, SplitKind::CrossMusic, SplitKind::CrossGenre];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPolicy {
    pub test_fraction: f64,
    pub val_fraction: f64,
    /// BGM ids held out for the cross-music split; empty means the last BGM.
    pub held_out_music: Vec<String>,
    /// BGM kinds held out for the cross-genre split; empty means the kind of
    /// the last BGM, provided another kind remains for training.
    pub held_out_genre: Vec<BgmKind>,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.1,
            held_out_music: Vec::new(),
            held_out_genre: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub bgms: Vec<BgmEntry>,
    pub motions: Vec<Motion>,
    pub clips_per_combo: usize,
    pub clip_duration_s: f64,
    /// Distinct body sizes; clip `k` of a combo uses subject `k % subjects`.
    pub subjects: usize,
    pub snr_db: Option<f64>,
    pub split: SplitPolicy,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            bgms: vec![
                BgmEntry { id: "ambient-a".into(), spec: BgmSpec::ambient(1) },
                BgmEntry { id: "ambient-b".into(), spec: BgmSpec::ambient(2) },
                BgmEntry { id: "jazz-a".into(), spec: BgmSpec::jazz(3) },
            ],
            motions: Motion::ALL.to_vec(),
            clips_per_combo: 4,
            clip_duration_s: 3.0,
            subjects: 2,
            snr_db: None,
            split: SplitPolicy::default(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bgms.is_empty() || self.motions.is_empty() || self.clips_per_combo == 0 {
            return Err(Error::Config("dataset needs at least one bgm, motion and clip".into()));
        }
        if self.subjects == 0 {
            return Err(Error::Config("dataset needs at least one subject".into()));
        }
        let frames = self.clip_duration_s * POSE_FPS;
        if !(frames >= 1.0) || (frames - frames.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "clip duration {} s is not a whole number of pose frames",
                self.clip_duration_s
            )));
        }
        let mut ids: Vec<&str> = self.bgms.iter().map(|b| b.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate bgm id".into()));
        }
        let rate = self.bgms[0].spec.sample_rate;
        if self.bgms.iter().any(|b| b.spec.sample_rate != rate) {
            return Err(Error::Config("all bgms must share one sample rate".into()));
        }
        for id in &self.split.held_out_music {
            if !self.bgms.iter().any(|b| &b.id == id) {
                return Err(Error::Config(format!("held-out bgm {id:?} is not in the dataset")));
            }
        }
        let fr = self.split.test_fraction + self.split.val_fraction;
        if !(0.0..1.0).contains(&fr) || self.split.test_fraction < 0.0 || self.split.val_fraction < 0.0 {
            return Err(Error::Config("split fractions must be non-negative and sum below 1".into()));
        }
        for b in &self.bgms {
            b.spec.validate()?;
        }
        self.scene.validate()
    }

    pub fn frames_per_clip(&self) -> usize {
        (self.clip_duration_s * POSE_FPS).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFiles {
    pub recorded: String,
    pub music: String,
    pub poses: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub bgm_id: String,
    pub bgm_kind: BgmKind,
    pub motion: Motion,
    pub subject: usize,
    pub body_scale: f64,
    pub clip_index: usize,
    /// Offset of this clip within its BGM track.
    pub segment_start_s: f64,
    pub frames: usize,
    pub pose_seed: u64,
    pub snr_db: Option<f64>,
    pub noise_seed: Option<u64>,
    pub splits: BTreeMap<SplitKind, SplitTag>,
    pub files: RecordFiles,
}

impl ManifestRecord {
    pub fn split(&self, kind: SplitKind) -> SplitTag {
        self.splits[&kind]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sample_rate: u32,
    pub fps: f64,
    pub config: DatasetConfig,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn records_in(&self, kind: SplitKind, tag: SplitTag) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split(kind) == tag)
    }

    pub fn bgm_ids(&self) -> Vec<String> {
        self.config.bgms.iter().map(|b| b.id.clone()).collect()
    }
}

/// One clip loaded from disk.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub id: String,
    pub bgm_id: String,
    pub subject: usize,
    pub recorded: BFormatClip,
    pub music: StereoClip,
    pub poses: PoseSequence,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseHeader {
    frames: usize,
    joints: usize,
    coords: usize,
    fps: f64,
    dtype: String,
    joint_names: Vec<String>,
}

pub fn write_poses(path: &Path, poses: &PoseSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(poses.data().len() * 4);
    for v in poses.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = PoseHeader {
        frames: poses.len(),
        joints: NUM_JOINTS,
        coords: 3,
        fps: poses.fps,
        dtype: "f32".into(),
        joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&side, e))
}

pub fn read_poses(path: &Path) -> Result<PoseSequence> {
    let side = path.with_extension("json");
    let header: PoseHeader = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    if header.dtype != "f32" || header.joints != NUM_JOINTS || header.coords != 3 {
        return Err(Error::Data(format!("{}: unsupported pose layout", side.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.frames * COORDS_PER_FRAME * 4 {
        return Err(Error::Data(format!("{}: size does not match header", path.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    PoseSequence::from_normalized(data, header.fps)
}

pub fn load_record(dir: &Path, rec: &ManifestRecord) -> Result<DatasetRecord> {
    let recorded = BFormatClip::from_channels(read_wav(&dir.join(&rec.files.recorded))?)?;
    let mut music = read_wav(&dir.join(&rec.files.music))?;
    if music.len() != 2 {
        return Err(Error::Data(format!("{}: music must be stereo", rec.id)));
    }
    let right = music.pop().unwrap();
    let left = music.pop().unwrap();
    let poses = read_poses(&dir.join(&rec.files.poses))?;
    if recorded.len() != left.len() || poses.len() != rec.frames {
        return Err(Error::Alignment(format!("{}: audio and poses disagree on length", rec.id)));
    }
    Ok(DatasetRecord {
        id: rec.id.clone(),
        bgm_id: rec.bgm_id.clone(),
        subject: rec.subject,
        recorded,
        music: StereoClip::new(left, right)?,
        poses,
        snr_db: rec.snr_db,
    })
}

fn segment(track: &StereoClip, start: usize, len: usize) -> Result<StereoClip> {
    let cut = |m: &MonoSignal| MonoSignal::new(m.samples[start..start + len].to_vec(), m.sample_rate);
    StereoClip::new(cut(&track.left)?, cut(&track.right)?)
}

fn assign_splits(cfg: &DatasetConfig, records: &mut [ManifestRecord]) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1_e995);
    let held_music: Vec<String> = if cfg.split.held_out_music.is_empty() {
        vec![cfg.bgms.last().expect("validated").id.clone()]
    } else {
        cfg.split.held_out_music.clone()
    };
    let held_genre: Vec<BgmKind> = if cfg.split.held_out_genre.is_empty() {
        let last = cfg.bgms.last().expect("validated").spec.kind;
        if cfg.bgms.iter().any(|b| b.spec.kind != last) {
            vec![last]
        } else {
            Vec::new()
        }
    } else {
        cfg.split.held_out_genre.clone()
    };

    // stratify train/val/test over (bgm, motion) so every group is represented
    let mut groups: BTreeMap<(String, Motion), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((r.bgm_id.clone(), r.motion)).or_default().push(i);
    }
    let mut single = vec![SplitTag::Train; records.len()];
    let mut val_pick = vec![false; records.len()];
    for idx in groups.values() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let n = idx.len();
        // every group of two or more keeps at least one clip for each non-empty fraction
        let take = |frac: f64, avail: usize| -> usize {
            if frac <= 0.0 || avail < 2 {
                0
            } else {
                ((n as f64 * frac).round() as usize).clamp(1, avail - 1)
            }
        };
        let n_test = take(cfg.split.test_fraction, n);
        let n_val = take(cfg.split.val_fraction, n - n_test);
        for (k, &i) in idx.iter().enumerate() {
            if k < n_test {
                single[i] = SplitTag::Test;
            } else if k < n_test + n_val {
                single[i] = SplitTag::Val;
            }
        }
        // independent draw used for validation in the held-out splits
        for &i in idx.iter().rev().take(take(cfg.split.val_fraction, n)) {
            val_pick[i] = true;
        }
    }
    for (i, r) in records.iter_mut().enumerate() {
        let held = |test: bool| {
            if test {
                SplitTag::Test
            } else if val_pick[i] {
                SplitTag::Val
            } else {
                SplitTag::Train
            }
        };
        r.splits.insert(SplitKind::SingleMusic, single[i]);
        r.splits.insert(SplitKind::CrossMusic, held(held_music.contains(&r.bgm_id)));
        r.splits.insert(SplitKind::CrossGenre, held(held_genre.contains(&r.bgm_kind)));
    }
}

/// Synthesizes every record, writes audio, poses and `manifest.json` under
/// `out_dir`, and returns the manifest. Deterministic in `cfg`.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let sr = cfg.bgms[0].spec.sample_rate;
    let frames = cfg.frames_per_clip();
    let clip_samples = (cfg.clip_duration_s * sr as f64).round() as usize;
    let per_bgm = cfg.motions.len() * cfg.clips_per_combo;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subject_scale: Vec<f64> = (0..cfg.subjects)
        .map(|s| if s == 0 { 1.0 } else { rng.gen_range(0.9..1.1) })
        .collect();

    let mut records = Vec::new();
    for bgm in &cfg.bgms {
        // clips of one bgm are consecutive segments of a single track
        let mut order: Vec<usize> = (0..per_bgm).collect();
        order.shuffle(&mut rng);
        for (m, &motion) in cfg.motions.iter().enumerate() {
            for k in 0..cfg.clips_per_combo {
                let n = records.len();
                let id = format!("r{n:05}");
                let segment_index = order[m * cfg.clips_per_combo + k];
                let subject = k % cfg.subjects;
                let dir = format!("records/{id}");
                records.push(ManifestRecord {
                    id,
                    bgm_id: bgm.id.clone(),
                    bgm_kind: bgm.spec.kind,
                    motion,
                    subject,
                    body_scale: cfg.scene.body_scale * subject_scale[subject],
                    clip_index: k,
                    segment_start_s: segment_index as f64 * cfg.clip_duration_s,
                    frames,
                    pose_seed: rng.gen(),
                    snr_db: cfg.snr_db,
                    noise_seed: cfg.snr_db.map(|_| rng.gen()),
                    splits: BTreeMap::new(),
                    files: RecordFiles {
                        recorded: format!("{dir}/recorded.wav"),
                        music: format!("{dir}/music.wav"),
                        poses: format!("{dir}/poses.bin"),
                    },
                });
            }
        }
    }
    assign_splits(cfg, &mut records);

    let tracks: Vec<StereoClip> = cfg
        .bgms
        .par_iter()
        .map(|b| synth_bgm(&b.spec, per_bgm as f64 * cfg.clip_duration_s, cfg.seed))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir.join("records")).map_err(|e| Error::io(out_dir, e))?;
    records.par_iter().try_for_each(|r| -> Result<()> {
        let b = cfg.bgms.iter().position(|x| x.id == r.bgm_id).expect("own bgm");
        let start = (r.segment_start_s * sr as f64).round() as usize;
        let music = segment(&tracks[b], start, clip_samples)?;
        let poses = gen_pose_sequence(r.motion, cfg.clip_duration_s, r.pose_seed)?;
        let scene = SceneConfig {
            body_scale: r.body_scale,
            ..cfg.scene.clone()
        };
        let mut recorded = render_recording(&scene, &music, &poses)?;
        if let (Some(snr), Some(seed)) = (r.snr_db, r.noise_seed) {
            recorded = add_gaussian_noise(&recorded, snr, seed)?;
        }
        let dir = out_dir.join("records").join(&r.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rc = recorded.channels();
        write_wav(&out_dir.join(&r.files.recorded), &rc, WavFormat::Float32)?;
        write_wav(&out_dir.join(&r.files.music), &music.channels(), WavFormat::Float32)?;
        write_poses(&out_dir.join(&r.files.poses), &poses)
    })?;

    let manifest = Manifest {
        version: 1,
        sample_rate: sr,
        fps: POSE_FPS,
        config: cfg.clone(),
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            clip_duration_s: 0.5,
            clips_per_combo: 2,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn builds_requested_records_with_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            motions: vec![Motion::Still, Motion::Walk],
            clips_per_combo: 5,
            clip_duration_s: 0.25,
            ..DatasetConfig::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.records.len(), 3 * 2 * 5);
        for r in &m.records {
            for f in [&r.files.recorded, &r.files.music, &r.files.poses] {
                assert!(dir.path().join(f).exists(), "{f}");
            }
        }
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let rec = load_record(dir.path(), &m.records[3]).unwrap();
        assert_eq!(rec.poses.len(), 5);
        assert_eq!(rec.recorded.len(), 12_000);
        assert!((rec.poses.joint(0, 1).norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_music_and_genre_hold_out() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(), dir.path()).unwrap();
        let train: Vec<_> = m.records_in(SplitKind::CrossMusic, SplitTag::Train).map(|r| r.bgm_id.clone()).collect();
        let test: Vec<_> = m.records_in(SplitKind::CrossMusic, SplitTag::Test).map(|r| r.bgm_id.clone()).collect();
        assert!(!test.is_empty());
        assert!(test.iter().all(|b| !train.contains(b)));
        let gtest: Vec<_> = m.records_in(SplitKind::CrossGenre, SplitTag::Test).collect();
        assert!(gtest.iter().all(|r| r.bgm_kind == BgmKind::Jazz));
        assert!(m.records_in(SplitKind::CrossGenre, SplitTag::Train).all(|r| r.bgm_kind != BgmKind::Jazz));
        // single-music: every bgm appears in both train and test
        for id in m.bgm_ids() {
            for tag in [SplitTag::Train, SplitTag::Test] {
                assert!(m.records_in(SplitKind::SingleMusic, tag).any(|r| r.bgm_id == id));
            }
        }
    }

    #[test]
    fn same_seed_same_manifest_and_audio() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = DatasetConfig {
            motions: vec![Motion::Squat],
            snr_db: Some(10.0),
            ..small()
        };
        let ma = build_dataset(&cfg, a.path()).unwrap();
        let mb = build_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        let f = &ma.records[0].files.recorded;
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }

    #[test]
    fn empty_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            bgms: vec![],
            ..DatasetConfig::default()
        };
        assert!(matches!(build_dataset(&cfg, dir.path()), Err(Error::Config(_))));
        let cfg = DatasetConfig {
            clip_duration_s: 0.33,
            ..DatasetConfig::default()
        };
        assert!(build_dataset(&cfg, dir.path()).is_err());
    }
}
