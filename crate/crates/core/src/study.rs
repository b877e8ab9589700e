//! Feature separability under a repeated chirp versus changing music: the
//! same static poses sensed both ways, projected with PCA and scored by
//! silhouette over pose labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{feature_pca, SeparabilityReport};
use crate::pipeline::{FeatureConfig, Featurizer};
use crate::signal::{MonoSignal, StereoClip};
use crate::sim::{add_gaussian_noise, gen_pose_sequence, render_recording, synth_bgm, BgmSpec, Motion, PoseSequence, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Static postures, one cluster each.
    pub poses: usize,
    pub samples_per_pose: usize,
    /// Chirp repetition period; the analysis window spans exactly one and
    /// recordings start on a frame boundary of the repetition.
    pub chirp_period_s: f64,
    /// Tracks the music condition draws from.
    pub music: Vec<BgmSpec>,
    pub snr_db: f64,
    pub scene: SceneConfig,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            poses: 5,
            samples_per_pose: 12,
            chirp_period_s: 0.6,
            music: vec![BgmSpec::ambient(11), BgmSpec::jazz(12), BgmSpec::ambient(13), BgmSpec::jazz(14)],
            snr_db: 30.0,
            scene: SceneConfig::default(),
            features: FeatureConfig {
                bins: 32,
                ..FeatureConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub chirp: SeparabilityReport,
    pub music: SeparabilityReport,
}

/// Distinct held postures drawn from the motion repertoire.
fn postures(n: usize, frames: usize, seed: u64) -> Result<Vec<PoseSequence>> {
    let picks = [
        (Motion::Still, 0.0),
        (Motion::TPose, 0.0),
        (Motion::Squat, 1.8),
        (Motion::Walk, 0.35),
        (Motion::RandomSmooth, 2.3),
    ];
    (0..n)
        .map(|k| {
            let (motion, at) = picks[k % picks.len()];
            let seq = gen_pose_sequence(motion, 3.0, seed + (k / picks.len()) as u64)?;
            let t = ((at * seq.fps) as usize).min(seq.len() - 1);
            Ok(seq.hold(t, frames))
        })
        .collect()
}

fn segment(track: &StereoClip, start: usize, len: usize) -> Result<StereoClip> {
    let cut = |s: &MonoSignal| MonoSignal::new(s.samples[start..start + len].to_vec(), s.sample_rate);
    StereoClip::new(cut(&track.left)?, cut(&track.right)?)
}

/// Time-averaged recorded log-mel and intensity over the central window.
fn sample_features(fz: &Featurizer, scene: &SceneConfig, music: &StereoClip, pose: &PoseSequence, snr_db: f64, seed: u64, window: usize) -> Result<Vec<f64>> {
    let rec = add_gaussian_noise(&render_recording(scene, music, pose)?, snr_db, seed)?;
    let raw = fz.raw_clip(&rec, music)?;
    let total = raw.recorded.shape()[2];
    let start = (total - window) / 2;
    let mut out = Vec::new();
    for t in [&raw.recorded, &raw.intensity.values] {
        for row in t.data().chunks(total) {
            out.push(row[start..start + window].iter().sum::<f64>() / window as f64);
        }
    }
    Ok(out)
}

pub fn separability_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.music.is_empty() || cfg.poses < 2 || cfg.samples_per_pose < 3 {
        return Err(Error::Config("study needs music, >= 2 poses and >= 3 samples per pose".into()));
    }
    let fz = Featurizer::new(cfg.features.clone())?;
    let sr = cfg.features.sample_rate;
    let hop = cfg.features.stft.hop;
    let window = cfg.features.window;
    if ((window * hop) as f64 - cfg.chirp_period_s * sr as f64).abs() > 1.0 {
        return Err(Error::Config(format!(
            "chirp period {} s does not match the {window}-frame window",
            cfg.chirp_period_s
        )));
    }
    // a full window of context on both sides of the analysed one
    let frames = 3 * window;
    let len = frames * hop;
    let poses = postures(cfg.poses, frames, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let period = (cfg.chirp_period_s * sr as f64).round() as usize;
    let chirp = synth_bgm(
        &BgmSpec {
            sample_rate: sr,
            ..BgmSpec::chirp(cfg.chirp_period_s)
        },
        (len + period) as f64 / sr as f64,
        cfg.seed,
    )?;
    let span = 4.0 * len as f64 / sr as f64 * cfg.samples_per_pose as f64;
    let tracks = cfg
        .music
        .iter()
        .enumerate()
        .map(|(i, s)| synth_bgm(&BgmSpec { sample_rate: sr, ..s.clone() }, span, cfg.seed + i as u64))
        .collect::<Result<Vec<_>>>()?;

    let (mut chirp_x, mut music_x, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (k, pose) in poses.iter().enumerate() {
        for i in 0..cfg.samples_per_pose {
            let noise_seed = rng.gen();
            let phase = rng.gen_range(0..window) * hop;
            chirp_x.push(sample_features(&fz, &cfg.scene, &segment(&chirp, phase, len)?, pose, cfg.snr_db, noise_seed, window)?);
            let track = &tracks[(i + k) % tracks.len()];
            let start = rng.gen_range(0..track.len() - len);
            music_x.push(sample_features(&fz, &cfg.scene, &segment(track, start, len)?, pose, cfg.snr_db, noise_seed, window)?);
            labels.push(k);
        }
    }
    Ok(StudyReport {
        chirp: feature_pca(&chirp_x, &labels)?,
        music: feature_pca(&music_x, &labels)?,
    })
}
