//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use acousticpose_core::model::ModelConfig;
use acousticpose_core::signal::StereoClip;
use acousticpose_core::sim::{gen_pose_sequence, render_recording, synth_bgm, BgmSpec, Motion, PoseSequence, SceneConfig};
use acousticpose_core::{BFormatClip, Tensor};

pub fn music(seconds: f64) -> StereoClip {
    synth_bgm(&BgmSpec::jazz(1), seconds, 0).expect("music")
}

pub fn poses(seconds: f64) -> PoseSequence {
    gen_pose_sequence(Motion::Walk, seconds, 0).expect("poses")
}

pub fn recording(seconds: f64) -> (BFormatClip, StereoClip) {
    let m = music(seconds);
    let rec = render_recording(&SceneConfig::default(), &m, &poses(seconds)).expect("render");
    (rec, m)
}

/// The width used for single-core experiments.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        bins: 32,
        d: 8,
        pre_blocks: 2,
        post_channels: 16,
        unet_channels: vec![32, 32, 32],
        head_hidden: 64,
        embed_dim: 32,
        cpe_hidden: 32,
        ..ModelConfig::default()
    }
}

/// Deterministic pseudo-random batch `(x, m, pose)` for `cfg`.
pub fn batch(cfg: &ModelConfig, n: usize) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut next = || rng.gen_range(-1.0..1.0);
    let x = Tensor::from_fn(&[n, 11, cfg.bins, cfg.frames], |_| next());
    let m = Tensor::from_fn(&[n, 2, cfg.bins, cfg.frames], |_| next());
    let p = Tensor::from_fn(&[n, cfg.frames, cfg.coords()], |_| next());
    (x, m, p)
}
