use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::motion::PoseSequence;
use super::skeleton::{Skeleton, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::signal::{BFormatClip, MonoSignal, StereoClip};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// A planar reflector `axis = position` (axis 0, 1, 2 for x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wall {
    pub axis: usize,
    pub position: f64,
    pub gain: f64,
}

/// Room geometry in meters. The skeleton's normalized coordinates are mapped
/// to `body_origin + body_scale * p`, facing +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub speaker_positions: [[f64; 3]; 2],
    pub mic_position: [f64; 3],
    pub speed_of_sound: f64,
    pub reflection_gain: f64,
    pub direct_gain: f64,
    pub body_origin: [f64; 3],
    pub body_scale: f64,
    /// Image-source reflections of the direct paths; empty for free field.
    pub walls: Vec<Wall>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            speaker_positions: [[-1.0, 0.5, 1.2], [-1.0, -0.5, 1.2]],
            mic_position: [1.0, 0.0, 1.2],
            speed_of_sound: SPEED_OF_SOUND,
            reflection_gain: 0.3,
            direct_gain: 1.0,
            body_origin: [0.0, 0.0, 1.0],
            body_scale: 0.2,
            walls: Vec::new(),
        }
    }
}

fn v3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.speaker_positions.map(v3);
        let m = v3(self.mic_position);
        if (a - b).norm() < 1e-9 || (a - m).norm() < 1e-9 || (b - m).norm() < 1e-9 {
            return Err(Error::Config("speakers and microphone must be distinct".into()));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::Config("speed of sound must be positive".into()));
        }
        if !(self.body_scale > 0.0) || self.direct_gain < 0.0 || self.reflection_gain < 0.0 {
            return Err(Error::Config("scene gains and body scale must be non-negative".into()));
        }
        if self.walls.iter().any(|w| w.axis > 2) {
            return Err(Error::Config("wall axis must be 0, 1 or 2".into()));
        }
        Ok(())
    }

    pub fn joint_position(&self, p: Vector3<f64>) -> Vector3<f64> {
        v3(self.body_origin) + self.body_scale * p
    }
}

/// B-format gains `(w, x, y, z)` for a plane wave arriving from `dir`.
pub fn encode_direction(dir: Vector3<f64>) -> [f64; 4] {
    let u = dir.normalize();
    [FRAC_1_SQRT_2, u.x, u.y, u.z]
}

/// Adds `gain * src(t - delay)` to `out`, linear interpolation between samples.
fn add_delayed(out: &mut [f64], src: &[f64], delay: f64, gain: f64) {
    for (n, o) in out.iter_mut().enumerate() {
        let pos = n as f64 - delay;
        if pos < 0.0 {
            continue;
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let a = src.get(i).copied().unwrap_or(0.0);
        let b = src.get(i + 1).copied().unwrap_or(0.0);
        *o += gain * (a + frac * (b - a));
    }
}

/// Renders a static source at `position` into a 4-channel recording.
pub fn render_point_source(scene: &SceneConfig, signal: &MonoSignal, position: [f64; 3], gain: f64) -> Result<BFormatClip> {
    let mut out = vec![vec![0.0; signal.len()]; 4];
    let sr = signal.sample_rate as f64;
    let rel = v3(position) - v3(scene.mic_position);
    let d = rel.norm();
    if d < 1e-9 {
        return Err(Error::Config("source coincides with the microphone".into()));
    }
    let enc = encode_direction(rel);
    for c in 0..4 {
        add_delayed(&mut out[c], &signal.samples, d / scene.speed_of_sound * sr, gain * enc[c] / d);
    }
    to_clip(out, signal.sample_rate)
}

fn to_clip(out: Vec<Vec<f64>>, sr: u32) -> Result<BFormatClip> {
    BFormatClip::from_channels(out.into_iter().map(|s| MonoSignal::new(s, sr)).collect::<Result<_>>()?)
}

#[derive(Clone, Copy)]
struct PathParams {
    delay: f64,
    gains: [f64; 4],
}

/// Simulated 4-channel recording of `music` played through the two speakers
/// while the body moves through `poses`.
pub fn render_recording(scene: &SceneConfig, music: &StereoClip, poses: &PoseSequence) -> Result<BFormatClip> {
    scene.validate()?;
    let sr = music.sample_rate() as f64;
    let expected = (poses.duration() * sr).round() as usize;
    if music.len() != expected {
        return Err(Error::Alignment(format!(
            "music has {} samples but {} pose frames need {expected}",
            music.len(),
            poses.len()
        )));
    }
    let n = music.len();
    let mic = v3(scene.mic_position);
    let c = scene.speed_of_sound;
    let mut out = vec![vec![0.0; n]; 4];
    let speakers = scene.speaker_positions.map(v3);

    for (s, src) in speakers.iter().zip(music.channels()) {
        let mut sources = vec![(*s, scene.direct_gain)];
        for w in &scene.walls {
            let mut img = *s;
            img[w.axis] = 2.0 * w.position - img[w.axis];
            sources.push((img, scene.direct_gain * w.gain));
        }
        for (pos, g) in sources {
            let rel = pos - mic;
            let d = rel.norm();
            let enc = encode_direction(rel);
            for ch in 0..4 {
                add_delayed(&mut out[ch], &src.samples, d / c * sr, g * enc[ch] / d);
            }
        }
    }

    if scene.reflection_gain > 0.0 {
        let sk = Skeleton::standard();
        let frames = poses.len();
        let samples_per_frame = sr / poses.fps;
        for (s, src) in speakers.iter().zip(music.channels()) {
            for j in 0..NUM_JOINTS {
                let weight = scene.reflection_gain * sk.cross_section[j];
                let params: Vec<PathParams> = (0..frames)
                    .map(|t| {
                        let p = scene.joint_position(poses.joint(t, j));
                        let r1 = (p - s).norm().max(1e-3);
                        let rel = p - mic;
                        let r2 = rel.norm().max(1e-3);
                        let enc = encode_direction(rel);
                        PathParams {
                            delay: (r1 + r2) / c * sr,
                            gains: enc.map(|e| weight * e / (r1 * r2)),
                        }
                    })
                    .collect();
                scatter(&mut out, &src.samples, &params, samples_per_frame);
            }
        }
    }
    to_clip(out, music.sample_rate())
}

/// Time-varying path; frame `k` describes the instant `(k + 0.5)` frames
/// into the clip and parameters are interpolated linearly in between.
fn scatter(out: &mut [Vec<f64>], src: &[f64], params: &[PathParams], samples_per_frame: f64) {
    let [o0, o1, o2, o3]: &mut [Vec<f64>; 4] = out.try_into().expect("four channels");
    let n_total = src.len();
    let last = params.len() - 1;
    let inv = 1.0 / samples_per_frame;
    let mut start = 0;
    for k in 0..=last {
        let end = if k == last {
            n_total
        } else {
            (((k + 1) as f64 + 0.5) * samples_per_frame).ceil().min(n_total as f64) as usize
        };
        let (p0, p1) = (params[k], params[(k + 1).min(last)]);
        let dd = p1.delay - p0.delay;
        let dg: [f64; 4] = std::array::from_fn(|c| p1.gains[c] - p0.gains[c]);
        for n in start..end.max(start) {
            let a = (n as f64 * inv - 0.5 - k as f64).clamp(0.0, 1.0);
            let pos = n as f64 - (p0.delay + a * dd);
            if pos < 0.0 {
                continue;
            }
            let i = pos as usize;
            let frac = pos - i as f64;
            let v = match (src.get(i), src.get(i + 1)) {
                (Some(x0), Some(x1)) => x0 + frac * (x1 - x0),
                (Some(x0), None) => x0 * (1.0 - frac),
                _ => 0.0,
            };
            o0[n] += (p0.gains[0] + a * dg[0]) * v;
            o1[n] += (p0.gains[1] + a * dg[1]) * v;
            o2[n] += (p0.gains[2] + a * dg[2]) * v;
            o3[n] += (p0.gains[3] + a * dg[3]) * v;
        }
        start = end.max(start);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{gen_pose_sequence, synth_bgm, BgmSpec, Motion};
    use crate::signal::{intensity_vector, stft, MelFilterBank, StftParams};

    fn l2_gap(a: &BFormatClip, b: &BFormatClip) -> f64 {
        a.channels()
            .iter()
            .zip(b.channels())
            .map(|(x, y)| x.samples.iter().zip(&y.samples).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    fn music(seconds: f64) -> StereoClip {
        synth_bgm(&BgmSpec::ambient(4), seconds, 0).unwrap()
    }

    #[test]
    fn direct_path_closed_form() {
        let scene = SceneConfig {
            speaker_positions: [[1.0, 0.0, 0.0], [0.0, 5.0, 0.0]],
            mic_position: [0.0, 0.0, 0.0],
            reflection_gain: 0.0,
            direct_gain: 0.8,
            ..SceneConfig::default()
        };
        let sr = 48_000u32;
        let poses = gen_pose_sequence(Motion::Still, 0.5, 0).unwrap();
        let impulse_at = 1000;
        let mut left = vec![0.0; 24_000];
        left[impulse_at] = 1.0;
        let clip = StereoClip::new(MonoSignal::new(left, sr).unwrap(), MonoSignal::silent(24_000, sr)).unwrap();
        let rec = render_recording(&scene, &clip, &poses).unwrap();
        // 1 m / 343 m/s = 2.915 ms = 139.94 samples
        let delay = sr as f64 / 343.0;
        let i = impulse_at + delay.floor() as usize;
        let frac = delay - delay.floor();
        let g = 0.8 * FRAC_1_SQRT_2;
        assert!((rec.w.samples[i] - g * (1.0 - frac)).abs() < 1e-12);
        assert!((rec.w.samples[i + 1] - g * frac).abs() < 1e-12);
        let total: f64 = rec.w.samples.iter().map(|v| v.abs()).sum();
        assert!((total - g).abs() < 1e-12);
        // on-axis source: all dipole energy in x
        assert!(rec.y.samples.iter().all(|v| v.abs() < 1e-12));
        assert!((rec.x.samples[i] - 0.8 * (1.0 - frac)).abs() < 1e-12);
    }

    #[test]
    fn body_adds_energy_and_poses_are_distinguishable() {
        let m = music(1.0);
        let empty = SceneConfig {
            reflection_gain: 0.0,
            ..SceneConfig::default()
        };
        let scene = SceneConfig::default();
        let still = gen_pose_sequence(Motion::Still, 1.0, 0).unwrap();
        let a = render_recording(&empty, &m, &still).unwrap();
        let b = render_recording(&scene, &m, &still).unwrap();
        assert!(l2_gap(&a, &b) > 1e-3);

        let mut renders = Vec::new();
        for (i, motion) in [Motion::Still, Motion::TPose, Motion::Squat, Motion::Walk, Motion::RandomSmooth]
            .into_iter()
            .enumerate()
        {
            let seeds = if motion == Motion::TPose { 1 } else { 3 };
            for seed in 0..seeds {
                let p = gen_pose_sequence(motion, 1.0, seed + 10 * i as u64).unwrap();
                renders.push(render_recording(&scene, &m, &p.hold(10, p.len())).unwrap());
            }
        }
        for i in 0..renders.len() {
            for j in 0..i {
                assert!(l2_gap(&renders[i], &renders[j]) > 1e-6, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn energy_bound() {
        let m = music(1.0);
        let scene = SceneConfig::default();
        let p = gen_pose_sequence(Motion::Walk, 1.0, 2).unwrap();
        let rec = render_recording(&scene, &m, &p).unwrap();
        let bound = (scene.direct_gain + 21.0 * scene.reflection_gain) * m.left.rms().max(m.right.rms());
        for ch in rec.channels() {
            assert!(ch.rms() <= bound);
        }
    }

    #[test]
    fn length_mismatch_is_alignment_error() {
        let m = music(1.0);
        let p = gen_pose_sequence(Motion::Still, 1.5, 0).unwrap();
        assert!(matches!(
            render_recording(&SceneConfig::default(), &m, &p),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn direct_path_doa_matches_speaker_bearing() {
        let scene = SceneConfig {
            reflection_gain: 0.0,
            ..SceneConfig::default()
        };
        let m = music(1.0);
        let silent = MonoSignal::silent(m.len(), m.sample_rate());
        let only_left = StereoClip::new(m.left.clone(), silent).unwrap();
        let p = gen_pose_sequence(Motion::Still, 1.0, 0).unwrap();
        let rec = render_recording(&scene, &only_left, &p).unwrap();
        let params = StftParams::default();
        let g: Vec<_> = rec.channels().iter().map(|c| stft(c, &params).unwrap()).collect();
        let bank = MelFilterBank::new(32, params.n_fft, 48_000, 20.0, 24_000.0).unwrap();
        let iv = intensity_vector(&g[0], &g[1], &g[2], &g[3], &bank, Default::default()).unwrap();
        let mut sum = Vector3::zeros();
        let d = iv.values.data();
        let plane = d.len() / 3;
        for i in 0..plane {
            sum += Vector3::new(d[i], d[plane + i], d[2 * plane + i]);
        }
        let want = (v3(scene.speaker_positions[0]) - v3(scene.mic_position)).normalize();
        let angle = sum.normalize().dot(&want).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 10.0, "angle {angle}");
    }

    #[test]
    fn walls_add_image_sources() {
        let m = music(0.5);
        let p = gen_pose_sequence(Motion::Still, 0.5, 0).unwrap();
        let free = render_recording(&SceneConfig::default(), &m, &p).unwrap();
        let walled = SceneConfig {
            walls: vec![Wall { axis: 2, position: 0.0, gain: 0.5 }],
            ..SceneConfig::default()
        };
        let r = render_recording(&walled, &m, &p).unwrap();
        assert!(l2_gap(&free, &r) > 1e-3);
        let bad = SceneConfig {
            speaker_positions: [[0.0; 3], [0.0; 3]],
            ..SceneConfig::default()
        };
        assert!(render_recording(&bad, &m, &p).is_err());
    }
}
