use std::f64::consts::{FRAC_PI_2, PI};
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::skeleton::{Skeleton, COORDS_PER_FRAME, HIP, NUM_JOINTS, SPINE};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const POSE_FPS: f64 = 20.0;
/// Upper bound on any joint's speed, in normalized units per second.
pub const MAX_JOINT_SPEED: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Still,
    TPose,
    Squat,
    Walk,
    RandomSmooth,
}

impl Motion {
    pub const ALL: [Motion; 5] = [
        Motion::Still,
        Motion::TPose,
        Motion::Squat,
        Motion::Walk,
        Motion::RandomSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::Still => "still",
            Motion::TPose => "t-pose",
            Motion::Squat => "squat",
            Motion::Walk => "walk",
            Motion::RandomSmooth => "random-smooth",
        }
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Motion::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown motion {s:?}")))
    }
}

/// `[frames × 21 × 3]` joint positions, hip at the origin and hip-to-spine
/// distance 1 in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    data: Vec<f64>,
    pub fps: f64,
}

impl PoseSequence {
    /// Normalizes raw positions frame by frame.
    pub fn from_raw(mut data: Vec<f64>, fps: f64) -> Result<Self> {
        if data.len() % COORDS_PER_FRAME != 0 || data.is_empty() {
            return Err(Error::dim(format!("{} values is not a whole number of frames", data.len())));
        }
        for frame in data.chunks_mut(COORDS_PER_FRAME) {
            let hip = [frame[0], frame[1], frame[2]];
            for j in 0..NUM_JOINTS {
                for c in 0..3 {
                    frame[j * 3 + c] -= hip[c];
                }
            }
            let s = &frame[SPINE * 3..SPINE * 3 + 3];
            let len = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
            if len < 1e-9 {
                return Err(Error::Data("spine coincides with hip".into()));
            }
            frame.iter_mut().for_each(|v| *v /= len);
        }
        Ok(Self { data, fps })
    }

    /// Wraps already-normalized data without touching it.
    pub fn from_normalized(data: Vec<f64>, fps: f64) -> Result<Self> {
        if data.len() % COORDS_PER_FRAME != 0 || data.is_empty() {
            return Err(Error::dim("pose data is not a whole number of frames"));
        }
        Ok(Self { data, fps })
    }

    pub fn len(&self) -> usize {
        self.data.len() / COORDS_PER_FRAME
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * COORDS_PER_FRAME..(t + 1) * COORDS_PER_FRAME]
    }

    pub fn joint(&self, t: usize, j: usize) -> Vector3<f64> {
        let f = self.frame(t);
        Vector3::new(f[j * 3], f[j * 3 + 1], f[j * 3 + 2])
    }

    /// Frames `[start, start+len)` as a `[len × 63]` tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.len() {
            return Err(Error::dim(format!("pose window {start}+{len} of {} frames", self.len())));
        }
        Tensor::new(
            &[len, COORDS_PER_FRAME],
            self.data[start * COORDS_PER_FRAME..(start + len) * COORDS_PER_FRAME].to_vec(),
        )
    }

    /// A sequence repeating frame `t` of `self` for `frames` frames.
    pub fn hold(&self, t: usize, frames: usize) -> Self {
        Self {
            data: self.frame(t).repeat(frames),
            fps: self.fps,
        }
    }

    /// Largest per-joint displacement between consecutive frames, per second.
    pub fn max_joint_speed(&self) -> f64 {
        let mut best: f64 = 0.0;
        for t in 1..self.len() {
            for j in 0..NUM_JOINTS {
                best = best.max((self.joint(t, j) - self.joint(t - 1, j)).norm() * self.fps);
            }
        }
        best
    }
}

fn pitch(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), a)
}

fn roll(a: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), a)
}

fn forward_kinematics(sk: &Skeleton, local: &[Rotation3<f64>]) -> Vec<f64> {
    let n = sk.len();
    let mut world_rot = vec![Rotation3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    for j in 0..n {
        match sk.parents[j] {
            None => world_rot[j] = local[j],
            Some(p) => {
                pos[j] = pos[p] + world_rot[p] * sk.offsets[j];
                world_rot[j] = world_rot[p] * local[j];
            }
        }
    }
    pos.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Joint angles for one frame. Limb bones hang along -z in the rest pose:
/// a negative pitch swings them forward, a positive roll lifts a left limb
/// sideways.
#[derive(Debug, Clone, Default)]
struct Angles {
    trunk_lean: f64,
    trunk_side: f64,
    neck_pitch: f64,
    thigh: [f64; 2],
    knee: [f64; 2],
    arm_swing: [f64; 2],
    arm_raise: [f64; 2],
    elbow: [f64; 2],
}

impl Angles {
    fn scaled(&self, s: f64) -> Self {
        let m2 = |a: [f64; 2]| [a[0] * s, a[1] * s];
        Self {
            trunk_lean: self.trunk_lean * s,
            trunk_side: self.trunk_side * s,
            neck_pitch: self.neck_pitch * s,
            thigh: m2(self.thigh),
            knee: m2(self.knee),
            arm_swing: m2(self.arm_swing),
            arm_raise: m2(self.arm_raise),
            elbow: m2(self.elbow),
        }
    }

    fn pose(&self, sk: &Skeleton) -> Vec<f64> {
        let mut local = vec![Rotation3::identity(); sk.len()];
        local[SPINE] = pitch(self.trunk_lean) * roll(self.trunk_side);
        local[2] = pitch(self.trunk_lean * 0.5);
        local[3] = pitch(self.neck_pitch);
        for (side, (shoulder, elbow, hip, knee)) in [(5, 6, 13, 14), (9, 10, 17, 18)].into_iter().enumerate() {
            let mirror = if side == 0 { 1.0 } else { -1.0 };
            local[shoulder] = pitch(-self.arm_swing[side]) * roll(mirror * self.arm_raise[side]);
            local[elbow] = pitch(-self.elbow[side]);
            local[hip] = pitch(-self.thigh[side]);
            local[knee] = pitch(self.knee[side]);
        }
        local[HIP] = Rotation3::identity();
        forward_kinematics(sk, &local)
    }
}

struct Sinusoid {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Sinusoid {
    fn at(&self, t: f64) -> f64 {
        self.amp * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

/// Deterministic motion generator; the output is normalized and every
/// joint stays below [`MAX_JOINT_SPEED`].
pub fn gen_pose_sequence(motion: Motion, duration_s: f64, seed: u64) -> Result<PoseSequence> {
    if !(duration_s > 0.0) {
        return Err(Error::Config("pose duration must be positive".into()));
    }
    let frames = (duration_s * POSE_FPS).round().max(1.0) as usize;
    let sk = Skeleton::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Box<dyn Fn(f64) -> Angles> = match motion {
        Motion::Still => {
            let a = Angles {
                trunk_lean: rng.gen_range(-0.05..0.1),
                neck_pitch: rng.gen_range(-0.1..0.1),
                arm_raise: [rng.gen_range(0.05..0.3), rng.gen_range(0.05..0.3)],
                arm_swing: [rng.gen_range(-0.1..0.2), rng.gen_range(-0.1..0.2)],
                elbow: [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)],
                thigh: [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)],
                ..Angles::default()
            };
            Box::new(move |_| a.clone())
        }
        Motion::TPose => Box::new(|_| Angles {
            arm_raise: [FRAC_PI_2, FRAC_PI_2],
            ..Angles::default()
        }),
        Motion::Walk => {
            let period = rng.gen_range(1.1..1.5);
            let phase = rng.gen_range(0.0..2.0 * PI);
            Box::new(move |t| {
                let w = 2.0 * PI * t / period + phase;
                let s = w.sin();
                let c = w.cos();
                Angles {
                    thigh: [0.11 * s, -0.11 * s],
                    knee: [0.08 + 0.04 * c, 0.08 - 0.04 * c],
                    arm_swing: [-0.15 * s, 0.15 * s],
                    arm_raise: [0.08, 0.08],
                    elbow: [0.2, 0.2],
                    trunk_lean: 0.03,
                    ..Angles::default()
                }
            })
        }
        Motion::Squat => {
            let period = rng.gen_range(3.2..4.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            Box::new(move |t| {
                let u = 0.5 * (1.0 - (2.0 * PI * t / period + phase).cos());
                Angles {
                    thigh: [0.45 * u, 0.45 * u],
                    knee: [0.7 * u, 0.7 * u],
                    trunk_lean: 0.3 * u,
                    arm_swing: [0.4 * u, 0.4 * u],
                    arm_raise: [0.1, 0.1],
                    elbow: [0.1 + 0.2 * u, 0.1 + 0.2 * u],
                    ..Angles::default()
                }
            })
        }
        Motion::RandomSmooth => {
            let mut dof = || -> [Sinusoid; 2] {
                std::array::from_fn(|_| Sinusoid {
                    amp: rng.gen_range(0.03..0.15),
                    freq: rng.gen_range(0.08..0.3),
                    phase: rng.gen_range(0.0..2.0 * PI),
                })
            };
            let d: Vec<[Sinusoid; 2]> = (0..13).map(|_| dof()).collect();
            Box::new(move |t| {
                let v = |i: usize| d[i][0].at(t) + d[i][1].at(t);
                Angles {
                    trunk_lean: 0.05 + v(0),
                    trunk_side: v(1),
                    neck_pitch: v(2),
                    thigh: [v(3), v(4)],
                    knee: [0.1 + v(5).abs(), 0.1 + v(6).abs()],
                    arm_swing: [v(7), v(8)],
                    arm_raise: [0.3 + v(9), 0.3 + v(10)],
                    elbow: [0.3 + v(11), 0.3 + v(12)],
                }
            })
        }
    };

    // shrink the motion around its mean until the speed bound holds
    let mut scale = 1.0;
    for _ in 0..8 {
        let mut raw = Vec::with_capacity(frames * COORDS_PER_FRAME);
        for t in 0..frames {
            raw.extend(angles(t as f64 / POSE_FPS).scaled(scale).pose(&sk));
        }
        let seq = PoseSequence::from_raw(raw, POSE_FPS)?;
        let v = seq.max_joint_speed();
        if v <= MAX_JOINT_SPEED * 0.98 {
            return Ok(seq);
        }
        scale *= MAX_JOINT_SPEED * 0.95 / v;
    }
    Err(Error::Numerical(format!("could not bound joint speed for {}", motion.name())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::skeleton::HEAD;

    #[test]
    fn still_frames_identical() {
        let s = gen_pose_sequence(Motion::Still, 2.0, 3).unwrap();
        assert_eq!(s.len(), 40);
        for t in 1..s.len() {
            assert_eq!(s.frame(t), s.frame(0));
        }
    }

    #[test]
    fn normalization_invariant_for_every_motion() {
        for m in Motion::ALL {
            for seed in 0..4 {
                let s = gen_pose_sequence(m, 5.0, seed).unwrap();
                for t in 0..s.len() {
                    assert_eq!(s.joint(t, HIP), Vector3::zeros());
                    assert!((s.joint(t, SPINE).norm() - 1.0).abs() < 1e-6);
                }
                assert!(s.max_joint_speed() <= MAX_JOINT_SPEED, "{m:?} {}", s.max_joint_speed());
            }
        }
    }

    #[test]
    fn t_pose_arms_are_horizontal() {
        let s = gen_pose_sequence(Motion::TPose, 1.0, 0).unwrap();
        let (shoulder, hand) = (s.joint(0, 5), s.joint(0, 8));
        assert!((shoulder.z - hand.z).abs() < 1e-9);
        assert!(hand.y > shoulder.y + 3.0);
        assert!(s.joint(0, HEAD).z > s.joint(0, SPINE).z);
    }

    fn autocorr_period(x: &[f64], fps: f64) -> f64 {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let ac = |lag: usize| -> f64 {
            (0..c.len() - lag).map(|i| c[i] * c[i + lag]).sum::<f64>() / (c.len() - lag) as f64
        };
        // first peak after the first trough
        let mut lag = 1;
        while ac(lag) > 0.0 {
            lag += 1;
        }
        while lag + 1 < c.len() / 2 && ac(lag + 1) <= ac(lag) {
            lag += 1;
        }
        while lag + 1 < c.len() / 2 && ac(lag + 1) >= ac(lag) {
            lag += 1;
        }
        let best = lag;
        best as f64 / fps
    }

    #[test]
    fn walk_ankles_are_periodic() {
        for seed in 0..5 {
            let s = gen_pose_sequence(Motion::Walk, 12.0, seed).unwrap();
            let ankle_x: Vec<f64> = (0..s.len()).map(|t| s.joint(t, 15).x).collect();
            let p = autocorr_period(&ankle_x, s.fps);
            assert!((0.8..=1.6).contains(&p), "seed {seed}: period {p}");
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = gen_pose_sequence(Motion::RandomSmooth, 3.0, 11).unwrap();
        let b = gen_pose_sequence(Motion::RandomSmooth, 3.0, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn motion_names_parse() {
        for m in Motion::ALL {
            assert_eq!(m.name().parse::<Motion>().unwrap(), m);
        }
        assert!("moonwalk".parse::<Motion>().is_err());
    }
}
