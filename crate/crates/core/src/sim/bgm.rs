use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{read_wav, resample, MonoSignal, StereoClip, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BgmKind {
    Ambient,
    Jazz,
    Chirp,
    WavFile,
}

impl BgmKind {
    pub fn name(self) -> &'static str {
        match self {
            BgmKind::Ambient => "ambient",
            BgmKind::Jazz => "jazz",
            BgmKind::Chirp => "chirp",
            BgmKind::WavFile => "wav-file",
        }
    }
}

/// Recipe for one synthetic background track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BgmSpec {
    pub kind: BgmKind,
    /// Partials per note.
    pub harmonics: usize,
    pub base_pitch_hz: f64,
    /// Range of note pitches above the base, in semitones.
    pub pitch_range: f64,
    pub note_duration_s: f64,
    /// Output peak level.
    pub amplitude: f64,
    /// Level of the broadband noise bed relative to the tonal part.
    pub noise_level: f64,
    /// Expected rests per second (jazz only).
    pub silence_density: f64,
    pub chirp_period_s: f64,
    pub chirp_f0: f64,
    pub chirp_f1: f64,
    pub path: Option<PathBuf>,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for BgmSpec {
    fn default() -> Self {
        Self::ambient(0)
    }
}

impl BgmSpec {
    pub fn ambient(seed: u64) -> Self {
        Self {
            kind: BgmKind::Ambient,
            harmonics: 6,
            base_pitch_hz: 110.0,
            pitch_range: 24.0,
            note_duration_s: 2.0,
            amplitude: 0.6,
            noise_level: 0.15,
            silence_density: 0.0,
            chirp_period_s: 0.5,
            chirp_f0: 200.0,
            chirp_f1: 16_000.0,
            path: None,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed,
        }
    }

    pub fn jazz(seed: u64) -> Self {
        Self {
            kind: BgmKind::Jazz,
            base_pitch_hz: 196.0,
            note_duration_s: 0.25,
            noise_level: 0.3,
            silence_density: 0.3,
            ..Self::ambient(seed)
        }
    }

    pub fn chirp(period_s: f64) -> Self {
        Self {
            kind: BgmKind::Chirp,
            chirp_period_s: period_s,
            amplitude: 0.5,
            ..Self::ambient(0)
        }
    }

    pub fn wav_file(path: PathBuf) -> Self {
        Self {
            kind: BgmKind::WavFile,
            path: Some(path),
            ..Self::ambient(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("bgm sample rate must be positive".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(Error::Config(format!("bgm amplitude {} outside (0, 1]", self.amplitude)));
        }
        if self.harmonics == 0 || self.note_duration_s <= 0.0 || self.base_pitch_hz <= 0.0 {
            return Err(Error::Config("bgm needs harmonics, positive note length and pitch".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.kind == BgmKind::Chirp
            && !(self.chirp_period_s > 0.0 && self.chirp_f0 > 0.0 && self.chirp_f1 < nyquist)
        {
            return Err(Error::Config("chirp needs a positive period and a band below Nyquist".into()));
        }
        if self.kind == BgmKind::WavFile && self.path.is_none() {
            return Err(Error::Config("wav-file bgm needs a path".into()));
        }
        Ok(())
    }
}

/// Deterministic stereo track of `duration_s` seconds, peak at most
/// `spec.amplitude`.
pub fn synth_bgm(spec: &BgmSpec, duration_s: f64, seed: u64) -> Result<StereoClip> {
    spec.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::Config("bgm duration must be positive".into()));
    }
    let sr = spec.sample_rate;
    let n = (duration_s * sr as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
    let (mut left, mut right) = match spec.kind {
        BgmKind::Ambient => ambient(spec, n, &mut rng),
        BgmKind::Jazz => jazz(spec, n, &mut rng),
        BgmKind::Chirp => chirp(spec, n),
        BgmKind::WavFile => from_file(spec, n)?,
    };
    let peak = left.iter().chain(&right).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 && (spec.kind != BgmKind::WavFile || peak > 1.0) {
        let g = spec.amplitude / peak;
        left.iter_mut().chain(right.iter_mut()).for_each(|v| *v *= g);
    }
    StereoClip::new(MonoSignal::new(left, sr)?, MonoSignal::new(right, sr)?)
}

fn note_freq(spec: &BgmSpec, rng: &mut ChaCha8Rng) -> f64 {
    const SCALE: [f64; 7] = [0.0, 2.0, 3.0, 5.0, 7.0, 9.0, 10.0];
    let octaves = (spec.pitch_range / 12.0).floor().max(0.0) as i32;
    let step = SCALE[rng.gen_range(0..SCALE.len())] + 12.0 * rng.gen_range(0..=octaves) as f64;
    spec.base_pitch_hz * 2f64.powf(step.min(spec.pitch_range) / 12.0)
}

fn add_tone(out: &mut [f64], start: usize, env: &[f64], freq: f64, harmonics: usize, phase: f64, sr: f64) {
    let nyquist = sr / 2.0;
    for h in 1..=harmonics {
        let f = freq * h as f64;
        if f >= nyquist * 0.95 {
            break;
        }
        let a = 1.0 / h as f64;
        let (sw, cw) = (2.0 * PI * f / sr).sin_cos();
        let (mut s, mut c) = (phase * h as f64).sin_cos();
        let len = env.len().min(out.len().saturating_sub(start));
        for (o, e) in out[start..start + len].iter_mut().zip(env) {
            *o += a * e * s;
            (s, c) = (s * cw + c * sw, c * cw - s * sw);
        }
    }
}

/// One-pole smoothed white noise, stereo with partial correlation.
fn noise_bed(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut l = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let (mut sl, mut sr) = (0.0, 0.0);
    for _ in 0..n {
        let common: f64 = rng.sample(StandardNormal);
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        sl = 0.5 * sl + 0.8 * common + 0.6 * a;
        sr = 0.5 * sr + 0.8 * common + 0.6 * b;
        l.push(sl);
        r.push(sr);
    }
    (l, r)
}

fn ambient(spec: &BgmSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let sr = spec.sample_rate as f64;
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    let note_len = (spec.note_duration_s * sr) as usize;
    // notes overlap by half so the pad never drops out
    let hop = (note_len / 2).max(1);
    let env: Vec<f64> = (0..note_len)
        .map(|i| (PI * i as f64 / note_len as f64).sin().powi(2))
        .collect();
    let mut start = 0usize;
    loop {
        let begin = start.saturating_sub(hop);
        for _ in 0..3 {
            let f = note_freq(spec, rng);
            let detune = 1.0 + rng.gen_range(-0.004..0.004);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let pan: f64 = rng.gen_range(0.3..0.7);
            let el: Vec<f64> = env.iter().map(|e| e * pan).collect();
            let er: Vec<f64> = env.iter().map(|e| e * (1.0 - pan)).collect();
            add_tone(&mut left, begin, &el, f, spec.harmonics, phase, sr);
            add_tone(&mut right, begin, &er, f * detune, spec.harmonics, phase, sr);
        }
        if begin + note_len >= n {
            break;
        }
        start += hop;
    }
    mix_noise(spec, &mut left, &mut right, rng, None);
    (left, right)
}

fn mix_noise(spec: &BgmSpec, left: &mut [f64], right: &mut [f64], rng: &mut ChaCha8Rng, gate: Option<&[bool]>) {
    if spec.noise_level <= 0.0 {
        return;
    }
    let n = left.len();
    let tone_rms = (left.iter().chain(right.iter()).map(|v| v * v).sum::<f64>() / (2 * n).max(1) as f64).sqrt();
    let (nl, nr) = noise_bed(n, rng);
    let noise_rms = (nl.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt().max(1e-12);
    let g = spec.noise_level * tone_rms.max(1e-3) / noise_rms;
    for i in 0..n {
        if gate.is_some_and(|g| !g[i]) {
            continue;
        }
        left[i] += g * nl[i];
        right[i] += g * nr[i];
    }
}

fn jazz(spec: &BgmSpec, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let sr = spec.sample_rate as f64;
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    let mut active = vec![false; n];
    let mut t = 0usize;
    while t < n {
        if rng.gen_bool((spec.silence_density * spec.note_duration_s).clamp(0.0, 1.0)) {
            t += (rng.gen_range(0.3..1.0) * sr) as usize;
            continue;
        }
        let len = (spec.note_duration_s * rng.gen_range(0.6..2.0) * sr) as usize;
        let attack = (0.005 * sr) as usize;
        let decay = rng.gen_range(3.0..8.0) / (len as f64 / sr);
        let env: Vec<f64> = (0..len)
            .map(|i| {
                let a = (i as f64 / attack as f64).min(1.0);
                let release = ((len - i) as f64 / attack as f64).min(1.0);
                a * release * (-decay * i as f64 / sr).exp()
            })
            .collect();
        let pan: f64 = rng.gen_range(0.2..0.8);
        for _ in 0..2 {
            let f = note_freq(spec, rng);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let el: Vec<f64> = env.iter().map(|e| e * pan).collect();
            let er: Vec<f64> = env.iter().map(|e| e * (1.0 - pan)).collect();
            add_tone(&mut left, t, &el, f, spec.harmonics, phase, sr);
            add_tone(&mut right, t, &er, f, spec.harmonics, phase, sr);
        }
        // brushed-snare style noise burst on the onset
        let burst = ((0.08 * sr) as usize).min(len);
        for i in 0..burst {
            if t + i < n {
                let e = 0.3 * (-40.0 * i as f64 / sr).exp();
                let v: f64 = rng.sample(StandardNormal);
                left[t + i] += e * v * (1.0 - pan);
                right[t + i] += e * v * pan;
            }
        }
        active[t..(t + len).min(n)].iter_mut().for_each(|a| *a = true);
        t += len;
    }
    let gate = active.clone();
    mix_noise(spec, &mut left, &mut right, rng, Some(&gate));
    (left, right)
}

fn chirp(spec: &BgmSpec, n: usize) -> (Vec<f64>, Vec<f64>) {
    let sr = spec.sample_rate as f64;
    let period = spec.chirp_period_s;
    let k = (spec.chirp_f1 - spec.chirp_f0) / period;
    let fade = (0.005 * sr).max(1.0);
    let sweep = |i: usize| -> f64 {
        let t = i as f64 / sr;
        let local = t % period;
        let edge = (local * sr / fade).min((period - local) * sr / fade).min(1.0);
        edge * (2.0 * PI * (spec.chirp_f0 * local + 0.5 * k * local * local)).sin()
    };
    let left: Vec<f64> = (0..n).map(sweep).collect();
    // second speaker: same sweep, quieter and a few samples late
    let right: Vec<f64> = (0..n)
        .map(|i| if i >= 5 { 0.9 * left[i - 5] } else { 0.0 })
        .collect();
    (left, right)
}

fn from_file(spec: &BgmSpec, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = spec.path.as_ref().expect("validated");
    let mut ch = read_wav(path)?;
    if ch.is_empty() || ch[0].is_empty() {
        return Err(Error::Data(format!("{} has no audio", path.display())));
    }
    ch.truncate(2);
    if ch.len() == 1 {
        let mono = ch[0].clone();
        ch.push(mono);
    }
    let mut out = Vec::with_capacity(2);
    for c in ch {
        let c = if c.sample_rate != spec.sample_rate {
            resample(&c, spec.sample_rate)?
        } else {
            c
        };
        out.push((0..n).map(|i| c.samples[i % c.len()]).collect::<Vec<f64>>());
    }
    let right = out.pop().unwrap();
    let left = out.pop().unwrap();
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, StftParams};

    fn longest_silence(x: &[f64], sr: u32) -> f64 {
        let (mut run, mut best) = (0usize, 0usize);
        for v in x {
            if v.abs() < 1e-4 {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        best as f64 / sr as f64
    }

    #[test]
    fn ambient_level_and_continuity() {
        let clip = synth_bgm(&BgmSpec::ambient(1), 60.0, 7).unwrap();
        for ch in clip.channels() {
            assert!((0.05..=0.5).contains(&ch.rms()), "rms {}", ch.rms());
            assert!(ch.peak() <= 1.0);
            assert!(longest_silence(&ch.samples, ch.sample_rate) < 1.0);
        }
        assert_ne!(clip.left, clip.right);
    }

    #[test]
    fn jazz_has_rests() {
        let clip = synth_bgm(&BgmSpec::jazz(2), 30.0, 0).unwrap();
        assert!(longest_silence(&clip.left.samples, clip.sample_rate()) > 0.25);
        assert!(clip.left.peak() <= 1.0 && clip.right.peak() <= 1.0);
        assert_ne!(clip.left, clip.right);
    }

    #[test]
    fn deterministic_per_seed() {
        for spec in [BgmSpec::ambient(3), BgmSpec::jazz(3)] {
            let a = synth_bgm(&spec, 2.0, 5).unwrap();
            let b = synth_bgm(&spec, 2.0, 5).unwrap();
            let c = synth_bgm(&spec, 2.0, 6).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn chirp_ridge_sweeps_and_repeats() {
        let mut spec = BgmSpec::chirp(0.5);
        spec.chirp_f0 = 500.0;
        spec.chirp_f1 = 12_000.0;
        let clip = synth_bgm(&spec, 3.0, 0).unwrap();
        let grid = stft(&clip.left, &StftParams::default()).unwrap();
        let power = grid.power();
        let ridge: Vec<usize> = (0..grid.frames)
            .map(|t| {
                (0..grid.n_freq)
                    .max_by(|&a, &b| power[a * grid.frames + t].total_cmp(&power[b * grid.frames + t]))
                    .unwrap()
            })
            .collect();
        // 10 frames per period at 20 frames/s
        for t in 1..ridge.len() - 10 {
            assert!(ridge[t].abs_diff(ridge[t + 10]) <= 2, "frame {t}: {:?}", ridge);
        }
        let rising = (1..ridge.len()).filter(|&t| ridge[t] > ridge[t - 1]).count();
        assert!(rising >= ridge.len() * 7 / 10, "{ridge:?}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(synth_bgm(&BgmSpec::ambient(0), 0.0, 0).is_err());
        let mut s = BgmSpec::ambient(0);
        s.amplitude = 1.5;
        assert!(synth_bgm(&s, 1.0, 0).is_err());
        let mut s = BgmSpec::wav_file(PathBuf::new());
        s.path = None;
        assert!(synth_bgm(&s, 1.0, 0).is_err());
    }

    #[test]
    fn wav_file_loops_and_resamples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let tone: Vec<f64> = (0..22050).map(|i| 0.5 * (2.0 * PI * 440.0 * i as f64 / 44100.0).sin()).collect();
        let mono = MonoSignal::new(tone, 44100).unwrap();
        crate::signal::write_wav(&path, &[&mono], Default::default()).unwrap();
        let clip = synth_bgm(&BgmSpec::wav_file(path), 1.2, 0).unwrap();
        assert_eq!(clip.len(), 57_600);
        assert_eq!(clip.left, clip.right);
        assert!((clip.left.peak() - 0.5).abs() < 0.02);
    }
}
