//! Deterministic DSP kernels: STFT, mel projection, intensity vectors,
//! log-mel difference features and assembly of the 11-channel network input.
//!
//! Channel layout of [`InputFeature`]:
//!
//! | channels | content                               |
//! |----------|---------------------------------------|
//! | 0..3     | mel intensity vector (x, y, z)        |
//! | 3..7     | recorded (w,x,y,z) minus left music   |
//! | 7..11    | recorded (w,x,y,z) minus right music  |

mod features;
mod io;
mod mel;
mod resample;
mod stft;
mod wav;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use features::{
    assemble_input, difference_features, intensity_vector, log_mel, standardize_channels,
    ChannelStats, IntensityNorm, StatsAccumulator, INPUT_CHANNELS, LOG_FLOOR, ZERO_NORM_GUARD,
};
pub use io::{read_feature, write_feature, Dtype, FeatureMeta};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterBank};
pub use resample::resample;
pub use stft::{stft, Padding, StftGrid, StftParams, StftProcessor, WindowKind};
pub use wav::{read_wav, write_wav, WavFormat};

pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;

/// One channel of audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonoSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl MonoSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silent(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn check_same(channels: &[&MonoSignal], what: &str) -> Result<()> {
    let first = channels[0];
    for c in &channels[1..] {
        if c.len() != first.len() || c.sample_rate != first.sample_rate {
            return Err(Error::dim(format!(
                "{what}: channels differ in length or rate ({} @ {} vs {} @ {})",
                c.len(),
                c.sample_rate,
                first.len(),
                first.sample_rate
            )));
        }
    }
    Ok(())
}

/// First-order ambisonics recording in (w, x, y, z) order.
#[derive(Debug, Clone, PartialEq)]
pub struct BFormatClip {
    pub w: MonoSignal,
    pub x: MonoSignal,
    pub y: MonoSignal,
    pub z: MonoSignal,
}

impl BFormatClip {
    pub fn new(w: MonoSignal, x: MonoSignal, y: MonoSignal, z: MonoSignal) -> Result<Self> {
        check_same(&[&w, &x, &y, &z], "b-format clip")?;
        Ok(Self { w, x, y, z })
    }

    pub fn channels(&self) -> [&MonoSignal; 4] {
        [&self.w, &self.x, &self.y, &self.z]
    }

    pub fn channels_mut(&mut self) -> [&mut MonoSignal; 4] {
        [&mut self.w, &mut self.x, &mut self.y, &mut self.z]
    }

    pub fn from_channels(mut ch: Vec<MonoSignal>) -> Result<Self> {
        if ch.len() != 4 {
            return Err(Error::dim(format!("b-format needs 4 channels, got {}", ch.len())));
        }
        let z = ch.pop().unwrap();
        let y = ch.pop().unwrap();
        let x = ch.pop().unwrap();
        let w = ch.pop().unwrap();
        Self::new(w, x, y, z)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.w.sample_rate
    }
}

/// Two-channel emitted music, one channel per loudspeaker.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoClip {
    pub left: MonoSignal,
    pub right: MonoSignal,
}

impl StereoClip {
    pub fn new(left: MonoSignal, right: MonoSignal) -> Result<Self> {
        check_same(&[&left, &right], "stereo clip")?;
        Ok(Self { left, right })
    }

    pub fn channels(&self) -> [&MonoSignal; 2] {
        [&self.left, &self.right]
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.left.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.left.duration()
    }
}

/// `[channels × b × T]` log-mel power.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Tensor,
}

impl LogMelSpectrogram {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }

    /// Concatenates single- or multi-channel spectrograms along the channel axis.
    pub fn stack(parts: &[LogMelSpectrogram]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::EmptyInput("no spectrograms".into()))?;
        let (b, t) = (first.bins(), first.frames());
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            if p.bins() != b || p.frames() != t {
                return Err(Error::dim("spectrogram shapes differ"));
            }
            data.extend_from_slice(p.values.data());
            c += p.channels();
        }
        Ok(Self {
            values: Tensor::new(&[c, b, t], data)?,
        })
    }

    pub fn channel(&self, c: usize) -> LogMelSpectrogram {
        let (b, t) = (self.bins(), self.frames());
        Self {
            values: Tensor::new(&[1, b, t], self.values.index0(c).into_data()).expect("channel slice"),
        }
    }
}

/// `[3 × b × T]` mel-projected, per-bin normalized intensity direction.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFeature {
    pub values: Tensor,
}

/// `[11 × b × T]` network input; see the module docs for the channel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct InputFeature {
    pub values: Tensor,
}

impl InputFeature {
    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }

    /// Channels `[start, end)` as a `[end-start × b × T]` tensor.
    pub fn channel_range(&self, start: usize, end: usize) -> Tensor {
        let plane = self.bins() * self.frames();
        Tensor::new(
            &[end - start, self.bins(), self.frames()],
            self.values.data()[start * plane..end * plane].to_vec(),
        )
        .expect("channel range")
    }
}

/// Frames `[start, start+len)` of a `[C × b × T]` tensor.
pub fn time_window(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || start + len > s[2] {
        return Err(Error::dim(format!("window {start}+{len} of {s:?}")));
    }
    let (c, b, total) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * b * len);
    for row in t.data().chunks(total) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new(&[c, b, len], data)
}
