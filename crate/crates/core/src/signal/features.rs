use serde::{Deserialize, Serialize};

use super::{IntensityFeature, InputFeature, LogMelSpectrogram, MelFilterBank, StftGrid};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const INPUT_CHANNELS: usize = 11;
/// Added to mel power before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
/// Intensity vectors with a smaller norm are treated as silence.
pub const ZERO_NORM_GUARD: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-8;

/// `log(H · |X|² + floor)` for one channel, returned as `[1 × b × T]`.
pub fn log_mel(grid: &StftGrid, bank: &MelFilterBank, floor_eps: f64) -> Result<LogMelSpectrogram> {
    if grid.n_freq != bank.n_freq {
        return Err(Error::dim(format!(
            "mel bank expects {} bins, grid has {}",
            bank.n_freq, grid.n_freq
        )));
    }
    let mel = bank.project(&grid.power(), grid.frames)?;
    let values = mel.into_iter().map(|p| (p + floor_eps).ln()).collect();
    Ok(LogMelSpectrogram {
        values: Tensor::new(&[1, bank.b, grid.frames], values)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensityNorm {
    #[default]
    L2,
    L1,
}

impl IntensityNorm {
    fn norm(self, v: [f64; 3]) -> f64 {
        match self {
            IntensityNorm::L2 => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(),
            IntensityNorm::L1 => v[0].abs() + v[1].abs() + v[2].abs(),
        }
    }
}

/// Per-bin `Re{W* · (X, Y, Z)}`, normalized to unit length, then projected
/// onto the mel bank: `[3 × b × T]`. Bins whose norm is below
/// [`ZERO_NORM_GUARD`] contribute a zero vector.
pub fn intensity_vector(
    w: &StftGrid,
    x: &StftGrid,
    y: &StftGrid,
    z: &StftGrid,
    bank: &MelFilterBank,
    norm: IntensityNorm,
) -> Result<IntensityFeature> {
    if !(w.same_shape(x) && w.same_shape(y) && w.same_shape(z)) {
        return Err(Error::dim("intensity inputs differ in shape"));
    }
    if w.n_freq != bank.n_freq {
        return Err(Error::dim("mel bank does not match STFT grid"));
    }
    let n = w.bins.len();
    let mut dirs = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let wc = w.bins[i].conj();
        let v = [
            (wc * x.bins[i]).re,
            (wc * y.bins[i]).re,
            (wc * z.bins[i]).re,
        ];
        let len = norm.norm(v);
        if len >= ZERO_NORM_GUARD {
            for c in 0..3 {
                dirs[c][i] = v[c] / len;
            }
        }
    }
    let mut values = Vec::with_capacity(3 * bank.b * w.frames);
    for d in &dirs {
        values.extend(bank.project(d, w.frames)?);
    }
    Ok(IntensityFeature {
        values: Tensor::new(&[3, bank.b, w.frames], values)?,
    })
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of each leading-axis channel of `t`.
    pub fn of(t: &Tensor) -> Self {
        let mut acc = StatsAccumulator::new(t.shape()[0]);
        acc.push(t).expect("channel count matches");
        acc.finish()
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Streaming per-channel moments over many `[C × ...]` tensors.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            count: vec![0.0; channels],
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn push(&mut self, t: &Tensor) -> Result<()> {
        let c = self.mean.len();
        if t.shape().first() != Some(&c) {
            return Err(Error::dim(format!("expected {c} channels, got {:?}", t.shape())));
        }
        let plane = t.numel() / c;
        for (ch, vals) in t.data().chunks(plane).enumerate() {
            // Chan et al. pairwise merge of (count, mean, m2)
            let n_b = vals.len() as f64;
            if n_b == 0.0 {
                continue;
            }
            let mean_b = vals.iter().sum::<f64>() / n_b;
            let m2_b: f64 = vals.iter().map(|v| (v - mean_b) * (v - mean_b)).sum();
            let n_a = self.count[ch];
            let delta = mean_b - self.mean[ch];
            let n = n_a + n_b;
            self.mean[ch] += delta * n_b / n;
            self.m2[ch] += m2_b + delta * delta * n_a * n_b / n;
            self.count[ch] = n;
        }
        Ok(())
    }

    pub fn finish(&self) -> ChannelStats {
        ChannelStats {
            mean: self.mean.clone(),
            std: self
                .m2
                .iter()
                .zip(&self.count)
                .map(|(m2, n)| if *n > 0.0 { (m2 / n).sqrt() } else { 1.0 })
                .collect(),
        }
    }
}

/// `(t[c] - mean[c]) / max(std[c], 1e-8)` for every leading-axis channel.
pub fn standardize_channels(t: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let c = stats.channels();
    if t.shape().first() != Some(&c) || stats.std.len() != c {
        return Err(Error::dim(format!(
            "standardize: {c} channel stats for tensor {:?}",
            t.shape()
        )));
    }
    let plane = t.numel() / c;
    let mut out = t.clone();
    for (ch, vals) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_FLOOR));
        vals.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

/// Log-domain pseudo transfer functions: for each speaker `i` and recorded
/// channel `c`, `S'[c] - M'[i]`. Output `[8 × b × T]`, left block first.
pub fn difference_features(
    recorded: &LogMelSpectrogram,
    music_left: &LogMelSpectrogram,
    music_right: &LogMelSpectrogram,
) -> Result<Tensor> {
    if recorded.channels() != 4 || music_left.channels() != 1 || music_right.channels() != 1 {
        return Err(Error::dim("difference features need 4 recorded and 1+1 music channels"));
    }
    let (b, t) = (recorded.bins(), recorded.frames());
    for m in [music_left, music_right] {
        if m.bins() != b || m.frames() != t {
            return Err(Error::dim(format!(
                "music spectrogram {:?} vs recorded {:?}",
                m.values.shape(),
                recorded.values.shape()
            )));
        }
    }
    let plane = b * t;
    let mut out = Vec::with_capacity(8 * plane);
    for m in [music_left, music_right] {
        let md = m.values.data();
        for c in 0..4 {
            let sd = &recorded.values.data()[c * plane..(c + 1) * plane];
            out.extend(sd.iter().zip(md).map(|(s, m)| s - m));
        }
    }
    Tensor::new(&[8, b, t], out)
}

/// Concatenates intensity (3) and difference (8) channels into the
/// 11-channel network input.
pub fn assemble_input(intensity: &IntensityFeature, diffs: &Tensor) -> Result<InputFeature> {
    let (si, sd) = (intensity.values.shape(), diffs.shape());
    if si.len() != 3 || sd.len() != 3 || si[0] != 3 || sd[0] != 8 || si[1..] != sd[1..] {
        return Err(Error::dim(format!("assemble: intensity {si:?}, diffs {sd:?}")));
    }
    let mut data = Vec::with_capacity(intensity.values.numel() + diffs.numel());
    data.extend_from_slice(intensity.values.data());
    data.extend_from_slice(diffs.data());
    Ok(InputFeature {
        values: Tensor::new(&[INPUT_CHANNELS, si[1], si[2]], data)?,
    })
}
