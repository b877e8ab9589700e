use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::MonoSignal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; n],
        }
    }
}

/// How frames are laid over the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// No padding: `floor((len - n_fft) / hop) + 1` frames.
    None,
    /// Zero-pad `(n_fft - hop) / 2` on both sides so frame `t` is centred on
    /// the hop interval `[t·hop, (t+1)·hop)`; a signal of `k·hop` samples
    /// yields exactly `k` frames.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftParams {
    pub n_fft: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub padding: Padding,
}

impl Default for StftParams {
    /// 4096-point Hann frames every 2400 samples: 20 frames/s at 48 kHz.
    fn default() -> Self {
        Self {
            n_fft: 4096,
            hop: 2400,
            window: WindowKind::Hann,
            padding: Padding::Center,
        }
    }
}

impl StftParams {
    pub fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() {
            return Err(Error::Config(format!("n_fft {} is not a power of two", self.n_fft)));
        }
        if self.hop == 0 {
            return Err(Error::Config("hop must be positive".into()));
        }
        if self.padding == Padding::Center && self.hop > self.n_fft {
            return Err(Error::Config("centred padding needs hop <= n_fft".into()));
        }
        Ok(())
    }

    pub fn n_freq(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        match self.padding {
            Padding::None => {
                if len < self.n_fft {
                    0
                } else {
                    (len - self.n_fft) / self.hop + 1
                }
            }
            Padding::Center => {
                let padded = len + 2 * self.pad_left();
                if padded < self.n_fft {
                    0
                } else {
                    (padded - self.n_fft) / self.hop + 1
                }
            }
        }
    }

    fn pad_left(&self) -> usize {
        match self.padding {
            Padding::None => 0,
            Padding::Center => (self.n_fft - self.hop) / 2,
        }
    }
}

/// One-sided complex spectrogram, `[n_freq × T]` row-major by frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct StftGrid {
    pub bins: Vec<Complex64>,
    pub n_freq: usize,
    pub frames: usize,
    pub params: StftParams,
    pub frame_rate: f64,
}

impl StftGrid {
    pub fn at(&self, f: usize, t: usize) -> Complex64 {
        self.bins[f * self.frames + t]
    }

    pub fn same_shape(&self, other: &StftGrid) -> bool {
        self.n_freq == other.n_freq && self.frames == other.frames
    }

    pub fn power(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Reusable STFT with a cached FFT plan and window.
pub struct StftProcessor {
    params: StftParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftProcessor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftProcessor").field("params", &self.params).finish()
    }
}

impl StftProcessor {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
        Ok(Self {
            window: params.window.coefficients(params.n_fft),
            params,
            fft,
        })
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn process(&self, signal: &MonoSignal) -> Result<StftGrid> {
        let p = &self.params;
        if signal.len() < p.n_fft {
            return Err(Error::EmptyInput(format!(
                "signal of {} samples is shorter than one {}-point window",
                signal.len(),
                p.n_fft
            )));
        }
        let frames = p.frame_count(signal.len());
        let n_freq = p.n_freq();
        let pad = p.pad_left() as isize;
        let mut bins = vec![Complex64::default(); n_freq * frames];
        let mut buf = vec![Complex64::default(); p.n_fft];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        let s = &signal.samples;
        for t in 0..frames {
            let start = (t * p.hop) as isize - pad;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if idx >= 0 && (idx as usize) < s.len() {
                    s[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(v * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..n_freq {
                bins[f * frames + t] = buf[f];
            }
        }
        Ok(StftGrid {
            bins,
            n_freq,
            frames,
            params: *p,
            frame_rate: signal.sample_rate as f64 / p.hop as f64,
        })
    }
}

pub fn stft(signal: &MonoSignal, params: &StftParams) -> Result<StftGrid> {
    StftProcessor::new(*params)?.process(signal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, len: usize, sr: u32) -> MonoSignal {
        MonoSignal::new(
            (0..len)
                .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        let params = StftParams {
            n_fft: 1024,
            hop: 256,
            window: WindowKind::Hann,
            padding: Padding::None,
        };
        let sr = 48_000;
        let k = 37;
        let f = k as f64 * sr as f64 / params.n_fft as f64;
        let grid = stft(&sine(f, 8192, sr), &params).unwrap();
        for t in 0..grid.frames {
            let mags: Vec<f64> = (0..grid.n_freq).map(|b| grid.at(b, t).norm()).collect();
            let peak = mags
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(peak, k);
            for (b, m) in mags.iter().enumerate() {
                if b.abs_diff(k) > 1 {
                    assert!(20.0 * (mags[k] / m.max(1e-300)).log10() >= 20.0);
                }
            }
        }
    }

    #[test]
    fn frame_counts() {
        let p = StftParams::default();
        assert_eq!(p.frame_count(48_000 * 60), 1200);
        assert_eq!(p.frame_count(2400 * 12), 12);
        let none = StftParams {
            padding: Padding::None,
            ..p
        };
        assert_eq!(none.frame_count(10_000), (10_000 - 4096) / 2400 + 1);
        let grid = stft(&MonoSignal::silent(2400 * 12, 48_000), &p).unwrap();
        assert_eq!(grid.frames, 12);
        assert_eq!(grid.n_freq, 2049);
        assert_eq!(grid.frame_rate, 20.0);
    }

    #[test]
    fn zero_signal_gives_zero_grid() {
        let grid = stft(&MonoSignal::silent(5000, 48_000), &StftParams::default()).unwrap();
        assert!(grid.bins.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_signal_is_empty_input() {
        let r = stft(&MonoSignal::silent(100, 48_000), &StftParams::default());
        assert!(matches!(r, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn non_power_of_two_rejected() {
        let p = StftParams {
            n_fft: 1000,
            ..StftParams::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }
}
