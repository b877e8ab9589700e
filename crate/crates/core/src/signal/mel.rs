use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular, area-normalized mel filters, `[b × n_freq]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFilterBank {
    pub weights: Vec<f64>,
    pub b: usize,
    pub n_freq: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl MelFilterBank {
    pub fn new(b: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if b == 0 {
            return Err(Error::Config("mel bank needs at least one bin".into()));
        }
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel range must satisfy 0 <= f_min < f_max <= {nyquist}, got [{f_min}, {f_max}]"
            )));
        }
        if n_fft < 2 {
            return Err(Error::Config("n_fft too small".into()));
        }
        let n_freq = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..b + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (b + 1) as f64))
            .collect();
        let mut weights = vec![0.0; b * n_freq];
        for m in 0..b {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let area = 2.0 / (hi - lo);
            let row = &mut weights[m * n_freq..(m + 1) * n_freq];
            for (f, w) in row.iter_mut().enumerate() {
                let hz = f as f64 * bin_hz;
                let tri = if hz > lo && hz <= c {
                    (hz - lo) / (c - lo)
                } else if hz > c && hz < hi {
                    (hi - hz) / (hi - c)
                } else {
                    0.0
                };
                *w = tri * area;
            }
            // filters narrower than one FFT bin fall between bins; give them
            // the nearest bin so every row observes some energy
            if row.iter().all(|&w| w == 0.0) {
                let nearest = ((c / bin_hz).round() as usize).min(n_freq - 1);
                row[nearest] = area;
            }
        }
        Ok(Self {
            weights,
            b,
            n_freq,
            f_min,
            f_max,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_freq..(m + 1) * self.n_freq]
    }

    /// Non-zero span `[first, last]` of each row, cached by callers that
    /// project many frames.
    pub fn support(&self) -> Vec<(usize, usize)> {
        (0..self.b)
            .map(|m| {
                let row = self.row(m);
                let first = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w != 0.0).unwrap_or(0);
                (first, last)
            })
            .collect()
    }

    /// `H · x` for `x: [n_freq × T]` row-major, returning `[b × T]`.
    pub fn project(&self, x: &[f64], frames: usize) -> Result<Vec<f64>> {
        if x.len() != self.n_freq * frames {
            return Err(Error::dim(format!(
                "mel projection expects {} x {frames}, got {} values",
                self.n_freq,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.b * frames];
        for (m, (first, last)) in self.support().into_iter().enumerate() {
            let row = self.row(m);
            let dst = &mut out[m * frames..(m + 1) * frames];
            for (f, &wt) in row.iter().enumerate().take(last + 1).skip(first) {
                if wt == 0.0 {
                    continue;
                }
                let src = &x[f * frames..(f + 1) * frames];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
            }
        }
        Ok(out)
    }
}
