use std::f64::consts::PI;

use super::MonoSignal;
use crate::error::{Error, Result};

const HALF_TAPS: isize = 16;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel. The cutoff
/// follows the lower of the two Nyquist rates.
pub fn resample(signal: &MonoSignal, target_rate: u32) -> Result<MonoSignal> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == signal.sample_rate {
        return Ok(signal.clone());
    }
    let ratio = target_rate as f64 / signal.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let out_len = (signal.len() as f64 * ratio).round() as usize;
    let s = &signal.samples;
    let half = (HALF_TAPS as f64 / cutoff).ceil() as isize;
    let out = (0..out_len)
        .map(|n| {
            let pos = n as f64 / ratio;
            let center = pos.floor() as isize;
            let mut acc = 0.0;
            for k in (center - half + 1)..=(center + half) {
                if k < 0 || k as usize >= s.len() {
                    continue;
                }
                let d = pos - k as f64;
                let win = 0.5 + 0.5 * (PI * d / (half as f64 + 1.0)).cos();
                acc += s[k as usize] * cutoff * sinc(cutoff * d) * win;
            }
            acc
        })
        .collect();
    MonoSignal::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_preserves_a_low_tone() {
        let f = 440.0;
        let src = MonoSignal::new(
            (0..44_100).map(|i| (2.0 * PI * f * i as f64 / 44_100.0).sin()).collect(),
            44_100,
        )
        .unwrap();
        let out = resample(&src, 48_000).unwrap();
        assert_eq!(out.len(), 48_000);
        // ignore kernel edge effects
        for i in 1000..47_000 {
            let expect = (2.0 * PI * f * i as f64 / 48_000.0).sin();
            assert!((out.samples[i] - expect).abs() < 2e-3, "{i}");
        }
    }

    #[test]
    fn same_rate_is_identity() {
        let s = MonoSignal::new(vec![0.1, -0.2, 0.3], 48_000).unwrap();
        assert_eq!(resample(&s, 48_000).unwrap(), s);
    }
}
