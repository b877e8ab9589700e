use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::{BFormatClip, MonoSignal};

fn noisy(ch: &MonoSignal, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<MonoSignal> {
    let p = ch.power();
    if p == 0.0 {
        return Ok(ch.clone());
    }
    let sigma = (p / 10f64.powf(snr_db / 10.0)).sqrt();
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::Numerical(e.to_string()))?;
    MonoSignal::new(ch.samples.iter().map(|v| v + dist.sample(rng)).collect(), ch.sample_rate)
}

/// White Gaussian noise at `snr_db` relative to each channel's own power.
/// Channels that are exactly silent are left untouched.
pub fn add_gaussian_noise(clip: &BFormatClip, snr_db: f64, seed: u64) -> Result<BFormatClip> {
    if snr_db.is_nan() {
        return Err(Error::Config("snr must be a number".into()));
    }
    if clip.channels().iter().all(|c| c.power() == 0.0) {
        return Err(Error::Data("cannot set an SNR on a silent clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = clip
        .channels()
        .iter()
        .map(|c| noisy(c, snr_db, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    BFormatClip::from_channels(ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(n: usize) -> BFormatClip {
        let ch = |f: f64, a: f64| {
            MonoSignal::new((0..n).map(|i| a * (f * i as f64).sin()).collect(), 48_000).unwrap()
        };
        BFormatClip::new(ch(0.01, 0.7), ch(0.02, 0.3), ch(0.05, 0.2), ch(0.003, 0.05)).unwrap()
    }

    #[test]
    fn measured_snr_matches_request() {
        let c = clip(96_000);
        let n = add_gaussian_noise(&c, 10.0, 3).unwrap();
        for (a, b) in c.channels().iter().zip(n.channels()) {
            let noise: f64 = a.samples.iter().zip(&b.samples).map(|(x, y)| (y - x).powi(2)).sum::<f64>() / a.len() as f64;
            let snr = 10.0 * (a.power() / noise).log10();
            assert!((snr - 10.0).abs() < 0.2, "snr {snr}");
        }
    }

    #[test]
    fn huge_snr_is_near_identity() {
        let c = clip(10_000);
        let n = add_gaussian_noise(&c, 120.0, 0).unwrap();
        let diff: f64 = c.w.samples.iter().zip(&n.w.samples).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(diff.sqrt() / c.w.power().sqrt() / (c.len() as f64).sqrt() < 1e-3);
    }

    #[test]
    fn deterministic_and_rejects_silence() {
        let c = clip(1000);
        assert_eq!(add_gaussian_noise(&c, 10.0, 1).unwrap(), add_gaussian_noise(&c, 10.0, 1).unwrap());
        assert_ne!(add_gaussian_noise(&c, 10.0, 1).unwrap(), add_gaussian_noise(&c, 10.0, 2).unwrap());
        let s = MonoSignal::silent(100, 48_000);
        let silent = BFormatClip::new(s.clone(), s.clone(), s.clone(), s).unwrap();
        assert!(matches!(add_gaussian_noise(&silent, 10.0, 0), Err(Error::Data(_))));
    }
}
