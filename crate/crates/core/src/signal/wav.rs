use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use super::MonoSignal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    #[default]
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a 16/24-bit PCM or 32-bit float WAV into one signal per channel.
pub fn read_wav(path: &Path) -> Result<Vec<MonoSignal>> {
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::Data(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err(path))?
        }
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported sample format {fmt:?}/{bits}",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, v) in frame.iter().enumerate() {
            channels[c].push(*v);
        }
    }
    channels
        .into_iter()
        .map(|s| MonoSignal::new(s, spec.sample_rate))
        .collect()
}

pub fn write_wav(path: &Path, channels: &[&MonoSignal], format: WavFormat) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::EmptyInput("no channels to write".into()))?;
    if channels.iter().any(|c| c.len() != first.len() || c.sample_rate != first.sample_rate) {
        return Err(Error::dim("wav channels differ in length or rate"));
    }
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Pcm24 => (24, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: channels.len() as u16,
        sample_rate: first.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..first.len() {
        for c in channels {
            let v = c.samples[i];
            match format {
                WavFormat::Float32 => writer.write_sample(v as f32),
                WavFormat::Pcm16 | WavFormat::Pcm24 => {
                    let scale = (1i64 << (bits - 1)) as f64;
                    writer.write_sample((v * scale).round().clamp(-scale, scale - 1.0) as i32)
                }
            }
            .map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(sr: u32, phase: f64) -> MonoSignal {
        MonoSignal::new((0..500).map(|i| 0.8 * (i as f64 * 0.05 + phase).sin()).collect(), sr).unwrap()
    }

    #[test]
    fn formats_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let chans: Vec<MonoSignal> = (0..4).map(|c| tone(48_000, c as f64)).collect();
        let refs: Vec<&MonoSignal> = chans.iter().collect();
        for (fmt, tol) in [
            (WavFormat::Pcm16, 1.0 / 32768.0),
            (WavFormat::Pcm24, 1.0 / 8_388_608.0),
            (WavFormat::Float32, 1e-7),
        ] {
            let path = dir.path().join(format!("{fmt:?}.wav"));
            write_wav(&path, &refs, fmt).unwrap();
            let back = read_wav(&path).unwrap();
            assert_eq!(back.len(), 4);
            for (a, b) in back.iter().zip(&chans) {
                assert_eq!(a.sample_rate, 48_000);
                for (x, y) in a.samples.iter().zip(&b.samples) {
                    assert!((x - y).abs() <= tol, "{fmt:?}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF0000WAVEjunk").unwrap();
        assert!(matches!(read_wav(&path), Err(Error::Wav { .. })));
    }
}
