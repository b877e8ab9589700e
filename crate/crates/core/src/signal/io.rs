use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StftParams;
use crate::autodiff::{index_path, Tensor};
use crate::error::{Error, Result};

/// JSON sidecar written next to every feature tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMeta {
    pub shape: Vec<usize>,
    pub channel_layout: Vec<String>,
    pub dtype: String,
    pub stft_params: StftParams,
}

impl FeatureMeta {
    pub fn input_layout() -> Vec<String> {
        let mut names: Vec<String> = ["intensity_x", "intensity_y", "intensity_z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for side in ["left", "right"] {
            for c in ["w", "x", "y", "z"] {
                names.push(format!("diff_{side}_{c}"));
            }
        }
        names
    }
}

/// On-disk element type of feature files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Writes `t` as flat little-endian floats at `path` with a `.json` sidecar.
pub fn write_feature(path: &Path, t: &Tensor, channel_layout: Vec<String>, stft_params: StftParams, dtype: Dtype) -> Result<()> {
    let meta = FeatureMeta {
        shape: t.shape().to_vec(),
        channel_layout,
        dtype: dtype.name().into(),
        stft_params,
    };
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        match dtype {
            Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = index_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn read_feature(path: &Path) -> Result<(Tensor, FeatureMeta)> {
    let side = index_path(path);
    let meta: FeatureMeta =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let data: Vec<f64> = match meta.dtype.as_str() {
        "f32" => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        "f64" => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        other => return Err(Error::Data(format!("unsupported feature dtype {other}"))),
    };
    let t = Tensor::new(&meta.shape, data)
        .map_err(|_| Error::Data(format!("{}: size does not match sidecar shape", path.display())))?;
    Ok((t, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w0.bin");
        let t = Tensor::from_fn(&[11, 4, 12], |i| (i as f64 * 0.25) - 3.0);
        write_feature(&path, &t, FeatureMeta::input_layout(), StftParams::default(), Dtype::F32).unwrap();
        let (back, meta) = read_feature(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(meta.channel_layout.len(), 11);
        assert_eq!(meta.channel_layout[3], "diff_left_w");
        let sidecar: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("w0.json")).unwrap()).unwrap();
        assert_eq!(sidecar["stft_params"]["hop"], 2400);
    }
}
