use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the smoothness term.
    pub w_alpha: f64,
    /// Weight of the contrastive term.
    pub w_beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_alpha: 100.0,
            w_beta: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_alpha >= 0.0 && self.w_beta >= 0.0 && self.tau > 0.0) {
            return Err(Error::Config(format!("loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE between row-aligned unit embeddings `[N, e]`.
pub fn contrastive_loss(t: &mut Tape, z_pose: Var, z_audio: Var, tau: f64) -> Result<Var> {
    let (sp, sa) = (t.shape(z_pose).to_vec(), t.shape(z_audio).to_vec());
    if sp.len() != 2 || sp != sa || sp[0] == 0 {
        return Err(Error::dim(format!("contrastive inputs {sp:?} / {sa:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    for v in [z_pose, z_audio] {
        for row in t.value(v).data().chunks(sp[1]) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Contract(format!("embedding row has norm {n}")));
            }
        }
    }
    let n = sp[0];
    let at = t.transpose(z_audio)?;
    let sim = t.matmul(z_pose, at)?;
    let logits = t.scale(sim, 1.0 / tau);
    let rows = t.log_softmax(logits, 1)?;
    let cols = t.log_softmax(logits, 0)?;
    let both = t.add(rows, cols)?;
    let eye = t.constant(Tensor::eye(n));
    let diag = t.mul(both, eye)?;
    let s = t.sum(diag);
    Ok(t.scale(s, -1.0 / (2 * n) as f64))
}

/// Mean squared error over every joint coordinate.
pub fn pose_loss(t: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    t.mse(pred, truth)
}

/// Mean squared error between predicted and true frame-to-frame
/// displacements; time is axis 1 of `[N, T, ...]`.
pub fn smooth_loss(t: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let s = t.shape(pred).to_vec();
    if s != t.shape(truth) {
        return Err(Error::dim(format!("smooth loss {s:?} vs {:?}", t.shape(truth))));
    }
    if s.len() < 2 || s[1] < 2 {
        return Err(Error::Contract(format!("smooth loss needs at least 2 frames, got {s:?}")));
    }
    let frames = s[1];
    let vel = |t: &mut Tape, x: Var| -> Result<Var> {
        let a = t.slice(x, 1, 1, frames)?;
        let b = t.slice(x, 1, 0, frames - 1)?;
        t.sub(a, b)
    };
    let vp = vel(t, pred)?;
    let vt = vel(t, truth)?;
    t.mse(vp, vt)
}

/// `pose + w_alpha * smooth + w_beta * cpe`.
pub fn total_loss(t: &mut Tape, pose: Var, smooth: Var, cpe: Var, w: &LossWeights) -> Result<Var> {
    let a = t.scale(smooth, w.w_alpha);
    let b = t.scale(cpe, w.w_beta);
    let s = t.add(pose, a)?;
    t.add(s, b)
}
