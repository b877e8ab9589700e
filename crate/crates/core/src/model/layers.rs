use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Weights initialized uniformly with variance `1 / fan_in`; biases zero.
pub(crate) fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    /// `[cout, cin, k...]` weights.
    pub fn new(store: &mut ParamStore, name: &str, cout: usize, cin: usize, kernel: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        Ok(Self {
            w: store.add(format!("{name}.w"), uniform_fan_in(&shape, fan_in, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
        })
    }

    /// Transposed-conv weights `[cin, cout, k]`.
    pub fn new_transposed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), uniform_fan_in(&[cin, cout, k], cin * k, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn conv2d(&self, t: &mut Tape, p: &[Var], x: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        t.conv2d(x, p[self.w.index()], p[self.b.index()], stride, pad)
    }

    pub fn conv1d(&self, t: &mut Tape, p: &[Var], x: Var, stride: usize, pad: usize) -> Result<Var> {
        t.conv1d(x, p[self.w.index()], p[self.b.index()], stride, pad)
    }

    pub fn conv_transpose1d(&self, t: &mut Tape, p: &[Var], x: Var, stride: usize, pad: usize) -> Result<Var> {
        t.conv_transpose1d(x, p[self.w.index()], p[self.b.index()], stride, pad)
    }
}

/// `x W + b` on the last axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), uniform_fan_in(&[din, dout], din, rng))?,
            b: if bias {
                Some(store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let y = t.matmul(x, p[self.w.index()])?;
        match self.b {
            Some(b) => t.add(y, p[b.index()]),
            None => Ok(y),
        }
    }
}

/// Pre-norm transformer block: self-attention then a GELU MLP, both residual.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    up: Linear,
    down: Linear,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, e: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), e, e, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), e, e, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), e, e, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), e, e, true, rng)?,
            up: Linear::new(store, &format!("{name}.mlp_up"), e, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.mlp_down"), hidden, e, true, rng)?,
        })
    }

    /// `x: [N, L, e]` to `[N, L, e]`.
    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = t.layer_norm(x, 2)?;
        let q = self.q.forward(t, p, h)?;
        let k = self.k.forward(t, p, h)?;
        let v = self.v.forward(t, p, h)?;
        let (a, _) = t.scaled_dot_product_attention(q, k, v)?;
        let a = self.o.forward(t, p, a)?;
        let x = t.add(x, a)?;
        let h = t.layer_norm(x, 2)?;
        let h = self.up.forward(t, p, h)?;
        let h = t.gelu(h);
        let h = self.down.forward(t, p, h)?;
        t.add(x, h)
    }
}
