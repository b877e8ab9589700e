use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        /// Geometry of the adjoint convolution (output -> input).
        geom: ConvGeom,
        batch: usize,
        cin: usize,
    },
    Relu(Var),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    BroadcastLeading(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const NORM_EPS: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Append-only record of a forward computation, replayed in reverse by
/// [`Tape::backward`]. Nodes are stored in creation order, which is a
/// topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of `store`, zero-filled where the
    /// parameter did not influence the loss.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .enumerate()
            .map(|(i, (_, t))| match self.grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose first `store.len()` leaves are the parameters, in store
    /// order, all requiring gradients.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut tape = Self::new();
        for (_, t) in store.iter() {
            tape.leaf(t.clone());
        }
        tape.n_params = store.len();
        tape
    }

    pub fn param(&self, id: ParamId) -> Var {
        debug_assert!(id.index() < self.n_params, "parameter not bound");
        Var(id.index())
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- elementwise -------------------------------------------------

    fn broadcast_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok(sa.to_vec())
        } else if is_suffix(sa, sb) {
            Ok(sb.to_vec())
        } else {
            Err(Error::dim(format!("{what}: {sa:?} vs {sb:?}")))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        Tensor::new(shape, data).expect("broadcast shape")
    }

    /// Elementwise sum; the smaller operand may be a trailing-dims suffix of
    /// the larger and is then repeated over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "add")?;
        let out = self.zip_broadcast(a, b, &shape, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "sub")?;
        let out = self.zip_broadcast(a, b, &shape, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, &shape, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a learned embedding table to every leading slice of `x`.
    pub fn embedding_add(&mut self, x: Var, table: Var) -> Result<Var> {
        if !is_suffix(self.shape(table), self.shape(x)) {
            return Err(Error::dim(format!(
                "embedding {:?} does not match trailing dims of {:?}",
                self.shape(table),
                self.shape(x)
            )));
        }
        self.add(x, table)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len).map(|k| d[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (d[base + k * inner] - mx).exp();
                    d[base + k * inner] = e;
                    z += e;
                }
                for k in 0..len {
                    d[base + k * inner] /= z;
                }
            }
        }
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let mut out = x.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len).map(|k| d[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|k| (d[base + k * inner] - mx).exp()).sum::<f64>().ln();
                for k in 0..len {
                    d[base + k * inner] -= lse;
                }
            }
        }
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Unit-L2 rows along the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let len = *x.shape().last().ok_or_else(|| Error::dim("l2_normalize of a scalar"))?;
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.numel() / len.max(1));
        for row in out.data_mut().chunks_mut(len) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2Normalize { x: a, norms }, &[a]))
    }

    /// Parameter-free layer normalization over all axes from `start_axis`.
    pub fn layer_norm(&mut self, a: Var, start_axis: usize) -> Result<Var> {
        self.check_axis(a, start_axis)?;
        let x = self.value(a);
        let group: usize = x.shape()[start_axis..].iter().product();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.numel() / group);
        for g in out.data_mut().chunks_mut(group) {
            let mu = g.iter().sum::<f64>() / group as f64;
            let var = g.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / group as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            g.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            inv_std.push(inv);
        }
        Ok(self.push(out, Op::LayerNorm { x: a, inv_std }, &[a]))
    }

    // ----- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = kernels::permute(self.data(a), shape, perm);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::dim(format!("concat axis {axis}: {s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[axis] {
            return Err(Error::dim(format!("slice {start}..{end} of axis {axis} in {shape:?}")));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Repeats `a` along a new leading axis of length `n`.
    pub fn broadcast_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut data = Vec::with_capacity(n * v.numel());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::BroadcastLeading(a), &[a]))
    }

    // ----- linear algebra ------------------------------------------------

    /// `a: [.., m, k]` times either a shared `b: [k, n]` or a batch of
    /// matrices `b: [.., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2: {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        if shared {
            kernels::gemm(batch * m, k, n, da, false, db, false, 0.0, &mut out);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize, cout: usize, out_shape: Vec<usize>) -> Result<Var> {
        let (k, p) = (geom.cols_rows(), geom.positions());
        if self.value(w).numel() != cout * k || self.value(b).numel() != cout {
            return Err(Error::dim(format!(
                "conv weight {:?} / bias {:?} do not match {cout} outputs x {k} taps",
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; batch * cout * p];
        let mut cols = vec![0.0; k * p];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let in_len = geom.input_len();
        for s in 0..batch {
            kernels::im2col(&xd[s * in_len..(s + 1) * in_len], &geom, &mut cols);
            let o = &mut out[s * cout * p..(s + 1) * cout * p];
            kernels::gemm(cout, k, p, wd, false, &cols, false, 0.0, o);
            for (co, row) in o.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[co]);
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom, batch, cout }, &[x, w, b]))
    }

    /// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim(format!("conv2d input {sx:?} with weight {sw:?}")));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)
            .ok_or_else(|| Error::dim(format!("conv2d kernel {sw:?} does not fit {sx:?}")))?;
        let out_shape = vec![sx[0], sw[0], geom.hout, geom.wout];
        self.conv_impl(x, w, b, geom, sx[0], sw[0], out_shape)
    }

    /// `x: [N, Cin, L]`, `w: [Cout, Cin, k]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::dim(format!("conv1d input {sx:?} with weight {sw:?}")));
        }
        let geom = ConvGeom::new(sx[1], 1, sx[2], 1, sw[2], (1, stride), (0, pad))
            .ok_or_else(|| Error::dim(format!("conv1d kernel {sw:?} does not fit {sx:?}")))?;
        let out_shape = vec![sx[0], sw[0], geom.wout];
        self.conv_impl(x, w, b, geom, sx[0], sw[0], out_shape)
    }

    /// Transposed 1D convolution. `x: [N, Cin, L]`, `w: [Cin, Cout, k]`,
    /// output length `(L - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::dim(format!("conv_transpose1d input {sx:?} with weight {sw:?}")));
        }
        let (n, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[1], sw[2]);
        let full = (len - 1) * stride + k;
        if full <= 2 * pad {
            return Err(Error::dim("conv_transpose1d padding exceeds output"));
        }
        let out_len = full - 2 * pad;
        let geom = ConvGeom::new(cout, 1, out_len, 1, k, (1, stride), (0, pad))
            .filter(|g| g.wout == len)
            .ok_or_else(|| Error::dim("conv_transpose1d geometry"))?;
        if self.value(b).numel() != cout {
            return Err(Error::dim("conv_transpose1d bias"));
        }
        let (kk, p) = (geom.cols_rows(), geom.positions());
        let mut out = vec![0.0; n * cout * out_len];
        let mut cols = vec![0.0; kk * p];
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        for s in 0..n {
            kernels::gemm(kk, cin, p, wd, true, &xd[s * cin * p..(s + 1) * cin * p], false, 0.0, &mut cols);
            let o = &mut out[s * cout * out_len..(s + 1) * cout * out_len];
            kernels::col2im(&cols, &geom, o);
            for (co, row) in o.chunks_mut(out_len).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[co]);
            }
        }
        let out = Tensor::new(&[n, cout, out_len], out)?;
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom, batch: n, cin }, &[x, w, b]))
    }

    // ----- composites ----------------------------------------------------

    /// `softmax(q kᵀ / sqrt(d)) v` over the trailing two axes; returns the
    /// output and the attention weights.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let d = *self.shape(q).last().ok_or_else(|| Error::dim("attention on scalar"))?;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let last = self.shape(scores).len() - 1;
        let weights = self.softmax(scores, last)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("mse {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ----- reverse pass --------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`; every node reachable from it
    /// is visited exactly once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.acc(grads, *a) {
                    let n = ga.len();
                    g.iter().enumerate().for_each(|(i, v)| ga[i % n] += v);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(i, v)| gb[i % n] += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let (na, nb) = (da.len(), db.len());
                if let Some(ga) = self.acc(grads, *a) {
                    g.iter().enumerate().for_each(|(i, v)| ga[i % na] += v * db[i % nb]);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    g.iter().enumerate().for_each(|(i, v)| gb[i % nb] += v * da[i % na]);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += s * v);
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                }
            }
            Op::Log(a) => {
                let x = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let idx = |k: usize| base + k * inner;
                            if log {
                                let gs: f64 = (0..len).map(|k| g[idx(k)]).sum();
                                for k in 0..len {
                                    ga[idx(k)] += g[idx(k)] - y[idx(k)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                                for k in 0..len {
                                    ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(ga) = self.acc(grads, *x) {
                    let len = ga.len() / norms.len();
                    for (r, &n) in norms.iter().enumerate() {
                        let rng = r * len..(r + 1) * len;
                        let (yr, gr) = (&y[rng.clone()], &g[rng.clone()]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (k, o) in ga[rng].iter_mut().enumerate() {
                            *o += (gr[k] - yr[k] * dot) / n;
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(ga) = self.acc(grads, *x) {
                    let group = ga.len() / inv_std.len();
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let rng = r * group..(r + 1) * group;
                        let (yr, gr) = (&y[rng.clone()], &g[rng.clone()]);
                        let mg = gr.iter().sum::<f64>() / group as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / group as f64;
                        for (k, o) in ga[rng].iter_mut().enumerate() {
                            *o += inv * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::Permute(a, perm) => {
                let back = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&back).for_each(|(o, v)| *o += v);
                }
            }
            Op::BroadcastLeading(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = ga.len();
                    for chunk in g.chunks(n) {
                        ga.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in xs {
                        let len = self.shape(v)[*axis] * inner;
                        if let Some(gv) = self.acc(grads, v) {
                            gv[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(a, b)| *a += b);
                        }
                        offset += len;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = kernels::axis_split(&in_shape, *axis);
                let width = node.value.shape()[*axis];
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        gx[dst..dst + width * inner]
                            .iter_mut()
                            .zip(&g[src..src + width * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (da, db) = (self.data(*a), self.data(*b));
                let shared = sb.len() == 2;
                if let Some(ga) = self.acc(grads, *a) {
                    if shared {
                        kernels::gemm(batch * m, n, k, g, false, db, true, 1.0, ga);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], false, &db[i * k * n..(i + 1) * k * n], true, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if shared {
                        kernels::gemm(k, batch * m, n, da, true, g, false, 1.0, gb);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(k, m, n, &da[i * m * k..(i + 1) * m * k], true, &g[i * m * n..(i + 1) * m * n], false, 1.0, &mut gb[i * k * n..(i + 1) * k * n]);
                        }
                    }
                }
            }
            Op::Conv { x, w, b, geom, batch, cout } => {
                let (kk, p) = (geom.cols_rows(), geom.positions());
                let in_len = geom.input_len();
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gb) = self.acc(grads, *b) {
                    for s in 0..*batch {
                        for co in 0..*cout {
                            let base = (s * cout + co) * p;
                            gb[co] += g[base..base + p].iter().sum::<f64>();
                        }
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut cols = vec![0.0; kk * p];
                let mut gw_acc = vec![0.0; if need_w { cout * kk } else { 0 }];
                let mut gx_acc = vec![0.0; if need_x { batch * in_len } else { 0 }];
                for s in 0..*batch {
                    let gs = &g[s * cout * p..(s + 1) * cout * p];
                    if need_w {
                        kernels::im2col(&xd[s * in_len..(s + 1) * in_len], geom, &mut cols);
                        kernels::gemm(*cout, p, kk, gs, false, &cols, true, 1.0, &mut gw_acc);
                    }
                    if need_x {
                        kernels::gemm(kk, *cout, p, wd, true, gs, false, 0.0, &mut cols);
                        kernels::col2im(&cols, geom, &mut gx_acc[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gw.iter_mut().zip(&gw_acc).for_each(|(a, b)| *a += b);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(&gx_acc).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConvTranspose { x, w, b, geom, batch, cin } => {
                let (kk, p) = (geom.cols_rows(), geom.positions());
                let sample_len = geom.input_len();
                let cout = geom.cin;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, row) in g.chunks(geom.w).enumerate() {
                        gb[r % cout] += row.iter().sum::<f64>();
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut gcols = vec![0.0; kk * p];
                let mut gw_acc = vec![0.0; if need_w { cin * kk } else { 0 }];
                let mut gx_acc = vec![0.0; if need_x { batch * cin * p } else { 0 }];
                for s in 0..*batch {
                    kernels::im2col(&g[s * sample_len..(s + 1) * sample_len], geom, &mut gcols);
                    if need_x {
                        kernels::gemm(*cin, kk, p, wd, false, &gcols, false, 0.0, &mut gx_acc[s * cin * p..(s + 1) * cin * p]);
                    }
                    if need_w {
                        kernels::gemm(*cin, p, kk, &xd[s * cin * p..(s + 1) * cin * p], false, &gcols, true, 1.0, &mut gw_acc);
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gw.iter_mut().zip(&gw_acc).for_each(|(a, b)| *a += b);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(&gx_acc).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
