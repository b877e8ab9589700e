//! Music-sensed pose network: frequency-wise attention over recorded and
//! music spectra, a time-wise 1D U-Net regressing joint coordinates, and
//! contrastive pose/audio encoders.

mod layers;
mod losses;
#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::INPUT_CHANNELS;
use layers::{normal, AttentionBlock, Conv, Linear};

pub use losses::{contrastive_loss, pose_loss, smooth_loss, total_loss, LossWeights};

pub const MUSIC_CHANNELS: usize = 2;

/// Shrinks the initial weights of the coordinate-emitting layer so early
/// predictions stay close to its bias.
const OUTPUT_INIT_SCALE: f64 = 0.1;

/// Finite-difference check of the total loss with respect to every weight
/// and input, on a batch of two random windows. Returns the max relative error.
pub fn gradcheck_total_loss(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    use rand::Rng;
    let (model, store) = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let n = 2;
    let np = store.len();
    let mut all: Vec<Tensor> = store.tensors().to_vec();
    all.push(rand(&[n, INPUT_CHANNELS, cfg.bins, cfg.frames]));
    all.push(rand(&[n, MUSIC_CHANNELS, cfg.bins, cfg.frames]));
    all.push(rand(&[n, cfg.frames, cfg.coords()]));
    let w = LossWeights {
        w_alpha: 1.0,
        w_beta: 1.0,
        tau: 0.5,
    };
    crate::autodiff::gradcheck(
        |t, v| {
            let (l, _) = model.losses(t, &v[..np], v[np], v[np + 1], v[np + 2], &w)?;
            Ok(l.total)
        },
        &all,
        1e-5,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub bins: usize,
    pub frames: usize,
    pub joints: usize,
    /// Latent width `d` of the attention stage.
    pub d: usize,
    pub pre_blocks: usize,
    /// Frequency strides of the post-attention convolutions.
    pub post_strides: Vec<usize>,
    pub post_channels: usize,
    /// U-Net widths from the top level down; depth is `len - 1`.
    pub unet_channels: Vec<usize>,
    pub unet_skips: bool,
    pub head_hidden: usize,
    /// Contrastive embedding size `e`.
    pub embed_dim: usize,
    pub cpe_hidden: usize,
    /// Stop contrastive gradients at the trunk feature.
    pub cpe_detach: bool,
    /// With `false` the attention stage is the identity on the conv features.
    pub use_fa: bool,
    /// Per-frame layer norm after every conv block.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bins: 128,
            frames: 12,
            joints: 21,
            d: 64,
            pre_blocks: 3,
            post_strides: vec![4, 4],
            post_channels: 64,
            unet_channels: vec![128, 128, 128],
            unet_skips: true,
            head_hidden: 128,
            embed_dim: 64,
            cpe_hidden: 128,
            cpe_detach: false,
            use_fa: true,
            layer_norm: true,
        }
    }
}

impl ModelConfig {
    /// Smallest shapes that still exercise every layer.
    pub fn tiny() -> Self {
        Self {
            bins: 8,
            frames: 4,
            joints: 3,
            d: 4,
            pre_blocks: 2,
            post_strides: vec![2, 2],
            post_channels: 3,
            unet_channels: vec![4, 5],
            head_hidden: 4,
            embed_dim: 4,
            cpe_hidden: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.d == 0 || self.post_channels == 0 || self.embed_dim == 0 || self.head_hidden == 0 || self.cpe_hidden == 0 {
            return bad("widths must be positive");
        }
        if self.pre_blocks == 0 {
            return bad("need at least one pre-attention block");
        }
        let down: usize = self.post_strides.iter().product();
        if self.post_strides.contains(&0) || self.bins % down != 0 {
            return bad(&format!("{} bins not divisible by frequency strides {:?}", self.bins, self.post_strides));
        }
        if self.unet_channels.is_empty() || self.unet_channels.contains(&0) {
            return bad("u-net needs positive widths");
        }
        let depth = self.unet_channels.len() - 1;
        if self.frames < 2 || self.frames % (1 << depth) != 0 {
            return bad(&format!("{} frames not divisible by 2^{depth}", self.frames));
        }
        if self.joints == 0 {
            return bad("need at least one joint");
        }
        Ok(())
    }

    pub fn reduced_bins(&self) -> usize {
        self.bins / self.post_strides.iter().product::<usize>()
    }

    /// Channels of the reshaped feature entering the U-Net.
    pub fn trunk_channels(&self) -> usize {
        self.post_channels * self.reduced_bins()
    }

    pub fn coords(&self) -> usize {
        self.joints * 3
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    conv: Conv,
    token: ParamId,
    time: ParamId,
    block: AttentionBlock,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let e = cfg.embed_dim;
        Ok(Self {
            conv: Conv::new(store, &format!("{name}.conv"), e, cin, &[3], rng)?,
            token: store.add(format!("{name}.token"), normal(&[1, e], 0.02, rng))?,
            time: store.add(format!("{name}.time"), normal(&[cfg.frames + 1, e], 0.02, rng))?,
            block: AttentionBlock::new(store, &format!("{name}.attn"), e, cfg.cpe_hidden, rng)?,
        })
    }

    /// `x: [N, C, T]` to unit vectors `[N, e]`.
    fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let n = t.shape(x)[0];
        let h = self.conv.conv1d(t, p, x, 1, 1)?;
        let h = t.permute(h, &[0, 2, 1])?;
        let e = t.shape(h)[2];
        let tok = t.broadcast_leading(p[self.token.index()], n)?;
        let h = t.concat(&[tok, h], 1)?;
        let h = t.embedding_add(h, p[self.time.index()])?;
        let h = self.block.forward(t, p, h)?;
        let z = t.slice(h, 1, 0, 1)?;
        let z = t.reshape(z, &[n, e])?;
        t.l2_normalize(z)
    }
}

/// Parameter layout of the network; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pre_x: Vec<Conv>,
    pre_m: Vec<Conv>,
    freq_embed: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    post: Vec<Conv>,
    enc: Vec<Conv>,
    up: Vec<Conv>,
    merge: Vec<Conv>,
    head: [Conv; 2],
    pose_enc: Encoder,
    audio_enc: Encoder,
}

/// Intermediate results of [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[N, T, J*3]`
    pub pose: Var,
    /// `[N, trunk_channels, T]`, the tap for the audio encoder.
    pub trunk: Var,
    /// `[N, T, b, b]` frequency attention, absent when the stage is disabled.
    pub attention: Option<Var>,
    /// `[N, d, b, T]` output of the attention stage before downsampling.
    pub attended: Var,
}

/// Scalar loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub pose: Var,
    pub smooth: Var,
    pub cpe: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d;
        let pre = |s: &mut ParamStore, name: &str, cin: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Conv>> {
            (0..cfg.pre_blocks)
                .map(|i| Conv::new(s, &format!("fa.{name}.{i}"), d, if i == 0 { cin } else { d }, &[3, 3], rng))
                .collect()
        };
        let pre_x = pre(&mut s, "pre_x", INPUT_CHANNELS, &mut rng)?;
        let pre_m = pre(&mut s, "pre_m", MUSIC_CHANNELS, &mut rng)?;
        let freq_embed = s.add("fa.freq_embed", normal(&[cfg.bins, d], 0.02, &mut rng))?;
        let wq = Linear::new(&mut s, "fa.wq", d, d, false, &mut rng)?;
        let wk = Linear::new(&mut s, "fa.wk", d, d, false, &mut rng)?;
        let wv = Linear::new(&mut s, "fa.wv", d, d, false, &mut rng)?;
        let mut post = Vec::new();
        let mut cin = d;
        for (i, &st) in cfg.post_strides.iter().enumerate() {
            post.push(Conv::new(&mut s, &format!("fa.post.{i}"), cfg.post_channels, cin, &[st, 3], &mut rng)?);
            cin = cfg.post_channels;
        }
        let u = &cfg.unet_channels;
        let mut enc = vec![Conv::new(&mut s, "unet.enc.0", u[0], cfg.trunk_channels(), &[3], &mut rng)?];
        for l in 1..u.len() {
            enc.push(Conv::new(&mut s, &format!("unet.enc.{l}"), u[l], u[l - 1], &[3], &mut rng)?);
        }
        let mut up = Vec::new();
        let mut merge = Vec::new();
        for l in 0..u.len() - 1 {
            up.push(Conv::new_transposed(&mut s, &format!("unet.up.{l}"), u[l + 1], u[l], 4, &mut rng)?);
            merge.push(Conv::new(&mut s, &format!("unet.merge.{l}"), u[l], 2 * u[l], &[3], &mut rng)?);
        }
        let head = [
            Conv::new(&mut s, "head.0", cfg.head_hidden, u[0], &[3], &mut rng)?,
            Conv::new(&mut s, "head.1", cfg.coords(), cfg.head_hidden, &[1], &mut rng)?,
        ];
        for v in s.get_mut(head[1].w).data_mut() {
            *v *= OUTPUT_INIT_SCALE;
        }
        let pose_enc = Encoder::new(&mut s, "cpe.pose", cfg.coords(), &cfg, &mut rng)?;
        let audio_enc = Encoder::new(&mut s, "cpe.audio", cfg.trunk_channels(), &cfg, &mut rng)?;
        Ok((
            Self {
                cfg,
                pre_x,
                pre_m,
                freq_embed,
                wq,
                wk,
                wv,
                post,
                enc,
                up,
                merge,
                head,
                pose_enc,
                audio_enc,
            },
            s,
        ))
    }

    /// Parameter vars of a tape created with [`Tape::with_params`].
    pub fn bind(tape: &Tape, store: &ParamStore) -> Vec<Var> {
        (0..store.len())
            .map(|i| tape.param(store.id(&store.names()[i]).expect("own name")))
            .collect()
    }

    /// Final head layer, the one emitting joint coordinates.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.head[1].w, self.head[1].b)
    }

    /// Normalizes each frame of `[N, C, (b,) T]` over everything but time.
    fn norm(&self, t: &mut Tape, h: Var) -> Result<Var> {
        if !self.cfg.layer_norm {
            return Ok(h);
        }
        let (fwd, back): (&[usize], &[usize]) = match t.shape(h).len() {
            3 => (&[0, 2, 1], &[0, 2, 1]),
            4 => (&[0, 3, 1, 2], &[0, 2, 3, 1]),
            n => return Err(Error::dim(format!("layer norm on rank {n}"))),
        };
        let h = t.permute(h, fwd)?;
        let h = t.layer_norm(h, 2)?;
        t.permute(h, back)
    }

    fn conv_stack(&self, t: &mut Tape, p: &[Var], convs: &[Conv], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, c) in convs.iter().enumerate() {
            h = c.conv2d(t, p, h, (1, 1), (1, 1))?;
            h = self.norm(t, h)?;
            if i + 1 < convs.len() {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    /// `x: [N, 11, b, T]`, `m: [N, 2, b, T]` to attended `[N, d, b, T]`.
    pub fn fa_module(&self, t: &mut Tape, p: &[Var], x: Var, m: Var) -> Result<(Var, Option<Var>)> {
        let (sx, sm) = (t.shape(x).to_vec(), t.shape(m).to_vec());
        if sx.len() != 4 || sm.len() != 4 || sx[1] != INPUT_CHANNELS || sm[1] != MUSIC_CHANNELS {
            return Err(Error::dim(format!("fa inputs {sx:?} / {sm:?}")));
        }
        if sx[3] != sm[3] {
            return Err(Error::Alignment(format!("recorded has {} frames, music {}", sx[3], sm[3])));
        }
        if sx[0] != sm[0] || sx[2] != sm[2] || sx[2] != self.cfg.bins {
            return Err(Error::dim(format!("fa inputs {sx:?} / {sm:?} for {} bins", self.cfg.bins)));
        }
        let xf = self.conv_stack(t, p, &self.pre_x, x)?;
        if !self.cfg.use_fa {
            return Ok((xf, None));
        }
        let mf = self.conv_stack(t, p, &self.pre_m, m)?;
        // [N, d, b, T] -> [N, T, b, d]: one b×d matrix per time step
        let xf = t.permute(xf, &[0, 3, 2, 1])?;
        let mf = t.permute(mf, &[0, 3, 2, 1])?;
        let f = p[self.freq_embed.index()];
        let xh = t.embedding_add(xf, f)?;
        let mh = t.embedding_add(mf, f)?;
        let q = self.wq.forward(t, p, xh)?;
        let k = self.wk.forward(t, p, mh)?;
        let v = self.wv.forward(t, p, xh)?;
        let (a, w) = t.scaled_dot_product_attention(q, k, v)?;
        let out = t.add(xh, a)?;
        let out = t.permute(out, &[0, 3, 2, 1])?;
        Ok((out, Some(w)))
    }

    /// Attention-stage output `[N, d, b, T]` to poses `[N, T, J*3]`.
    pub fn backbone(&self, t: &mut Tape, p: &[Var], attended: Var) -> Result<(Var, Var)> {
        let mut h = attended;
        for (c, &st) in self.post.iter().zip(&self.cfg.post_strides) {
            h = c.conv2d(t, p, h, (st, 1), (0, 1))?;
            h = self.norm(t, h)?;
            h = t.relu(h);
        }
        let s = t.shape(h).to_vec();
        let trunk = t.reshape(h, &[s[0], s[1] * s[2], s[3]])?;

        let mut h = self.enc[0].conv1d(t, p, trunk, 1, 1)?;
        h = self.norm(t, h)?;
        h = t.relu(h);
        let mut skips = vec![h];
        for l in 1..self.enc.len() {
            h = self.enc[l].conv1d(t, p, h, 2, 1)?;
            h = self.norm(t, h)?;
            h = t.relu(h);
            skips.push(h);
        }
        for l in (0..self.up.len()).rev() {
            h = self.up[l].conv_transpose1d(t, p, h, 2, 1)?;
            h = self.norm(t, h)?;
            h = t.relu(h);
            let skip = if self.cfg.unet_skips {
                skips[l]
            } else {
                let shape = t.shape(skips[l]).to_vec();
                t.constant(Tensor::zeros(&shape))
            };
            h = t.concat(&[h, skip], 1)?;
            h = self.merge[l].conv1d(t, p, h, 1, 1)?;
            h = self.norm(t, h)?;
            h = t.relu(h);
        }
        h = self.head[0].conv1d(t, p, h, 1, 1)?;
        h = self.norm(t, h)?;
        h = t.relu(h);
        h = self.head[1].conv1d(t, p, h, 1, 0)?;
        let pose = t.permute(h, &[0, 2, 1])?;
        Ok((pose, trunk))
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var, m: Var) -> Result<Forward> {
        let (attended, attention) = self.fa_module(t, p, x, m)?;
        let (pose, trunk) = self.backbone(t, p, attended)?;
        Ok(Forward {
            pose,
            trunk,
            attention,
            attended,
        })
    }

    /// Poses `[N, T, J*3]` to unit embeddings `[N, e]`.
    pub fn pose_encoder(&self, t: &mut Tape, p: &[Var], pose: Var) -> Result<Var> {
        let x = t.permute(pose, &[0, 2, 1])?;
        self.pose_enc.forward(t, p, x)
    }

    /// Trunk features `[N, C, T]` to unit embeddings `[N, e]`.
    pub fn audio_encoder(&self, t: &mut Tape, p: &[Var], trunk: Var) -> Result<Var> {
        let x = if self.cfg.cpe_detach { t.detach(trunk) } else { trunk };
        self.audio_enc.forward(t, p, x)
    }

    /// Full objective for one batch; the contrastive branch is skipped when
    /// its weight is zero.
    pub fn losses(&self, t: &mut Tape, p: &[Var], x: Var, m: Var, truth: Var, w: &LossWeights) -> Result<(LossTerms, Forward)> {
        let fwd = self.forward(t, p, x, m)?;
        if t.shape(truth) != t.shape(fwd.pose) {
            return Err(Error::dim(format!(
                "target {:?} vs prediction {:?}",
                t.shape(truth),
                t.shape(fwd.pose)
            )));
        }
        let pose = pose_loss(t, fwd.pose, truth)?;
        let smooth = smooth_loss(t, fwd.pose, truth)?;
        let cpe = if w.w_beta > 0.0 {
            let zp = self.pose_encoder(t, p, truth)?;
            let za = self.audio_encoder(t, p, fwd.trunk)?;
            contrastive_loss(t, zp, za, w.tau)?
        } else {
            t.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(t, pose, smooth, cpe, w)?;
        Ok((LossTerms { total, pose, smooth, cpe }, fwd))
    }

    /// Inference on a batch: `[N, 11, b, T]`, `[N, 2, b, T]` to `[N, T, J*3]`.
    pub fn predict(&self, store: &ParamStore, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let mut t = Tape::with_params(store);
        let p = Self::bind(&t, store);
        let (xv, mv) = (t.constant(x.clone()), t.constant(m.clone()));
        let f = self.forward(&mut t, &p, xv, mv)?;
        Ok(t.value(f.pose).clone())
    }
}
