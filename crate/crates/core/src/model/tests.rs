use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn unit_rows(n: usize, e: usize, seed: u64) -> Tensor {
    let mut t = rand_tensor(&[n, e], seed);
    for row in t.data_mut().chunks_mut(e) {
        let s = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn tiny() -> ModelConfig {
    ModelConfig::tiny()
}

fn run(model: &Model, store: &ParamStore, x: &Tensor, m: &Tensor) -> (Tape, Forward) {
    let mut t = Tape::with_params(store);
    let p = Model::bind(&t, store);
    let (xv, mv) = (t.constant(x.clone()), t.constant(m.clone()));
    let f = model.forward(&mut t, &p, xv, mv).unwrap();
    (t, f)
}

fn inputs(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor, Tensor) {
    (
        rand_tensor(&[n, INPUT_CHANNELS, cfg.bins, cfg.frames], seed),
        rand_tensor(&[n, MUSIC_CHANNELS, cfg.bins, cfg.frames], seed + 1),
    )
}

// ----- losses ----------------------------------------------------------

fn contrastive_value(zp: &Tensor, za: &Tensor, tau: f64) -> Result<f64> {
    let mut t = Tape::new();
    let (a, b) = (t.constant(zp.clone()), t.constant(za.clone()));
    let l = contrastive_loss(&mut t, a, b, tau)?;
    Ok(t.value(l).item())
}

#[test]
fn contrastive_single_pair_is_zero() {
    let z = unit_rows(1, 5, 0);
    assert_eq!(contrastive_value(&z, &unit_rows(1, 5, 1), 0.07).unwrap(), 0.0);
}

#[test]
fn contrastive_orthogonal_pairs_closed_form() {
    let z = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let want = (1.0 + (-1.0f64 / 0.07).exp()).ln();
    let got = contrastive_value(&z, &z, 0.07).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!((want - 6.2e-7).abs() < 1e-8);
}

#[test]
fn contrastive_shuffled_pairs_cost_more() {
    for seed in 0..10 {
        let zp = unit_rows(6, 8, seed);
        let za = zp.clone();
        let mut shuffled = za.data().to_vec();
        shuffled.rotate_left(8);
        let shuffled = Tensor::new(&[6, 8], shuffled).unwrap();
        assert!(contrastive_value(&zp, &shuffled, 0.07).unwrap() > contrastive_value(&zp, &za, 0.07).unwrap());
    }
}

#[test]
fn contrastive_is_permutation_invariant_and_checks_norms() {
    let zp = unit_rows(4, 3, 2);
    let za = unit_rows(4, 3, 3);
    let perm = [2, 0, 3, 1];
    let pick = |z: &Tensor| {
        Tensor::new(&[4, 3], perm.iter().flat_map(|&i| z.data()[i * 3..i * 3 + 3].to_vec()).collect()).unwrap()
    };
    let a = contrastive_value(&zp, &za, 0.1).unwrap();
    let b = contrastive_value(&pick(&zp), &pick(&za), 0.1).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(a >= 0.0);
    let raw = rand_tensor(&[4, 3], 9).map(|v| v * 3.0);
    assert!(matches!(contrastive_value(&raw, &za, 0.1), Err(Error::Contract(_))));
}

fn loss_of(f: impl Fn(&mut Tape, Var, Var) -> Result<Var>, a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = f(&mut t, x, y)?;
    Ok(t.value(l).item())
}

#[test]
fn pose_loss_fixtures() {
    let p = rand_tensor(&[2, 4, 9], 5);
    assert_eq!(loss_of(pose_loss, &p, &p).unwrap(), 0.0);
    assert!((loss_of(pose_loss, &p.map(|v| v + 1.0), &p).unwrap() - 1.0).abs() < 1e-12);
    let q = rand_tensor(&[2, 4, 9], 6);
    let mut brute = 0.0;
    for n in 0..2 {
        for t in 0..4 {
            for j in 0..9 {
                let i = (n * 4 + t) * 9 + j;
                brute += (p.data()[i] - q.data()[i]).powi(2);
            }
        }
    }
    brute /= 72.0;
    assert!((loss_of(pose_loss, &p, &q).unwrap() - brute).abs() < 1e-12);
    assert!(loss_of(pose_loss, &p, &rand_tensor(&[2, 3, 9], 0)).is_err());
}

#[test]
fn smooth_loss_fixtures() {
    let p = rand_tensor(&[2, 5, 6], 7);
    let mut offset = p.clone();
    for (i, v) in offset.data_mut().iter_mut().enumerate() {
        *v += if i < 30 { 0.7 } else { -2.0 };
    }
    assert!(loss_of(smooth_loss, &offset, &p).unwrap().abs() < 1e-12);
    assert_eq!(loss_of(smooth_loss, &p, &p).unwrap(), 0.0);
    let q = rand_tensor(&[2, 5, 6], 8);
    let (pd, qd) = (p.data(), q.data());
    let mut brute = 0.0;
    for n in 0..2 {
        for t in 1..5 {
            for c in 0..6 {
                let i = |t: usize| (n * 5 + t) * 6 + c;
                let dv = (pd[i(t)] - pd[i(t - 1)]) - (qd[i(t)] - qd[i(t - 1)]);
                brute += dv * dv;
            }
        }
    }
    brute /= (2 * 4 * 6) as f64;
    assert!((loss_of(smooth_loss, &p, &q).unwrap() - brute).abs() < 1e-12);
    let one = rand_tensor(&[2, 1, 6], 0);
    assert!(matches!(loss_of(smooth_loss, &one, &one), Err(Error::Contract(_))));
}

#[test]
fn total_loss_weighted_sum() {
    let mut t = Tape::new();
    let [a, b, c] = [1.0, 0.01, 0.5].map(|v| t.constant(Tensor::scalar(v)));
    let l = total_loss(&mut t, a, b, c, &LossWeights::default()).unwrap();
    assert!((t.value(l).item() - 2.5).abs() < 1e-12);
    let [a, b, c] = [0.0; 3].map(|v| t.constant(Tensor::scalar(v)));
    let l = total_loss(&mut t, a, b, c, &LossWeights::default()).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let p = rand_tensor(&[1, 4, 3], 1);
    let q = rand_tensor(&[1, 4, 3], 2);
    let w = LossWeights::default();
    let grad = |which: usize| -> Tensor {
        let mut t = Tape::new();
        let x = t.leaf(p.clone());
        let y = t.constant(q.clone());
        let lp = pose_loss(&mut t, x, y).unwrap();
        let ls = smooth_loss(&mut t, x, y).unwrap();
        let l = match which {
            0 => lp,
            1 => ls,
            _ => {
                let z = t.constant(Tensor::scalar(0.3));
                total_loss(&mut t, lp, ls, z, &w).unwrap()
            }
        };
        t.backward(l).unwrap().get(x).unwrap().clone()
    };
    let (gp, gs, gt) = (grad(0), grad(1), grad(2));
    for i in 0..gt.numel() {
        assert!((gt.data()[i] - gp.data()[i] - w.w_alpha * gs.data()[i]).abs() < 1e-10);
    }
}

// ----- network ---------------------------------------------------------

#[test]
fn attention_rows_sum_to_one() {
    let cfg = tiny();
    let (model, store) = Model::new(cfg.clone(), 0).unwrap();
    let (x, m) = inputs(&cfg, 2, 10);
    let (t, f) = run(&model, &store, &x, &m);
    let w = t.value(f.attention.unwrap());
    assert_eq!(w.shape(), &[2, cfg.frames, cfg.bins, cfg.bins]);
    for row in w.data().chunks(cfg.bins) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_key_projection_gives_uniform_attention() {
    let cfg = tiny();
    let (model, mut store) = Model::new(cfg.clone(), 0).unwrap();
    store.get_mut(model.wk.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (x, _) = inputs(&cfg, 1, 3);
    let m = Tensor::full(&[1, MUSIC_CHANNELS, cfg.bins, cfg.frames], 0.5);
    let (t, f) = run(&model, &store, &x, &m);
    let w = t.value(f.attention.unwrap());
    assert!(w.data().iter().all(|v| (v - 1.0 / cfg.bins as f64).abs() < 1e-12));
}

#[test]
fn output_shapes() {
    let cfg = ModelConfig {
        d: 4,
        post_channels: 2,
        unet_channels: vec![6, 6, 6],
        head_hidden: 6,
        embed_dim: 4,
        cpe_hidden: 4,
        ..ModelConfig::default()
    };
    let (model, store) = Model::new(cfg.clone(), 1).unwrap();
    let (x, m) = inputs(&cfg, 1, 0);
    let (t, f) = run(&model, &store, &x, &m);
    assert_eq!(t.shape(f.attended), &[1, 4, 128, 12]);
    assert_eq!(t.shape(f.trunk), &[1, 2 * 8, 12]);
    assert_eq!(t.shape(f.pose), &[1, 12, 63]);
    assert!(t.value(f.pose).is_finite());
}

#[test]
fn zero_head_gives_zero_pose() {
    let cfg = tiny();
    let (model, mut store) = Model::new(cfg.clone(), 0).unwrap();
    let (w, b) = model.output_layer();
    for id in [w, b] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (x, m) = inputs(&cfg, 2, 4);
    let out = model.predict(&store, &x, &m).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn unet_skips_matter() {
    let cfg = tiny();
    let (with, store) = Model::new(cfg.clone(), 2).unwrap();
    let (without, _) = Model::new(ModelConfig { unet_skips: false, ..cfg.clone() }, 2).unwrap();
    let (x, m) = inputs(&cfg, 1, 5);
    let a = with.predict(&store, &x, &m).unwrap();
    let b = without.predict(&store, &x, &m).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn no_temporal_attention() {
    let cfg = tiny();
    let (model, store) = Model::new(cfg.clone(), 3).unwrap();
    let (x, m) = inputs(&cfg, 1, 6);
    let mut x2 = x.clone();
    let t0 = 1;
    for c in 0..INPUT_CHANNELS {
        for f in 0..cfg.bins {
            x2.data_mut()[(c * cfg.bins + f) * cfg.frames + t0] = 0.0;
        }
    }
    let (ta, fa) = run(&model, &store, &x, &m);
    let (tb, fb) = run(&model, &store, &x2, &m);
    // conv receptive field is 3 frames per block; compare frames beyond it
    let (a, b) = (ta.value(fa.attention.unwrap()), tb.value(fb.attention.unwrap()));
    let per_t = cfg.bins * cfg.bins;
    let reach = cfg.pre_blocks;
    for t in 0..cfg.frames {
        let same = a.data()[t * per_t..(t + 1) * per_t] == b.data()[t * per_t..(t + 1) * per_t];
        if t.abs_diff(t0) > reach {
            assert!(same, "frame {t} changed");
        }
    }
    assert_ne!(a, b);
}

#[test]
fn frequency_embedding_is_shared() {
    let cfg = tiny();
    let (model, store) = Model::new(cfg.clone(), 0).unwrap();
    let names: Vec<_> = store.names().iter().filter(|n| n.contains("freq")).collect();
    assert_eq!(names.len(), 1);
    let (x, m) = inputs(&cfg, 1, 1);
    let mut t = Tape::with_params(&store);
    let p = Model::bind(&t, &store);
    let (xv, mv) = (t.constant(x), t.constant(m));
    let f = model.forward(&mut t, &p, xv, mv).unwrap();
    let s = t.sum(f.attended);
    let g = t.backward(s).unwrap();
    assert!(g.get(p[model.freq_embed.index()]).unwrap().l2_norm() > 0.0);
}

#[test]
fn time_mismatch_is_alignment_error() {
    let cfg = tiny();
    let (model, store) = Model::new(cfg.clone(), 0).unwrap();
    let mut t = Tape::with_params(&store);
    let p = Model::bind(&t, &store);
    let x = t.constant(Tensor::zeros(&[1, 11, 8, 4]));
    let m = t.constant(Tensor::zeros(&[1, 2, 8, 3]));
    assert!(matches!(model.forward(&mut t, &p, x, m), Err(Error::Alignment(_))));
}

fn encode(model: &Model, store: &ParamStore, pose: &Tensor) -> Tensor {
    let mut t = Tape::with_params(store);
    let p = Model::bind(&t, store);
    let v = t.constant(pose.clone());
    let z = model.pose_encoder(&mut t, &p, v).unwrap();
    t.value(z).clone()
}

fn encode_audio(model: &Model, store: &ParamStore, x: &Tensor, m: &Tensor) -> Tensor {
    let mut t = Tape::with_params(store);
    let p = Model::bind(&t, store);
    let (xv, mv) = (t.constant(x.clone()), t.constant(m.clone()));
    let f = model.forward(&mut t, &p, xv, mv).unwrap();
    let z = model.audio_encoder(&mut t, &p, f.trunk).unwrap();
    t.value(z).clone()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

#[test]
fn pose_encoder_properties() {
    let cfg = tiny();
    let (model, store) = Model::new(cfg.clone(), 4).unwrap();
    let pose = rand_tensor(&[2, cfg.frames, cfg.coords()], 3);
    let z = encode(&model, &store, &pose);
    for row in z.data().chunks(cfg.embed_dim) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }
    assert_eq!(z, encode(&model, &store, &pose));
    // move one limb far away in the second sample
    let mut moved = pose.clone();
    for t in 0..cfg.frames {
        moved.data_mut()[t * cfg.coords() + 6] += 3.0;
    }
    let z2 = encode(&model, &store, &moved);
    let e = cfg.embed_dim;
    assert!(cosine(&z.data()[..e], &z2.data()[..e]) < 0.999);
}

#[test]
fn audio_encoder_properties() {
    let cfg = tiny();
    let (model, store) = Model::new(cfg.clone(), 5).unwrap();
    let (x, m) = inputs(&cfg, 2, 8);
    let z = encode_audio(&model, &store, &x, &m);
    for row in z.data().chunks(cfg.embed_dim) {
        assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }
    assert_eq!(z, encode_audio(&model, &store, &x, &m));
    let x2 = x.map(|v| -3.0 * v);
    let z2 = encode_audio(&model, &store, &x2, &m);
    let e = cfg.embed_dim;
    assert!(cosine(&z.data()[..e], &z2.data()[..e]) < 0.999);
}

#[test]
fn cpe_detach_blocks_trunk_gradient() {
    let cfg = tiny();
    for (detach, expect_flow) in [(false, true), (true, false)] {
        let (model, store) = Model::new(ModelConfig { cpe_detach: detach, ..cfg.clone() }, 6).unwrap();
        let (x, m) = inputs(&cfg, 2, 9);
        let mut t = Tape::with_params(&store);
        let p = Model::bind(&t, &store);
        let (xv, mv) = (t.constant(x), t.constant(m));
        let f = model.forward(&mut t, &p, xv, mv).unwrap();
        let z = model.audio_encoder(&mut t, &p, f.trunk).unwrap();
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        let trunk_grad = g.get(p[model.post[0].w.index()]).map_or(0.0, |g| g.l2_norm());
        assert_eq!(trunk_grad > 0.0, expect_flow);
    }
}

#[test]
fn total_loss_gradcheck_on_tiny_model() {
    let err = gradcheck_total_loss(&tiny(), 7).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}
