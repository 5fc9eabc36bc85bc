#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use vidanim::denoiser::AttentionWeights;
use vidanim::nn::ParamStore;
use vidanim::Config;

/// Smallest configuration the full model accepts: 8x8 frames, 4x4 latents, width-8 U-Net.
pub fn tiny_config() -> Config {
    let text = "
        image_size = 8
        latent_factor = 2
        latent_channels = 2
        frames = 3
        native_frames = 6
        max_stride = 2
        timesteps = 20
        beta_start = 0.01
        beta_end = 0.3
        codec_width = 8
        embed_dim = 4
        text_len = 3
        vocab_size = 31
        patch_size = 4
        vis_dim = 4
        vis_layers = 1
        ctx_tokens = 2
        proj_layers = 1
        enc_heads = 2
        unet_width = 8
        unet_heads = 2
        batch = 2
        sample_steps = 5
        guidance = 2.0
        lr_codec = 0.01
        lr_image = 0.01
        lr_video = 0.01
    ";
    Config::parse_str(text).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    vidanim::sampler::gaussian(shape, DType::F64, &mut rng).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a).iter().zip(to_vec(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Brute-force dual cross-attention with scalar loops. Matrices are row-major `in × out`.
pub fn loop_dual_attention(
    f_in: &[Vec<f64>],
    text: &[Vec<f64>],
    image: &[Vec<f64>],
    w_q: &[Vec<f64>],
    w_k: &[Vec<f64>],
    w_v: &[Vec<f64>],
    img_k: &[Vec<f64>],
    img_v: &[Vec<f64>],
    heads: usize,
) -> Vec<Vec<f64>> {
    let project = |x: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| {
                        let mut s = 0.0;
                        for i in 0..row.len() {
                            s += row[i] * w[i][j];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    };
    let q = project(f_in, w_q);
    let width = w_q[0].len();
    let dh = width / heads;
    let mut out = vec![vec![0.0; width]; f_in.len()];
    for (ctx, wk, wv) in [(text, w_k, w_v), (image, img_k, img_v)] {
        let k = project(ctx, wk);
        let v = project(ctx, wv);
        for h in 0..heads {
            for i in 0..q.len() {
                let mut logits = Vec::with_capacity(k.len());
                for kj in &k {
                    let mut s = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        s += q[i][c] * kj[c];
                    }
                    logits.push(s / (dh as f64).sqrt());
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in h * dh..(h + 1) * dh {
                        out[i][c] += ej / z * v[j][c];
                    }
                }
            }
        }
    }
    out
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn random_weights(d_block: usize, d_ctx: usize, heads: usize, seed: u64) -> AttentionWeights {
    AttentionWeights {
        w_q: randn(&[d_block, d_block], seed),
        w_k: randn(&[d_ctx, d_block], seed + 1),
        w_v: randn(&[d_ctx, d_block], seed + 2),
        img_k: randn(&[d_ctx, d_block], seed + 3),
        img_v: randn(&[d_ctx, d_block], seed + 4),
        heads,
    }
}

/// Worst relative error between autodiff gradients and central differences of
/// `loss` over the first `per_tensor` entries of every parameter selected by `pick`.
pub fn gradient_check(
    store: &ParamStore,
    pick: &dyn Fn(&str) -> bool,
    per_tensor: usize,
    loss: &dyn Fn() -> Tensor,
) -> (f64, usize) {
    let l = loss();
    let grads = l.backward().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, var) in store.entries() {
        if !pick(&name) {
            continue;
        }
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = to_vec(var.as_tensor());
        let shape = var.dims().to_vec();
        let n = base.len();
        let stride = (n / per_tensor).max(1);
        for idx in (0..n).step_by(stride).take(per_tensor) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    (worst, checked)
}
