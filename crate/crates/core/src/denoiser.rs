//! Spatio-temporal U-Net noise predictor with dual cross-attention and channel-concatenated
//! conditioning-image latents.
//!
//! Every spatial block attends to the text embedding and the projected image context with one
//! shared query; the image stream adds only its own key and value matrices. The image value
//! matrix and the temporal output projections start at zero, so a freshly built model is a
//! per-frame text-conditioned image model that ignores the image context.

use candle_core::{Tensor, D};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{
    attention, attention_probs, merge_heads, sinusoidal, split_heads, Conv2d, FeedForward, GroupNorm, Init, LayerNorm,
    Linear, MultiHeadAttention, Pb,
};

const GROUPS: usize = 8;

/// Projection matrices of one dual cross-attention layer. `img_k`/`img_v` are the only
/// additions relative to a text-only cross-attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub img_k: Tensor,
    pub img_v: Tensor,
    pub heads: usize,
}

impl AttentionWeights {
    fn new(pb: &Pb, d_block: usize, d_ctx: usize, heads: usize) -> Result<Self> {
        let qi = Init::Normal(1.0 / (d_block as f64).sqrt());
        let ki = Init::Normal(1.0 / (d_ctx as f64).sqrt());
        Ok(Self {
            w_q: pb.get(&[d_block, d_block], "to_q.weight", qi)?,
            w_k: pb.get(&[d_ctx, d_block], "to_k.weight", ki)?,
            w_v: pb.get(&[d_ctx, d_block], "to_v.weight", ki)?,
            img_k: pb.get(&[d_ctx, d_block], "img_k.weight", ki)?,
            img_v: pb.get(&[d_ctx, d_block], "img_v.weight", Init::Zeros)?,
            heads,
        })
    }
}

/// `softmax(Q K_texᵀ/√d) V_tex + softmax(Q K_imgᵀ/√d) V_img` with heads concatenated, where `d`
/// is the per-head width and the same `Q = F_in W_q` serves both terms.
///
/// Shapes: `f_in` is `B × S × d_block`, `text` is `B × N × d_ctx`, `image_context` is `B × M × d_ctx`.
pub fn dual_cross_attention(
    f_in: &Tensor,
    text: &Tensor,
    image_context: &Tensor,
    w: &AttentionWeights,
) -> Result<Tensor> {
    let d_in = f_in.dim(D::Minus1)?;
    if d_in != w.w_q.dim(0)? {
        return Err(Error::Shape(format!("query width {d_in} vs W_q rows {}", w.w_q.dim(0)?)));
    }
    for (name, ctx, mat) in [("text", text, &w.w_k), ("image", image_context, &w.img_k)] {
        if ctx.dim(D::Minus1)? != mat.dim(0)? {
            return Err(Error::Shape(format!("{name} width {} vs key rows {}", ctx.dim(D::Minus1)?, mat.dim(0)?)));
        }
    }
    if f_in.dim(0)? != text.dim(0)? || f_in.dim(0)? != image_context.dim(0)? {
        return Err(Error::Shape("batch sizes of query, text and image context differ".into()));
    }
    let q = split_heads(&f_in.broadcast_matmul(&w.w_q)?, w.heads)?;
    let term = |ctx: &Tensor, wk: &Tensor, wv: &Tensor| -> Result<Tensor> {
        let k = split_heads(&ctx.broadcast_matmul(wk)?, w.heads)?;
        let v = split_heads(&ctx.broadcast_matmul(wv)?, w.heads)?;
        Ok(attention_probs(&q, &k)?.matmul(&v)?)
    };
    let out = (term(text, &w.w_k, &w.w_v)? + term(image_context, &w.img_k, &w.img_v)?)?;
    merge_heads(&out)
}

/// Dual cross-attention followed by the shared output projection.
#[derive(Debug, Clone)]
pub struct DualCrossAttention {
    pub weights: AttentionWeights,
    to_out: Linear,
}

impl DualCrossAttention {
    fn new(pb: &Pb, d_block: usize, d_ctx: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            weights: AttentionWeights::new(pb, d_block, d_ctx, heads)?,
            to_out: Linear::new(&pb.pp("to_out"), d_block, d_block, true)?,
        })
    }

    fn forward(&self, x: &Tensor, text: &Tensor, image_context: &Tensor) -> Result<Tensor> {
        self.to_out.forward(&dual_cross_attention(x, text, image_context, &self.weights)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(pb: &Pb, c_in: usize, c_out: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&pb.pp("norm1"), GROUPS, c_in)?,
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::with_init(&pb.pp("time"), temb, 2 * c_out, true, Init::Normal(0.5 / (temb as f64).sqrt()))?,
            norm2: GroupNorm::new(&pb.pp("norm2"), GROUPS, c_out)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out { Some(Conv2d::new(&pb.pp("skip"), c_in, c_out, 1, 1)?) } else { None },
        })
    }

    /// `x` is `N × C × H × W`, `temb` is `N × E`. Timestep enters as an adaptive scale and shift.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let ss = self.time.forward(&temb.silu()?)?;
        let c = h.dim(1)?;
        let scale = ss.narrow(1, 0, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let shift = ss.narrow(1, c, c)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = self.norm2.forward(&h)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Per-frame self-attention, dual cross-attention and feed-forward over spatial tokens.
#[derive(Debug, Clone)]
struct SpatialBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross: DualCrossAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl SpatialBlock {
    fn new(pb: &Pb, c: usize, d_ctx: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&pb.pp("ln1"), c)?,
            self_attn: MultiHeadAttention::new(&pb.pp("self_attn"), c, c, c, heads)?,
            ln2: LayerNorm::new(&pb.pp("ln2"), c)?,
            cross: DualCrossAttention::new(&pb.pp("cross"), c, d_ctx, heads)?,
            ln3: LayerNorm::new(&pb.pp("ln3"), c)?,
            ff: FeedForward::new(&pb.pp("ff"), c, 2 * c)?,
        })
    }

    /// `x` is `(B·L) × C × H × W`; conditioning tensors are per video (`B × · × d`).
    fn forward(&self, x: &Tensor, frames: usize, text: &Tensor, image_context: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = n / frames;
        let t = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let hn = self.ln1.forward(&t)?;
        let t = (&t + self.self_attn.forward(&hn, &hn)?)?;
        // Cross-attention is per query token, so all frames of a video share one context.
        let tv = t.reshape((b, frames * h * w, c))?;
        let tv = (&tv + self.cross.forward(&self.ln2.forward(&tv)?, text, image_context)?)?;
        let t = (&tv + self.ff.forward(&self.ln3.forward(&tv)?)?)?;
        Ok(t.reshape((n, h * w, c))?.transpose(1, 2)?.reshape((n, c, h, w))?)
    }
}

/// Attention along the frame axis at every spatial location, with a zero-initialized output.
#[derive(Debug, Clone)]
struct TemporalBlock {
    ln: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl TemporalBlock {
    fn new(pb: &Pb, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(&pb.pp("ln"), c)?,
            to_q: Linear::new(&pb.pp("to_q"), c, c, false)?,
            to_k: Linear::new(&pb.pp("to_k"), c, c, false)?,
            to_v: Linear::new(&pb.pp("to_v"), c, c, false)?,
            to_out: Linear::with_init(&pb.pp("to_out"), c, c, true, Init::Zeros)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = n / frames;
        let t =
            x.reshape((b, frames, c, h * w))?.permute((0, 3, 1, 2))?.contiguous()?.reshape((b * h * w, frames, c))?;
        let pos: Vec<f64> = (0..frames).map(|i| i as f64).collect();
        let pos = sinusoidal(&pos, c, x.dtype(), x.device())?;
        let hn = self.ln.forward(&t)?.broadcast_add(&pos)?;
        let a = attention(&self.to_q.forward(&hn)?, &self.to_k.forward(&hn)?, &self.to_v.forward(&hn)?, self.heads)?;
        let out =
            self.to_out.forward(&a)?.reshape((b, h * w, frames, c))?.permute((0, 2, 3, 1))?.reshape((n, c, h, w))?;
        Ok((x + out)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    spatial: SpatialBlock,
    temporal: TemporalBlock,
}

impl Level {
    fn new(pb: &Pb, c_in: usize, c: usize, temb: usize, d_ctx: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(&pb.pp("res"), c_in, c, temb)?,
            spatial: SpatialBlock::new(&pb.pp("spatial"), c, d_ctx, heads)?,
            temporal: TemporalBlock::new(&pb.pp("temporal"), c, heads)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, frames: usize, text: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let x = self.res.forward(x, temb)?;
        let x = self.spatial.forward(&x, frames, text, ctx)?;
        self.temporal.forward(&x, frames)
    }
}

/// Denoiser inputs for a batch of `B` videos.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    /// Noisy latents, `B × L × C × H' × W'`.
    pub z_t: Tensor,
    /// Conditioning-image latents, `B × C × H' × W'` (zeros for the unconditional branch).
    pub z_img: Tensor,
    /// One timestep per video.
    pub t: Vec<usize>,
    /// `B × N_tex × d`.
    pub text: Tensor,
    /// `B × M × d`.
    pub image_context: Tensor,
}

/// Concatenates the conditioning latent (or zeros when `drop_image`) after the noisy latent of
/// every frame: channels `0..C` are `z_t`, channels `C..2C` are `z_img`.
pub fn assemble_input(z_t: &Tensor, z_img: &Tensor, drop_image: bool) -> Result<Tensor> {
    let (b, l, c, h, w) = z_t.dims5()?;
    if z_img.dims() != [b, c, h, w] {
        return Err(Error::Shape(format!("z_img {:?} incompatible with z_t {:?}", z_img.dims(), z_t.dims())));
    }
    let img = if drop_image { z_img.zeros_like()? } else { z_img.clone() };
    let img = img.unsqueeze(1)?.broadcast_as((b, l, c, h, w))?;
    Ok(Tensor::cat(&[z_t, &img], 2)?)
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    down0: Level,
    downsample: Conv2d,
    down1: Level,
    mid: ResBlock,
    up1: Level,
    upsample: Conv2d,
    up0: Level,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    width: usize,
    latent_channels: usize,
    use_image_latent: bool,
}

impl Denoiser {
    pub fn new(pb: &Pb, cfg: &Config) -> Result<Self> {
        let pb = pb.pp("unet");
        let w = cfg.unet_width;
        let c = cfg.latent_channels;
        let temb = 2 * w;
        let (d, heads) = (cfg.embed_dim, cfg.unet_heads);
        Ok(Self {
            time_fc1: Linear::new(&pb.pp("time_fc1"), w, temb, true)?,
            time_fc2: Linear::new(&pb.pp("time_fc2"), temb, temb, true)?,
            conv_in: Conv2d::new(&pb.pp("conv_in"), 2 * c, w, 3, 1)?,
            down0: Level::new(&pb.pp("down0"), w, w, temb, d, heads)?,
            downsample: Conv2d::new(&pb.pp("downsample"), w, w, 3, 2)?,
            down1: Level::new(&pb.pp("down1"), w, 2 * w, temb, d, heads)?,
            mid: ResBlock::new(&pb.pp("mid"), 2 * w, 2 * w, temb)?,
            up1: Level::new(&pb.pp("up1"), 4 * w, 2 * w, temb, d, heads)?,
            upsample: Conv2d::new(&pb.pp("upsample"), 2 * w, w, 3, 1)?,
            up0: Level::new(&pb.pp("up0"), 2 * w, w, temb, d, heads)?,
            norm_out: GroupNorm::new(&pb.pp("norm_out"), GROUPS, w)?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), w, c, 3, 1)?,
            width: w,
            latent_channels: c,
            use_image_latent: cfg.detail_modulation,
        })
    }

    pub fn uses_image_latent(&self) -> bool {
        self.use_image_latent
    }

    /// Predicted noise, same shape as `input.z_t`.
    pub fn predict_noise(&self, input: &DenoiserInput) -> Result<Tensor> {
        let (b, l, c, h, w) = input.z_t.dims5()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!("expected {} latent channels, got {c}", self.latent_channels)));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("latent {h}x{w} must have even sides")));
        }
        if input.t.len() != b || input.text.dim(0)? != b || input.image_context.dim(0)? != b {
            return Err(Error::Shape("timestep and conditioning batch sizes must match z_t".into()));
        }
        let dtype = input.z_t.dtype();
        let dev = input.z_t.device();

        let ts: Vec<f64> = input.t.iter().map(|&t| t as f64).collect();
        let temb = sinusoidal(&ts, self.width, dtype, dev)?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&temb)?.silu()?)?;
        let e = temb.dim(1)?;
        let temb = temb.unsqueeze(1)?.broadcast_as((b, l, e))?.reshape((b * l, e))?;

        let x = assemble_input(&input.z_t, &input.z_img, !self.use_image_latent)?.reshape((b * l, 2 * c, h, w))?;
        let (text, ctx) = (&input.text, &input.image_context);

        let x = self.conv_in.forward(&x)?;
        let skip0 = self.down0.forward(&x, &temb, l, text, ctx)?;
        let x = self.downsample.forward(&skip0)?;
        let skip1 = self.down1.forward(&x, &temb, l, text, ctx)?;
        let x = self.mid.forward(&skip1, &temb)?;
        let x = self.up1.forward(&Tensor::cat(&[&x, &skip1], 1)?, &temb, l, text, ctx)?;
        let x = self.upsample.forward(&crate::codec::upsample2(&x)?)?;
        let x = self.up0.forward(&Tensor::cat(&[&x, &skip0], 1)?, &temb, l, text, ctx)?;
        let x = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        Ok(x.reshape((b, l, c, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t3(v: Vec<f64>, dims: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn degenerate_single_token_softmax() {
        let eye = Tensor::new(&[[1.0f64]], &Device::Cpu).unwrap();
        let w = AttentionWeights {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            img_k: eye.clone(),
            img_v: eye,
            heads: 1,
        };
        let f_in = t3(vec![0.3, -1.2], (1, 2, 1));
        let out = dual_cross_attention(&f_in, &t3(vec![2.0], (1, 1, 1)), &t3(vec![5.0], (1, 1, 1)), &w).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![7.0, 7.0]);
    }

    #[test]
    fn zero_image_value_is_text_only_attention() {
        let dev = Device::Cpu;
        let r = |s: &[usize]| Tensor::randn(0f64, 1.0, s, &dev).unwrap();
        let w = AttentionWeights {
            w_q: r(&[4, 4]),
            w_k: r(&[3, 4]),
            w_v: r(&[3, 4]),
            img_k: r(&[3, 4]),
            img_v: Tensor::zeros((3, 4), DType::F64, &dev).unwrap(),
            heads: 2,
        };
        let (f, tex, img) = (r(&[1, 5, 4]), r(&[1, 2, 3]), r(&[1, 3, 3]));
        let dual = dual_cross_attention(&f, &tex, &img, &w).unwrap();
        let text_only = attention(
            &f.broadcast_matmul(&w.w_q).unwrap(),
            &tex.broadcast_matmul(&w.w_k).unwrap(),
            &tex.broadcast_matmul(&w.w_v).unwrap(),
            2,
        )
        .unwrap();
        assert_eq!(
            dual.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            text_only.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn width_mismatch_is_error() {
        let dev = Device::Cpu;
        let r = |s: &[usize]| Tensor::randn(0f64, 1.0, s, &dev).unwrap();
        let w = AttentionWeights {
            w_q: r(&[4, 4]),
            w_k: r(&[3, 4]),
            w_v: r(&[3, 4]),
            img_k: r(&[3, 4]),
            img_v: r(&[3, 4]),
            heads: 2,
        };
        assert!(dual_cross_attention(&r(&[1, 2, 5]), &r(&[1, 2, 3]), &r(&[1, 2, 3]), &w).is_err());
        assert!(dual_cross_attention(&r(&[1, 2, 4]), &r(&[1, 2, 3]), &r(&[1, 2, 6]), &w).is_err());
    }

    #[test]
    fn assemble_layout_by_one_hot_probe() {
        let dev = Device::Cpu;
        let (b, l, c, h, w) = (1, 3, 2, 2, 2);
        let mut z = vec![0f64; b * l * c * h * w];
        z[c * h * w + h * w + 3] = 1.0; // frame 1, channel 1, pixel 3
        let z_t = Tensor::from_vec(z, (b, l, c, h, w), &dev).unwrap();
        let mut zi = vec![0f64; c * h * w];
        zi[2] = 1.0; // channel 0, pixel 2
        let z_img = Tensor::from_vec(zi, (b, c, h, w), &dev).unwrap();
        let x = assemble_input(&z_t, &z_img, false).unwrap();
        assert_eq!(x.dims(), &[1, 3, 4, 2, 2]);
        let v = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let idx = |f: usize, ch: usize, p: usize| (f * 2 * c + ch) * h * w + p;
        let mut expect = vec![0f64; v.len()];
        expect[idx(1, 1, 3)] = 1.0;
        for f in 0..l {
            expect[idx(f, c, 2)] = 1.0;
        }
        assert_eq!(v, expect);
        let dropped = assemble_input(&z_t, &z_img, true).unwrap();
        let second = dropped.narrow(2, c, c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(second.iter().all(|x| *x == 0.0));
        assert_eq!(dropped.dim(1).unwrap(), l);
    }
}
