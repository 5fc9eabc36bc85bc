//! Conditioning signals: hashed text embedding, toy ViT image tokens, and the learned-query
//! projection network that turns image tokens into a context aligned with the text width.

use candle_core::{DType, Tensor, D};

use crate::config::{ConditioningMode, Config};
use crate::error::{Error, Result};
use crate::nn::{fnv1a, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, Pb};

/// Whitespace tokenization into hashed vocabulary ids, lower-cased.
pub fn tokenize(prompt: &str, vocab_size: usize) -> Vec<u32> {
    prompt.split_whitespace().map(|w| (fnv1a(w.to_lowercase().as_bytes()) % vocab_size as u64) as u32).collect()
}

/// Text encoder: hashed token embeddings plus learned positions, padded or truncated to a fixed length.
/// The empty prompt maps to a learned block of null rows.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Tensor,
    positions: Tensor,
    pad: Tensor,
    null: Tensor,
    len: usize,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new(pb: &Pb, cfg: &Config) -> Result<Self> {
        let pb = pb.pp("text");
        let d = cfg.embed_dim;
        Ok(Self {
            vocab: pb.get(&[cfg.vocab_size, d], "vocab", Init::Normal(1.0))?,
            positions: pb.get(&[cfg.text_len, d], "positions", Init::Normal(0.1))?,
            pad: pb.get(&[1, d], "pad", Init::Normal(1.0))?,
            null: pb.get(&[cfg.text_len, d], "null", Init::Normal(1.0))?,
            len: cfg.text_len,
            vocab_size: cfg.vocab_size,
        })
    }

    /// `N_tex × d` embedding of one prompt.
    pub fn encode(&self, prompt: &str) -> Result<Tensor> {
        let mut ids = tokenize(prompt, self.vocab_size);
        if ids.is_empty() {
            return Ok(self.null.clone());
        }
        ids.truncate(self.len);
        let n = ids.len();
        let ids = Tensor::new(ids.as_slice(), self.vocab.device())?;
        let mut rows = self.vocab.index_select(&ids, 0)?;
        if n < self.len {
            let d = self.vocab.dim(1)?;
            rows = Tensor::cat(&[&rows, &self.pad.broadcast_as((self.len - n, d))?], 0)?;
        }
        Ok((rows + &self.positions)?)
    }

    /// `B × N_tex × d` embeddings for a batch of prompts.
    pub fn encode_batch(&self, prompts: &[&str]) -> Result<Tensor> {
        let rows = prompts.iter().map(|p| self.encode(p)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn null_embedding(&self) -> &Tensor {
        &self.null
    }
}

/// Output of the image encoder for a batch of images.
#[derive(Debug, Clone)]
pub struct ImageTokens {
    /// Global semantic token, `B × d_vis`.
    pub cls: Tensor,
    /// Class token followed by every patch token, `B × (K+1) × d_vis`.
    pub tokens: Tensor,
}

impl ImageTokens {
    /// Tokens fed to the projection network under `mode`.
    pub fn for_mode(&self, mode: ConditioningMode) -> Result<Tensor> {
        Ok(match mode {
            ConditioningMode::FullTokens => self.tokens.clone(),
            ConditioningMode::ClsOnly => self.cls.unsqueeze(1)?,
        })
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    fn new(pb: &Pb, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&pb.pp("ln1"), dim)?,
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, dim, dim, heads)?,
            ln2: LayerNorm::new(&pb.pp("ln2"), dim)?,
            ff: FeedForward::new(&pb.pp("ff"), dim, 2 * dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        Ok((&x + self.ff.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Small ViT: patchify, linear projection, class token, learned positions, transformer stack.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    patch_proj: Linear,
    cls: Tensor,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    image_size: usize,
    patch: usize,
}

impl ImageEncoder {
    pub fn new(pb: &Pb, cfg: &Config) -> Result<Self> {
        let pb = pb.pp("image");
        let p = cfg.patch_size;
        let k = (cfg.image_size / p).pow(2);
        Ok(Self {
            patch_proj: Linear::new(&pb.pp("patch_proj"), 3 * p * p, cfg.vis_dim, true)?,
            cls: pb.get(&[1, 1, cfg.vis_dim], "cls", Init::Normal(1.0))?,
            positions: pb.get(&[k + 1, cfg.vis_dim], "positions", Init::Normal(0.1))?,
            layers: (0..cfg.vis_layers)
                .map(|i| EncoderLayer::new(&pb.pp(format!("layer{i}")), cfg.vis_dim, cfg.enc_heads))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(&pb.pp("ln_out"), cfg.vis_dim)?,
            image_size: cfg.image_size,
            patch: p,
        })
    }

    pub fn dtype(&self) -> DType {
        self.cls.dtype()
    }

    pub fn token_count(&self) -> usize {
        (self.image_size / self.patch).pow(2) + 1
    }

    /// Layer-0 input: class token and linearly projected patches with positions, `B × (K+1) × d_vis`.
    pub fn embed_patches(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || h != w {
            return Err(Error::Shape(format!("image encoder needs square 3-channel input, got {:?}", images.dims())));
        }
        if h != self.image_size || h % self.patch != 0 {
            return Err(Error::Shape(format!(
                "image side {h} must equal {} and be divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        let (p, g) = (self.patch, h / self.patch);
        let patches = images.reshape((b, 3, g, p, g, p))?.permute((0, 2, 4, 1, 3, 5))?.contiguous()?.reshape((
            b,
            g * g,
            3 * p * p,
        ))?;
        let tokens = self.patch_proj.forward(&patches)?;
        let cls = self.cls.broadcast_as((b, 1, tokens.dim(2)?))?;
        Ok(Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.positions)?)
    }

    pub fn encode(&self, images: &Tensor) -> Result<ImageTokens> {
        let mut x = self.embed_patches(images)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        let tokens = self.ln_out.forward(&x)?;
        let cls = tokens.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(ImageTokens { cls, tokens })
    }
}

#[derive(Debug, Clone)]
struct ResamplerLayer {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Learned-query cross-attention resampler `P`: maps any number of image tokens to `M × d`.
/// No positional information is added to the input tokens, so the output is invariant to
/// their order.
#[derive(Debug, Clone)]
pub struct ImageProjector {
    queries: Tensor,
    layers: Vec<ResamplerLayer>,
    ln_out: LayerNorm,
    out: Linear,
    vis_dim: usize,
}

impl ImageProjector {
    pub fn new(pb: &Pb, cfg: &Config) -> Result<Self> {
        let pb = pb.pp("proj");
        let d = cfg.embed_dim;
        let layers = (0..cfg.proj_layers)
            .map(|i| {
                let pb = pb.pp(format!("layer{i}"));
                Ok(ResamplerLayer {
                    ln_q: LayerNorm::new(&pb.pp("ln_q"), d)?,
                    ln_kv: LayerNorm::new(&pb.pp("ln_kv"), cfg.vis_dim)?,
                    attn: MultiHeadAttention::new(&pb.pp("attn"), d, cfg.vis_dim, d, cfg.enc_heads)?,
                    ln_ff: LayerNorm::new(&pb.pp("ln_ff"), d)?,
                    ff: FeedForward::new(&pb.pp("ff"), d, 2 * d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            queries: pb.get(&[1, cfg.ctx_tokens, d], "queries", Init::Normal(1.0))?,
            layers,
            ln_out: LayerNorm::new(&pb.pp("ln_out"), d)?,
            out: Linear::new(&pb.pp("out"), d, d, false)?,
            vis_dim: cfg.vis_dim,
        })
    }

    /// `B × K' × d_vis` tokens to `B × M × d` context.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, _, w) = tokens.dims3()?;
        if w != self.vis_dim {
            return Err(Error::Shape(format!("projector expects token width {}, got {w}", self.vis_dim)));
        }
        let (_, m, d) = self.queries.dims3()?;
        let mut q = self.queries.broadcast_as((b, m, d))?.contiguous()?;
        for layer in &self.layers {
            let kv = layer.ln_kv.forward(tokens)?;
            q = (&q + layer.attn.forward(&layer.ln_q.forward(&q)?, &kv)?)?;
            q = (&q + layer.ff.forward(&layer.ln_ff.forward(&q)?)?)?;
        }
        self.out.forward(&self.ln_out.forward(&q)?)
    }
}

/// Conditioning tensors for a batch, ready for the denoiser.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `B × N_tex × d`.
    pub text: Tensor,
    /// `B × M × d`.
    pub image_context: Tensor,
}

/// Text encoder, image encoder and projector, with the token-selection mode.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub projector: ImageProjector,
    pub mode: ConditioningMode,
}

impl Conditioner {
    pub fn new(pb: &Pb, cfg: &Config) -> Result<Self> {
        Ok(Self {
            text: TextEncoder::new(pb, cfg)?,
            image: ImageEncoder::new(pb, cfg)?,
            projector: ImageProjector::new(pb, cfg)?,
            mode: cfg.cond_mode,
        })
    }

    /// Projected image context `F_img = P(F_vis)` for `B × 3 × H × W` images.
    pub fn image_context(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.image.encode(images)?;
        self.projector.forward(&tokens.for_mode(self.mode)?)
    }

    pub fn bundle(&self, prompts: &[&str], images: &Tensor) -> Result<ConditioningBundle> {
        if prompts.len() != images.dim(0)? {
            return Err(Error::Shape(format!("{} prompts for {} images", prompts.len(), images.dim(0)?)));
        }
        Ok(ConditioningBundle { text: self.text.encode_batch(prompts)?, image_context: self.image_context(images)? })
    }

    /// The unconditional bundle: null text rows and an all-zero image context.
    pub fn null_bundle(&self, batch: usize) -> Result<ConditioningBundle> {
        let null = self.text.null_embedding();
        let (n, d) = null.dims2()?;
        let m = self.projector.queries.dim(1)?;
        Ok(ConditioningBundle {
            text: null.unsqueeze(0)?.broadcast_as((batch, n, d))?.contiguous()?,
            image_context: Tensor::zeros((batch, m, d), null.dtype(), null.device())?,
        })
    }
}

/// Cosine similarity between the last dimensions of two equally shaped tensors.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&(na * nb)?.clamp(1e-12, f64::INFINITY)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{Device, IndexOp};

    fn small() -> Config {
        let mut c = Config::default();
        c.image_size = 16;
        c.patch_size = 4;
        c.embed_dim = 8;
        c.vis_dim = 8;
        c.ctx_tokens = 3;
        c.text_len = 6;
        c.vocab_size = 97;
        c
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn tokenizer_is_case_insensitive_and_separates_colours() {
        assert_eq!(tokenize("A Red  Circle", 4096), tokenize("a red circle", 4096));
        let a = tokenize("red circle", 4096);
        let b = tokenize("blue square", 4096);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|t| !b.contains(t)));
        assert!(tokenize("   ", 4096).is_empty());
    }

    #[test]
    fn text_encoding_is_deterministic_and_padded() {
        let cfg = small();
        let s = ParamStore::new(DType::F64, 1);
        let enc = TextEncoder::new(&s.root(), &cfg).unwrap();
        let a = enc.encode("a red circle moving left").unwrap();
        assert_eq!(a.dims(), &[6, 8]);
        assert_eq!(max_abs(&a, &enc.encode("a red circle moving left").unwrap()), 0.0);
        assert!(max_abs(&a, &enc.encode("a blue square moving left").unwrap()) > 0.0);
        assert_eq!(enc.encode("one two three four five six seven eight").unwrap().dims(), &[6, 8]);
        assert_eq!(max_abs(&enc.encode("").unwrap(), enc.null_embedding()), 0.0);
    }

    #[test]
    fn default_encoder_yields_65_tokens() {
        let cfg = Config::default();
        let s = ParamStore::new(DType::F32, 0);
        let enc = ImageEncoder::new(&s.root(), &cfg).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let t = enc.encode(&x).unwrap();
        assert_eq!(enc.token_count(), 65);
        assert_eq!(t.tokens.dims(), &[2, 65, cfg.vis_dim]);
        assert_eq!(t.cls.dims(), &[2, cfg.vis_dim]);
        assert!(enc.encode(&Tensor::zeros((1, 3, 64, 32), DType::F32, &Device::Cpu).unwrap()).is_err());
        assert!(enc.encode(&Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn patch_embedding_is_local() {
        let cfg = small();
        let s = ParamStore::new(DType::F64, 2);
        let enc = ImageEncoder::new(&s.root(), &cfg).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let mut data = vec![0f64; 3 * 16 * 16];
        // pixel (row 5, col 9) sits in patch row 1, patch col 2 -> patch index 6, token 7
        data[16 * 16 + 5 * 16 + 9] = 1.0;
        let y = Tensor::from_vec(data, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let a = enc.embed_patches(&x).unwrap();
        let b = enc.embed_patches(&y).unwrap();
        for tok in 0..17 {
            let d = max_abs(&a.i((0, tok)).unwrap(), &b.i((0, tok)).unwrap());
            if tok == 7 {
                assert!(d > 0.0);
            } else {
                assert_eq!(d, 0.0, "token {tok}");
            }
        }
    }

    #[test]
    fn projector_shapes_and_permutation_invariance() {
        let cfg = small();
        let s = ParamStore::new(DType::F64, 3);
        let p = ImageProjector::new(&s.root(), &cfg).unwrap();
        let tokens = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let out = p.forward(&tokens).unwrap();
        assert_eq!(out.dims(), &[2, 3, 8]);
        let perm = Tensor::new(&[3u32, 0, 4, 2, 1], &Device::Cpu).unwrap();
        let shuffled = tokens.index_select(&perm, 1).unwrap();
        assert!(max_abs(&out, &p.forward(&shuffled).unwrap()) < 1e-12);
        assert!(p.forward(&Tensor::zeros((1, 5, 7), DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn both_modes_give_the_same_context_shape() {
        for mode in [ConditioningMode::FullTokens, ConditioningMode::ClsOnly] {
            let mut cfg = small();
            cfg.cond_mode = mode;
            let s = ParamStore::new(DType::F64, 4);
            let c = Conditioner::new(&s.root(), &cfg).unwrap();
            let x = Tensor::randn(0f64, 0.5, (2, 3, 16, 16), &Device::Cpu).unwrap();
            let tokens = c.image.encode(&x).unwrap().for_mode(mode).unwrap();
            let expected = if mode == ConditioningMode::FullTokens { 17 } else { 1 };
            assert_eq!(tokens.dims(), &[2, expected, 8]);
            let b = c.bundle(&["a red circle", ""], &x).unwrap();
            assert_eq!(b.image_context.dims(), &[2, 3, 8]);
            assert_eq!(b.text.dims(), &[2, 6, 8]);
            let n = c.null_bundle(2).unwrap();
            assert_eq!(n.image_context.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
            assert!(c.bundle(&["x"], &x).is_err());
        }
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        let a = Tensor::new(&[[1f64, 2.0, 3.0]], &Device::Cpu).unwrap();
        let b = (&a * 2.5).unwrap();
        let c = cosine(&a, &b).unwrap().to_vec1::<f64>().unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
    }
}
