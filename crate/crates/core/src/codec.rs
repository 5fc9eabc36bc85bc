//! Frame-wise convolutional autoencoder between pixel videos and the diffusion latent space.

use candle_core::{DType, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Pb};

/// `L × 3 × H × W` pixel video with values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct VideoTensor(Tensor);

const RANGE_SLACK: f64 = 1e-6;

impl VideoTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let (l, c, _, _) =
            data.dims4().map_err(|_| Error::Shape(format!("video must be rank 4, got {:?}", data.dims())))?;
        if l == 0 || c != 3 {
            return Err(Error::Shape(format!("video must be L x 3 x H x W with L >= 1, got {:?}", data.dims())));
        }
        let lo = data.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = data.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(lo >= -1.0 - RANGE_SLACK && hi <= 1.0 + RANGE_SLACK) {
            return Err(Error::InvalidArgument(format!("pixel values outside [-1, 1]: [{lo}, {hi}]")));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[0]
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        (self.0.dims()[2], self.0.dims()[3])
    }
}

/// `L × C × H' × W'` latent video, already divided by the codec's normalization constant.
#[derive(Debug, Clone)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Shape(format!("latent must be rank 4, got {:?}", data.dims())));
        }
        Ok(Self(data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Codec {
    enc_in: Conv2d,
    enc_stages: Vec<Stage>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<Stage>,
    dec_out: Conv2d,
    factor: usize,
    latent_channels: usize,
    scale: f64,
}

impl Codec {
    /// Builds the codec under the `codec.` prefix. `scale` is the latent normalization constant.
    pub fn new(pb: &Pb, cfg: &Config, scale: f64) -> Result<Self> {
        let pb = pb.pp("codec");
        let w = cfg.codec_width;
        let levels = cfg.latent_factor.trailing_zeros() as usize;
        let stage = |pb: &Pb, stride: usize| -> Result<Stage> {
            Ok(Stage {
                conv_a: Conv2d::new(&pb.pp("conv_a"), w, w, 3, stride)?,
                conv_b: Conv2d::new(&pb.pp("conv_b"), w, w, 3, 1)?,
            })
        };
        let enc = pb.pp("enc");
        let dec = pb.pp("dec");
        Ok(Self {
            enc_in: Conv2d::new(&enc.pp("conv_in"), 3, w, 3, 1)?,
            enc_stages: (0..levels).map(|i| stage(&enc.pp(format!("down{i}")), 2)).collect::<Result<_>>()?,
            enc_out: Conv2d::new(&enc.pp("conv_out"), w, cfg.latent_channels, 3, 1)?,
            dec_in: Conv2d::new(&dec.pp("conv_in"), cfg.latent_channels, w, 3, 1)?,
            dec_stages: (0..levels).map(|i| stage(&dec.pp(format!("up{i}")), 1)).collect::<Result<_>>()?,
            dec_out: Conv2d::new(&dec.pp("conv_out"), w, 3, 3, 1)?,
            factor: cfg.latent_factor,
            latent_channels: cfg.latent_channels,
            scale,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    /// Raw encoder output for a batch of frames `N × 3 × H × W` (no normalization).
    pub fn encode_raw(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Shape(format!("{h}x{w} frame not divisible by factor {}", self.factor)));
        }
        let mut x = self.enc_in.forward(frames)?;
        for s in &self.enc_stages {
            x = s.conv_a.forward(&x.silu()?)?;
            x = (&x + s.conv_b.forward(&x.silu()?)?)?;
        }
        self.enc_out.forward(&x.silu()?)
    }

    /// Raw decoder output for a batch of raw latents (no clamping).
    pub fn decode_raw(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.latent_channels {
            return Err(Error::Shape(format!("expected {} latent channels, got {c}", self.latent_channels)));
        }
        let mut x = self.dec_in.forward(latents)?;
        for s in &self.dec_stages {
            x = upsample2(&x.silu()?)?;
            x = s.conv_a.forward(&x)?;
            x = (&x + s.conv_b.forward(&x.silu()?)?)?;
        }
        self.dec_out.forward(&x.silu()?)
    }

    /// Encodes every frame independently and divides by the normalization constant.
    pub fn encode_video(&self, x: &VideoTensor) -> Result<LatentVideo> {
        LatentVideo::new((self.encode_raw(x.tensor())? / self.scale)?)
    }

    /// Decodes every frame independently; output is clamped to `[-1, 1]`.
    pub fn decode_video(&self, z: &LatentVideo) -> Result<VideoTensor> {
        let x = self.decode_raw(&(z.tensor() * self.scale)?)?.clamp(-1.0, 1.0)?;
        VideoTensor::new(x)
    }

    /// Pixel reconstruction MSE over a batch of frames.
    pub fn reconstruction_loss(&self, frames: &Tensor) -> Result<Tensor> {
        let recon = self.decode_raw(&self.encode_raw(frames)?)?;
        crate::schedule::mse(frames, &recon)
    }
}

/// Nearest-neighbour 2x spatial upsampling through broadcasting, so it stays differentiable.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?.broadcast_as((n, c, h, 2, w, 2))?.reshape((n, c, 2 * h, 2 * w))?)
}
