//! DDIM sampling with classifier-free guidance.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{LatentVideo, VideoTensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
    pub seed: u64,
    /// Zero the image context and image latent in the conditional branch as well.
    pub drop_image: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, eta: 0.0, guidance: 7.5, seed: 0, drop_image: false }
    }
}

/// `eps_uncond + w·(eps_cond − eps_uncond)`; `w = 1` and `w = 0` return the branches unchanged.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::Shape(format!("cfg_combine: {:?} vs {:?}", eps_cond.dims(), eps_uncond.dims())));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * w)?)?)
}

/// Strictly decreasing timesteps with uniform stride `T / steps`, starting at `T − 1`.
pub fn timestep_sequence(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::InvalidArgument(format!("steps must lie in [1, {timesteps}], got {steps}")));
    }
    let stride = timesteps / steps;
    Ok((0..steps).map(|i| timesteps - 1 - i * stride).collect())
}

/// One DDIM update from `t` to `t_prev` (`None` is the terminal step, which returns the
/// predicted clean sample).
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
    }
    if t >= sched.timesteps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside schedule")));
    }
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::InvalidArgument(format!("t_prev {tp} must be below t {t}")));
        }
    }
    if z_t.dims() != eps_hat.dims() || z_t.dims() != noise.dims() {
        return Err(Error::Shape("ddim_step operands must share one shape".into()));
    }
    let ab_t = sched.alpha_bar()[t];
    let x0 = ((z_t - (eps_hat * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
    let Some(tp) = t_prev else {
        return Ok(x0);
    };
    let ab_prev = sched.alpha_bar()[tp];
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = ((x0 * ab_prev.sqrt())? + (eps_hat * dir)?)?;
    if sigma > 0.0 {
        out = (out + (noise * sigma)?)?;
    }
    Ok(out)
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Animates `image` (`3 × H × W`, values in `[-1, 1]`) into a video of `frames` frames.
///
/// The conditional and unconditional predictions are computed as one batch of two per step.
pub fn generate(
    image: &Tensor,
    prompt: &str,
    model: &Model,
    sched: &NoiseSchedule,
    frames: usize,
    cfg: &SamplerConfig,
) -> Result<VideoTensor> {
    let (c3, h, w) = image.dims3()?;
    if c3 != 3 || frames == 0 {
        return Err(Error::Shape(format!("expected a 3 x H x W image and frames >= 1, got {:?}", image.dims())));
    }
    let steps = timestep_sequence(sched.timesteps(), cfg.steps)?;
    let image = VideoTensor::new(image.unsqueeze(0)?)?;
    let z_img = model.codec.encode_video(&image)?.into_tensor();
    let (_, c, lh, lw) = z_img.dims4()?;
    let dtype = z_img.dtype();

    let cond = model.cond.bundle(&[prompt], image.tensor())?;
    let null = model.cond.null_bundle(1)?;
    let (img_ctx, z_img) = if cfg.drop_image {
        (cond.image_context.zeros_like()?, z_img.zeros_like()?)
    } else {
        (cond.image_context, z_img)
    };
    let text = Tensor::cat(&[&cond.text, &null.text], 0)?;
    let ctx = Tensor::cat(&[&img_ctx, &null.image_context], 0)?;
    let z_img = Tensor::cat(&[&z_img, &z_img.zeros_like()?], 0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = [1, frames, c, lh, lw];
    let mut z = gaussian(&shape, dtype, &mut rng)?;
    for (i, &t) in steps.iter().enumerate() {
        let input = crate::denoiser::DenoiserInput {
            z_t: Tensor::cat(&[&z, &z], 0)?,
            z_img: z_img.clone(),
            t: vec![t, t],
            text: text.clone(),
            image_context: ctx.clone(),
        };
        let eps = model.unet.predict_noise(&input)?;
        let eps = cfg_combine(&eps.get(0)?.unsqueeze(0)?, &eps.get(1)?.unsqueeze(0)?, cfg.guidance)?;
        let noise = gaussian(&shape, dtype, &mut rng)?;
        z = ddim_step(&z, &eps, t, steps.get(i + 1).copied(), cfg.eta, sched, &noise)?;
    }
    let video = model.codec.decode_video(&LatentVideo::new(z.squeeze(0)?)?)?;
    if video.size() != (h, w) {
        return Err(Error::Shape(format!("decoded {:?}, expected {h}x{w}", video.size())));
    }
    Ok(video)
}
