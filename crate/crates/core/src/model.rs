//! The full set of networks built from one parameter store.

use crate::codec::Codec;
use crate::conditioning::Conditioner;
use crate::config::Config;
use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::nn::Pb;

#[derive(Debug, Clone)]
pub struct Model {
    pub codec: Codec,
    pub cond: Conditioner,
    pub unet: Denoiser,
}

impl Model {
    pub fn new(pb: &Pb, cfg: &Config, latent_scale: f64) -> Result<Self> {
        Ok(Self {
            codec: Codec::new(pb, cfg, latent_scale)?,
            cond: Conditioner::new(pb, cfg)?,
            unet: Denoiser::new(pb, cfg)?,
        })
    }
}
