//! Flat `key = value` configuration.
//!
//! Every key is typed and documented in [`Config::reference`]. Lines starting with `#` and
//! blank lines are ignored. Unknown keys, duplicate keys and unparsable values are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which image tokens are fed to the projection network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningMode {
    /// All patch tokens plus the class token.
    FullTokens,
    /// Only the class token, as a single-token sequence.
    ClsOnly,
}

impl FromStr for ConditioningMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full_tokens" => Ok(Self::FullTokens),
            "cls_only" => Ok(Self::ClsOnly),
            other => Err(format!("expected full_tokens or cls_only, got {other:?}")),
        }
    }
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FullTokens => "full_tokens",
            Self::ClsOnly => "cls_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            other => Err(format!("unsupported schedule kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("linear")
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
via_fromstr!(usize, u64, bool, ConditioningMode, ScheduleKind);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = s.parse::<f64>().map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn render(&self) -> String {
        // `{:?}` round-trips exactly.
        format!("{self:?}")
    }
}

macro_rules! config_keys {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ;)*) => {
        /// Complete run configuration. See [`Config::reference`] for the key table.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl Config {
            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)?;
                        Ok(())
                    } )*
                    _ => Err(format!("unknown key {key:?}")),
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![ $( (stringify!($name), ConfigValue::render(&self.$name)), )* ]
            }

            /// `(key, type, default, description)` rows for every key.
            pub fn reference() -> Vec<(&'static str, &'static str, String, &'static str)> {
                let d = Config::default();
                vec![ $( (
                    stringify!($name),
                    stringify!($ty),
                    ConfigValue::render(&d.$name),
                    concat!($($doc),*).trim(),
                ), )* ]
            }
        }
    };
}

config_keys! {
    /// Frame side length in pixels (frames are square).
    image_size: usize = 64;
    /// Codec spatial downsampling factor (4 or 8).
    latent_factor: usize = 8;
    /// Latent channel count.
    latent_channels: usize = 4;
    /// Frames per training clip and per generated video.
    frames: usize = 16;
    /// Largest frame stride drawn during clip sampling.
    max_stride: usize = 6;
    /// Frames per generated corpus clip.
    native_frames: usize = 96;

    /// Diffusion timestep count.
    timesteps: usize = 1000;
    /// First beta of the schedule.
    beta_start: f64 = 1e-4;
    /// Last beta of the schedule.
    beta_end: f64 = 2e-2;
    /// Beta spacing.
    schedule: ScheduleKind = ScheduleKind::Linear;

    /// Codec hidden width.
    codec_width: usize = 32;

    /// Shared width of text embedding and projected image context.
    embed_dim: usize = 64;
    /// Text token count after pad/truncate.
    text_len: usize = 16;
    /// Hashed text vocabulary size.
    vocab_size: usize = 4096;
    /// Image encoder patch size.
    patch_size: usize = 8;
    /// Image encoder token width.
    vis_dim: usize = 64;
    /// Image encoder transformer layers.
    vis_layers: usize = 2;
    /// Learned query count of the projection network.
    ctx_tokens: usize = 16;
    /// Projection network layers.
    proj_layers: usize = 2;
    /// Attention heads in encoders and projection network.
    enc_heads: usize = 2;
    /// Which image tokens feed the projection network.
    cond_mode: ConditioningMode = ConditioningMode::FullTokens;
    /// Concatenate the conditioning-image latent to every noisy frame.
    detail_modulation: bool = true;

    /// U-Net width at the first resolution level (the second level is twice this).
    unet_width: usize = 64;
    /// U-Net attention heads.
    unet_heads: usize = 2;

    /// Training seed.
    seed: u64 = 0;
    /// Clips (or frames) per optimizer step.
    batch: usize = 16;
    /// Gradient accumulation micro-steps per optimizer step.
    accum: usize = 1;
    /// Joint condition dropout probability.
    cond_drop_prob: f64 = 0.1;
    /// Codec learning rate.
    lr_codec: f64 = 1e-3;
    /// Image-adapter stage learning rate.
    lr_image: f64 = 1e-4;
    /// Video fine-tuning stage learning rate.
    lr_video: f64 = 5e-5;
    /// Codec training steps.
    steps_codec: u64 = 2000;
    /// Image-adapter stage steps.
    steps_image: u64 = 20000;
    /// Video fine-tuning stage steps.
    steps_video: u64 = 2000;
    /// Checkpoint interval in steps (0 disables periodic checkpoints).
    checkpoint_every: u64 = 500;

    /// DDIM steps at sampling time.
    sample_steps: usize = 50;
    /// DDIM eta.
    eta: f64 = 0.0;
    /// Classifier-free guidance scale.
    guidance: f64 = 7.5;
}

impl Config {
    /// Parses config text, starting from the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config { line: line_no, msg: format!("expected `key = value`, got {line:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config { line: line_no, msg: format!("duplicate key {key:?}") });
            }
            cfg.set(key, value).map_err(|msg| Error::Config { line: line_no, msg: format!("{key}: {msg}") })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Canonical rendering: every key, in declaration order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        if self.latent_factor == 0 || self.image_size % self.latent_factor != 0 {
            return bad(format!(
                "image_size {} not divisible by latent_factor {}",
                self.image_size, self.latent_factor
            ));
        }
        if !self.latent_factor.is_power_of_two() || self.latent_factor < 2 {
            return bad("latent_factor must be a power of two >= 2".into());
        }
        if self.latent_size() % 2 != 0 {
            return bad("latent size must be even for the two-level U-Net".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be divisible by patch_size".into());
        }
        if self.frames == 0 || self.max_stride == 0 || self.native_frames < self.frames {
            return bad("need frames >= 1, max_stride >= 1 and native_frames >= frames".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be >= 1".into());
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1".into());
        }
        for (name, w, h) in [
            ("embed_dim", self.embed_dim, self.enc_heads),
            ("vis_dim", self.vis_dim, self.enc_heads),
            ("unet_width", self.unet_width, self.unet_heads),
        ] {
            if h == 0 || w == 0 || w % h != 0 {
                return bad(format!("{name} must be a positive multiple of its head count"));
            }
        }
        for (name, v, max) in [
            ("image_size", self.image_size, 1024),
            ("frames", self.frames, 1024),
            ("native_frames", self.native_frames, 100_000),
            ("timesteps", self.timesteps, 100_000),
            ("vocab_size", self.vocab_size, 1 << 20),
            ("text_len", self.text_len, 1024),
            ("ctx_tokens", self.ctx_tokens, 1024),
            ("latent_channels", self.latent_channels, 256),
            ("embed_dim", self.embed_dim, 4096),
            ("vis_dim", self.vis_dim, 4096),
            ("unet_width", self.unet_width, 4096),
            ("codec_width", self.codec_width, 4096),
            ("vis_layers", self.vis_layers, 64),
            ("proj_layers", self.proj_layers, 64),
        ] {
            if v > max {
                return bad(format!("{name} = {v} exceeds the supported maximum {max}"));
            }
        }
        if self.unet_width % 8 != 0 || self.codec_width % 8 != 0 {
            return bad("unet_width and codec_width must be multiples of 8 (group norm)".into());
        }
        if self.text_len == 0 || self.vocab_size == 0 || self.ctx_tokens == 0 || self.latent_channels == 0 {
            return bad("text_len, vocab_size, ctx_tokens and latent_channels must be >= 1".into());
        }
        if self.batch == 0 || self.accum == 0 {
            return bad("batch and accum must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return bad("cond_drop_prob must lie in [0, 1)".into());
        }
        if !(self.lr_codec > 0.0 && self.lr_image > 0.0 && self.lr_video > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return bad("sample_steps must lie in [1, timesteps]".into());
        }
        if !(0.0..=1.0).contains(&self.eta) || self.guidance < 0.0 {
            return bad("eta must lie in [0, 1] and guidance must be >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut cfg = Config::default();
        cfg.beta_end = 0.1;
        cfg.cond_mode = ConditioningMode::ClsOnly;
        cfg.detail_modulation = false;
        let back = Config::parse_str(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_is_error() {
        let err = Config::parse_str("frames = 8\nfrobnicate = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_and_malformed() {
        assert!(Config::parse_str("frames = 8\nframes = 9").is_err());
        assert!(Config::parse_str("frames 8").is_err());
        assert!(Config::parse_str("frames = eight").is_err());
        assert!(Config::parse_str("eta = NaN").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse_str("# toy\n\n  image_size = 32 \nlatent_factor = 4\npatch_size = 4\n").unwrap();
        assert_eq!(cfg.image_size, 32);
        assert_eq!(cfg.latent_size(), 8);
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        assert!(Config::parse_str("image_size = 60").is_err());
        assert!(Config::parse_str("beta_start = 0.5\nbeta_end = 0.1").is_err());
        assert!(Config::parse_str("cond_drop_prob = 1.0").is_err());
    }

    #[test]
    fn reference_covers_every_key() {
        let rows = Config::reference();
        assert_eq!(rows.len(), Config::default().entries().len());
        assert!(rows.iter().all(|r| !r.3.is_empty()));
    }
}
