//! Staged optimization: codec pretraining, image-adapter training on single frames, and video
//! fine-tuning on random-stride clips.
//!
//! All randomness of a step (batch selection, timesteps, noise, condition dropout) comes from
//! a generator keyed by `(seed, stage, step)`, so resuming from a checkpoint replays the exact
//! same sequence of losses.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{sample_clip, Corpus};
use crate::denoiser::DenoiserInput;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{fnv1a, ParamStore};
use crate::sampler::gaussian;
use crate::schedule::{mse, q_sample_batch, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Codec,
    ImageAdapter,
    VideoFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::ImageAdapter => "image_adapter",
            Stage::VideoFinetune => "video_finetune",
        }
    }

    /// Whether parameter `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Codec => name.starts_with("codec."),
            Stage::ImageAdapter => {
                name.starts_with("text.")
                    || name.starts_with("image.")
                    || name.starts_with("proj.")
                    || (name.starts_with("unet.")
                        && (name.ends_with(".img_k.weight") || name.ends_with(".img_v.weight")))
            }
            Stage::VideoFinetune => name.starts_with("proj.") || name.starts_with("unet."),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "codec" => Ok(Stage::Codec),
            "image_adapter" => Ok(Stage::ImageAdapter),
            "video_finetune" => Ok(Stage::VideoFinetune),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

/// Adam first and second moments of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Everything needed to resume training or run inference.
#[derive(Debug)]
pub struct ModelState {
    pub config: Config,
    pub params: ParamStore,
    pub optimizer: BTreeMap<String, Moments>,
    pub stage: Stage,
    /// Optimizer steps taken in the current stage.
    pub step: u64,
    /// Latent normalization constant (standard deviation of raw encoder outputs).
    pub normalization: f64,
}

impl ModelState {
    /// Fresh state with every parameter initialized from `config.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(DType::F32, config.seed);
        Model::new(&params.root(), &config, 1.0)?;
        Ok(Self { config, params, optimizer: BTreeMap::new(), stage: Stage::Codec, step: 0, normalization: 1.0 })
    }

    /// Deep copy: parameters and moments live in fresh storage.
    pub fn try_clone(&self) -> Result<Self> {
        let params = ParamStore::new(self.params.dtype(), self.config.seed);
        for (name, var) in self.params.entries() {
            params.insert(&name, var.as_tensor().copy()?)?;
        }
        let optimizer = self
            .optimizer
            .iter()
            .map(|(n, m)| Ok((n.clone(), Moments { m: m.m.copy()?, v: m.v.copy()? })))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: self.config.clone(),
            params,
            optimizer,
            stage: self.stage,
            step: self.step,
            normalization: self.normalization,
        })
    }

    /// Inference model; gradients are tracked for every parameter.
    pub fn model(&self) -> Result<Model> {
        Model::new(&self.params.root(), &self.config, self.normalization)
    }

    /// Model whose non-trainable parameters are detached.
    pub fn model_for(&self, trainable: &dyn Fn(&str) -> bool) -> Result<Model> {
        Model::new(&self.params.builder(trainable), &self.config, self.normalization)
    }

    /// Moves to `stage`, resetting the step counter and optimizer moments. Stages only move forward.
    pub fn advance(&mut self, stage: Stage) -> Result<()> {
        if stage < self.stage {
            return Err(Error::InvalidArgument(format!(
                "cannot go back from {} to {}",
                self.stage.name(),
                stage.name()
            )));
        }
        if stage > self.stage {
            self.stage = stage;
            self.step = 0;
            self.optimizer.clear();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch: usize,
    pub accum: usize,
    pub steps: u64,
    pub cond_drop_prob: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub frames: usize,
    pub max_stride: usize,
}

impl TrainConfig {
    pub fn for_stage(cfg: &Config, stage: Stage) -> Self {
        let (lr, steps) = match stage {
            Stage::Codec => (cfg.lr_codec, cfg.steps_codec),
            Stage::ImageAdapter => (cfg.lr_image, cfg.steps_image),
            Stage::VideoFinetune => (cfg.lr_video, cfg.steps_video),
        };
        Self {
            stage,
            lr,
            batch: cfg.batch,
            accum: cfg.accum,
            steps,
            cond_drop_prob: cfg.cond_drop_prob,
            seed: cfg.seed,
            checkpoint_every: cfg.checkpoint_every,
            frames: cfg.frames,
            max_stride: cfg.max_stride,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.accum == 0 || !(0.0..1.0).contains(&self.cond_drop_prob) {
            return Err(Error::InvalidArgument("need lr > 0, batch >= 1, accum >= 1, cond_drop_prob in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One micro-batch of training data.
#[derive(Debug, Clone)]
pub enum Batch {
    /// Single frames `B × 3 × H × W` (codec and image-adapter stages).
    Frames { frames: Tensor, captions: Vec<String> },
    /// Clips `B × L × 3 × H × W` (video stage). Frame 0 is the conditioning image.
    Clips { clips: Tensor, captions: Vec<String> },
}

impl Batch {
    fn as_clips(&self) -> Result<(Tensor, &[String])> {
        match self {
            Batch::Frames { frames, captions } => Ok((frames.unsqueeze(1)?, captions)),
            Batch::Clips { clips, captions } => Ok((clips.clone(), captions)),
        }
    }
}

/// Generator for one purpose within one step.
pub fn step_rng(seed: u64, stage: Stage, step: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(format!("{seed}/{}/{step}/{purpose}", stage.name()).as_bytes()))
}

/// Noise-prediction loss on a batch of clips with joint condition dropout.
pub fn diffusion_loss(
    model: &Model,
    clips: &Tensor,
    captions: &[String],
    sched: &NoiseSchedule,
    cond_drop_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, l, _, h, w) = clips.dims5()?;
    if captions.len() != b {
        return Err(Error::Shape(format!("{} captions for {b} clips", captions.len())));
    }
    let latents = model.codec.encode_raw(&clips.reshape((b * l, 3, h, w))?)?;
    let latents = (latents / model.codec.scale())?.detach();
    let (_, c, lh, lw) = latents.dims4()?;
    let z0 = latents.reshape((b, l, c, lh, lw))?;
    let z_img = z0.narrow(1, 0, 1)?.squeeze(1)?;
    let images = clips.narrow(1, 0, 1)?.squeeze(1)?;

    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(0..sched.timesteps())).collect();
    let eps = gaussian(z0.dims(), z0.dtype(), rng)?;
    let z_t = q_sample_batch(&z0, &ts, &eps, sched)?;

    let keep: Vec<bool> = (0..b).map(|_| rng.gen::<f64>() >= cond_drop_prob).collect();
    let prompts: Vec<&str> = captions.iter().zip(&keep).map(|(c, k)| if *k { c.as_str() } else { "" }).collect();
    let mask =
        Tensor::from_vec(keep.iter().map(|k| if *k { 1f32 } else { 0f32 }).collect::<Vec<_>>(), b, clips.device())?
            .to_dtype(z0.dtype())?;
    let bundle = model.cond.bundle(&prompts, &images)?;
    let image_context = bundle.image_context.broadcast_mul(&mask.reshape((b, 1, 1))?)?;
    let z_img = z_img.broadcast_mul(&mask.reshape((b, 1, 1, 1))?)?;

    let pred = model.unet.predict_noise(&DenoiserInput { z_t, z_img, t: ts, text: bundle.text, image_context })?;
    mse(&eps, &pred)
}

/// A model built for one stage plus the variables that stage updates.
pub struct StageTrainer {
    model: Model,
    trainable: Vec<(String, Var)>,
    stage: Stage,
}

impl StageTrainer {
    pub fn new(state: &ModelState) -> Result<Self> {
        let stage = state.stage;
        let pred = move |n: &str| stage.trains(n);
        let model = state.model_for(&pred)?;
        let trainable = state.params.entries().into_iter().filter(|(n, _)| stage.trains(n)).collect();
        Ok(Self { model, trainable, stage })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn loss(&self, batch: &Batch, sched: &NoiseSchedule, tc: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match (self.stage, batch) {
            (Stage::Codec, Batch::Frames { frames, .. }) => self.model.codec.reconstruction_loss(frames),
            (Stage::ImageAdapter, Batch::Frames { .. }) | (Stage::VideoFinetune, Batch::Clips { .. }) => {
                let (clips, captions) = batch.as_clips()?;
                diffusion_loss(&self.model, &clips, captions, sched, tc.cond_drop_prob, rng)
            }
            (stage, _) => Err(Error::InvalidArgument(format!("wrong batch kind for stage {}", stage.name()))),
        }
    }

    /// One optimizer step over `micro_batches` (gradient accumulation). Returns the mean loss.
    pub fn step(
        &self,
        state: &mut ModelState,
        micro_batches: &[Batch],
        sched: &NoiseSchedule,
        tc: &TrainConfig,
    ) -> Result<f64> {
        tc.validate()?;
        if state.stage != self.stage || tc.stage != self.stage {
            return Err(Error::InvalidArgument("trainer, state and config stages differ".into()));
        }
        if micro_batches.is_empty() {
            return Err(Error::InvalidArgument("no batches".into()));
        }
        let mut rng = step_rng(tc.seed, self.stage, state.step, "noise");
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let scale = 1.0 / micro_batches.len() as f64;
        for batch in micro_batches {
            let loss = self.loss(batch, sched, tc, &mut rng)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged { step: state.step, detail: format!("loss is {value}") });
            }
            total += value * scale;
            let store = loss.backward()?;
            for (name, var) in &self.trainable {
                if let Some(g) = store.get(var.as_tensor()) {
                    let g = (g.detach() * scale)?;
                    let acc = match grads.remove(name) {
                        Some(prev) => (prev + g)?,
                        None => g,
                    };
                    grads.insert(name.clone(), acc);
                }
            }
        }
        adam_update(state, &self.trainable, &grads, tc.lr)?;
        state.step += 1;
        Ok(total)
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(
    state: &mut ModelState,
    trainable: &[(String, Var)],
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, var) in trainable {
        let Some(g) = grads.get(name) else { continue };
        let zeros = || var.as_tensor().zeros_like();
        let (m, v) = match state.optimizer.get(name) {
            Some(mo) => (mo.m.clone(), mo.v.clone()),
            None => (zeros()?, zeros()?),
        };
        let m = ((m * BETA1)? + (g * (1.0 - BETA1))?)?;
        let v = ((v * BETA2)? + (g.sqr()? * (1.0 - BETA2))?)?;
        let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + ADAM_EPS)?)?;
        let new = (var.as_tensor().detach() - (update * lr)?)?;
        let check = new.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::Diverged { step: state.step, detail: format!("parameter {name} became non-finite") });
        }
        var.set(&new)?;
        state.optimizer.insert(name.clone(), Moments { m, v });
    }
    Ok(())
}

/// Convenience wrapper that builds a [`StageTrainer`] and takes one step on one batch.
pub fn train_step(state: &mut ModelState, batch: &Batch, sched: &NoiseSchedule, tc: &TrainConfig) -> Result<f64> {
    StageTrainer::new(state)?.step(state, std::slice::from_ref(batch), sched, tc)
}

/// Draws the micro-batch for `(stage, step, micro)` from the corpus.
pub fn draw_batch(corpus: &Corpus, tc: &TrainConfig, step: u64, micro: usize) -> Result<Batch> {
    let mut rng = step_rng(tc.seed, tc.stage, step, &format!("batch{micro}"));
    let mut items = Vec::with_capacity(tc.batch);
    let mut captions = Vec::with_capacity(tc.batch);
    for _ in 0..tc.batch {
        let clip = rng.gen_range(0..corpus.len());
        let native = corpus.records[clip].native_length;
        captions.push(corpus.records[clip].caption.clone());
        match tc.stage {
            Stage::Codec | Stage::ImageAdapter => {
                let f = rng.gen_range(0..native);
                items.push(corpus.frames[clip].get(f)?);
            }
            Stage::VideoFinetune => {
                let s = sample_clip(native, tc.frames, tc.max_stride, &mut rng)?;
                items.push(corpus.clip_frames(clip, &s)?);
            }
        }
    }
    let stacked = Tensor::stack(&items, 0)?;
    Ok(match tc.stage {
        Stage::VideoFinetune => Batch::Clips { clips: stacked, captions },
        _ => Batch::Frames { frames: stacked, captions },
    })
}

/// Standard deviation of raw encoder outputs over every frame of the corpus.
pub fn calibrate_latent_scale(model: &Model, corpus: &Corpus) -> Result<f64> {
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for frames in &corpus.frames {
        for chunk in 0..frames.dim(0)?.div_ceil(32) {
            let start = chunk * 32;
            let len = 32.min(frames.dim(0)? - start);
            let z = model.codec.encode_raw(&frames.narrow(0, start, len)?)?.to_dtype(DType::F64)?.flatten_all()?;
            sum += z.sum_all()?.to_scalar::<f64>()?;
            sq += z.sqr()?.sum_all()?.to_scalar::<f64>()?;
            n += z.elem_count();
        }
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::Diverged { step: 0, detail: format!("latent standard deviation is {std}") });
    }
    Ok(std)
}

/// Options for [`run_stage`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Directory for `metrics.tsv` and the `checkpoint/` subdirectory.
    pub out_dir: Option<&'a Path>,
    /// Stop after this many steps in this call, even if the stage is unfinished.
    pub max_steps: Option<u64>,
}

/// Runs the configured stage until `tc.steps` optimizer steps have been taken.
/// Returns the losses of the steps run by this call.
pub fn run_stage(state: &mut ModelState, corpus: &Corpus, tc: &TrainConfig, opts: &RunOptions) -> Result<Vec<f64>> {
    state.advance(tc.stage)?;
    if corpus.frame_size() != state.config.image_size {
        return Err(Error::Dataset(format!(
            "corpus frames are {}px, config expects {}px",
            corpus.frame_size(),
            state.config.image_size
        )));
    }
    let sched = NoiseSchedule::new(
        state.config.timesteps,
        state.config.beta_start,
        state.config.beta_end,
        state.config.schedule,
    )?;
    let trainer = StageTrainer::new(state)?;
    let mut metrics = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.tsv");
            let fresh = !path.exists();
            let mut f =
                std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step\tstage\tloss").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut losses = Vec::new();
    let limit = opts.max_steps.unwrap_or(u64::MAX);
    while state.step < tc.steps && (losses.len() as u64) < limit {
        let batches = (0..tc.accum).map(|i| draw_batch(corpus, tc, state.step, i)).collect::<Result<Vec<_>>>()?;
        let loss = trainer.step(state, &batches, &sched, tc)?;
        losses.push(loss);
        if let Some((f, path)) = metrics.as_mut() {
            writeln!(f, "{}\t{}\t{loss:.6}", state.step, tc.stage.name()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = opts.out_dir {
            if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
                crate::checkpoint::save_checkpoint(state, &dir.join("checkpoint"))?;
            }
        }
    }
    if tc.stage == Stage::Codec && state.step >= tc.steps {
        state.normalization = calibrate_latent_scale(trainer.model(), corpus)?;
    }
    if let Some(dir) = opts.out_dir {
        crate::checkpoint::save_checkpoint(state, &dir.join("checkpoint"))?;
    }
    Ok(losses)
}
