//! End-to-end helpers shared by the command-line tool and the integration tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::VideoTensor;
use crate::config::{ConditioningMode, Config};
use crate::dataset::{frame_name, read_png, write_png, Corpus};
use crate::error::{Error, Result};
use crate::eval::{psnr, SampleManifest, MANIFEST_FILE};
use crate::model::Model;
use crate::sampler::{generate, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::trainer::{run_stage, ModelState, RunOptions, Stage, TrainConfig};

pub fn schedule_for(cfg: &Config) -> Result<NoiseSchedule> {
    NoiseSchedule::new(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.schedule)
}

pub fn sampler_for(cfg: &Config, seed: u64) -> SamplerConfig {
    SamplerConfig { steps: cfg.sample_steps, eta: cfg.eta, guidance: cfg.guidance, seed, drop_image: false }
}

/// Trains every stage in order, resuming from whatever stage and step `state` is at.
pub fn train_all(state: &mut ModelState, corpus: &Corpus, out_dir: Option<&Path>) -> Result<()> {
    for stage in [Stage::Codec, Stage::ImageAdapter, Stage::VideoFinetune] {
        if stage < state.stage {
            continue;
        }
        let tc = TrainConfig::for_stage(&state.config, stage);
        run_stage(state, corpus, &tc, &RunOptions { out_dir, max_steps: None })?;
    }
    Ok(())
}

/// Writes the frames of `video` and its manifest into `dir`.
pub fn write_sample(video: &VideoTensor, manifest: &SampleManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..video.frames() {
        write_png(&video.tensor().get(i)?, &dir.join(frame_name(i)))?;
    }
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Animates the image at `image_path` and writes the result into `out`.
pub fn sample_to_dir(
    state: &ModelState,
    checkpoint: &str,
    image_path: &Path,
    prompt: &str,
    sampler: &SamplerConfig,
    out: &Path,
) -> Result<SampleManifest> {
    let cfg = &state.config;
    let image = read_png(image_path)?;
    if image.dims() != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Shape(format!(
            "{} is {:?}, the model expects {}x{} RGB",
            image_path.display(),
            image.dims(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let model = state.model()?;
    let video = generate(&image, prompt, &model, &schedule_for(cfg)?, cfg.frames, sampler)?;
    let image_path = std::path::absolute(image_path).map_err(|e| Error::io(image_path, e))?;
    let manifest = SampleManifest {
        image_path: image_path.display().to_string(),
        prompt: prompt.to_string(),
        seed: sampler.seed,
        steps: sampler.steps,
        eta: sampler.eta,
        guidance: sampler.guidance,
        checkpoint: checkpoint.to_string(),
        mode: cfg.cond_mode.to_string(),
        config_hash: cfg.hash(),
        frames: cfg.frames,
    };
    write_sample(&video, &manifest, out)?;
    Ok(manifest)
}

/// First-frame PSNR against the conditioning image, for the first frame of every clip and
/// every seed. Rows are ordered clip-major.
pub fn first_frame_psnrs(
    model: &Model,
    sched: &NoiseSchedule,
    corpus: &Corpus,
    frames: usize,
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (record, clip) in corpus.records.iter().zip(&corpus.frames) {
        let image = clip.get(0)?;
        for &seed in seeds {
            let video =
                generate(&image, &record.caption, model, sched, frames, &SamplerConfig { seed, ..sampler.clone() })?;
            out.push(psnr(&video.tensor().get(0)?, &image)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: String,
    pub train_clips: usize,
    pub heldout_clips: usize,
    pub seeds: Vec<u64>,
    pub first_frame_psnr: Vec<f64>,
    pub mean_first_frame_psnr: f64,
}

/// Trains a fresh model in `mode` on `train` and scores held-out first-frame PSNR.
pub fn ablate(
    cfg: &Config,
    mode: ConditioningMode,
    train: &Corpus,
    heldout: &Corpus,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut cfg = cfg.clone();
    cfg.cond_mode = mode;
    let mut state = ModelState::new(cfg.clone())?;
    train_all(&mut state, train, out_dir)?;
    let model = state.model()?;
    let sampler = sampler_for(&cfg, 0);
    let scores = first_frame_psnrs(&model, &schedule_for(&cfg)?, heldout, cfg.frames, seeds, &sampler)?;
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    Ok(AblationReport {
        mode: mode.to_string(),
        train_clips: train.len(),
        heldout_clips: heldout.len(),
        seeds: seeds.to_vec(),
        first_frame_psnr: scores,
        mean_first_frame_psnr: mean,
    })
}
