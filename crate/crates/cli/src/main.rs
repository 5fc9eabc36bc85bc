use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vidanim::candle_core::DType;
use vidanim::checkpoint::load_checkpoint;
use vidanim::dataset::{generate_corpus, Corpus, CorpusSpec};
use vidanim::eval::{evaluate, SampleManifest, MANIFEST_FILE};
use vidanim::nn::ParamStore;
use vidanim::pipeline::{ablate, sample_to_dir};
use vidanim::sampler::SamplerConfig;
use vidanim::trainer::{run_stage, ModelState, RunOptions, Stage, TrainConfig};
use vidanim::{ConditioningMode, Config, Error};

#[derive(Parser)]
#[command(name = "vidanim", version, about = "Animate still images with a toy latent video diffusion model")]
struct Cli {
    /// Configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    #[value(name = "image_adapter")]
    ImageAdapter,
    #[value(name = "video_finetune")]
    VideoFinetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "full_tokens")]
    FullTokens,
    #[value(name = "cls_only")]
    ClsOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus of moving shapes.
    MakeData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the frame autoencoder; creates `<run>/checkpoint` and `<run>/metrics.tsv`.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Continue a run with one of the diffusion stages.
    Train {
        #[arg(long, value_enum)]
        stage: TrainStage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Animate one image.
    Sample {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sample directories and write a JSON report.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Checkpoint whose image encoder computes the cosine metric; defaults to the one
        /// recorded in the sample manifest.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a fresh model in one conditioning mode and score held-out first frames.
    Ablate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        seeds: u64,
    },
}

fn config(path: &Option<PathBuf>) -> vidanim::Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn write_file(bytes: &[u8], path: &Path) -> vidanim::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> vidanim::Result<()> {
    match cli.command {
        Command::MakeData { out, clips, seed } => {
            let cfg = config(&cli.config)?;
            let spec = CorpusSpec { n_clips: clips, seed, size: cfg.image_size, frames: cfg.native_frames };
            let records = generate_corpus(&spec, &out)?;
            println!("wrote {} clips to {}", records.len(), out.display());
        }
        Command::TrainCodec { data, run } => {
            let corpus = Corpus::load(&data)?;
            let mut state = ModelState::new(config(&cli.config)?)?;
            let tc = TrainConfig::for_stage(&state.config, Stage::Codec);
            let losses = run_stage(&mut state, &corpus, &tc, &RunOptions { out_dir: Some(&run), max_steps: None })?;
            println!(
                "codec: {} steps, final loss {:.6}, latent scale {:.6}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                state.normalization
            );
        }
        Command::Train { stage, data, run } => {
            let stage = match stage {
                TrainStage::ImageAdapter => Stage::ImageAdapter,
                TrainStage::VideoFinetune => Stage::VideoFinetune,
            };
            let corpus = Corpus::load(&data)?;
            let mut state = load_checkpoint(&run.join("checkpoint"))?;
            if let Some(p) = &cli.config {
                let cfg = Config::load(p)?;
                if cfg != state.config {
                    return Err(Error::InvalidArgument(format!(
                        "{} differs from the configuration stored in the checkpoint",
                        p.display()
                    )));
                }
            }
            if state.stage == Stage::Codec && state.step < state.config.steps_codec {
                return Err(Error::InvalidArgument("the codec stage of this run has not finished".into()));
            }
            let tc = TrainConfig::for_stage(&state.config, stage);
            let losses = run_stage(&mut state, &corpus, &tc, &RunOptions { out_dir: Some(&run), max_steps: None })?;
            println!(
                "{}: {} steps, final loss {:.6}",
                stage.name(),
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample { image, prompt, checkpoint, seed, steps, eta, guidance, out } => {
            if !image.exists() {
                return Err(Error::MissingFile(image));
            }
            let state = load_checkpoint(&checkpoint)?;
            let cfg = &state.config;
            let sampler = SamplerConfig {
                steps: steps.unwrap_or(cfg.sample_steps),
                eta: eta.unwrap_or(cfg.eta),
                guidance: guidance.unwrap_or(cfg.guidance),
                seed,
                drop_image: false,
            };
            let m = sample_to_dir(&state, &checkpoint.display().to_string(), &image, &prompt, &sampler, &out)?;
            println!("wrote {} frames to {}", m.frames, out.display());
        }
        Command::Eval { samples, report, checkpoint } => {
            let checkpoint = match checkpoint {
                Some(c) => Some(c),
                None => first_manifest(&samples)?
                    .map(|m| PathBuf::from(m.checkpoint))
                    .filter(|p| p.join("manifest.json").exists()),
            };
            let (cfg, store) = match checkpoint {
                Some(c) => {
                    let s = load_checkpoint(&c)?;
                    (s.config.clone(), s.params)
                }
                None => {
                    let cfg = config(&cli.config)?;
                    let store = ParamStore::new(DType::F32, cfg.seed);
                    (cfg, store)
                }
            };
            let encoder = vidanim::conditioning::ImageEncoder::new(&store.root(), &cfg)?;
            let r = evaluate(&samples, &encoder)?;
            write_file(&serde_json::to_vec_pretty(&r)?, &report)?;
            println!(
                "{} samples: first-frame PSNR {:.2} dB, adjacent MAD {:.4}",
                r.rows.len(),
                r.aggregate.first_frame_psnr.mean,
                r.aggregate.mean_adjacent_frame_mad.mean
            );
        }
        Command::Ablate { mode, data, heldout, out, seeds } => {
            let mode = match mode {
                Mode::FullTokens => ConditioningMode::FullTokens,
                Mode::ClsOnly => ConditioningMode::ClsOnly,
            };
            let cfg = config(&cli.config)?;
            let train = Corpus::load(&data)?;
            let held = Corpus::load(&heldout)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let r = ablate(&cfg, mode, &train, &held, &seeds, Some(&out))?;
            write_file(&serde_json::to_vec_pretty(&r)?, &out.join(format!("ablation_{mode}.json")))?;
            println!("{mode}: mean held-out first-frame PSNR {:.2} dB", r.mean_first_frame_psnr);
        }
    }
    Ok(())
}

fn first_manifest(dir: &Path) -> vidanim::Result<Option<SampleManifest>> {
    if dir.join(MANIFEST_FILE).exists() {
        return SampleManifest::load(dir).map(Some);
    }
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut dirs: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(MANIFEST_FILE).exists()).collect();
    dirs.sort();
    dirs.first().map(|d| SampleManifest::load(d)).transpose()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            match e {
                Error::MissingFile(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
