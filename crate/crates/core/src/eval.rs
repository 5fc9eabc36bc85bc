//! Sample directories and the metrics computed on them.
//!
//! A sample directory holds `frame_0000.png`, `frame_0001.png`, ... and a
//! `sample_manifest.json` describing how it was produced. The metrics are stand-ins for
//! perceptual quality: pixel PSNR of the first frame against the conditioning image, mean
//! absolute difference between adjacent frames, and cosine similarity of each frame's class
//! token (from the toy image encoder) to the conditioning image's.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{cosine, ImageEncoder};
use crate::dataset::{frame_name, read_png};
use crate::error::{Error, Result};

/// PSNR reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;
/// Pixels live in `[-1, 1]`, so the peak-to-peak range is 2.
pub const PSNR_PEAK: f64 = 2.0;
pub const MANIFEST_FILE: &str = "sample_manifest.json";
pub const METRIC_NOTE: &str =
    "toy stand-in metrics: pixel PSNR (peak 2.0, capped at 99 dB), adjacent-frame MAD, toy-encoder cls cosine";

/// PSNR in dB between equally shaped tensors with values in `[-1, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("psnr: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    let mse = d.sqr()?.mean_all()?.to_scalar::<f64>()?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()).min(PSNR_CAP))
}

/// Mean absolute difference between consecutive frames of `L × 3 × H × W`; zero for one frame.
pub fn mean_adjacent_mad(video: &Tensor) -> Result<f64> {
    let l = video.dim(0)?;
    if l < 2 {
        return Ok(0.0);
    }
    let v = video.to_dtype(DType::F64)?;
    let d = (v.narrow(0, 1, l - 1)? - v.narrow(0, 0, l - 1)?)?;
    Ok(d.abs()?.mean_all()?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub image_path: String,
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
    pub checkpoint: String,
    pub mode: String,
    pub config_hash: String,
    pub frames: usize,
}

impl SampleManifest {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: SampleManifest = serde_json::from_slice(bytes)?;
        if m.frames == 0 || m.steps == 0 {
            return Err(Error::InvalidArgument("sample manifest needs frames >= 1 and steps >= 1".into()));
        }
        if !m.eta.is_finite() || !m.guidance.is_finite() {
            return Err(Error::InvalidArgument("sample manifest eta and guidance must be finite".into()));
        }
        if m.image_path.is_empty() {
            return Err(Error::InvalidArgument("sample manifest has no image_path".into()));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Self::parse(&bytes)
    }

    /// The conditioning image, resolved relative to the sample directory if not absolute.
    pub fn image_in(&self, dir: &Path) -> PathBuf {
        let p = Path::new(&self.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            dir.join(p)
        }
    }
}

/// Reads `frame_0000.png`, `frame_0001.png`, ... until the first gap.
pub fn read_frames(dir: &Path) -> Result<Tensor> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_name(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_png(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::MissingFile(dir.join(frame_name(0))));
    }
    Ok(Tensor::stack(&frames, 0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub clip_id: String,
    pub first_frame_psnr: f64,
    pub mean_adjacent_frame_mad: f64,
    pub cls_cosine: Vec<f64>,
}

/// Metrics for one video `L × 3 × H × W` against its conditioning image `3 × H × W`.
pub fn fidelity_metrics(clip_id: &str, video: &Tensor, condition: &Tensor, encoder: &ImageEncoder) -> Result<EvalRow> {
    let first = video.get(0)?;
    let first_frame_psnr = psnr(&first, condition)?;
    let mean_adjacent_frame_mad = mean_adjacent_mad(video)?;
    let dtype = encoder.dtype();
    let frames_cls = encoder.encode(&video.to_dtype(dtype)?)?.cls;
    let cond_cls = encoder.encode(&condition.unsqueeze(0)?.to_dtype(dtype)?)?.cls;
    let cond_cls = cond_cls.broadcast_as(frames_cls.dims())?;
    let cls_cosine = cosine(&frames_cls, &cond_cls)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(EvalRow { clip_id: clip_id.to_string(), first_frame_psnr, mean_adjacent_frame_mad, cls_cosine })
}

/// Metrics for a sample directory; the conditioning image comes from its manifest.
pub fn fidelity_metrics_dir(sample_dir: &Path, encoder: &ImageEncoder) -> Result<EvalRow> {
    let manifest = SampleManifest::load(sample_dir)?;
    let condition = read_png(&manifest.image_in(sample_dir))?;
    let video = read_frames(sample_dir)?;
    let id = sample_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    fidelity_metrics(&id, &video, &condition, encoder)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; zeros for an empty slice.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub first_frame_psnr: MeanStd,
    pub mean_adjacent_frame_mad: MeanStd,
    pub cls_cosine: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub rows: Vec<EvalRow>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let col = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let cos: Vec<f64> = rows.iter().map(|r| MeanStd::of(&r.cls_cosine).mean).collect();
        let aggregate = Aggregate {
            first_frame_psnr: MeanStd::of(&col(&|r| r.first_frame_psnr)),
            mean_adjacent_frame_mad: MeanStd::of(&col(&|r| r.mean_adjacent_frame_mad)),
            cls_cosine: MeanStd::of(&cos),
        };
        Self { note: METRIC_NOTE.to_string(), rows, aggregate }
    }
}

/// Evaluates `dir`, which is either one sample directory or a directory of sample
/// directories (processed in name order).
pub fn evaluate(dir: &Path, encoder: &ImageEncoder) -> Result<EvalReport> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(EvalReport::from_rows(vec![fidelity_metrics_dir(dir, encoder)?]));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::MissingFile(dir.join(MANIFEST_FILE)));
    }
    let rows = subdirs.iter().map(|d| fidelity_metrics_dir(d, encoder)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}
