//! Synthetic caption-video corpus of moving shapes, and the random-stride clip sampler.
//!
//! On-disk layout under the corpus root:
//!
//! ```text
//! manifest.json            array of clip records
//! <clip_id>/caption.txt    one UTF-8 line
//! <clip_id>/frame_0000.png 8-bit RGB, one file per frame
//! ```

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::fnv1a;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [230, 40, 40]),
    ("green", [40, 210, 60]),
    ("blue", [50, 90, 240]),
    ("yellow", [240, 220, 40]),
    ("cyan", [40, 220, 230]),
    ("magenta", [220, 50, 220]),
];
const BACKGROUNDS: [[u8; 3]; 6] =
    [[16, 16, 16], [70, 70, 70], [20, 24, 72], [72, 40, 16], [16, 64, 40], [120, 120, 136]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Bounce,
    Grow,
    Shrink,
}

impl Motion {
    pub const ALL: [Motion; 7] =
        [Motion::Left, Motion::Right, Motion::Up, Motion::Down, Motion::Bounce, Motion::Grow, Motion::Shrink];

    /// Direction word used in captions.
    pub fn word(self) -> &'static str {
        match self {
            Motion::Left => "left",
            Motion::Right => "right",
            Motion::Up => "up",
            Motion::Down => "down",
            Motion::Bounce => "around",
            Motion::Grow => "closer",
            Motion::Shrink => "away",
        }
    }
}

/// One clip of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Directory of frame PNGs, relative to the corpus root.
    pub frame_dir: PathBuf,
    pub caption: String,
    pub native_length: usize,
    pub fps_tag: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusSpec {
    pub n_clips: usize,
    pub seed: u64,
    pub size: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy)]
struct ShapeParams {
    shape: usize,
    color: usize,
    background: usize,
    motion: Motion,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
    r0: f64,
    r1: f64,
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(format!("clip_{index}").as_bytes()))
}

fn jitter(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(0.0..max)
    } else {
        0.0
    }
}

fn draw_params(rng: &mut ChaCha8Rng, size: usize, frames: usize) -> ShapeParams {
    let s = size as f64;
    let shape = rng.gen_range(0..SHAPES.len());
    let color = rng.gen_range(0..COLORS.len());
    let background = rng.gen_range(0..BACKGROUNDS.len());
    let motion = Motion::ALL[rng.gen_range(0..Motion::ALL.len())];
    let r = s * rng.gen_range(0.11..0.17);
    // Drifts cover roughly half the frame over the clip.
    let travel = s * rng.gen_range(0.35..0.5);
    let speed = travel / frames as f64;
    let lo = r + 1.0;
    let hi = s - r - 1.0;
    let mid = lo + jitter(rng, hi - lo);
    let (mut x0, mut y0, mut vx, mut vy) = (mid, lo + jitter(rng, hi - lo), 0.0, 0.0);
    let (mut r0, mut r1) = (r, r);
    match motion {
        Motion::Left => {
            x0 = hi - jitter(rng, hi - lo - travel);
            vx = -speed;
        }
        Motion::Right => {
            x0 = lo + jitter(rng, hi - lo - travel);
            vx = speed;
        }
        Motion::Up => {
            (x0, y0) = (y0, hi - jitter(rng, hi - lo - travel));
            vy = -speed;
        }
        Motion::Down => {
            (x0, y0) = (y0, lo + jitter(rng, hi - lo - travel));
            vy = speed;
        }
        Motion::Bounce => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let v = 3.0 * speed;
            (vx, vy) = (v * angle.cos(), v * angle.sin());
        }
        Motion::Grow | Motion::Shrink => {
            let (small, big) = (s * 0.07, s * 0.24);
            (r0, r1) = if motion == Motion::Grow { (small, big) } else { (big, small) };
            x0 = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
            y0 = s / 2.0 + rng.gen_range(-0.1..0.1) * s;
        }
    }
    ShapeParams { shape, color, background, motion, x0, y0, vx, vy, r0, r1 }
}

/// Position and radius at `frame`; bounces reflect off the frame borders.
fn state_at(p: &ShapeParams, frame: usize, frames: usize, size: usize) -> (f64, f64, f64) {
    let f = frame as f64;
    let frac = if frames > 1 { f / (frames - 1) as f64 } else { 0.0 };
    let r = p.r0 + (p.r1 - p.r0) * frac;
    if p.motion != Motion::Bounce {
        return (p.x0 + p.vx * f, p.y0 + p.vy * f, r);
    }
    let reflect = |start: f64, v: f64| {
        let (lo, hi) = (r, size as f64 - r);
        let span = hi - lo;
        let u = (start - lo + v * f).rem_euclid(2.0 * span);
        lo + if u > span { 2.0 * span - u } else { u }
    };
    (reflect(p.x0, p.vx), reflect(p.y0, p.vy), r)
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        _ => {
            // Upward-pointing isosceles triangle inscribed in the radius.
            let top = -r;
            let bottom = r * 0.75;
            if dy < top || dy > bottom {
                return false;
            }
            let half_width = r * (dy - top) / (bottom - top);
            dx.abs() <= half_width
        }
    }
}

const SUPERSAMPLE: usize = 4;

/// Anti-aliased RGB frame, row-major `size × size × 3`.
fn render_frame(p: &ShapeParams, cx: f64, cy: f64, r: f64, size: usize) -> Vec<u8> {
    let fg = COLORS[p.color].1;
    let bg = BACKGROUNDS[p.background];
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if inside(p.shape, px - cx, py - cy, r) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for ch in 0..3 {
                let v = bg[ch] as f64 * (1.0 - cov) + fg[ch] as f64 * cov;
                out.push(v.round() as u8);
            }
        }
    }
    out
}

pub fn caption_for(shape: &str, color: &str, motion: Motion) -> String {
    format!("a {color} {shape} moving {}", motion.word())
}

/// Renders `n_clips` clips under `out_dir` and writes `manifest.json`. Deterministic given `seed`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ClipRecord>> {
    if spec.n_clips == 0 || spec.frames == 0 || spec.size == 0 {
        return Err(Error::InvalidArgument("corpus needs n_clips, frames and size >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(spec.n_clips);
    for index in 0..spec.n_clips {
        let mut rng = clip_rng(spec.seed, index);
        let p = draw_params(&mut rng, spec.size, spec.frames);
        let clip_id = format!("clip_{index:04}");
        let dir = out_dir.join(&clip_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in 0..spec.frames {
            let (cx, cy, r) = state_at(&p, f, spec.frames, spec.size);
            let rgb = render_frame(&p, cx, cy, r, spec.size);
            let path = dir.join(frame_name(f));
            image::save_buffer(&path, &rgb, spec.size as u32, spec.size as u32, image::ColorType::Rgb8)?;
        }
        let caption = caption_for(SHAPES[p.shape], COLORS[p.color].0, p.motion);
        let cap_path = dir.join("caption.txt");
        std::fs::write(&cap_path, format!("{caption}\n")).map_err(|e| Error::io(&cap_path, e))?;
        records.push(ClipRecord {
            clip_id: clip_id.clone(),
            frame_dir: PathBuf::from(clip_id),
            caption,
            native_length: spec.frames,
            fps_tag: 8,
        });
    }
    let manifest = out_dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&records)?).map_err(|e| Error::io(&manifest, e))?;
    Ok(records)
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Parses and validates manifest JSON.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ClipRecord>> {
    let records: Vec<ClipRecord> = serde_json::from_slice(bytes)?;
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if r.caption.trim().is_empty() {
            return Err(Error::Dataset(format!("clip {} has an empty caption", r.clip_id)));
        }
        if r.native_length == 0 {
            return Err(Error::Dataset(format!("clip {} has no frames", r.clip_id)));
        }
        if r.frame_dir.is_absolute() || r.frame_dir.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Dataset(format!("clip {} frame_dir escapes the corpus root", r.clip_id)));
        }
        if !seen.insert(r.clip_id.clone()) {
            return Err(Error::Dataset(format!("clip {} listed twice", r.clip_id)));
        }
    }
    Ok(records)
}

/// Decodes PNG bytes into a `3 × H × W` tensor in `[-1, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    Ok(rgb_to_tensor(img.as_raw(), img.width() as usize, img.height() as usize)?)
}

pub fn rgb_to_tensor(rgb: &[u8], width: usize, height: usize) -> Result<Tensor> {
    let mut data = vec![0f32; 3 * width * height];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * width * height + i] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, height, width), &Device::Cpu)?)
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Writes a `3 × H × W` tensor in `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_png(frame: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("frame must have 3 channels, got {c}")));
    }
    let data = frame.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            let v = ((data[ch * h * w + i].clamp(-1.0, 1.0) + 1.0) * 127.5).round();
            rgb.push(v as u8);
        }
    }
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

/// A corpus loaded into memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<ClipRecord>,
    /// Per clip, `native_length × 3 × H × W`.
    pub frames: Vec<Tensor>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = root.join("manifest.json");
        let bytes = std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let records = parse_manifest(&bytes)?;
        if records.is_empty() {
            return Err(Error::Dataset("corpus manifest lists no clips".into()));
        }
        let frames = records
            .iter()
            .map(|r| {
                let dir = root.join(&r.frame_dir);
                let list =
                    (0..r.native_length).map(|i| read_png(&dir.join(frame_name(i)))).collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&list, 0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, frames })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Frame side length of the first clip.
    pub fn frame_size(&self) -> usize {
        self.frames[0].dims()[3]
    }

    /// Gathers `frames[start + i·stride]` of one clip as an `L × 3 × H × W` tensor.
    pub fn clip_frames(&self, clip: usize, sample: &StrideSample) -> Result<Tensor> {
        let idx: Vec<u32> = sample.indices().iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
        Ok(self.frames[clip].index_select(&idx, 0)?)
    }
}

/// Frame selection for one training clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrideSample {
    pub stride: usize,
    pub start: usize,
    pub len: usize,
}

impl StrideSample {
    pub fn indices(&self) -> Vec<usize> {
        (0..self.len).map(|i| self.start + i * self.stride).collect()
    }
}

/// Strides in `1..=max_stride` for which `len` frames fit in `native_length`.
pub fn feasible_strides(native_length: usize, len: usize, max_stride: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    (1..=max_stride).filter(|s| (len - 1) * s < native_length).collect()
}

/// Draws a stride uniformly from the feasible strides, then a start uniformly from the
/// feasible starts.
pub fn sample_clip(native_length: usize, len: usize, max_stride: usize, rng: &mut impl Rng) -> Result<StrideSample> {
    let strides = feasible_strides(native_length, len, max_stride);
    if strides.is_empty() {
        return Err(Error::Dataset(format!("clip of {native_length} frames is shorter than {len} frames at stride 1")));
    }
    let stride = strides[rng.gen_range(0..strides.len())];
    let last_start = native_length - 1 - (len - 1) * stride;
    let start = rng.gen_range(0..=last_start);
    Ok(StrideSample { stride, start, len })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_stride_for_exact_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sample_clip(16, 16, 6, &mut rng).unwrap();
            assert_eq!((s.stride, s.start), (1, 0));
        }
    }

    #[test]
    fn short_clip_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_clip(15, 16, 6, &mut rng).is_err());
    }

    #[test]
    fn indices_are_arithmetic() {
        let s = StrideSample { stride: 3, start: 5, len: 4 };
        assert_eq!(s.indices(), vec![5, 8, 11, 14]);
    }

    #[test]
    fn feasibility_bounds() {
        assert_eq!(feasible_strides(96, 16, 6), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(feasible_strides(40, 16, 6), vec![1, 2]);
        assert_eq!(feasible_strides(31, 16, 6), vec![1, 2]);
        assert_eq!(feasible_strides(30, 16, 6), vec![1]);
    }

    #[test]
    fn manifest_validation() {
        assert!(parse_manifest(b"[]").unwrap().is_empty());
        let bad = br#"[{"clip_id":"a","frame_dir":"../x","caption":"c","native_length":3,"fps_tag":8}]"#;
        assert!(parse_manifest(bad).is_err());
        let empty = br#"[{"clip_id":"a","frame_dir":"a","caption":" ","native_length":3,"fps_tag":8}]"#;
        assert!(parse_manifest(empty).is_err());
        assert!(parse_manifest(b"{").is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let t = rgb_to_tensor(&rgb, 4, 4).unwrap();
        let p = dir.path().join("f.png");
        write_png(&t, &p).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
