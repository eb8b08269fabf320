//! Image and mask containers, file loading, mask-ratio bucketing and the
//! procedural dataset used for desk-scale runs.
//!
//! Images are stored channel-major (`C×H×W`) with values in `[-1, 1]`; masks are
//! binary `H×W` rasters where `1` marks a missing pixel.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::error::{Result, SpnError};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(SpnError::Shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SpnError::Invalid("image tensor contains non-finite values".into()));
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageTensor { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `(C, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Values mapped from `[-1, 1]` to `[0, 1]`.
    pub fn to_unit_range(&self) -> Vec<f64> {
        self.data.iter().map(|&v| (f64::from(v) + 1.0) * 0.5).collect()
    }

    pub fn l1_distance(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data).view([
            self.channels as i64,
            self.height as i64,
            self.width as i64,
        ])
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.dim() {
            4 if t.size()[0] == 1 => t.squeeze_dim(0),
            3 => t.shallow_clone(),
            _ => return Err(SpnError::Shape(format!("expected a CxHxW tensor, got {:?}", t.size()))),
        };
        let size = t.size();
        let flat = t.detach().to_kind(Kind::Float).contiguous().view([-1]);
        let data = Vec::<f32>::try_from(&flat)?;
        ImageTensor::new(size[0] as usize, size[1] as usize, size[2] as usize, data)
    }

    fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(SpnError::Shape(format!("cannot encode {} channels as RGB", self.channels)));
        }
        let plane = self.height * self.width;
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in img.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = to_u8(self.data[c * plane + i]);
            }
        }
        Ok(img)
    }

    fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = f32::from(px.0[c]) / 127.5 - 1.0;
            }
        }
        ImageTensor { channels: 3, height: h, width: w, data }
    }
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Stacks same-shaped images into a `[B, C, H, W]` batch.
pub fn stack_images(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| SpnError::Invalid("empty image batch".into()))?;
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(SpnError::Shape("images in a batch must share one shape".into()));
    }
    Ok(Tensor::stack(&images.iter().map(|i| i.to_tensor()).collect::<Vec<_>>(), 0))
}

pub fn stack_masks(masks: &[&MaskTensor]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| SpnError::Invalid("empty mask batch".into()))?;
    if masks.iter().any(|m| m.shape() != first.shape()) {
        return Err(SpnError::Shape("masks in a batch must share one shape".into()));
    }
    Ok(Tensor::stack(&masks.iter().map(|m| m.to_tensor()).collect::<Vec<_>>(), 0))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTensor {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(SpnError::Shape(format!("{} values cannot fill a {height}x{width} mask", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(SpnError::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(MaskTensor { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskTensor { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        MaskTensor { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        MaskTensor { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count_missing(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// `[1, H, W]` float tensor.
    pub fn to_tensor(&self) -> Tensor {
        let vals: Vec<f32> = self.data.iter().map(|&v| f32::from(v)).collect();
        Tensor::from_slice(&vals).view([1, self.height as i64, self.width as i64])
    }

    fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.at(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    fn from_gray(img: &GrayImage) -> Self {
        let data = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
        MaskTensor { height: img.height() as usize, width: img.width() as usize, data }
    }

    fn flipped(&self, horizontal: bool, vertical: bool) -> Self {
        MaskTensor::from_fn(self.height, self.width, |y, x| {
            let sy = if vertical { self.height - 1 - y } else { y };
            let sx = if horizontal { self.width - 1 - x } else { x };
            self.at(sy, sx)
        })
    }

    fn resized_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.shape() {
            return self.clone();
        }
        MaskTensor::from_fn(height, width, |y, x| {
            let sy = ((2 * y + 1) * self.height) / (2 * height);
            let sx = ((2 * x + 1) * self.width) / (2 * width);
            self.at(sy, sx)
        })
    }
}

/// A fixed image/mask pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub image: ImageTensor,
    pub mask: MaskTensor,
}

impl SamplePair {
    pub fn new(id: impl Into<String>, image: ImageTensor, mask: MaskTensor) -> Result<Self> {
        if (image.height, image.width) != mask.shape() {
            return Err(SpnError::Shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.height, image.width, mask.height, mask.width
            )));
        }
        Ok(SamplePair { id: id.into(), image, mask })
    }

    /// The damaged input: missing pixels zeroed (mid-gray in `[-1, 1]`).
    pub fn masked_image(&self) -> ImageTensor {
        let plane = self.mask.data.len();
        let data = self
            .image
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.mask.data[i % plane] == 1 { 0.0 } else { v })
            .collect();
        ImageTensor { data, ..self.image.clone() }
    }
}

pub fn check_divisible(size: usize, levels: usize) -> Result<()> {
    let factor = 1usize << levels.saturating_sub(1);
    if size == 0 || size % factor != 0 {
        return Err(SpnError::Config(format!(
            "size {size} must be a positive multiple of {factor} for {levels} pyramid levels"
        )));
    }
    Ok(())
}

fn decode_error(path: &Path, e: impl std::fmt::Display) -> SpnError {
    SpnError::Decode { path: path.to_path_buf(), reason: e.to_string() }
}

/// Loads an RGB image as a `3×size×size` tensor in `[-1, 1]`.
///
/// With `center_crop` the central square of side `min(w, h)` is cut out first.
/// Resampling is bilinear.
pub fn load_image(path: &Path, size: usize, center_crop: bool, levels: usize) -> Result<ImageTensor> {
    check_divisible(size, levels)?;
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_rgb8();
    Ok(prepare_rgb(img, size, center_crop))
}

fn prepare_rgb(mut img: RgbImage, size: usize, center_crop: bool) -> ImageTensor {
    if center_crop {
        let side = img.width().min(img.height());
        let x0 = (img.width() - side) / 2;
        let y0 = (img.height() - side) / 2;
        img = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
    }
    if img.width() as usize != size || img.height() as usize != size {
        img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    }
    ImageTensor::from_rgb(&img)
}

/// Loads an 8-bit grayscale mask; pixels `>= 128` are missing.
///
/// Nearest-neighbour resizing keeps the result binary. `flip_augment` applies a
/// horizontal and a vertical flip, each with probability 0.5.
pub fn load_mask<R: Rng + ?Sized>(
    path: &Path,
    size: usize,
    flip_augment: bool,
    rng: &mut R,
) -> Result<MaskTensor> {
    let img = image::open(path).map_err(|e| decode_error(path, e))?.to_luma8();
    let mask = MaskTensor::from_gray(&img).resized_nearest(size, size);
    Ok(if flip_augment {
        let h = rng.random_bool(0.5);
        let v = rng.random_bool(0.5);
        mask.flipped(h, v)
    } else {
        mask
    })
}

pub fn save_image(path: &Path, image: &ImageTensor) -> Result<()> {
    image.to_rgb()?.save(path).map_err(|e| decode_error(path, e))
}

pub fn save_mask(path: &Path, mask: &MaskTensor) -> Result<()> {
    mask.to_gray().save(path).map_err(|e| decode_error(path, e))
}

pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image
        .to_rgb()?
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| SpnError::Invalid(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn encode_mask_png(mask: &MaskTensor) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    mask.to_gray()
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| SpnError::Invalid(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

/// Decodes PNG bytes at native resolution.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| SpnError::Decode { path: "<memory>".into(), reason: e.to_string() })?;
    Ok(ImageTensor::from_rgb(&img.to_rgb8()))
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<MaskTensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| SpnError::Decode { path: "<memory>".into(), reason: e.to_string() })?;
    Ok(MaskTensor::from_gray(&img.to_luma8()))
}

pub fn mask_ratio(mask: &MaskTensor) -> f64 {
    mask.count_missing() as f64 / (mask.height * mask.width) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskBucket {
    pub lower: f64,
    pub upper: f64,
    pub label: &'static str,
}

impl MaskBucket {
    /// Half-open `(lower, upper]`.
    pub fn contains(&self, ratio: f64) -> bool {
        ratio > self.lower && ratio <= self.upper
    }
}

pub const BUCKETS: [MaskBucket; 6] = [
    MaskBucket { lower: 0.0, upper: 0.1, label: "0%-10%" },
    MaskBucket { lower: 0.1, upper: 0.2, label: "10%-20%" },
    MaskBucket { lower: 0.2, upper: 0.3, label: "20%-30%" },
    MaskBucket { lower: 0.3, upper: 0.4, label: "30%-40%" },
    MaskBucket { lower: 0.4, upper: 0.5, label: "40%-50%" },
    MaskBucket { lower: 0.5, upper: 0.6, label: "50%-60%" },
];

pub fn bucket_of_ratio(ratio: f64) -> Result<MaskBucket> {
    BUCKETS
        .iter()
        .copied()
        .find(|b| b.contains(ratio))
        .ok_or(SpnError::OutOfProtocol(ratio))
}

pub fn bucket_of(mask: &MaskTensor) -> Result<MaskBucket> {
    bucket_of_ratio(mask_ratio(mask))
}

/// `output ⊙ M + input ⊙ (1 − M)`, mask broadcast over channels.
pub fn composite(output: &ImageTensor, input: &ImageTensor, mask: &MaskTensor) -> Result<ImageTensor> {
    if output.shape() != input.shape() || (input.height, input.width) != mask.shape() {
        return Err(SpnError::Shape(format!(
            "composite of {:?} over {:?} with a {:?} mask",
            output.shape(),
            input.shape(),
            mask.shape()
        )));
    }
    let plane = mask.data.len();
    let data = output
        .data
        .iter()
        .zip(&input.data)
        .enumerate()
        .map(|(i, (&o, &x))| if mask.data[i % plane] == 1 { o } else { x })
        .collect();
    Ok(ImageTensor { data, ..input.clone() })
}

/// Nearest-neighbour downsampling by `2^(level-1)`, sampling the top-left pixel
/// of each cell (the same index map as strided slicing `mask[::f, ::f]`).
pub fn resize_mask(mask: &MaskTensor, level: usize) -> Result<MaskTensor> {
    if level == 0 {
        return Err(SpnError::Invalid("pyramid levels are numbered from 1".into()));
    }
    let factor = 1usize << (level - 1);
    let (h, w) = (mask.height.div_ceil(factor), mask.width.div_ceil(factor));
    Ok(MaskTensor::from_fn(h, w, |y, x| mask.at(y * factor, x * factor)))
}

// ---------------------------------------------------------------------------
// Procedural dataset

fn pair_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
}

fn synthetic_image(seed: u64, size: usize) -> ImageTensor {
    let mut rng = pair_rng(seed, 1);
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let put = |data: &mut [f32], y: usize, x: usize, color: [f32; 3]| {
        for c in 0..3 {
            data[c * plane + y * size + x] = color[c];
        }
    };

    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let s = size as f32;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy;
            let t = (u / std::f32::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let color = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
            put(&mut data, y, x, color);
        }
    }

    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let color = random_color(&mut rng);
        let cx = rng.random_range(0.1..0.9) * s;
        let cy = rng.random_range(0.1..0.9) * s;
        let rx = rng.random_range(0.08..0.3) * s;
        let ry = rng.random_range(0.08..0.3) * s;
        let kind = rng.random_range(0..3);
        let period = rng.random_range(0.05..0.15) * s;
        let horizontal = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match kind {
                    0 => fx.abs() <= rx && fy.abs() <= ry,
                    1 => (fx / rx).powi(2) + (fy / ry).powi(2) <= 1.0,
                    _ => {
                        let along = if horizontal { fy } else { fx };
                        fx.abs() <= rx && fy.abs() <= ry && (along / period).rem_euclid(2.0) < 1.0
                    }
                };
                if inside {
                    put(&mut data, y, x, color);
                }
            }
        }
    }
    ImageTensor { channels: 3, height: size, width: size, data }
}

fn stamp_disk(mask: &mut [u8], size: usize, cx: f32, cy: f32, r: f32) {
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as isize).clamp(0, size as isize - 1) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as isize).clamp(0, size as isize - 1) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                mask[y * size + x] = 1;
            }
        }
    }
}

fn draw_stroke<R: Rng>(rng: &mut R, mask: &mut [u8], size: usize, width_scale: f32) {
    let s = size as f32;
    let radius = rng.random_range(0.02..0.08) * s * width_scale;
    let (mut x, mut y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    let mut heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let vertices = rng.random_range(3..9);
    for _ in 0..vertices {
        heading += rng.random_range(-1.2..1.2);
        let len = rng.random_range(0.1..0.35) * s;
        let (nx, ny) = (
            (x + heading.cos() * len).clamp(0.0, s - 1.0),
            (y + heading.sin() * len).clamp(0.0, s - 1.0),
        );
        let steps = ((len / radius.max(0.5)) * 2.0).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f32 / steps as f32;
            stamp_disk(mask, size, x + (nx - x) * t, y + (ny - y) * t, radius);
        }
        x = nx;
        y = ny;
    }
}

fn synthetic_mask(seed: u64, size: usize) -> MaskTensor {
    let mut rng = pair_rng(seed, 2);
    let mut width_scale = 1.0f32;
    for _attempt in 0..32 {
        let mut data = vec![0u8; size * size];
        let strokes = rng.random_range(1..=4);
        for _ in 0..strokes {
            draw_stroke(&mut rng, &mut data, size, width_scale);
        }
        let mut mask = MaskTensor { height: size, width: size, data };
        while mask_ratio(&mask) <= 0.05 {
            draw_stroke(&mut rng, &mut mask.data, size, width_scale);
        }
        if mask_ratio(&mask) <= 0.6 {
            return mask;
        }
        width_scale *= 0.8;
    }
    // Unreachable in practice; a fixed central block keeps the ratio in range.
    MaskTensor::from_fn(size, size, |y, x| y >= size / 4 && y < 3 * size / 4 && x < size / 2)
}

/// Deterministic image/mask pair: gradient background with 2–5 solid shapes and
/// a free-form stroke mask whose ratio lies in `(0.05, 0.6]`.
pub fn make_synthetic_pair(seed: u64, size: usize) -> Result<SamplePair> {
    if size < 8 {
        return Err(SpnError::Config(format!("synthetic images need size >= 8, got {size}")));
    }
    SamplePair::new(format!("synthetic-{seed}"), synthetic_image(seed, size), synthetic_mask(seed, size))
}

/// First seed of the synthetic training set; evaluation starts at 0 so the
/// two never overlap for realistic sizes.
pub const SYNTHETIC_TRAIN_BASE: u64 = 1_000_000;
pub const SYNTHETIC_EVAL_BASE: u64 = 0;

/// Where training and evaluation pairs come from.
#[derive(Debug, Clone)]
pub enum Dataset {
    Synthetic { first_seed: u64, len: usize, size: usize },
    Files { images: Vec<PathBuf>, masks: Vec<PathBuf>, size: usize, center_crop: bool, flip_masks: bool },
}

impl Dataset {
    /// Reads a newline-delimited image manifest and scans `mask_dir` recursively
    /// for PNG masks.
    pub fn from_files(
        manifest: &Path,
        mask_dir: &Path,
        size: usize,
        center_crop: bool,
        flip_masks: bool,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| SpnError::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let images: Vec<PathBuf> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let p = PathBuf::from(l);
                if p.is_absolute() { p } else { base.join(p) }
            })
            .collect();
        let mut masks: Vec<PathBuf> = walkdir::WalkDir::new(mask_dir)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| {
                e.file_type().is_file()
                    && e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png"))
            })
            .map(|e| e.into_path())
            .collect();
        masks.sort();
        if images.is_empty() {
            return Err(SpnError::Config(format!("manifest {} lists no images", manifest.display())));
        }
        if masks.is_empty() {
            return Err(SpnError::Config(format!("no PNG masks under {}", mask_dir.display())));
        }
        Ok(Dataset::Files { images, masks, size, center_crop, flip_masks })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic { len, .. } => *len,
            Dataset::Files { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        match self {
            Dataset::Synthetic { size, .. } | Dataset::Files { size, .. } => *size,
        }
    }

    /// Training sample `index`; file datasets draw a random (optionally flipped) mask.
    pub fn training_pair<R: Rng>(&self, index: usize, levels: usize, rng: &mut R) -> Result<SamplePair> {
        match self {
            Dataset::Synthetic { first_seed, size, .. } => make_synthetic_pair(first_seed + index as u64, *size),
            Dataset::Files { images, masks, size, center_crop, flip_masks } => {
                let image = load_image(&images[index], *size, *center_crop, levels)?;
                let mask_path = &masks[rng.random_range(0..masks.len())];
                let mask = load_mask(mask_path, *size, *flip_masks, rng)?;
                SamplePair::new(images[index].display().to_string(), image, mask)
            }
        }
    }

    /// Fixed evaluation pairs. File datasets assign masks to images by a seeded
    /// draw so repeated evaluations see identical pairs.
    pub fn evaluation_pairs(&self, seed: u64, levels: usize) -> Result<Vec<SamplePair>> {
        match self {
            Dataset::Synthetic { first_seed, len, size } => {
                (0..*len as u64).map(|i| make_synthetic_pair(first_seed + i, *size)).collect()
            }
            Dataset::Files { images, masks, size, center_crop, .. } => {
                let mut rng = pair_rng(seed, 3);
                images
                    .iter()
                    .map(|path| {
                        let image = load_image(path, *size, *center_crop, levels)?;
                        let mask = load_mask(&masks[rng.random_range(0..masks.len())], *size, false, &mut rng)?;
                        SamplePair::new(path.display().to_string(), image, mask)
                    })
                    .collect()
            }
        }
    }
}
