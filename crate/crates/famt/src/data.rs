//! Dataset loading (CIFAR-10 binary, the FMTD synthetic dump), synthetic
//! dataset generation, and PGM/PPM image emission for visualization.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::parallel::ordered_map_range;
use crate::rng::{stream, KeyedRng};
use crate::sampler::MaskPlan;

/// One image with pixels in `[0, 1]`, stored channel-major (C×H×W).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub sample_id: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.images.iter().map(|i| i.label + 1).max().unwrap_or(0)
    }

    /// Asserts the `[0, 1]` pixel-range invariant on every image.
    pub fn validate_range(&self) -> Result<()> {
        for img in &self.images {
            if img.pixels.len() != self.channels * self.height * self.width {
                return Err(Error::Format(format!(
                    "sample {} has {} pixels, expected {}",
                    img.sample_id,
                    img.pixels.len(),
                    self.channels * self.height * self.width
                )));
            }
            if img.pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Format(format!(
                    "sample {} has pixels outside [0, 1]",
                    img.sample_id
                )));
            }
        }
        Ok(())
    }
}

// ── CIFAR-10 binary ──────────────────────────────────────────────────────

const CIFAR_RECORD: usize = 1 + 3 * 1024;

/// Loads CIFAR-10 binary records: 1 label byte then 3×1024 plane-major
/// pixel bytes per 32×32 image. Record order becomes `sample_id`.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar10(&bytes)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(count);
    for r in 0..count {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("record {r} has label {label} > 9")));
        }
        let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(LabeledImage { sample_id: r, pixels, label });
    }
    let ds = Dataset { channels: 3, height: 32, width: 32, images };
    ds.validate_range()?;
    Ok(ds)
}

// ── synthetic shapes ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disk,
    Cross,
    Stripes,
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub shapes: Vec<ShapeKind>,
}

impl SyntheticSpec {
    pub fn new(num_samples: usize, num_classes: usize, image_size: usize, noise: f64) -> Self {
        SyntheticSpec {
            num_samples,
            num_classes,
            image_size,
            channels: 3,
            noise,
            shapes: vec![ShapeKind::Square, ShapeKind::Disk, ShapeKind::Cross, ShapeKind::Stripes],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Parameter("synthetic spec needs at least 2 classes".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Parameter(format!("noise level {} outside [0, 1]", self.noise)));
        }
        if self.image_size < 8 || self.channels == 0 || self.shapes.is_empty() {
            return Err(Error::Parameter("degenerate synthetic spec".into()));
        }
        Ok(())
    }
}

/// Uniform-noise background with one class-determined shape at a random
/// position; labels cycle, so the class histogram is balanced within one.
/// Pure in `(spec, seed)`, sample by sample, so generation parallelizes.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    gen_synthetic_with_workers(spec, seed, 1)
}

pub fn gen_synthetic_with_workers(spec: &SyntheticSpec, seed: u64, workers: usize) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let images = ordered_map_range(spec.num_samples, workers, |i| {
        let label = i % spec.num_classes;
        let shape = spec.shapes[label % spec.shapes.len()];
        let mut rng = KeyedRng::from_key(seed, &[stream::DATA, i as u64]);
        let mut pixels = vec![0.0; spec.channels * s * s];
        for p in pixels.iter_mut() {
            *p = spec.noise * rng.uniform();
        }
        draw_shape(&mut pixels, spec.channels, s, shape, &mut rng);
        LabeledImage { sample_id: i, pixels, label }
    });
    Ok(Dataset { channels: spec.channels, height: s, width: s, images })
}

fn draw_shape(pixels: &mut [f64], channels: usize, s: usize, shape: ShapeKind, rng: &mut KeyedRng) {
    let extent = (s * 3) / 8; // shape footprint, e.g. 12 px on a 32 px image
    let max0 = s - extent;
    let (y0, x0) = (rng.below(max0 + 1), rng.below(max0 + 1));
    let set = |y: usize, x: usize, pixels: &mut [f64]| {
        for c in 0..channels {
            pixels[c * s * s + y * s + x] = 1.0;
        }
    };
    match shape {
        ShapeKind::Square => {
            for y in y0..y0 + extent {
                for x in x0..x0 + extent {
                    set(y, x, pixels);
                }
            }
        }
        ShapeKind::Disk => {
            let r = extent as f64 / 2.0;
            let (cy, cx) = (y0 as f64 + r, x0 as f64 + r);
            for y in y0..y0 + extent {
                for x in x0..x0 + extent {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    if dy * dy + dx * dx <= r * r {
                        set(y, x, pixels);
                    }
                }
            }
        }
        ShapeKind::Cross => {
            let arm = (extent / 3).max(1);
            let mid = extent / 2;
            for y in y0..y0 + extent {
                for x in x0..x0 + extent {
                    let ly = y - y0;
                    let lx = x - x0;
                    let in_v = lx >= mid.saturating_sub(arm / 2) && lx < mid + arm.div_ceil(2);
                    let in_h = ly >= mid.saturating_sub(arm / 2) && ly < mid + arm.div_ceil(2);
                    if in_v || in_h {
                        set(y, x, pixels);
                    }
                }
            }
        }
        ShapeKind::Stripes => {
            for y in y0..y0 + extent {
                if (y - y0) % 4 < 2 {
                    for x in x0..x0 + extent {
                        set(y, x, pixels);
                    }
                }
            }
        }
    }
}

// ── FMTD synthetic dump format ───────────────────────────────────────────

const FMTD_MAGIC: &[u8; 4] = b"FMTD";

/// Writes the headered raw dump: magic "FMTD", u32 count, u32 C/H/W (LE),
/// then per-sample 1 label byte + C·H·W little-endian f32 pixels.
pub fn write_fmtd(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + ds.len() * (1 + ds.channels * ds.height * ds.width * 4));
    out.extend_from_slice(FMTD_MAGIC);
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.channels as u32).to_le_bytes());
    out.extend_from_slice(&(ds.height as u32).to_le_bytes());
    out.extend_from_slice(&(ds.width as u32).to_le_bytes());
    for img in &ds.images {
        if img.label > u8::MAX as usize {
            return Err(Error::Format(format!("label {} does not fit a byte", img.label)));
        }
        out.push(img.label as u8);
        for &p in &img.pixels {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_fmtd(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_fmtd(&bytes)
}

pub fn parse_fmtd(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 20 || &bytes[0..4] != FMTD_MAGIC {
        return Err(Error::Format("missing FMTD magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, c, h, w) = (u32_at(4), u32_at(8), u32_at(12), u32_at(16));
    let per = 1 + c * h * w * 4;
    if bytes.len() != 20 + count * per {
        return Err(Error::Format(format!(
            "FMTD payload is {} bytes, expected {} for {count} samples of {c}x{h}x{w}",
            bytes.len() - 20,
            count * per
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &bytes[20 + i * per..20 + (i + 1) * per];
        let label = rec[0] as usize;
        let pixels = rec[1..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        images.push(LabeledImage { sample_id: i, pixels, label });
    }
    let ds = Dataset { channels: c, height: h, width: w, images };
    ds.validate_range()?;
    Ok(ds)
}

/// Loads either format, sniffing the FMTD magic first.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 4 && &bytes[0..4] == FMTD_MAGIC {
        parse_fmtd(&bytes)
    } else {
        parse_cifar10(&bytes)
    }
}

// ── image emission ───────────────────────────────────────────────────────

/// Bilinear upscaling (corner-aligned) of a grid to the full image size,
/// then min-max normalization to 0..255. A constant grid emits zeros.
pub fn render_heatmap_pixels(
    grid: &[f64],
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<u8>> {
    if grid.len() != grid_h * grid_w || grid_h == 0 || grid_w == 0 {
        return Err(Error::Shape(format!(
            "grid of {} values does not match {grid_h}x{grid_w}",
            grid.len()
        )));
    }
    let mut values = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let fy = if out_h > 1 && grid_h > 1 {
            y as f64 * (grid_h - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let y0 = (fy.floor() as usize).min(grid_h - 1);
        let y1 = (y0 + 1).min(grid_h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = if out_w > 1 && grid_w > 1 {
                x as f64 * (grid_w - 1) as f64 / (out_w - 1) as f64
            } else {
                0.0
            };
            let x0 = (fx.floor() as usize).min(grid_w - 1);
            let x1 = (x0 + 1).min(grid_w - 1);
            let tx = fx - x0 as f64;
            let top = grid[y0 * grid_w + x0] * (1.0 - tx) + grid[y0 * grid_w + x1] * tx;
            let bot = grid[y1 * grid_w + x0] * (1.0 - tx) + grid[y1 * grid_w + x1] * tx;
            values[y * out_w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes = if max > min {
        values.iter().map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8).collect()
    } else {
        vec![0u8; values.len()]
    };
    Ok(bytes)
}

/// Full binary PGM (P5) file contents for an upscaled heatmap.
pub fn render_pgm_heatmap(
    grid: &[f64],
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<u8>> {
    let pixels = render_heatmap_pixels(grid, grid_h, grid_w, out_h, out_w)?;
    let mut out = format!("P5\n{out_w} {out_h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_pgm_heatmap(
    grid: &[f64],
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
    path: &Path,
) -> Result<()> {
    fs::write(path, render_pgm_heatmap(grid, grid_h, grid_w, out_h, out_w)?)?;
    Ok(())
}

const OVERLAY_MASK_GRAY: u8 = 128;

/// Full binary PPM (P6) contents: the image with masked patches painted
/// mid-gray, thrown patches black, visible pixels untouched.
pub fn render_ppm_overlay(
    pixels: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    plan: &MaskPlan,
    patch: usize,
) -> Result<Vec<u8>> {
    if pixels.len() != channels * height * width {
        return Err(Error::Shape(format!(
            "pixel buffer {} vs {channels}x{height}x{width}",
            pixels.len()
        )));
    }
    if !(channels == 1 || channels == 3) {
        return Err(Error::Parameter(format!("overlay needs 1 or 3 channels, got {channels}")));
    }
    if height % patch != 0 || width % patch != 0 {
        return Err(Error::Parameter(format!(
            "patch {patch} does not tile {height}x{width}"
        )));
    }
    let grid_w = width / patch;
    let n = (height / patch) * grid_w;
    if plan.num_patches() != n {
        return Err(Error::Shape(format!(
            "plan covers {} patches, image has {n}",
            plan.num_patches()
        )));
    }
    // 0 = visible, 1 = masked, 2 = thrown
    let mut kind = vec![0u8; n];
    for &i in &plan.mask_idx {
        kind[i] = 1;
    }
    for &i in &plan.throw_idx {
        kind[i] = 2;
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for y in 0..height {
        for x in 0..width {
            let patch_idx = (y / patch) * grid_w + (x / patch);
            for c in 0..3 {
                let byte = match kind[patch_idx] {
                    1 => OVERLAY_MASK_GRAY,
                    2 => 0,
                    _ => {
                        let ch = if channels == 3 { c } else { 0 };
                        let v = pixels[ch * height * width + y * width + x];
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    }
                };
                out.push(byte);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm_overlay(
    img: &LabeledImage,
    channels: usize,
    height: usize,
    width: usize,
    plan: &MaskPlan,
    patch: usize,
    path: &Path,
) -> Result<()> {
    fs::write(path, render_ppm_overlay(&img.pixels, channels, height, width, plan, patch)?)?;
    Ok(())
}
