//! Per-sample rasterization of the frozen layout: min-max intensity
//! normalization, the 256-level blue-yellow-red palette, pixel-center
//! rasterization, mean-pool downsampling, and PNG/tensor export.

use crate::treemap::TreemapLayout;
use crate::util::atomic_write;
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no value for gene {0:?}")]
    MissingValue(String),
    #[error("intensity {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("{0}x{1} image not divisible by factor {2}")]
    NotDivisible(usize, usize, usize),
    #[error("expected {expected} leaf intensities, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("bad tensor file: {0}")]
    BadTensor(String),
    #[error("image encode: {0}")]
    Encode(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raster image, row-major and channel-last, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl SampleImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        SampleImage { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }
}

/// Per-leaf intensities for one sample: `u = (v - min) / (max - min)` over
/// the sample's leaf values, or 0.5 everywhere for a constant sample.
pub fn sample_intensities(
    layout: &TreemapLayout,
    values: &HashMap<String, f64>,
) -> Result<Vec<f64>, RenderError> {
    let mut leaf_values = Vec::with_capacity(layout.entries.len());
    for entry in &layout.entries {
        let v = values
            .get(&entry.kegg_id)
            .ok_or_else(|| RenderError::MissingValue(entry.kegg_id.clone()))?;
        leaf_values.push(*v);
    }
    let min = leaf_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = leaf_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(vec![0.5; leaf_values.len()]);
    }
    Ok(leaf_values.into_iter().map(|v| (v - min) / (max - min)).collect())
}

/// 256-level palette: indices 0..=255 interpolate blue (0,0,255) at 0
/// through yellow (255,255,0) at 128 to red (255,0,0) at 255; `u` picks
/// the nearest index.
pub fn apply_colormap(u: f64) -> Result<(u8, u8, u8), RenderError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(RenderError::OutOfRange(u));
    }
    let index = (u * 255.0 + 0.5).floor().min(255.0);
    let (r, g, b) = if index <= 128.0 {
        let t = index / 128.0;
        (255.0 * t, 255.0 * t, 255.0 * (1.0 - t))
    } else {
        let t = (index - 128.0) / 127.0;
        (255.0, 255.0 * (1.0 - t), 0.0)
    };
    Ok((r.round() as u8, g.round() as u8, b.round() as u8))
}

const BORDER_GRAY: f64 = 64.0 / 255.0;

/// Paint each leaf's intensity onto the pixels whose centers its half-open
/// rectangle contains. Pixels outside every leaf stay 0. With `borders`
/// set, 1-px rings are drawn at category levels 1..=3 (value 0 in
/// single-channel mode, dark gray in RGB mode).
pub fn rasterize(
    layout: &TreemapLayout,
    leaf_intensities: &[f64],
    side_px: usize,
    channels: usize,
    borders: bool,
) -> Result<SampleImage, RenderError> {
    if leaf_intensities.len() != layout.entries.len() {
        return Err(RenderError::LengthMismatch {
            expected: layout.entries.len(),
            got: leaf_intensities.len(),
        });
    }
    assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
    let mut img = SampleImage::zeros(side_px, side_px, channels);
    let scale = side_px as f64 / layout.side;

    // Candidate pixel range for a half-open span [lo, hi): centers at
    // (i + 0.5) / scale. Widened by one pixel, then re-checked with the
    // same containment predicate the oracle uses.
    let pixel_range = |lo: f64, hi: f64| {
        let first = ((lo * scale - 0.5).ceil() as isize - 1).max(0) as usize;
        let last = ((hi * scale - 0.5).ceil() as isize + 1).clamp(0, side_px as isize) as usize;
        first..last
    };

    for (entry, &u) in layout.entries.iter().zip(leaf_intensities) {
        if !(0.0..=1.0).contains(&u) {
            return Err(RenderError::OutOfRange(u));
        }
        let rect = entry.rect;
        for row in pixel_range(rect.y0, rect.y1) {
            let cy = (row as f64 + 0.5) / scale;
            if !(rect.y0 <= cy && cy < rect.y1) {
                continue;
            }
            for col in pixel_range(rect.x0, rect.x1) {
                let cx = (col as f64 + 0.5) / scale;
                if !(rect.x0 <= cx && cx < rect.x1) {
                    continue;
                }
                if channels == 1 {
                    img.set(row, col, 0, u);
                } else {
                    let (r, g, b) = apply_colormap(u)?;
                    img.set(row, col, 0, r as f64 / 255.0);
                    img.set(row, col, 1, g as f64 / 255.0);
                    img.set(row, col, 2, b as f64 / 255.0);
                }
            }
        }
    }

    if borders {
        for cat in &layout.category_rects {
            if !(1..=3).contains(&cat.level) {
                continue;
            }
            let rows: Vec<usize> = pixel_range(cat.rect.y0, cat.rect.y1)
                .filter(|&r| {
                    let cy = (r as f64 + 0.5) / scale;
                    cat.rect.y0 <= cy && cy < cat.rect.y1
                })
                .collect();
            let cols: Vec<usize> = pixel_range(cat.rect.x0, cat.rect.x1)
                .filter(|&c| {
                    let cx = (c as f64 + 0.5) / scale;
                    cat.rect.x0 <= cx && cx < cat.rect.x1
                })
                .collect();
            let (Some(&r0), Some(&r1), Some(&c0), Some(&c1)) =
                (rows.first(), rows.last(), cols.first(), cols.last())
            else {
                continue;
            };
            let mut paint = |row: usize, col: usize| {
                if channels == 1 {
                    img.set(row, col, 0, 0.0);
                } else {
                    for ch in 0..3 {
                        img.set(row, col, ch, BORDER_GRAY);
                    }
                }
            };
            for &col in &cols {
                paint(r0, col);
                paint(r1, col);
            }
            for &row in &rows {
                paint(row, c0);
                paint(row, c1);
            }
        }
    }
    Ok(img)
}

/// Mean-pool by `factor` in both dimensions, per channel.
pub fn downsample_mean(img: &SampleImage, factor: usize) -> Result<SampleImage, RenderError> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(RenderError::NotDivisible(img.width, img.height, factor));
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let mut out = SampleImage::zeros(ow, oh, img.channels);
    let norm = 1.0 / (factor * factor) as f64;
    for row in 0..oh {
        for col in 0..ow {
            for ch in 0..img.channels {
                let mut sum = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        sum += img.get(row * factor + dy, col * factor + dx, ch);
                    }
                }
                out.set(row, col, ch, sum * norm);
            }
        }
    }
    Ok(out)
}

const TENSOR_MAGIC: &[u8; 4] = b"OMNT";
const TENSOR_VERSION: u32 = 1;

/// Binary tensor file: magic, version, height, width, channels as u32 LE,
/// then height*width*channels little-endian f32, row-major, channel-last.
pub fn write_tensor(img: &SampleImage, path: &Path) -> Result<(), RenderError> {
    let mut bytes = Vec::with_capacity(20 + img.data.len() * 4);
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(img.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.channels as u32).to_le_bytes());
    for &v in &img.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<SampleImage, RenderError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 || &bytes[..4] != TENSOR_MAGIC {
        return Err(RenderError::BadTensor("missing OMNT header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if u32_at(4) != TENSOR_VERSION {
        return Err(RenderError::BadTensor(format!("unsupported version {}", u32_at(4))));
    }
    let (height, width, channels) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let expected = 20 + height * width * channels * 4;
    if bytes.len() != expected {
        return Err(RenderError::BadTensor(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(SampleImage { width, height, channels, data })
}

/// 8-bit RGB PNG; single-channel images go through the colormap.
pub fn write_png(img: &SampleImage, path: &Path) -> Result<(), RenderError> {
    let mut rgb = image::RgbImage::new(img.width as u32, img.height as u32);
    for row in 0..img.height {
        for col in 0..img.width {
            let pixel = if img.channels == 1 {
                let (r, g, b) = apply_colormap(img.get(row, col, 0).clamp(0.0, 1.0))?;
                [r, g, b]
            } else {
                [
                    (img.get(row, col, 0) * 255.0).round() as u8,
                    (img.get(row, col, 1) * 255.0).round() as u8,
                    (img.get(row, col, 2) * 255.0).round() as u8,
                ]
            };
            rgb.put_pixel(col as u32, row as u32, image::Rgb(pixel));
        }
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut bytes, image::ImageFormat::Png)?;
    atomic_write(path, &bytes.into_inner())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Tensor,
}

pub fn export_image(img: &SampleImage, path: &Path, format: ImageFormat) -> Result<(), RenderError> {
    match format {
        ImageFormat::Png => write_png(img, path),
        ImageFormat::Tensor => write_tensor(img, path),
    }
}
