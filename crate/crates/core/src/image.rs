//! Fixed-size RGB images and the pooled features the encoders consume.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 224;
pub const CHANNELS: usize = 3;
pub const PATCH: usize = 16;
pub const PATCHES_PER_SIDE: usize = IMAGE_SIZE / PATCH;
pub const NUM_PATCHES: usize = PATCHES_PER_SIDE * PATCHES_PER_SIDE;
/// Flattened length of the patch-pooled image.
pub const POOLED_LEN: usize = NUM_PATCHES * CHANNELS;
pub const HIST_BINS_PER_CHANNEL: usize = 4;
pub const HIST_LEN: usize = HIST_BINS_PER_CHANNEL * HIST_BINS_PER_CHANNEL * HIST_BINS_PER_CHANNEL;

pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

/// Camera-plane coordinates of a pixel center; rows run top to bottom.
pub fn pixel_center(row: usize, col: usize) -> (f64, f64) {
    let s = 2.0 / IMAGE_SIZE as f64;
    (-1.0 + (col as f64 + 0.5) * s, 1.0 - (row as f64 + 0.5) * s)
}

/// 224×224×3 image, row-major, channel-interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        let expected = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
        if data.len() != expected {
            return Err(Error::dim(
                "image",
                &[IMAGE_SIZE, IMAGE_SIZE, CHANNELS],
                &[data.len()],
            ));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::domain(format!("pixel value {v} at index {i} outside [0,1]")));
        }
        Ok(ImageTensor { data })
    }

    pub fn filled(rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * CHANNELS);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            data.extend_from_slice(&rgb);
        }
        ImageTensor { data }
    }

    pub fn background() -> Self {
        ImageTensor::filled(BACKGROUND)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * IMAGE_SIZE + col) * CHANNELS;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// True for background gray, also after 8-bit quantization.
    pub fn is_background(&self, row: usize, col: usize) -> bool {
        let p = self.pixel(row, col);
        (0..3).all(|c| (p[c] - BACKGROUND[c]).abs() <= 0.5 / 255.0)
    }

    /// Sum of absolute channel differences.
    pub fn l1_distance(&self, other: &ImageTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(IMAGE_SIZE as u32, IMAGE_SIZE as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        if img.width() as usize != IMAGE_SIZE || img.height() as usize != IMAGE_SIZE {
            return Err(Error::dim(
                "image",
                &[IMAGE_SIZE, IMAGE_SIZE],
                &[img.height() as usize, img.width() as usize],
            ));
        }
        let data = img
            .pixels()
            .flat_map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect();
        Ok(ImageTensor { data })
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        ImageTensor::from_rgb8(&img)
    }

    /// Same image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        ImageTensor {
            data: self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        }
    }

    /// Mean RGB of every 16×16 patch, flattened patch-major.
    pub fn pooled_patches(&self) -> Vec<f64> {
        let mut out = vec![0.0; POOLED_LEN];
        for row in 0..IMAGE_SIZE {
            let pr = row / PATCH;
            for col in 0..IMAGE_SIZE {
                let pc = col / PATCH;
                let p = self.pixel(row, col);
                let base = (pr * PATCHES_PER_SIDE + pc) * CHANNELS;
                for c in 0..3 {
                    out[base + c] += p[c];
                }
            }
        }
        let n = (PATCH * PATCH) as f64;
        for v in &mut out {
            *v /= n;
        }
        out
    }

    /// Normalized joint RGB histogram with 4 bins per channel.
    pub fn color_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; HIST_LEN];
        let bin = |v: f64| ((v * HIST_BINS_PER_CHANNEL as f64) as usize).min(HIST_BINS_PER_CHANNEL - 1);
        for px in self.data.chunks_exact(3) {
            let idx = (bin(px[0]) * HIST_BINS_PER_CHANNEL + bin(px[1])) * HIST_BINS_PER_CHANNEL
                + bin(px[2]);
            h[idx] += 1.0;
        }
        let n = (IMAGE_SIZE * IMAGE_SIZE) as f64;
        for v in &mut h {
            *v /= n;
        }
        h
    }

    pub fn features(&self) -> ImageFeatures {
        ImageFeatures {
            patches: self.pooled_patches(),
            histogram: self.color_histogram(),
        }
    }
}

/// Fixed, parameter-free summaries of an image shared by every encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// `NUM_PATCHES × 3` patch means.
    pub patches: Vec<f64>,
    /// `HIST_LEN` normalized color histogram.
    pub histogram: Vec<f64>,
}

/// Per-patch fraction of pixels set in a binary pixel mask.
pub fn patch_coverage(mask: &[bool]) -> Vec<f64> {
    assert_eq!(mask.len(), IMAGE_SIZE * IMAGE_SIZE);
    let mut out = vec![0.0; NUM_PATCHES];
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            if mask[row * IMAGE_SIZE + col] {
                out[(row / PATCH) * PATCHES_PER_SIDE + col / PATCH] += 1.0;
            }
        }
    }
    let n = (PATCH * PATCH) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}
