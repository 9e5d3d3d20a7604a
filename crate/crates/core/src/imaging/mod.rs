//! Images, PNG I/O, procedural training data, and full-reference metrics.

pub mod io;
pub mod metrics;
pub mod synth;

pub use io::{load_image, save_image};
pub use metrics::{psnr, ssim};
pub use synth::{synth_dataset, DatasetSpec, Generator};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::path::{Path, PathBuf};

/// H x W x C pixel array, values in `[0,1]`, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    /// All-black image.
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        assert!(height >= 1 && width >= 1, "image dims must be >= 1");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    /// Build from raw pixel data, clamping every value into `[0,1]`.
    pub fn from_pixels(height: usize, width: usize, channels: usize, mut pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::contract(format!(
                "pixel buffer length {} != {}x{}x{}",
                pixels.len(),
                height,
                width,
                channels
            )));
        }
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// `[1, C, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = self.get(y, x, ch);
                }
            }
        }
        Tensor::from_vec(&[1, c, h, w], data).expect("consistent dims")
    }

    /// Back from a `[1, C, H, W]` tensor, clamping into `[0,1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape.len() != 4 || t.shape[0] != 1 {
            return Err(Error::contract(format!(
                "expected [1,C,H,W] tensor, got {:?}",
                t.shape
            )));
        }
        let (c, h, w) = (t.shape[1], t.shape[2], t.shape[3]);
        let mut pixels = vec![0.0f32; h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pixels[(y * w + x) * c + ch] = t.data[(ch * h + y) * w + x].clamp(0.0, 1.0);
                }
            }
        }
        Image::from_pixels(h, w, c, pixels)
    }

    /// BT.601 full-range luma; identity for single-channel images.
    pub fn luma(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))
    }
}

/// Write a dataset manifest: one image path per line.
pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut body = String::new();
    for e in entries {
        body.push_str(&e.to_string_lossy());
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Read a manifest back. Blank lines are ignored; the file must be UTF-8.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&body)
}

/// Parse manifest text (one path per line).
pub fn parse_manifest(body: &str) -> Result<Vec<PathBuf>> {
    Ok(body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(PathBuf::from)
        .collect())
}
