//! Area, bilinear, and bicubic resampling with half-pixel centers.

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeAlgorithm {
    Area,
    Bilinear,
    Bicubic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResizeSpec {
    pub algorithm: ResizeAlgorithm,
    pub scale: f32,
}

/// Resize by `spec.scale`; output dims are `round(scale * dims)`.
pub fn apply_resize(image: &Image, spec: &ResizeSpec) -> Result<Image> {
    if spec.scale <= 0.0 || !spec.scale.is_finite() {
        return Err(Error::contract(format!("resize scale must be positive, got {}", spec.scale)));
    }
    let oh = (image.height as f64 * spec.scale as f64).round() as usize;
    let ow = (image.width as f64 * spec.scale as f64).round() as usize;
    resize_to(image, oh, ow, spec.algorithm)
}

/// Resize to explicit output dimensions.
pub fn resize_to(image: &Image, oh: usize, ow: usize, algorithm: ResizeAlgorithm) -> Result<Image> {
    if oh == 0 || ow == 0 {
        return Err(Error::contract(format!(
            "resize would produce a {oh}x{ow} image"
        )));
    }
    if oh == image.height && ow == image.width {
        return Ok(image.clone());
    }
    // separable: columns first, then rows
    let pass1 = resample_axis(image, ow, true, algorithm)?;
    resample_axis(&pass1, oh, false, algorithm)
}

/// Resample one axis. `horizontal` selects the axis being changed.
fn resample_axis(
    image: &Image,
    out_len: usize,
    horizontal: bool,
    algorithm: ResizeAlgorithm,
) -> Result<Image> {
    let in_len = if horizontal { image.width } else { image.height };
    let other = if horizontal { image.height } else { image.width };
    let c = image.channels;
    let weights = match algorithm {
        ResizeAlgorithm::Area => area_weights(in_len, out_len),
        ResizeAlgorithm::Bilinear => kernel_weights(in_len, out_len, 1.0, tent),
        ResizeAlgorithm::Bicubic => kernel_weights(in_len, out_len, 2.0, catmull_rom),
    };

    let (oh, ow) = if horizontal { (other, out_len) } else { (out_len, other) };
    let mut out = vec![0.0f32; oh * ow * c];
    for o in 0..out_len {
        let taps = &weights[o];
        for j in 0..other {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for &(idx, w) in taps {
                    let v = if horizontal {
                        image.get(j, idx, ch)
                    } else {
                        image.get(idx, j, ch)
                    };
                    acc += w * v as f64;
                }
                let (y, x) = if horizontal { (j, o) } else { (o, j) };
                out[(y * ow + x) * c + ch] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::from_pixels(oh, ow, c, out)
}

/// Box-average weights: each output pixel integrates its exact source
/// interval, including fractional edge coverage.
fn area_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let start = o as f64 * ratio;
            let end = (o + 1) as f64 * ratio;
            let mut taps = Vec::new();
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(in_len);
            let mut total = 0.0;
            for i in first..last {
                let cover = (end.min((i + 1) as f64) - start.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((i, cover));
                    total += cover;
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Half-pixel-center kernel weights with edge clamping; the kernel is
/// widened by the scale factor when minifying so it acts as a proper
/// low-pass filter.
fn kernel_weights(
    in_len: usize,
    out_len: usize,
    support: f64,
    kernel: fn(f64) -> f64,
) -> Vec<Vec<(usize, f64)>> {
    let ratio = in_len as f64 / out_len as f64;
    let filter_scale = ratio.max(1.0);
    let radius = support * filter_scale;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * ratio - 0.5;
            let first = (center - radius).ceil() as isize;
            let last = (center + radius).floor() as isize;
            let mut taps = Vec::new();
            let mut total = 0.0;
            for i in first..=last {
                let w = kernel((i as f64 - center) / filter_scale);
                if w != 0.0 {
                    let idx = i.clamp(0, in_len as isize - 1) as usize;
                    taps.push((idx, w));
                    total += w;
                }
            }
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

fn tent(d: f64) -> f64 {
    let d = d.abs();
    if d < 1.0 {
        1.0 - d
    } else {
        0.0
    }
}

/// Catmull-Rom cubic (a = -0.5).
fn catmull_rom(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
    } else {
        0.0
    }
}
