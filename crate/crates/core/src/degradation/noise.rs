//! Additive Gaussian and signal-dependent Poisson noise.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::DetRng;

/// Additive Gaussian noise. `sigma_8bit` is expressed on the 0-255 scale
/// and divided by 255 before application, matching the convention of the
/// degradation ranges.
pub fn add_gaussian_noise(image: &Image, sigma_8bit: f32, rng: &mut DetRng) -> Result<Image> {
    if sigma_8bit < 0.0 {
        return Err(Error::contract("gaussian noise sigma must be >= 0"));
    }
    if sigma_8bit == 0.0 {
        return Ok(image.clone());
    }
    let sigma = sigma_8bit as f64 / 255.0;
    let pixels = image
        .pixels
        .iter()
        .map(|&p| (p as f64 + rng.normal() * sigma) as f32)
        .collect();
    Image::from_pixels(image.height, image.width, image.channels, pixels)
}

/// Shot noise: each pixel is replaced by `Poisson(p * 255 * scale) /
/// (255 * scale)`, which is mean-preserving before clamping. Larger `scale`
/// means weaker noise.
pub fn add_poisson_noise(image: &Image, scale: f32, rng: &mut DetRng) -> Result<Image> {
    if scale <= 0.0 {
        return Err(Error::contract("poisson noise scale must be > 0"));
    }
    let factor = 255.0 * scale as f64;
    let pixels = image
        .pixels
        .iter()
        .map(|&p| (rng.poisson(p as f64 * factor) as f64 / factor) as f32)
        .collect();
    Image::from_pixels(image.height, image.width, image.channels, pixels)
}
