//! Isotropic / anisotropic Gaussian blur with reflect padding.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurKind {
    Isotropic,
    Anisotropic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlurSpec {
    pub kind: BlurKind,
    pub kernel_size: usize,
    pub sigma_x: f32,
    pub sigma_y: f32,
    /// Rotation of the sigma_x axis, radians; zero for isotropic kernels.
    pub theta: f32,
}

impl BlurSpec {
    pub fn isotropic(kernel_size: usize, sigma: f32) -> Self {
        BlurSpec {
            kind: BlurKind::Isotropic,
            kernel_size,
            sigma_x: sigma,
            sigma_y: sigma,
            theta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::contract(format!(
                "blur kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.sigma_x <= 0.0 || self.sigma_y <= 0.0 {
            return Err(Error::contract("blur sigmas must be positive"));
        }
        if self.kind == BlurKind::Isotropic && (self.sigma_x != self.sigma_y || self.theta != 0.0)
        {
            return Err(Error::contract(
                "isotropic blur requires sigma_x == sigma_y and theta == 0",
            ));
        }
        Ok(())
    }
}

/// Rotated bivariate Gaussian density sampled at integer offsets and
/// normalized to sum exactly 1. The center element is the maximum.
pub fn gaussian_kernel(spec: &BlurSpec) -> Result<Tensor> {
    spec.validate()?;
    let k = spec.kernel_size;
    let half = (k / 2) as f64;
    let (sx2, sy2) = (
        (spec.sigma_x as f64) * (spec.sigma_x as f64),
        (spec.sigma_y as f64) * (spec.sigma_y as f64),
    );
    let (c, s) = ((spec.theta as f64).cos(), (spec.theta as f64).sin());
    // inverse covariance of R diag(sx^2, sy^2) R^T
    let a = c * c / sx2 + s * s / sy2;
    let b = s * c * (1.0 / sx2 - 1.0 / sy2);
    let d = s * s / sx2 + c * c / sy2;

    let mut weights = vec![0.0f64; k * k];
    let mut sum = 0.0f64;
    for row in 0..k {
        for col in 0..k {
            let y = row as f64 - half;
            let x = col as f64 - half;
            let e = -0.5 * (a * x * x + 2.0 * b * x * y + d * y * y);
            let w = e.exp();
            weights[row * k + col] = w;
            sum += w;
        }
    }
    let data: Vec<f32> = weights.iter().map(|w| (w / sum) as f32).collect();
    Tensor::from_vec(&[k, k], data)
}

/// 2-D correlation of the image with the normalized kernel; borders are
/// mirror-reflected (edge pixel repeated), output size unchanged.
pub fn apply_blur(image: &Image, spec: &BlurSpec) -> Result<Image> {
    let kernel = gaussian_kernel(spec)?;
    let k = spec.kernel_size;
    let half = (k / 2) as isize;
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    let iy = reflect(y as isize + ky as isize - half, h);
                    for kx in 0..k {
                        let ix = reflect(x as isize + kx as isize - half, w);
                        acc += kernel.data[ky * k + kx] as f64
                            * image.get(iy, ix, ch) as f64;
                    }
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Image::from_pixels(h, w, c, out)
}

/// Mirror with edge repetition: -1 -> 0, -2 -> 1, n -> n-1, ...
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}
