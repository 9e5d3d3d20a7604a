//! Procedural training images.
//!
//! Stand-in for a natural-image corpus: the generators cover separate
//! frequency bands (gradients and blobs are smooth, checkers have hard
//! edges, fractal value noise fills the high band) so both the degradation
//! operators and the restoration net have real structure to work with.

use super::Image;
use crate::error::{Error, Result};
use crate::numerics::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    Gradients,
    Checker,
    GaussianBlobs,
    FractalNoise,
    Mixed,
}

impl Generator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Generator::Gradients),
            "checker" => Ok(Generator::Checker),
            "gaussian-blobs" => Ok(Generator::GaussianBlobs),
            "fractal-noise" => Ok(Generator::FractalNoise),
            "mixed" => Ok(Generator::Mixed),
            other => Err(Error::Format(format!("unknown generator `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Generator::Gradients => "gradients",
            Generator::Checker => "checker",
            Generator::GaussianBlobs => "gaussian-blobs",
            Generator::FractalNoise => "fractal-noise",
            Generator::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    pub generator: Generator,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::contract("dataset count must be >= 1"));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::contract(format!(
                "dataset size must be a positive multiple of 8, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Generate `spec.count` images deterministically; image `i` draws from
/// stream `(seed, i)` so generation order (or parallelism) cannot change
/// the result.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let mut rng = DetRng::new(spec.seed, i as u64);
            synth_one(spec.generator, spec.size, i, &mut rng)
        })
        .collect()
}

fn synth_one(gen: Generator, size: usize, index: usize, rng: &mut DetRng) -> Result<Image> {
    match gen {
        Generator::Gradients => gradients(size, rng),
        Generator::Checker => checker(size, rng),
        Generator::GaussianBlobs => blobs(size, rng),
        Generator::FractalNoise => fractal(size, rng),
        Generator::Mixed => {
            let pick = [
                Generator::Gradients,
                Generator::Checker,
                Generator::GaussianBlobs,
                Generator::FractalNoise,
            ];
            synth_one(pick[index % pick.len()], size, index, rng)
        }
    }
}

fn gradients(size: usize, rng: &mut DetRng) -> Result<Image> {
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let lo: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.0, 0.4));
    let hi: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.6, 1.0));
    let mut pixels = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            // project onto the gradient direction, normalized to [0,1]
            let t = ((x as f64 / (size - 1) as f64 - 0.5) * dx
                + (y as f64 / (size - 1) as f64 - 0.5) * dy)
                + 0.5;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] = (lo[c] + (hi[c] - lo[c]) * t) as f32;
            }
        }
    }
    Image::from_pixels(size, size, 3, pixels)
}

fn checker(size: usize, rng: &mut DetRng) -> Result<Image> {
    let cell = [2usize, 4, 8][rng.uniform_int(0, 2) as usize];
    let v0 = rng.uniform_range(0.0, 0.35) as f32;
    let v1 = rng.uniform_range(0.65, 1.0) as f32;
    let mut pixels = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let v = if ((y / cell) + (x / cell)) % 2 == 0 { v0 } else { v1 };
            for c in 0..3 {
                pixels[(y * size + x) * 3 + c] = v;
            }
        }
    }
    Image::from_pixels(size, size, 3, pixels)
}

fn blobs(size: usize, rng: &mut DetRng) -> Result<Image> {
    let background: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.1, 0.3));
    let count = rng.uniform_int(3, 6) as usize;
    struct Blob {
        cx: f64,
        cy: f64,
        sigma: f64,
        amp: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            cx: rng.uniform_range(0.0, size as f64),
            cy: rng.uniform_range(0.0, size as f64),
            sigma: rng.uniform_range(size as f64 * 0.08, size as f64 * 0.25),
            amp: std::array::from_fn(|_| rng.uniform_range(0.2, 0.8)),
        })
        .collect();
    let mut pixels = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut v = background[c];
                for b in &blobs {
                    let d2 = (x as f64 - b.cx).powi(2) + (y as f64 - b.cy).powi(2);
                    v += b.amp[c] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                pixels[(y * size + x) * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::from_pixels(size, size, 3, pixels)
}

/// Value noise: random lattices at octave resolutions, bilinearly upsampled
/// and summed with halving amplitudes, then stretched to full range.
fn fractal(size: usize, rng: &mut DetRng) -> Result<Image> {
    let mut acc = vec![0.0f64; size * size * 3];
    let mut amplitude = 1.0f64;
    let mut res = 4usize;
    while res <= size {
        let lattice: Vec<f64> = (0..res * res * 3).map(|_| rng.uniform()).collect();
        for y in 0..size {
            for x in 0..size {
                // sample lattice at (x,y) scaled down, bilinear
                let fx = x as f64 / size as f64 * (res - 1) as f64;
                let fy = y as f64 / size as f64 * (res - 1) as f64;
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(res - 1), (y0 + 1).min(res - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                for c in 0..3 {
                    let v00 = lattice[(y0 * res + x0) * 3 + c];
                    let v01 = lattice[(y0 * res + x1) * 3 + c];
                    let v10 = lattice[(y1 * res + x0) * 3 + c];
                    let v11 = lattice[(y1 * res + x1) * 3 + c];
                    let v = v00 * (1.0 - tx) * (1.0 - ty)
                        + v01 * tx * (1.0 - ty)
                        + v10 * (1.0 - tx) * ty
                        + v11 * tx * ty;
                    acc[(y * size + x) * 3 + c] += amplitude * v;
                }
            }
        }
        amplitude *= 0.5;
        res *= 2;
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let pixels: Vec<f32> = acc.iter().map(|v| ((v - lo) / span) as f32).collect();
    Image::from_pixels(size, size, 3, pixels)
}
