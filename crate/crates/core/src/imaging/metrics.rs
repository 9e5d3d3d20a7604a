//! Full-reference quality metrics: PSNR and single-scale SSIM.

use super::Image;
use crate::error::{Error, Result};

/// Peak signal-to-noise ratio in decibels with MAX = 1. Returns
/// `f64::INFINITY` when the images are identical (zero MSE).
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mse: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, mean over all valid window positions. Three-channel inputs
/// are compared on BT.601 luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let la = a.luma();
    let lb = b.luma();
    let kernel = gaussian_window();
    let (h, w) = (a.height, a.width);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let k = kernel[dy * SSIM_WINDOW + dx];
                    let va = la[(y0 + dy) * w + x0 + dx] as f64;
                    let vb = lb[(y0 + dy) * w + x0 + dx] as f64;
                    mu_a += k * va;
                    mu_b += k * vb;
                    aa += k * va * va;
                    bb += k * vb * vb;
                    ab += k * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let y = (i / SSIM_WINDOW) as f64 - c;
            let x = (i % SSIM_WINDOW) as f64 - c;
            (-(x * x + y * y) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::contract(format!(
            "metric dimension mismatch: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DetRng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = DetRng::new(seed, 0);
        let pixels = (0..h * w * 3).map(|_| rng.uniform() as f32).collect();
        Image::from_pixels(h, w, 3, pixels).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let img = random_image(16, 16, 1);
        assert!(psnr(&img, &img).unwrap().is_infinite());
    }

    #[test]
    fn psnr_known_mse_values() {
        // constant offset 0.1 -> MSE 0.01 -> 20 dB
        let a = Image::from_pixels(8, 8, 1, vec![0.2; 64]).unwrap();
        let b = Image::from_pixels(8, 8, 1, vec![0.3; 64]).unwrap();
        let db = psnr(&a, &b).unwrap();
        // 0.2/0.3 quantize at f32, so the offset is 0.1 only to ~1e-8
        assert!((db - 20.0).abs() < 1e-6, "got {db}");

        // all-0 vs all-1 -> MSE 1 -> 0 dB
        let z = Image::from_pixels(8, 8, 1, vec![0.0; 64]).unwrap();
        let o = Image::from_pixels(8, 8, 1, vec![1.0; 64]).unwrap();
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = random_image(16, 16, 2);
        let b = random_image(16, 16, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let sa = ssim(&a, &b).unwrap();
        let sb = ssim(&b, &a).unwrap();
        assert!((sa - sb).abs() < 1e-12);
    }

    #[test]
    fn ssim_identical_images_score_one() {
        let img = random_image(16, 16, 4);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        // constant vs same constant: zero variance both, stabilized by C2
        let c = Image::from_pixels(12, 12, 1, vec![0.5; 144]).unwrap();
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(8, 8, 5);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let a = random_image(16, 16, 6);
        let b = random_image(16, 12, 6);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    /// Independent straightforward SSIM reimplementation: unnormalized
    /// Gaussian weights handled explicitly, plain accumulation order.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let la = a.luma();
        let lb = b.luma();
        let (h, w) = (a.height, a.width);
        let win = 11usize;
        let sigma = 1.5f64;
        let (c1, c2) = (0.0001f64, 0.0009f64);

        let mut weights = vec![0.0f64; win * win];
        let mut wsum = 0.0;
        for y in 0..win {
            for x in 0..win {
                let dy = y as f64 - 5.0;
                let dx = x as f64 - 5.0;
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                weights[y * win + x] = g;
                wsum += g;
            }
        }

        let mut scores = Vec::new();
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                for y in 0..win {
                    for x in 0..win {
                        let wgt = weights[y * win + x] / wsum;
                        ma += wgt * la[(y0 + y) * w + x0 + x] as f64;
                        mb += wgt * lb[(y0 + y) * w + x0 + x] as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
                for y in 0..win {
                    for x in 0..win {
                        let wgt = weights[y * win + x] / wsum;
                        let da = la[(y0 + y) * w + x0 + x] as f64 - ma;
                        let db = lb[(y0 + y) * w + x0 + x] as f64 - mb;
                        va += wgt * da * da;
                        vb += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                scores.push(
                    ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)),
                );
            }
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    #[test]
    fn ssim_matches_reference_reimplementation() {
        for seed in 0..5 {
            let a = random_image(20, 24, 100 + seed);
            let b = random_image(20, 24, 200 + seed);
            let ours = ssim(&a, &b).unwrap();
            let reference = ssim_reference(&a, &b);
            assert!(
                (ours - reference).abs() <= 1e-5,
                "seed {seed}: {ours} vs {reference}"
            );
        }
    }

    #[test]
    fn psnr_decreases_with_noise_strength() {
        let base = random_image(16, 16, 9);
        let mut last = f64::INFINITY;
        for &sigma in &[0.01f64, 0.05, 0.1] {
            let mut acc = 0.0;
            for seed in 0..20 {
                let mut rng = DetRng::new(1000 + seed, 0);
                let mut noisy = base.clone();
                for p in &mut noisy.pixels {
                    *p = (*p + (rng.normal() * sigma) as f32).clamp(0.0, 1.0);
                }
                acc += psnr(&base, &noisy).unwrap();
            }
            let mean = acc / 20.0;
            assert!(mean < last, "psnr should fall as sigma grows: {mean} !< {last}");
            last = mean;
        }
    }
}
