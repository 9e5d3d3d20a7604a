//! Two-stage degradation synthesis.
//!
//! A [`DegradationPlan`] is one fully sampled parameterization of the
//! blur-resize-noise chain applied twice, with an optional trailing JPEG
//! pass, after which the image is resized back to its original size. Plans
//! are value types: sampling is separated from execution so every plan can
//! be serialized next to the degraded image and replayed bit-for-bit.

pub mod blur;
pub mod jpeg;
pub mod noise;
pub mod plan_text;
pub mod resize;

pub use blur::{apply_blur, gaussian_kernel, BlurKind, BlurSpec};
pub use jpeg::jpeg_artifacts;
pub use noise::{add_gaussian_noise, add_poisson_noise};
pub use plan_text::{parse_plan, plan_to_text};
pub use resize::{apply_resize, resize_to, ResizeAlgorithm, ResizeSpec};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numerics::DetRng;

/// Noise stage parameterization; exactly the active kind's field is
/// meaningful.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    /// Additive Gaussian, sigma on the 0-255 scale.
    Gaussian { sigma_8bit: f32 },
    /// Signal-dependent Poisson; larger scale = weaker noise.
    Poisson { scale: f32 },
    /// DCT quantization loss at this quality.
    Jpeg { quality: u8 },
}

/// One blur -> resize -> noise stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub blur: BlurSpec,
    pub resize: ResizeSpec,
    pub noise: NoiseSpec,
}

/// Fully sampled two-stage degradation, replayable via `(noise_seed,
/// noise_stream)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationPlan {
    pub stage1: StageSpec,
    pub stage2: StageSpec,
    pub final_jpeg: Option<NoiseSpec>,
    pub original_size: (usize, usize),
    pub wide_range: bool,
    pub noise_seed: u64,
    pub noise_stream: u64,
}

/// Parameter intervals for one stage (sigma, resize scale, noise scales).
#[derive(Debug, Clone, Copy)]
pub struct StageRanges {
    pub blur_sigma: (f32, f32),
    pub resize_scale: (f32, f32),
    pub gaussian_sigma: (f32, f32),
    pub poisson_scale: (f32, f32),
}

pub const STAGE1_RANGES: StageRanges = StageRanges {
    blur_sigma: (0.2, 3.0),
    resize_scale: (0.15, 1.5),
    gaussian_sigma: (1.0, 30.0),
    poisson_scale: (0.05, 3.0),
};

pub const STAGE2_RANGES: StageRanges = StageRanges {
    blur_sigma: (0.2, 1.5),
    resize_scale: (0.3, 1.2),
    gaussian_sigma: (1.0, 25.0),
    poisson_scale: (0.05, 2.5),
};

/// Wide mode blur sigma interval (both stages).
pub const WIDE_BLUR_SIGMA: (f32, f32) = (0.1, 12.0);
/// Wide mode net downsampling factor interval.
pub const WIDE_DOWNSAMPLING: (f32, f32) = (1.0, 12.0);

pub const KERNEL_SIZE_RANGE: (usize, usize) = (7, 21);
pub const JPEG_QUALITY_RANGE: (u8, u8) = (30, 95);

/// Probability that the trailing JPEG pass is applied. The selection order
/// of noise kinds is not pinned by the degradation ranges themselves, so
/// this is a configuration default recorded in every plan.
pub const FINAL_JPEG_PROBABILITY: f64 = 0.75;

fn sample_blur(rng: &mut DetRng, sigma_range: (f32, f32)) -> BlurSpec {
    let kernel_size = 2 * rng.uniform_int(3, 10) as usize + 1; // odd in [7, 21]
    let kind = if rng.coin_flip() {
        BlurKind::Isotropic
    } else {
        BlurKind::Anisotropic
    };
    match kind {
        BlurKind::Isotropic => {
            let sigma = rng.uniform_range(sigma_range.0 as f64, sigma_range.1 as f64) as f32;
            BlurSpec {
                kind,
                kernel_size,
                sigma_x: sigma,
                sigma_y: sigma,
                theta: 0.0,
            }
        }
        BlurKind::Anisotropic => BlurSpec {
            kind,
            kernel_size,
            sigma_x: rng.uniform_range(sigma_range.0 as f64, sigma_range.1 as f64) as f32,
            sigma_y: rng.uniform_range(sigma_range.0 as f64, sigma_range.1 as f64) as f32,
            theta: rng.uniform_range(0.0, std::f64::consts::PI) as f32,
        },
    }
}

fn sample_pixel_noise(rng: &mut DetRng, ranges: &StageRanges) -> NoiseSpec {
    if rng.coin_flip() {
        NoiseSpec::Gaussian {
            sigma_8bit: rng
                .uniform_range(ranges.gaussian_sigma.0 as f64, ranges.gaussian_sigma.1 as f64)
                as f32,
        }
    } else {
        NoiseSpec::Poisson {
            scale: rng
                .uniform_range(ranges.poisson_scale.0 as f64, ranges.poisson_scale.1 as f64)
                as f32,
        }
    }
}

fn sample_resize_algorithm(rng: &mut DetRng) -> ResizeAlgorithm {
    match rng.uniform_int(0, 2) {
        0 => ResizeAlgorithm::Area,
        1 => ResizeAlgorithm::Bilinear,
        _ => ResizeAlgorithm::Bicubic,
    }
}

/// Draw one complete plan. In wide mode the blur sigma interval is widened
/// to [0.1, 12] for both stages and the two resize scales are derived from
/// a net downsampling factor drawn uniformly from [1, 12], split randomly
/// across the stages (so the pipeline stays second-order).
pub fn sample_plan(rng: &mut DetRng, wide_range: bool, original_size: (usize, usize)) -> DegradationPlan {
    let sigma1 = if wide_range { WIDE_BLUR_SIGMA } else { STAGE1_RANGES.blur_sigma };
    let sigma2 = if wide_range { WIDE_BLUR_SIGMA } else { STAGE2_RANGES.blur_sigma };

    let blur1 = sample_blur(rng, sigma1);
    let (scale1, scale2);
    if wide_range {
        let net_down = rng.uniform_range(WIDE_DOWNSAMPLING.0 as f64, WIDE_DOWNSAMPLING.1 as f64);
        let split = rng.uniform();
        scale1 = (1.0 / net_down.powf(split)) as f32;
        scale2 = (1.0 / net_down.powf(1.0 - split)) as f32;
    } else {
        scale1 = rng.uniform_range(
            STAGE1_RANGES.resize_scale.0 as f64,
            STAGE1_RANGES.resize_scale.1 as f64,
        ) as f32;
        scale2 = rng.uniform_range(
            STAGE2_RANGES.resize_scale.0 as f64,
            STAGE2_RANGES.resize_scale.1 as f64,
        ) as f32;
    }
    let resize1 = ResizeSpec {
        algorithm: sample_resize_algorithm(rng),
        scale: scale1,
    };
    let noise1 = sample_pixel_noise(rng, &STAGE1_RANGES);

    let blur2 = sample_blur(rng, sigma2);
    let resize2 = ResizeSpec {
        algorithm: sample_resize_algorithm(rng),
        scale: scale2,
    };
    let noise2 = sample_pixel_noise(rng, &STAGE2_RANGES);

    let final_jpeg = if rng.uniform() < FINAL_JPEG_PROBABILITY {
        Some(NoiseSpec::Jpeg {
            quality: rng
                .uniform_int(JPEG_QUALITY_RANGE.0 as i64, JPEG_QUALITY_RANGE.1 as i64)
                as u8,
        })
    } else {
        None
    };

    DegradationPlan {
        stage1: StageSpec { blur: blur1, resize: resize1, noise: noise1 },
        stage2: StageSpec { blur: blur2, resize: resize2, noise: noise2 },
        final_jpeg,
        original_size,
        wide_range,
        noise_seed: rng.next_u64(),
        noise_stream: rng.next_u64(),
    }
}

fn apply_noise(image: &Image, noise: &NoiseSpec, rng: &mut DetRng) -> Result<Image> {
    match noise {
        NoiseSpec::Gaussian { sigma_8bit } => add_gaussian_noise(image, *sigma_8bit, rng),
        NoiseSpec::Poisson { scale } => add_poisson_noise(image, *scale, rng),
        NoiseSpec::Jpeg { quality } => jpeg_artifacts(image, *quality),
    }
}

fn apply_stage(image: &Image, stage: &StageSpec, rng: &mut DetRng) -> Result<Image> {
    let blurred = apply_blur(image, &stage.blur)?;
    let resized = apply_resize(&blurred, &stage.resize)?;
    apply_noise(&resized, &stage.noise, rng)
}

/// Execute the plan: stage 1, stage 2, optional JPEG, then bicubic resize
/// back to the original size. Deterministic in the plan's noise key.
pub fn degrade(image: &Image, plan: &DegradationPlan) -> Result<Image> {
    if (image.height, image.width) != plan.original_size {
        return Err(Error::contract(format!(
            "image is {}x{} but the plan was sampled for {}x{}",
            image.height, image.width, plan.original_size.0, plan.original_size.1
        )));
    }
    let mut rng = DetRng::new(plan.noise_seed, plan.noise_stream);
    let mut out = apply_stage(image, &plan.stage1, &mut rng)?;
    out = apply_stage(&out, &plan.stage2, &mut rng)?;
    if let Some(jpeg) = &plan.final_jpeg {
        out = apply_noise(&out, jpeg, &mut rng)?;
    }
    resize_to(&out, plan.original_size.0, plan.original_size.1, ResizeAlgorithm::Bicubic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;
    use crate::imaging::synth::{synth_dataset, DatasetSpec, Generator};

    fn test_image(seed: u64) -> Image {
        synth_dataset(&DatasetSpec {
            count: 1,
            size: 32,
            generator: Generator::Mixed,
            seed,
        })
        .unwrap()
        .remove(0)
    }

    fn in_range(v: f32, lo: f32, hi: f32) -> bool {
        (lo..=hi).contains(&v)
    }

    fn check_stage(stage: &StageSpec, ranges: &StageRanges, wide: bool) {
        assert!(stage.blur.kernel_size % 2 == 1);
        assert!((7..=21).contains(&stage.blur.kernel_size));
        let (lo, hi) = if wide { WIDE_BLUR_SIGMA } else { ranges.blur_sigma };
        assert!(in_range(stage.blur.sigma_x, lo, hi), "sigma_x {}", stage.blur.sigma_x);
        assert!(in_range(stage.blur.sigma_y, lo, hi), "sigma_y {}", stage.blur.sigma_y);
        if !wide {
            assert!(in_range(stage.resize.scale, ranges.resize_scale.0, ranges.resize_scale.1));
        }
        match &stage.noise {
            NoiseSpec::Gaussian { sigma_8bit } => {
                assert!(in_range(*sigma_8bit, ranges.gaussian_sigma.0, ranges.gaussian_sigma.1))
            }
            NoiseSpec::Poisson { scale } => {
                assert!(in_range(*scale, ranges.poisson_scale.0, ranges.poisson_scale.1))
            }
            NoiseSpec::Jpeg { .. } => panic!("per-stage noise is gaussian or poisson"),
        }
    }

    #[test]
    fn sampled_parameters_respect_ranges() {
        let mut rng = DetRng::new(1, 0);
        for _ in 0..10_000 {
            let plan = sample_plan(&mut rng, false, (32, 32));
            check_stage(&plan.stage1, &STAGE1_RANGES, false);
            check_stage(&plan.stage2, &STAGE2_RANGES, false);
            if let Some(NoiseSpec::Jpeg { quality }) = plan.final_jpeg {
                assert!((30..=95).contains(&quality));
            }
        }
    }

    #[test]
    fn wide_mode_widens_sigma_and_bounds_downsampling() {
        let mut rng = DetRng::new(2, 0);
        let mut max_sigma = 0.0f32;
        for _ in 0..10_000 {
            let plan = sample_plan(&mut rng, true, (32, 32));
            check_stage(&plan.stage1, &STAGE1_RANGES, true);
            check_stage(&plan.stage2, &STAGE2_RANGES, true);
            max_sigma = max_sigma
                .max(plan.stage1.blur.sigma_x)
                .max(plan.stage1.blur.sigma_y)
                .max(plan.stage2.blur.sigma_x)
                .max(plan.stage2.blur.sigma_y);
            let net_down = 1.0 / (plan.stage1.resize.scale as f64 * plan.stage2.resize.scale as f64);
            assert!(
                (1.0 - 1e-6..=12.0 + 1e-6).contains(&net_down),
                "net downsampling {net_down}"
            );
        }
        assert!(max_sigma > 3.0 && max_sigma <= 12.0, "max sigma {max_sigma}");
    }

    #[test]
    fn same_stream_gives_identical_plans() {
        let a = sample_plan(&mut DetRng::new(7, 3), false, (32, 32));
        let b = sample_plan(&mut DetRng::new(7, 3), false, (32, 32));
        assert_eq!(a, b);
    }

    #[test]
    fn degrade_preserves_dimensions_and_range() {
        let img = test_image(1);
        let mut rng = DetRng::new(3, 0);
        for _ in 0..5 {
            let plan = sample_plan(&mut rng, false, (32, 32));
            let out = degrade(&img, &plan).unwrap();
            assert_eq!((out.height, out.width), (32, 32));
            assert!(out.in_unit_range());
        }
    }

    #[test]
    fn degrade_is_deterministic() {
        let img = test_image(2);
        let plan = sample_plan(&mut DetRng::new(4, 0), false, (32, 32));
        let a = degrade(&img, &plan).unwrap();
        let b = degrade(&img, &plan).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn near_identity_plan_keeps_high_psnr() {
        let img = test_image(3);
        let plan = DegradationPlan {
            stage1: StageSpec {
                blur: BlurSpec::isotropic(7, 0.2),
                resize: ResizeSpec { algorithm: ResizeAlgorithm::Bilinear, scale: 1.0 },
                noise: NoiseSpec::Gaussian { sigma_8bit: 0.0 },
            },
            stage2: StageSpec {
                blur: BlurSpec::isotropic(7, 0.2),
                resize: ResizeSpec { algorithm: ResizeAlgorithm::Bilinear, scale: 1.0 },
                noise: NoiseSpec::Gaussian { sigma_8bit: 0.0 },
            },
            final_jpeg: None,
            original_size: (32, 32),
            wide_range: false,
            noise_seed: 0,
            noise_stream: 0,
        };
        let out = degrade(&img, &plan).unwrap();
        let db = psnr(&img, &out).unwrap();
        assert!(db >= 40.0, "near-identity plan scored {db} dB");
    }

    #[test]
    fn plan_size_mismatch_is_rejected() {
        let img = test_image(4);
        let plan = sample_plan(&mut DetRng::new(5, 0), false, (64, 64));
        assert!(degrade(&img, &plan).is_err());
    }

    /// Statistical severity check: sigma 30 Gaussian noise hurts PSNR more
    /// than sigma 1, averaged over 50 images.
    #[test]
    fn stronger_noise_lowers_mean_psnr() {
        let mut mild_total = 0.0;
        let mut harsh_total = 0.0;
        for seed in 0..50 {
            let img = test_image(100 + seed);
            let base = sample_plan(&mut DetRng::new(500 + seed, 0), false, (32, 32));
            let mut mild = base.clone();
            mild.stage1.noise = NoiseSpec::Gaussian { sigma_8bit: 1.0 };
            let mut harsh = base;
            harsh.stage1.noise = NoiseSpec::Gaussian { sigma_8bit: 30.0 };
            mild_total += psnr(&img, &degrade(&img, &mild).unwrap()).unwrap();
            harsh_total += psnr(&img, &degrade(&img, &harsh).unwrap()).unwrap();
        }
        assert!(
            harsh_total / 50.0 < mild_total / 50.0,
            "harsh {harsh_total} should be below mild {mild_total}"
        );
    }
}
