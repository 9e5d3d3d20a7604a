//! Plan serialization: one `key = value` parameter per line.
//!
//! The format is pinned so a plan file written next to a degraded image can
//! be parsed back into the identical [`DegradationPlan`]. Floats are written
//! with Rust's shortest round-trip formatting, which is exact for f32.

use std::collections::BTreeMap;

use super::{
    BlurKind, BlurSpec, DegradationPlan, NoiseSpec, ResizeAlgorithm, ResizeSpec, StageSpec,
};
use crate::error::{Error, Result};

pub const PLAN_VERSION: u32 = 1;

pub fn plan_to_text(plan: &DegradationPlan) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    line("plan_version", PLAN_VERSION.to_string());
    line("wide_range", (plan.wide_range as u8).to_string());
    line("original_h", plan.original_size.0.to_string());
    line("original_w", plan.original_size.1.to_string());
    line("noise_seed", plan.noise_seed.to_string());
    line("noise_stream", plan.noise_stream.to_string());
    for (prefix, stage) in [("stage1", &plan.stage1), ("stage2", &plan.stage2)] {
        let kind = match stage.blur.kind {
            BlurKind::Isotropic => "isotropic",
            BlurKind::Anisotropic => "anisotropic",
        };
        line(&format!("{prefix}.blur.kind"), kind.to_string());
        line(
            &format!("{prefix}.blur.kernel_size"),
            stage.blur.kernel_size.to_string(),
        );
        line(&format!("{prefix}.blur.sigma_x"), stage.blur.sigma_x.to_string());
        line(&format!("{prefix}.blur.sigma_y"), stage.blur.sigma_y.to_string());
        line(&format!("{prefix}.blur.theta"), stage.blur.theta.to_string());
        let alg = match stage.resize.algorithm {
            ResizeAlgorithm::Area => "area",
            ResizeAlgorithm::Bilinear => "bilinear",
            ResizeAlgorithm::Bicubic => "bicubic",
        };
        line(&format!("{prefix}.resize.algorithm"), alg.to_string());
        line(&format!("{prefix}.resize.scale"), stage.resize.scale.to_string());
        match &stage.noise {
            NoiseSpec::Gaussian { sigma_8bit } => {
                line(&format!("{prefix}.noise.kind"), "gaussian".to_string());
                line(&format!("{prefix}.noise.gaussian_sigma"), sigma_8bit.to_string());
            }
            NoiseSpec::Poisson { scale } => {
                line(&format!("{prefix}.noise.kind"), "poisson".to_string());
                line(&format!("{prefix}.noise.poisson_scale"), scale.to_string());
            }
            NoiseSpec::Jpeg { quality } => {
                line(&format!("{prefix}.noise.kind"), "jpeg".to_string());
                line(&format!("{prefix}.noise.jpeg_quality"), quality.to_string());
            }
        }
    }
    match &plan.final_jpeg {
        Some(NoiseSpec::Jpeg { quality }) => {
            line("final_jpeg.enabled", "1".to_string());
            line("final_jpeg.quality", quality.to_string());
        }
        _ => line("final_jpeg.enabled", "0".to_string()),
    }
    out
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn get(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key `{key}`"),
            })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (line, raw) = self
            .map
            .get(key)
            .ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key `{key}`"),
            })?;
        raw.parse().map_err(|_| Error::Parse {
            line: *line,
            message: format!("invalid value `{raw}` for `{key}`"),
        })
    }
}

/// Parse the plan text format. Never panics on malformed input.
pub fn parse_plan(text: &str) -> Result<DegradationPlan> {
    let mut map = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected `key = value`".into(),
        })?;
        map.insert(
            key.trim().to_string(),
            (line_no, value.trim().to_string()),
        );
    }
    let fields = Fields { map };

    let version: u32 = fields.parse("plan_version")?;
    if version != PLAN_VERSION {
        return Err(Error::Format(format!(
            "unsupported plan version {version} (expected {PLAN_VERSION})"
        )));
    }

    let parse_stage = |prefix: &str| -> Result<StageSpec> {
        let kind = match fields.get(&format!("{prefix}.blur.kind"))? {
            "isotropic" => BlurKind::Isotropic,
            "anisotropic" => BlurKind::Anisotropic,
            other => {
                return Err(Error::Format(format!("unknown blur kind `{other}`")));
            }
        };
        let blur = BlurSpec {
            kind,
            kernel_size: fields.parse(&format!("{prefix}.blur.kernel_size"))?,
            sigma_x: fields.parse(&format!("{prefix}.blur.sigma_x"))?,
            sigma_y: fields.parse(&format!("{prefix}.blur.sigma_y"))?,
            theta: fields.parse(&format!("{prefix}.blur.theta"))?,
        };
        blur.validate()?;
        let algorithm = match fields.get(&format!("{prefix}.resize.algorithm"))? {
            "area" => ResizeAlgorithm::Area,
            "bilinear" => ResizeAlgorithm::Bilinear,
            "bicubic" => ResizeAlgorithm::Bicubic,
            other => {
                return Err(Error::Format(format!("unknown resize algorithm `{other}`")));
            }
        };
        let scale: f32 = fields.parse(&format!("{prefix}.resize.scale"))?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Format(format!("resize scale {scale} out of range")));
        }
        let noise = match fields.get(&format!("{prefix}.noise.kind"))? {
            "gaussian" => NoiseSpec::Gaussian {
                sigma_8bit: fields.parse(&format!("{prefix}.noise.gaussian_sigma"))?,
            },
            "poisson" => NoiseSpec::Poisson {
                scale: fields.parse(&format!("{prefix}.noise.poisson_scale"))?,
            },
            "jpeg" => NoiseSpec::Jpeg {
                quality: fields.parse(&format!("{prefix}.noise.jpeg_quality"))?,
            },
            other => {
                return Err(Error::Format(format!("unknown noise kind `{other}`")));
            }
        };
        match &noise {
            NoiseSpec::Gaussian { sigma_8bit } if !(sigma_8bit.is_finite() && *sigma_8bit >= 0.0) => {
                return Err(Error::Format("gaussian sigma out of range".into()));
            }
            NoiseSpec::Poisson { scale } if !(scale.is_finite() && *scale > 0.0) => {
                return Err(Error::Format("poisson scale out of range".into()));
            }
            NoiseSpec::Jpeg { quality } if !(1..=100).contains(quality) => {
                return Err(Error::Format("jpeg quality out of range".into()));
            }
            _ => {}
        }
        Ok(StageSpec {
            blur,
            resize: ResizeSpec { algorithm, scale },
            noise,
        })
    };

    let original_size = (fields.parse("original_h")?, fields.parse("original_w")?);
    if original_size.0 == 0 || original_size.1 == 0 {
        return Err(Error::Format("original size must be nonzero".into()));
    }
    let final_jpeg = match fields.parse::<u8>("final_jpeg.enabled")? {
        0 => None,
        1 => {
            let quality: u8 = fields.parse("final_jpeg.quality")?;
            if !(1..=100).contains(&quality) {
                return Err(Error::Format("jpeg quality out of range".into()));
            }
            Some(NoiseSpec::Jpeg { quality })
        }
        other => {
            return Err(Error::Format(format!("final_jpeg.enabled must be 0/1, got {other}")));
        }
    };

    Ok(DegradationPlan {
        stage1: parse_stage("stage1")?,
        stage2: parse_stage("stage2")?,
        final_jpeg,
        original_size,
        wide_range: fields.parse::<u8>("wide_range")? != 0,
        noise_seed: fields.parse("noise_seed")?,
        noise_stream: fields.parse("noise_stream")?,
    })
}
