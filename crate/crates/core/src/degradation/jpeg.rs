//! JPEG compression loss, simulated in the transform domain.
//!
//! The lossy part of JPEG is block DCT quantization; entropy coding is
//! lossless and therefore omitted. Pipeline: BT.601 full-range YCbCr, 8x8
//! DCT-II per channel, quantize/dequantize with the standard luma/chroma
//! tables scaled by the libjpeg quality law, inverse DCT, color convert
//! back, clamp. No chroma subsampling. Planes enter the DCT uncentered
//! (luma as-is, chroma signed), so an all-zero image has all-zero
//! coefficients and survives exactly; byte parity with any particular codec
//! is a non-goal.

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Standard luminance quantization table (quality 50 base), row-major
/// vertical-then-horizontal frequency.
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance quantization table.
const CHROMA_QUANT: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// libjpeg quality law: percent scaling of the base tables, each entry
/// clamped into [1, 255].
fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as i64;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0f64; 64];
    for (i, &b) in base.iter().enumerate() {
        let v = (b as i64 * scale + 50) / 100;
        out[i] = v.clamp(1, 255) as f64;
    }
    out
}

/// Apply JPEG quantization loss at the given quality (1-100).
pub fn jpeg_artifacts(image: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::contract(format!(
            "jpeg quality must be in [1,100], got {quality}"
        )));
    }
    let luma_tbl = scaled_table(&LUMA_QUANT, quality);
    let chroma_tbl = scaled_table(&CHROMA_QUANT, quality);
    let (h, w) = (image.height, image.width);

    // planar YCbCr in the 0-255 domain; chroma kept signed around zero
    let mut planes: Vec<Vec<f64>> = match image.channels {
        1 => vec![image.pixels.iter().map(|&p| p as f64 * 255.0).collect()],
        3 => {
            let mut y = vec![0.0; h * w];
            let mut cb = vec![0.0; h * w];
            let mut cr = vec![0.0; h * w];
            for i in 0..h * w {
                let r = image.pixels[i * 3] as f64 * 255.0;
                let g = image.pixels[i * 3 + 1] as f64 * 255.0;
                let b = image.pixels[i * 3 + 2] as f64 * 255.0;
                y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
                cb[i] = -0.168736 * r - 0.331264 * g + 0.5 * b;
                cr[i] = 0.5 * r - 0.418688 * g - 0.081312 * b;
            }
            vec![y, cb, cr]
        }
        _ => unreachable!("Image invariant: channels is 1 or 3"),
    };

    for (ci, plane) in planes.iter_mut().enumerate() {
        let tbl = if ci == 0 { &luma_tbl } else { &chroma_tbl };
        let range = if ci == 0 { (0.0, 255.0) } else { (-128.0, 127.0) };
        quantize_plane(plane, h, w, tbl, range);
    }

    let pixels: Vec<f32> = match image.channels {
        1 => planes[0].iter().map(|&v| (v / 255.0) as f32).collect(),
        _ => {
            let mut px = vec![0.0f32; h * w * 3];
            for i in 0..h * w {
                let y = planes[0][i];
                let cb = planes[1][i];
                let cr = planes[2][i];
                px[i * 3] = ((y + 1.402 * cr) / 255.0) as f32;
                px[i * 3 + 1] = ((y - 0.344136 * cb - 0.714136 * cr) / 255.0) as f32;
                px[i * 3 + 2] = ((y + 1.772 * cb) / 255.0) as f32;
            }
            px
        }
    };
    Image::from_pixels(h, w, image.channels, pixels)
}

/// DCT -> quantize -> dequantize -> IDCT for every (edge-replicated) 8x8
/// block of one plane, in place.
fn quantize_plane(plane: &mut [f64], h: usize, w: usize, tbl: &[f64; 64], range: (f64, f64)) {
    let cos = cosine_table();
    let mut block = [0.0f64; 64];
    let mut coefs = [0.0f64; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                let sy = (by + y).min(h - 1);
                for x in 0..8 {
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx];
                }
            }
            forward_dct(&block, &mut coefs, &cos);
            for i in 0..64 {
                coefs[i] = (coefs[i] / tbl[i]).round() * tbl[i];
            }
            inverse_dct(&coefs, &mut block, &cos);
            for y in 0..8 {
                if by + y >= h {
                    break;
                }
                for x in 0..8 {
                    if bx + x >= w {
                        break;
                    }
                    plane[(by + y) * w + bx + x] = block[y * 8 + x].clamp(range.0, range.1);
                }
            }
        }
    }
}

/// `cos[(2x+1) u pi / 16]` for x, u in 0..8.
fn cosine_table() -> [[f64; 8]; 8] {
    let mut t = [[0.0f64; 8]; 8];
    for x in 0..8 {
        for u in 0..8 {
            t[x][u] = ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    t
}

fn norm(u: usize) -> f64 {
    if u == 0 {
        std::f64::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

/// `F[v,u] = C(u) C(v) / 4 * sum f[y,x] cos_x cos_y`.
fn forward_dct(block: &[f64; 64], out: &mut [f64; 64], cos: &[[f64; 8]; 8]) {
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += block[y * 8 + x] * cos[x][u] * cos[y][v];
                }
            }
            out[v * 8 + u] = 0.25 * norm(u) * norm(v) * acc;
        }
    }
}

fn inverse_dct(coefs: &[f64; 64], out: &mut [f64; 64], cos: &[[f64; 8]; 8]) {
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                for u in 0..8 {
                    acc += norm(u) * norm(v) * coefs[v * 8 + u] * cos[x][u] * cos[y][v];
                }
            }
            out[y * 8 + x] = 0.25 * acc;
        }
    }
}
