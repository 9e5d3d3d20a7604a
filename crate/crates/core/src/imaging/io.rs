//! 8-bit PNG load/save.
//!
//! PNG is the only raster interchange format here. Pixels encode as
//! `round(p * 255)`, so a save/load round trip is lossless up to half a
//! quantization step and `save ∘ load ∘ save` is byte-identical.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use super::Image;
use crate::error::{Error, Result};

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let w = img.width as u32;
    let h = img.height as u32;
    let quantize = |p: f32| (p * 255.0).round().clamp(0.0, 255.0) as u8;
    let result = match img.channels {
        1 => {
            let buf: Vec<u8> = img.pixels.iter().map(|&p| quantize(p)).collect();
            let gray = image::GrayImage::from_raw(w, h, buf).expect("sized buffer");
            gray.save_with_format(path, ImageFormat::Png)
        }
        3 => {
            let buf: Vec<u8> = img.pixels.iter().map(|&p| quantize(p)).collect();
            let rgb = image::RgbImage::from_raw(w, h, buf).expect("sized buffer");
            rgb.save_with_format(path, ImageFormat::Png)
        }
        _ => unreachable!("Image invariant: channels is 1 or 3"),
    };
    result.map_err(|e| Error::Format(format!("png encode of {}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "unsupported format {other:?} for {} (only PNG is read)",
                path.display()
            )))
        }
        None => {
            return Err(Error::Format(format!(
                "unrecognized image format for {}",
                path.display()
            )))
        }
    }
    let decoded = reader
        .decode()
        .map_err(|e| Error::Format(format!("png decode of {}: {e}", path.display())))?;
    decode_to_image(decoded)
}

/// Decode PNG bytes already in memory (shared by the fuzz harness).
pub fn load_image_from_bytes(bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png decode: {e}")))?;
    decode_to_image(decoded)
}

fn decode_to_image(decoded: DynamicImage) -> Result<Image> {
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format("png with a zero dimension".into()));
    }
    match decoded {
        DynamicImage::ImageLuma8(gray) => {
            let pixels = gray.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Image::from_pixels(h, w, 1, pixels)
        }
        other => {
            let rgb = other.into_rgb8();
            let pixels = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Image::from_pixels(h, w, 3, pixels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DetRng;

    #[test]
    fn black_image_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        let img = Image::new(8, 8, 3);
        save_image(&img, &p1).unwrap();
        let loaded = load_image(&p1).unwrap();
        save_image(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn endpoints_quantize_to_0_and_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.png");
        let mut img = Image::new(1, 2, 1);
        img.set(0, 0, 0, 0.0);
        img.set(0, 1, 0, 1.0);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.get(0, 0, 0), 0.0);
        assert_eq!(back.get(0, 1, 0), 1.0);
    }

    #[test]
    fn random_round_trip_error_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.png");
        let mut rng = DetRng::new(3, 0);
        let mut img = Image::new(16, 16, 3);
        for px in &mut img.pixels {
            *px = rng.uniform() as f32;
        }
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let max_err = img
            .pixels
            .iter()
            .zip(&back.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 510.0 + 1e-6, "max err {max_err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn non_png_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, b"not a png at all").unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn fuzz_entry_point_never_panics_on_garbage() {
        for junk in [&b""[..], b"\x89PNG\r\n\x1a\n", b"\x89PNG\r\n\x1a\nxxxxxxx"] {
            let _ = load_image_from_bytes(junk);
        }
    }
}
