//! Image file output: binary PPM (P6) always, PNG when the `png` feature is
//! compiled in.

use std::path::Path;

use anyhow::{bail, Result};

use aet_core::warp::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl std::str::FromStr for ImageFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ppm" => Ok(Self::Ppm),
            "png" => Ok(Self::Png),
            other => Err(format!("unknown image format {other:?} (ppm or png)")),
        }
    }
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Ppm => "ppm",
            Self::Png => "png",
        }
    }
}

/// Interleaved 8-bit RGB rows; single-channel images replicate to gray.
fn to_rgb8(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let src = if img.channels() >= 3 { c } else { 0 };
                let v = img.get(src, i, j).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    let rgb = to_rgb8(img);
    match format {
        ImageFormat::Ppm => {
            let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
            let mut bytes = header.into_bytes();
            bytes.extend_from_slice(&rgb);
            std::fs::write(path, bytes)?;
            Ok(())
        }
        ImageFormat::Png => write_png(&rgb, img.width() as u32, img.height() as u32, path),
    }
}

#[cfg(feature = "png")]
fn write_png(rgb: &[u8], width: u32, height: u32, path: &Path) -> Result<()> {
    let buf: image::RgbImage = image::ImageBuffer::from_raw(width, height, rgb.to_vec())
        .expect("buffer sized from image dims");
    buf.save(path)?;
    Ok(())
}

#[cfg(not(feature = "png"))]
fn write_png(_rgb: &[u8], _width: u32, _height: u32, _path: &Path) -> Result<()> {
    bail!("png output requires building with --features png; ppm is always available")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_has_p6_header_and_payload() {
        let img = Image::from_fn(1, 2, 3, |_, i, j| (i + j) as f64 / 4.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_image(&img, &path, ImageFormat::Ppm).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P6\n3 2\n255\n".len() + 3 * 2 * 3);
    }
}
