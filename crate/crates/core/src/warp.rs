//! Raster image warping by inverse mapping with bilinear interpolation.
//!
//! Pixel `(row i, col j)` sits at normalized coordinate
//! `((j + 0.5) / W * 2 - 1, (i + 0.5) / H * 2 - 1)`, matching the centered
//! convention of the transformation algebra. Source taps outside the image
//! contribute the fill value 0.

use thiserror::Error;

use crate::xform::{invert, Homography, XformError};

#[derive(Debug, Error, PartialEq)]
pub enum WarpError {
    #[error(transparent)]
    Singular(#[from] XformError),
    #[error("batch length mismatch: {images} images vs {transforms} transforms")]
    LengthMismatch { images: usize, transforms: usize },
}

/// Channel-major raster image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty image");
        Self {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn from_pixels(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), channels * height * width, "pixel count");
        Self {
            channels,
            height,
            width,
            pixels,
        }
    }

    /// Builds an image by evaluating `f(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(channels, height, width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    let v = f(c, i, j);
                    img.pixels[(c * height + i) * width + j] = v;
                }
            }
        }
        img
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.pixels[(c * self.height + i) * self.width + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        self.pixels[(c * self.height + i) * self.width + j] = v;
    }

    /// Normalized coordinate of the center of pixel `(row, col)`.
    pub fn pixel_to_norm(&self, row: f64, col: f64) -> [f64; 2] {
        [
            (col + 0.5) / self.width as f64 * 2.0 - 1.0,
            (row + 0.5) / self.height as f64 * 2.0 - 1.0,
        ]
    }

    /// Fractional pixel position of a normalized coordinate.
    pub fn norm_to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[1] + 1.0) * 0.5 * self.height as f64 - 0.5,
            (p[0] + 1.0) * 0.5 * self.width as f64 - 0.5,
        ]
    }
}

fn is_identity(h: &Homography) -> bool {
    h.matrix() == Homography::identity().matrix()
}

/// Bilinear tap with zero fill outside the source.
fn sample_bilinear(img: &Image, c: usize, row: f64, col: f64) -> f64 {
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let r0 = r0 as isize;
    let c0 = c0 as isize;
    let tap = |r: isize, ccol: isize| -> f64 {
        if r < 0 || ccol < 0 || r >= img.height as isize || ccol >= img.width as isize {
            0.0
        } else {
            img.get(c, r as usize, ccol as usize)
        }
    };
    let top = (1.0 - fc) * tap(r0, c0) + fc * tap(r0, c0 + 1);
    let bot = (1.0 - fc) * tap(r0 + 1, c0) + fc * tap(r0 + 1, c0 + 1);
    (1.0 - fr) * top + fr * bot
}

/// Warps an image by `h`: each output pixel samples the input at the
/// pre-image of its own coordinate. Output dimensions equal input
/// dimensions. An exact identity homography returns a bit-identical copy.
pub fn warp_image(img: &Image, h: &Homography) -> Result<Image, WarpError> {
    if is_identity(h) {
        return Ok(img.clone());
    }
    let hinv = invert(h)?;
    let m = hinv.matrix();
    let mut out = Image::new(img.channels, img.height, img.width);
    for i in 0..img.height {
        for j in 0..img.width {
            let p = img.pixel_to_norm(i as f64, j as f64);
            let z = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
            if z.abs() < crate::xform::DEPTH_EPS {
                // Pre-image at infinity: outside any finite source, filled 0.
                continue;
            }
            let q = [
                (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / z,
                (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / z,
            ];
            let [row, col] = img.norm_to_pixel(q);
            for c in 0..img.channels {
                let v = sample_bilinear(img, c, row, col);
                out.set(c, i, j, v);
            }
        }
    }
    Ok(out)
}

/// Elementwise [`warp_image`] over equal-length slices, order preserved.
pub fn warp_batch(imgs: &[Image], hs: &[Homography]) -> Result<Vec<Image>, WarpError> {
    if imgs.len() != hs.len() {
        return Err(WarpError::LengthMismatch {
            images: imgs.len(),
            transforms: hs.len(),
        });
    }
    imgs.iter()
        .zip(hs)
        .map(|(img, h)| warp_image(img, h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xform::{
        compose, sample_projective, to_target_vector, Family, Homography, XformConfig,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(channels: usize, size: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(channels, size, size, |_, _, _| rng.gen_range(0.0..1.0))
    }

    /// Straightforward reference warp used as an oracle: independent loop
    /// structure and tap arithmetic.
    fn reference_warp(img: &Image, h: &Homography) -> Image {
        let hinv = invert(h).unwrap();
        let mut out = Image::new(img.channels(), img.height(), img.width());
        for c in 0..img.channels() {
            for i in 0..img.height() {
                for j in 0..img.width() {
                    let p = img.pixel_to_norm(i as f64, j as f64);
                    let q = match crate::xform::apply_point(&hinv, p) {
                        Ok(q) => q,
                        Err(_) => continue,
                    };
                    let [row, col] = img.norm_to_pixel(q);
                    let (r0, c0) = (row.floor(), col.floor());
                    let (fr, fc) = (row - r0, col - c0);
                    let mut acc = 0.0;
                    for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
                        for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
                            let rr = r0 + dr;
                            let cc = c0 + dc;
                            let v = if rr < 0.0
                                || cc < 0.0
                                || rr >= img.height() as f64
                                || cc >= img.width() as f64
                            {
                                0.0
                            } else {
                                img.get(c, rr as usize, cc as usize)
                            };
                            acc += wr * wc * v;
                        }
                    }
                    out.set(c, i, j, acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let img = noise_image(3, 17, 4);
        let out = warp_image(&img, &Homography::identity()).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn integer_pixel_translation_shifts_exactly() {
        let size = 32usize;
        let img = Image::from_fn(1, size, size, |_, _, _| 0.5);
        // +2 pixels along x is 4/size normalized units.
        let h = Homography::translation(4.0 / size as f64, 0.0);
        let out = warp_image(&img, &h).unwrap();
        for i in 0..size {
            for j in 0..size {
                let expected = if j < 2 { 0.0 } else { 0.5 };
                assert_eq!(out.get(0, i, j), expected, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn warp_round_trip_on_linear_gradient() {
        let size = 32usize;
        let img = Image::from_fn(1, size, size, |_, i, j| {
            0.25 + 0.2 * (j as f64 / size as f64) + 0.3 * (i as f64 / size as f64)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = XformConfig::projective_default();
        for _ in 0..20 {
            let h = sample_projective(&mut rng, &cfg).unwrap().homography;
            let back = warp_image(&warp_image(&img, &h).unwrap(), &invert(&h).unwrap()).unwrap();
            let mut worst = 0.0f64;
            for i in size / 4..3 * size / 4 {
                for j in size / 4..3 * size / 4 {
                    worst = worst.max((back.get(0, i, j) - img.get(0, i, j)).abs());
                }
            }
            assert!(worst < 0.02, "round-trip error {worst}");
        }
    }

    #[test]
    fn warp_matches_reference_oracle() {
        let img = noise_image(2, 15, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = XformConfig::projective_default();
        for _ in 0..5 {
            let h = sample_projective(&mut rng, &cfg).unwrap().homography;
            let fast = warp_image(&img, &h).unwrap();
            let slow = reference_warp(&img, &h);
            for (a, b) in fast.pixels().iter().zip(slow.pixels()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_output_stays_in_unit_interval() {
        let img = noise_image(1, 19, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = XformConfig::affine_default();
        for _ in 0..10 {
            let h = crate::xform::sample_affine(&mut rng, &cfg).homography;
            let out = warp_image(&img, &h).unwrap();
            for &v in out.pixels() {
                assert!((0.0..=1.0).contains(&v), "value {v} outside [0,1]");
            }
        }
    }

    #[test]
    fn warp_batch_matches_looped_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = XformConfig::projective_default();
        let imgs: Vec<Image> = (0..4).map(|k| noise_image(3, 12, 12 + k)).collect();
        let hs: Vec<Homography> = (0..4)
            .map(|_| sample_projective(&mut rng, &cfg).unwrap().homography)
            .collect();
        let batch = warp_batch(&imgs, &hs).unwrap();
        for ((img, h), got) in imgs.iter().zip(&hs).zip(&batch) {
            assert_eq!(warp_image(img, h).unwrap(), *got);
        }
    }

    #[test]
    fn warp_batch_empty_and_identity() {
        assert_eq!(warp_batch(&[], &[]).unwrap(), Vec::<Image>::new());
        let imgs: Vec<Image> = (0..3).map(|k| noise_image(1, 9, 100 + k)).collect();
        let hs = vec![Homography::identity(); 3];
        assert_eq!(warp_batch(&imgs, &hs).unwrap(), imgs);
    }

    #[test]
    fn warp_batch_rejects_length_mismatch() {
        let imgs = vec![noise_image(1, 8, 1)];
        let hs = vec![Homography::identity(); 2];
        assert!(matches!(
            warp_batch(&imgs, &hs),
            Err(WarpError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn image_space_loss_zero_for_equal_transforms() {
        let imgs: Vec<Image> = (0..3).map(|k| noise_image(1, 10, 30 + k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = XformConfig::projective_default();
        let h = sample_projective(&mut rng, &cfg).unwrap().homography;
        assert_eq!(crate::xform::image_space_loss(&h, &h, &imgs).unwrap(), 0.0);
        let id = Homography::identity();
        assert_eq!(crate::xform::image_space_loss(&id, &id, &imgs).unwrap(), 0.0);
    }

    #[test]
    fn image_space_loss_matches_pixel_difference_oracle() {
        let size = 16usize;
        let img = Image::from_fn(1, size, size, |_, _, _| 1.0);
        let id = Homography::identity();
        // +4 pixels along x.
        let t_hat = Homography::translation(8.0 / size as f64, 0.0);
        let loss = crate::xform::image_space_loss(&id, &t_hat, &[img.clone()]).unwrap();
        let a = warp_image(&img, &id).unwrap();
        let b = warp_image(&img, &t_hat).unwrap();
        let mut acc = 0.0;
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            acc += (x - y) * (x - y);
        }
        let expected = acc / (size * size) as f64;
        assert!((loss - expected).abs() < 1e-15);
        // The entering band is 4 columns of difference 1 against a constant
        // interior: the mean squared error is exactly 4/size.
        assert!((loss - 4.0 / size as f64).abs() < 1e-12);
    }

    #[test]
    fn image_space_loss_rejects_empty_sample_set() {
        let id = Homography::identity();
        assert!(matches!(
            crate::xform::image_space_loss(&id, &id, &[]),
            Err(XformError::EmptySampleSet)
        ));
    }

    #[test]
    fn target_vectors_of_sample_and_warp_are_consistent() {
        // A sampled transform warps pixels with the same matrix its target
        // vector describes.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let cfg = XformConfig::identity_only(Family::Projective);
        let s = cfg.sample(&mut rng).unwrap();
        assert_eq!(
            to_target_vector(&s.homography).unwrap(),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        let round = compose(&s.homography, &invert(&s.homography).unwrap()).unwrap();
        assert_eq!(round, Homography::identity());
    }
}
