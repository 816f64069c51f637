//! RGB image container and PNG/JPEG disk I/O.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

pub const MIN_IMAGE_SIDE: usize = 16;

/// An RGB image with values in `[0, 1]`, stored channel-first `(3, H, W)`.
#[derive(Clone, Debug)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Validates the container invariants: 3 channels, finite values in
    /// `[0, 1]`, both sides at least [`MIN_IMAGE_SIDE`].
    pub fn new(data: Array3<f64>) -> Result<Image> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::shape("Image::new", "(3,H,W)", format!("({c},{h},{w})")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Argument(format!(
                "image sides must be at least {MIN_IMAGE_SIDE}, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Argument(
                "image values must be finite and within [0,1]".into(),
            ));
        }
        Ok(Image { data })
    }

    /// Clamps out-of-range values instead of rejecting them.
    pub fn from_clamped(data: Array3<f64>) -> Result<Image> {
        Image::new(data.mapv(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
            }
        }
        Image::new(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (_, h, w) = self.data.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = self.data[(c, y as usize, x as usize)].clamp(0.0, 1.0);
                px.0[c] = (v * 255.0).round() as u8;
            }
        }
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Peak signal-to-noise ratio in dB between two equally sized images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.dim(), b.data.dim(), "psnr: size mismatch");
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_small() {
        let bad = Array3::from_elem((3, 16, 16), 1.5);
        assert!(Image::new(bad.clone()).is_err());
        assert!(Image::from_clamped(bad).is_ok());
        let small = Array3::from_elem((3, 8, 8), 0.5);
        assert!(Image::new(small).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data = Array3::from_shape_fn((3, 17, 23), |(c, y, x)| {
            ((c * 37 + y * 5 + x * 11) % 256) as f64 / 255.0
        });
        let img = Image::new(data).unwrap();
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = Image::new(Array3::from_elem((3, 16, 16), 0.25)).unwrap();
        assert!(psnr(&img, &img).is_infinite());
    }
}
