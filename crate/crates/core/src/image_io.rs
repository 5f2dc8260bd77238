//! 8-bit RGB crop storage and conversion to `[1, 3, h, w]` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::RgbImage;
use ppfer_nn::{Scalar, Tensor};

use crate::error::{io_err, PpError, Result};

/// Crops live under one root directory and are addressed by relative `crop_ref` keys.
#[derive(Clone, Debug)]
pub struct CropStore {
    root: PathBuf,
}

impl CropStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, crop_ref: &str) -> PathBuf {
        self.root.join(crop_ref)
    }

    pub fn read(&self, crop_ref: &str) -> Result<RgbImage> {
        let path = self.path_of(crop_ref);
        let img = image::open(&path).map_err(|e| PpError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(img.to_rgb8())
    }

    pub fn write(&self, crop_ref: &str, img: &RgbImage) -> Result<()> {
        let path = self.path_of(crop_ref);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| PpError::Image {
                path,
                message: e.to_string(),
            })
    }

    pub fn read_tensor<T: Scalar>(&self, crop_ref: &str) -> Result<Tensor<T>> {
        Ok(image_to_tensor(&self.read(crop_ref)?))
    }
}

pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    let inv = T::one() / T::of(255.0);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::of(f64::from(px[c])) * inv;
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data).expect("image tensor shape")
}

/// Quantizes item 0 of a `[n, 3, h, w]` tensor back to 8-bit (clamped, rounded).
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> RgbImage {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = d[(c * h + y as usize) * w + x as usize].as_f64();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Channel-major planes `[3 * h * w]` of an 8-bit image as scalars on the 0..=255 scale.
pub fn image_planes<T: Scalar>(img: &RgbImage) -> Vec<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * h + y as usize) * w + x as usize] = T::of(f64::from(px[c]));
        }
    }
    out
}
