//! Image similarity metrics and the Gaussian blur baseline.

use image::RgbImage;
use ppfer_nn::Scalar;

use crate::data_model::EmbeddingVector;
use crate::error::{PpError, Result};
use crate::image_io::image_planes;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WIN: usize = 11;

/// Normalized 1-d Gaussian taps of the SSIM window.
pub fn ssim_taps<T: Scalar>() -> Vec<T> {
    let r = (SSIM_WIN / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WIN)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::of(v / s)).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid<T: Scalar>(img: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).fold(T::zero(), |s, i| s + k[i] * img[y * w + x + i]);
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).fold(T::zero(), |s, i| s + k[i] * rows[(y + i) * ow + x]);
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-size map back to `h x w`.
fn filter_valid_adjoint<T: Scalar>(map: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..n {
                rows[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn check_dims(len_a: usize, len_b: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if len_a != len_b || len_a != c * h * w {
        return Err(PpError::Domain(format!(
            "image shapes differ or do not match {c}x{h}x{w}"
        )));
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(PpError::Domain(format!("images must be at least {SSIM_WIN} pixels per side")));
    }
    Ok(())
}

/// Mean SSIM over channels of channel-major planes, and its gradient w.r.t. `a`.
pub fn ssim_with_grad<T: Scalar>(
    a: &[T],
    b: &[T],
    (c, h, w): (usize, usize, usize),
    data_range: T,
) -> Result<(T, Vec<T>)> {
    check_dims(a.len(), b.len(), c, h, w)?;
    let k = ssim_taps::<T>();
    let c1 = (T::of(SSIM_K1) * data_range).powi(2);
    let c2 = (T::of(SSIM_K2) * data_range).powi(2);
    let two = T::of(2.0);
    let (oh, ow) = (h + 1 - SSIM_WIN, w + 1 - SSIM_WIN);
    let scale = T::one() / T::of((c * oh * ow) as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); a.len()];
    for ch in 0..c {
        let x = &a[ch * h * w..(ch + 1) * h * w];
        let y = &b[ch * h * w..(ch + 1) * h * w];
        let xx: Vec<T> = x.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = x.iter().zip(y).map(|(&p, &q)| p * q).collect();
        let (mx, my) = (filter_valid(x, h, w, &k), filter_valid(y, h, w, &k));
        let (exx, eyy, exy) = (
            filter_valid(&xx, h, w, &k),
            filter_valid(&yy, h, w, &k),
            filter_valid(&xy, h, w, &k),
        );
        let m = oh * ow;
        let (mut da, mut db, mut dc) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
        for p in 0..m {
            let sxx = exx[p] - mx[p] * mx[p];
            let syy = eyy[p] - my[p] * my[p];
            let sxy = exy[p] - mx[p] * my[p];
            let a1 = two * mx[p] * my[p] + c1;
            let a2 = two * sxy + c2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + c1;
            let b2 = sxx + syy + c2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            total += s;
            // Partials w.r.t. the raw moments mu_x, E[x^2] and E[xy].
            let dn_dmu = two * my[p] * a2 - two * my[p] * a1;
            let dd_dmu = two * mx[p] * b2 - two * mx[p] * b1;
            da[p] = (dn_dmu - s * dd_dmu) / d * scale;
            db[p] = -s / b2 * scale;
            dc[p] = two * a1 / d * scale;
        }
        let (ga, gb, gc) = (
            filter_valid_adjoint(&da, h, w, &k),
            filter_valid_adjoint(&db, h, w, &k),
            filter_valid_adjoint(&dc, h, w, &k),
        );
        let g = &mut grad[ch * h * w..(ch + 1) * h * w];
        for q in 0..h * w {
            g[q] = ga[q] + two * x[q] * gb[q] + y[q] * gc[q];
        }
    }
    Ok((total * scale, grad))
}

pub fn ssim_planes<T: Scalar>(a: &[T], b: &[T], dims: (usize, usize, usize), data_range: T) -> Result<T> {
    Ok(ssim_with_grad(a, b, dims, data_range)?.0)
}

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<(usize, usize, usize)> {
    if a.dimensions() != b.dimensions() {
        return Err(PpError::Domain(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok((3, a.height() as usize, a.width() as usize))
}

/// SSIM of two 8-bit images, Gaussian-weighted and averaged over channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let dims = same_size(a, b)?;
    ssim_planes(&image_planes::<f64>(a), &image_planes::<f64>(b), dims, 255.0)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical inputs.
pub fn psnr_planes(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PpError::Domain("image shapes differ".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b)?;
    psnr_planes(&image_planes(a), &image_planes(b), 255.0)
}

/// Euclidean distance between two embeddings of one sample.
pub fn ied<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(PpError::Domain(format!("embedding dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Discretized, renormalized 2-d Gaussian of radius `max(1, ceil(3 sigma))`,
/// returned row-major with its radius.
pub fn gaussian_kernel(sigma: f64) -> Result<(usize, Vec<f64>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PpError::Domain(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = ((3.0 * sigma).ceil() as usize).max(1);
    let side = 2 * r + 1;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let mut k: Vec<f64> = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64 - r as f64, (i / side) as f64 - r as f64);
            norm * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok((r, k))
}

/// Gaussian blur of channel-major planes with edge replication.
pub fn gaussian_blur_planes(planes: &[f64], (c, h, w): (usize, usize, usize), sigma: f64) -> Result<Vec<f64>> {
    if planes.len() != c * h * w {
        return Err(PpError::Domain("plane buffer does not match dimensions".into()));
    }
    let (r, k) = gaussian_kernel(sigma)?;
    let side = 2 * r + 1;
    let mut out = vec![0.0; planes.len()];
    for ch in 0..c {
        let src = &planes[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..side {
                    let sy = (y + ky).saturating_sub(r).min(h - 1);
                    for kx in 0..side {
                        let sx = (x + kx).saturating_sub(r).min(w - 1);
                        acc += k[ky * side + kx] * src[sy * w + sx];
                    }
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let blurred = gaussian_blur_planes(&image_planes(img), (3, h, w), sigma)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| blurred[(c * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    }))
}
