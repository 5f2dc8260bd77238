mod common;

use image::{Rgb, RgbImage};
use ppfer_core::data_model::EmbeddingVector;
use ppfer_core::privacy_validation::metrics::{psnr_planes, ssim_planes, ssim_with_grad};
use ppfer_core::privacy_validation::{gaussian_blur, gaussian_kernel, ied, psnr, ssim};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

#[test]
fn ssim_of_identical_images_is_one() {
    let a = random_image(1, 16, 16);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
}

#[test]
fn ssim_matches_reference_values() {
    let reference = common::ssim_reference();
    assert_eq!(reference.len(), 50);
    for (i, h, w, want) in reference {
        let (a, b) = common::ssim_pair(i);
        assert_eq!((a.height(), a.width()), (h, w));
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-4, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ssim_matches_direct_window_evaluation() {
    for i in [3, 17, 30, 44] {
        let (a, b) = common::ssim_pair(i);
        let got = ssim(&a, &b).unwrap();
        let want = common::naive_ssim(&a, &b);
        assert!((got - want).abs() < 1e-9, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = (3, 12, 13);
    let n = 3 * 12 * 13;
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (s, g) = ssim_with_grad(&a, &b, dims, 1.0).unwrap();
    assert!((s - ssim_planes(&a, &b, dims, 1.0).unwrap()).abs() < 1e-12);
    let h = 1e-6;
    for i in (0..n).step_by(17) {
        let (mut up, mut down) = (a.clone(), a.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (ssim_planes(&up, &b, dims, 1.0).unwrap() - ssim_planes(&down, &b, dims, 1.0).unwrap()) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0), "index {i}: {fd} vs {}", g[i]);
    }
}

#[test]
fn ssim_rejects_small_or_mismatched_images() {
    let a = random_image(1, 10, 16);
    assert!(ssim(&a, &a).is_err());
    let b = random_image(2, 16, 16);
    let c = random_image(3, 16, 17);
    assert!(ssim(&b, &c).is_err());
}

#[test]
fn psnr_of_uniform_shift() {
    let a = random_image(5, 20, 20);
    let a = RgbImage::from_fn(20, 20, |x, y| {
        let p = a.get_pixel(x, y);
        Rgb([p[0] / 2, p[1] / 2, p[2] / 2])
    });
    let b = RgbImage::from_fn(20, 20, |x, y| {
        let p = a.get_pixel(x, y);
        Rgb([p[0] + 16, p[1] + 16, p[2] + 16])
    });
    // 10 log10(255^2 / 16^2)
    let want = 20.0 * (255.0f64 / 16.0).log10();
    let got = psnr(&a, &b).unwrap();
    assert!((got - 24.0483).abs() < 1e-3);
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn psnr_of_identical_images_is_infinite() {
    let a = random_image(8, 12, 12);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    assert_eq!(psnr_planes(&[0.5, 0.25], &[0.5, 0.25], 1.0).unwrap(), f64::INFINITY);
}

#[test]
fn ied_is_euclidean_distance() {
    let a = EmbeddingVector::new(vec![1.0f64, 0.0, 0.0]).unwrap();
    let b = EmbeddingVector::new(vec![0.0f64, 1.0, 0.0]).unwrap();
    assert!((ied(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(ied(&a, &a).unwrap(), 0.0);
    let c = EmbeddingVector::new(vec![1.0f64, 0.0]).unwrap();
    assert!(ied(&a, &c).is_err());
}

#[test]
fn blur_kernel_shape() {
    let (r, k) = gaussian_kernel(0.4).unwrap();
    assert_eq!(r, 2);
    assert_eq!(k.len(), 25);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // Separable: every entry is the product of its row and column marginals.
    let m: Vec<f64> = (0..5).map(|i| k[i * 5..i * 5 + 5].iter().sum()).collect();
    for i in 0..5 {
        for j in 0..5 {
            assert!((k[i * 5 + j] - m[i] * m[j]).abs() < 1e-12);
        }
    }
    assert!(m[2] > m[1] && m[1] > m[0]);
    let (r, _) = gaussian_kernel(0.2).unwrap();
    assert_eq!(r, 1);
    assert!(gaussian_kernel(0.0).is_err());
}

#[test]
fn blur_keeps_constant_images() {
    let a = RgbImage::from_pixel(9, 7, Rgb([10, 200, 77]));
    assert_eq!(gaussian_blur(&a, 1.3).unwrap(), a);
}

#[test]
fn blur_lowers_similarity_monotonically() {
    let a = random_image(21, 24, 24);
    let s1 = ssim(&a, &gaussian_blur(&a, 0.4).unwrap()).unwrap();
    let s2 = ssim(&a, &gaussian_blur(&a, 1.5).unwrap()).unwrap();
    assert!(s1 < 1.0 && s2 < s1);
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_image(s1, 13, 11);
        let b = random_image(s2, 13, 11);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn psnr_is_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = random_image(s1, 6, 5);
        let b = random_image(s2, 6, 5);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
