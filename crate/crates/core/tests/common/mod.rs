#![allow(dead_code)]

use image::RgbImage;
use ppfer_core::data_model::{DatasetManifest, FaceRecord, Variant};

/// Byte stream of a 64-bit LCG; each step yields the top byte.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn byte(&mut self) -> u8 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 56) as u8
    }
}

/// Pair `i` of the frozen SSIM reference set: a random image and a blend of
/// it with a second random image, the blend weight growing with `i`.
pub fn ssim_pair(i: usize) -> (RgbImage, RgbImage) {
    let (h, w) = (11 + i % 10, 12 + (i * 3) % 13);
    let n = h * w * 3;
    let mut lcg = Lcg(i as u64 + 1);
    let a: Vec<u8> = (0..n).map(|_| lcg.byte()).collect();
    let r: Vec<u8> = (0..n).map(|_| lcg.byte()).collect();
    let b: Vec<u8> = a
        .iter()
        .zip(&r)
        .map(|(&a, &r)| ((a as usize * (49 - i) + r as usize * i + 24) / 49) as u8)
        .collect();
    (
        RgbImage::from_raw(w as u32, h as u32, a).unwrap(),
        RgbImage::from_raw(w as u32, h as u32, b).unwrap(),
    )
}

/// `(index, height, width, ssim)` rows computed with scikit-image
/// (gaussian weights, sigma 1.5, population covariance, data range 255).
pub fn ssim_reference() -> Vec<(usize, u32, u32, f64)> {
    include_str!("../data/ssim_reference.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}

/// Direct sliding-window SSIM: every 11x11 window fully inside the image,
/// weights from a separable Gaussian with sigma 1.5, averaged over channels.
pub fn naive_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    let g: Vec<f64> = (0..11).map(|k| (-((k as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let (w, h) = (a.width() as usize, a.height() as usize);
    let mut per_channel = 0.0;
    for c in 0..3 {
        let (mut total, mut count) = (0.0, 0usize);
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j] / (gs * gs);
                        let pa = a.get_pixel((x0 + j) as u32, (y0 + i) as u32)[c] as f64;
                        let pb = b.get_pixel((x0 + j) as u32, (y0 + i) as u32)[c] as f64;
                        ma += wt * pa;
                        mb += wt * pb;
                        saa += wt * pa * pa;
                        sbb += wt * pb * pb;
                        sab += wt * pa * pb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_channel += total / count as f64;
    }
    per_channel / 3.0
}

pub fn record(video: usize, frame: u64, track: u64, variant: Variant) -> FaceRecord {
    FaceRecord {
        video_id: format!("v{video}"),
        frame_index: frame,
        track_id: track,
        bbox: [0.0, 0.0, 8.0, 8.0],
        expression: Some("happy".into()),
        crop_ref: format!("{variant}/v{video}/f{frame}_{track}.png"),
        variant,
    }
}

/// Original manifest from `layout[video][track] = crops in that track`,
/// plus the four derived variants holding the same faces.
pub fn manifests_from_layout(layout: &[Vec<usize>]) -> Vec<DatasetManifest> {
    let variants = [
        Variant::Original,
        Variant::Pp,
        Variant::Dpp,
        Variant::PpRecovered,
        Variant::DppRecovered,
    ];
    variants
        .iter()
        .map(|&v| {
            let mut records = Vec::new();
            for (vid, tracks) in layout.iter().enumerate() {
                for (t, &crops) in tracks.iter().enumerate() {
                    for f in 0..crops {
                        records.push(record(vid, f as u64, t as u64, v));
                    }
                }
            }
            DatasetManifest::new(v, records).unwrap()
        })
        .collect()
}
