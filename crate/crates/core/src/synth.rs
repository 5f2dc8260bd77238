//! Parametric toy faces.
//!
//! Identity is a per-person base tone and a smooth 4x4 color
//! field; expression is the shape of mouth and eyebrows. Each frame adds a
//! small shift, brightness change, stroke intensity and pixel noise.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{
    save_detections, save_manifest, DatasetManifest, DetectionRecord, DetectionsFile, DetectionsHeader, FaceRecord,
    Variant,
};
use crate::error::{PpError, Result};
use crate::image_io::CropStore;

pub const DEFAULT_EXPRESSIONS: [&str; 3] = ["happy", "sad", "surprise"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub resolution: usize,
    pub identities: usize,
    pub expressions: Vec<String>,
    pub videos: usize,
    pub frames_per_video: usize,
    pub max_faces_per_video: usize,
    pub expression_images_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            identities: 64,
            expressions: DEFAULT_EXPRESSIONS.iter().map(|s| s.to_string()).collect(),
            videos: 30,
            frames_per_video: 6,
            max_faces_per_video: 2,
            expression_images_per_class: 30,
            noise: 0.02,
            seed: 42,
        }
    }
}

/// Appearance of one person.
#[derive(Clone, Debug)]
pub struct Identity {
    skin: [f64; 3],
    field: [[f64; 3]; 16],
}

impl Identity {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut tone = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let skin = tone(0.35, 0.65);
        let mut field = [[0.0; 3]; 16];
        for cell in field.iter_mut() {
            for v in cell.iter_mut() {
                *v = rng.gen_range(-0.35..0.35);
            }
        }
        Self {
            skin,
            field,
        }
    }

    fn field_at(&self, u: f64, v: f64) -> [f64; 3] {
        let gx = (u * 4.0 - 0.5).clamp(0.0, 3.0);
        let gy = (v * 4.0 - 0.5).clamp(0.0, 3.0);
        let (x0, y0) = ((gx.floor() as usize).min(2), (gy.floor() as usize).min(2));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let at = |x: usize, y: usize| self.field[y * 4 + x];
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = at(x0, y0)[c] * (1.0 - fx) + at(x0 + 1, y0)[c] * fx;
            let bottom = at(x0, y0 + 1)[c] * (1.0 - fx) + at(x0 + 1, y0 + 1)[c] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

/// Per-frame nuisance parameters.
#[derive(Clone, Copy, Debug)]
pub struct FrameVariation {
    pub dx: f64,
    pub dy: f64,
    pub brightness: f64,
    pub intensity: f64,
}

impl FrameVariation {
    pub fn neutral() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            brightness: 1.0,
            intensity: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            dx: f64::from(rng.gen_range(-1i32..=1)),
            dy: f64::from(rng.gen_range(-1i32..=1)),
            brightness: rng.gen_range(0.9..1.1),
            intensity: rng.gen_range(0.7..1.0),
        }
    }
}

fn parabola(u: f64, v: f64, center: f64, depth: f64) -> f64 {
    let t = (u - 0.5) / 0.18;
    if t.abs() > 1.0 {
        return f64::INFINITY;
    }
    (v - (center + depth * t * t)).abs()
}

fn segment(u: f64, v: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((u - a.0) * dx + (v - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((u - a.0 - t * dx).powi(2) + (v - a.1 - t * dy).powi(2)).sqrt()
}

/// Distance from `(u, v)` to the nearest stroke of expression `e`.
fn stroke_distance(e: usize, u: f64, v: f64) -> f64 {
    let (mouth, brows) = match e {
        0 => (
            parabola(u, v, 0.76, -0.10),
            [((0.22, 0.30), (0.42, 0.30)), ((0.58, 0.30), (0.78, 0.30))],
        ),
        1 => (
            parabola(u, v, 0.66, 0.10),
            [((0.22, 0.35), (0.42, 0.26)), ((0.58, 0.26), (0.78, 0.35))],
        ),
        _ => (
            (((u - 0.5).powi(2) + (v - 0.72).powi(2)).sqrt() - 0.09).abs(),
            [((0.22, 0.21), (0.42, 0.19)), ((0.58, 0.19), (0.78, 0.21))],
        ),
    };
    brows
        .iter()
        .map(|&(a, b)| segment(u, v, a, b))
        .fold(mouth, f64::min)
}

/// Renders one face as channel-major planes in `[0, 1]`.
pub fn render_face(
    id: &Identity,
    expression: usize,
    var: FrameVariation,
    resolution: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let r = resolution as f64;
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid sigma");
    let mut out = vec![0.0; 3 * resolution * resolution];
    for y in 0..resolution {
        for x in 0..resolution {
            let u = (x as f64 + 0.5 - var.dx) / r;
            let v = (y as f64 + 0.5 - var.dy) / r;
            let f = id.field_at(u, v);
            let mut px = [id.skin[0] + f[0], id.skin[1] + f[1], id.skin[2] + f[2]];
            let eye = [(0.33, 0.44), (0.67, 0.44)]
                .iter()
                .map(|&(cu, cv)| ((u - cu).powi(2) + (v - cv).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let d = stroke_distance(expression, u, v);
            let m_stroke = ((0.07 - d) / 0.035).clamp(0.0, 1.0) * var.intensity;
            let m_eye = ((0.07 - eye) / 0.035).clamp(0.0, 1.0);
            let dark = 1.0 - 0.5 * m_stroke.max(0.5 * m_eye);
            for (c, p) in px.iter_mut().enumerate() {
                let val = *p * dark * var.brightness + if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                out[(c * resolution + y) * resolution + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn planes_to_image(planes: &[f64], resolution: usize) -> RgbImage {
    RgbImage::from_fn(resolution as u32, resolution as u32, |x, y| {
        let at = |c: usize| {
            let v = planes[(c * resolution + y as usize) * resolution + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    })
}

/// One generated detection with its ground-truth identity.
#[derive(Clone, Debug)]
pub struct SynthFace {
    pub image: RgbImage,
    pub detection: DetectionRecord,
    pub identity: usize,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub header: DetectionsHeader,
    pub faces: Vec<SynthFace>,
    /// Labeled stills of identities that never appear in the videos.
    pub expression_set: Vec<(RgbImage, FaceRecord)>,
}

const SLOT_WIDTH: f64 = 48.0;
const FACE_SIZE: f64 = 32.0;

fn identity_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64 + 1))
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    let e = config.expressions.len();
    if !(1..=3).contains(&e) {
        return Err(PpError::Domain(format!("toy faces support 1 to 3 expressions, got {e}")));
    }
    if config.identities == 0 || config.videos == 0 || config.frames_per_video == 0 {
        return Err(PpError::Domain("identities, videos and frames must be positive".into()));
    }
    if config.max_faces_per_video == 0 || config.resolution < 8 {
        return Err(PpError::Domain("need at least one face per video and resolution >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let people: Vec<Identity> = (0..config.identities)
        .map(|i| Identity::sample(&mut identity_rng(config.seed, i)))
        .collect();
    let mut order: Vec<usize> = (0..config.identities).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);

    let header = DetectionsHeader {
        schema_version: 1,
        frame_width: SLOT_WIDTH * config.max_faces_per_video as f64 + 16.0,
        frame_height: FACE_SIZE + 24.0,
    };
    let mut faces = Vec::new();
    let mut next_person = 0usize;
    for v in 0..config.videos {
        let video_id = format!("v{v:03}");
        let expression = rng.gen_range(0..e);
        let count = rng.gen_range(1..=config.max_faces_per_video);
        let cast: Vec<usize> = (0..count)
            .map(|_| {
                let p = order[next_person % order.len()];
                next_person += 1;
                p
            })
            .collect();
        for f in 0..config.frames_per_video {
            for (slot, &person) in cast.iter().enumerate() {
                let var = FrameVariation::sample(&mut rng);
                let planes = render_face(&people[person], expression, var, config.resolution, config.noise, &mut rng);
                let x1 = 8.0 + slot as f64 * SLOT_WIDTH + rng.gen_range(-2.0..2.0);
                let y1 = 12.0 + rng.gen_range(-2.0..2.0);
                faces.push(SynthFace {
                    image: planes_to_image(&planes, config.resolution),
                    detection: DetectionRecord {
                        video_id: video_id.clone(),
                        frame_index: f as i64,
                        track_id: None,
                        bbox: [x1, y1, x1 + FACE_SIZE, y1 + FACE_SIZE],
                        expression: Some(config.expressions[expression].clone()),
                        crop_ref: format!("{video_id}/f{f:03}_{slot}.png"),
                        variant: Variant::Original,
                        embedding: Vec::new(),
                    },
                    identity: person,
                });
            }
        }
    }

    let mut expression_set = Vec::new();
    let mut k = 0usize;
    for (ei, name) in config.expressions.iter().enumerate() {
        for i in 0..config.expression_images_per_class {
            let person = Identity::sample(&mut identity_rng(config.seed, config.identities + k));
            let var = FrameVariation::sample(&mut rng);
            let planes = render_face(&person, ei, var, config.resolution, config.noise, &mut rng);
            let r = config.resolution as f64;
            expression_set.push((
                planes_to_image(&planes, config.resolution),
                FaceRecord {
                    video_id: "stills".into(),
                    frame_index: k as u64,
                    track_id: k as u64,
                    bbox: [0.0, 0.0, r, r],
                    expression: Some(name.clone()),
                    crop_ref: format!("stills/{name}_{i:03}.png"),
                    variant: Variant::Original,
                },
            ));
            k += 1;
        }
    }
    Ok(SynthDataset {
        header,
        faces,
        expression_set,
    })
}

/// File names written by [`write_dataset`] inside the output directory.
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const STILLS_FILE: &str = "stills.jsonl";
pub const TRUTH_FILE: &str = "identities.json";

/// Writes crops under `store` and the detection, stills and identity files into `dir`.
pub fn write_dataset(data: &SynthDataset, store: &CropStore, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    let mut truth = BTreeMap::new();
    for face in &data.faces {
        store.write(&face.detection.crop_ref, &face.image)?;
        truth.insert(face.detection.crop_ref.clone(), face.identity);
    }
    for (img, rec) in &data.expression_set {
        store.write(&rec.crop_ref, img)?;
    }
    save_detections(
        &DetectionsFile {
            header: data.header.clone(),
            detections: data.faces.iter().map(|f| f.detection.clone()).collect(),
        },
        dir.join(DETECTIONS_FILE),
    )?;
    let stills = DatasetManifest::new(
        Variant::Original,
        data.expression_set.iter().map(|(_, r)| r.clone()).collect(),
    )?;
    save_manifest(&stills, dir.join(STILLS_FILE))?;
    let text = serde_json::to_string_pretty(&truth)?;
    crate::data_model::write_atomic(&dir.join(TRUTH_FILE), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            videos: 3,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.faces.len(), b.faces.len());
        for (x, y) in a.faces.iter().zip(&b.faces) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.detection, y.detection);
        }
        assert_eq!(a.expression_set.len(), 90);
    }

    #[test]
    fn expressions_differ_in_pixels() {
        let id = Identity::sample(&mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let faces: Vec<_> = (0..3)
            .map(|e| render_face(&id, e, FrameVariation::neutral(), 16, 0.0, &mut rng))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let diff: f64 = faces[i].iter().zip(&faces[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(diff > 5.0, "expressions {i} and {j} differ by only {diff}");
            }
        }
    }

    #[test]
    fn too_many_expressions_rejected() {
        let cfg = SynthConfig {
            expressions: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            ..SynthConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
