//! Rule-based identity comparison cases.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{DatasetManifest, FaceRecord, Variant};
use crate::error::{io_err, PpError, Result};

/// Variant compared against the original crop for rules 4 to 7.
pub const DERIVED_RULES: [(u8, Variant); 4] = [
    (4, Variant::Pp),
    (5, Variant::Dpp),
    (6, Variant::PpRecovered),
    (7, Variant::DppRecovered),
];

/// Expected matcher output: 1 only for two originals of one track.
pub fn rule_ground_truth(rule: u8) -> Result<u8> {
    match rule {
        3 => Ok(1),
        1 | 2 | 4..=7 => Ok(0),
        _ => Err(PpError::Domain(format!("unknown rule {rule}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FaceRef {
    pub video_id: String,
    pub frame_index: u64,
    pub track_id: u64,
    pub variant: Variant,
    pub crop_ref: String,
}

impl From<&FaceRecord> for FaceRef {
    fn from(r: &FaceRecord) -> Self {
        Self {
            video_id: r.video_id.clone(),
            frame_index: r.frame_index,
            track_id: r.track_id,
            variant: r.variant,
            crop_ref: r.crop_ref.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationCase {
    pub rule_id: u8,
    pub left: FaceRef,
    pub right: FaceRef,
    pub ground_truth: u8,
}

impl ValidationCase {
    fn new(rule_id: u8, left: &FaceRecord, right: &FaceRecord) -> Self {
        Self {
            rule_id,
            left: left.into(),
            right: right.into(),
            ground_truth: rule_ground_truth(rule_id).expect("rules are 1..=7"),
        }
    }

    /// Checks the structural invariant of the case's rule.
    pub fn validate(&self) -> Result<()> {
        let (l, r) = (&self.left, &self.right);
        let same_video = l.video_id == r.video_id;
        let same_track = same_video && l.track_id == r.track_id;
        let both_original = l.variant == Variant::Original && r.variant == Variant::Original;
        let ok = match self.rule_id {
            1 => same_video && !same_track && both_original,
            2 => !same_video && both_original,
            3 => same_track && both_original && l.crop_ref != r.crop_ref,
            rule => {
                let want = DERIVED_RULES.iter().find(|(id, _)| *id == rule).map(|(_, v)| *v);
                same_track && l.variant == Variant::Original && Some(r.variant) == want
            }
        };
        if !ok || rule_ground_truth(self.rule_id)? != self.ground_truth {
            return Err(PpError::Validation(format!("case violates rule {}: {self:?}", self.rule_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseOptions {
    /// Cases to sample for each of rules 1 and 2; `None` uses the number of tracks.
    pub quota: Option<usize>,
    pub seed: u64,
}

type FaceKey = (String, u64, u64);

fn pick<'a>(rng: &mut ChaCha8Rng, recs: &[&'a FaceRecord]) -> &'a FaceRecord {
    recs[rng.gen_range(0..recs.len())]
}

fn face_key(r: &FaceRecord) -> FaceKey {
    (r.video_id.clone(), r.frame_index, r.track_id)
}

/// Builds cases from the original manifest and the four derived-variant manifests.
pub fn generate_cases(manifests: &[&DatasetManifest], options: CaseOptions) -> Result<Vec<ValidationCase>> {
    let find = |v: Variant| {
        manifests
            .iter()
            .find(|m| m.variant == v)
            .copied()
            .ok_or_else(|| PpError::Capacity(format!("missing {v} manifest")))
    };
    let original = find(Variant::Original)?;
    let mut derived: Vec<(u8, Variant, HashMap<FaceKey, &FaceRecord>)> = Vec::new();
    for (rule, v) in DERIVED_RULES {
        let m = find(v)?;
        derived.push((rule, v, m.records.iter().map(|r| (face_key(r), r)).collect()));
    }

    // Tracks with their crops in frame order; duplicate crop refs count once.
    let mut tracks: BTreeMap<(&str, u64), Vec<&FaceRecord>> = BTreeMap::new();
    for r in &original.records {
        tracks.entry((r.video_id.as_str(), r.track_id)).or_default().push(r);
    }
    for recs in tracks.values_mut() {
        recs.sort_by(|a, b| (a.frame_index, &a.crop_ref).cmp(&(b.frame_index, &b.crop_ref)));
        let mut seen = BTreeSet::new();
        recs.retain(|r| seen.insert(r.crop_ref.as_str()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut cases = Vec::new();
    let mut derived_cases: Vec<Vec<ValidationCase>> = vec![Vec::new(); DERIVED_RULES.len()];
    for recs in tracks.values() {
        let a = rng.gen_range(0..recs.len());
        let b = if recs.len() >= 2 {
            let o = rng.gen_range(1..recs.len());
            (a + o) % recs.len()
        } else {
            a
        };
        let (left, right) = (recs[a], recs[b]);
        if a != b {
            cases.push(ValidationCase::new(3, left, right));
        }
        for (slot, (rule, v, index)) in derived.iter().enumerate() {
            let counterpart = index.get(&face_key(right)).ok_or_else(|| {
                PpError::Capacity(format!(
                    "{v} manifest has no counterpart for video {} frame {} track {}",
                    right.video_id, right.frame_index, right.track_id
                ))
            })?;
            derived_cases[slot].push(ValidationCase::new(*rule, left, counterpart));
        }
    }

    let quota = options.quota.unwrap_or(tracks.len());
    let by_video: BTreeMap<&str, Vec<&Vec<&FaceRecord>>> = tracks.iter().fold(BTreeMap::new(), |mut m, ((v, _), recs)| {
        m.entry(*v).or_insert_with(Vec::new).push(recs);
        m
    });
    let multi: Vec<&Vec<&Vec<&FaceRecord>>> = by_video.values().filter(|t| t.len() >= 2).collect();
    let videos: Vec<&Vec<&Vec<&FaceRecord>>> = by_video.values().collect();
    let sample = |rule: u8, rng: &mut ChaCha8Rng, out: &mut Vec<ValidationCase>| {
        let mut seen = BTreeSet::new();
        let mut attempts = 0;
        while seen.len() < quota && attempts < quota * 20 {
            attempts += 1;
            let (l, r) = if rule == 1 {
                if multi.is_empty() {
                    break;
                }
                let ts = multi[rng.gen_range(0..multi.len())];
                let i = rng.gen_range(0..ts.len());
                let j = (i + rng.gen_range(1..ts.len())) % ts.len();
                (pick(rng, ts[i]), pick(rng, ts[j]))
            } else {
                if videos.len() < 2 {
                    break;
                }
                let i = rng.gen_range(0..videos.len());
                let j = (i + rng.gen_range(1..videos.len())) % videos.len();
                let (vi, vj) = (videos[i], videos[j]);
                let ti = vi[rng.gen_range(0..vi.len())];
                let tj = vj[rng.gen_range(0..vj.len())];
                (pick(rng, ti), pick(rng, tj))
            };
            if seen.insert((l.crop_ref.clone(), r.crop_ref.clone())) {
                out.push(ValidationCase::new(rule, l, r));
            }
        }
    };
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    sample(1, &mut rng, &mut r1);
    sample(2, &mut rng, &mut r2);

    let mut all = r1;
    all.extend(r2);
    all.extend(cases);
    for d in derived_cases {
        all.extend(d);
    }
    Ok(all)
}

#[derive(Serialize, Deserialize)]
struct CaseLine {
    rule_id: u8,
    left: String,
    right: String,
    ground_truth: u8,
    left_face: FaceRef,
    right_face: FaceRef,
}

/// One JSON object per line with the rule, both crop references and the ground truth.
pub fn save_cases(cases: &[ValidationCase], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for c in cases {
        let line = CaseLine {
            rule_id: c.rule_id,
            left: c.left.crop_ref.clone(),
            right: c.right.crop_ref.clone(),
            ground_truth: c.ground_truth,
            left_face: c.left.clone(),
            right_face: c.right.clone(),
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.write_all(b"\n").map_err(io_err(path))?;
    }
    crate::data_model::write_atomic(path, &buf)
}

pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<ValidationCase>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: CaseLine = serde_json::from_str(l).map_err(|e| PpError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let case = ValidationCase {
                rule_id: line.rule_id,
                left: line.left_face,
                right: line.right_face,
                ground_truth: line.ground_truth,
            };
            case.validate().map_err(|e| PpError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(case)
        })
        .collect()
}

pub fn count_by_rule(cases: &[ValidationCase]) -> BTreeMap<u8, usize> {
    let mut m = BTreeMap::new();
    for c in cases {
        *m.entry(c.rule_id).or_insert(0) += 1;
    }
    m
}
