//! Training batches laid out as `[extra, (anchor, positive, negative) × n]`.
//!
//! Batch sizes are restricted to `3n + 1 = 4^k`: the extra face plus `n`
//! triplets must fill a power-of-two batch, which forces an even exponent.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{write_atomic, DatasetManifest};
use crate::error::{io_err, PpError, Result};
use crate::knowledge_priors::{TrackIndex, TrackKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchShape {
    /// Exponent of two: `size = 2^m`.
    pub m: u32,
    /// Number of triplets.
    pub n: usize,
    pub size: usize,
}

/// Batch shape for exponent `k >= 1`: `m = 2k`, `n = (4^k - 1) / 3`, `size = 4^k`.
pub fn valid_batch_shape(k: u32) -> Result<BatchShape> {
    if k < 1 {
        return Err(PpError::Domain("batch exponent k must be >= 1".into()));
    }
    let m = 2 * k;
    let size = 1usize
        .checked_shl(m)
        .filter(|_| m < usize::BITS)
        .ok_or_else(|| PpError::Domain(format!("batch exponent k={k} overflows")))?;
    Ok(BatchShape {
        m,
        n: (size - 1) / 3,
        size,
    })
}

/// Targets for the similarity row: 0 where the extra face is compared with
/// the first anchor (index 0) and first negative (index 2), 1 elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BceLabelVector(pub Vec<u8>);

impl BceLabelVector {
    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn bce_labels(n: usize) -> Result<BceLabelVector> {
    if n < 1 {
        return Err(PpError::Domain("bce_labels needs at least one triplet".into()));
    }
    let mut bits = vec![1u8; 3 * n];
    bits[0] = 0;
    bits[2] = 0;
    Ok(BceLabelVector(bits))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletViews {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Stride-3 index views of a batch of `size = 3n + 1` faces.
pub fn triplet_views(size: usize) -> Result<TripletViews> {
    if size < 4 || (size - 1) % 3 != 0 {
        return Err(PpError::Domain(format!("batch size {size} is not of the form 3n+1 with n >= 1")));
    }
    Ok(TripletViews {
        anchors: (1..size).step_by(3).collect(),
        positives: (2..size).step_by(3).collect(),
        negatives: (3..size).step_by(3).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionMode {
    /// Every anchor and positive shares the batch expression label.
    Matched,
    /// Only the first triplet is conditioned on the batch label.
    Agnostic,
}

impl std::str::FromStr for ExpressionMode {
    type Err = PpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(Self::Matched),
            "agnostic" => Ok(Self::Agnostic),
            _ => Err(PpError::Validation(format!("unknown expression mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    /// Indices into the manifest's records, length `3n + 1`.
    pub face_refs: Vec<usize>,
    pub n: usize,
    pub expression: String,
    pub mode: ExpressionMode,
}

impl TripletBatch {
    pub fn size(&self) -> usize {
        self.face_refs.len()
    }

    /// Checks the layout invariants against the manifest the indices refer to.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let bad = |why: String| Err(PpError::Validation(format!("batch invariant violated: {why}")));
        if self.n < 1 || self.face_refs.len() != 3 * self.n + 1 {
            return bad(format!("length {} does not match n = {}", self.face_refs.len(), self.n));
        }
        let recs = &manifest.records;
        if let Some(&i) = self.face_refs.iter().find(|&&i| i >= recs.len()) {
            return bad(format!("face index {i} out of range"));
        }
        let r = |i: usize| &recs[self.face_refs[i]];
        let same_track = |a: usize, b: usize| r(a).video_id == r(b).video_id && r(a).track_id == r(b).track_id;
        let distinct = |a: usize, b: usize| r(a).crop_ref != r(b).crop_ref;
        if !(same_track(0, 1) && distinct(0, 1) && distinct(0, 3)) {
            return bad("extra face must be a distinct crop of the first anchor's track".into());
        }
        let label = Some(self.expression.as_str());
        let mut videos = BTreeSet::new();
        for t in 0..self.n {
            let (a, p, ng) = (3 * t + 1, 3 * t + 2, 3 * t + 3);
            if !(same_track(a, ng) && distinct(a, ng)) {
                return bad(format!("triplet {t}: anchor and negative must be distinct crops of one track"));
            }
            if r(p).video_id == r(a).video_id {
                return bad(format!("triplet {t}: positive must come from another video"));
            }
            if (self.mode == ExpressionMode::Matched || t == 0)
                && (r(a).expression.as_deref() != label || r(p).expression.as_deref() != label)
            {
                return bad(format!("triplet {t}: anchor and positive must carry label {}", self.expression));
            }
            videos.insert(r(a).video_id.as_str());
        }
        if videos.len() != self.n {
            return bad("triplets must come from distinct videos".into());
        }
        if self.mode == ExpressionMode::Matched {
            if let Some(i) = (0..self.face_refs.len()).find(|&i| r(i).expression.is_some() && r(i).expression.as_deref() != label) {
                return bad(format!("face {i} carries a different expression in matched mode"));
            }
        }
        Ok(())
    }
}

/// Distinct-crop record indices of each track, optionally restricted to one label.
fn track_crops(manifest: &DatasetManifest, index: &TrackIndex, label: Option<&str>) -> BTreeMap<TrackKey, Vec<usize>> {
    let mut out = BTreeMap::new();
    for (key, t) in &index.tracks {
        let mut seen = BTreeSet::new();
        let crops: Vec<usize> = t
            .records
            .iter()
            .copied()
            .filter(|&i| label.is_none() || manifest.records[i].expression.as_deref() == label)
            .filter(|&i| seen.insert(manifest.records[i].crop_ref.as_str()))
            .collect();
        out.insert(key.clone(), crops);
    }
    out
}

/// Builds one batch; deterministic given the inputs and `seed`.
pub fn build_batch(
    manifest: &DatasetManifest,
    index: &TrackIndex,
    expression: &str,
    k: u32,
    mode: ExpressionMode,
    seed: u64,
) -> Result<TripletBatch> {
    let n = valid_batch_shape(k)?.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labelled = track_crops(manifest, index, Some(expression));

    let first: Vec<&TrackKey> = labelled.iter().filter(|(_, c)| c.len() >= 3).map(|(k, _)| k).collect();
    let Some(&t0) = first.choose(&mut rng) else {
        return Err(PpError::Capacity(format!(
            "no track has three distinct crops labelled {expression:?} for the first slot"
        )));
    };
    let mut c0 = labelled[t0].clone();
    c0.shuffle(&mut rng);
    let (anchor0, negative0, extra) = (c0[0], c0[1], c0[2]);

    let rest_pool = match mode {
        ExpressionMode::Matched => labelled.clone(),
        ExpressionMode::Agnostic => track_crops(manifest, index, None),
    };
    let mut by_video: BTreeMap<&str, Vec<&TrackKey>> = BTreeMap::new();
    for (key, crops) in &rest_pool {
        if crops.len() >= 2 && key.0 != t0.0 {
            by_video.entry(key.0.as_str()).or_default().push(key);
        }
    }
    if by_video.len() + 1 < n {
        return Err(PpError::Capacity(format!(
            "{n} triplets need {n} distinct videos with usable tracks, found {}",
            by_video.len() + 1
        )));
    }
    let mut videos: Vec<&str> = by_video.keys().copied().collect();
    videos.shuffle(&mut rng);

    let mut triplets: Vec<(usize, usize)> = vec![(anchor0, negative0)];
    for v in videos.into_iter().take(n - 1) {
        let key = *by_video[v].choose(&mut rng).expect("non-empty video entry");
        let mut crops = rest_pool[key].clone();
        crops.shuffle(&mut rng);
        triplets.push((crops[0], crops[1]));
    }

    let mut face_refs = Vec::with_capacity(3 * n + 1);
    face_refs.push(extra);
    for (t, &(a, ng)) in triplets.iter().enumerate() {
        let anchor_video = &manifest.records[a].video_id;
        let conditioned = mode == ExpressionMode::Matched || t == 0;
        let candidates: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| {
                let r = &manifest.records[i];
                &r.video_id != anchor_video && (!conditioned || r.expression.as_deref() == Some(expression))
            })
            .collect();
        let Some(&p) = candidates.choose(&mut rng) else {
            return Err(PpError::Capacity(format!(
                "triplet {t}: no positive with label {expression:?} outside video {anchor_video}"
            )));
        };
        face_refs.extend([a, p, ng]);
    }
    Ok(TripletBatch {
        face_refs,
        n,
        expression: expression.to_string(),
        mode,
    })
}

/// Draws `count` batches; each batch label is sampled proportionally to its
/// record frequency among the labels that can fill a batch.
pub fn sample_batches(
    manifest: &DatasetManifest,
    index: &TrackIndex,
    k: u32,
    mode: ExpressionMode,
    count: usize,
    seed: u64,
) -> Result<Vec<TripletBatch>> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        if let Some(e) = r.expression.as_deref() {
            *freq.entry(e).or_default() += 1;
        }
    }
    let mut feasible = Vec::new();
    let mut last_err = None;
    for (&label, &f) in &freq {
        match build_batch(manifest, index, label, k, mode, 0) {
            Ok(_) => feasible.push((label, f)),
            Err(e) => last_err = Some(e),
        }
    }
    if feasible.is_empty() {
        return Err(last_err.unwrap_or_else(|| PpError::Capacity("no expression-labelled faces".into())));
    }
    let total: usize = feasible.iter().map(|(_, f)| f).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pick = rng.gen_range(0..total);
        let label = feasible
            .iter()
            .find(|(_, f)| {
                if pick < *f {
                    true
                } else {
                    pick -= f;
                    false
                }
            })
            .map(|(l, _)| *l)
            .expect("pick < total");
        out.push(build_batch(manifest, index, label, k, mode, rng.gen())?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BatchLine {
    batch: usize,
    expression: String,
    mode: ExpressionMode,
    n: usize,
    crop_refs: Vec<String>,
}

/// Writes one line per batch listing its crop_refs in layout order.
pub fn save_batch_manifest(batches: &[TripletBatch], manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (i, b) in batches.iter().enumerate() {
        let line = BatchLine {
            batch: i,
            expression: b.expression.clone(),
            mode: b.mode,
            n: b.n,
            crop_refs: b.face_refs.iter().map(|&r| manifest.records[r].crop_ref.clone()).collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn load_batch_manifest(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Vec<TripletBatch>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lookup: HashMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.crop_ref.as_str(), i))
        .collect();
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: BatchLine = serde_json::from_str(line).map_err(|e| PpError::Parse {
            line: ln + 1,
            message: e.to_string(),
        })?;
        let face_refs = parsed
            .crop_refs
            .iter()
            .map(|c| {
                lookup.get(c.as_str()).copied().ok_or_else(|| PpError::Parse {
                    line: ln + 1,
                    message: format!("crop {c} not in manifest"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let b = TripletBatch {
            face_refs,
            n: parsed.n,
            expression: parsed.expression,
            mode: parsed.mode,
        };
        b.validate(manifest)?;
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{FaceRecord, Variant};

    #[test]
    fn batch_shapes_from_the_size_table() {
        let s = |k| valid_batch_shape(k).unwrap();
        assert_eq!(s(1), BatchShape { m: 2, n: 1, size: 4 });
        assert_eq!(s(4), BatchShape { m: 8, n: 85, size: 256 });
        assert_eq!(s(5), BatchShape { m: 10, n: 341, size: 1024 });
        assert!(valid_batch_shape(0).is_err());
        assert!(valid_batch_shape(40).is_err());
    }

    #[test]
    fn bce_label_examples() {
        assert_eq!(bce_labels(1).unwrap().bits(), &[0, 1, 0]);
        assert_eq!(bce_labels(2).unwrap().bits(), &[0, 1, 0, 1, 1, 1]);
        assert!(bce_labels(0).is_err());
    }

    #[test]
    fn triplet_view_examples() {
        let v = triplet_views(4).unwrap();
        assert_eq!((v.anchors, v.positives, v.negatives), (vec![1], vec![2], vec![3]));
        let v = triplet_views(7).unwrap();
        assert_eq!((v.anchors, v.positives, v.negatives), (vec![1, 4], vec![2, 5], vec![3, 6]));
        assert!(triplet_views(6).is_err());
        assert!(triplet_views(1).is_err());
    }

    fn rec(video: &str, frame: u64, track: u64, expr: &str) -> FaceRecord {
        FaceRecord {
            video_id: video.into(),
            frame_index: frame,
            track_id: track,
            bbox: [0.0, 0.0, 1.0, 1.0],
            expression: Some(expr.into()),
            crop_ref: format!("{video}/{track}_{frame}.png"),
            variant: Variant::Original,
        }
    }

    #[test]
    fn no_three_crop_track_is_a_capacity_error() {
        let m = DatasetManifest::new(
            Variant::Original,
            vec![rec("a", 0, 0, "happy"), rec("a", 1, 0, "happy"), rec("b", 0, 0, "happy")],
        )
        .unwrap();
        let idx = TrackIndex::from_manifest(&m);
        let err = build_batch(&m, &idx, "happy", 1, ExpressionMode::Matched, 1).unwrap_err();
        assert!(matches!(err, PpError::Capacity(_)));
    }

    #[test]
    fn not_enough_videos_is_a_capacity_error() {
        let mut recs: Vec<_> = (0..3).map(|f| rec("a", f, 0, "happy")).collect();
        recs.extend((0..2).map(|f| rec("b", f, 0, "happy")));
        let m = DatasetManifest::new(Variant::Original, recs).unwrap();
        let idx = TrackIndex::from_manifest(&m);
        assert!(build_batch(&m, &idx, "happy", 1, ExpressionMode::Matched, 1).is_ok());
        let err = build_batch(&m, &idx, "happy", 2, ExpressionMode::Matched, 1).unwrap_err();
        assert!(err.to_string().contains("distinct videos"), "{err}");
    }
}
