//! Face manifests: per-face bookkeeping shared by every stage.
//!
//! A manifest file is line-delimited JSON. The first line is a header
//! (`schema_version`, `variant`); every following line is one [`FaceRecord`]
//! with fields in the fixed order
//! `video_id, frame_index, track_id, bbox, expression, crop_ref, variant`.
//! Absent expressions are written as `null`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ppfer_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, PpError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Which stage of the pipeline produced a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    Pp,
    Dpp,
    PpRecovered,
    DppRecovered,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Original,
        Variant::Pp,
        Variant::Dpp,
        Variant::PpRecovered,
        Variant::DppRecovered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Pp => "pp",
            Variant::Dpp => "dpp",
            Variant::PpRecovered => "pp_recovered",
            Variant::DppRecovered => "dpp_recovered",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = PpError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PpError::Validation(format!("unknown variant {s:?}")))
    }
}

/// One detected, aligned face crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceRecord {
    pub video_id: String,
    pub frame_index: u64,
    pub track_id: u64,
    /// `(x1, y1, x2, y2)` in frame pixel coordinates.
    pub bbox: [f64; 4],
    pub expression: Option<String>,
    pub crop_ref: String,
    pub variant: Variant,
}

/// Uniqueness key of a record inside a manifest or a merge of manifests.
pub type RecordKey<'a> = (&'a str, u64, u64, Variant);

impl FaceRecord {
    pub fn key(&self) -> RecordKey<'_> {
        (&self.video_id, self.frame_index, self.track_id, self.variant)
    }

    /// Identity of the face this crop came from, independent of variant.
    pub fn face_key(&self) -> (&str, u64, u64) {
        (&self.video_id, self.frame_index, self.track_id)
    }

    pub fn track_key(&self) -> (&str, u64) {
        (&self.video_id, self.track_id)
    }

    pub fn validate(&self) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(self.invalid("bbox has non-finite coordinates"));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(self.invalid("bbox must satisfy x1 < x2 and y1 < y2"));
        }
        if x1 < 0.0 || y1 < 0.0 {
            return Err(self.invalid("bbox lies outside the frame"));
        }
        if self.video_id.is_empty() || self.crop_ref.is_empty() {
            return Err(self.invalid("video_id and crop_ref must be non-empty"));
        }
        Ok(())
    }

    pub fn validate_in_frame(&self, width: f64, height: f64) -> Result<()> {
        self.validate()?;
        if self.bbox[2] > width || self.bbox[3] > height {
            return Err(self.invalid("bbox lies outside the frame"));
        }
        Ok(())
    }

    fn invalid(&self, why: &str) -> PpError {
        PpError::Validation(format!(
            "record (video {}, frame {}, track {}, {}): {why}",
            self.video_id, self.frame_index, self.track_id, self.variant
        ))
    }
}

/// Identity embedding of one face.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() || !values.iter().all(|v| v.is_finite()) {
            return Err(PpError::Validation("embedding must be non-empty and finite".into()));
        }
        let normalized = (norm(&values) - T::one()).abs() <= T::of(1e-6);
        Ok(Self { values, normalized })
    }

    /// L2-normalizes `values`. Fails on a zero or non-finite vector.
    pub fn unit(mut values: Vec<T>) -> Result<Self> {
        let n = norm(&values);
        if !n.is_finite() || n <= T::zero() {
            return Err(PpError::Validation("cannot normalize a zero or non-finite embedding".into()));
        }
        values.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn cosine(&self, other: &Self) -> T {
        cosine(&self.values, &other.values)
    }
}

pub(crate) fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

pub(crate) fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema_version: u32,
    variant: Variant,
}

/// All records of one dataset variant.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<FaceRecord>,
    pub variant: Variant,
    pub schema_version: u32,
}

impl DatasetManifest {
    pub fn empty(variant: Variant) -> Self {
        Self {
            records: Vec::new(),
            variant,
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn new(variant: Variant, records: Vec<FaceRecord>) -> Result<Self> {
        let m = Self {
            records,
            variant,
            schema_version: SCHEMA_VERSION,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            r.validate()?;
            if r.variant != self.variant {
                return Err(PpError::Validation(format!(
                    "record {} has variant {} in a {} manifest",
                    r.crop_ref, r.variant, self.variant
                )));
            }
            if !seen.insert(r.key()) {
                return Err(PpError::Validation(format!(
                    "duplicate record (video {}, frame {}, track {}, {})",
                    r.video_id, r.frame_index, r.track_id, r.variant
                )));
            }
        }
        Ok(())
    }
}

/// Concatenates manifests, checking the `(video, frame, track, variant)` key stays unique.
pub fn merge_manifests(manifests: &[&DatasetManifest]) -> Result<Vec<FaceRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for m in manifests {
        for r in &m.records {
            if !seen.insert(r.key()) {
                return Err(PpError::Validation(format!(
                    "duplicate record after merge: {}",
                    r.crop_ref
                )));
            }
            out.push(r.clone());
        }
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() && records.is_empty() {
            if let Ok(h) = serde_json::from_str::<ManifestHeader>(line) {
                if h.schema_version != SCHEMA_VERSION {
                    return Err(PpError::Parse {
                        line: i + 1,
                        message: format!("unsupported schema_version {}", h.schema_version),
                    });
                }
                header = Some(h);
                continue;
            }
        }
        let rec: FaceRecord = serde_json::from_str(line).map_err(|e| PpError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let variant = header
        .as_ref()
        .map(|h| h.variant)
        .or_else(|| records.first().map(|r| r.variant))
        .unwrap_or(Variant::Original);
    DatasetManifest::new(variant, records)
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> Result<String> {
    manifest.validate()?;
    let mut out = serde_json::to_string(&ManifestHeader {
        schema_version: manifest.schema_version,
        variant: manifest.variant,
    })?;
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = manifest_to_string(manifest)?;
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// One face detection before tracking: a manifest line without a
/// meaningful `track_id`, plus its identity embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame_index: i64,
    pub track_id: Option<u64>,
    pub bbox: [f64; 4],
    pub expression: Option<String>,
    pub crop_ref: String,
    pub variant: Variant,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsHeader {
    pub schema_version: u32,
    pub frame_width: f64,
    pub frame_height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionsFile {
    pub header: DetectionsHeader,
    pub detections: Vec<DetectionRecord>,
}

pub fn save_detections(file: &DetectionsFile, path: impl AsRef<Path>) -> Result<()> {
    let mut out = serde_json::to_string(&file.header)?;
    out.push('\n');
    for d in &file.detections {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<DetectionsFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header = match lines.next() {
        Some((i, l)) => serde_json::from_str::<DetectionsHeader>(l).map_err(|e| PpError::Parse {
            line: i + 1,
            message: format!("detections header: {e}"),
        })?,
        None => {
            return Err(PpError::Parse {
                line: 1,
                message: "missing detections header".into(),
            })
        }
    };
    let detections = lines
        .map(|(i, l)| {
            serde_json::from_str::<DetectionRecord>(l).map_err(|e| PpError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DetectionsFile { header, detections })
}
