//! Expression-restoring denoiser and the video expression classifier.

use std::collections::{BTreeMap, BTreeSet};

use ppfer_nn::{Adam, Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anonymizer_training::{epoch_batches, gather, TrainConfig};
use crate::data_model::DatasetManifest;
use crate::error::{PpError, Result};
use crate::losses::cross_entropy;
use crate::models::{DenoiserModel, ExpressionClassifier, FrameClassifier, VideoClassifier};

pub const DEFAULT_CLIP_LEN: usize = 16;

/// Mean cross-entropy of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(bad) => Err(PpError::Domain(format!("label {bad} outside {classes} classes"))),
        None => Ok(()),
    }
}

fn diverged(step: usize) -> PpError {
    PpError::Training {
        step,
        message: "cross-entropy is not finite".into(),
    }
}

/// Supervised training of a frame classifier on `[1, 3, res, res]` images.
pub fn train_frame_classifier<T: Scalar>(
    images: &[Tensor<T>],
    labels: &[usize],
    mut model: FrameClassifier<T>,
    config: &TrainConfig,
) -> Result<(FrameClassifier<T>, Vec<EpochRecord>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(PpError::Domain("need one label per image and at least one image".into()));
    }
    if model.is_frozen() {
        return Err(PpError::Contract("cannot train a frozen classifier".into()));
    }
    let e = model.classes().len();
    check_labels(labels, e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(images.len(), config.minibatch, &mut rng) {
            let x = gather(images, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xi = g.input(x);
            let z = model.logits(&mut g, xi, true);
            let (loss, grad) = cross_entropy(g.value(z).data(), e, &y)?;
            if !loss.is_finite() {
                return Err(diverged(step));
            }
            let seed = Tensor::from_vec(g.value(z).shape(), grad)?;
            let grads = g.backward(vec![(z, seed)]);
            opt.step(model.store_mut(), grads.params());
            sum += loss.as_f64() * idx.len() as f64;
            step += 1;
        }
        log.push(EpochRecord {
            epoch,
            loss: sum / images.len() as f64,
        });
    }
    Ok((model, log))
}

/// Trains the denoiser so that the frozen `f_exp` recognizes the expression of
/// denoised anonymized images.
pub fn train_denoiser<T: Scalar, C: ExpressionClassifier<T> + ?Sized>(
    images: &[Tensor<T>],
    labels: &[usize],
    mut f_denoise: DenoiserModel<T>,
    f_exp: &C,
    config: &TrainConfig,
) -> Result<(DenoiserModel<T>, Vec<EpochRecord>)> {
    if !f_exp.is_frozen() {
        return Err(PpError::Contract("the expression classifier must be frozen before denoiser training".into()));
    }
    if images.len() != labels.len() {
        return Err(PpError::Domain("need one label per image".into()));
    }
    let e = f_exp.classes().len();
    check_labels(labels, e)?;
    let before = f_exp.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        if images.is_empty() {
            break;
        }
        let mut sum = 0.0;
        for idx in epoch_batches(images.len(), config.minibatch, &mut rng) {
            let x = gather(images, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xi = g.input(x);
            let d = f_denoise.forward(&mut g, xi, true);
            let z = f_exp.logits(&mut g, d, false);
            let (loss, grad) = cross_entropy(g.value(z).data(), e, &y)?;
            if !loss.is_finite() {
                return Err(diverged(step));
            }
            let seed = Tensor::from_vec(g.value(z).shape(), grad)?;
            let grads = g.backward(vec![(z, seed)]);
            opt.step(f_denoise.store_mut(), grads.params());
            sum += loss.as_f64() * idx.len() as f64;
            step += 1;
        }
        log.push(EpochRecord {
            epoch,
            loss: sum / images.len() as f64,
        });
    }
    if f_exp.checksum() != before {
        return Err(PpError::Contract("expression classifier parameters changed during training".into()));
    }
    Ok((f_denoise, log))
}

/// Per-frame denoising of `[n, 3, res, res]` images.
pub fn denoise<T: Scalar>(f_denoise: &DenoiserModel<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    f_denoise.apply(images)
}

/// A fixed-length clip of one tracked face, `[1, 3, frames, res, res]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<T> {
    pub video_id: String,
    pub track_id: u64,
    pub label: usize,
    pub frames: Tensor<T>,
}

/// Indices of `len` frames sampled uniformly from a track of `available` frames.
pub fn uniform_indices(available: usize, len: usize) -> Vec<usize> {
    if available == 0 {
        return Vec::new();
    }
    if len == 1 {
        return vec![0];
    }
    (0..len)
        .map(|i| ((i * (available - 1)) as f64 / (len - 1) as f64).round() as usize)
        .collect()
}

/// Stacks `[1, 3, h, w]` frames into a `[1, 3, t, h, w]` clip.
pub fn stack_frames<T: Scalar>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames.first().ok_or_else(|| PpError::Domain("clip without frames".into()))?;
    let (h, w) = (first.shape()[2], first.shape()[3]);
    let t = frames.len();
    let mut data = vec![T::zero(); 3 * t * h * w];
    for (ti, f) in frames.iter().enumerate() {
        if f.shape() != first.shape() {
            return Err(PpError::Domain("clip frames differ in shape".into()));
        }
        for c in 0..3 {
            let dst = (c * t + ti) * h * w;
            data[dst..dst + h * w].copy_from_slice(&f.data()[c * h * w..(c + 1) * h * w]);
        }
    }
    Ok(Tensor::from_vec(&[1, 3, t, h, w], data)?)
}

/// One clip per track, frames sampled uniformly in frame order. `load` maps a
/// crop reference to its `[1, 3, res, res]` image.
pub fn build_clips<T: Scalar>(
    manifest: &DatasetManifest,
    classes: &[String],
    clip_len: usize,
    mut load: impl FnMut(&str) -> Result<Tensor<T>>,
) -> Result<Vec<Clip<T>>> {
    if clip_len == 0 {
        return Err(PpError::Domain("clip length must be positive".into()));
    }
    let mut tracks: BTreeMap<(&str, u64), Vec<&crate::data_model::FaceRecord>> = BTreeMap::new();
    for r in &manifest.records {
        tracks.entry((r.video_id.as_str(), r.track_id)).or_default().push(r);
    }
    let mut clips = Vec::with_capacity(tracks.len());
    for ((video, track), mut recs) in tracks {
        recs.sort_by_key(|r| r.frame_index);
        let Some(name) = recs.iter().find_map(|r| r.expression.as_deref()) else {
            continue;
        };
        let label = classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| PpError::Domain(format!("expression {name:?} is not a known class")))?;
        let frames = uniform_indices(recs.len(), clip_len)
            .into_iter()
            .map(|i| load(&recs[i].crop_ref))
            .collect::<Result<Vec<_>>>()?;
        clips.push(Clip {
            video_id: video.to_string(),
            track_id: track,
            label,
            frames: stack_frames(&frames)?,
        });
    }
    Ok(clips)
}

/// Splits clips by video so no video contributes to both parts.
pub fn split_by_video<T: Clone>(clips: &[Clip<T>], train_fraction: f64, seed: u64) -> (Vec<Clip<T>>, Vec<Clip<T>>) {
    let mut videos: Vec<&str> = clips
        .iter()
        .map(|c| c.video_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (videos.len() as f64 * train_fraction).round() as usize;
    let train: BTreeSet<&str> = videos[..cut.min(videos.len())].iter().copied().collect();
    let (a, b): (Vec<_>, Vec<_>) = clips.iter().cloned().partition(|c| train.contains(c.video_id.as_str()));
    (a, b)
}

pub fn train_fer<T: Scalar>(
    clips: &[Clip<T>],
    mut f_fer: VideoClassifier<T>,
    config: &TrainConfig,
) -> Result<(VideoClassifier<T>, Vec<EpochRecord>)> {
    if clips.is_empty() {
        return Err(PpError::Domain("no training clips".into()));
    }
    let shape = clips[0].frames.shape().to_vec();
    if clips.iter().any(|c| c.frames.shape() != shape.as_slice()) {
        return Err(PpError::Domain("clips differ in frame count or resolution".into()));
    }
    let e = f_fer.classes().len();
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    check_labels(&labels, e)?;
    let frames: Vec<Tensor<T>> = clips.iter().map(|c| c.frames.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(clips.len(), config.minibatch, &mut rng) {
            let x = gather(&frames, &idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xi = g.input(x);
            let z = f_fer.logits(&mut g, xi, true);
            let (loss, grad) = cross_entropy(g.value(z).data(), e, &y)?;
            if !loss.is_finite() {
                return Err(diverged(step));
            }
            let seed = Tensor::from_vec(g.value(z).shape(), grad)?;
            let grads = g.backward(vec![(z, seed)]);
            opt.step(f_fer.store_mut(), grads.params());
            sum += loss.as_f64() * idx.len() as f64;
            step += 1;
        }
        log.push(EpochRecord {
            epoch,
            loss: sum / clips.len() as f64,
        });
    }
    Ok((f_fer, log))
}

/// Accuracy summary; classes without test samples have `None` accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FerReport {
    pub classes: Vec<String>,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub support: BTreeMap<String, u64>,
    pub overall: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
}

impl FerReport {
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(PpError::Domain("truth and prediction lengths differ".into()));
        }
        if truth.is_empty() {
            return Err(PpError::Domain("empty test set".into()));
        }
        let e = classes.len();
        check_labels(truth, e)?;
        check_labels(predicted, e)?;
        let mut confusion = vec![vec![0u64; e]; e];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let mut per_class = BTreeMap::new();
        let mut support = BTreeMap::new();
        let mut correct = 0u64;
        for (i, name) in classes.iter().enumerate() {
            let n: u64 = confusion[i].iter().sum();
            correct += confusion[i][i];
            support.insert(name.clone(), n);
            per_class.insert(name.clone(), (n > 0).then(|| confusion[i][i] as f64 / n as f64));
        }
        Ok(Self {
            classes: classes.to_vec(),
            per_class,
            support,
            overall: correct as f64 / truth.len() as f64,
            confusion,
        })
    }

    /// Header row of predicted classes, then one row per true class.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            out.push_str(c);
            for v in &self.confusion[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Per-class accuracies as percentages, `N/A` for empty classes.
    pub fn table_row(&self) -> String {
        self.classes
            .iter()
            .map(|c| match self.per_class[c] {
                Some(a) => format!("{:.2}", 100.0 * a),
                None => "N/A".to_string(),
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

pub fn evaluate_fer<T: Scalar>(f_fer: &VideoClassifier<T>, clips: &[Clip<T>]) -> Result<FerReport> {
    if clips.is_empty() {
        return Err(PpError::Domain("empty test set".into()));
    }
    let e = f_fer.classes().len();
    let truth: Vec<usize> = clips.iter().map(|c| c.label).collect();
    check_labels(&truth, e)?;
    let frames: Vec<Tensor<T>> = clips.iter().map(|c| c.frames.clone()).collect();
    let predicted = f_fer.predict(&Tensor::concat0(&frames)?)?;
    FerReport::from_predictions(f_fer.classes(), &truth, &predicted)
}

/// Fraction of images whose predicted class matches the label.
pub fn classifier_accuracy<T: Scalar, C: ExpressionClassifier<T> + ?Sized>(
    model: &C,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(PpError::Domain("need one label per image and at least one image".into()));
    }
    let pred = model.predict(&Tensor::concat0(images)?)?;
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}
