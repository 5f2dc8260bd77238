//! Reconstruction pre-training and identity-suppression training of the anonymizer.

use std::io::Write;
use std::path::Path;

use ppfer_nn::{Adam, Graph, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch_builder::bce_labels;
use crate::error::{io_err, PpError, Result};
use crate::losses::{combined_loss, l1_loss};
use crate::models::{AnonymizerModel, IdentityEmbedder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub triplet_margin: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_k: u32,
    /// Samples per optimizer step for the per-image trainers.
    pub minibatch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            epochs: 400,
            triplet_margin: 0.2,
            learning_rate: 1e-3,
            seed: 42,
            batch_k: 2,
            minibatch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PpError::Validation(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.triplet_margin > 0.0 && self.triplet_margin.is_finite()) {
            return Err(PpError::Validation(format!(
                "triplet margin must be positive, got {}",
                self.triplet_margin
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PpError::Validation(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.minibatch == 0 {
            return Err(PpError::Validation("minibatch must be positive".into()));
        }
        crate::batch_builder::valid_batch_shape(self.batch_k)?;
        Ok(())
    }
}

/// One line of a training-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_tri: f64,
    pub l_bce: f64,
    pub total: f64,
}

pub fn save_loss_log<R: Serialize>(records: &[R], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").map_err(io_err(path))?;
    }
    crate::data_model::write_atomic(path, &buf)
}

/// Minibatch index lists for one epoch, reshuffled by `rng`.
pub(crate) fn epoch_batches(len: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn gather<T: Scalar>(items: &[Tensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    let picked: Vec<_> = idx.iter().map(|&i| items[i].clone()).collect();
    Ok(Tensor::concat0(&picked)?)
}

/// L1 reconstruction training. Returns the model and the mean training L1 of each epoch.
pub fn pretrain_reconstruction<T: Scalar>(
    mut model: AnonymizerModel<T>,
    crops: &[Tensor<T>],
    config: &TrainConfig,
) -> Result<(AnonymizerModel<T>, Vec<f64>)> {
    if crops.is_empty() {
        return Err(PpError::Domain("reconstruction pre-training needs at least one crop".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(crops.len(), config.minibatch, &mut rng);
        for idx in &batches {
            let x = gather(crops, idx)?;
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = model.forward(&mut g, xi, true);
            let (loss, grad) = l1_loss(g.value(y).data(), x.data());
            if !loss.is_finite() {
                return Err(PpError::Training {
                    step,
                    message: "reconstruction loss is not finite".into(),
                });
            }
            let seed = Tensor::from_vec(g.value(y).shape(), grad)?;
            let grads = g.backward(vec![(y, seed)]);
            opt.step(model.store_mut(), grads.params());
            sum += loss.as_f64() * idx.len() as f64;
            step += 1;
        }
        curve.push(sum / crops.len() as f64);
    }
    Ok((model, curve))
}

/// Trains `f_pp` on pre-assembled triplet batches, each stacked as
/// `[3n + 1, 3, res, res]` in batch order. Every epoch visits all batches once.
pub fn train_fpp<T: Scalar, E: IdentityEmbedder<T> + ?Sized>(
    batches: &[Tensor<T>],
    mut f_pp: AnonymizerModel<T>,
    f_e: &E,
    config: &TrainConfig,
) -> Result<(AnonymizerModel<T>, Vec<LossRecord>)> {
    if !f_e.is_frozen() {
        return Err(PpError::Contract("the identity embedder must be frozen before training".into()));
    }
    config.validate()?;
    let before = f_e.checksum();
    let dim = f_e.dim();
    let labels: Vec<_> = batches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let size = b.batch();
            if size < 4 || (size - 1) % 3 != 0 {
                return Err(PpError::Domain(format!("batch {i} has {size} faces, not 3n+1")));
            }
            bce_labels((size - 1) / 3)
        })
        .collect::<Result<_>>()?;
    let (alpha, margin) = (T::of(config.alpha), T::of(config.triplet_margin));
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::with_capacity(config.epochs * batches.len());
    for _ in 0..config.epochs {
        for (b, x) in batches.iter().enumerate() {
            let step = log.len();
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = f_pp.forward(&mut g, xi, true);
            let z = f_e.forward(&mut g, y);
            let (parts, grad) = combined_loss(g.value(z).data(), dim, &labels[b], alpha, margin).map_err(|e| {
                PpError::Training {
                    step,
                    message: format!("batch {b}: {e}"),
                }
            })?;
            if !parts.total.is_finite() {
                return Err(PpError::Training {
                    step,
                    message: format!("batch {b}: loss is not finite"),
                });
            }
            let seed = Tensor::from_vec(g.value(z).shape(), grad)?;
            let grads = g.backward(vec![(z, seed)]);
            if !grads.params().is_finite() {
                return Err(PpError::Training {
                    step,
                    message: format!("batch {b}: gradient is not finite"),
                });
            }
            opt.step(f_pp.store_mut(), grads.params());
            log.push(LossRecord {
                step,
                l_tri: parts.l_tri.as_f64(),
                l_bce: parts.l_bce.as_f64(),
                total: parts.total.as_f64(),
            });
        }
    }
    if f_e.checksum() != before {
        return Err(PpError::Contract("identity embedder parameters changed during training".into()));
    }
    Ok((f_pp, log))
}

/// Applies the anonymizer to `[n, 3, res, res]` images.
pub fn anonymize<T: Scalar>(f_pp: &AnonymizerModel<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    f_pp.apply(images)
}
