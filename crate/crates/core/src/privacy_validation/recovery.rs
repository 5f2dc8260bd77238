//! Recovery attacks: image-to-image models trained to invert an anonymizer.

use ppfer_nn::{Adam, Graph, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::ssim_with_grad;
use crate::anonymizer_training::{epoch_batches, TrainConfig};
use crate::data_model::Variant;
use crate::denoise_and_fer::EpochRecord;
use crate::error::{PpError, Result};
use crate::models::{Checkpoint, EncoderDecoder, UNetSpec};

/// `(video_id, frame_index, track_id)` of one face.
pub type AlignKey = (String, u64, u64);

/// An original crop and the anonymized crop of the same face.
#[derive(Clone, Debug)]
pub struct RecoveryPair<T> {
    pub target_key: AlignKey,
    pub source_key: AlignKey,
    pub target: Tensor<T>,
    pub source: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct RecoveryModel<T> {
    source: Variant,
    net: EncoderDecoder<T>,
}

impl<T: Scalar> RecoveryModel<T> {
    /// `source` is the variant the model inverts: `pp` or `dpp`.
    pub fn new(source: Variant, spec: UNetSpec, seed: u64) -> Result<Self> {
        Self::output_for(source)?;
        Ok(Self {
            source,
            net: EncoderDecoder::new(spec, seed)?,
        })
    }

    fn output_for(source: Variant) -> Result<Variant> {
        match source {
            Variant::Pp => Ok(Variant::PpRecovered),
            Variant::Dpp => Ok(Variant::DppRecovered),
            other => Err(PpError::Domain(format!("no recovery attack is defined for {other} inputs"))),
        }
    }

    pub fn source(&self) -> Variant {
        self.source
    }

    pub fn output_variant(&self) -> Variant {
        Self::output_for(self.source).expect("checked at construction")
    }

    pub fn net(&self) -> &EncoderDecoder<T> {
        &self.net
    }

    pub fn checksum(&self) -> String {
        self.net.checksum()
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let mut ck = self.net.to_checkpoint(config);
        ck.kind = format!("recovery_{}", self.source);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let source: Variant = ck
            .kind
            .strip_prefix("recovery_")
            .ok_or_else(|| PpError::Validation(format!("checkpoint holds a {}, expected a recovery model", ck.kind)))?
            .parse()?;
        let mut inner = ck.clone();
        inner.kind = "encoder_decoder".into();
        let net = EncoderDecoder::from_checkpoint(&inner)?;
        Self::output_for(source)?;
        Ok(Self { source, net })
    }
}

/// Trains with loss `1 - SSIM(prediction, target)`, averaged over each minibatch.
pub fn train_recovery<T: Scalar>(
    pairs: &[RecoveryPair<T>],
    mut model: RecoveryModel<T>,
    config: &TrainConfig,
) -> Result<(RecoveryModel<T>, Vec<EpochRecord>)> {
    if pairs.is_empty() {
        return Err(PpError::Domain("recovery training needs at least one pair".into()));
    }
    for p in pairs {
        if p.target_key != p.source_key || p.target.shape() != p.source.shape() {
            return Err(PpError::Domain(format!(
                "misaligned recovery pair: target {:?} vs source {:?}",
                p.target_key, p.source_key
            )));
        }
    }
    let res = model.net.resolution();
    let dims = (3, res, res);
    let plane = 3 * res * res;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.learning_rate);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(pairs.len(), config.minibatch, &mut rng) {
            let src: Vec<_> = idx.iter().map(|&i| pairs[i].source.clone()).collect();
            let mut g = Graph::new();
            let xi = g.input(Tensor::concat0(&src)?);
            let y = model.net.forward(&mut g, xi, true);
            let pred = g.value(y).data();
            let inv = T::one() / T::of(idx.len() as f64);
            let mut grad = Vec::with_capacity(pred.len());
            let mut loss = T::zero();
            for (j, &i) in idx.iter().enumerate() {
                let (s, gs) = ssim_with_grad(&pred[j * plane..(j + 1) * plane], pairs[i].target.data(), dims, T::one())?;
                loss += (T::one() - s) * inv;
                grad.extend(gs.into_iter().map(|v| -v * inv));
            }
            if !loss.is_finite() {
                return Err(PpError::Training {
                    step,
                    message: "SSIM loss is not finite".into(),
                });
            }
            let seed = Tensor::from_vec(g.value(y).shape(), grad)?;
            let grads = g.backward(vec![(y, seed)]);
            opt.step(model.net.store_mut(), grads.params());
            sum += loss.as_f64() * idx.len() as f64;
            step += 1;
        }
        log.push(EpochRecord {
            epoch,
            loss: sum / pairs.len() as f64,
        });
    }
    Ok((model, log))
}

/// Applies the attack to crops of variant `variant`, which must be the model's source.
pub fn recover<T: Scalar>(model: &RecoveryModel<T>, images: &Tensor<T>, variant: Variant) -> Result<(Tensor<T>, Variant)> {
    if variant != model.source {
        return Err(PpError::Contract(format!(
            "recovery model trained on {} inputs received {variant} crops",
            model.source
        )));
    }
    Ok((model.net.apply(images)?, model.output_variant()))
}
