//! Small networks used by the pipeline and their checkpoint container.

use std::path::Path;

use ppfer_nn::{Conv, Graph, Linear, ParamStore, Scalar, StoredParam, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::EmbeddingVector;
use crate::error::{io_err, PpError, Result};

const SLOPE: f64 = 0.1;
/// Images per forward pass during inference.
const CHUNK: usize = 32;

fn check_images<T: Scalar>(x: &Tensor<T>, res: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
        return Err(PpError::Domain(format!(
            "{what} expects [n, 3, {res}, {res}] images, got {s:?}"
        )));
    }
    Ok(())
}

fn chunked<T: Scalar>(x: &Tensor<T>, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Result<Tensor<T>> {
    let n = x.batch();
    if n == 0 {
        return Ok(x.clone());
    }
    let mut parts = Vec::new();
    let mut i = 0;
    while i < n {
        let items: Vec<_> = (i..(i + CHUNK).min(n)).map(|j| x.item(j)).collect();
        parts.push(f(&Tensor::concat0(&items)?));
        i += CHUNK;
    }
    Ok(Tensor::concat0(&parts)?)
}

/// Serialized model: parameters plus the settings needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub arch: serde_json::Value,
    pub seed: u64,
    pub config: serde_json::Value,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::data_model::write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(PpError::Validation(format!(
                "checkpoint holds a {}, expected {kind}",
                self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub resolution: usize,
    pub base: usize,
    /// Zero the last layer so the untrained model is the identity on `[0,1]` images.
    pub identity_init: bool,
}

/// Two-level encoder-decoder with a skip connection that predicts a residual:
/// `out = clamp(x + r(x), 0, 1)`.
#[derive(Clone, Debug)]
pub struct EncoderDecoder<T> {
    spec: UNetSpec,
    seed: u64,
    store: ParamStore<T>,
    enc1: Conv,
    enc2: Conv,
    dec: Conv,
    out: Conv,
}

pub type AnonymizerModel<T> = EncoderDecoder<T>;
pub type DenoiserModel<T> = EncoderDecoder<T>;

impl<T: Scalar> EncoderDecoder<T> {
    pub fn new(spec: UNetSpec, seed: u64) -> Result<Self> {
        if spec.resolution == 0 || spec.resolution % 2 != 0 || spec.base == 0 {
            return Err(PpError::Domain(format!(
                "encoder-decoder needs an even resolution and base > 0, got {spec:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c1, c2) = (spec.base, 2 * spec.base);
        let k = [1, 3, 3];
        let enc1 = Conv::new(&mut store, "enc1", 3, c1, k, 1.0, &mut rng);
        let enc2 = Conv::new(&mut store, "enc2", c1, c2, k, 1.0, &mut rng);
        let dec = Conv::new(&mut store, "dec", c1 + c2, c1, k, 1.0, &mut rng);
        let out = Conv::new(&mut store, "out", c1, 3, k, 0.1, &mut rng);
        if spec.identity_init {
            store.get_mut(out.weight).data_mut().fill(T::zero());
        }
        Ok(Self {
            spec,
            seed,
            store,
            enc1,
            enc2,
            dec,
            out,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Var {
        let s = &self.store;
        let e1 = self.enc1.forward(g, s, x, trainable);
        let e1 = g.leaky_relu(e1, SLOPE);
        let p = g.avg_pool(e1, [1, 2, 2]);
        let e2 = self.enc2.forward(g, s, p, trainable);
        let e2 = g.leaky_relu(e2, SLOPE);
        let u = g.upsample(e2, [1, 2, 2]);
        let cat = g.concat(e1, u);
        let d = self.dec.forward(g, s, cat, trainable);
        let d = g.leaky_relu(d, SLOPE);
        let r = self.out.forward(g, s, d, trainable);
        let y = g.add(x, r);
        g.clamp(y, 0.0, 1.0)
    }

    /// Runs the network on `[n, 3, res, res]` images.
    pub fn apply(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(images, self.spec.resolution, "encoder-decoder")?;
        chunked(images, |x| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = self.forward(&mut g, xi, false);
            g.value(y).clone()
        })
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: "encoder_decoder".into(),
            arch: serde_json::to_value(&self.spec).expect("spec serializes"),
            seed: self.seed,
            config,
            params: self.store.to_stored(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("encoder_decoder")?;
        let spec: UNetSpec = serde_json::from_value(ck.arch.clone())?;
        let mut m = Self::new(spec, ck.seed)?;
        m.store.load_stored(&ck.params)?;
        Ok(m)
    }
}

/// Maps images (or clips) to class scores.
pub trait ExpressionClassifier<T: Scalar> {
    fn classes(&self) -> &[String];
    fn is_frozen(&self) -> bool;
    fn checksum(&self) -> String;
    fn store(&self) -> &ParamStore<T>;
    /// Logits `[n, classes]`.
    fn logits(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Var;

    fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.batch());
        let e = self.classes().len();
        for i in (0..x.batch()).step_by(CHUNK) {
            let items: Vec<_> = (i..(i + CHUNK).min(x.batch())).map(|j| x.item(j)).collect();
            let mut g = Graph::new();
            let xi = g.input(Tensor::concat0(&items)?);
            let z = self.logits(&mut g, xi, false);
            out.extend(g.value(z).data().chunks(e).map(crate::losses::argmax));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub classes: Vec<String>,
    pub resolution: usize,
    pub width: usize,
    /// Frames per clip; 0 for a frame classifier.
    pub frames: usize,
}

/// Frame expression classifier: two conv blocks and a linear head.
#[derive(Clone, Debug)]
pub struct FrameClassifier<T> {
    spec: ClassifierSpec,
    seed: u64,
    frozen: bool,
    store: ParamStore<T>,
    c1: Conv,
    c2: Conv,
    fc: Linear,
}

impl<T: Scalar> FrameClassifier<T> {
    pub fn new(classes: Vec<String>, resolution: usize, width: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() || resolution % 4 != 0 || resolution == 0 || width == 0 {
            return Err(PpError::Domain("frame classifier needs classes and resolution divisible by 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = [1, 3, 3];
        let c1 = Conv::new(&mut store, "c1", 3, width, k, 1.0, &mut rng);
        let c2 = Conv::new(&mut store, "c2", width, 2 * width, k, 1.0, &mut rng);
        let flat = 2 * width * (resolution / 4) * (resolution / 4);
        let fc = Linear::new(&mut store, "fc", flat, classes.len(), 1.0, &mut rng);
        Ok(Self {
            spec: ClassifierSpec {
                classes,
                resolution,
                width,
                frames: 0,
            },
            seed,
            frozen: false,
            store,
            c1,
            c2,
            fc,
        })
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: "frame_classifier".into(),
            arch: serde_json::to_value(&self.spec).expect("spec serializes"),
            seed: self.seed,
            config,
            params: self.store.to_stored(),
        }
    }

    /// Restored classifiers come back frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("frame_classifier")?;
        let spec: ClassifierSpec = serde_json::from_value(ck.arch.clone())?;
        let mut m = Self::new(spec.classes, spec.resolution, spec.width, ck.seed)?;
        m.store.load_stored(&ck.params)?;
        m.frozen = true;
        Ok(m)
    }
}

impl<T: Scalar> ExpressionClassifier<T> for FrameClassifier<T> {
    fn classes(&self) -> &[String] {
        &self.spec.classes
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn checksum(&self) -> String {
        self.store.checksum()
    }

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn logits(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Var {
        let s = &self.store;
        let n = g.value(x).batch();
        let h = self.c1.forward(g, s, x, trainable);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.avg_pool(h, [1, 2, 2]);
        let h = self.c2.forward(g, s, h, trainable);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.avg_pool(h, [1, 2, 2]);
        let flat = g.value(h).numel() / n.max(1);
        let h = g.reshape(h, &[n, flat]);
        self.fc.forward(g, s, h, trainable)
    }
}

/// Clip classifier with factorized spatial and temporal convolutions,
/// input `[n, 3, frames, res, res]`.
#[derive(Clone, Debug)]
pub struct VideoClassifier<T> {
    spec: ClassifierSpec,
    seed: u64,
    store: ParamStore<T>,
    s1: Conv,
    t1: Conv,
    s2: Conv,
    fc: Linear,
}

impl<T: Scalar> VideoClassifier<T> {
    pub fn new(classes: Vec<String>, resolution: usize, frames: usize, width: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() || resolution % 4 != 0 || resolution == 0 || frames == 0 || width == 0 {
            return Err(PpError::Domain("video classifier needs classes, frames and resolution divisible by 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s1 = Conv::new(&mut store, "s1", 3, width, [1, 3, 3], 1.0, &mut rng);
        let t1 = Conv::new(&mut store, "t1", width, width, [3, 1, 1], 1.0, &mut rng);
        let s2 = Conv::new(&mut store, "s2", width, 2 * width, [1, 3, 3], 1.0, &mut rng);
        let flat = 2 * width * (resolution / 4) * (resolution / 4);
        let fc = Linear::new(&mut store, "fc", flat, classes.len(), 1.0, &mut rng);
        Ok(Self {
            spec: ClassifierSpec {
                classes,
                resolution,
                width,
                frames,
            },
            seed,
            store,
            s1,
            t1,
            s2,
            fc,
        })
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: "video_classifier".into(),
            arch: serde_json::to_value(&self.spec).expect("spec serializes"),
            seed: self.seed,
            config,
            params: self.store.to_stored(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("video_classifier")?;
        let spec: ClassifierSpec = serde_json::from_value(ck.arch.clone())?;
        let mut m = Self::new(spec.classes, spec.resolution, spec.frames, spec.width, ck.seed)?;
        m.store.load_stored(&ck.params)?;
        Ok(m)
    }
}

impl<T: Scalar> ExpressionClassifier<T> for VideoClassifier<T> {
    fn classes(&self) -> &[String] {
        &self.spec.classes
    }

    fn is_frozen(&self) -> bool {
        false
    }

    fn checksum(&self) -> String {
        self.store.checksum()
    }

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn logits(&self, g: &mut Graph<T>, x: Var, trainable: bool) -> Var {
        let s = &self.store;
        let n = g.value(x).batch();
        let frames = g.value(x).shape()[2];
        let h = self.s1.forward(g, s, x, trainable);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.avg_pool(h, [1, 2, 2]);
        let h = self.t1.forward(g, s, h, trainable);
        let h = g.leaky_relu(h, SLOPE);
        let h = self.s2.forward(g, s, h, trainable);
        let h = g.leaky_relu(h, SLOPE);
        let h = g.avg_pool(h, [frames, 2, 2]);
        let flat = g.value(h).numel() / n.max(1);
        let h = g.reshape(h, &[n, flat]);
        self.fc.forward(g, s, h, trainable)
    }
}

/// Face crop to unit-norm identity embedding.
pub trait IdentityEmbedder<T: Scalar> {
    fn dim(&self) -> usize;
    fn resolution(&self) -> usize;
    fn is_frozen(&self) -> bool;
    fn checksum(&self) -> String;
    /// `[n, 3, res, res] -> [n, dim]` normalized rows. Parameters enter as constants.
    fn forward(&self, g: &mut Graph<T>, x: Var) -> Var;

    fn embed(&self, images: &Tensor<T>) -> Result<Vec<EmbeddingVector<T>>> {
        check_images(images, self.resolution(), "embedder")?;
        let d = self.dim();
        let mut out = Vec::with_capacity(images.batch());
        for i in (0..images.batch()).step_by(CHUNK) {
            let items: Vec<_> = (i..(i + CHUNK).min(images.batch())).map(|j| images.item(j)).collect();
            let mut g = Graph::new();
            let xi = g.input(Tensor::concat0(&items)?);
            let z = self.forward(&mut g, xi);
            for row in g.value(z).data().chunks(d) {
                out.push(EmbeddingVector::unit(row.to_vec())?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub resolution: usize,
    pub grid: usize,
    pub dim: usize,
}

/// Block-average pooling to a `grid x grid` layout, per-channel centering,
/// then a fixed random projection and L2 normalization.
#[derive(Clone, Debug)]
pub struct PooledEmbedder<T> {
    spec: EmbedderSpec,
    seed: u64,
    frozen: bool,
    store: ParamStore<T>,
    proj: Linear,
}

impl<T: Scalar> PooledEmbedder<T> {
    pub fn new(spec: EmbedderSpec, seed: u64) -> Result<Self> {
        if spec.grid == 0 || spec.resolution % spec.grid != 0 || spec.dim == 0 {
            return Err(PpError::Domain(format!("invalid embedder layout {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cells = spec.grid * spec.grid;
        let proj = Linear::new(&mut store, "proj", 3 * cells, spec.dim, 1.0, &mut rng);
        // Fold the centering into the weights: subtract each row's per-channel mean.
        let w = store.get_mut(proj.weight).data_mut();
        for block in w.chunks_mut(cells) {
            let mean = block.iter().copied().sum::<T>() / T::of(cells as f64);
            for v in block.iter_mut() {
                *v -= mean;
            }
        }
        Ok(Self {
            spec,
            seed,
            frozen: true,
            store,
            proj,
        })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "pooled_embedder".into(),
            arch: serde_json::to_value(&self.spec).expect("spec serializes"),
            seed: self.seed,
            config: serde_json::Value::Null,
            params: self.store.to_stored(),
        }
    }
}

impl<T: Scalar> IdentityEmbedder<T> for PooledEmbedder<T> {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn resolution(&self) -> usize {
        self.spec.resolution
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn checksum(&self) -> String {
        self.store.checksum()
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Var {
        let n = g.value(x).batch();
        let f = self.spec.resolution / self.spec.grid;
        let h = g.avg_pool(x, [1, f, f]);
        let h = g.reshape(h, &[n, 3 * self.spec.grid * self.spec.grid]);
        let h = self.proj.forward(g, &self.store, h, false);
        g.normalize(h)
    }
}

/// Stacks `[1, ...]` items into one batch tensor.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    Ok(Tensor::concat0(items)?)
}
