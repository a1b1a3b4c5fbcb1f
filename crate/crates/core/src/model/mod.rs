//! Encoders, gating network, classifier and conditional modality
//! discriminator, plus the bundle that holds one trained model.

mod checkpoint;
mod networks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::PairedPattern;
use crate::datasets::{normalize_trajectory, to_tensor, DatasetError, Modality, Payload};
use crate::exec;
use crate::nn::{Adam, Mode, Param, Parameterized, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use networks::{Classifier, Cmd, ConvStack, Encoder, FcBlock, GatingNet, CONV_CHANNELS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which side of a pair an embedding came from. The discriminator's target
/// is 1 for self-augmented embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    Original,
    Augmented,
}

impl ModalityTag {
    pub fn target(self) -> f64 {
        match self {
            ModalityTag::Original => 0.0,
            ModalityTag::Augmented => 1.0,
        }
    }
}

/// A single finite feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(ModelError::Argument("empty embedding".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::Argument(format!(
                "non-finite embedding value {v}"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

/// Mixing weight in `[0, 1]` given to the original-modality embedding.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GateValue(f32);

impl GateValue {
    pub fn new(alpha: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ModelError::Argument(format!(
                "gate value {alpha} outside [0, 1]"
            )));
        }
        Ok(GateValue(alpha))
    }

    pub fn get(self) -> f32 {
        self.0
    }
}

/// `alpha * f_org + (1 - alpha) * f_aug`.
pub fn gate_combine(f_org: &Embedding, f_aug: &Embedding, alpha: GateValue) -> Result<Embedding> {
    if f_org.dim() != f_aug.dim() {
        return Err(ModelError::Shape(format!(
            "embedding lengths differ: {} vs {}",
            f_org.dim(),
            f_aug.dim()
        )));
    }
    let a = alpha.get();
    Embedding::new(combine_slices(f_org.values(), f_aug.values(), a))
}

pub(crate) fn combine_slices(f_org: &[f32], f_aug: &[f32], a: f32) -> Vec<f32> {
    f_org
        .iter()
        .zip(f_aug)
        .map(|(o, g)| a * o + (1.0 - a) * g)
        .collect()
}

/// Row-wise gated combination of two `[n, dim]` batches.
pub fn gate_combine_batch(f_org: &Tensor, f_aug: &Tensor, alpha: &[f32]) -> Tensor {
    assert_eq!(f_org.data.len(), f_aug.data.len());
    assert_eq!(alpha.len(), f_org.n);
    let dim = f_org.sample_len();
    let mut data = Vec::with_capacity(f_org.data.len());
    for (i, &a) in alpha.iter().enumerate() {
        data.extend(combine_slices(f_org.sample(i), f_aug.sample(i), a));
    }
    Tensor::matrix(f_org.n, dim, data)
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(ModelError::Argument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::matrix(labels.len(), classes, data))
}

/// Checks that every row is a valid one-hot vector.
pub fn validate_one_hot(t: &Tensor) -> Result<()> {
    for i in 0..t.n {
        let row = t.sample(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != row.len() - 1 {
            return Err(ModelError::Argument(format!("row {i} is not one-hot")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub steps: usize,
    pub image_side: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embedding_dim: 512,
            hidden_dim: 512,
            steps: crate::datasets::DEFAULT_STEPS,
            image_side: crate::datasets::DEFAULT_SIDE,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::Argument("layer widths must be positive".into()));
        }
        if self.steps < 8 {
            return Err(ModelError::Argument(format!(
                "steps must be at least 8, got {}",
                self.steps
            )));
        }
        if self.image_side < 8 {
            return Err(ModelError::Argument(format!(
                "image side must be at least 8, got {}",
                self.image_side
            )));
        }
        Ok(())
    }
}

/// The proposed model or one of the single-modality / concatenation
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    ImageOnly,
    TsOnly,
    Concat,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::ImageOnly => "image_only",
            Variant::TsOnly => "ts_only",
            Variant::Concat => "concat",
        }
    }

    pub fn uses_image(self) -> bool {
        self != Variant::TsOnly
    }

    pub fn uses_ts(self) -> bool {
        self != Variant::ImageOnly
    }
}

/// RNG streams per network, so that variants sharing a seed start from
/// identical weights for the networks they have in common.
const STREAM_TS: u64 = 1;
const STREAM_IMG: u64 = 2;
const STREAM_GATE: u64 = 3;
const STREAM_CLS: u64 = 4;
const STREAM_CMD: u64 = 5;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One model: its networks, optimizer state and bookkeeping.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub variant: Variant,
    pub arch: ArchConfig,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub org_modality: Modality,
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
    pub encoder_ts: Option<Encoder>,
    pub encoder_img: Option<Encoder>,
    pub gate: Option<GatingNet>,
    pub classifier: Classifier,
    pub cmd: Option<Cmd>,
    pub main_opt: Adam,
    pub cmd_opt: Adam,
    /// Opaque training configuration recorded in checkpoints.
    pub config: serde_json::Value,
}

impl ModelBundle {
    pub fn new(
        variant: Variant,
        arch: ArchConfig,
        class_names: Vec<String>,
        org_modality: Modality,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let class_count = class_names.len();
        if class_count < 2 {
            return Err(ModelError::Argument(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        let (e, h) = (arch.embedding_dim, arch.hidden_dim);
        let encoder_ts = variant.uses_ts().then(|| {
            Encoder::time_series(
                "encoder_ts",
                arch.steps,
                h,
                e,
                &mut stream_rng(seed, STREAM_TS),
            )
        });
        let encoder_img = variant.uses_image().then(|| {
            Encoder::image(
                "encoder_img",
                arch.image_side,
                h,
                e,
                &mut stream_rng(seed, STREAM_IMG),
            )
        });
        let proposed = variant == Variant::Proposed;
        let gate = proposed.then(|| {
            GatingNet::new(
                "gate",
                arch.steps,
                arch.image_side,
                h,
                &mut stream_rng(seed, STREAM_GATE),
            )
        });
        let cmd =
            proposed.then(|| Cmd::new("cmd", e, class_count, h, &mut stream_rng(seed, STREAM_CMD)));
        let cls_in = if variant == Variant::Concat { 2 * e } else { e };
        let classifier = Classifier::new(
            "classifier",
            cls_in,
            h,
            class_count,
            &mut stream_rng(seed, STREAM_CLS),
        );
        Ok(ModelBundle {
            variant,
            arch,
            class_count,
            class_names,
            org_modality,
            seed,
            epoch: 0,
            encoder_ts,
            encoder_img,
            gate,
            classifier,
            cmd,
            main_opt: Adam::default(),
            cmd_opt: Adam::default(),
            config: serde_json::Value::Null,
        })
    }

    /// Parameters updated by the encoder/classifier step.
    pub fn main_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        if let Some(e) = &mut self.encoder_ts {
            v.extend(e.params_mut());
        }
        if let Some(e) = &mut self.encoder_img {
            v.extend(e.params_mut());
        }
        if let Some(g) = &mut self.gate {
            v.extend(g.params_mut());
        }
        v.extend(self.classifier.params_mut());
        v
    }

    /// Every network in checkpoint order.
    pub fn networks(&self) -> Vec<&dyn Parameterized> {
        let mut v: Vec<&dyn Parameterized> = Vec::new();
        if let Some(e) = &self.encoder_ts {
            v.push(e);
        }
        if let Some(e) = &self.encoder_img {
            v.push(e);
        }
        if let Some(g) = &self.gate {
            v.push(g);
        }
        v.push(&self.classifier);
        if let Some(c) = &self.cmd {
            v.push(c);
        }
        v
    }

    pub fn networks_mut(&mut self) -> Vec<&mut dyn Parameterized> {
        let mut v: Vec<&mut dyn Parameterized> = Vec::new();
        if let Some(e) = &mut self.encoder_ts {
            v.push(e);
        }
        if let Some(e) = &mut self.encoder_img {
            v.push(e);
        }
        if let Some(g) = &mut self.gate {
            v.push(g);
        }
        v.push(&mut self.classifier);
        if let Some(c) = &mut self.cmd {
            v.push(c);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }

    pub fn zero_grad(&mut self) {
        for n in self.networks_mut() {
            n.zero_grad();
        }
    }

    /// Fails unless this model can be used with data of `class_count`
    /// classes and the given architecture.
    pub fn check_compatible(&self, class_count: usize, arch: &ArchConfig) -> Result<()> {
        if class_count != self.class_count {
            return Err(ModelError::Shape(format!(
                "model has {} classes, data has {class_count}",
                self.class_count
            )));
        }
        if arch != &self.arch {
            return Err(ModelError::Shape(format!(
                "architecture differs: model {:?}, requested {arch:?}",
                self.arch
            )));
        }
        Ok(())
    }

    /// Runs every network in inference mode.
    pub fn infer(&mut self, batch: &Batch) -> Result<Inference> {
        self.forward(batch, Mode::Inference)
    }

    fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<Inference> {
        batch.check(&self.arch)?;
        let f_ts = self.encoder_ts.as_mut().map(|e| e.forward(&batch.ts, mode));
        let f_img = self
            .encoder_img
            .as_mut()
            .map(|e| e.forward(&batch.img, mode));
        let (f, f_org, f_aug, alpha) = match self.variant {
            Variant::Proposed => {
                let (f_ts, f_img) = (f_ts.expect("ts encoder"), f_img.expect("image encoder"));
                let (f_org, f_aug) = match self.org_modality {
                    Modality::TimeSeries => (f_ts, f_img),
                    Modality::Image => (f_img, f_ts),
                };
                let gate = self.gate.as_mut().expect("gating network");
                let alpha = gate.forward(&batch.img, &batch.ts, mode);
                let f = gate_combine_batch(&f_org, &f_aug, &alpha);
                (f, Some(f_org), Some(f_aug), Some(alpha))
            }
            Variant::ImageOnly => (f_img.expect("image encoder"), None, None, None),
            Variant::TsOnly => (f_ts.expect("ts encoder"), None, None, None),
            Variant::Concat => {
                let f = Tensor::concat_features(
                    &f_img.expect("image encoder"),
                    &f_ts.expect("ts encoder"),
                );
                (f, None, None, None)
            }
        };
        let logits = self.classifier.forward(&f, mode);
        Ok(Inference {
            logits,
            f,
            f_org,
            f_aug,
            alpha,
        })
    }

    /// Re-estimates batch-norm running statistics from `inputs` with
    /// training-mode forward passes over shuffled batches. Parameters are
    /// not touched.
    pub fn calibrate_batch_norm(
        &mut self,
        inputs: &[EncodedPair],
        batch_size: usize,
        passes: usize,
    ) -> Result<()> {
        for pass in 0..passes {
            for idx in crate::training::epoch_batches(inputs.len(), batch_size, self.seed, pass) {
                let refs: Vec<&EncodedPair> = idx.iter().map(|&i| &inputs[i]).collect();
                self.forward(&Batch::from_pairs(&refs, &self.arch), Mode::Train)?;
            }
        }
        Ok(())
    }

    /// Inference over many inputs in batches of at most `batch_size`.
    pub fn infer_all(
        &mut self,
        inputs: &[EncodedPair],
        batch_size: usize,
    ) -> Result<Vec<Inference>> {
        let mut out = Vec::new();
        for chunk in inputs.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedPair> = chunk.iter().collect();
            out.push(self.infer(&Batch::from_pairs(&refs, &self.arch))?);
        }
        Ok(out)
    }
}

/// Outputs of [`ModelBundle::infer`] for one batch.
#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Tensor,
    /// The classifier input.
    pub f: Tensor,
    pub f_org: Option<Tensor>,
    pub f_aug: Option<Tensor>,
    pub alpha: Option<Vec<f32>>,
}

/// Network-ready inputs for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub id: String,
    pub label: usize,
    /// `[3 * steps]`: x, y and pen rows.
    pub ts: Vec<f32>,
    /// `[side * side]`, row-major.
    pub img: Vec<f32>,
}

/// Encodes both modalities of a pair.
pub fn encode_pair(pair: &PairedPattern, arch: &ArchConfig) -> Result<EncodedPair> {
    let ts = match pair.payload(Modality::TimeSeries) {
        Payload::Trajectory(t) => to_tensor(&normalize_trajectory(t)?, arch.steps)?.data,
        Payload::Image(_) => {
            return Err(ModelError::Argument(format!(
                "pair {} lacks a trajectory",
                pair.id
            )))
        }
    };
    let img = match pair.payload(Modality::Image) {
        Payload::Image(im) if im.height == arch.image_side && im.width == arch.image_side => {
            im.pixels.clone()
        }
        Payload::Image(im) => im.resample_square(arch.image_side).pixels,
        Payload::Trajectory(_) => {
            return Err(ModelError::Argument(format!(
                "pair {} lacks an image",
                pair.id
            )))
        }
    };
    Ok(EncodedPair {
        id: pair.id.clone(),
        label: pair.label,
        ts,
        img,
    })
}

pub fn encode_pairs(pairs: &[PairedPattern], arch: &ArchConfig) -> Result<Vec<EncodedPair>> {
    exec::map(pairs, |p| encode_pair(p, arch))
        .into_iter()
        .collect()
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ts: Tensor,
    pub img: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair], arch: &ArchConfig) -> Batch {
        let n = pairs.len();
        let mut ts = Vec::with_capacity(n * 3 * arch.steps);
        let mut img = Vec::with_capacity(n * arch.image_side * arch.image_side);
        for p in pairs {
            ts.extend_from_slice(&p.ts);
            img.extend_from_slice(&p.img);
        }
        Batch {
            ts: Tensor::from_vec(n, 3, 1, arch.steps, ts),
            img: Tensor::from_vec(n, 1, arch.image_side, arch.image_side, img),
            labels: pairs.iter().map(|p| p.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, arch: &ArchConfig) -> Result<()> {
        if (self.ts.c, self.ts.h, self.ts.w) != (3, 1, arch.steps) {
            return Err(ModelError::Shape(format!(
                "time series input must be (3, {}), got ({}, {})",
                arch.steps, self.ts.c, self.ts.w
            )));
        }
        if (self.img.c, self.img.h, self.img.w) != (1, arch.image_side, arch.image_side) {
            return Err(ModelError::Shape(format!(
                "image input must be {0}x{0}, got {1}x{2}",
                arch.image_side, self.img.h, self.img.w
            )));
        }
        Ok(())
    }
}
