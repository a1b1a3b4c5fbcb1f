//! Evaluation and analysis: accuracy reports, gate-value buckets, embedding
//! export, prediction comparison, the ablation table and a modality probe.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Modality;
use crate::losses::{cmd_discriminator_batch, feature_distance_loss};
use crate::model::{
    one_hot, ArchConfig, Cmd, EncodedPair, Inference, ModalityTag, ModelBundle, ModelError, Variant,
};
use crate::nn::{sigmoid, Mode, Parameterized, Tensor};
use crate::training::{
    epoch_batches, fit, Ablation, Control, EpochRecord, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Inference batch size used by the evaluation helpers.
pub const EVAL_BATCH: usize = 64;
/// Gate-value buckets `0.0, 0.1, ..., 1.0`.
pub const ALPHA_BUCKETS: usize = 11;

/// Model output for one test pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub alpha: Option<f32>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes without test patterns.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean feature distance between paired embeddings; proposed model only.
    pub mean_fd: Option<f64>,
    pub mean_alpha: Option<f64>,
    pub alpha_histogram: Option<Vec<usize>>,
    /// Sorted by id.
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.predictions.len()
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Bucket of a gate value: nearest multiple of 0.1, halfway values going
/// to the lower bucket.
pub fn alpha_bucket(alpha: f32) -> usize {
    let x = alpha as f64 * 10.0;
    ((x - 0.5).ceil().max(0.0) as usize).min(ALPHA_BUCKETS - 1)
}

fn check_labels(bundle: &ModelBundle, test: &[EncodedPair]) -> Result<()> {
    if let Some(p) = test.iter().find(|p| p.label >= bundle.class_count) {
        return Err(EvalError::Shape(format!(
            "pattern {} has label {} but the model has {} classes",
            p.id, p.label, bundle.class_count
        )));
    }
    Ok(())
}

/// Runs inference on `test` and returns per-pattern outputs in input order
/// along with each batch's raw inference.
fn run(bundle: &mut ModelBundle, test: &[EncodedPair]) -> Result<Vec<Inference>> {
    if test.is_empty() {
        return Err(EvalError::Argument("test set is empty".into()));
    }
    check_labels(bundle, test)?;
    Ok(bundle.infer_all(test, EVAL_BATCH)?)
}

/// Accuracy, confusion matrix and gate statistics of `bundle` on `test`,
/// using running batch-norm statistics.
pub fn evaluate(bundle: &mut ModelBundle, test: &[EncodedPair]) -> Result<EvalReport> {
    let outputs = run(bundle, test)?;
    let c = bundle.class_count;
    let mut predictions = Vec::with_capacity(test.len());
    let mut fd_sum = 0.0;
    let mut has_fd = false;
    let mut pairs = test.iter();
    for out in &outputs {
        for i in 0..out.logits.n {
            let p = pairs.next().expect("one output per pattern");
            predictions.push(Prediction {
                id: p.id.clone(),
                label: p.label,
                predicted: argmax(out.logits.sample(i)),
                alpha: out.alpha.as_ref().map(|a| a[i]),
            });
            if let (Some(o), Some(a)) = (&out.f_org, &out.f_aug) {
                let o: Vec<f64> = o.sample(i).iter().map(|&v| v as f64).collect();
                let a: Vec<f64> = a.sample(i).iter().map(|&v| v as f64).collect();
                fd_sum += feature_distance_loss(&o, &a);
                has_fd = true;
            }
        }
    }
    predictions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report_from(
        predictions,
        c,
        has_fd.then(|| fd_sum / test.len() as f64),
    ))
}

fn report_from(predictions: Vec<Prediction>, classes: usize, mean_fd: Option<f64>) -> EvalReport {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for p in &predictions {
        confusion[p.label][p.predicted] += 1;
    }
    let n = predictions.len();
    let trace: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    let alphas: Vec<f32> = predictions.iter().filter_map(|p| p.alpha).collect();
    let (mean_alpha, alpha_histogram) = if alphas.len() == n && n > 0 {
        let mut hist = vec![0usize; ALPHA_BUCKETS];
        for &a in &alphas {
            hist[alpha_bucket(a)] += 1;
        }
        let mean = alphas.iter().map(|&a| a as f64).sum::<f64>() / n as f64;
        (Some(mean), Some(hist))
    } else {
        (None, None)
    };
    EvalReport {
        accuracy: if n > 0 { trace as f64 / n as f64 } else { 0.0 },
        per_class_accuracy,
        confusion,
        mean_fd,
        mean_alpha,
        alpha_histogram,
        predictions,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSample {
    pub id: String,
    pub alpha: f32,
    pub label: usize,
    pub predicted: usize,
    pub misclassified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBucket {
    /// Bucket center, `k / 10`.
    pub alpha: f64,
    /// Patterns falling in this bucket.
    pub count: usize,
    /// Seeded sample of at most `per_bucket` patterns, sorted by id.
    pub samples: Vec<AlphaSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBucketReport {
    pub seed: u64,
    pub per_bucket: usize,
    pub buckets: Vec<AlphaBucket>,
}

/// Groups already computed predictions by gate value.
pub fn alpha_buckets(
    predictions: &[Prediction],
    per_bucket: usize,
    seed: u64,
) -> Result<AlphaBucketReport> {
    let mut members: Vec<Vec<&Prediction>> = vec![Vec::new(); ALPHA_BUCKETS];
    for p in predictions {
        let a = p
            .alpha
            .ok_or_else(|| EvalError::Argument("model has no gating network".into()))?;
        members[alpha_bucket(a)].push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let buckets = members
        .into_iter()
        .enumerate()
        .map(|(k, mut m)| {
            m.sort_by(|a, b| a.id.cmp(&b.id));
            let mut chosen: Vec<&Prediction> =
                m.choose_multiple(&mut rng, per_bucket).copied().collect();
            chosen.sort_by(|a, b| a.id.cmp(&b.id));
            AlphaBucket {
                alpha: k as f64 / 10.0,
                count: m.len(),
                samples: chosen
                    .into_iter()
                    .map(|p| AlphaSample {
                        id: p.id.clone(),
                        alpha: p.alpha.unwrap_or_default(),
                        label: p.label,
                        predicted: p.predicted,
                        misclassified: !p.correct(),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(AlphaBucketReport {
        seed,
        per_bucket,
        buckets,
    })
}

/// Gate values of every test pattern bucketed to the nearest 0.1, with a
/// seeded sample of at most `per_bucket` patterns per bucket.
pub fn alpha_report(
    bundle: &mut ModelBundle,
    test: &[EncodedPair],
    per_bucket: usize,
    seed: u64,
) -> Result<AlphaBucketReport> {
    if bundle.variant != Variant::Proposed {
        return Err(EvalError::Argument(
            "only the proposed model has a gating network".into(),
        ));
    }
    let report = evaluate(bundle, test)?;
    alpha_buckets(&report.predictions, per_bucket, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub modality: Modality,
    pub tag: ModalityTag,
    pub label: usize,
    pub values: Vec<f32>,
}

/// Embeddings of both modalities for every pattern, original first.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    /// CSV with header `id,modality,label,e0..e{dim-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "modality".into(), "label".into()];
        header.extend((0..self.dim).map(|k| format!("e{k}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.id.clone(),
                r.modality.as_str().into(),
                r.label.to_string(),
            ];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    /// Mean Euclidean distance between the two embeddings of each pattern.
    pub fn mean_pair_distance(&self) -> f64 {
        let pairs = self.rows.chunks(2);
        let n = pairs.len();
        pairs
            .map(|p| {
                p[0].values
                    .iter()
                    .zip(&p[1].values)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / n as f64
    }
}

/// Encoder outputs of both modalities for each pattern (inference mode).
pub fn export_embeddings(
    bundle: &mut ModelBundle,
    split: &[EncodedPair],
) -> Result<EmbeddingTable> {
    if bundle.encoder_ts.is_none() || bundle.encoder_img.is_none() {
        return Err(EvalError::Argument(format!(
            "{} model does not embed both modalities",
            bundle.variant.as_str()
        )));
    }
    let outputs = run(bundle, split)?;
    let org = bundle.org_modality;
    let mut rows = Vec::with_capacity(2 * split.len());
    let mut pairs = split.iter();
    for out in outputs {
        let (f_org, f_aug) = match (out.f_org, out.f_aug) {
            (Some(o), Some(a)) => (o, a),
            // concat model: classifier input is [image | time series]
            _ => {
                let (img, ts) = out.f.split_features(bundle.arch.embedding_dim);
                match org {
                    Modality::TimeSeries => (ts, img),
                    Modality::Image => (img, ts),
                }
            }
        };
        for i in 0..f_org.n {
            let p = pairs.next().expect("one output per pattern");
            for (tag, modality, f) in [
                (ModalityTag::Original, org, &f_org),
                (ModalityTag::Augmented, org.other(), &f_aug),
            ] {
                let values = f.sample(i).to_vec();
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(EvalError::Argument(format!(
                        "non-finite embedding for {}",
                        p.id
                    )));
                }
                rows.push(EmbeddingRow {
                    id: p.id.clone(),
                    modality,
                    tag,
                    label: p.label,
                    values,
                });
            }
        }
    }
    Ok(EmbeddingTable {
        dim: bundle.arch.embedding_dim,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparedSample {
    pub id: String,
    pub label: usize,
    pub predicted_a: usize,
    pub predicted_b: usize,
    pub alpha_a: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `a` correct, `b` wrong.
    pub improved: Vec<ComparedSample>,
    /// `a` wrong, `b` correct.
    pub deteriorated: Vec<ComparedSample>,
    pub unchanged: usize,
}

/// Patterns on which two evaluations of the same test set disagree in
/// correctness.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    let b_by_id: HashMap<&str, &Prediction> =
        b.predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    if a.predictions.len() != b.predictions.len() {
        return Err(EvalError::Argument(
            "reports cover different test sets".into(),
        ));
    }
    let mut out = Comparison {
        improved: Vec::new(),
        deteriorated: Vec::new(),
        unchanged: 0,
    };
    for pa in &a.predictions {
        let pb = b_by_id.get(pa.id.as_str()).ok_or_else(|| {
            EvalError::Argument(format!("pattern {} missing from second report", pa.id))
        })?;
        if pb.label != pa.label {
            return Err(EvalError::Argument(format!(
                "pattern {} has different labels",
                pa.id
            )));
        }
        let s = ComparedSample {
            id: pa.id.clone(),
            label: pa.label,
            predicted_a: pa.predicted,
            predicted_b: pb.predicted,
            alpha_a: pa.alpha,
        };
        match (pa.correct(), pb.correct()) {
            (true, false) => out.improved.push(s),
            (false, true) => out.deteriorated.push(s),
            _ => out.unchanged += 1,
        }
    }
    Ok(out)
}

/// Evaluates both models on `test` and compares them.
pub fn compare_predictions(
    a: &mut ModelBundle,
    b: &mut ModelBundle,
    test: &[EncodedPair],
) -> Result<Comparison> {
    if a.class_count != b.class_count {
        return Err(EvalError::Argument(
            "models have different class counts".into(),
        ));
    }
    let ra = evaluate(a, test)?;
    let rb = evaluate(b, test)?;
    compare_reports(&ra, &rb)
}

/// The six rows of the ablation table, in order.
pub const ABLATION_ROWS: [(&str, Variant, Ablation); 6] = [
    ("Proposed", Variant::Proposed, Ablation::None),
    ("w/o CMD", Variant::Proposed, Ablation::NoCmd),
    ("w/o L_FD", Variant::Proposed, Ablation::NoFd),
    ("CNN (image)", Variant::ImageOnly, Ablation::None),
    ("CNN (time series)", Variant::TsOnly, Ablation::None),
    ("CNN (concat)", Variant::Concat, Ablation::None),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub ablation: Ablation,
    pub seed: u64,
    pub accuracy: f64,
    pub final_epoch: Option<EpochRecord>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub org_modality: Modality,
    pub train_size: usize,
    pub test_size: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// One line per row: label, accuracy in percent and as a fraction.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "accuracy_percent", "accuracy", "seed", "epochs"])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                format!("{:.2}", r.accuracy * 100.0),
                format!("{:.6}", r.accuracy),
                r.seed.to_string(),
                self.train.epochs.to_string(),
            ])?;
        }
        w.flush().map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }
}

/// Trains and evaluates every ablation row with the same seed.
/// `on_trained` sees each trained model before it is dropped.
pub fn run_ablation_suite(
    train: &[EncodedPair],
    test: &[EncodedPair],
    class_names: &[String],
    org_modality: Modality,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    on_trained: &mut dyn FnMut(&str, &ModelBundle),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (label, variant, ablation) in ABLATION_ROWS {
        log::info!("training {label}");
        let row_cfg = TrainConfig {
            ablation,
            ..cfg.clone()
        };
        let mut bundle =
            ModelBundle::new(variant, *arch, class_names.to_vec(), org_modality, cfg.seed)?;
        let records = fit(&mut bundle, train, &row_cfg, &mut |_, _| Control::Continue)?;
        let report = evaluate(&mut bundle, test)?;
        on_trained(label, &bundle);
        rows.push(AblationRow {
            label: label.to_string(),
            variant,
            ablation,
            seed: cfg.seed,
            accuracy: report.accuracy,
            final_epoch: records.last().cloned(),
            report,
        });
    }
    Ok(AblationTable {
        arch: *arch,
        train: cfg.clone(),
        org_modality,
        train_size: train.len(),
        test_size: test.len(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Frozen `(f_org, f_aug, labels)` of a split.
fn frozen_embeddings(
    bundle: &mut ModelBundle,
    split: &[EncodedPair],
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let table = export_embeddings(bundle, split)?;
    let dim = table.dim;
    let n = split.len();
    let mut org = Vec::with_capacity(n * dim);
    let mut aug = Vec::with_capacity(n * dim);
    for pair in table.rows.chunks(2) {
        org.extend_from_slice(&pair[0].values);
        aug.extend_from_slice(&pair[1].values);
    }
    Ok((
        Tensor::matrix(n, dim, org),
        Tensor::matrix(n, dim, aug),
        split.iter().map(|p| p.label).collect(),
    ))
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.sample_len());
    for &i in idx {
        data.extend_from_slice(t.sample(i));
    }
    Tensor::matrix(idx.len(), t.sample_len(), data)
}

fn probe_accuracy(
    probe: &mut Cmd,
    org: &Tensor,
    aug: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<f64> {
    let oh = one_hot(labels, classes)?;
    let x = Tensor::stack(org, aug);
    let oh2 = Tensor::stack(&oh, &oh);
    let d_hat = probe.forward(&x, &oh2, Mode::Inference);
    let n = org.n;
    let correct = d_hat
        .iter()
        .enumerate()
        .filter(|(k, &p)| (p > 0.5) == (*k >= n))
        .count();
    Ok(correct as f64 / (2 * n) as f64)
}

/// How well a freshly trained discriminator of the same architecture can
/// tell the two modalities apart from frozen embeddings. Trained on
/// `train`, scored on `test`.
pub fn modality_probe(
    bundle: &mut ModelBundle,
    train: &[EncodedPair],
    test: &[EncodedPair],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (tr_org, tr_aug, tr_labels) = frozen_embeddings(bundle, train)?;
    let (te_org, te_aug, te_labels) = frozen_embeddings(bundle, test)?;
    let classes = bundle.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(99);
    let mut probe = Cmd::new(
        "probe",
        bundle.arch.embedding_dim,
        classes,
        bundle.arch.hidden_dim,
        &mut rng,
    );
    let adam_cfg = crate::nn::AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    };
    let mut adam = crate::nn::Adam::default();
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let org = gather(&tr_org, &idx);
            let aug = gather(&tr_aug, &idx);
            let labels: Vec<usize> = idx.iter().map(|&i| tr_labels[i]).collect();
            let oh = one_hot(&labels, classes)?;
            let n = idx.len();
            let tags: Vec<ModalityTag> = std::iter::repeat_n(ModalityTag::Original, n)
                .chain(std::iter::repeat_n(ModalityTag::Augmented, n))
                .collect();
            probe.zero_grad();
            let logits = probe.forward_logits(
                &Tensor::stack(&org, &aug),
                &Tensor::stack(&oh, &oh),
                Mode::Train,
            );
            let d_hat: Vec<f64> = logits.iter().map(|&z| sigmoid(z) as f64).collect();
            let (_, grad) = cmd_discriminator_batch(&d_hat, &tags);
            let dlogit: Vec<f32> = grad
                .iter()
                .zip(&d_hat)
                .map(|(g, p)| (g * p * (1.0 - p)) as f32)
                .collect();
            probe.backward(&dlogit);
            adam.step(&adam_cfg, probe.params_mut());
        }
    }
    Ok(ProbeResult {
        train_accuracy: probe_accuracy(&mut probe, &tr_org, &tr_aug, &tr_labels, classes)?,
        test_accuracy: probe_accuracy(&mut probe, &te_org, &te_aug, &te_labels, classes)?,
    })
}
