//! Alternating optimization: a discriminator step on the conditional
//! modality discriminator, then an encoder/gate/classifier step on the
//! weighted sum of classification, feature-distance and adversarial losses.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Modality;
use crate::losses::{
    classification_batch, cmd_discriminator_batch, cmd_encoder_batch, encoder_step_total,
    feature_distance_batch, LossError, LossWeights,
};
use crate::model::{
    gate_combine_batch, one_hot, save_checkpoint, Batch, EncodedPair, ModalityTag, ModelBundle,
    ModelError, Variant,
};
use crate::nn::{AdamConfig, Mode, Parameterized, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        #[source]
        source: LossError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which component of the proposed model is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No discriminator: adversarial weight forced to 0.
    NoCmd,
    /// No feature-distance term.
    NoFd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Replace the gating network's output by a constant.
    pub fixed_alpha: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            learning_rate: 1e-4,
            batch_size: 64,
            weights: LossWeights::default(),
            seed: 0,
            ablation: Ablation::None,
            checkpoint_every: 0,
            fixed_alpha: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        let lr = self.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if let Some(a) = self.fixed_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(TrainError::Config(format!(
                    "fixed alpha {a} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Adam with the fixed moment decay rates and this learning rate.
    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Loss weights after applying the ablation.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.ablation {
            Ablation::None => {}
            Ablation::NoCmd => w.w_adv = 0.0,
            Ablation::NoFd => w.w_fd = 0.0,
        }
        w
    }

    /// Whether the discriminator is trained at all.
    pub fn trains_cmd(&self) -> bool {
        self.effective_weights().w_adv > 0.0
    }
}

/// Losses of one encoder step (means over the batch).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub cls: f64,
    pub fd: f64,
    pub adv: f64,
    pub correct: usize,
    pub alpha_sum: f64,
}

/// Per-epoch training summary; losses are averaged over batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_fd: f64,
    pub loss_adv: f64,
    pub loss_disc: f64,
    /// Fraction of embeddings the discriminator assigned to the right
    /// modality during its own step.
    pub disc_accuracy: f64,
    pub train_accuracy: f64,
    /// Mean gate value; `None` for baselines.
    pub mean_alpha: Option<f64>,
    pub batches: usize,
    pub seconds: f64,
}

/// Returned by a training observer after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
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

/// Encoder outputs ordered as (original, augmented).
fn split_org_aug(org: Modality, f_ts: Tensor, f_img: Tensor) -> (Tensor, Tensor) {
    match org {
        Modality::TimeSeries => (f_ts, f_img),
        Modality::Image => (f_img, f_ts),
    }
}

/// Discriminator targets and probabilities for a stacked `[org; aug]`
/// batch.
fn cmd_inputs(
    f_org: &Tensor,
    f_aug: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<(Tensor, Tensor)> {
    let f = Tensor::stack(f_org, f_aug);
    let oh = one_hot(labels, classes)?;
    Ok((f, Tensor::stack(&oh, &oh)))
}

/// Result of one discriminator update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DiscStep {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// One discriminator update on `batch`. Encoders run with batch statistics
/// but are neither updated nor have their running statistics changed. A
/// no-op when the discriminator is ablated.
pub fn train_step_discriminator(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<DiscStep> {
    if bundle.variant != Variant::Proposed {
        return Err(TrainError::Config(
            "only the proposed model has a discriminator".into(),
        ));
    }
    if !cfg.trains_cmd() {
        return Ok(DiscStep::default());
    }
    let f_ts = bundle
        .encoder_ts
        .as_mut()
        .expect("ts encoder")
        .forward(&batch.ts, Mode::Frozen);
    let f_img = bundle
        .encoder_img
        .as_mut()
        .expect("image encoder")
        .forward(&batch.img, Mode::Frozen);
    let (f_org, f_aug) = split_org_aug(bundle.org_modality, f_ts, f_img);
    let (x, oh) = cmd_inputs(&f_org, &f_aug, &batch.labels, bundle.class_count)?;
    let n = batch.len();
    let tags: Vec<ModalityTag> = std::iter::repeat_n(ModalityTag::Original, n)
        .chain(std::iter::repeat_n(ModalityTag::Augmented, n))
        .collect();
    let cmd = bundle.cmd.as_mut().expect("discriminator");
    cmd.zero_grad();
    let d_hat = to_f64(&cmd.forward(&x, &oh, Mode::Train));
    let (loss, grad) = cmd_discriminator_batch(&d_hat, &tags);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: bundle.epoch,
            batch: 0,
            source: LossError::NonFinite {
                term: "discriminator",
                value: loss,
            },
        });
    }
    let dlogit: Vec<f32> = grad
        .iter()
        .zip(&d_hat)
        .map(|(g, p)| (g * p * (1.0 - p)) as f32)
        .collect();
    cmd.backward(&dlogit);
    bundle.cmd_opt.step(&cfg.optimizer(), cmd.params_mut());
    let correct = d_hat
        .iter()
        .zip(&tags)
        .filter(|(p, t)| (**p > 0.5) == (**t == ModalityTag::Augmented))
        .count();
    Ok(DiscStep {
        loss,
        correct,
        total: tags.len(),
    })
}

/// Forward and backward pass of the encoder step. Accumulates gradients
/// into the encoders, gate and classifier without updating them.
pub fn main_forward_backward(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let w = if bundle.variant == Variant::Proposed {
        cfg.effective_weights()
    } else {
        LossWeights {
            w_fd: 0.0,
            w_adv: 0.0,
            ..cfg.weights
        }
    };
    let classes = bundle.class_count;
    let n = batch.len();
    let f_ts = bundle
        .encoder_ts
        .as_mut()
        .map(|e| e.forward(&batch.ts, Mode::Train));
    let f_img = bundle
        .encoder_img
        .as_mut()
        .map(|e| e.forward(&batch.img, Mode::Train));

    let mut out = StepLosses::default();
    let (d_ts, d_img) = match bundle.variant {
        Variant::Proposed => {
            let (f_org, f_aug) = split_org_aug(bundle.org_modality, f_ts.unwrap(), f_img.unwrap());
            let alpha = match cfg.fixed_alpha {
                Some(a) => vec![a; n],
                None => bundle.gate.as_mut().expect("gating network").forward(
                    &batch.img,
                    &batch.ts,
                    Mode::Train,
                ),
            };
            out.alpha_sum = alpha.iter().map(|&a| a as f64).sum();
            let f = gate_combine_batch(&f_org, &f_aug, &alpha);
            let logits = bundle.classifier.forward(&f, Mode::Train);
            out.correct = score(&logits, &batch.labels);
            let (l_cls, g) = classification_batch(&to_f64(&logits.data), classes, &batch.labels);
            out.cls = l_cls;
            let g: Vec<f32> = g.iter().map(|v| (v * w.w_cls) as f32).collect();
            let df = bundle.classifier.backward(&Tensor::matrix(n, classes, g));

            let dim = f.sample_len();
            let mut d_alpha = vec![0.0f32; n];
            let mut d_org = df.clone();
            let mut d_aug = df.clone();
            for i in 0..n {
                let (o, a, g) = (f_org.sample(i), f_aug.sample(i), df.sample(i));
                d_alpha[i] = (0..dim).map(|j| g[j] * (o[j] - a[j])).sum();
                let row = i * dim..(i + 1) * dim;
                for ((o, a), &gj) in d_org.data[row.clone()]
                    .iter_mut()
                    .zip(&mut d_aug.data[row])
                    .zip(g)
                {
                    *o = alpha[i] * gj;
                    *a = (1.0 - alpha[i]) * gj;
                }
            }

            let pg = feature_distance_batch(&to_f64(&f_org.data), &to_f64(&f_aug.data), dim);
            out.fd = pg.loss;
            if w.w_fd > 0.0 {
                let scale =
                    |v: &[f64]| -> Vec<f32> { v.iter().map(|x| (x * w.w_fd) as f32).collect() };
                add_into(&mut d_org.data, &scale(&pg.grad_org));
                add_into(&mut d_aug.data, &scale(&pg.grad_aug));
            }

            if w.w_adv > 0.0 {
                let (x, oh) = cmd_inputs(&f_org, &f_aug, &batch.labels, classes)?;
                let cmd = bundle.cmd.as_mut().expect("discriminator");
                let d_hat = to_f64(&cmd.forward(&x, &oh, Mode::Frozen));
                let correct: Vec<f64> = d_hat
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| if k < n { 1.0 - p } else { p })
                    .collect();
                let (l_adv, g) = cmd_encoder_batch(&correct);
                out.adv = l_adv;
                let dlogit: Vec<f32> = g
                    .iter()
                    .zip(&d_hat)
                    .enumerate()
                    .map(|(k, (g, p))| {
                        let sign = if k < n { -1.0 } else { 1.0 };
                        (sign * g * p * (1.0 - p) * w.w_adv) as f32
                    })
                    .collect();
                let dx = cmd.backward(&dlogit);
                let (dxo, dxa) = dx.unstack(n);
                add_into(&mut d_org.data, &dxo.data);
                add_into(&mut d_aug.data, &dxa.data);
            }

            out.total = encoder_step_total(out.cls, out.fd, out.adv, &w).map_err(|source| {
                TrainError::NonFinite {
                    epoch: bundle.epoch,
                    batch: 0,
                    source,
                }
            })?;
            if cfg.fixed_alpha.is_none() {
                bundle
                    .gate
                    .as_mut()
                    .expect("gating network")
                    .backward(&d_alpha);
            }
            let (d_ts, d_img) = match bundle.org_modality {
                Modality::TimeSeries => (d_org, d_aug),
                Modality::Image => (d_aug, d_org),
            };
            (Some(d_ts), Some(d_img))
        }
        variant => {
            let f = match variant {
                Variant::ImageOnly => f_img.unwrap(),
                Variant::TsOnly => f_ts.unwrap(),
                _ => Tensor::concat_features(f_img.as_ref().unwrap(), f_ts.as_ref().unwrap()),
            };
            let logits = bundle.classifier.forward(&f, Mode::Train);
            out.correct = score(&logits, &batch.labels);
            let (l_cls, g) = classification_batch(&to_f64(&logits.data), classes, &batch.labels);
            out.cls = l_cls;
            out.total = encoder_step_total(l_cls, 0.0, 0.0, &w).map_err(|source| {
                TrainError::NonFinite {
                    epoch: bundle.epoch,
                    batch: 0,
                    source,
                }
            })?;
            let g: Vec<f32> = g.iter().map(|v| (v * w.w_cls) as f32).collect();
            let df = bundle.classifier.backward(&Tensor::matrix(n, classes, g));
            match variant {
                Variant::ImageOnly => (None, Some(df)),
                Variant::TsOnly => (Some(df), None),
                _ => {
                    let e = bundle.arch.embedding_dim;
                    let (di, dt) = df.split_features(e);
                    (Some(dt), Some(di))
                }
            }
        }
    };
    if let (Some(e), Some(d)) = (bundle.encoder_ts.as_mut(), d_ts) {
        e.backward(&d);
    }
    if let (Some(e), Some(d)) = (bundle.encoder_img.as_mut(), d_img) {
        e.backward(&d);
    }
    Ok(out)
}

fn score(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.sample(i)) == y)
        .count()
}

/// One encoder/gate/classifier update. The discriminator is held fixed.
pub fn train_step_main(
    bundle: &mut ModelBundle,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    for p in bundle.main_params_mut() {
        p.zero_grad();
    }
    let losses = main_forward_backward(bundle, batch, cfg)?;
    let opt = cfg.optimizer();
    let mut adam = bundle.main_opt;
    adam.step(&opt, bundle.main_params_mut());
    bundle.main_opt = adam;
    Ok(losses)
}

/// Batch order for `epoch`: a permutation derived from the seed and the
/// epoch number, cut into batches. A trailing batch of one sample is
/// dropped since batch normalization needs at least two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() > 1)
        .map(|c| c.to_vec())
        .collect()
}

/// Trains `bundle` from its current epoch up to `cfg.epochs`. `observer`
/// runs after every epoch and may stop training early.
pub fn fit(
    bundle: &mut ModelBundle,
    train: &[EncodedPair],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &ModelBundle) -> Control,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 training pairs, got {}",
            train.len()
        )));
    }
    if let Some(p) = train.iter().find(|p| p.label >= bundle.class_count) {
        return Err(TrainError::Config(format!(
            "pair {} has label {} but the model has {} classes",
            p.id, p.label, bundle.class_count
        )));
    }
    let with_disc = bundle.variant == Variant::Proposed && cfg.trains_cmd();
    let mut records = Vec::new();
    while bundle.epoch < cfg.epochs {
        let epoch = bundle.epoch;
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sum = StepLosses::default();
        let mut disc = DiscStep::default();
        let mut seen = 0;
        let started = std::time::Instant::now();
        for (b, idx) in batches.iter().enumerate() {
            let refs: Vec<&EncodedPair> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_pairs(&refs, &bundle.arch);
            let with_batch = |e: TrainError| match e {
                TrainError::NonFinite { source, .. } => TrainError::NonFinite {
                    epoch,
                    batch: b,
                    source,
                },
                other => other,
            };
            if with_disc {
                let d = train_step_discriminator(bundle, &batch, cfg).map_err(with_batch)?;
                disc.loss += d.loss;
                disc.correct += d.correct;
                disc.total += d.total;
            }
            let s = train_step_main(bundle, &batch, cfg).map_err(with_batch)?;
            sum.total += s.total;
            sum.cls += s.cls;
            sum.fd += s.fd;
            sum.adv += s.adv;
            sum.correct += s.correct;
            sum.alpha_sum += s.alpha_sum;
            seen += batch.len();
        }
        let nb = batches.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss_total: sum.total / nb,
            loss_cls: sum.cls / nb,
            loss_fd: sum.fd / nb,
            loss_adv: sum.adv / nb,
            loss_disc: disc.loss / nb,
            disc_accuracy: if disc.total > 0 {
                disc.correct as f64 / disc.total as f64
            } else {
                0.0
            },
            train_accuracy: sum.correct as f64 / seen as f64,
            mean_alpha: (bundle.variant == Variant::Proposed).then(|| sum.alpha_sum / seen as f64),
            batches: batches.len(),
            seconds: started.elapsed().as_secs_f64(),
        };
        bundle.epoch = epoch + 1;
        log::info!(
            "epoch {} loss {:.4} (cls {:.4} fd {:.4} adv {:.4} disc {:.4}) acc {:.3}",
            record.epoch,
            record.loss_total,
            record.loss_cls,
            record.loss_fd,
            record.loss_adv,
            record.loss_disc,
            record.train_accuracy
        );
        let control = observer(&record, bundle);
        records.push(record);
        if control == Control::Stop {
            break;
        }
    }
    Ok(records)
}

/// [`fit`] that also saves `bundle` to `dir` every `cfg.checkpoint_every`
/// epochs and after the last epoch. A run that aborts keeps the most recent
/// checkpoint on disk untouched.
pub fn fit_checkpointed(
    bundle: &mut ModelBundle,
    train: &[EncodedPair],
    cfg: &TrainConfig,
    dir: &Path,
    observer: &mut dyn FnMut(&EpochRecord, &ModelBundle) -> Control,
) -> Result<Vec<EpochRecord>> {
    let mut save_err = None;
    let records = fit(bundle, train, cfg, &mut |r, b| {
        let due = cfg.checkpoint_every > 0 && r.epoch % cfg.checkpoint_every == 0;
        if due {
            if let Err(e) = save_checkpoint(b, dir) {
                save_err = Some(e);
                return Control::Stop;
            }
        }
        observer(r, b)
    })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    save_checkpoint(bundle, dir)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{build_pairs, AugmentConfig};
    use crate::datasets::{default_class_names, synth_shapes};
    use crate::model::{encode_pairs, ArchConfig};
    use crate::nn::Param;

    fn arch() -> ArchConfig {
        ArchConfig {
            embedding_dim: 12,
            hidden_dim: 12,
            steps: 16,
            image_side: 16,
        }
    }

    fn data(classes: usize, per: usize) -> Vec<EncodedPair> {
        let a = arch();
        let (train, _) = synth_shapes(classes, per, 4).unwrap();
        let cfg = AugmentConfig {
            image_side: a.image_side,
            steps: a.steps,
            ..Default::default()
        };
        encode_pairs(&build_pairs(&train, &cfg).unwrap().pairs, &a).unwrap()
    }

    fn bundle(variant: Variant) -> ModelBundle {
        ModelBundle::new(
            variant,
            arch(),
            default_class_names(3),
            Modality::TimeSeries,
            11,
        )
        .unwrap()
    }

    fn batch(pairs: &[EncodedPair]) -> Batch {
        let refs: Vec<_> = pairs.iter().collect();
        Batch::from_pairs(&refs, &arch())
    }

    fn snapshot(ps: Vec<&Param>) -> Vec<Vec<f32>> {
        ps.into_iter().map(|p| p.value.clone()).collect()
    }

    #[test]
    fn discriminator_step_leaves_encoders_untouched() {
        let pairs = data(3, 5);
        let b = batch(&pairs[..8]);
        let mut m = bundle(Variant::Proposed);
        let enc_before = snapshot(m.encoder_ts.as_ref().unwrap().params());
        let bn_before: Vec<_> = m
            .encoder_img
            .as_ref()
            .unwrap()
            .buffers()
            .iter()
            .map(|b| b.value.clone())
            .collect();
        let cmd_before = snapshot(m.cmd.as_ref().unwrap().params());
        train_step_discriminator(&mut m, &b, &TrainConfig::default()).unwrap();
        assert_eq!(
            enc_before,
            snapshot(m.encoder_ts.as_ref().unwrap().params())
        );
        let bn_after: Vec<_> = m
            .encoder_img
            .as_ref()
            .unwrap()
            .buffers()
            .iter()
            .map(|b| b.value.clone())
            .collect();
        assert_eq!(bn_before, bn_after);
        assert_ne!(cmd_before, snapshot(m.cmd.as_ref().unwrap().params()));
    }

    #[test]
    fn main_step_leaves_discriminator_untouched() {
        let pairs = data(3, 5);
        let b = batch(&pairs[..8]);
        let mut m = bundle(Variant::Proposed);
        let cmd_before = snapshot(m.cmd.as_ref().unwrap().params());
        let bn_before: Vec<_> = m
            .cmd
            .as_ref()
            .unwrap()
            .buffers()
            .iter()
            .map(|b| b.value.clone())
            .collect();
        let gate_before = snapshot(m.gate.as_ref().unwrap().params());
        train_step_main(&mut m, &b, &TrainConfig::default()).unwrap();
        assert_eq!(cmd_before, snapshot(m.cmd.as_ref().unwrap().params()));
        let bn_after: Vec<_> = m
            .cmd
            .as_ref()
            .unwrap()
            .buffers()
            .iter()
            .map(|b| b.value.clone())
            .collect();
        assert_eq!(bn_before, bn_after);
        assert_ne!(gate_before, snapshot(m.gate.as_ref().unwrap().params()));
    }

    fn total_loss(m: &mut ModelBundle, b: &Batch, cfg: &TrainConfig) -> f64 {
        let mut probe = m.clone();
        main_forward_backward(&mut probe, b, cfg).unwrap().total
    }

    #[test]
    fn encoder_step_gradient_matches_finite_differences() {
        let pairs = data(3, 4);
        let b = batch(&pairs[..6]);
        let mut m = bundle(Variant::Proposed);
        // give the discriminator something non-trivial to say
        let cfg = TrainConfig {
            weights: LossWeights {
                w_cls: 1.0,
                w_fd: 0.5,
                w_adv: 2.0,
            },
            ..Default::default()
        };
        for _ in 0..3 {
            train_step_discriminator(&mut m, &b, &cfg).unwrap();
        }
        m.zero_grad();
        main_forward_backward(&mut m, &b, &cfg).unwrap();
        let targets = [
            "gate.head.weight",
            "gate.fc1.fc.weight",
            "encoder_ts.fc2.fc.weight",
            "encoder_img.fc2.bn.beta",
            "encoder_img.stack.conv3.weight",
            "classifier.out.weight",
        ];
        let h = 1e-3f32;
        for name in targets {
            let (analytic, coords) = {
                let p = m
                    .main_params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .unwrap();
                let coords: Vec<usize> = (0..4).map(|k| k * p.value.len() / 4).collect();
                (
                    coords.iter().map(|&i| p.grad[i] as f64).collect::<Vec<_>>(),
                    coords,
                )
            };
            let mut numeric = Vec::new();
            for &i in &coords {
                let mut plus = m.clone();
                plus.main_params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .unwrap()
                    .value[i] += h;
                let mut minus = m.clone();
                minus
                    .main_params_mut()
                    .into_iter()
                    .find(|p| p.name == name)
                    .unwrap()
                    .value[i] -= h;
                numeric.push(
                    (total_loss(&mut plus, &b, &cfg) - total_loss(&mut minus, &b, &cfg))
                        / (2.0 * h as f64),
                );
            }
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-4);
            assert!(
                diff / scale < 0.05,
                "{name}: analytic {analytic:?} numeric {numeric:?}"
            );
        }
    }

    #[test]
    fn fixed_alpha_one_reduces_to_single_modality_baseline() {
        let pairs = data(3, 6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 6,
            weights: LossWeights {
                w_cls: 1.0,
                w_fd: 0.0,
                w_adv: 0.0,
            },
            fixed_alpha: Some(1.0),
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut proposed = bundle(Variant::Proposed);
        let mut base = bundle(Variant::TsOnly);
        let a = fit(&mut proposed, &pairs, &cfg, &mut |_, _| Control::Continue).unwrap();
        let b = fit(&mut base, &pairs, &cfg, &mut |_, _| Control::Continue).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(
                (x.loss_cls - y.loss_cls).abs() < 1e-6,
                "{} vs {}",
                x.loss_cls,
                y.loss_cls
            );
        }
    }

    #[test]
    fn batches_cover_data_and_drop_singletons() {
        let b = epoch_batches(9, 4, 1, 0);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 4]);
        let all: std::collections::BTreeSet<_> =
            epoch_batches(10, 4, 1, 3).into_iter().flatten().collect();
        assert_eq!(all.len(), 10);
        assert_ne!(epoch_batches(10, 10, 1, 0), epoch_batches(10, 10, 1, 1));
        assert_eq!(epoch_batches(10, 10, 1, 2), epoch_batches(10, 10, 1, 2));
    }

    #[test]
    fn fit_is_deterministic_and_observer_can_stop() {
        let pairs = data(3, 4);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            ..Default::default()
        };
        let mut a = bundle(Variant::Proposed);
        let mut b = bundle(Variant::Proposed);
        let ra = fit(&mut a, &pairs, &cfg, &mut |r, _| {
            if r.epoch == 2 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        let rb = fit(&mut b, &pairs, &cfg, &mut |r, _| {
            if r.epoch == 2 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert_eq!(ra.len(), 2);
        let losses = |r: &[EpochRecord]| -> Vec<[f64; 5]> {
            r.iter()
                .map(|e| [e.loss_total, e.loss_cls, e.loss_fd, e.loss_adv, e.loss_disc])
                .collect()
        };
        assert_eq!(losses(&ra), losses(&rb));
        assert_eq!(a.epoch, 2);
        assert_eq!(
            snapshot(a.classifier.params()),
            snapshot(b.classifier.params())
        );
    }

    #[test]
    fn non_finite_loss_aborts() {
        let pairs = data(3, 4);
        let mut m = bundle(Variant::Proposed);
        m.classifier.out.bias.value[0] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let err = fit(&mut m, &pairs, &cfg, &mut |_, _| Control::Continue).unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::NonFinite {
                    epoch: 0,
                    batch: 0,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let pairs = data(3, 4);
        let mut m = bundle(Variant::Proposed);
        let cfg = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            fit(&mut m, &pairs, &cfg, &mut |_, _| Control::Continue),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn ablations_zero_their_terms() {
        let cfg = TrainConfig {
            ablation: Ablation::NoCmd,
            ..Default::default()
        };
        assert_eq!(cfg.effective_weights().w_adv, 0.0);
        assert!(!cfg.trains_cmd());
        let cfg = TrainConfig {
            ablation: Ablation::NoFd,
            ..Default::default()
        };
        assert_eq!(cfg.effective_weights().w_fd, 0.0);
        assert!(cfg.trains_cmd());
    }

    #[test]
    fn counts_steps_per_epoch() {
        let pairs = data(3, 6);
        let mut m = bundle(Variant::Proposed);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 5,
            ..Default::default()
        };
        let r = fit(&mut m, &pairs[..10], &cfg, &mut |_, _| Control::Continue).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(m.cmd_opt.steps, 2);
        assert_eq!(m.main_opt.steps, 2);
    }

    #[test]
    fn untrained_discriminator_is_at_chance() {
        let pairs = data(3, 6);
        let b = batch(&pairs[..12]);
        let mut m = bundle(Variant::Proposed);
        let d = train_step_discriminator(&mut m, &b, &TrainConfig::default()).unwrap();
        assert!((d.loss - std::f64::consts::LN_2).abs() < 0.1, "{}", d.loss);
    }

    #[test]
    fn no_cmd_discriminator_step_is_a_noop() {
        let pairs = data(3, 4);
        let b = batch(&pairs[..6]);
        let mut m = bundle(Variant::Proposed);
        let before = snapshot(m.cmd.as_ref().unwrap().params());
        let cfg = TrainConfig {
            ablation: Ablation::NoCmd,
            ..Default::default()
        };
        assert_eq!(
            train_step_discriminator(&mut m, &b, &cfg).unwrap().loss,
            0.0
        );
        assert_eq!(before, snapshot(m.cmd.as_ref().unwrap().params()));
        assert_eq!(m.cmd_opt.steps, 0);
    }

    #[test]
    fn zero_classifier_gives_uniform_loss() {
        let a = arch();
        let (train, _) = synth_shapes(6, 4, 4).unwrap();
        let acfg = AugmentConfig {
            image_side: a.image_side,
            steps: a.steps,
            ..Default::default()
        };
        let pairs = encode_pairs(&build_pairs(&train, &acfg).unwrap().pairs, &a).unwrap();
        let mut m = ModelBundle::new(
            Variant::Proposed,
            a,
            default_class_names(6),
            Modality::TimeSeries,
            1,
        )
        .unwrap();
        for p in m.classifier.out.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let s =
            main_forward_backward(&mut m, &batch(&pairs[..8]), &TrainConfig::default()).unwrap();
        assert!((s.cls - 6f64.ln()).abs() < 1e-3, "{}", s.cls);
    }

    #[test]
    fn checkpoints_written_periodically_and_at_end() {
        let pairs = data(3, 4);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("latest");
        let mut m = bundle(Variant::Proposed);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            checkpoint_every: 2,
            ..Default::default()
        };
        let mut seen = Vec::new();
        fit_checkpointed(&mut m, &pairs, &cfg, &ckpt, &mut |r, _| {
            seen.push((
                r.epoch,
                crate::model::load_checkpoint(&ckpt).map(|b| b.epoch).ok(),
            ));
            Control::Continue
        })
        .unwrap();
        assert_eq!(seen, vec![(1, None), (2, Some(2)), (3, Some(2))]);
        assert_eq!(crate::model::load_checkpoint(&ckpt).unwrap().epoch, 3);
    }
}
