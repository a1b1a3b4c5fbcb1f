//! Training losses: feature distance (hard consistency), the conditional
//! modality discriminator's two adversarial objectives (soft consistency),
//! and softmax cross-entropy for classification.
//!
//! Losses are evaluated in f64. Batch variants return the mean loss and its
//! gradient with respect to their inputs; the network side is f32.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModalityTag;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite {term} loss: {value}")]
    NonFinite { term: &'static str, value: f64 },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_fd: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 1.0,
            w_fd: 1.0,
            w_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, w) in [
            ("w_cls", self.w_cls),
            ("w_fd", self.w_fd),
            ("w_adv", self.w_adv),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(LossError::InvalidWeights(format!("{name} = {w}")));
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `d(clamp(p))/dp`: 1 strictly inside the clamp range, 0 outside.
fn clamp_slope(p: f64) -> f64 {
    if p > PROB_EPS && p < 1.0 - PROB_EPS {
        1.0
    } else {
        0.0
    }
}

/// Half the squared L2 distance between two embeddings.
pub fn feature_distance_loss(f_org: &[f64], f_aug: &[f64]) -> f64 {
    assert_eq!(f_org.len(), f_aug.len(), "embedding lengths differ");
    0.5 * f_org
        .iter()
        .zip(f_aug)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub grad_org: Vec<f64>,
    pub grad_aug: Vec<f64>,
}

/// Mean feature distance over a batch of row-major `[n, dim]` embeddings.
pub fn feature_distance_batch(f_org: &[f64], f_aug: &[f64], dim: usize) -> PairGrad {
    assert_eq!(f_org.len(), f_aug.len());
    assert!(dim > 0 && f_org.len().is_multiple_of(dim));
    let n = f_org.len() / dim;
    let scale = 1.0 / n as f64;
    let loss = f_org
        .chunks(dim)
        .zip(f_aug.chunks(dim))
        .map(|(a, b)| feature_distance_loss(a, b))
        .sum::<f64>()
        * scale;
    let grad_org: Vec<f64> = f_org
        .iter()
        .zip(f_aug)
        .map(|(a, b)| (a - b) * scale)
        .collect();
    let grad_aug = grad_org.iter().map(|g| -g).collect();
    PairGrad {
        loss,
        grad_org,
        grad_aug,
    }
}

/// Binary cross-entropy of the discriminator's prediction `d_hat` (the
/// probability of "self-augmented") against the true modality `d`.
pub fn cmd_discriminator_loss(d_hat: f64, d: ModalityTag) -> f64 {
    let p = clamp_prob(d_hat);
    let t = d.target();
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean discriminator loss and its gradient with respect to each `d_hat`.
pub fn cmd_discriminator_batch(d_hat: &[f64], d: &[ModalityTag]) -> (f64, Vec<f64>) {
    assert_eq!(d_hat.len(), d.len());
    assert!(!d_hat.is_empty());
    let n = d_hat.len() as f64;
    let loss = d_hat
        .iter()
        .zip(d)
        .map(|(&p, &t)| cmd_discriminator_loss(p, t))
        .sum::<f64>()
        / n;
    let grad = d_hat
        .iter()
        .zip(d)
        .map(|(&p, &t)| {
            let q = clamp_prob(p);
            let t = t.target();
            (-t / q + (1.0 - t) / (1.0 - q)) * clamp_slope(p) / n
        })
        .collect();
    (loss, grad)
}

/// Encoder-side adversarial loss `-ln(1 - d_hat_correct)`, where
/// `d_hat_correct` is the probability the discriminator assigns to the
/// sample's true modality.
pub fn cmd_encoder_loss(d_hat_correct: f64) -> f64 {
    -(1.0 - clamp_prob(d_hat_correct)).ln()
}

/// Mean encoder adversarial loss and gradient w.r.t. each `d_hat_correct`.
pub fn cmd_encoder_batch(d_hat_correct: &[f64]) -> (f64, Vec<f64>) {
    assert!(!d_hat_correct.is_empty());
    let n = d_hat_correct.len() as f64;
    let loss = d_hat_correct
        .iter()
        .map(|&p| cmd_encoder_loss(p))
        .sum::<f64>()
        / n;
    let grad = d_hat_correct
        .iter()
        .map(|&p| clamp_slope(p) / (1.0 - clamp_prob(p)) / n)
        .collect();
    (loss, grad)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Softmax cross-entropy `-log softmax(logits)[label]`.
pub fn classification_loss(logits: &[f64], label: usize) -> f64 {
    assert!(label < logits.len(), "label out of range");
    log_sum_exp(logits) - logits[label]
}

/// Mean cross-entropy over row-major `[n, classes]` logits, with gradient.
pub fn classification_batch(logits: &[f64], classes: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), classes * labels.len());
    assert!(!labels.is_empty());
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(classes).zip(labels) {
        loss += classification_loss(row, y);
        for (k, p) in softmax(row).into_iter().enumerate() {
            let t = if k == y { 1.0 } else { 0.0 };
            grad.push((p - t) / n);
        }
    }
    (loss / n, grad)
}

/// Weighted total minimized by the encoder/gate/classifier step.
pub fn encoder_step_total(
    l_cls: f64,
    l_fd: f64,
    l_adv: f64,
    w: &LossWeights,
) -> Result<f64, LossError> {
    for (term, value) in [
        ("classification", l_cls),
        ("feature distance", l_fd),
        ("adversarial", l_adv),
    ] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
    }
    Ok(w.w_cls * l_cls + w.w_fd * l_fd + w.w_adv * l_adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn feature_distance_examples() {
        let a = vec![0.3; 512];
        assert_eq!(feature_distance_loss(&a, &a), 0.0);
        let mut b = a.clone();
        b[7] += 1.0;
        assert!((feature_distance_loss(&a, &b) - 0.5).abs() < 1e-12);
        let mut c = vec![0.0; 512];
        c[0] = 3.0;
        c[1] = 4.0;
        assert!((feature_distance_loss(&c, &vec![0.0; 512]) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn discriminator_examples() {
        assert!((cmd_discriminator_loss(0.5, ModalityTag::Augmented) - LN2).abs() < 1e-6);
        assert!((cmd_discriminator_loss(0.5, ModalityTag::Original) - LN2).abs() < 1e-6);
        assert!(cmd_discriminator_loss(1.0, ModalityTag::Augmented) < 1e-6);
        assert!(cmd_discriminator_loss(0.0, ModalityTag::Augmented).is_finite());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn encoder_adversarial_examples() {
        assert!((cmd_encoder_loss(0.5) - 0.693147).abs() < 1e-6);
        assert!(cmd_encoder_loss(0.0) < 1e-6);
        assert!((cmd_encoder_loss(0.9) - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn classification_examples() {
        assert!((classification_loss(&[0.0; 6], 3) - 6f64.ln()).abs() < 1e-6);
        assert!((classification_loss(&[0.0, 0.0], 0) - LN2).abs() < 1e-6);
        assert!((classification_loss(&[0.0, 0.0], 1) - LN2).abs() < 1e-6);
        assert!(classification_loss(&[0.0, 60.0, -3.0], 1) < 1e-6);
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert_eq!(encoder_step_total(1.0, 2.0, 3.0, &w).unwrap(), 6.0);
        let no_fd = LossWeights { w_fd: 0.0, ..w };
        assert_eq!(encoder_step_total(1.0, 2.0, 3.0, &no_fd).unwrap(), 4.0);
        let no_cmd = LossWeights { w_adv: 0.0, ..w };
        assert_eq!(encoder_step_total(1.0, 2.0, 3.0, &no_cmd).unwrap(), 3.0);
        let err = encoder_step_total(1.0, f64::NAN, 3.0, &w).unwrap_err();
        assert!(matches!(
            err,
            LossError::NonFinite {
                term: "feature distance",
                ..
            }
        ));
        assert!(LossWeights { w_cls: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn clamped_gradients_vanish() {
        let (_, g) = cmd_encoder_batch(&[1.0]);
        assert_eq!(g[0], 0.0);
        let (l, g) = cmd_discriminator_batch(&[0.0], &[ModalityTag::Augmented]);
        assert!(l.is_finite());
        assert_eq!(g[0], 0.0);
    }

    proptest! {
        #[test]
        fn feature_distance_nonnegative_and_zero_iff_equal(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let l = feature_distance_loss(&a, &b);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
        }

        #[test]
        fn batch_means_are_order_invariant(
            p in prop::collection::vec(0.01f64..0.99, 2..12),
            shift in 0usize..12,
        ) {
            let d: Vec<ModalityTag> = (0..p.len())
                .map(|i| if i % 2 == 0 { ModalityTag::Original } else { ModalityTag::Augmented })
                .collect();
            let k = shift % p.len();
            let mut p2 = p.clone();
            let mut d2 = d.clone();
            p2.rotate_left(k);
            d2.rotate_left(k);
            let (a, _) = cmd_discriminator_batch(&p, &d);
            let (b, _) = cmd_discriminator_batch(&p2, &d2);
            prop_assert!((a - b).abs() < 1e-12);

            let labels: Vec<usize> = (0..p.len()).map(|i| i % 3).collect();
            let logits: Vec<f64> = p.iter().flat_map(|&v| [v, 1.0 - v, v * v]).collect();
            let mut labels2 = labels.clone();
            labels2.rotate_left(k);
            let mut logits2 = logits.clone();
            logits2.rotate_left(3 * k);
            let (c, _) = classification_batch(&logits, 3, &labels);
            let (e, _) = classification_batch(&logits2, 3, &labels2);
            prop_assert!((c - e).abs() < 1e-12);
        }

        #[test]
        fn encoder_loss_monotone_in_correct_probability(x in 0.001f64..0.998, dx in 1e-4f64..1e-3) {
            prop_assert!(cmd_encoder_loss(x) < cmd_encoder_loss(x + dx));
        }

        #[test]
        fn argmax_and_loss_shift_invariant(
            logits in prop::collection::vec(-10.0f64..10.0, 5),
            c in -50.0f64..50.0,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            for y in 0..5 {
                let a = classification_loss(&logits, y);
                let b = classification_loss(&shifted, y);
                prop_assert!((a - b).abs() < 1e-9);
            }
            let s: f64 = softmax(&logits).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
