//! Parametric stroke templates used as a stand-in for handwriting corpora.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    stratified_split_named, DatasetError, DatasetSplit, LabeledPattern, Payload, Point, Result,
    TrajectorySample,
};

pub const TEMPLATE_NAMES: [&str; 10] = [
    "line",
    "circle",
    "zigzag",
    "spiral",
    "l_shape",
    "s_shape",
    "cross",
    "triangle",
    "u_shape",
    "figure_eight",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub class_count: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Standard deviation of per-point Gaussian noise.
    pub noise_sigma: f64,
    /// Rotation drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Probability that a sample is written in reverse: stroke order and
    /// point order within each stroke are both reversed. Changes the time
    /// series but not the rendered image.
    pub order_jitter: f64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 4,
            per_class: 50,
            seed: 0,
            noise_sigma: 0.02,
            max_rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            order_jitter: 0.0,
            train_fraction: 0.8,
        }
    }
}

fn polyline(corners: &[Point], per_segment: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(corners.len() * per_segment);
    for w in corners.windows(2) {
        for i in 0..per_segment {
            let t = i as f64 / per_segment as f64;
            out.push([
                w[0][0] + t * (w[1][0] - w[0][0]),
                w[0][1] + t * (w[1][1] - w[0][1]),
            ]);
        }
    }
    out.push(*corners.last().expect("non-empty polyline"));
    out
}

fn curve(points: usize, f: impl Fn(f64) -> Point) -> Vec<Point> {
    (0..points)
        .map(|i| f(i as f64 / (points - 1) as f64))
        .collect()
}

/// Noise-free strokes of template `class` (see [`TEMPLATE_NAMES`]).
pub fn template(class: usize) -> Vec<Vec<Point>> {
    match class {
        0 => vec![polyline(&[[-0.8, -0.8], [0.8, 0.8]], 24)],
        1 => vec![curve(33, |t| {
            [0.9 * (2.0 * PI * t).cos(), 0.9 * (2.0 * PI * t).sin()]
        })],
        2 => vec![polyline(
            &[
                [-1.0, -0.5],
                [-0.5, 0.5],
                [0.0, -0.5],
                [0.5, 0.5],
                [1.0, -0.5],
            ],
            8,
        )],
        3 => vec![curve(40, |t| {
            let r = 0.1 + 0.9 * t;
            let a = 4.0 * PI * t;
            [r * a.cos(), r * a.sin()]
        })],
        4 => vec![polyline(&[[-0.5, 1.0], [-0.5, -1.0], [0.5, -1.0]], 12)],
        5 => vec![curve(40, |t| {
            // upper half-circle clockwise into a lower half-circle
            if t < 0.5 {
                let a = PI / 2.0 + 2.0 * PI * t * 1.5;
                [0.5 * a.cos(), 0.5 + 0.5 * a.sin()]
            } else {
                let a = PI / 2.0 - 2.0 * PI * (t - 0.5) * 1.5;
                [0.5 * a.cos(), -0.5 + 0.5 * a.sin()]
            }
        })],
        6 => vec![
            polyline(&[[-1.0, 0.0], [1.0, 0.0]], 16),
            polyline(&[[0.0, 1.0], [0.0, -1.0]], 16),
        ],
        7 => vec![polyline(
            &[[0.0, 1.0], [-0.87, -0.5], [0.87, -0.5], [0.0, 1.0]],
            10,
        )],
        8 => vec![curve(36, |t| {
            if t < 0.35 {
                [-0.6, 1.0 - t / 0.35 * 1.4]
            } else if t < 0.65 {
                let a = PI + (t - 0.35) / 0.3 * PI;
                [0.6 * a.cos(), -0.4 + 0.6 * a.sin()]
            } else {
                [0.6, -0.4 + (t - 0.65) / 0.35 * 1.4]
            }
        })],
        9 => vec![curve(48, |t| {
            [0.5 * (4.0 * PI * t).sin(), (2.0 * PI * t).cos()]
        })],
        _ => panic!("template index {class} out of range"),
    }
}

/// Applies rotation (degrees), scale and per-point noise to strokes.
fn perturb<R: Rng>(
    strokes: &[Vec<Point>],
    rotation_deg: f64,
    scale: f64,
    noise: Option<&Normal<f64>>,
    rng: &mut R,
) -> Vec<Vec<Point>> {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    strokes
        .iter()
        .map(|stroke| {
            stroke
                .iter()
                .map(|p| {
                    let mut x = scale * (c * p[0] - s * p[1]);
                    let mut y = scale * (s * p[0] + c * p[1]);
                    if let Some(n) = noise {
                        x += n.sample(rng);
                        y += n.sample(rng);
                    }
                    [x, y]
                })
                .collect()
        })
        .collect()
}

/// Generates `class_count × per_class` trajectories and splits them 80/20.
pub fn synth_shapes(
    class_count: usize,
    per_class: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    synth_shapes_with(&SynthConfig {
        class_count,
        per_class,
        seed,
        ..SynthConfig::default()
    })
}

pub fn synth_shapes_with(cfg: &SynthConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    if !(2..=TEMPLATE_NAMES.len()).contains(&cfg.class_count) {
        return Err(DatasetError::Argument(format!(
            "class_count must be in [2, {}], got {}",
            TEMPLATE_NAMES.len(),
            cfg.class_count
        )));
    }
    if cfg.per_class < 4 {
        return Err(DatasetError::Argument(format!(
            "per_class must be at least 4, got {}",
            cfg.per_class
        )));
    }
    if cfg.noise_sigma.is_nan() || cfg.noise_sigma < 0.0 || !(0.0..=1.0).contains(&cfg.order_jitter)
    {
        return Err(DatasetError::Argument(
            "noise_sigma must be >= 0 and order_jitter in [0, 1]".into(),
        ));
    }
    if !(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max) {
        return Err(DatasetError::Argument(
            "need 0 < scale_min <= scale_max".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let mut patterns = Vec::with_capacity(cfg.class_count * cfg.per_class);
    for class in 0..cfg.class_count {
        let base = template(class);
        for i in 0..cfg.per_class {
            let rot = if cfg.max_rotation_deg > 0.0 {
                rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
            } else {
                0.0
            };
            let scale = if cfg.scale_max > cfg.scale_min {
                rng.random_range(cfg.scale_min..=cfg.scale_max)
            } else {
                cfg.scale_min
            };
            let mut strokes = perturb(&base, rot, scale, noise.as_ref(), &mut rng);
            if cfg.order_jitter > 0.0 && rng.random_bool(cfg.order_jitter) {
                strokes.reverse();
                strokes.iter_mut().for_each(|s| s.reverse());
            }
            patterns.push(LabeledPattern {
                id: format!("synth-{class:02}-{i:04}"),
                label: class,
                payload: Payload::Trajectory(TrajectorySample { strokes }),
            });
        }
    }
    let names = TEMPLATE_NAMES[..cfg.class_count]
        .iter()
        .map(|s| s.to_string())
        .collect();
    stratified_split_named(&patterns, cfg.train_fraction, cfg.seed, names)
}
