//! Labeled patterns in either modality: pen trajectories (time series) and
//! binary rasters (images). Loading, synthetic generation, normalization,
//! fixed-length encoding and stratified splitting.

mod loader;
pub mod pgm;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

pub use loader::{load_dataset, load_dataset_with, DataFormat, SplitFile};
pub use synth::{synth_shapes, synth_shapes_with, template, SynthConfig, TEMPLATE_NAMES};

/// Default number of resampled time steps.
pub const DEFAULT_STEPS: usize = 50;
/// Default raster side length.
pub const DEFAULT_SIDE: usize = 32;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// A 2-D point `[x, y]` in source units (y up).
pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TimeSeries,
    Image,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::TimeSeries => Modality::Image,
            Modality::Image => Modality::TimeSeries,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::TimeSeries => "time_series",
            Modality::Image => "image",
        }
    }
}

/// Pen strokes; each stroke is one pen-down segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub strokes: Vec<Vec<Point>>,
}

impl TrajectorySample {
    /// Validates: at least one stroke, two points per stroke, finite values.
    pub fn new(strokes: Vec<Vec<Point>>) -> Result<Self> {
        let t = TrajectorySample { strokes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strokes.is_empty() {
            return Err(DatasetError::Degenerate("trajectory has no strokes".into()));
        }
        for (i, s) in self.strokes.iter().enumerate() {
            if s.len() < 2 {
                return Err(DatasetError::Degenerate(format!(
                    "stroke {i} has {} point(s), need at least 2",
                    s.len()
                )));
            }
            if s.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DatasetError::Degenerate(format!(
                    "stroke {i} has non-finite coordinates"
                )));
            }
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.strokes.iter().flatten()
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }
}

/// Single-channel raster, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageSample {
    pub fn blank(height: usize, width: usize) -> Self {
        ImageSample {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DatasetError::Argument(
                "image dimensions must be positive".into(),
            ));
        }
        if pixels.len() != height * width {
            return Err(DatasetError::Argument(format!(
                "expected {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DatasetError::Argument(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(ImageSample {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    /// Foreground test at the 0.5 threshold.
    pub fn is_on(&self, row: usize, col: usize) -> bool {
        self.get(row, col) >= 0.5
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p >= 0.5).count()
    }

    /// Resamples a binary mask to `side × side`: pads to a centered square,
    /// box-averages source pixels per target pixel, thresholds at 0.5.
    pub fn resample_square(&self, side: usize) -> ImageSample {
        let s = self.height.max(self.width);
        let (oy, ox) = ((s - self.height) / 2, (s - self.width) / 2);
        let mut out = ImageSample::blank(side, side);
        for r in 0..side {
            let y0 = r * s / side;
            let y1 = ((r + 1) * s / side).max(y0 + 1);
            for c in 0..side {
                let x0 = c * s / side;
                let x1 = ((c + 1) * s / side).max(x0 + 1);
                let mut on = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let inside =
                            y >= oy && y < oy + self.height && x >= ox && x < ox + self.width;
                        if inside && self.is_on(y - oy, x - ox) {
                            on += 1;
                        }
                    }
                }
                if 2 * on >= (y1 - y0) * (x1 - x0) {
                    out.set(r, c, 1.0);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Trajectory(TrajectorySample),
    Image(ImageSample),
}

impl Payload {
    pub fn modality(&self) -> Modality {
        match self {
            Payload::Trajectory(_) => Modality::TimeSeries,
            Payload::Image(_) => Modality::Image,
        }
    }

    pub fn as_trajectory(&self) -> Option<&TrajectorySample> {
        match self {
            Payload::Trajectory(t) => Some(t),
            Payload::Image(_) => None,
        }
    }

    pub fn as_image(&self) -> Option<&ImageSample> {
        match self {
            Payload::Image(i) => Some(i),
            Payload::Trajectory(_) => None,
        }
    }
}

/// A labeled pattern. Its modality is the payload's kind.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPattern {
    pub id: String,
    pub label: usize,
    pub payload: Payload,
}

impl LabeledPattern {
    pub fn modality(&self) -> Modality {
        self.payload.modality()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub patterns: Vec<LabeledPattern>,
    pub class_count: usize,
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    pub fn new(
        name: SplitName,
        patterns: Vec<LabeledPattern>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let split = DatasetSplit {
            name,
            patterns,
            class_count: class_names.len(),
            class_names,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.patterns {
            if p.label >= self.class_count {
                return Err(DatasetError::Schema(format!(
                    "pattern {} has label {} but class count is {}",
                    p.id, p.label, self.class_count
                )));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(DatasetError::Schema(format!(
                    "duplicate id {} in {} split",
                    p.id,
                    self.name.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for p in &self.patterns {
            h[p.label] += 1;
        }
        h
    }
}

/// Generic class names `class0 .. class{c-1}`.
pub fn default_class_names(count: usize) -> Vec<String> {
    (0..count).map(|k| format!("class{k}")).collect()
}

/// Splits per class so each class contributes `round(n_c * train_fraction)`
/// patterns (clamped to `[1, n_c - 1]`) to the training split. Output
/// splits are ordered by id.
pub fn stratified_split(
    patterns: &[LabeledPattern],
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let class_count = patterns.iter().map(|p| p.label + 1).max().unwrap_or(0);
    stratified_split_named(
        patterns,
        train_fraction,
        seed,
        default_class_names(class_count),
    )
}

pub(crate) fn stratified_split_named(
    patterns: &[LabeledPattern],
    train_fraction: f64,
    seed: u64,
    class_names: Vec<String>,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<&LabeledPattern>> = BTreeMap::new();
    for p in patterns {
        by_class.entry(p.label).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut group) in by_class {
        if group.len() < 2 {
            return Err(DatasetError::Split(format!(
                "class {label} has {} pattern(s); need at least 2",
                group.len()
            )));
        }
        group.sort_by(|a, b| a.id.cmp(&b.id));
        group.shuffle(&mut rng);
        let n = group.len();
        let k = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        train.extend(group[..k].iter().map(|p| (*p).clone()));
        test.extend(group[k..].iter().map(|p| (*p).clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((
        DatasetSplit::new(SplitName::Train, train, class_names.clone())?,
        DatasetSplit::new(SplitName::Test, test, class_names)?,
    ))
}

/// Centers the trajectory at its point centroid and scales isotropically so
/// that `max(|x|, |y|) = 1`.
pub fn normalize_trajectory(t: &TrajectorySample) -> Result<TrajectorySample> {
    t.validate()?;
    let n = t.point_count() as f64;
    let (sx, sy) = t
        .points()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    let (cx, cy) = (sx / n, sy / n);
    let extent = t
        .points()
        .map(|p| (p[0] - cx).abs().max((p[1] - cy).abs()))
        .fold(0.0, f64::max);
    if extent <= 0.0 {
        return Err(DatasetError::Degenerate(
            "trajectory has zero extent".into(),
        ));
    }
    let strokes = t
        .strokes
        .iter()
        .map(|s| {
            s.iter()
                .map(|p| [(p[0] - cx) / extent, (p[1] - cy) / extent])
                .collect()
        })
        .collect();
    Ok(TrajectorySample { strokes })
}

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Encodes a trajectory as a `(3, steps)` grid: x, y and a pen-down flag.
///
/// Samples are spaced uniformly along the cumulative arc length of the
/// strokes (pen-up jumps have zero length). The flag is 0 on the first
/// sample that falls in a new stroke and 1 elsewhere.
pub fn to_tensor(t: &TrajectorySample, steps: usize) -> Result<Tensor> {
    if steps < 2 {
        return Err(DatasetError::Argument(format!(
            "steps must be at least 2, got {steps}"
        )));
    }
    t.validate()?;
    let seg_lens: Vec<Vec<f64>> = t
        .strokes
        .iter()
        .map(|s| s.windows(2).map(|w| dist(&w[0], &w[1])).collect())
        .collect();
    let stroke_lens: Vec<f64> = seg_lens.iter().map(|v| v.iter().sum()).collect();
    let total: f64 = stroke_lens.iter().sum();
    if total <= 0.0 {
        return Err(DatasetError::Degenerate(
            "trajectory has zero arc length".into(),
        ));
    }
    let last = t.strokes.len() - 1;
    let mut data = vec![0.0f32; 3 * steps];
    let (mut stroke, mut stroke_start) = (0usize, 0.0f64);
    let (mut seg, mut seg_start) = (0usize, 0.0f64);
    let mut prev_stroke = 0usize;
    for k in 0..steps {
        let s = if k == steps - 1 {
            total
        } else {
            total * k as f64 / (steps - 1) as f64
        };
        while stroke < last && s >= stroke_start + stroke_lens[stroke] {
            stroke_start += stroke_lens[stroke];
            stroke += 1;
            seg = 0;
            seg_start = 0.0;
        }
        let local = (s - stroke_start).max(0.0);
        let segs = &seg_lens[stroke];
        while seg + 1 < segs.len() && local >= seg_start + segs[seg] {
            seg_start += segs[seg];
            seg += 1;
        }
        let pts = &t.strokes[stroke];
        let frac = if segs[seg] > 0.0 {
            ((local - seg_start) / segs[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (pts[seg], pts[seg + 1]);
        data[k] = (a[0] + frac * (b[0] - a[0])) as f32;
        data[steps + k] = (a[1] + frac * (b[1] - a[1])) as f32;
        data[2 * steps + k] = if k > 0 && stroke != prev_stroke {
            0.0
        } else {
            1.0
        };
        prev_stroke = stroke;
    }
    Ok(Tensor::from_vec(1, 3, 1, steps, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(strokes: Vec<Vec<Point>>) -> TrajectorySample {
        TrajectorySample::new(strokes).unwrap()
    }

    fn close(a: &TrajectorySample, b: &TrajectorySample, tol: f64) -> bool {
        a.strokes.len() == b.strokes.len()
            && a.points()
                .zip(b.points())
                .all(|(p, q)| (p[0] - q[0]).abs() <= tol && (p[1] - q[1]).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_trajectory(&traj(vec![vec![[0.0, 0.0], [2.0, 0.0]]])).unwrap();
        assert!(close(&n, &traj(vec![vec![[-1.0, 0.0], [1.0, 0.0]]]), 1e-12));
        let n = normalize_trajectory(&traj(vec![vec![[0.0, 0.0], [0.0, 4.0]]])).unwrap();
        assert!(close(&n, &traj(vec![vec![[0.0, -1.0], [0.0, 1.0]]]), 1e-12));
        let n = normalize_trajectory(&traj(vec![vec![[1.0, 1.0], [3.0, 5.0]]])).unwrap();
        assert!(close(
            &n,
            &traj(vec![vec![[-0.5, -1.0], [0.5, 1.0]]]),
            1e-12
        ));
    }

    #[test]
    fn normalize_rejects_zero_extent() {
        let t = traj(vec![vec![[2.0, 2.0], [2.0, 2.0]]]);
        assert!(matches!(
            normalize_trajectory(&t),
            Err(DatasetError::Degenerate(_))
        ));
    }

    #[test]
    fn trajectory_validation() {
        assert!(TrajectorySample::new(vec![]).is_err());
        assert!(TrajectorySample::new(vec![vec![[0.0, 0.0]]]).is_err());
        assert!(TrajectorySample::new(vec![vec![[0.0, f64::NAN], [1.0, 1.0]]]).is_err());
    }

    #[test]
    fn to_tensor_straight_line() {
        let t = traj(vec![vec![[-1.0, 0.0], [1.0, 0.0]]]);
        let g = to_tensor(&t, 5).unwrap();
        assert_eq!(&g.data[0..5], &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(&g.data[5..10], &[0.0; 5]);
        assert_eq!(&g.data[10..15], &[1.0; 5]);
    }

    #[test]
    fn to_tensor_rejects_short_steps() {
        let t = traj(vec![vec![[-1.0, 0.0], [1.0, 0.0]]]);
        assert!(matches!(to_tensor(&t, 1), Err(DatasetError::Argument(_))));
    }

    fn sample(label: usize, i: usize) -> LabeledPattern {
        LabeledPattern {
            id: format!("p{label}-{i:03}"),
            label,
            payload: Payload::Trajectory(traj(vec![vec![[0.0, 0.0], [i as f64 + 1.0, 1.0]]])),
        }
    }

    #[test]
    fn stratified_split_balanced() {
        let pats: Vec<_> = (0..2)
            .flat_map(|c| (0..50).map(move |i| sample(c, i)))
            .collect();
        let (tr, te) = stratified_split(&pats, 0.8, 1).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 20);
        assert_eq!(tr.class_histogram(), vec![40, 40]);
        let (tr2, te2) = stratified_split(&pats, 0.8, 1).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
    }

    #[test]
    fn stratified_split_rounding() {
        let mut pats: Vec<_> = (0..11).map(|i| sample(0, i)).collect();
        pats.extend((0..9).map(|i| sample(1, i)));
        let (tr, _) = stratified_split(&pats, 0.8, 5).unwrap();
        let h = tr.class_histogram();
        // Every rounding outcome within ±1 of the exact share.
        let allowed0: Vec<usize> = (0..=11)
            .filter(|k| (*k as f64 - 8.8).abs() <= 1.0)
            .collect();
        let allowed1: Vec<usize> = (0..=9).filter(|k| (*k as f64 - 7.2).abs() <= 1.0).collect();
        assert_eq!(allowed0, vec![8, 9]);
        assert_eq!(allowed1, vec![7, 8]);
        assert!(allowed0.contains(&h[0]));
        assert!(allowed1.contains(&h[1]));
    }

    #[test]
    fn stratified_split_errors() {
        let pats = vec![sample(0, 0), sample(0, 1), sample(1, 0)];
        assert!(matches!(
            stratified_split(&pats, 0.8, 0),
            Err(DatasetError::Split(_))
        ));
        assert!(matches!(
            stratified_split(&pats[..2], 1.0, 0),
            Err(DatasetError::Argument(_))
        ));
    }

    #[test]
    fn resample_square_keeps_filled_block() {
        let mut img = ImageSample::blank(64, 64);
        for r in 16..48 {
            for c in 16..48 {
                img.set(r, c, 1.0);
            }
        }
        let small = img.resample_square(32);
        assert_eq!(small.foreground_count(), 16 * 16);
        assert!(small.is_on(8, 8) && small.is_on(23, 23) && !small.is_on(7, 8));
    }

    fn arb_traj() -> impl Strategy<Value = TrajectorySample> {
        prop::collection::vec(
            prop::collection::vec(
                (-50.0f64..50.0, -50.0f64..50.0).prop_map(|(x, y)| [x, y]),
                2..8,
            ),
            1..4,
        )
        .prop_map(|strokes| TrajectorySample { strokes })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(t in arb_traj()) {
            if let Ok(n1) = normalize_trajectory(&t) {
                let n2 = normalize_trajectory(&n1).unwrap();
                prop_assert!(close(&n1, &n2, 1e-12));
            }
        }

        #[test]
        fn tensor_is_finite_and_bounded(t in arb_traj(), steps in 2usize..80) {
            if let Ok(n) = normalize_trajectory(&t) {
                if let Ok(g) = to_tensor(&n, steps) {
                    prop_assert_eq!(g.data.len(), 3 * steps);
                    for v in &g.data[..2 * steps] {
                        prop_assert!(v.is_finite() && v.abs() <= 1.0 + 1e-6);
                    }
                    for v in &g.data[2 * steps..] {
                        prop_assert!(*v == 0.0 || *v == 1.0);
                    }
                }
            }
        }

        #[test]
        fn split_is_a_partition(n0 in 2usize..20, n1 in 2usize..20, seed in 0u64..100, f in 0.1f64..0.9) {
            let mut pats: Vec<_> = (0..n0).map(|i| sample(0, i)).collect();
            pats.extend((0..n1).map(|i| sample(1, i)));
            let (tr, te) = stratified_split(&pats, f, seed).unwrap();
            let mut ids: Vec<_> = tr.patterns.iter().chain(&te.patterns).map(|p| p.id.clone()).collect();
            ids.sort();
            let mut want: Vec<_> = pats.iter().map(|p| p.id.clone()).collect();
            want.sort();
            prop_assert_eq!(ids, want);
            for (c, n) in [(0, n0), (1, n1)] {
                let k = tr.class_histogram()[c] as f64;
                prop_assert!((k - n as f64 * f).abs() <= 1.0);
            }
        }
    }
}
