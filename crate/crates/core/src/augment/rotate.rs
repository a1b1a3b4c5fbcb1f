use super::{AugmentError, Result};
use crate::datasets::{DatasetSplit, ImageSample, LabeledPattern, Payload};

/// Rotates a mask counter-clockwise (as displayed) by `degrees` about the
/// image center, sampling the source with nearest neighbor.
pub fn rotate_image(img: &ImageSample, degrees: f64) -> ImageSample {
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = ImageSample::blank(img.height, img.width);
    for r in 0..img.height {
        for col in 0..img.width {
            // destination in y-up coordinates, mapped back through R(-θ)
            let u = col as f64 - cx;
            let v = cy - r as f64;
            let su = u * c + v * s;
            let sv = -u * s + v * c;
            let sc = (cx + su).round();
            let sr = (cy - sv).round();
            if sr >= 0.0 && sc >= 0.0 && (sr as usize) < img.height && (sc as usize) < img.width {
                out.set(r, col, img.get(sr as usize, sc as usize));
            }
        }
    }
    out
}

/// Emits `copies` rotated variants per image at `k * step_degrees`, with ids
/// suffixed `#rot<k>`.
pub fn rotate_augment(
    split: &DatasetSplit,
    copies: usize,
    step_degrees: f64,
) -> Result<DatasetSplit> {
    if copies < 1 {
        return Err(AugmentError::Argument("copies must be at least 1".into()));
    }
    let mut patterns = Vec::with_capacity(split.len() * copies);
    for p in &split.patterns {
        let img = p
            .payload
            .as_image()
            .ok_or_else(|| AugmentError::Argument(format!("pattern {} is not an image", p.id)))?;
        for k in 0..copies {
            let rotated = if k == 0 {
                img.clone()
            } else {
                rotate_image(img, k as f64 * step_degrees)
            };
            patterns.push(LabeledPattern {
                id: format!("{}#rot{k}", p.id),
                label: p.label,
                payload: Payload::Image(rotated),
            });
        }
    }
    Ok(DatasetSplit::new(
        split.name,
        patterns,
        split.class_names.clone(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::SplitName;

    fn l_mask() -> ImageSample {
        let mut img = ImageSample::blank(10, 10);
        for r in 1..8 {
            img.set(r, 2, 1.0);
        }
        for c in 2..6 {
            img.set(7, c, 1.0);
        }
        img
    }

    #[test]
    fn quarter_turn_matches_grid_rotation() {
        let img = l_mask();
        let rot = rotate_image(&img, 90.0);
        let n = img.width;
        for r in 0..n {
            for c in 0..n {
                assert_eq!(rot.get(r, c), img.get(c, n - 1 - r), "({r},{c})");
            }
        }
    }

    #[test]
    fn sixty_copies_and_identity() {
        let split = DatasetSplit::new(
            SplitName::Train,
            vec![LabeledPattern {
                id: "a".into(),
                label: 0,
                payload: Payload::Image(l_mask()),
            }],
            vec!["x".into()],
        )
        .unwrap();
        let out = rotate_augment(&split, 60, 6.0).unwrap();
        assert_eq!(out.len(), 60);
        assert_eq!(out.patterns[59].id, "a#rot59");
        let id = rotate_augment(&split, 1, 6.0).unwrap();
        assert_eq!(id.patterns[0].id, "a#rot0");
        assert_eq!(id.patterns[0].payload, split.patterns[0].payload);
        assert!(rotate_augment(&split, 0, 6.0).is_err());
    }
}
