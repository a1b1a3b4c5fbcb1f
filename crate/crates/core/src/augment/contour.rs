//! Outer-boundary extraction by Moore-neighbor tracing.

use std::collections::VecDeque;

use super::{AugmentError, Result};
use crate::datasets::{normalize_trajectory, ImageSample, Point, TrajectorySample};

/// Minimum number of boundary pixels for a usable contour.
pub const MIN_CONTOUR_POINTS: usize = 8;

/// Clockwise on screen (row grows downward), starting west.
const DIRS: [(i64, i64); 8] = [
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
];

/// Labels of the largest 8-connected foreground component (ties go to the
/// component found first in raster order), as a boolean mask.
pub fn largest_component(img: &ImageSample) -> Option<Vec<bool>> {
    let (h, w) = (img.height, img.width);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (label, area)
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if label[start] != usize::MAX || img.pixels[start] < 0.5 {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let mut area = 0;
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for (dr, dc) in DIRS {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if label[j] == usize::MAX && img.pixels[j] >= 0.5 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if best.is_none_or(|(_, a)| area > a) {
            best = Some((next, area));
        }
        next += 1;
    }
    let (keep, _) = best?;
    Some(label.into_iter().map(|l| l == keep).collect())
}

/// Boundary pixels `(row, col)` of the largest component in clockwise visit
/// order, starting at its top-most, then left-most pixel. Tracing stops on
/// re-entering the start pixel from the starting backtrack position.
pub fn trace_boundary(img: &ImageSample) -> Result<Vec<(usize, usize)>> {
    let mask = largest_component(img)
        .ok_or_else(|| AugmentError::Degenerate("image has no foreground pixels".into()))?;
    let (h, w) = (img.height as i64, img.width as i64);
    let fg = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && mask[(r * w + c) as usize];
    let first = mask
        .iter()
        .position(|&m| m)
        .expect("component is non-empty");
    let start = ((first as i64) / w, (first as i64) % w);
    let start_back = (start.0, start.1 - 1);
    let area = mask.iter().filter(|&&m| m).count();
    let mut contour = vec![(start.0 as usize, start.1 as usize)];
    let (mut cur, mut back) = (start, start_back);
    for _ in 0..4 * area + 16 {
        let rel = (back.0 - cur.0, back.1 - cur.1);
        let k0 = DIRS
            .iter()
            .position(|&d| d == rel)
            .expect("backtrack is a neighbor");
        let mut found = None;
        for i in 1..=8 {
            let (dr, dc) = DIRS[(k0 + i) % 8];
            if fg(cur.0 + dr, cur.1 + dc) {
                let (pr, pc) = DIRS[(k0 + i - 1) % 8];
                found = Some(((cur.0 + dr, cur.1 + dc), (cur.0 + pr, cur.1 + pc)));
                break;
            }
        }
        let Some((next, next_back)) = found else {
            // isolated pixel
            return Ok(contour);
        };
        cur = next;
        back = next_back;
        if cur == start && back == start_back {
            return Ok(contour);
        }
        contour.push((cur.0 as usize, cur.1 as usize));
    }
    Err(AugmentError::Degenerate(
        "boundary trace did not close".into(),
    ))
}

/// The boundary as a single closed stroke in trajectory coordinates
/// (`x = col`, `y = -row`, so y points up).
pub fn trace_contour(img: &ImageSample) -> Result<TrajectorySample> {
    let pts: Vec<Point> = trace_boundary(img)?
        .into_iter()
        .map(|(r, c)| [c as f64, -(r as f64)])
        .collect();
    Ok(TrajectorySample { strokes: vec![pts] })
}

/// Resamples a closed polyline to `steps` points spaced uniformly along its
/// perimeter, starting at the first vertex.
pub(crate) fn resample_closed(points: &[Point], steps: usize) -> Vec<Point> {
    let m = points.len();
    let seg: Vec<f64> = (0..m)
        .map(|i| {
            let (a, b) = (points[i], points[(i + 1) % m]);
            (b[0] - a[0]).hypot(b[1] - a[1])
        })
        .collect();
    let total: f64 = seg.iter().sum();
    let mut out = Vec::with_capacity(steps);
    let (mut i, mut start) = (0usize, 0.0f64);
    for k in 0..steps {
        let s = total * k as f64 / steps as f64;
        while i + 1 < m && s >= start + seg[i] {
            start += seg[i];
            i += 1;
        }
        let (a, b) = (points[i], points[(i + 1) % m]);
        let f = if seg[i] > 0.0 {
            ((s - start) / seg[i]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
    }
    out
}

/// Pseudo time series of an image: its traced outer contour resampled by arc
/// length to `steps` points and normalized, as one stroke.
pub fn contour_series(img: &ImageSample, steps: usize) -> Result<TrajectorySample> {
    if steps < 2 {
        return Err(AugmentError::Argument(format!(
            "steps must be at least 2, got {steps}"
        )));
    }
    let traced = trace_contour(img)?;
    let pts = &traced.strokes[0];
    if pts.len() < MIN_CONTOUR_POINTS {
        return Err(AugmentError::Degenerate(format!(
            "contour has {} points, need at least {MIN_CONTOUR_POINTS}",
            pts.len()
        )));
    }
    let resampled = resample_closed(pts, steps);
    Ok(normalize_trajectory(&TrajectorySample {
        strokes: vec![resampled],
    })?)
}
