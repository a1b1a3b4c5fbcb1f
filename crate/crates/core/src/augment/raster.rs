use super::{AugmentError, Result};
use crate::datasets::{ImageSample, TrajectorySample};

/// Maps a normalized coordinate in `[-1, 1]` onto pixel index `1..=side-2`,
/// rounding halves toward the lower index.
pub(crate) fn to_pixel(v: f64, side: usize) -> i64 {
    let u = (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (side - 3) as f64;
    1 + (u - 0.5).ceil() as i64
}

/// Integer line from `(x0, y0)` to `(x1, y1)` inclusive. Along the major
/// axis each step advances by one; the minor offset at step `j` is
/// `j * minor / major` rounded half down.
pub(crate) fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64, mut plot: impl FnMut(i64, i64)) {
    let (dx, dy) = ((x1 - x0).abs(), (y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    if dx >= dy {
        let mut err = 2 * dy - dx;
        let mut y = y0;
        for i in 0..=dx {
            plot(x0 + i * sx, y);
            if err > 0 {
                y += sy;
                err -= 2 * dx;
            }
            err += 2 * dy;
        }
    } else {
        let mut err = 2 * dx - dy;
        let mut x = x0;
        for i in 0..=dy {
            plot(x, y0 + i * sy);
            if err > 0 {
                x += sx;
                err -= 2 * dy;
            }
            err += 2 * dx;
        }
    }
}

/// Renders pen-down segments of a normalized trajectory into a binary
/// `side × side` raster with a one-pixel margin; image y points down.
pub fn rasterize(t: &TrajectorySample, side: usize) -> Result<ImageSample> {
    if side < 8 {
        return Err(AugmentError::Argument(format!(
            "raster side must be at least 8, got {side}"
        )));
    }
    let mut img = ImageSample::blank(side, side);
    for stroke in &t.strokes {
        let pix: Vec<(i64, i64)> = stroke
            .iter()
            .map(|p| (to_pixel(p[0], side), to_pixel(-p[1], side)))
            .collect();
        if pix.len() == 1 {
            img.set(pix[0].1 as usize, pix[0].0 as usize, 1.0);
        }
        for w in pix.windows(2) {
            bresenham(w[0].0, w[0].1, w[1].0, w[1].1, |c, r| {
                img.set(r as usize, c as usize, 1.0)
            });
        }
    }
    Ok(img)
}
