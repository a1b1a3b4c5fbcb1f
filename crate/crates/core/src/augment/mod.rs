//! Self-augmentation: derive the second modality of each pattern from the
//! first. Trajectories are rendered to binary rasters; images are traced to
//! contour time series.

mod contour;
mod raster;
mod rotate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{
    normalize_trajectory, DatasetError, DatasetSplit, Modality, Payload, DEFAULT_SIDE,
    DEFAULT_STEPS,
};
use crate::exec;

pub use contour::{
    contour_series, largest_component, trace_boundary, trace_contour, MIN_CONTOUR_POINTS,
};
pub use raster::rasterize;
pub use rotate::{rotate_augment, rotate_image};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("dataset quality: dropped {dropped} of {total} patterns (limit {limit:.0}%)", limit = .max_fraction * 100.0)]
    Quality {
        dropped: usize,
        total: usize,
        max_fraction: f64,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub image_side: usize,
    pub steps: usize,
    /// Fail when more than this fraction of patterns cannot be augmented.
    pub max_drop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            image_side: DEFAULT_SIDE,
            steps: DEFAULT_STEPS,
            max_drop_fraction: 0.1,
        }
    }
}

/// How `x_aug` was derived from `x_org`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Rasterized { side: usize },
    ContourTraced { steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedPattern {
    pub id: String,
    pub label: usize,
    pub org_modality: Modality,
    pub x_org: Payload,
    pub x_aug: Payload,
    pub provenance: Provenance,
}

impl PairedPattern {
    /// The payload of the given modality.
    pub fn payload(&self, modality: Modality) -> &Payload {
        if modality == self.org_modality {
            &self.x_org
        } else {
            &self.x_aug
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PairedPattern>,
    pub dropped: Vec<Dropped>,
    pub class_count: usize,
    pub class_names: Vec<String>,
}

/// Builds the `x_aug` payload for one original payload.
pub fn augment_payload(
    x_org: &Payload,
    cfg: &AugmentConfig,
) -> Result<(Payload, Payload, Provenance)> {
    match x_org {
        Payload::Trajectory(t) => {
            let norm = normalize_trajectory(t)?;
            let img = rasterize(&norm, cfg.image_side)?;
            Ok((
                x_org.clone(),
                Payload::Image(img),
                Provenance::Rasterized {
                    side: cfg.image_side,
                },
            ))
        }
        Payload::Image(img) => {
            let img = if img.height != cfg.image_side || img.width != cfg.image_side {
                img.resample_square(cfg.image_side)
            } else {
                img.clone()
            };
            let series = contour_series(&img, cfg.steps)?;
            Ok((
                Payload::Image(img),
                Payload::Trajectory(series),
                Provenance::ContourTraced { steps: cfg.steps },
            ))
        }
    }
}

/// Pairs every pattern with its self-augmented counterpart. Patterns whose
/// augmentation fails are dropped and reported; output is ordered by id.
pub fn build_pairs(split: &DatasetSplit, cfg: &AugmentConfig) -> Result<PairSet> {
    let results = exec::map(&split.patterns, |p| augment_payload(&p.payload, cfg));
    let mut pairs = Vec::with_capacity(split.len());
    let mut dropped = Vec::new();
    for (p, r) in split.patterns.iter().zip(results) {
        match r {
            Ok((x_org, x_aug, provenance)) => pairs.push(PairedPattern {
                id: p.id.clone(),
                label: p.label,
                org_modality: p.modality(),
                x_org,
                x_aug,
                provenance,
            }),
            Err(e) => {
                log::warn!("dropping pattern {}: {e}", p.id);
                dropped.push(Dropped {
                    id: p.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let total = split.len();
    if total > 0 && dropped.len() as f64 > cfg.max_drop_fraction * total as f64 {
        return Err(AugmentError::Quality {
            dropped: dropped.len(),
            total,
            max_fraction: cfg.max_drop_fraction,
        });
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(PairSet {
        pairs,
        dropped,
        class_count: split.class_count,
        class_names: split.class_names.clone(),
    })
}
