//! Prepared dataset directories.
//!
//! Layout: `{train,test}/<class>/<id>.<ext>` holds `x_org` and
//! `<id>.aug.<ext>` the derived modality (`json` for trajectories, `pgm` for
//! images). `manifest.json` records how the directory was built and lists
//! every entry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use selfaug_core::augment::{
    build_pairs, rotate_augment, AugmentConfig, Dropped, PairSet, PairedPattern, Provenance,
};
use selfaug_core::datasets::pgm::{read_pgm, write_pgm};
use selfaug_core::datasets::{
    load_dataset_with, synth_shapes_with, DatasetSplit, Modality, Payload, SplitName,
    TrajectorySample,
};

use crate::config::{DatasetSection, RunConfig};
use crate::error::{io, CliError, Result};

pub const PREPARED_FORMAT: &str = "selfaug-prepared";
pub const PREPARED_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rotation {
    pub copies: usize,
    pub step_degrees: f64,
    /// Training patterns before and after expansion.
    pub source_train: usize,
    pub train: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Entry {
    pub split: SplitName,
    pub id: String,
    pub label: usize,
    /// Paths relative to the prepared directory.
    pub org: String,
    pub aug: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dropouts {
    pub train: Vec<Dropped>,
    pub test: Vec<Dropped>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub data_hash: String,
    pub dataset: DatasetSection,
    pub augment: AugmentConfig,
    pub org_modality: Modality,
    pub class_names: Vec<String>,
    pub rotation: Rotation,
    pub dropped: Dropouts,
    pub entries: Vec<Entry>,
}

pub struct Prepared {
    pub manifest: Manifest,
    pub train: PairSet,
    pub test: PairSet,
}

fn source_splits(cfg: &RunConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    match (cfg.format(), &cfg.dataset.path) {
        (Some(format), Some(path)) => Ok(load_dataset_with(
            path,
            format,
            cfg.train_fraction(),
            cfg.dataset.split_seed.unwrap_or(0),
        )?),
        _ => Ok(synth_shapes_with(&cfg.synth())?),
    }
}

fn extension(m: Modality) -> &'static str {
    match m {
        Modality::TimeSeries => "json",
        Modality::Image => "pgm",
    }
}

fn write_payload(path: &Path, payload: &Payload) -> Result<()> {
    match payload {
        Payload::Trajectory(t) => {
            let text = serde_json::to_string(t).map_err(|e| CliError::Data(e.to_string()))?;
            fs::write(path, text).map_err(|e| io(path, e))
        }
        Payload::Image(img) => Ok(write_pgm(path, img)?),
    }
}

fn read_payload(path: &Path, modality: Modality) -> Result<Payload> {
    match modality {
        Modality::TimeSeries => {
            let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
            let t: TrajectorySample = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            t.validate()?;
            Ok(Payload::Trajectory(t))
        }
        Modality::Image => Ok(Payload::Image(read_pgm(path)?)),
    }
}

/// Builds the paired dataset described by `cfg` into its prepared
/// directory. An existing directory is replaced only with `force`.
pub fn prepare(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg.prepared_dir();
    if dir.exists() && !force {
        return Err(CliError::Refused(format!(
            "{} already exists (use --force to rebuild)",
            dir.display()
        )));
    }
    let (train, test) = source_splits(cfg)?;
    if let Some(k) = cfg.model.class_count {
        if k != train.class_count {
            return Err(CliError::Data(format!(
                "model.class_count is {k} but the dataset has {} classes",
                train.class_count
            )));
        }
    }
    let source_train = train.len();
    let copies = cfg.dataset.rotate_copies;
    let train = if copies > 1 {
        rotate_augment(&train, copies, cfg.dataset.rotate_step_degrees)?
    } else {
        train
    };
    let aug = cfg.augment();
    let train_set = build_pairs(&train, &aug)?;
    let test_set = build_pairs(&test, &aug)?;
    log::info!(
        "prepared {} train / {} test pairs ({} + {} dropped)",
        train_set.pairs.len(),
        test_set.pairs.len(),
        train_set.dropped.len(),
        test_set.dropped.len()
    );

    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
    }
    let org_modality = cfg.org_modality();
    let mut entries = Vec::new();
    for (split, set) in [(SplitName::Train, &train_set), (SplitName::Test, &test_set)] {
        for p in &set.pairs {
            let class_dir = format!("{}/{}", split.as_str(), set.class_names[p.label]);
            fs::create_dir_all(tmp.join(&class_dir)).map_err(|e| io(&tmp, e))?;
            let org = format!("{class_dir}/{}.{}", p.id, extension(org_modality));
            let aug = format!(
                "{class_dir}/{}.aug.{}",
                p.id,
                extension(org_modality.other())
            );
            write_payload(&tmp.join(&org), &p.x_org)?;
            write_payload(&tmp.join(&aug), &p.x_aug)?;
            entries.push(Entry {
                split,
                id: p.id.clone(),
                label: p.label,
                org,
                aug,
                provenance: p.provenance,
            });
        }
    }
    let manifest = Manifest {
        format: PREPARED_FORMAT.into(),
        version: PREPARED_VERSION,
        data_hash: cfg.data_hash(),
        dataset: cfg.dataset.clone(),
        augment: aug,
        org_modality,
        class_names: train_set.class_names.clone(),
        rotation: Rotation {
            copies,
            step_degrees: cfg.dataset.rotate_step_degrees,
            source_train,
            train: train.len(),
        },
        dropped: Dropouts {
            train: train_set.dropped,
            test: test_set.dropped,
        },
        entries,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    let path = tmp.join("manifest.json");
    fs::write(&path, text).map_err(|e| io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| io(&dir, e))?;
    Ok(dir)
}

/// Reads a prepared directory back into paired sets.
pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if manifest.format != PREPARED_FORMAT || manifest.version != PREPARED_VERSION {
        return Err(CliError::Data(format!(
            "{}: unsupported prepared format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let class_count = manifest.class_names.len();
    let org_modality = manifest.org_modality;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        if e.label >= class_count {
            return Err(CliError::Data(format!(
                "entry {} has label {} of {class_count}",
                e.id, e.label
            )));
        }
        let pair = PairedPattern {
            id: e.id.clone(),
            label: e.label,
            org_modality,
            x_org: read_payload(&dir.join(&e.org), org_modality)?,
            x_aug: read_payload(&dir.join(&e.aug), org_modality.other())?,
            provenance: e.provenance,
        };
        match e.split {
            SplitName::Train => train.push(pair),
            SplitName::Test => test.push(pair),
        }
    }
    let set = |pairs, dropped: &Vec<Dropped>| PairSet {
        pairs,
        dropped: dropped.clone(),
        class_count,
        class_names: manifest.class_names.clone(),
    };
    let train = set(train, &manifest.dropped.train);
    let test = set(test, &manifest.dropped.test);
    Ok(Prepared {
        manifest,
        train,
        test,
    })
}

/// Loads the prepared directory for `cfg`, building it first if missing.
pub fn ensure_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let dir = cfg.prepared_dir();
    if !dir.join("manifest.json").is_file() {
        prepare(cfg, true)?;
    }
    load_prepared(&dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn config(root: &Path) -> RunConfig {
        let text = r#"
output_dir = "out"
[dataset]
source = "synth"
[dataset.synth]
class_count = 3
per_class = 5
seed = 2
[model]
steps = 16
image_side = 16
"#;
        parse_config(text, root).unwrap()
    }

    #[test]
    fn round_trips_pairs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path());
        let dir = prepare(&cfg, false).unwrap();
        let loaded = load_prepared(&dir).unwrap();
        let (train, _) = synth_shapes_with(&cfg.synth()).unwrap();
        let expected = build_pairs(&train, &cfg.augment()).unwrap();
        assert_eq!(loaded.train.pairs, expected.pairs);
        assert_eq!(loaded.manifest.class_names.len(), 3);
        let first = &loaded.manifest.entries[0];
        assert!(dir.join(&first.org).is_file());
        assert!(first.aug.ends_with(".aug.pgm"));
    }

    #[test]
    fn refuses_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path());
        prepare(&cfg, false).unwrap();
        let err = prepare(&cfg, false).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        prepare(&cfg, true).unwrap();
    }
}
