//! Directory loaders.
//!
//! Layouts: `<root>/{train,test}/<class>/<id>.<ext>` or the flat
//! `<root>/<class>/<id>.<ext>`. An optional `<root>/split.json` of the form
//! `{"train": [ids], "test": [ids]}` assigns patterns explicitly; otherwise a
//! flat layout is split with [`stratified_split`](super::stratified_split).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm::read_pgm;
use super::{
    stratified_split_named, DatasetError, DatasetSplit, LabeledPattern, Payload, Result, SplitName,
    TrajectorySample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    TrajectoryJson,
    ImageDir,
}

impl DataFormat {
    fn extension(self) -> &'static str {
        match self {
            DataFormat::TrajectoryJson => "json",
            DataFormat::ImageDir => "pgm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        out.push(entry.map_err(|e| io_err(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn read_trajectory(path: &Path) -> Result<TrajectorySample> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let t: TrajectorySample = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    t.validate().map_err(|e| DatasetError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(t)
}

/// Reads `<dir>/<class>/<id>.<ext>` into (class name, id, payload) records.
fn read_class_tree(dir: &Path, format: DataFormat) -> Result<Vec<(String, String, Payload)>> {
    let mut out = Vec::new();
    for class_dir in sorted_entries(dir)? {
        if !class_dir.is_dir() {
            continue;
        }
        let class = class_dir
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DatasetError::Malformed {
                path: class_dir.clone(),
                reason: "class directory name is not valid UTF-8".into(),
            })?
            .to_string();
        for file in sorted_entries(&class_dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some(format.extension()) {
                continue;
            }
            let name = file
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or_default();
            // side-files written by `prepare` are not patterns
            if name.ends_with(&format!(".aug.{}", format.extension())) {
                continue;
            }
            let id = file
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| DatasetError::Malformed {
                    path: file.clone(),
                    reason: "file name is not valid UTF-8".into(),
                })?
                .to_string();
            let payload = match format {
                DataFormat::TrajectoryJson => Payload::Trajectory(read_trajectory(&file)?),
                DataFormat::ImageDir => Payload::Image(read_pgm(&file)?),
            };
            out.push((class.clone(), id, payload));
        }
    }
    Ok(out)
}

pub fn load_dataset(root: &Path, format: DataFormat) -> Result<(DatasetSplit, DatasetSplit)> {
    load_dataset_with(root, format, 0.8, 0)
}

/// Like [`load_dataset`], with the fraction and seed used for flat layouts
/// without a split file.
pub fn load_dataset_with(
    root: &Path,
    format: DataFormat,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if !root.is_dir() {
        return Err(io_err(
            root,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset root is not a directory",
            ),
        ));
    }
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let split_dirs = train_dir.is_dir() || test_dir.is_dir();
    let mut records: Vec<(Option<SplitName>, String, String, Payload)> = Vec::new();
    if split_dirs {
        let mut class_sets = Vec::new();
        for (name, dir) in [(SplitName::Train, &train_dir), (SplitName::Test, &test_dir)] {
            if !dir.is_dir() {
                return Err(DatasetError::Schema(format!(
                    "{} exists but {} is missing",
                    if name == SplitName::Train {
                        "test/"
                    } else {
                        "train/"
                    },
                    dir.display()
                )));
            }
            let recs = read_class_tree(dir, format)?;
            class_sets.push(recs.iter().map(|r| r.0.clone()).collect::<BTreeSet<_>>());
            records.extend(recs.into_iter().map(|(c, id, p)| (Some(name), c, id, p)));
        }
        if class_sets[0] != class_sets[1] {
            return Err(DatasetError::Schema(format!(
                "train classes {:?} differ from test classes {:?}",
                class_sets[0], class_sets[1]
            )));
        }
    } else {
        records.extend(
            read_class_tree(root, format)?
                .into_iter()
                .map(|(c, id, p)| (None, c, id, p)),
        );
    }
    if records.is_empty() {
        return Err(DatasetError::Malformed {
            path: root.to_path_buf(),
            reason: format!("no .{} patterns found", format.extension()),
        });
    }
    let class_names: Vec<String> = records
        .iter()
        .map(|r| r.1.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut by_id: BTreeMap<String, (Option<SplitName>, LabeledPattern)> = BTreeMap::new();
    for (split, class, id, payload) in &records {
        let pattern = LabeledPattern {
            id: id.clone(),
            label: index[class.as_str()],
            payload: payload.clone(),
        };
        if by_id.insert(id.clone(), (*split, pattern)).is_some() {
            return Err(DatasetError::Schema(format!("duplicate pattern id {id}")));
        }
    }

    let split_file = root.join("split.json");
    let assignment: Option<HashMap<String, SplitName>> = if split_file.is_file() {
        let text = fs::read_to_string(&split_file).map_err(|e| io_err(&split_file, e))?;
        let sf: SplitFile = serde_json::from_str(&text).map_err(|e| DatasetError::Malformed {
            path: split_file.clone(),
            reason: e.to_string(),
        })?;
        let mut map = HashMap::new();
        for (name, ids) in [(SplitName::Train, &sf.train), (SplitName::Test, &sf.test)] {
            for id in ids {
                if !by_id.contains_key(id) {
                    return Err(DatasetError::Schema(format!(
                        "split.json lists unknown id {id}"
                    )));
                }
                if map.insert(id.clone(), name).is_some() {
                    return Err(DatasetError::Schema(format!(
                        "split.json lists id {id} twice"
                    )));
                }
            }
        }
        if let Some(missing) = by_id.keys().find(|id| !map.contains_key(*id)) {
            return Err(DatasetError::Schema(format!(
                "split.json does not assign id {missing}"
            )));
        }
        Some(map)
    } else {
        None
    };

    if assignment.is_none() && !split_dirs {
        let patterns: Vec<LabeledPattern> = by_id.into_values().map(|(_, p)| p).collect();
        return stratified_split_named(&patterns, train_fraction, seed, class_names);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (id, (dir_split, pattern)) in by_id {
        let split = match &assignment {
            Some(map) => map[&id],
            None => dir_split.expect("split directory layout"),
        };
        match split {
            SplitName::Train => train.push(pattern),
            SplitName::Test => test.push(pattern),
        }
    }
    Ok((
        DatasetSplit::new(SplitName::Train, train, class_names.clone())?,
        DatasetSplit::new(SplitName::Test, test, class_names)?,
    ))
}
