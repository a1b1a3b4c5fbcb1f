use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use selfaug_core::datasets::SplitName;
use selfaug_core::eval::{
    alpha_buckets, compare_reports, evaluate, export_embeddings, run_ablation_suite, EvalReport,
};
use selfaug_core::model::{
    encode_pairs, load_checkpoint, save_checkpoint, EncodedPair, ModelBundle,
};
use selfaug_core::training::{fit_checkpointed, Ablation, Control, EpochRecord};

use crate::config::{load_config, RunConfig};
use crate::error::{io, CliError, Result};
use crate::prepared::{ensure_prepared, prepare, Prepared};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

fn unix_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A fresh output directory: `explicit` or `<output_dir>/<prefix>-<hash>-<time>`.
fn fresh_dir(
    cfg: &RunConfig,
    prefix: &str,
    explicit: Option<PathBuf>,
    force: bool,
) -> Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| {
        cfg.output_dir
            .join(format!("{prefix}-{}-{}", cfg.run_hash(), unix_secs()))
    });
    if dir.exists() {
        if !force {
            return Err(CliError::Refused(format!(
                "{} already exists (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| io(&dir, e))?;
    }
    create_dir(&dir)?;
    Ok(dir)
}

struct Loaded {
    cfg: RunConfig,
    prepared: Prepared,
    train: Vec<EncodedPair>,
    test: Vec<EncodedPair>,
}

fn load(config: &Path, seed: Option<u64>, ablation: Option<Ablation>) -> Result<Loaded> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    if let Some(a) = ablation {
        cfg.training.ablation = a;
    }
    let prepared = ensure_prepared(&cfg)?;
    let arch = cfg.arch();
    let train = encode_pairs(&prepared.train.pairs, &arch)?;
    let test = encode_pairs(&prepared.test.pairs, &arch)?;
    Ok(Loaded {
        cfg,
        prepared,
        train,
        test,
    })
}

fn load_compatible(path: &Path, data: &Loaded) -> Result<ModelBundle> {
    let bundle = load_checkpoint(path)?;
    bundle.check_compatible(data.prepared.manifest.class_names.len(), &data.cfg.arch())?;
    Ok(bundle)
}

fn parent_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

pub fn cmd_prepare(config: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = prepare(&cfg, force)?;
    println!("{}", dir.display());
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub run_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub force: bool,
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = load(&args.config, args.seed, args.ablation)?;
    let cfg = &data.cfg;
    let run = fresh_dir(cfg, "run", args.run_dir, args.force)?;
    let config_text = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let config_path = run.join("config.toml");
    fs::write(&config_path, config_text).map_err(|e| io(&config_path, e))?;

    let manifest = &data.prepared.manifest;
    let mut bundle = ModelBundle::new(
        cfg.model.variant,
        cfg.arch(),
        manifest.class_names.clone(),
        manifest.org_modality,
        cfg.training.seed,
    )?;
    bundle.config = serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?;

    let metrics_path = run.join("metrics.csv");
    let mut metrics =
        csv::Writer::from_path(&metrics_path).map_err(|e| CliError::Data(e.to_string()))?;
    let mut last: Option<EpochRecord> = None;
    let mut write_err = None;
    let outcome = fit_checkpointed(
        &mut bundle,
        &data.train,
        &cfg.training,
        &run.join("checkpoint"),
        &mut |record, _| {
            last = Some(record.clone());
            let written = metrics.serialize(record).and_then(|_| Ok(metrics.flush()?));
            match written {
                Ok(()) => Control::Continue,
                Err(e) => {
                    write_err = Some(e);
                    Control::Stop
                }
            }
        },
    );
    if let Some(e) = write_err {
        return Err(CliError::Data(format!("{}: {e}", metrics_path.display())));
    }
    let base = json!({
        "variant": cfg.model.variant,
        "ablation": cfg.training.ablation,
        "seed": cfg.training.seed,
        "epochs": cfg.training.epochs,
        "config_hash": cfg.run_hash(),
        "data_hash": cfg.data_hash(),
        "train_size": data.train.len(),
        "test_size": data.test.len(),
    });
    let summary_path = run.join("summary.json");
    let mut summary = base.as_object().cloned().unwrap_or_default();
    summary.insert(
        "epochs_completed".into(),
        json!(last.as_ref().map_or(0, |r| r.epoch)),
    );
    summary.insert("final_epoch".into(), json!(last));
    match outcome {
        Ok(_) => {
            let report = evaluate(&mut bundle, &data.test)?;
            summary.insert("status".into(), json!("completed"));
            summary.insert("test_accuracy".into(), json!(report.accuracy));
            write_json(&summary_path, &summary)?;
            println!("run: {}", run.display());
            println!("accuracy: {}", report.accuracy);
            Ok(())
        }
        Err(e) => {
            summary.insert("status".into(), json!("failed"));
            summary.insert("error".into(), json!(e.to_string()));
            write_json(&summary_path, &summary)?;
            Err(e.into())
        }
    }
}

pub fn cmd_eval(config: &Path, checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    let data = load(config, None, None)?;
    let mut bundle = load_compatible(checkpoint, &data)?;
    let report = evaluate(&mut bundle, &data.test)?;
    let out = out.unwrap_or_else(|| parent_dir(checkpoint));
    create_dir(&out)?;
    write_json(
        &out.join("eval.json"),
        &json!({
            "checkpoint": checkpoint,
            "variant": bundle.variant,
            "epoch": bundle.epoch,
            "class_names": bundle.class_names,
            "accuracy": report.accuracy,
            "report": report,
        }),
    )?;
    println!("accuracy: {}", report.accuracy);
    Ok(())
}

pub fn cmd_ablate(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let data = load(config, seed, None)?;
    let cfg = &data.cfg;
    let out = fresh_dir(cfg, "ablation", out, force)?;
    let manifest = &data.prepared.manifest;
    let mut save_err = None;
    let table = run_ablation_suite(
        &data.train,
        &data.test,
        &manifest.class_names,
        manifest.org_modality,
        &cfg.arch(),
        &cfg.training,
        &mut |label, bundle| {
            let slug: String = label
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() {
                        c.to_ascii_lowercase()
                    } else {
                        '_'
                    }
                })
                .collect();
            let path = out.join("checkpoints").join(slug.trim_matches('_'));
            if let Err(e) = save_checkpoint(bundle, &path) {
                save_err.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    table.write_csv(&out.join("ablation.csv"))?;
    write_json(&out.join("ablation.json"), &table)?;
    println!("ablation: {}", out.display());
    for row in &table.rows {
        println!("{:<18} {:.2}%", row.label, row.accuracy * 100.0);
    }
    let headline = table.rows.first().map_or(0.0, |r| r.accuracy);
    println!("accuracy: {headline}");
    Ok(())
}

pub fn cmd_report_alpha(
    config: &Path,
    checkpoint: &Path,
    per_bucket: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = load(config, None, None)?;
    let mut bundle = load_compatible(checkpoint, &data)?;
    if bundle.gate.is_none() {
        return Err(CliError::Incompatible(format!(
            "{} has no gating network (variant {})",
            checkpoint.display(),
            bundle.variant.as_str()
        )));
    }
    let report = evaluate(&mut bundle, &data.test)?;
    let buckets = alpha_buckets(&report.predictions, per_bucket, seed)?;

    let prepared_dir = data.cfg.prepared_dir();
    let images: HashMap<&str, PathBuf> = data
        .prepared
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == SplitName::Test)
        .map(|e| {
            let file = if e.org.ends_with(".pgm") {
                &e.org
            } else {
                &e.aug
            };
            (e.id.as_str(), prepared_dir.join(file))
        })
        .collect();

    let names = &bundle.class_names;
    let mut md = String::from("# Gate values on the test split\n");
    let mut sections = Vec::new();
    for b in &buckets.buckets {
        let _ = write!(md, "\n## alpha = {:.1}\n\n{} patterns\n", b.alpha, b.count);
        let mut samples = Vec::new();
        if !b.samples.is_empty() {
            md.push_str("\n| id | alpha | label | predicted | image |\n|---|---|---|---|---|\n");
        }
        for s in &b.samples {
            let image = images.get(s.id.as_str()).cloned();
            let mark = if s.misclassified { " (wrong)" } else { "" };
            let _ = writeln!(
                md,
                "| {} | {:.3} | {} | {}{mark} | {} |",
                s.id,
                s.alpha,
                names[s.label],
                names[s.predicted],
                image
                    .as_ref()
                    .map_or(String::new(), |p| p.display().to_string())
            );
            samples.push(json!({ "sample": s, "image": image }));
        }
        sections.push(json!({
            "alpha": b.alpha,
            "count": b.count,
            "samples": samples,
        }));
    }
    let out = out.unwrap_or_else(|| parent_dir(checkpoint));
    create_dir(&out)?;
    write_json(
        &out.join("alpha.json"),
        &json!({
            "checkpoint": checkpoint,
            "seed": seed,
            "per_bucket": per_bucket,
            "accuracy": report.accuracy,
            "buckets": sections,
        }),
    )?;
    let md_path = out.join("alpha.md");
    fs::write(&md_path, md).map_err(|e| io(&md_path, e))?;
    println!("accuracy: {}", report.accuracy);
    Ok(())
}

pub fn cmd_export_embeddings(
    config: &Path,
    checkpoint: &Path,
    split: SplitName,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = load(config, None, None)?;
    let mut bundle = load_compatible(checkpoint, &data)?;
    let pairs = match split {
        SplitName::Train => &data.train,
        SplitName::Test => &data.test,
    };
    let table = export_embeddings(&mut bundle, pairs)?;
    let report = evaluate(&mut bundle, pairs)?;
    let out = out.unwrap_or_else(|| parent_dir(checkpoint));
    create_dir(&out)?;
    let path = out.join(format!("embeddings-{}.csv", split.as_str()));
    table.write_csv(&path)?;
    println!("embeddings: {}", path.display());
    println!("mean_pair_distance: {}", table.mean_pair_distance());
    println!("accuracy: {}", report.accuracy);
    Ok(())
}

pub fn cmd_compare(
    config: &Path,
    checkpoint: &Path,
    against: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let data = load(config, None, None)?;
    let mut a = load_compatible(checkpoint, &data)?;
    let mut b = load_compatible(against, &data)?;
    let ra: EvalReport = evaluate(&mut a, &data.test)?;
    let rb: EvalReport = evaluate(&mut b, &data.test)?;
    let cmp = compare_reports(&ra, &rb)?;
    let out = out.unwrap_or_else(|| parent_dir(checkpoint));
    create_dir(&out)?;
    write_json(
        &out.join("compare.json"),
        &json!({
            "checkpoint": checkpoint,
            "against": against,
            "accuracy": ra.accuracy,
            "against_accuracy": rb.accuracy,
            "comparison": cmp,
        }),
    )?;
    println!(
        "improved: {} deteriorated: {} unchanged: {}",
        cmp.improved.len(),
        cmp.deteriorated.len(),
        cmp.unchanged
    );
    println!("accuracy: {}", ra.accuracy);
    println!("against_accuracy: {}", rb.accuracy);
    Ok(())
}
