use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BASE: &str = r#"
output_dir = "out"

[dataset]
source = "synth"

[dataset.synth]
class_count = 3
per_class = 6
seed = 4

[model]
embedding_dim = 16
hidden_dim = 16
steps = 16
image_side = 16

[training]
epochs = 1
batch_size = 4
learning_rate = 0.001
"#;

fn selfaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfaug"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn printed(out: &Output, key: &str) -> String {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} line in {}", stdout(out)))
}

fn train(config: &str, run: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--config",
        config,
        "--run-dir",
        run.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    selfaug(&args)
}

fn trained(dir: &Path) -> (String, PathBuf) {
    let config = write_config(dir, "run.toml", BASE);
    let run = dir.join("run");
    let out = train(&config, &run, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (config, run)
}

#[test]
fn prepare_refuses_rerun_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", BASE);
    let first = selfaug(&["prepare", "--config", &config]);
    assert_eq!(code(&first), 0);
    let dir = PathBuf::from(stdout(&first).trim());
    let manifest = read_json(&dir.join("manifest.json"));
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 18);
    assert_eq!(code(&selfaug(&["prepare", "--config", &config])), 4);
    assert_eq!(
        code(&selfaug(&["prepare", "--config", &config, "--force"])),
        0
    );
}

#[test]
fn schema_errors_exit_2_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "c.toml",
        &BASE.replace("seed = 4", "seed = 4\nsed = 1"),
    );
    let out = selfaug(&["prepare", "--config", &config]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("dataset.synth") && err.contains("sed"),
        "{err}"
    );

    let config = write_config(
        tmp.path(),
        "d.toml",
        &BASE.replace("epochs = 1", "epochs = \"one\""),
    );
    let err =
        String::from_utf8_lossy(&selfaug(&["train", "--config", &config]).stderr).into_owned();
    assert!(err.contains("training.epochs"), "{err}");
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = BASE
        .replace(
            "source = \"synth\"",
            "source = \"image-dir\"\npath = \"nowhere\"",
        )
        .replace(
            "[dataset.synth]\nclass_count = 3\nper_class = 6\nseed = 4\n",
            "",
        );
    let config = write_config(tmp.path(), "c.toml", &text);
    assert_eq!(code(&selfaug(&["prepare", "--config", &config])), 3);
}

#[test]
fn image_dataset_records_rotation_expansion() {
    use selfaug_core::datasets::pgm::write_pgm;
    use selfaug_core::datasets::ImageSample;

    let tmp = tempfile::tempdir().unwrap();
    for (class, offset) in [("a", 2usize), ("b", 6)] {
        let dir = tmp.path().join("leaves").join(class);
        fs::create_dir_all(&dir).unwrap();
        for k in 0..4 {
            let mut img = ImageSample::blank(20, 20);
            for r in offset..offset + 8 + k {
                for c in 4..14 {
                    img.set(r, c, 1.0);
                }
            }
            write_pgm(&dir.join(format!("{class}{k}.pgm")), &img).unwrap();
        }
    }
    let text = "output_dir = \"out\"\n[dataset]\nsource = \"image-dir\"\npath = \"leaves\"\ntrain_fraction = 0.5\nrotate_copies = 3\nrotate_step_degrees = 10.0\n[model]\nsteps = 16\nimage_side = 16\nclass_count = 2\n";
    let config = write_config(tmp.path(), "c.toml", text);
    let out = selfaug(&["prepare", "--config", &config]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&PathBuf::from(stdout(&out).trim()).join("manifest.json"));
    assert_eq!(manifest["rotation"]["copies"], 3);
    assert_eq!(manifest["rotation"]["source_train"], 4);
    assert_eq!(manifest["rotation"]["train"], 12);
    assert_eq!(manifest["org_modality"], "image");
}

#[test]
fn train_then_eval_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, run) = trained(tmp.path());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    let summary = read_json(&run.join("summary.json"));
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["epochs_completed"], 1);
    assert!(run.join("checkpoint/manifest.json").is_file());
    assert!(run.join("config.toml").is_file());

    let ckpt = run.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let out = selfaug(&["eval", "--config", &config, "--checkpoint", ckpt]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let shown: f64 = printed(&out, "accuracy").parse().unwrap();
    let eval = read_json(&run.join("eval.json"));
    assert_eq!(eval["accuracy"].as_f64().unwrap(), shown);

    let out = selfaug(&[
        "report-alpha",
        "--config",
        &config,
        "--checkpoint",
        ckpt,
        "--per-bucket",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let md = fs::read_to_string(run.join("alpha.md")).unwrap();
    assert_eq!(md.matches("\n## alpha = ").count(), 11);
    let alpha = read_json(&run.join("alpha.json"));
    let buckets = alpha["buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 11);
    let total: u64 = buckets.iter().map(|b| b["count"].as_u64().unwrap()).sum();
    assert_eq!(total, summary["test_size"].as_u64().unwrap());
    for b in buckets {
        for s in b["samples"].as_array().unwrap() {
            assert!(Path::new(s["image"].as_str().unwrap()).is_file());
        }
    }

    let out = selfaug(&[
        "export-embeddings",
        "--config",
        &config,
        "--checkpoint",
        ckpt,
        "--split",
        "train",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(run.join("embeddings-train.csv")).unwrap();
    let train_size = summary["train_size"].as_u64().unwrap() as usize;
    assert_eq!(csv.lines().count(), 1 + 2 * train_size);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 3 + 16);

    let out = selfaug(&[
        "compare",
        "--config",
        &config,
        "--checkpoint",
        ckpt,
        "--against",
        ckpt,
    ]);
    assert_eq!(code(&out), 0);
    let cmp = read_json(&run.join("compare.json"));
    assert_eq!(cmp["comparison"]["improved"].as_array().unwrap().len(), 0);
}

#[test]
fn incompatible_checkpoint_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = trained(tmp.path());
    let other = write_config(
        tmp.path(),
        "wide.toml",
        &BASE.replace("embedding_dim = 16", "embedding_dim = 24"),
    );
    let ckpt = run.join("checkpoint");
    let out = selfaug(&[
        "eval",
        "--config",
        &other,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    let more = write_config(
        tmp.path(),
        "four.toml",
        &BASE.replace("class_count = 3", "class_count = 4"),
    );
    let out = selfaug(&[
        "eval",
        "--config",
        &more,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 5);
}

#[test]
fn existing_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, run) = trained(tmp.path());
    assert_eq!(code(&train(&config, &run, &[])), 4);
    assert_eq!(code(&train(&config, &run, &["--force"])), 0);
}

#[test]
fn ablation_flag_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", BASE);
    let run = tmp.path().join("nofd");
    assert_eq!(
        code(&train(
            &config,
            &run,
            &["--ablation", "no_fd", "--seed", "3"]
        )),
        0
    );
    let summary = read_json(&run.join("summary.json"));
    assert_eq!(summary["ablation"], "no_fd");
    assert_eq!(summary["seed"], 3);
}

#[test]
fn identical_runs_give_identical_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "c.toml",
        &BASE.replace("epochs = 1", "epochs = 2"),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train(&config, &a, &[])), 0);
    assert_eq!(code(&train(&config, &b, &[])), 0);
    let (sa, sb) = (
        read_json(&a.join("summary.json")),
        read_json(&b.join("summary.json")),
    );
    for key in [
        "loss_total",
        "loss_cls",
        "loss_fd",
        "loss_adv",
        "loss_disc",
        "train_accuracy",
    ] {
        assert_eq!(sa["final_epoch"][key], sb["final_epoch"][key], "{key}");
    }
    assert_eq!(sa["test_accuracy"], sb["test_accuracy"]);
    assert_eq!(
        fs::read(a.join("checkpoint/tensors.bin")).unwrap(),
        fs::read(b.join("checkpoint/tensors.bin")).unwrap()
    );
}

#[test]
fn diverging_training_exits_3_with_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let text = BASE
        .replace("learning_rate = 0.001", "learning_rate = 1e30")
        .replace("epochs = 1", "epochs = 5");
    let config = write_config(tmp.path(), "c.toml", &text);
    let run = tmp.path().join("run");
    let out = train(&config, &run, &[]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&run.join("summary.json"));
    assert_eq!(summary["status"], "failed");
    assert!(
        summary["error"].as_str().unwrap().contains("non-finite"),
        "{summary}"
    );
}

#[test]
fn ablate_writes_six_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", BASE);
    let out_dir = tmp.path().join("abl");
    let out = selfaug(&[
        "ablate",
        "--config",
        &config,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let table = read_json(&out_dir.join("ablation.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 6);
    assert!(out_dir.join("checkpoints/proposed/manifest.json").is_file());
}
