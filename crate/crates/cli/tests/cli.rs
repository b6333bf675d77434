use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use irnet::arch::{build_model, ModelConfig};
use irnet::data::Split;
use irnet::eval::evaluate;
use irnet::train::{read_records, EVAL_BATCH};
use irnet::weights::{self, model_from_checkpoint, Checkpoint};
use irnet_cli::commands;
use irnet_cli::config::ExperimentConfig;
use irnet_cli::sweep::{best_cell, grid, SweepRow};
use irnet_cli::{Cli, Common};

const SMALL: &str = r#"
[train]
epochs = 2
batch_size = 8
learning_rate = 0.001

[data]
synthetic = true
samples = 20
test_samples = 10
image_size = 32
holdout_folds = 4
"#;

fn common(dir: &Path, config_text: &str, out: &str) -> Common {
    let config = dir.join(format!("{out}.toml"));
    fs::write(&config, config_text).unwrap();
    Common {
        config: Some(config),
        out: dir.join(out),
        desk: true,
        ..Common::default()
    }
}

fn bytes(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig::parse(SMALL, true).unwrap();
    assert_eq!(cfg.model, ModelConfig::desk());
    assert_eq!(cfg.train.epochs, 2);
    let text = cfg.to_toml().unwrap();
    assert_eq!(ExperimentConfig::parse(&text, false).unwrap(), cfg);

    let canonical = ExperimentConfig::parse("[model]\nwidth_multiplier = 0.5\n", false).unwrap();
    assert_eq!(canonical.model.input_size, ModelConfig::canonical().input_size);
    assert_eq!(canonical.model.width_multiplier, 0.5);

    let err = ExperimentConfig::parse("[train]\nlearnin_rate = 0.1\n", true).unwrap_err();
    assert!(format!("{err:#}").contains("learnin_rate"), "{err:#}");
    let err = ExperimentConfig::parse("[data]\nsynthtic = true\n", true).unwrap_err();
    assert!(format!("{err:#}").contains("synthtic"), "{err:#}");
}

#[test]
fn zero_learning_rate_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let c = common(
        dir.path(),
        "[train]\nlearning_rate = 0.0\n[data]\nsynthetic = true\n",
        "bad",
    );
    let err = commands::train(&c, None).err().expect("must fail");
    assert!(format!("{err:#}").contains("learning_rate"), "{err:#}");
    assert!(!c.out.join("run.jsonl").exists());
}

#[test]
fn missing_data_source_is_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let c = common(dir.path(), "", "nodata");
    let err = commands::train(&c, None).err().expect("must fail");
    assert!(format!("{err}").contains("no data source"));
}

#[test]
fn train_writes_curve_and_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = common(dir.path(), SMALL, "a");
    let b = common(dir.path(), SMALL, "b");
    let out = commands::train(&a, None).unwrap();
    commands::train(&b, None).unwrap();
    assert_eq!(out.record.curve.len(), 2);
    let curve = fs::read_to_string(a.out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);
    assert!(curve.starts_with("source,run,fold,epoch,train_loss,val_loss,train_acc,val_acc,val_auc\n"));
    for f in ["curve.csv", "run.jsonl", "model.irwt", "metrics.txt", "config.toml"] {
        assert_eq!(bytes(a.out.join(f)), bytes(b.out.join(f)), "{f}");
    }
    let ckpt = Checkpoint::read(&a.out.join("model.irwt")).unwrap();
    assert_eq!(
        weights::sha256_hex(&ckpt.to_bytes().unwrap()),
        out.record.checkpoint_digest
    );
    assert_eq!(read_records(&a.out.join("run.jsonl")).unwrap(), vec![out.record]);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = common(dir.path(), SMALL, "a");
    let b = Common {
        seed: Some(99),
        ..common(dir.path(), SMALL, "b")
    };
    let ra = commands::train(&a, None).unwrap().record;
    let rb = commands::train(&b, None).unwrap().record;
    assert_eq!(rb.config.seed, 99);
    assert_ne!(ra.checkpoint_digest, rb.checkpoint_digest);
}

#[test]
fn finetune_replaces_head_and_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    let base = common(dir.path(), SMALL, "base");
    commands::train(&base, None).unwrap();
    let ft = common(dir.path(), SMALL, "ft");
    let out = commands::train(&ft, Some(&base.out.join("model.irwt"))).unwrap();
    let report = out.record.load_report.unwrap();
    assert_eq!(report.skipped.len(), 2);
    assert!(report.skipped.iter().all(|s| s.name.starts_with("head/")));
}

#[test]
fn diverged_training_exits_nonzero_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = build_model(&ModelConfig::desk()).unwrap();
    model.params_mut()[0].value.data_mut()[0] = f32::NAN;
    let base = dir.path().join("nan.irwt");
    weights::save(&model, &base, &[]).unwrap();
    let c = common(dir.path(), SMALL, "nan");

    let status = Process::new(env!("CARGO_BIN_EXE_irnet"))
        .args(["train", "--desk", "--base"])
        .arg(&base)
        .arg("--config")
        .arg(c.config.as_ref().unwrap())
        .arg("--out")
        .arg(&c.out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    let stderr = String::from_utf8_lossy(&status.stderr);
    assert!(stderr.contains("diverged at epoch 1, batch 0"), "{stderr}");
    assert!(read_records(&c.out.join("run.jsonl")).unwrap()[0].failed());
    assert!(!c.out.join("model.irwt").exists());
}

#[test]
fn crossval_emits_rows_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let c = common(dir.path(), SMALL, "cv");
    let out = commands::crossval(&c, Some(2), Some(1)).unwrap();
    assert_eq!(out.result.records.len(), 2);
    let mut reader = csv::Reader::from_path(c.out.join("crossval.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[2][0], "mean");
    // Recompute every mean from the record rows.
    for col in 3..header.len() {
        let vals: Vec<f64> = rows[..2].iter().filter_map(|r| r[col].parse().ok()).collect();
        if vals.is_empty() {
            assert_eq!(&rows[2][col], "undefined");
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let got: f64 = rows[2][col].parse().unwrap();
        assert!((got - mean).abs() <= 1e-12, "{}: {got} vs {mean}", &header[col]);
    }
    let text = fs::read_to_string(c.out.join("crossval.txt")).unwrap();
    assert!(text.contains("ACC  "), "{text}");
    assert!(text.contains("E-0") || text.contains("E+0"), "{text}");
}

const SWEEP: &str = r#"
[train]
epochs = 1

[data]
synthetic = true
samples = 20
image_size = 32
holdout_folds = 4

[sweep]
learning_rates = [1e-3, 1e-4, 1e-5]
batch_sizes = [8, 16, 32, 64]
"#;

#[test]
fn sweep_covers_grid_and_parallel_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let seq = common(dir.path(), SWEEP, "seq");
    let par = common(dir.path(), SWEEP, "par");
    let out = commands::sweep(&seq, false).unwrap();
    commands::sweep(&par, true).unwrap();
    assert_eq!(out.rows.len(), 12);
    let csv_text = fs::read_to_string(seq.out.join("sweep.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 13);
    assert!(csv_text.starts_with("lr,bs,tl,val_acc,val_loss,status\n"));
    for f in ["sweep.csv", "sweep.jsonl", "best.txt"] {
        assert_eq!(bytes(seq.out.join(f)), bytes(par.out.join(f)), "{f}");
    }
    let layers = build_model(&ModelConfig::desk()).unwrap().layer_count();
    assert!(out.rows.iter().all(|r| r.tl == layers));
}

#[test]
fn sweep_records_failures_and_keeps_going() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SWEEP}trainable_layers = [1, 100000]\n");
    let c = common(
        dir.path(),
        &text
            .replace("[1e-3, 1e-4, 1e-5]", "[1e-3]")
            .replace("[8, 16, 32, 64]", "[8]"),
        "tl",
    );
    let out = commands::sweep(&c, false).unwrap();
    assert_eq!(out.rows.len(), 2);
    assert!(out.rows[0].ok());
    assert!(out.rows[1].status.starts_with("failed"), "{}", out.rows[1].status);
    assert_eq!(out.best, Some(0));
}

#[test]
fn empty_grid_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = common(
        dir.path(),
        "[data]\nsynthetic = true\n[sweep]\nlearning_rates = []\n",
        "empty",
    );
    assert!(commands::sweep(&c, false).is_err());
}

#[test]
fn best_cell_tie_break() {
    let row = |lr, bs, tl, acc| SweepRow {
        lr,
        bs,
        tl,
        val_acc: Some(acc),
        val_loss: Some(0.1),
        status: "ok".into(),
    };
    let rows = vec![
        row(1e-3, 8, 10, 0.9),
        row(1e-4, 16, 10, 0.9),
        row(1e-4, 8, 20, 0.9),
        row(1e-4, 8, 10, 0.9),
        row(1e-5, 8, 10, 0.8),
    ];
    assert_eq!(best_cell(&rows), Some(3));
    let mut failed = row(1e-6, 8, 10, 1.0);
    failed.status = "failed: x".into();
    assert_eq!(best_cell(&[failed.clone()]), None);
    assert_eq!(best_cell(&[failed, row(1e-3, 8, 10, 0.5)]), Some(1));
    assert_eq!(grid(&[1.0, 2.0], &[1, 2], &[10, 20, 30]).len(), 12);
}

#[test]
fn export_curves_is_sorted_and_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let c = common(dir.path(), SMALL, "cv");
    let cv = commands::crossval(&c, Some(2), Some(1)).unwrap();
    let csv_path = dir.path().join("plots/curves.csv");
    commands::export_curves(std::slice::from_ref(&c.out), &csv_path).unwrap();
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 2);
    let expected: Vec<(usize, usize, f64, f64)> = cv
        .result
        .records
        .iter()
        .flat_map(|r| r.curve.iter().map(move |e| (r.fold, e.epoch, e.train_loss, e.val_loss)))
        .collect();
    for (row, (fold, epoch, tl, vl)) in rows.iter().zip(expected) {
        assert_eq!(row[2].parse::<usize>().unwrap(), fold);
        assert_eq!(row[3].parse::<usize>().unwrap(), epoch);
        assert_eq!(row[4].parse::<f64>().unwrap().to_bits(), tl.to_bits());
        assert_eq!(row[5].parse::<f64>().unwrap().to_bits(), vl.to_bits());
    }
    let empty = dir.path().join("none");
    fs::create_dir_all(&empty).unwrap();
    assert!(commands::export_curves(&[empty], &dir.path().join("x.csv")).is_err());
}

#[test]
fn confusion_matches_evaluate_and_partitions_classes() {
    let dir = tempfile::tempdir().unwrap();
    let t = common(dir.path(), SMALL, "t");
    commands::train(&t, None).unwrap();
    let ckpt_path = t.out.join("model.irwt");
    let c = common(dir.path(), SMALL, "conf");
    let out = commands::confusion(&c, &ckpt_path, Split::Test).unwrap();
    let cm = &out.evaluation.confusion;
    let positives = out.samples.iter().filter(|s| s.label == 1).count() as u64;
    assert_eq!(cm.tp + cm.fn_, positives);
    assert_eq!(cm.tn + cm.fp, out.samples.len() as u64 - positives);
    let model = model_from_checkpoint(&Checkpoint::read(&ckpt_path).unwrap()).unwrap();
    assert_eq!(evaluate(&model, &out.samples, EVAL_BATCH).unwrap(), out.evaluation);
    let text = fs::read_to_string(c.out.join("confusion.txt")).unwrap();
    assert!(text.contains("ACC"));

    let e = common(dir.path(), SMALL, "eval");
    let ev = commands::evaluate(&e, &ckpt_path, Split::Test).unwrap();
    assert_eq!(ev.evaluation, out.evaluation);
    let scores = fs::read_to_string(e.out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 10);
}

#[test]
fn weights_inspect_and_convert_head() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.irwt");
    weights::save(&build_model(&ModelConfig::desk()).unwrap(), &path, &[]).unwrap();
    let text = commands::inspect(&path).unwrap();
    assert!(text.contains("head/dense/kernel"));
    assert!(text.contains("scalars"));
    let out = dir.path().join("three.irwt");
    let cli = Cli::parse_from([
        "irnet",
        "weights",
        "convert-head",
        path.to_str().unwrap(),
        "--classes",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    irnet_cli::run(cli).unwrap();
    let ckpt = Checkpoint::read(&out).unwrap();
    assert_eq!(ckpt.entry("head/dense/bias").unwrap().shape, vec![3]);
    assert_eq!(ckpt.model_config().unwrap().num_classes, 3);
}

#[test]
fn cli_parses_common_flags_everywhere() {
    for cmd in ["train", "crossval", "sweep", "shapes"] {
        let cli = Cli::try_parse_from([
            "irnet",
            cmd,
            "--config",
            "c.toml",
            "--manifest",
            "m.csv",
            "--out",
            "o",
            "--seed",
            "3",
            "--synthetic",
            "--desk",
        ]);
        assert!(cli.is_ok(), "{cmd}: {:?}", cli.err());
    }
    assert!(Cli::try_parse_from(["irnet", "finetune", "--desk"]).is_err());
    assert!(Cli::try_parse_from(["irnet", "train", "--bogus"]).is_err());
}

#[test]
fn shapes_command_prints_table() {
    let out = commands::shapes(&Common {
        desk: true,
        ..Common::default()
    })
    .unwrap();
    assert!(out.contains("head/dense"));
    assert!(out.ends_with("45 layers, 190246 parameters\n"), "{out}");
}
