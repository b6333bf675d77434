use std::collections::BTreeSet;

use irnet::arch::{build_model, LayerParams, ModelConfig, ModelGraph};
use irnet::data::{gen_synthetic, Sample};
use irnet::eval::Value;
use irnet::train::{
    adam_step, crossval, crossval_plan, finetune, fit, read_records, sgd_momentum_step, AdamState, OptimizerKind,
    RunStatus, SgdState, TrainConfig,
};
use irnet::weights::{tensor_digest, Checkpoint};
use irnet::{Error, Tensor};

fn scalar_param(value: f32, grad: f32, trainable: bool) -> Vec<LayerParams> {
    let mut p = LayerParams::new("w", Tensor::new(vec![1], vec![value]).unwrap(), 0);
    p.grad = Tensor::new(vec![1], vec![grad]).unwrap();
    p.trainable = trainable;
    vec![p]
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = scalar_param(1.0, 1.0, true);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &mut st, 0.1).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction, so the step is 0.1 / (1 + 1e-7).
    let want = 1.0 - 0.1 / (1.0 + 1e-7);
    assert!((p[0].value.data()[0] as f64 - want).abs() < 1e-7);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_leaves_zero_gradients_and_frozen_params_alone() {
    let mut p = scalar_param(0.25, 0.0, true);
    let mut st = AdamState::new(&p);
    for _ in 0..5 {
        adam_step(&mut p, &mut st, 0.1).unwrap();
    }
    assert_eq!(p[0].value.data()[0].to_bits(), 0.25f32.to_bits());

    let mut p = scalar_param(0.25, 3.0, false);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &mut st, 0.1).unwrap();
    assert_eq!(p[0].value.data()[0].to_bits(), 0.25f32.to_bits());
}

#[test]
fn non_finite_gradient_is_named_and_nothing_moves() {
    let mut p = scalar_param(0.5, 1.0, true);
    let mut bad = scalar_param(0.5, f32::NAN, true);
    bad[0].name = "block/kernel".into();
    p.extend(bad);
    let mut st = AdamState::new(&p);
    match adam_step(&mut p, &mut st, 0.1) {
        Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "block/kernel"),
        other => panic!("{other:?}"),
    }
    assert_eq!(p[0].value.data()[0], 0.5);
    assert_eq!(st.t, 0);
}

#[test]
fn sgd_momentum_by_hand() {
    let mut p = scalar_param(1.0, 2.0, true);
    let mut st = SgdState::new(&p);
    sgd_momentum_step(&mut p, &mut st, 0.1).unwrap();
    assert!((p[0].value.data()[0] - 0.8).abs() < 1e-7);
    sgd_momentum_step(&mut p, &mut st, 0.1).unwrap();
    // velocity = 0.9·(−0.2) − 0.2
    assert!((p[0].value.data()[0] - 0.42).abs() < 1e-6);
}

fn desk(seed: u64) -> ModelGraph {
    build_model(&ModelConfig {
        seed,
        ..ModelConfig::desk()
    })
    .unwrap()
}

fn data(n: usize, seed: u64) -> Vec<Sample> {
    gen_synthetic(n, 75, seed).unwrap()
}

fn quick(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size,
        epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn config_validation() {
    let (train, val) = (data(10, 1), data(4, 2));
    for bad in [
        TrainConfig {
            epochs: 0,
            ..quick(1, 4)
        },
        TrainConfig {
            learning_rate: 0.0,
            ..quick(1, 4)
        },
        TrainConfig {
            batch_size: 0,
            ..quick(1, 4)
        },
    ] {
        assert!(matches!(fit(&mut desk(0), &train, &val, &bad), Err(Error::Config(_))));
    }
    let text = r#"{"learning_rate": 0.001, "bogus": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(text).is_err());
}

#[test]
fn one_epoch_accounting() {
    let (train, val) = (data(10, 1), data(4, 2));
    let r = fit(&mut desk(0), &train, &val, &quick(1, 4)).unwrap();
    assert_eq!(r.curve.len(), 1);
    assert_eq!(r.curve[0].epoch, 1);
    assert_eq!(r.steps, 3);
    assert_eq!(r.status, RunStatus::Completed);
    assert!(r.metrics.is_some());
}

#[test]
fn trailing_single_sample_batch_is_merged() {
    let (train, val) = (data(10, 1), data(4, 2));
    let r = fit(&mut desk(0), &train, &val, &quick(1, 3)).unwrap();
    assert_eq!(r.steps, 3);
}

fn snapshot(m: &ModelGraph) -> Vec<String> {
    let mut out: Vec<String> = m.params().iter().map(|p| tensor_digest(&p.value)).collect();
    for st in m.bn_states() {
        out.push(tensor_digest(&st.mean));
        out.push(tensor_digest(&st.var));
    }
    out
}

#[test]
fn total_freeze_changes_nothing() {
    let (train, val) = (data(10, 1), data(4, 2));
    let mut model = desk(0);
    let before = snapshot(&model);
    let cfg = TrainConfig {
        trainable_layers: Some(0),
        ..quick(2, 4)
    };
    let r = fit(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(snapshot(&model), before);
    assert_eq!(r.curve.len(), 2);
    assert_eq!(r.curve[0].val_loss, r.curve[1].val_loss);
}

#[test]
fn partial_freeze_keeps_frozen_tensors() {
    let (train, val) = (data(12, 1), data(4, 2));
    let mut model = desk(0);
    let before = snapshot(&model);
    let cfg = TrainConfig {
        trainable_layers: Some(3),
        ..quick(1, 4)
    };
    fit(&mut model, &train, &val, &cfg).unwrap();
    let after = snapshot(&model);
    for (i, p) in model.params().iter().enumerate() {
        assert_eq!(before[i] == after[i], !p.trainable, "{}", p.name);
    }
}

#[test]
fn fit_is_deterministic() {
    let (train, val) = (data(12, 1), data(6, 2));
    let cfg = TrainConfig {
        dropout_rate: Some(0.5),
        ..quick(2, 4)
    };
    let a = fit(&mut desk(3), &train, &val, &cfg).unwrap();
    let b = fit(&mut desk(3), &train, &val, &cfg).unwrap();
    assert_eq!(a, b);
    let c = fit(&mut desk(3), &train, &val, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.checkpoint_digest, c.checkpoint_digest);
}

#[test]
fn nan_loss_aborts_with_position() {
    let (train, val) = (data(10, 1), data(4, 2));
    let mut model = desk(0);
    model.params_mut()[0].value.data_mut()[0] = f32::NAN;
    let r = fit(&mut model, &train, &val, &quick(3, 4)).unwrap();
    match &r.status {
        RunStatus::Failed { epoch, batch, .. } => assert_eq!((*epoch, *batch), (1, 0)),
        other => panic!("{other:?}"),
    }
    assert!(r.curve.is_empty());
    assert!(r.metrics.is_none());
}

#[test]
fn train_loss_falls_on_separable_task() {
    let (train, val) = (data(32, 11), data(8, 12));
    for seed in [1, 2] {
        let cfg = TrainConfig { seed, ..quick(4, 8) };
        let r = fit(&mut desk(seed), &train, &val, &cfg).unwrap();
        assert!(
            r.curve.last().unwrap().train_loss < r.curve[0].train_loss,
            "seed {seed}"
        );
    }
}

#[test]
fn finetune_from_identical_model_skips_only_the_head() {
    let (train, val) = (data(10, 1), data(4, 2));
    let cfg = ModelConfig::desk();
    let base = Checkpoint::from_model(&build_model(&cfg).unwrap(), &[]);
    let tc = TrainConfig {
        trainable_layers: Some(1),
        ..quick(1, 4)
    };
    let (model, record) = finetune(&base, &cfg, &tc, &train, &val).unwrap();
    let report = record.load_report.unwrap();
    let skipped: BTreeSet<&str> = report.skipped.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(skipped, BTreeSet::from(["head/dense/kernel", "head/dense/bias"]));
    assert!(report.untouched.iter().all(|n| n.starts_with("head/")));
    let fresh = build_model(&cfg).unwrap();
    let kernel = |m: &ModelGraph| m.param("head/dense/kernel").unwrap().value.clone();
    assert_ne!(kernel(&model), kernel(&fresh));
    let stem = |m: &ModelGraph| m.param("stem/conv1/kernel").unwrap().value.clone();
    assert_eq!(stem(&model), stem(&fresh));
}

#[test]
fn crossval_partitions_and_aggregates() {
    let samples = data(10, 4);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let plan = crossval_plan(&labels, 2, 1, 7).unwrap();
    let mut seen: Vec<usize> = plan.iter().flat_map(|t| t.val.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_eq!(plan.iter().map(|t| t.seed).collect::<Vec<_>>(), [7, 8]);

    let cfg = TrainConfig { seed: 7, ..quick(1, 4) };
    let res = crossval(&samples, &ModelConfig::desk(), &cfg, 2, 1, None).unwrap();
    assert_eq!(res.records.len(), 2);
    assert_eq!(res.failed, 0);
    let accs: Vec<f64> = res
        .records
        .iter()
        .map(|r| r.metrics.as_ref().unwrap().acc.get().unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let agg = res.aggregate.unwrap();
    assert!((agg.report.acc.get().unwrap() - mean).abs() < 1e-12);
    for (i, r) in res.records.iter().enumerate() {
        assert_eq!((r.run, r.fold), (0, i));
        assert_eq!(r.train_size + r.val_size, 10);
    }

    let again = crossval(&samples, &ModelConfig::desk(), &cfg, 2, 1, None).unwrap();
    assert_eq!(res.records, again.records);
}

#[test]
fn records_round_trip_through_jsonl() {
    let (train, val) = (data(10, 1), data(4, 2));
    let cfg = TrainConfig {
        optimizer: OptimizerKind::SgdMomentum,
        ..quick(2, 4)
    };
    let r = fit(&mut desk(0), &train, &val, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    irnet::train::write_records(&path, &[r.clone(), r.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains(r#""optimizer":"sgd_momentum""#));
    assert_eq!(read_records(&path).unwrap(), vec![r.clone(), r]);
    assert!(matches!(Value::undefined("x"), Value::Undefined { .. }));
}

#[test]
fn early_stop_ends_after_target_epoch() {
    let (train, val) = (data(10, 1), data(4, 2));
    let cfg = TrainConfig {
        stop_at_val_acc: Some(1e-9),
        ..quick(5, 4)
    };
    let r = fit(&mut desk(0), &train, &val, &cfg).unwrap();
    assert_eq!(r.curve.len(), 1);
    assert!(r.metrics.is_some());
    let bad = TrainConfig {
        stop_at_val_acc: Some(1.5),
        ..quick(1, 4)
    };
    assert!(matches!(fit(&mut desk(0), &train, &val, &bad), Err(Error::Config(_))));
}
