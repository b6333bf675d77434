use irnet::arch::{build_model, ModelConfig};
use irnet::weights::{load_partial, save, tensor_digest, Checkpoint, Entry, LoadPolicy, FORMAT_VERSION};
use irnet::{Error, Tensor};
use proptest::prelude::*;

fn desk(classes: usize, seed: u64) -> irnet::arch::ModelGraph {
    build_model(&ModelConfig {
        num_classes: classes,
        seed,
        ..ModelConfig::desk()
    })
    .unwrap()
}

fn batch(n: usize) -> Tensor {
    Tensor::from_fn(vec![n, 75, 75, 3], |i| ((i * 2654435761) % 1000) as f32 / 1000.0)
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.irwt");
    let mut model = desk(2, 3);
    // Make the running statistics non-trivial first.
    model.loss_and_grads(&batch(4), &[0, 1, 0, 1], 0).unwrap();
    let ckpt = save(&model, &path, &[("epoch", "7".into())]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"IRWT\x01\x00\x00\x00");
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.meta("epoch"), Some("7"));
    assert_eq!(back.entries.len(), model.params().len() + 2 * model.bn_states().len());

    let mut fresh = desk(2, 99);
    let report = load_partial(&mut fresh, &back, LoadPolicy::Strict).unwrap();
    assert_eq!(report.loaded.len(), back.entries.len());
    assert!(report.skipped.is_empty());
    assert_eq!(fresh.count_params(), model.count_params());
    for (a, b) in fresh.params().iter().zip(model.params()) {
        assert_eq!(tensor_digest(&a.value), tensor_digest(&b.value));
    }
    assert_eq!(fresh.bn_states(), model.bn_states());
    // Only the recorded config (its seed) differs.
    assert_eq!(Checkpoint::from_model(&fresh, &[]).entries, back.entries);
}

#[test]
fn running_statistics_follow_their_layer() {
    let ckpt = Checkpoint::from_model(&desk(2, 0), &[]);
    let names: Vec<&str> = ckpt.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(
        &names[..6],
        [
            "stem/conv1/kernel",
            "stem/conv1/gamma",
            "stem/conv1/beta",
            "stem/conv1/moving_mean",
            "stem/conv1/moving_var",
            "stem/conv2/kernel"
        ]
    );
}

#[test]
fn head_swap_transfers_the_backbone() {
    let mut source = desk(1000, 5);
    source.loss_and_grads(&batch(4), &[0, 999, 3, 1], 0).unwrap();
    let ckpt = Checkpoint::from_model(&source, &[]);
    let mut target = desk(2, 6);
    let report = load_partial(&mut target, &ckpt, LoadPolicy::SkipMismatched).unwrap();
    let skipped: Vec<&str> = report.skipped.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(skipped, ["head/dense/kernel", "head/dense/bias"]);
    assert_eq!(report.loaded.len() + report.skipped.len(), ckpt.entries.len());
    let x = batch(3);
    assert_eq!(source.features(&x).unwrap().data(), target.features(&x).unwrap().data());
    assert_eq!(target.predict(&x).unwrap().shape(), [3, 2]);

    // A second identical load changes nothing.
    let before = Checkpoint::from_model(&target, &[]).to_bytes().unwrap();
    load_partial(&mut target, &ckpt, LoadPolicy::SkipMismatched).unwrap();
    assert_eq!(Checkpoint::from_model(&target, &[]).to_bytes().unwrap(), before);
}

#[test]
fn strict_and_skip_missing_reject_shape_mismatch_without_writing() {
    let ckpt = Checkpoint::from_model(&desk(1000, 5), &[]);
    let mut target = desk(2, 6);
    let before = Checkpoint::from_model(&target, &[]).to_bytes().unwrap();
    for policy in [LoadPolicy::Strict, LoadPolicy::SkipMissing] {
        match load_partial(&mut target, &ckpt, policy) {
            Err(Error::CheckpointMismatch(list)) => {
                assert_eq!(list.len(), 2, "{list:?}");
                assert!(list.iter().all(|m| m.contains("head/dense")));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(Checkpoint::from_model(&target, &[]).to_bytes().unwrap(), before);
    }
}

#[test]
fn skip_missing_ignores_unknown_entries() {
    let mut ckpt = Checkpoint::from_model(&desk(2, 1), &[]);
    ckpt.entries.push(Entry {
        name: "aux/logits/kernel".into(),
        shape: vec![2],
        data: vec![0.0, 1.0],
    });
    let mut target = desk(2, 2);
    assert!(load_partial(&mut target, &ckpt, LoadPolicy::Strict).is_err());
    let report = load_partial(&mut target, &ckpt, LoadPolicy::SkipMissing).unwrap();
    assert_eq!(report.skipped.len(), 1);
    assert_eq!(report.loaded.len() + 1, ckpt.entries.len());
}

#[test]
fn reset_head_is_local_and_seeded() {
    let mut a = desk(1000, 4);
    let backbone: Vec<String> = a
        .params()
        .iter()
        .filter(|p| !p.name.starts_with("head/"))
        .map(|p| tensor_digest(&p.value))
        .collect();
    a.reset_head(2, 17).unwrap();
    let after: Vec<String> = a
        .params()
        .iter()
        .filter(|p| !p.name.starts_with("head/"))
        .map(|p| tensor_digest(&p.value))
        .collect();
    assert_eq!(backbone, after);
    assert_eq!(a.predict(&batch(2)).unwrap().shape(), [2, 2]);
    let mut b = desk(1000, 4);
    b.reset_head(2, 17).unwrap();
    assert_eq!(a.param("head/dense/kernel"), b.param("head/dense/kernel"));
    b.reset_head(2, 18).unwrap();
    assert_ne!(a.param("head/dense/kernel"), b.param("head/dense/kernel"));
    assert!(a.reset_head(1, 0).is_err());
}

#[test]
fn missing_file_error_names_the_path() {
    let err = Checkpoint::read(std::path::Path::new("/nonexistent/x.irwt")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.irwt"), "{err}");
}

fn arb_checkpoint() -> impl Strategy<Value = Checkpoint> {
    let entry =
        ("[a-z/_]{1,12}", prop::collection::vec(1usize..4, 0..4), any::<u32>()).prop_map(|(name, shape, bits)| {
            let n: usize = shape.iter().product();
            Entry {
                name,
                data: (0..n as u32)
                    .map(|i| f32::from_bits(bits.wrapping_add(i.wrapping_mul(2654435761))))
                    .collect(),
                shape,
            }
        });
    (
        prop::collection::vec(("[a-z_]{0,8}", "\\PC{0,16}"), 0..4),
        prop::collection::vec(entry, 0..6),
    )
        .prop_map(|(metadata, mut entries)| {
            let mut seen = std::collections::HashSet::new();
            entries.retain(|e| seen.insert(e.name.clone()));
            Checkpoint {
                version: FORMAT_VERSION,
                metadata,
                entries,
            }
        })
}

proptest! {
    #[test]
    fn bytes_round_trip(ckpt in arb_checkpoint()) {
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.entries.len(), ckpt.entries.len());
        for (a, b) in back.entries.iter().zip(&ckpt.entries) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
    }
}
