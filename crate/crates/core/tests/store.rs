use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use shortcut_lens::image::Image;
use shortcut_lens::pipeline::{PipelineConfig, Runner, VAL_ACTIVATIONS};
use shortcut_lens::store::{read_json, read_tensor, write_json, write_tensor, Store, Tensor};
use shortcut_lens::vit::{export_activations, ActivationSet, ViTConfig, ViTModel};
use shortcut_lens::Error;

fn activation_set() -> ActivationSet {
    let config = ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
        seed: 1,
        ..Default::default()
    };
    let model = ViTModel::init(&config).unwrap();
    let images: Vec<Image> = (0..5).map(|i| Image::filled(16, 1, i as f32 * 0.2)).collect();
    ActivationSet {
        records: export_activations(&model, images.iter().enumerate().map(|(i, im)| (i as u64, im))).unwrap(),
    }
}

#[test]
fn activation_set_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let run = store.create_run(serde_json::json!({})).unwrap();
    let set = activation_set();
    store.write_artifact(&run.run_id, VAL_ACTIVATIONS, &set).unwrap();
    let back: ActivationSet = store.read_artifact(&run.run_id, VAL_ACTIVATIONS).unwrap();
    assert_eq!(back, set);
    for (a, b) in back.records.iter().zip(&set.records) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.per_head_keys), bits(&b.per_head_keys));
        assert_eq!(bits(a.token_embeddings.as_slice()), bits(b.token_embeddings.as_slice()));
    }
}

#[test]
fn every_tensor_dtype_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        Tensor::f64(&[2, 2], vec![1.5, -0.0, f64::MAX, f64::MIN_POSITIVE]).unwrap(),
        Tensor::f32(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
        Tensor::u8(&[2, 1], vec![0, 255]).unwrap(),
        Tensor::u32(&[1], vec![u32::MAX]).unwrap(),
        Tensor::u64(&[0], vec![]).unwrap(),
    ];
    for (i, t) in cases.iter().enumerate() {
        let path = dir.path().join(format!("t{i}.bin"));
        write_tensor(&path, t).unwrap();
        assert_eq!(&read_tensor(&path).unwrap(), t);
    }
    assert!(Tensor::f64(&[2, 2], vec![1.0]).is_err());
}

#[test]
fn truncated_tensor_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    write_tensor(&path, &Tensor::f64(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match read_tensor(&path) {
        Err(Error::Integrity { offset, .. }) => assert!(offset > 0),
        other => panic!("expected an integrity error, got {other:?}"),
    }
    fs::write(&path, &bytes[..3]).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Integrity { .. })));
    fs::write(&path, b"JUNKJUNKJUNKJUNK").unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Integrity { offset: 0, .. })));
}

#[test]
fn manifest_shape_mismatch_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let run = store.create_run(serde_json::json!({})).unwrap();
    store
        .write_artifact(&run.run_id, VAL_ACTIVATIONS, &activation_set())
        .unwrap();
    let manifest = store.artifact_dir(&run.run_id, VAL_ACTIVATIONS).join("manifest.json");
    let mut m: serde_json::Value = read_json(&manifest).unwrap();
    let tensors = m["tensors"].as_object_mut().unwrap();
    let first = tensors.values_mut().next().unwrap();
    first["shape"][0] = serde_json::json!(first["shape"][0].as_u64().unwrap() + 1);
    write_json(&manifest, &m).unwrap();
    let r: shortcut_lens::Result<ActivationSet> = store.read_artifact(&run.run_id, VAL_ACTIVATIONS);
    assert!(matches!(r, Err(Error::Integrity { .. })), "{r:?}");
}

#[test]
fn missing_artifacts_and_runs_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    assert!(matches!(store.load_run("01NOPE"), Err(Error::NotFound(_))));
    assert!(matches!(store.latest_run(), Err(Error::NotFound(_))));
    let run = store.create_run(serde_json::json!({})).unwrap();
    let r: shortcut_lens::Result<ActivationSet> = store.read_artifact(&run.run_id, VAL_ACTIVATIONS);
    assert!(matches!(r, Err(Error::NotFound(_))));
    assert!(!store.has_artifact(&run.run_id, VAL_ACTIVATIONS));
}

#[test]
fn runs_are_listed_and_reloaded() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let a = store.create_run(serde_json::json!({"seed": 1})).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(3));
    let b = store.create_run(serde_json::json!({"seed": 2})).unwrap();
    assert_eq!(store.load_run(&a.run_id).unwrap(), a);
    let ids: Vec<String> = store.list_runs().unwrap().into_iter().map(|r| r.run_id).collect();
    assert_eq!(ids.len(), 2);
    assert!(ids.contains(&a.run_id) && ids.contains(&b.run_id));
    assert_eq!(store.latest_run().unwrap().run_id, b.run_id);
}

fn artifact_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run.json" {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_runs_write_identical_artifacts() {
    let config = PipelineConfig::from_file(Path::new("tests/fixtures/tiny.toml")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = Store::new(dir.path());
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let mut r = Runner::create(store.clone(), &config).unwrap();
        r.run_all(false).unwrap();
        dirs.push(r.run_dir());
    }
    let (a, b) = (artifact_bytes(&dirs[0]), artifact_bytes(&dirs[1]));
    assert!(a.len() > 10);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
}
