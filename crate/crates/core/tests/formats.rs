//! Weight bundles and datasets written by hand, the way an external exporter would.

use std::fs;
use std::path::Path;

use patchcert::eval::Dataset;
use patchcert::{extract_features, predict, save_tensor, Error, ModelWeights, Tensor};

fn write(dir: &Path, name: &str, shape: Vec<usize>, data: Vec<f32>) {
    save_tensor(dir.join(name), &Tensor::new(shape, data).unwrap()).unwrap();
}

/// One 2x2 stride-1 conv from 1 to 2 channels, then a 2-class head.
fn exporter_bundle(dir: &Path) {
    fs::write(
        dir.join("manifest.json"),
        r#"{
  "layers": [{"kernel": 2, "stride": 1, "in_channels": 1, "out_channels": 2}],
  "num_classes": 2,
  "metadata": {"source": "hand written", "epoch": 3}
}"#,
    )
    .unwrap();
    // channel 0 sums the 2x2 block, channel 1 takes its top-left pixel minus 1
    write(
        dir,
        "conv0_w.npy",
        vec![2, 1, 2, 2],
        vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
    );
    write(dir, "conv0_b.npy", vec![2], vec![0.0, -1.0]);
    write(dir, "head_A.npy", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    write(dir, "head_b.npy", vec![2], vec![0.0, 0.25]);
}

#[test]
fn exporter_bundle_loads_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    exporter_bundle(dir.path());
    let m = ModelWeights::load_bundle(dir.path()).unwrap();
    assert_eq!(m.receptive_field().size, 2);
    assert_eq!(m.num_classes(), 2);
    let x = Tensor::new(
        vec![3, 3, 1],
        vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
    )
    .unwrap();
    let u = extract_features(&x, &m).unwrap();
    assert_eq!(u.shape(), &[2, 2, 2]);
    let sums = [0.8f32, 1.2, 2.0, 2.4];
    for (cell, s) in sums.iter().enumerate() {
        assert!((u.data()[cell * 2] - s).abs() < 1e-6);
        assert_eq!(u.data()[cell * 2 + 1], 0.0);
    }
    let p = predict(&u, &m).unwrap();
    assert_eq!(p.label, 0);
    assert!((p.logits[0] - 1.6).abs() < 1e-6);
    assert!((p.logits[1] - 0.25).abs() < 1e-6);
}

#[test]
fn bundle_errors() {
    let dir = tempfile::tempdir().unwrap();
    exporter_bundle(dir.path());
    write(dir.path(), "head_b.npy", vec![3], vec![0.0; 3]);
    assert!(matches!(
        ModelWeights::load_bundle(dir.path()),
        Err(Error::Shape(_))
    ));

    exporter_bundle(dir.path());
    write(dir.path(), "conv0_w.npy", vec![2, 1, 3, 3], vec![0.0; 18]);
    assert!(ModelWeights::load_bundle(dir.path()).is_err());

    exporter_bundle(dir.path());
    fs::remove_file(dir.path().join("conv0_b.npy")).unwrap();
    assert!(matches!(
        ModelWeights::load_bundle(dir.path()),
        Err(Error::Io { .. })
    ));

    exporter_bundle(dir.path());
    fs::write(
        dir.path().join("manifest.json"),
        r#"{"layers": [], "num_classes": 2}"#,
    )
    .unwrap();
    assert!(ModelWeights::load_bundle(dir.path()).is_err());
}

#[test]
fn headerless_labels_and_whitespace() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "b.npy", vec![2, 2, 1], vec![0.5; 4]);
    write(dir.path(), "a.npy", vec![2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]);
    fs::write(dir.path().join("labels.csv"), "b.npy, 3\na.npy,1\n").unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.ids, vec!["b.npy", "a.npy"]);
    assert_eq!(ds.labels, vec![3, 1]);
    assert_eq!(ds.images[1].data(), &[0.0, 1.0, 0.0, 1.0]);

    let out = tempfile::tempdir().unwrap();
    ds.save(out.path()).unwrap();
    let text = fs::read_to_string(out.path().join("labels.csv")).unwrap();
    assert_eq!(text, "filename,label\nb.npy,3\na.npy,1\n");
    let back = Dataset::load(out.path()).unwrap();
    assert_eq!(back.images, ds.images);
}

#[test]
fn missing_image_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("labels.csv"),
        "filename,label\nmissing.npy,0\n",
    )
    .unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io { .. })));
}
