mod common;

use std::fs;

use bnn_rram::dataio::{load_idx_images, load_idx_labels, load_mnist, subset, Dataset, Split};
use bnn_rram::HarnessError;
use common::*;

#[test]
fn fixture_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = vec![0, 1, 127, 128, 254, 255, 3, 9];
    fs::write(dir.path().join("img"), idx_images(2, 2, 2, &payload)).unwrap();
    fs::write(dir.path().join("lab"), idx_labels(&[3, 7])).unwrap();
    let t = load_idx_images(dir.path().join("img")).unwrap();
    assert_eq!((t.count, t.rows, t.cols), (2, 2, 2));
    for (p, b) in t.pixels.iter().zip(&payload) {
        assert_eq!(*p, f32::from(*b) / 255.0);
    }
    assert_eq!(load_idx_labels(dir.path().join("lab")).unwrap(), vec![3, 7]);
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::write(&empty, b"").unwrap();
    assert!(matches!(
        load_idx_images(&empty),
        Err(HarnessError::Format { .. })
    ));
    let short = dir.path().join("short");
    fs::write(&short, idx_images(3, 2, 2, &[0; 10])).unwrap();
    let err = load_idx_images(&short).unwrap_err().to_string();
    assert!(err.contains("expected 28 bytes, found 26"), "{err}");
    let bad = dir.path().join("bad");
    fs::write(&bad, idx_labels(&[1, 12, 3])).unwrap();
    assert!(matches!(
        load_idx_labels(&bad),
        Err(HarnessError::InvalidLabel {
            index: 1,
            label: 12,
            ..
        })
    ));
    assert!(matches!(
        load_idx_images(dir.path().join("absent")),
        Err(HarnessError::Io { .. })
    ));
}

#[test]
fn mismatched_pair_is_a_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_mnist(dir.path(), 20, 10);
    fs::write(
        dir.path().join("t10k-labels-idx1-ubyte"),
        idx_labels(&[1; 9]),
    )
    .unwrap();
    assert!(matches!(
        load_mnist(dir.path(), Split::Test),
        Err(HarnessError::Consistency(_))
    ));
    assert_eq!(load_mnist(dir.path(), Split::Train).unwrap().len(), 20);
}

#[test]
fn missing_directory_explains_how_to_fetch() {
    let dir = tempfile::tempdir().unwrap();
    match load_mnist(dir.path(), Split::Train) {
        Err(e @ HarnessError::MissingData { .. }) => {
            assert!(e.to_string().contains("train-images-idx3-ubyte"))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn subset_of_1000_is_class_balanced() {
    let (p, l) = synthetic(20_000, 5);
    let images: Vec<f32> = p.iter().map(|&b| f32::from(b) / 255.0).collect();
    let d = Dataset::from_parts(images, l, 64, Split::Train).unwrap();
    for seed in 0..5 {
        let s = subset(&d, 1000, seed).unwrap();
        assert_eq!(s.len(), 1000);
        // each class has probability 0.1 in the parent
        let sd = (1000.0f64 * 0.1 * 0.9).sqrt();
        for (c, &count) in s.class_counts().iter().enumerate() {
            assert!(
                (count as f64 - 100.0).abs() <= 4.0 * sd,
                "seed {seed} class {c}: {count}"
            );
        }
    }
}

#[test]
fn official_files_have_canonical_shapes() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not present; skipping");
        return;
    };
    let train = load_idx_images(dir.join("train-images-idx3-ubyte")).unwrap();
    assert_eq!((train.count, train.rows, train.cols), (60_000, 28, 28));
    let test = load_mnist(&dir, Split::Test).unwrap();
    assert_eq!((test.len(), test.image_len()), (10_000, 784));
    let real = load_mnist(&dir, Split::Train).unwrap();
    let s = subset(&real, 1000, 3).unwrap();
    let counts = real.class_counts();
    for (c, &k) in s.class_counts().iter().enumerate() {
        let p = counts[c] as f64 / real.len() as f64;
        let sd = (1000.0 * p * (1.0 - p)).sqrt();
        assert!((k as f64 - 1000.0 * p).abs() <= 4.0 * sd, "class {c}: {k}");
    }
}
