use std::fs;

use cct_shp::data::{load_cifar, CifarVariant, Split};
use cct_shp::synthetic::{write_synthetic_cifar, SyntheticConfig};
use cct_shp::Error;

#[test]
fn cifar100_layout_and_fine_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        variant: CifarVariant::Cifar100,
        train_per_label: 100,
        val_per_label: 1,
        ..SyntheticConfig::default()
    };
    write_synthetic_cifar(dir.path(), &cfg).unwrap();
    // the real CIFAR-100 validation file holds 10000 records of 3074 bytes
    let train = fs::read(dir.path().join("train.bin")).unwrap();
    assert_eq!(train.len(), 10_000 * 3074);
    let ds = load_cifar(dir.path().join("train.bin"), CifarVariant::Cifar100, Split::Train).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.num_labels, 100);
    assert_eq!(ds.image(0).len(), 3072);
    assert_eq!(ds.label_counts(), vec![100; 100]);
    // fine label is the second byte of a record
    assert_eq!(ds.labels[57], train[57 * 3074 + 1] as usize);
    let val = load_cifar(dir.path(), CifarVariant::Cifar100, Split::Validation).unwrap();
    assert_eq!(val.len(), 100);
}

#[test]
fn cifar10_directory_reads_five_batches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        variant: CifarVariant::Cifar10,
        train_per_label: 5,
        val_per_label: 2,
        ..SyntheticConfig::default()
    };
    write_synthetic_cifar(dir.path(), &cfg).unwrap();
    let ds = load_cifar(dir.path(), CifarVariant::Cifar10, Split::Train).unwrap();
    assert_eq!(ds.len(), 50);
    assert!(ds.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let val = load_cifar(dir.path(), CifarVariant::Cifar10, Split::Validation).unwrap();
    assert_eq!(val.len(), 20);
}

#[test]
fn empty_file_reports_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.bin");
    fs::write(&p, b"").unwrap();
    match load_cifar(&p, CifarVariant::Cifar10, Split::Train) {
        Err(Error::Ingestion { offset, path, .. }) => {
            assert_eq!(offset, 0);
            assert_eq!(path, p);
        }
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn truncated_record_reports_its_offset() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 3 * 3073];
    bytes.truncate(2 * 3073 + 100);
    let p = dir.path().join("cut.bin");
    fs::write(&p, &bytes).unwrap();
    match load_cifar(&p, CifarVariant::Cifar10, Split::Train) {
        Err(Error::Ingestion { offset, .. }) => assert_eq!(offset, 2 * 3073),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 2 * 3073];
    bytes[3073] = 10;
    let p = dir.path().join("bad.bin");
    fs::write(&p, &bytes).unwrap();
    match load_cifar(&p, CifarVariant::Cifar10, Split::Train) {
        Err(Error::Ingestion { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("expected ingestion error, got {other:?}"),
    }
}

#[test]
fn missing_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_cifar(dir.path().join("nope"), CifarVariant::Cifar100, Split::Train).is_err());
}

#[test]
fn label_filter_downscale_and_normalize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        variant: CifarVariant::Cifar100,
        train_per_label: 3,
        val_per_label: 1,
        ..SyntheticConfig::default()
    };
    write_synthetic_cifar(dir.path(), &cfg).unwrap();
    let ds = load_cifar(dir.path(), CifarVariant::Cifar100, Split::Train).unwrap();
    let labels = cct_shp::data::parse_label_subset("0..9").unwrap();
    let sub = ds
        .filter_labels(&labels)
        .unwrap()
        .downscale(2)
        .unwrap()
        .normalized()
        .unwrap();
    assert_eq!(sub.num_labels, 10);
    assert_eq!(sub.len(), 30);
    assert_eq!(sub.size, 16);
    for i in 0..sub.len() {
        let img = sub.image(i);
        let n = img.len() as f64;
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-4);
    }
}
