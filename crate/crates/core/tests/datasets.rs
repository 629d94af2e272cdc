//! Dataset readers and the batch iterator.

use anyhow::Result;
use bnn_core::data::{
    batches, encode_cifar_batch, encode_idx_images, encode_idx_labels, load_cifar10, load_mnist,
    parse_cifar_batch, parse_idx_images, parse_idx_labels, Dataset, NormStats, Split,
    CIFAR_TEST_BATCH, CIFAR_TRAIN_BATCHES,
};
use bnn_core::BnnError;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn write_mnist(dir: &std::path::Path, train: usize, test: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    let px = |n: usize, salt: usize| -> Vec<u8> {
        (0..n * 784).map(|i| ((i * 7 + salt) % 256) as u8).collect()
    };
    let lbl = |n: usize| -> Vec<u8> { (0..n).map(|i| (i % 10) as u8).collect() };
    let (train_px, test_px) = (px(train, 1), px(test, 3));
    std::fs::write(
        dir.join("train-images-idx3-ubyte"),
        encode_idx_images(&train_px, train, 28, 28),
    )?;
    std::fs::write(
        dir.join("train-labels-idx1-ubyte"),
        encode_idx_labels(&lbl(train)),
    )?;
    std::fs::write(
        dir.join("t10k-images-idx3-ubyte"),
        encode_idx_images(&test_px, test, 28, 28),
    )?;
    std::fs::write(
        dir.join("t10k-labels-idx1-ubyte"),
        encode_idx_labels(&lbl(test)),
    )?;
    Ok((train_px, test_px))
}

#[test]
fn mnist_loader_round_trips_pixels_and_uses_train_statistics() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let (train_px, test_px) = write_mnist(dir.path(), 12, 5)?;
    let (train, test) = load_mnist(dir.path())?;
    assert_eq!((train.len(), test.len()), (12, 5));
    assert_eq!(train.item_shape(), &[1, 28, 28]);
    assert_eq!((train.split, test.split), (Split::Train, Split::Test));
    assert_eq!(train.denormalized_pixels(), train_px);
    assert_eq!(test.denormalized_pixels(), test_px);
    assert_eq!(train.norm, test.norm);
    assert_eq!(train.norm, NormStats::from_pixels(&train_px, 1, 784)?);
    let mean: f64 =
        train.images.values().iter().map(|&v| v as f64).sum::<f64>() / train.images.len() as f64;
    assert!(mean.abs() < 1e-4);
    Ok(())
}

#[test]
fn mnist_loader_reports_missing_and_corrupt_files() -> Result<()> {
    let dir = tempfile::tempdir()?;
    assert!(matches!(load_mnist(dir.path()), Err(BnnError::Io(_))));
    write_mnist(dir.path(), 4, 2)?;
    let path = dir.path().join("train-labels-idx1-ubyte");
    let mut bytes = std::fs::read(&path)?;
    bytes.pop();
    std::fs::write(&path, &bytes)?;
    match load_mnist(dir.path()) {
        Err(BnnError::Format { msg, .. }) => assert!(msg.contains("train-labels"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
    Ok(())
}

#[test]
fn cifar_loader_reads_planes_in_channel_order() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let record = 3 * 32 * 32;
    let mut all = Vec::new();
    for (b, name) in CIFAR_TRAIN_BATCHES
        .iter()
        .chain([&CIFAR_TEST_BATCH])
        .enumerate()
    {
        let labels: Vec<u8> = (0..3).map(|i| ((b + i) % 10) as u8).collect();
        // Channel c of every image is constant 60·c + b, so per-channel means
        // identify plane order.
        let px: Vec<u8> = (0..3 * record)
            .map(|i| (60 * ((i % record) / 1024) + b) as u8)
            .collect();
        std::fs::write(dir.path().join(name), encode_cifar_batch(&px, &labels)?)?;
        all.push((px, labels));
    }
    let (train, test) = load_cifar10(dir.path())?;
    assert_eq!((train.len(), test.len()), (15, 3));
    assert_eq!(train.item_shape(), &[3, 32, 32]);
    for c in 0..3 {
        assert!((train.norm.mean[c] - (60 * c) as f32 - 2.0).abs() < 1e-3);
    }
    assert_eq!(test.denormalized_pixels(), all[5].0);
    assert_eq!(
        test.labels,
        all[5].1.iter().map(|&l| l as usize).collect::<Vec<_>>()
    );
    Ok(())
}

#[test]
fn out_of_range_labels_are_rejected() {
    let r = Dataset::from_pixels(
        &[0; 4],
        [1, 2, 2],
        vec![3],
        Split::Train,
        3,
        NormStats::identity(1),
    );
    assert!(r.is_err());
    let mut rec = vec![0u8; 3073];
    rec[0] = 10;
    assert!(parse_cifar_batch(&rec).is_err());
    assert!(parse_cifar_batch(&rec[..3000]).is_err());
}

fn toy(n: usize) -> Dataset {
    let px: Vec<u8> = (0..n * 4).map(|i| i as u8).collect();
    Dataset::from_pixels(
        &px,
        [1, 2, 2],
        (0..n).map(|i| i % 3).collect(),
        Split::Train,
        3,
        NormStats::identity(1),
    )
    .unwrap()
}

#[test]
fn ten_items_in_batches_of_four_give_4_4_2() -> Result<()> {
    let ds = toy(10);
    let sizes: Vec<usize> = batches(&ds, 4, Some(1))?
        .map(|b| b.map(|b| b.labels.len()))
        .collect::<Result<_, _>>()?;
    assert_eq!(sizes, [4, 4, 2]);
    assert!(batches(&ds, 0, None).is_err());
    Ok(())
}

proptest! {
    #[test]
    fn idx_round_trip(n in 0usize..6, rows in 1usize..9, cols in 1usize..9, salt in any::<u8>()) {
        let px: Vec<u8> = (0..n * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i as u8).wrapping_add(salt) % 10).collect();
        prop_assert_eq!(parse_idx_images(&encode_idx_images(&px, n, rows, cols)).unwrap(), (px.clone(), n, rows, cols));
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
        let mut long = encode_idx_images(&px, n, rows, cols);
        long.push(0);
        prop_assert!(parse_idx_images(&long).is_err());
    }

    #[test]
    fn cifar_round_trip(labels in prop::collection::vec(0u8..10, 0..4), salt in any::<u8>()) {
        let px: Vec<u8> = (0..labels.len() * 3072).map(|i| (i as u8) ^ salt).collect();
        let (p, l) = parse_cifar_batch(&encode_cifar_batch(&px, &labels).unwrap()).unwrap();
        prop_assert_eq!(p, px);
        prop_assert_eq!(l, labels.iter().map(|&x| x as usize).collect::<Vec<_>>());
    }

    /// Any normalization stats with a positive scale invert exactly on bytes.
    #[test]
    fn normalization_inverts_on_bytes(px in prop::collection::vec(any::<u8>(), 4..64), mean in 0f32..255.0, std in 0.5f32..120.0) {
        let n = px.len() / 4;
        let norm = NormStats { mean: vec![mean], std: vec![std] };
        let ds = Dataset::from_pixels(&px[..n * 4], [1, 2, 2], vec![0; n], Split::Test, 1, norm).unwrap();
        prop_assert_eq!(ds.denormalized_pixels(), px[..n * 4].to_vec());
    }

    /// Batches partition the dataset, the order depends only on the seed,
    /// and each batch carries the items it names.
    #[test]
    fn batches_partition_and_are_seed_deterministic(n in 1usize..60, bs in 1usize..17, seed in any::<u64>()) {
        let ds = toy(n);
        let a: Vec<_> = batches(&ds, bs, Some(seed)).unwrap().map(Result::unwrap).collect();
        let b: Vec<_> = batches(&ds, bs, Some(seed)).unwrap().map(Result::unwrap).collect();
        prop_assert_eq!(a.len(), n.div_ceil(bs));
        let mut seen = BTreeSet::new();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.indices, &y.indices);
            prop_assert!(x.indices.len() <= bs);
            for (k, &i) in x.indices.iter().enumerate() {
                prop_assert!(seen.insert(i));
                prop_assert_eq!(x.labels[k], ds.labels[i]);
                prop_assert_eq!(&x.images.values()[k * 4..(k + 1) * 4], &ds.images.values()[i * 4..(i + 1) * 4]);
            }
        }
        prop_assert_eq!(seen.len(), n);
        let ordered: Vec<usize> = batches(&ds, bs, None).unwrap().flat_map(|b| b.unwrap().indices).collect();
        prop_assert_eq!(ordered, (0..n).collect::<Vec<_>>());
    }
}
