use std::collections::HashSet;

use jacmatch::bound::{superset_monotonicity, MetricSpace};
use jacmatch::data::*;
use jacmatch::Error;

fn blobs(k: usize, dim: usize, noise: f64, train: usize) -> SyntheticTask {
    SyntheticTask {
        kind: TaskKind::GaussianBlobs { k, dim },
        noise,
        train_per_class: train,
        test_per_class: 5,
        image: None,
    }
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn generation_is_deterministic() {
    let task = SyntheticTask {
        kind: TaskKind::TwoMoons { k: 3 },
        noise: 0.1,
        train_per_class: 20,
        test_per_class: 10,
        image: Some(ImageShape {
            channels: 2,
            height: 6,
            width: 6,
        }),
    };
    let (a, at) = generate(&task, 9).unwrap();
    let (b, bt) = generate(&task, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(at, bt);
    assert_ne!(generate(&task, 10).unwrap().0, a);
    assert_eq!(a.sample_shape(), &[2, 6, 6]);
    assert_eq!(a.len(), 60);
    assert_eq!(at.class_counts(), vec![10; 3]);
    assert!(!a.is_normalized());
}

#[test]
fn splits_are_disjoint() {
    let (train, test) = generate(&blobs(3, 2, 0.5, 50), 1).unwrap();
    let seen: HashSet<Vec<u64>> = train.points().iter().map(|p| key(p)).collect();
    assert!(test.points().iter().all(|p| !seen.contains(&key(p))));
}

#[test]
fn zero_noise_blobs_are_linearly_separable() {
    let (train, _) = generate(&blobs(5, 3, 0.0, 40), 2).unwrap();
    // nearest-centroid rule written as a linear classifier
    let mut centroids = vec![vec![0.0; 3]; 5];
    for (p, &l) in train.points().iter().zip(train.labels()) {
        for (c, v) in centroids[l].iter_mut().zip(p) {
            *c += v / 40.0;
        }
    }
    let score = |p: &[f64], c: &[f64]| -> f64 {
        p.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() - 0.5 * c.iter().map(|v| v * v).sum::<f64>()
    };
    let correct = train
        .points()
        .iter()
        .zip(train.labels())
        .filter(|(p, &l)| (0..5).all(|o| o == l || score(p, &centroids[l]) > score(p, &centroids[o])))
        .count();
    assert_eq!(correct, train.len());
}

#[test]
fn degenerate_tasks_are_rejected() {
    assert!(generate(&blobs(3, 2, -0.1, 5), 0).is_err());
    assert!(generate(&blobs(1, 2, 0.1, 5), 0).is_err());
    assert!(generate(&blobs(3, 2, 0.1, 0), 0).is_err());
}

#[test]
fn checkerboard_labels_follow_the_cells() {
    let task = SyntheticTask {
        kind: TaskKind::Checkerboard,
        noise: 0.0,
        train_per_class: 50,
        test_per_class: 1,
        image: None,
    };
    let (train, _) = generate(&task, 3).unwrap();
    for (p, &l) in train.points().iter().zip(train.labels()) {
        assert_eq!((p[0].floor() as usize + p[1].floor() as usize) % 2, l);
    }
}

#[test]
fn subset_of_full_count_is_a_permutation() {
    let (train, _) = generate(&blobs(4, 2, 0.3, 10), 1).unwrap();
    let sub = subset_per_class(&train, 10, 5).unwrap();
    let mut a: Vec<Vec<u64>> = train.points().iter().map(|p| key(p)).collect();
    let mut b: Vec<Vec<u64>> = sub.points().iter().map(|p| key(p)).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn one_per_class_over_a_hundred_classes() {
    let (train, _) = generate(&blobs(100, 2, 0.3, 3), 1).unwrap();
    let sub = subset_per_class(&train, 1, 0).unwrap();
    assert_eq!(sub.len(), 100);
    assert_eq!(sub.labels().iter().collect::<HashSet<_>>().len(), 100);
}

#[test]
fn insufficient_class_is_named() {
    let (train, _) = generate(&blobs(3, 2, 0.3, 4), 1).unwrap();
    match subset_per_class(&train, 5, 0) {
        Err(Error::InsufficientClass { class, have, need }) => assert_eq!((class, have, need), (0, 4, 5)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn subsets_from_two_seeds_overlap_as_expected() {
    let (train, _) = generate(&blobs(10, 2, 0.3, 100), 1).unwrap();
    let a = subset_per_class(&train, 50, 1).unwrap();
    let b = subset_per_class(&train, 50, 2).unwrap();
    assert_eq!(a.class_counts(), vec![50; 10]);
    let ka: HashSet<Vec<u64>> = a.points().iter().map(|p| key(p)).collect();
    let common = b.points().iter().filter(|p| ka.contains(&key(p))).count();
    // hypergeometric: mean 10 * 50 * 50 / 100 = 250, sd about 8
    assert!((210..=290).contains(&common), "{common}");
    assert_ne!(a, b);
}

fn write_records(records: &[(u8, Vec<u8>)]) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("images.bin");
    let mut bytes = Vec::new();
    for (l, px) in records {
        bytes.push(*l);
        bytes.extend(px);
    }
    std::fs::write(&path, bytes).unwrap();
    (dir, path)
}

#[test]
fn binary_loader_reads_records() {
    let layout = ImageLayout {
        channels: 1,
        height: 2,
        width: 2,
        classes: 10,
    };
    let (_dir, path) = write_records(&[(3, vec![0, 51, 102, 255]), (7, vec![255, 204, 153, 0])]);
    let ds = load_image_binary(&path, layout).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels(), &[3, 7]);
    assert!(ds.is_normalized());
    let raw = [0.0, 0.2, 0.4, 1.0, 1.0, 0.8, 0.6, 0.0];
    let mean = raw.iter().sum::<f64>() / 8.0;
    let std = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
    let stats = ds.stats().unwrap();
    assert!((stats.mean[0] - mean).abs() < 1e-15);
    assert!((stats.std[0] - std).abs() < 1e-15);
    for (got, r) in ds.inputs().iter().zip(raw) {
        assert!((got - (r - mean) / std).abs() < 1e-12);
    }
}

#[test]
fn binary_loader_edge_cases() {
    let layout = ImageLayout {
        channels: 3,
        height: 2,
        width: 2,
        classes: 100,
    };
    let (_d1, empty) = write_records(&[]);
    assert_eq!(load_image_binary(&empty, layout).unwrap().len(), 0);

    let (_d2, bad) = write_records(&[(255, vec![0; 12])]);
    match load_image_binary(&bad, layout) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{other:?}"),
    }

    let (_d3, short) = write_records(&[(1, vec![0; 12]), (2, vec![0; 5])]);
    match load_image_binary(&short, layout) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 13),
        other => panic!("{other:?}"),
    }
}

#[test]
fn normalizing_twice_is_rejected() {
    let (mut train, mut test) = generate(&blobs(3, 2, 0.5, 30), 1).unwrap();
    train.normalize().unwrap();
    let stats = train.stats().unwrap().clone();
    for c in 0..2 {
        let col: Vec<f64> = train.points().iter().map(|p| p[c]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-12);
    }
    assert!(train.normalize().is_err());
    test.normalize_with(&stats).unwrap();
    assert!(test.normalize_with(&stats).is_err());
}

#[test]
fn zero_sigma_noise_is_identity() {
    let (train, _) = generate(&blobs(3, 2, 0.5, 10), 1).unwrap();
    assert_eq!(add_input_noise(&train, 0.0, 4).unwrap(), train);
    assert!(add_input_noise(&train, -1.0, 4).is_err());
}

#[test]
fn input_noise_has_the_requested_variance() {
    let n = 100_000;
    let ds = Dataset::new("zeros", &[1], vec![0.0; n], vec![0; n], 1).unwrap();
    let sigma = 0.7;
    let noisy = add_input_noise(&ds, sigma, 3).unwrap();
    assert_eq!(noisy.labels(), ds.labels());
    let v = noisy.inputs();
    let m = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "{var}");
}

#[test]
fn noise_augmented_target_set_shrinks_the_distance() {
    let (train, test) = generate(&blobs(3, 2, 0.5, 30), 2).unwrap();
    let small = subset_per_class(&test, 2, 0).unwrap();
    let mut extra = Vec::new();
    for s in 0..5 {
        extra.extend(add_input_noise(&small, 0.3, s).unwrap().points());
    }
    let (before, after) = superset_monotonicity(&train.points(), &small.points(), &extra, &MetricSpace::identity()).unwrap();
    assert!(after <= before);
}

#[test]
fn manifest_round_trips_through_json() {
    let (mut train, _) = generate(&blobs(3, 2, 0.5, 4), 1).unwrap();
    train.normalize().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = train.manifest(Some(1));
    m.write(&path).unwrap();
    let back: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.count, 12);
    assert_eq!(back.class_counts, vec![4; 3]);
}

#[test]
fn batches_keep_sample_shape() {
    let task = SyntheticTask {
        kind: TaskKind::TwoMoons { k: 2 },
        noise: 0.1,
        train_per_class: 5,
        test_per_class: 1,
        image: Some(ImageShape {
            channels: 1,
            height: 4,
            width: 4,
        }),
    };
    let (train, _) = generate(&task, 0).unwrap();
    let (x, labels) = train.batch(&[0, 3, 7]).unwrap();
    assert_eq!(x.shape(), &[3, 1, 4, 4]);
    assert_eq!(labels, vec![train.labels()[0], train.labels()[3], train.labels()[7]]);
    assert_eq!(&x.data()[16..32], train.sample(3));
    assert!(train.batch(&[10]).is_err());
}
