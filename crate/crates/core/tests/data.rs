use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rap_core::data::{
    generate_patchcue, load_cifar_binary, nearest_template, parse_cifar, ratio_counts, read_dataset_dir, sample_episode,
    split_classes, split_images, write_cifar_binary, write_dataset_dir, Dataset, EpisodeSampler, PatchCueParams,
};
use rap_core::RapError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn patchcue(hw: usize, with_patch: bool) -> Dataset {
    let p = PatchCueParams {
        hw,
        with_patch,
        ..Default::default()
    };
    generate_patchcue(&p, &mut rng(11)).unwrap()
}

#[test]
fn episode_counts() {
    let data = patchcue(16, true);
    let classes: Vec<usize> = (0..16).collect();
    for (shot, ns) in [(1, 5), (5, 25)] {
        let ep = sample_episode(&data, &classes, 5, shot, 16, &mut rng(0)).unwrap();
        assert_eq!(ep.support.len(), ns);
        assert_eq!(ep.queries.len(), 80);
        assert_eq!(ep.support_labels().len(), ns);
        assert_eq!(ep.query_labels().len(), 80);
    }
    let a = sample_episode(&data, &classes, 5, 1, 16, &mut rng(3)).unwrap();
    let b = sample_episode(&data, &classes, 5, 1, 16, &mut rng(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sampler_names_the_deficit() {
    let data = patchcue(16, true);
    match EpisodeSampler::new(&data, &[0, 1, 2, 3], 5, 1, 16) {
        Err(RapError::InsufficientData(msg)) => assert!(msg.contains("short by 1"), "{msg}"),
        other => panic!("expected insufficient data, got {other:?}"),
    }
    match EpisodeSampler::new(&data, &[0, 1, 2, 3, 4], 5, 10, 55) {
        Err(RapError::InsufficientData(msg)) => assert!(msg.contains("short by 5"), "{msg}"),
        other => panic!("expected insufficient data, got {other:?}"),
    }
}

#[test]
fn episode_invariants_and_marginals_over_10k_episodes() {
    let data = patchcue(16, true);
    let split = split_classes(25, &[64, 16, 20], &mut rng(1)).unwrap();
    assert!(split.is_disjoint());
    let sampler = EpisodeSampler::new(&data, &split.train, 5, 1, 16).unwrap();
    let mut seen = [0usize; 25];
    let mut r = rng(2);
    let n = 10_000;
    for _ in 0..n {
        let ep = sampler.sample(&mut r);
        let classes: HashSet<usize> = ep.classes.iter().copied().collect();
        assert_eq!(classes.len(), 5);
        assert!(classes.iter().all(|c| split.train.contains(c)));
        let support: HashSet<usize> = ep.support.iter().copied().collect();
        assert!(ep.queries.iter().all(|q| !support.contains(q)));
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.queries.len(), 80);
        for (k, &c) in ep.classes.iter().enumerate() {
            assert_eq!(data.labels()[ep.support[k]], c);
            assert!(ep.queries[k * 16..(k + 1) * 16].iter().all(|&q| data.labels()[q] == c));
        }
        for c in ep.classes {
            seen[c] += 1;
        }
    }
    for &c in &split.train {
        let freq = seen[c] as f64 / n as f64;
        assert!((freq - 5.0 / 16.0).abs() <= 0.02, "class {c}: {freq}");
    }
}

#[test]
fn class_and_image_splits() {
    let s = split_classes(25, &[64, 16, 20], &mut rng(0)).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 4, 5));
    assert!(s.is_disjoint());
    assert_eq!(s, split_classes(25, &[64, 16, 20], &mut rng(0)).unwrap());
    let img = split_images(50_000, &[4, 1], &mut rng(0)).unwrap();
    assert_eq!((img.train.len(), img.val.len(), img.test.len()), (40_000, 10_000, 0));
    assert!(img.is_disjoint());
    assert!(split_classes(2, &[64, 16, 20], &mut rng(0)).is_err());
    assert!(split_classes(10, &[0, 0, 0], &mut rng(0)).is_err());
}

#[test]
fn patchcue_shape_and_oracles() {
    let data = patchcue(32, true);
    assert_eq!(data.len(), 1500);
    assert_eq!(data.num_classes(), 25);
    let patches = data.patches().unwrap();
    let hits = (0..data.len())
        .filter(|&i| nearest_template(&data, i, &patches[i]) == data.labels()[i])
        .count();
    assert!(hits as f64 / data.len() as f64 >= 0.99, "oracle {hits}");
    let masked = patchcue(32, false);
    assert_eq!(masked.patches().unwrap(), patches);
    let hits = (0..masked.len())
        .filter(|&i| nearest_template(&masked, i, &patches[i]) == masked.labels()[i])
        .count();
    let acc = hits as f64 / masked.len() as f64;
    assert!(acc < 0.12, "masked oracle {acc}");
    let too_big = PatchCueParams {
        hw: 4,
        ..Default::default()
    };
    assert!(generate_patchcue(&too_big, &mut rng(0)).is_err());
}

#[test]
fn patchcue_is_seeded() {
    let p = PatchCueParams {
        hw: 16,
        num_classes: 5,
        images_per_class: 4,
        ..Default::default()
    };
    assert_eq!(
        generate_patchcue(&p, &mut rng(5)).unwrap(),
        generate_patchcue(&p, &mut rng(5)).unwrap()
    );
    assert_ne!(
        generate_patchcue(&p, &mut rng(5)).unwrap(),
        generate_patchcue(&p, &mut rng(6)).unwrap()
    );
}

fn cifar_record(label: u8, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut rec = vec![label];
    rec.extend((0..3072).map(|_| r.random::<u8>()));
    rec
}

#[test]
fn cifar_single_record_is_channel_planar() {
    let rec = cifar_record(7, 0);
    let ds = parse_cifar(&rec, 10).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.labels(), &[7]);
    let px = ds.image_bytes(0);
    for (row, col) in [(0, 0), (5, 17), (31, 31)] {
        for ch in 0..3 {
            assert_eq!(px[(row * 32 + col) * 3 + ch], rec[1 + ch * 1024 + row * 32 + col]);
        }
    }
    let x = ds.batch::<f32>(&[0]);
    assert_eq!(x.shape(), &[1, 32, 32, 3]);
    assert_eq!(x.data()[0], rec[1] as f32 / 255.0);
}

#[test]
fn cifar_empty_and_malformed() {
    assert_eq!(parse_cifar(&[], 10).unwrap().len(), 0);
    let mut two = cifar_record(1, 0);
    two.extend(cifar_record(2, 1));
    two.truncate(3073 + 100);
    match parse_cifar(&two, 10) {
        Err(RapError::Cifar { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("{other:?}"),
    }
    let mut bad = cifar_record(1, 0);
    bad.extend(cifar_record(12, 1));
    match parse_cifar(&bad, 10) {
        Err(RapError::Cifar { offset, .. }) => assert_eq!(offset, 3073),
        other => panic!("{other:?}"),
    }
}

#[test]
fn cifar_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch.bin");
    let bytes: Vec<u8> = (0..20).flat_map(|i| cifar_record(i % 10, i as u64)).collect();
    std::fs::write(&path, &bytes).unwrap();
    let ds = load_cifar_binary(&path, 10).unwrap();
    let out = dir.path().join("copy.bin");
    write_cifar_binary(&ds, &out).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
    assert_eq!(load_cifar_binary(&out, 10).unwrap(), ds);
    match load_cifar_binary(&dir.path().join("missing.bin"), 10) {
        Err(RapError::Io { path, .. }) => assert!(path.ends_with("missing.bin")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dataset_directory_round_trip() {
    let p = PatchCueParams {
        hw: 16,
        num_classes: 6,
        images_per_class: 5,
        ..Default::default()
    };
    let ds = generate_patchcue(&p, &mut rng(1)).unwrap();
    let split = split_classes(6, &[64, 16, 20], &mut rng(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let extra = vec![("generator".to_string(), "patchcue".to_string())];
    write_dataset_dir(dir.path(), &ds, &split, 2, &extra).unwrap();
    let (back, back_split, manifest) = read_dataset_dir(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back_split, split);
    assert_eq!(manifest.get("classes"), Some("6"));
    assert_eq!(manifest.get("generator"), Some("patchcue"));
}

proptest! {
    #[test]
    fn ratio_counts_fill_every_bucket(n in 3usize..500, a in 1u32..100, b in 1u32..100, c in 1u32..100) {
        let counts = ratio_counts(n, &[a, b, c]).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert!(counts.iter().all(|&k| k >= 1));
        let total = (a + b + c) as f64;
        for (k, r) in counts.iter().zip([a, b, c]) {
            prop_assert!((*k as f64 - n as f64 * r as f64 / total).abs() < 2.0 + n as f64 * 0.0);
        }
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 3usize..200, seed in any::<u64>()) {
        let s = split_classes(n, &[64, 16, 20], &mut rng(seed)).unwrap();
        prop_assert!(s.is_disjoint());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
