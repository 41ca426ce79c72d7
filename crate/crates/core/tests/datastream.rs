mod common;

use std::collections::BTreeSet;

use common::{rng, tiny_data};
use proptest::prelude::*;
use tmcl_core::datastream::{
    apply_augmentation, check_plan, generate, label_preservation_rate, split_sessions, Augmentation, AugmentationSpec,
    DataSpec, SyntheticDataset,
};
use tmcl_core::Error;

#[test]
fn zero_noise_samples_sit_on_their_anchors() {
    let spec = DataSpec {
        num_classes: 2,
        class_std: 0.0,
        nuisance_std: 0.0,
        noise_std: 0.0,
        train_per_class: 5,
        test_per_class: 2,
        ..tiny_data()
    };
    // A zero within-class spread makes any separation requirement trivial.
    let ds = generate(3, &spec).unwrap();
    for split in [&ds.train, &ds.test] {
        for i in 0..split.len() {
            assert_eq!(split.x.row(i), ds.anchors.row(split.labels[i] as usize));
        }
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let a = generate(5, &tiny_data()).unwrap();
    let b = generate(5, &tiny_data()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = generate(6, &tiny_data()).unwrap();
    assert_ne!(a.train.x, c.train.x);
}

#[test]
fn anchors_respect_the_separation_requirement() {
    let spec = DataSpec::default();
    let ds = generate(0, &spec).unwrap();
    let min = spec.min_separation * spec.within_class_std();
    for i in 0..spec.num_classes {
        for j in i + 1..spec.num_classes {
            let d: f64 =
                ds.anchors.row(i).iter().zip(ds.anchors.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d >= min, "anchors {i},{j} at {d} < {min}");
        }
    }
    assert!(label_preservation_rate(&ds, &spec.augmentation, 5000, 1) >= 0.99);
}

#[test]
fn destructive_augmentation_is_rejected() {
    let spec = DataSpec {
        augmentation: AugmentationSpec { noise_std: 20.0, ..AugmentationSpec::default() },
        ..tiny_data()
    };
    assert!(matches!(generate(0, &spec), Err(Error::Config(_))));
}

#[test]
fn file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(2, &tiny_data()).unwrap();
    let path = dir.path().join("data.bin");
    ds.save(&path).unwrap();
    let back = SyntheticDataset::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ds.to_bytes());
    assert_eq!(back.train.labels, ds.train.labels);

    let mut bytes = ds.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(SyntheticDataset::from_bytes(&bytes), Err(Error::Format(_))));
    let mut bytes = ds.to_bytes();
    bytes.push(0);
    assert!(matches!(SyntheticDataset::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn twelve_classes_into_four_sessions() {
    let ds = generate(0, &DataSpec { train_per_class: 20, test_per_class: 5, ..DataSpec::default() }).unwrap();
    let plan = split_sessions(&ds, 4, 0.1, 0, 0).unwrap();
    check_plan(&ds, &plan).unwrap();
    assert!(plan.sessions.iter().all(|s| s.classes.len() == 3));
    let all: BTreeSet<u32> = plan.all_classes().into_iter().collect();
    assert_eq!(all, (0..12).collect());

    let single = split_sessions(&ds, 1, 1.0, 0, 0).unwrap();
    assert_eq!(single.num_sessions(), 1);
    assert_eq!(single.sessions[0].train.len(), ds.train.len());
    assert_eq!(single.sessions[0].labeled, single.sessions[0].train);

    assert!(matches!(split_sessions(&ds, 5, 0.1, 0, 0), Err(Error::Config(_))));
}

#[test]
fn identity_augmentation_and_seeded_draws() {
    let x = [1.0, -2.0, 3.5];
    assert_eq!(apply_augmentation(&x, &Augmentation::identity(3)), x.to_vec());
    let spec = AugmentationSpec::default();
    let a = spec.draw(3, &mut rng(9));
    let b = spec.draw(3, &mut rng(9));
    assert_eq!(apply_augmentation(&x, &a), apply_augmentation(&x, &b));
    let noise_only = spec.noise_only().draw(3, &mut rng(1));
    assert!(noise_only.keep.iter().all(|&k| k));
    assert_eq!(noise_only.scale, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn session_plans_are_disjoint_exhaustive_and_stable(
        split_seed in any::<u64>(),
        label_seed in any::<u64>(),
        sessions in prop::sample::select(vec![1usize, 2, 4]),
        fraction in prop::sample::select(vec![0.01, 0.1, 0.5, 1.0]),
    ) {
        let ds = generate(1, &tiny_data()).unwrap();
        let plan = split_sessions(&ds, sessions, fraction, split_seed, label_seed).unwrap();
        prop_assert!(check_plan(&ds, &plan).is_ok());
        let mut seen = BTreeSet::new();
        for s in &plan.sessions {
            for &c in &s.classes {
                prop_assert!(seen.insert(c));
            }
            let train: BTreeSet<usize> = s.train.iter().copied().collect();
            prop_assert!(s.labeled.iter().all(|i| train.contains(i)));
            prop_assert!(s.train.iter().all(|&i| s.classes.contains(&ds.train.labels[i])));
            prop_assert!(s.test.iter().all(|&i| s.classes.contains(&ds.test.labels[i])));
            for &c in &s.classes {
                let n = s.labeled.iter().filter(|&&i| ds.train.labels[i] == c).count();
                prop_assert!(n >= 2);
            }
        }
        prop_assert_eq!(seen.len(), ds.spec.num_classes);
        let again = split_sessions(&ds, sessions, fraction, split_seed, label_seed).unwrap();
        prop_assert_eq!(plan, again);
    }
}
