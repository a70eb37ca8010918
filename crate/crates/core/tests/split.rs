use std::collections::{BTreeSet, HashMap};

use image::RgbImage;
use proptest::prelude::*;
use rsfme_core::data::{holdout_split, split_groups, DatasetSplit, LabeledSample};

fn items(per_class: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        for _ in 0..n {
            out.push((c, out.len()));
        }
    }
    out
}

fn assert_partition(split: &DatasetSplit, n: usize) {
    let mut all: Vec<usize> = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .copied()
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..n).collect::<Vec<_>>());
}

#[test]
fn dataset_class_counts_give_expected_partition_sizes() {
    let counts = [770, 1050, 924, 4014, 1596];
    let split = split_groups(&items(&counts), 0.2, 0.2, 0).unwrap();
    assert_eq!(split.test.len(), 1669);
    assert_eq!(split.validation.len(), 1337);
    assert_eq!(split.train.len(), 5348);
    assert_partition(&split, 8354);
    // independent oracle: floor for test, then the per-class validation shares
    for (c, &n) in counts.iter().enumerate() {
        let test = n / 5;
        assert_eq!(split.per_class[c][2], test);
        let val = split.per_class[c][1] as f64;
        assert!((val - 0.2 * (n - test) as f64).abs() <= 1.0);
    }
}

#[test]
fn zero_fractions_put_everything_in_train() {
    let split = split_groups(&items(&[3, 4]), 0.0, 0.0, 9).unwrap();
    assert_eq!(split.train.len(), 7);
    assert!(split.validation.is_empty() && split.test.is_empty());
}

#[test]
fn fractions_outside_unit_interval_are_rejected() {
    assert!(split_groups(&items(&[5]), 1.0, 0.0, 0).is_err());
    assert!(split_groups(&items(&[5]), 0.2, -0.1, 0).is_err());
    assert!(split_groups(&items(&[1, 5]), 0.2, 0.2, 0).is_err());
}

#[test]
fn hundred_samples_are_disjoint_covering_and_stratified() {
    let counts = [10, 20, 30, 25, 15];
    let a = split_groups(&items(&counts), 0.2, 0.2, 3).unwrap();
    assert_partition(&a, 100);
    for (c, &n) in counts.iter().enumerate() {
        let share = a.per_class[c][2] as f64 / n as f64;
        assert!((share - 0.2).abs() * n as f64 <= 1.0);
    }
    assert_eq!(a, split_groups(&items(&counts), 0.2, 0.2, 3).unwrap());
    assert_ne!(
        a.test,
        split_groups(&items(&counts), 0.2, 0.2, 4).unwrap().test
    );
}

#[test]
fn augmented_copies_never_cross_partitions() {
    let mut samples = Vec::new();
    for c in 0..3 {
        for i in 0..10 {
            for _copy in 0..4 {
                samples.push(LabeledSample::new(
                    RgbImage::new(1, 1),
                    c,
                    format!("c{c}/img{i}"),
                ));
            }
        }
    }
    let split = holdout_split(&samples, 0.2, 0.2, 7).unwrap();
    assert_partition(&split, samples.len());
    let mut part_of: HashMap<&str, usize> = HashMap::new();
    for (p, ids) in [&split.train, &split.validation, &split.test]
        .iter()
        .enumerate()
    {
        for &i in ids.iter() {
            let prev = part_of.insert(samples[i].group.as_str(), p);
            assert!(
                prev.is_none_or(|q| q == p),
                "group {} split across partitions",
                samples[i].group
            );
        }
    }
    assert_eq!(split.test.len(), 3 * 2 * 4);
}

proptest! {
    #[test]
    fn split_is_a_stratified_partition(
        counts in prop::collection::vec(2usize..40, 2..6),
        test in 0.0f64..0.5,
        val in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let its = items(&counts);
        let split = split_groups(&its, test, val, seed).unwrap();
        let mut seen = BTreeSet::new();
        for i in split.train.iter().chain(&split.validation).chain(&split.test) {
            prop_assert!(seen.insert(*i));
        }
        prop_assert_eq!(seen.len(), its.len());
        for (c, &n) in counts.iter().enumerate() {
            prop_assert_eq!(split.per_class[c][2], (test * n as f64 + 1e-9).floor() as usize);
            prop_assert_eq!(split.per_class[c].iter().sum::<usize>(), n);
        }
        let rest: usize = its.len() - split.test.len();
        prop_assert_eq!(split.validation.len(), (val * rest as f64).round() as usize);
    }
}
