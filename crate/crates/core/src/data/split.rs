use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledSample;
use crate::error::{Error, Result};
use crate::params::derive_seed;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// `[train, validation, test]` sample counts per class.
    pub per_class: Vec<[usize; 3]>,
}

/// Stratified split by sample. Augmented samples follow the partition of the
/// source image they derive from.
pub fn holdout_split(
    samples: &[LabeledSample],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let keys: Vec<(usize, usize)> = samples
        .iter()
        .map(|s| {
            let next = ids.len();
            (s.label, *ids.entry(s.group.as_str()).or_insert(next))
        })
        .collect();
    split_groups(&keys, test_fraction, val_fraction, seed)
}

/// Splits items given as `(label, group id)`. Whole groups are assigned to one
/// partition. Per class, `floor(test_fraction * groups)` groups go to test.
/// Validation takes `round(val_fraction * remaining groups)` overall,
/// apportioned over classes by largest remainder (ties to the lower class).
/// Everything else is train. Group order within a class is shuffled by a seed
/// derived from `(seed, class)`.
pub fn split_groups(
    items: &[(usize, usize)],
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    for (name, f) in [("test", test_fraction), ("validation", val_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!(
                "{name} fraction must lie in [0, 1), got {f}"
            )));
        }
    }
    let classes = items.iter().map(|&(l, _)| l + 1).max().unwrap_or(0);
    // groups per class in first-appearance order, with their member items
    let mut groups: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); classes];
    let mut slot: HashMap<usize, (usize, usize)> = HashMap::new();
    for (i, &(label, group)) in items.iter().enumerate() {
        match slot.get(&group) {
            Some(&(l, j)) => {
                if l != label {
                    return Err(Error::Data(format!(
                        "group {group} spans classes {l} and {label}"
                    )));
                }
                groups[l][j].1.push(i);
            }
            None => {
                slot.insert(group, (label, groups[label].len()));
                groups[label].push((group, vec![i]));
            }
        }
    }
    if test_fraction > 0.0 {
        if let Some(c) = groups.iter().position(|g| !g.is_empty() && g.len() < 2) {
            return Err(Error::Data(format!(
                "class {c} has fewer than 2 source images; cannot stratify"
            )));
        }
    }

    let test_counts: Vec<usize> = groups
        .iter()
        .map(|g| (test_fraction * g.len() as f64 + 1e-9).floor() as usize)
        .collect();
    let rest: Vec<usize> = groups
        .iter()
        .zip(&test_counts)
        .map(|(g, t)| g.len() - t)
        .collect();
    let val_counts = apportion(&rest, val_fraction);

    let mut split = DatasetSplit {
        per_class: vec![[0; 3]; classes],
        ..DatasetSplit::default()
    };
    for (c, class_groups) in groups.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, c as u64]));
        class_groups.shuffle(&mut rng);
        for (k, (_, members)) in class_groups.iter().enumerate() {
            let part = if k < test_counts[c] {
                2
            } else if k < test_counts[c] + val_counts[c] {
                1
            } else {
                0
            };
            split.per_class[c][part] += members.len();
            let target = match part {
                0 => &mut split.train,
                1 => &mut split.validation,
                _ => &mut split.test,
            };
            target.extend_from_slice(members);
        }
    }
    split.train.sort_unstable();
    split.validation.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Distributes `round(fraction * Σ sizes)` over the entries by largest remainder.
fn apportion(sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| fraction * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let rem = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (rem(a), rem(b));
        if (ra - rb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(target.saturating_sub(assigned)) {
        counts[i] = (counts[i] + 1).min(sizes[i]);
    }
    counts
}
