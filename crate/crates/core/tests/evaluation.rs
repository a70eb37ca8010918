use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsfme_core::evaluation::{
    binary_tally, ci_half_width, confusion, default_names, feature_projection, metrics_csv,
    pr_curve, pr_curves, report, ConfusionMatrix, METRICS_HEADER,
};
use rsfme_tensor::Tensor;

const MATRIX: &str = "\
CPox Cowpox Measles Mpox Normal
203 0 0 12 0
1 182 1 4 0
1 2 152 1 3
4 0 0 774 0
1 1 1 4 316
";

const ROWS: [[u64; 5]; 5] = [
    [203, 0, 0, 12, 0],
    [1, 182, 1, 4, 0],
    [1, 2, 152, 1, 3],
    [4, 0, 0, 774, 0],
    [1, 1, 1, 4, 316],
];

#[test]
fn reference_counts_reproduce_reported_metrics() {
    let cm = ConfusionMatrix::parse(MATRIX).unwrap();
    let r = report(&cm, None).unwrap();
    let total: u64 = ROWS.iter().flatten().sum();
    let diag: u64 = (0..5).map(|i| ROWS[i][i]).sum();
    assert_eq!((r.total, total, diag), (1663, 1663, 1627));
    let acc = r.accuracy.unwrap();
    assert!((acc - 100.0 * diag as f64 / total as f64).abs() < 1e-12);
    assert!((acc - 97.8).abs() <= 0.1, "{acc}");

    let mpox = &r.per_class[3].1;
    let col: u64 = ROWS.iter().map(|r| r[3]).sum();
    let row: u64 = ROWS[3].iter().sum();
    assert!((mpox.sen.unwrap() - 100.0 * 774.0 / col as f64).abs() < 1e-12);
    assert!((mpox.pre.unwrap() - 100.0 * 774.0 / row as f64).abs() < 1e-12);
    assert!((mpox.sen.unwrap() - 97.4).abs() <= 0.1);
    assert!((mpox.pre.unwrap() - 99.5).abs() <= 0.1);

    // per-class rates from row and column sums
    let row_rate: f64 = (0..5)
        .map(|i| ROWS[i][i] as f64 / ROWS[i].iter().sum::<u64>() as f64)
        .sum::<f64>()
        * 20.0;
    let col_rate: f64 = (0..5)
        .map(|i| ROWS[i][i] as f64 / ROWS.iter().map(|r| r[i]).sum::<u64>() as f64)
        .sum::<f64>()
        * 20.0;
    let t = &r.macro_transposed;
    assert!((t.sen.unwrap() - row_rate).abs() < 1e-12);
    assert!((t.pre.unwrap() - col_rate).abs() < 1e-12);
    assert!((t.sen.unwrap() - 96.82).abs() <= 0.05, "{:?}", t.sen);
    assert!((t.pre.unwrap() - 98.06).abs() <= 0.05, "{:?}", t.pre);
    assert!((t.f.unwrap() - 97.44).abs() <= 0.05, "{:?}", t.f);
    assert_eq!(r.macro_avg.sen, t.pre);
    assert_eq!(r.macro_avg.pre, t.sen);
}

#[test]
fn tally_partitions_every_sample() {
    let cm = ConfusionMatrix::parse(MATRIX).unwrap();
    for k in 0..5 {
        let t = binary_tally(&cm, k).unwrap();
        assert_eq!(t.total(), 1663);
        assert_eq!(t.tp, ROWS[k][k]);
    }
    assert!(binary_tally(&cm, 5).is_err());
}

#[test]
fn confusion_counts_prediction_rows() {
    let cm = confusion(&[0, 2, 2, 1], &[0, 1, 2, 1], default_names(3)).unwrap();
    assert_eq!(
        (cm.get(0, 0), cm.get(2, 1), cm.get(2, 2), cm.get(1, 1)),
        (1, 1, 1, 1)
    );
    assert_eq!(cm.total(), 4);
    assert!(confusion(&[3], &[0], default_names(3)).is_err());
    assert_eq!(ConfusionMatrix::parse(&cm.to_text()).unwrap(), cm);
}

#[test]
fn identity_matrix_has_no_errors() {
    let cm = confusion(
        &(0..10).map(|i| i % 4).collect::<Vec<_>>(),
        &(0..10).map(|i| i % 4).collect::<Vec<_>>(),
        default_names(4),
    )
    .unwrap();
    assert_eq!(cm.correct(), 10);
    for k in 0..4 {
        let t = binary_tally(&cm, k).unwrap();
        assert_eq!((t.fp, t.fn_), (0, 0));
    }
}

#[test]
fn tallies_match_recount_from_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let c = rng.random_range(2..6);
        let n = rng.random_range(1..40);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let cm = confusion(&preds, &labels, default_names(c)).unwrap();
        for k in 0..c {
            let t = binary_tally(&cm, k).unwrap();
            let count = |f: &dyn Fn(usize, usize) -> bool| {
                preds.iter().zip(&labels).filter(|(&p, &l)| f(p, l)).count() as u64
            };
            assert_eq!(t.tp, count(&|p, l| p == k && l == k));
            assert_eq!(t.fp, count(&|p, l| p == k && l != k));
            assert_eq!(t.fn_, count(&|p, l| p != k && l == k));
            assert_eq!(t.tn, count(&|p, l| p != k && l != k));
            let m = rsfme_core::evaluation::metrics(&t);
            let pos = count(&|_, l| l == k);
            assert_eq!(m.sen, (pos > 0).then(|| 100.0 * t.tp as f64 / pos as f64));
            assert!(m.acc.unwrap() >= 0.0 && m.acc.unwrap() <= 100.0);
        }
    }
}

#[test]
fn csv_has_header_classes_and_aggregates() {
    let r = report(&ConfusionMatrix::parse(MATRIX).unwrap(), None).unwrap();
    let csv = metrics_csv(&r);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 5 + 3);
    assert!(lines[4].starts_with("Mpox,"));
    assert!(lines[8].starts_with("overall,97.8352,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 8));
}

#[test]
fn interval_half_width() {
    let h = ci_half_width(0.022, 1663).unwrap();
    let oracle = 1.96 * (0.022f64 * 0.978 / 1663.0).sqrt();
    assert!((h - oracle).abs() < 1e-15);
    assert!((h - 0.00705).abs() <= 1e-5, "{h}");
    assert_eq!(ci_half_width(0.0, 1663).unwrap(), 0.0);
    assert_eq!(ci_half_width(1.0, 1663).unwrap(), 0.0);
    assert!(ci_half_width(0.1, 0).is_err());
    assert!(ci_half_width(1.1, 10).is_err());
}

proptest! {
    #[test]
    fn interval_is_symmetric(e in 0.0f64..=1.0, n in 1u64..100_000) {
        let a = ci_half_width(e, n).unwrap();
        let b = ci_half_width(1.0 - e, n).unwrap();
        prop_assert!((a - b).abs() <= 1e-15);
    }
}

// ---- precision-recall ---------------------------------------------------

/// Exact average precision as a fraction: Σ over positives of the precision
/// at that positive's score, divided by the positive count.
fn brute_force_ap(scores: &[f64], labels: &[bool]) -> Option<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    if pos == 0 || pos == labels.len() as u64 {
        return None;
    }
    // running sum of tp_i / k_i as a reduced fraction
    let (mut num, mut den) = (0u128, 1u128);
    for (i, &s) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        let k = scores.iter().filter(|&&t| t >= s).count() as u128;
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(&t, &l)| t >= s && l)
            .count() as u128;
        num = num * k + tp * den;
        den *= k;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    den *= pos as u128;
    let g = gcd(num, den);
    Some(((num / g) as u64, (den / g) as u64))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[test]
fn four_sample_curve_by_hand() {
    let c = pr_curve(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
    let precision: Vec<f64> = c.points.iter().map(|p| p.precision.unwrap()).collect();
    let recall: Vec<f64> = c.points.iter().map(|p| p.recall).collect();
    assert_eq!(recall, vec![0.5, 0.5, 1.0, 1.0]);
    assert_eq!(precision, vec![1.0, 0.5, 2.0 / 3.0, 0.5]);
    assert!((c.auc.unwrap() - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn auc_matches_exact_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=20);
        // coarse scores force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..8) as f64 / 7.0)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let got = pr_curve(&scores, &labels).unwrap().auc;
        match brute_force_ap(&scores, &labels) {
            Some((num, den)) => {
                assert!(
                    (got.unwrap() - num as f64 / den as f64).abs() <= 1e-12,
                    "{scores:?} {labels:?}"
                );
                checked += 1;
            }
            None => assert_eq!(got, None),
        }
    }
    assert!(checked > 80);
}

#[test]
fn one_vs_rest_curves_per_class() {
    let probs = Tensor::new(&[3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
    let curves = pr_curves(&probs, &[0, 1, 0]).unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0].auc, Some(1.0));
    assert_eq!(curves[1].auc, Some(1.0));
    assert!(pr_curves(&probs, &[0, 1]).is_err());
}

// ---- projection ---------------------------------------------------------

fn dist(t: &Tensor, i: usize, j: usize) -> f64 {
    ((t.at(&[i, 0]) - t.at(&[j, 0])).powi(2) + (t.at(&[i, 1]) - t.at(&[j, 1])).powi(2)).sqrt()
}

#[test]
fn planar_rectangle_keeps_its_distances() {
    // a 4×2 rectangle in a tilted plane of R^4
    let u = [0.5, 0.5, 0.5, 0.5];
    let v = [0.5, -0.5, 0.5, -0.5];
    let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let data: Vec<f64> = corners
        .iter()
        .flat_map(|&(a, b)| (0..4).map(move |k| 3.0 + 2.0 * a * u[k] + b * v[k]))
        .collect();
    let x = Tensor::new(&[4, 4], data).unwrap();
    let p = feature_projection(&x).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let (a, b) = (corners[i], corners[j]);
            let want = ((2.0 * (a.0 - b.0)).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            assert!((dist(&p.coords, i, j) - want).abs() < 1e-9);
        }
    }
    // the wider axis comes first
    assert!(p.variances[0] > p.variances[1]);
    assert!((p.variances[0] - 16.0 / 3.0).abs() < 1e-9);
    assert!((p.variances[1] - 4.0 / 3.0).abs() < 1e-9);
}

#[test]
fn square_in_three_dimensions_keeps_distance_ratios() {
    let pts = [
        [1.0, 0.0, 2.0],
        [0.0, 1.0, 2.0],
        [-1.0, 0.0, 2.0],
        [0.0, -1.0, 2.0],
    ];
    let p = feature_projection(&Tensor::new(&[4, 3], pts.concat()).unwrap()).unwrap();
    let d3 = |i: usize, j: usize| {
        (0..3)
            .map(|k| (pts[i][k] - pts[j][k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (ref2, ref3) = (dist(&p.coords, 0, 1), d3(0, 1));
    for i in 0..4 {
        for j in i + 1..4 {
            assert!((dist(&p.coords, i, j) / ref2 - d3(i, j) / ref3).abs() < 1e-6);
        }
    }
    assert!(p.variances[0] >= p.variances[1]);
}

#[test]
fn line_in_five_dimensions_projects_to_its_parameter() {
    let dir = [1.0, -2.0, 0.5, 3.0, 0.0];
    let norm = dir.iter().map(|d: &f64| d * d).sum::<f64>().sqrt();
    let ts = [-2.0, -0.5, 0.0, 1.0, 4.0];
    let data: Vec<f64> = ts
        .iter()
        .flat_map(|&t| dir.iter().map(move |d| 7.0 + t * d))
        .collect();
    let p = feature_projection(&Tensor::new(&[5, 5], data).unwrap()).unwrap();
    let mean_t = ts.iter().sum::<f64>() / 5.0;
    for (i, &t) in ts.iter().enumerate() {
        assert!((p.coords.at(&[i, 0]) - (t - mean_t) * norm).abs() < 1e-9);
        assert!(p.coords.at(&[i, 1]).abs() < 1e-9);
    }
    for k in 0..5 {
        assert!((p.components.at(&[0, k]) - dir[k] / norm).abs() < 1e-9);
    }
    assert!(p.variances[1].abs() < 1e-9);
}
