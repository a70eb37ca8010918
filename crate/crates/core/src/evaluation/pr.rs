use rsfme_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    /// `None` when nothing scores at or above the threshold.
    pub precision: Option<f64>,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// One point per distinct score, thresholds descending.
    pub points: Vec<PrPoint>,
    /// Step-interpolated area `Σ (R_k - R_{k-1}) P_k`; undefined unless both
    /// classes are present.
    pub auc: Option<f64>,
}

/// One-vs-rest precision-recall sweep. A sample counts as positive at
/// threshold `t` when its score is at least `t`.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Result<PrCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Data(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Data(format!("score {s} outside [0, 1]")));
    }
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Ok(PrCurve {
            points: Vec::new(),
            auc: None,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: Some(tp as f64 / (tp + fp) as f64),
            recall: tp as f64 / total_pos as f64,
        });
    }
    let single_class = total_pos == scores.len();
    let auc = (!single_class).then(|| {
        let mut prev = 0.0;
        let mut area = 0.0;
        for p in &points {
            area += (p.recall - prev) * p.precision.unwrap_or(0.0);
            prev = p.recall;
        }
        area
    });
    Ok(PrCurve { points, auc })
}

/// Per-class curves from an `[N, c]` probability matrix.
pub fn pr_curves(probs: &Tensor, labels: &[usize]) -> Result<Vec<PrCurve>> {
    if probs.rank() != 2 || probs.dim(0) != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for scores {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    let c = probs.dim(1);
    (0..c)
        .map(|k| {
            let scores: Vec<f64> = probs
                .data()
                .chunks(c)
                .map(|r| r[k].clamp(0.0, 1.0))
                .collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            pr_curve(&scores, &pos)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let c = pr_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c.auc, Some(1.0));
    }

    #[test]
    fn identical_scores_give_one_point() {
        let c = pr_curve(&[0.5; 4], &[true, false, false, false]).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(c.points[0].precision, Some(0.25));
        assert_eq!(c.points[0].recall, 1.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(pr_curve(&[0.1, 0.2], &[false, false]).unwrap().auc, None);
        assert_eq!(pr_curve(&[0.1, 0.2], &[true, true]).unwrap().auc, None);
        assert!(pr_curve(&[1.5], &[true]).is_err());
    }
}
