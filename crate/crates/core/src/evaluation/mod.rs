//! Confusion matrices, per-class and macro metrics, confidence intervals,
//! precision-recall curves and a two-component feature projection.

mod pca;
mod pr;

pub use pca::{feature_projection, Projection};
pub use pr::{pr_curve, pr_curves, PrCurve, PrPoint};

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// Counts indexed `[predicted][true]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub names: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = names.len();
        if c == 0 || counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Data(format!("confusion matrix must be {c}x{c}")));
        }
        Ok(Self { names, counts })
    }

    pub fn zeros(names: Vec<String>) -> Self {
        let c = names.len();
        Self {
            names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn classes(&self) -> usize {
        self.names.len()
    }

    pub fn get(&self, predicted: usize, actual: usize) -> u64 {
        self.counts[predicted][actual]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, predicted: usize) -> u64 {
        self.counts[predicted].iter().sum()
    }

    pub fn col_sum(&self, actual: usize) -> u64 {
        self.counts.iter().map(|r| r[actual]).sum()
    }

    /// Fixture text: a line of class names, then one line of counts per
    /// predicted class. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let names: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Data("matrix file is empty".into()))?
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let counts = lines
            .map(|l| {
                l.split(|c: char| c.is_whitespace() || c == ',')
                    .filter(|s| !s.is_empty())
                    .map(|v| {
                        v.parse::<u64>()
                            .map_err(|_| Error::Data(format!("bad count {v:?} in matrix")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, counts)
    }

    pub fn to_text(&self) -> String {
        let mut out = self.names.join(" ");
        out.push('\n');
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Tallies `(prediction, label)` pairs into a matrix.
pub fn confusion(preds: &[usize], labels: &[usize], names: Vec<String>) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let c = names.len();
    let mut cm = ConfusionMatrix::zeros(names);
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= c || l >= c {
            return Err(Error::Data(format!(
                "class index out of range: predicted {p}, true {l}, {c} classes"
            )));
        }
        cm.counts[p][l] += 1;
    }
    Ok(cm)
}

pub fn default_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class{i}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryTally {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl BinaryTally {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// One-vs-rest counts for `positive`.
pub fn binary_tally(cm: &ConfusionMatrix, positive: usize) -> Result<BinaryTally> {
    if positive >= cm.classes() {
        return Err(Error::Data(format!(
            "class {positive} out of range for {} classes",
            cm.classes()
        )));
    }
    let tp = cm.get(positive, positive);
    let fp = cm.row_sum(positive) - tp;
    let fn_ = cm.col_sum(positive) - tp;
    Ok(BinaryTally {
        tp,
        tn: cm.total() - tp - fp - fn_,
        fp,
        fn_,
    })
}

fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Harmonic mean of two percentages; undefined when either is undefined or both are zero.
pub fn f_score(pre: Option<f64>, sen: Option<f64>) -> Option<f64> {
    let (p, s) = (pre?, sen?);
    (p + s > 0.0).then(|| 2.0 * p * s / (p + s))
}

/// `z * sqrt(e (1 - e) / n)` with `z = 1.96`.
pub fn ci_half_width(error: f64, n: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&error) {
        return Err(Error::Data(format!("error rate {error} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::Undefined("confidence interval over zero samples"));
    }
    Ok(Z_95 * (error * (1.0 - error) / n as f64).sqrt())
}

/// Percentages, with `None` marking 0/0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spec: Option<f64>,
    pub pre: Option<f64>,
    pub f: Option<f64>,
    /// Interval half-width on the error rate `1 - sen`, as a fraction.
    pub ci_half: Option<f64>,
    pub auc_pr: Option<f64>,
}

pub fn metrics(t: &BinaryTally) -> ClassMetrics {
    let sen = percent(t.tp, t.tp + t.fn_);
    let pre = percent(t.tp, t.tp + t.fp);
    ClassMetrics {
        acc: percent(t.tp + t.tn, t.total()),
        sen,
        spec: percent(t.tn, t.tn + t.fp),
        pre,
        f: f_score(pre, sen),
        ci_half: sen.and_then(|s| ci_half_width(1.0 - s / 100.0, t.total()).ok()),
        auc_pr: None,
    }
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut n = 0;
    let mut sum = 0.0;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<(String, ClassMetrics)>,
    /// Unweighted means of the per-class values; `sen` averages true-class
    /// (column) rates and `pre` predicted-class (row) rates.
    pub macro_avg: ClassMetrics,
    /// The same means with the sensitivity and precision labels exchanged.
    pub macro_transposed: ClassMetrics,
    pub accuracy: Option<f64>,
    pub accuracy_ci: Option<f64>,
    pub total: u64,
}

/// Builds the report; `auc_pr` supplies per-class AUC-PR when scores are available.
pub fn report(cm: &ConfusionMatrix, auc_pr: Option<&[Option<f64>]>) -> Result<MetricReport> {
    let mut per_class = Vec::with_capacity(cm.classes());
    for k in 0..cm.classes() {
        let mut m = metrics(&binary_tally(cm, k)?);
        m.auc_pr = auc_pr.and_then(|a| a.get(k).copied().flatten());
        per_class.push((cm.names[k].clone(), m));
    }
    let avg = |f: fn(&ClassMetrics) -> Option<f64>| mean(per_class.iter().map(|(_, m)| f(m)));
    let sen = avg(|m| m.sen);
    let pre = avg(|m| m.pre);
    let total = cm.total();
    let macro_avg = ClassMetrics {
        acc: avg(|m| m.acc),
        sen,
        spec: avg(|m| m.spec),
        pre,
        f: f_score(pre, sen),
        ci_half: sen.and_then(|s| ci_half_width(1.0 - s / 100.0, total).ok()),
        auc_pr: if auc_pr.is_some() {
            avg(|m| m.auc_pr)
        } else {
            None
        },
    };
    let macro_transposed = ClassMetrics {
        sen: pre,
        pre: sen,
        ci_half: pre.and_then(|s| ci_half_width(1.0 - s / 100.0, total).ok()),
        ..macro_avg
    };
    let accuracy = percent(cm.correct(), total);
    Ok(MetricReport {
        per_class,
        macro_avg,
        macro_transposed,
        accuracy,
        accuracy_ci: accuracy.and_then(|a| ci_half_width(1.0 - a / 100.0, total).ok()),
        total,
    })
}

pub const METRICS_HEADER: &str = "class,acc,sen,spec,pre,f,ci_half,auc_pr";

fn cell(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "undef".into(),
    }
}

fn metric_row(out: &mut String, name: &str, m: &ClassMetrics) {
    let _ = writeln!(
        out,
        "{name},{},{},{},{},{},{},{}",
        cell(m.acc, 4),
        cell(m.sen, 4),
        cell(m.spec, 4),
        cell(m.pre, 4),
        cell(m.f, 4),
        cell(m.ci_half, 6),
        cell(m.auc_pr, 6)
    );
}

/// Metric CSV: one row per class, then `macro`, `macro_transposed` and
/// `overall` (accuracy over all samples; `-` where a column does not apply).
pub fn metrics_csv(r: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for (name, m) in &r.per_class {
        metric_row(&mut out, name, m);
    }
    metric_row(&mut out, "macro", &r.macro_avg);
    metric_row(&mut out, "macro_transposed", &r.macro_transposed);
    let _ = writeln!(
        out,
        "overall,{},-,-,-,-,{},-",
        cell(r.accuracy, 4),
        cell(r.accuracy_ci, 6)
    );
    out
}

pub fn pr_csv(names: &[String], curves: &[PrCurve]) -> String {
    let mut out = String::from("class,threshold,precision,recall\n");
    for (name, c) in names.iter().zip(curves) {
        for p in &c.points {
            let _ = writeln!(
                out,
                "{name},{:.6},{},{:.6}",
                p.threshold,
                cell(p.precision, 6),
                p.recall
            );
        }
    }
    out
}

pub fn features_csv(ids: &[String], labels: &[usize], p: &Projection) -> String {
    let mut out = String::from("sample_id,label,pc1,pc2\n");
    for (i, (id, l)) in ids.iter().zip(labels).enumerate() {
        let _ = writeln!(
            out,
            "{id},{l},{:.8},{:.8}",
            p.coords.at(&[i, 0]),
            p.coords.at(&[i, 1])
        );
    }
    out
}
