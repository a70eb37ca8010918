//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation applied on each side of the evaluation point.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to roundoff are compared absolutely.
    pub floor: f64,
    /// An element whose one-sided slopes differ by more than this (relative)
    /// is treated as sitting on a kink and excluded.
    pub kink_threshold: f64,
    /// Check only this many randomly chosen elements (all when `None`).
    pub sample: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_threshold: 1e-2,
            sample: None,
            seed: 0,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn sampled(mut self, count: usize, seed: u64) -> Self {
        self.sample = Some(count);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub kink: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: Vec<ElementCheck>,
    pub worst: Option<ElementCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences, for every element of every input (or a seeded sample).
///
/// `f` must be deterministic; it is re-run from scratch for each perturbation.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.numel()).map(move |j| (i, j)))
        .collect();
    let elements: Vec<(usize, usize)> = match opts.sample {
        Some(n) if n < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked = index::sample(&mut rng, all.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|k| all[k]).collect()
        }
        _ => all,
    };

    let h = opts.step;
    let checks: Vec<ElementCheck> = elements
        .par_iter()
        .map(|&(i, j)| -> Result<ElementCheck> {
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let fm = eval(&xs)?;
            let numeric = (fp - fm) / (2.0 * h);
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            let kink =
                (right - left).abs() > opts.kink_threshold * right.abs().max(left.abs()).max(1.0);
            let a = analytic[i].data()[j];
            Ok(ElementCheck {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, opts.floor),
                kink,
            })
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: Vec::new(),
        worst: None,
        tolerance: opts.tolerance,
    };
    for c in checks {
        if c.kink {
            report.kinks.push(c);
            continue;
        }
        report.checked += 1;
        if report
            .worst
            .as_ref()
            .is_none_or(|w| c.rel_error > w.rel_error)
        {
            report.max_rel_error = c.rel_error;
            report.worst = Some(c);
        }
    }
    Ok(report)
}
