use rand::seq::index::sample;

use super::{Module, Tensor};
use crate::error::Result;
use crate::rng;

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or pooling kink.
    pub skipped: usize,
    /// Flat coordinate of the worst error.
    pub worst: Option<usize>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Tracker {
    report: GradCheckReport,
}

impl Tracker {
    fn new() -> Self {
        Self {
            report: GradCheckReport {
                max_rel_error: 0.0,
                checked: 0,
                skipped: 0,
                worst: None,
            },
        }
    }

    fn record(&mut self, coord: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.report.checked += 1;
        if self.report.worst.is_none() || e > self.report.max_rel_error {
            self.report.max_rel_error = e;
            self.report.worst = Some(coord);
        }
    }
}

fn coordinates(total: usize, samples: usize, seed: u64) -> Vec<usize> {
    if total <= samples {
        return (0..total).collect();
    }
    let mut r = rng::seeded(seed, &[]);
    let mut idx = sample(&mut r, total, samples).into_vec();
    idx.sort_unstable();
    idx
}

/// Compare backprop parameter gradients with central differences.
///
/// `run` must perform a deterministic forward pass, accumulate gradients via
/// backward, and return the scalar loss. Up to `samples` coordinates are drawn
/// across all parameters.
pub fn gradient_check<M: Module<f64>>(
    model: &mut M,
    mut run: impl FnMut(&mut M) -> Result<f64>,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    model.zero_grad();
    run(model)?;
    let mut base_sig = Vec::new();
    model.kink_signature(&mut base_sig);
    let analytic: Vec<f64> = model
        .params()
        .iter()
        .flat_map(|p| p.grad.iter().copied().collect::<Vec<_>>())
        .collect();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut t = Tracker::new();
    let mut sig = Vec::new();
    for coord in coordinates(analytic.len(), samples, seed) {
        let (mut pi, mut off) = (0, coord);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let mut eval = |model: &mut M, delta: f64| -> Result<(f64, bool)> {
            let orig = {
                let mut ps = model.params_mut();
                let v = ps[pi].value.as_slice_mut().expect("params are contiguous");
                let o = v[off];
                v[off] = o + delta;
                o
            };
            let loss = run(model)?;
            sig.clear();
            model.kink_signature(&mut sig);
            model.params_mut()[pi].value.as_slice_mut().expect("params are contiguous")[off] = orig;
            Ok((loss, sig == base_sig))
        };
        let (lp, same_p) = eval(model, GRADCHECK_STEP)?;
        let (lm, same_m) = eval(model, -GRADCHECK_STEP)?;
        if !(same_p && same_m) {
            t.report.skipped += 1;
            continue;
        }
        t.record(coord, analytic[coord], (lp - lm) / (2.0 * GRADCHECK_STEP));
    }
    model.zero_grad();
    Ok(t.report)
}

/// Compare an input gradient with central differences. `run` maps an input
/// to `(loss, d loss / d input, kink signature)`.
pub fn input_gradient_check(
    x: &Tensor<f64>,
    mut run: impl FnMut(&Tensor<f64>) -> Result<(f64, Tensor<f64>, Vec<u64>)>,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic, base_sig) = run(x)?;
    let mut t = Tracker::new();
    let mut xp = x.as_standard_layout().into_owned();
    let analytic = analytic.as_standard_layout().into_owned();
    let a = analytic.as_slice().expect("standard layout");
    for coord in coordinates(xp.len(), samples, seed) {
        let orig = xp.as_slice().expect("standard layout")[coord];
        xp.as_slice_mut().expect("standard layout")[coord] = orig + GRADCHECK_STEP;
        let (lp, _, sp) = run(&xp)?;
        xp.as_slice_mut().expect("standard layout")[coord] = orig - GRADCHECK_STEP;
        let (lm, _, sm) = run(&xp)?;
        xp.as_slice_mut().expect("standard layout")[coord] = orig;
        if sp != base_sig || sm != base_sig {
            t.report.skipped += 1;
            continue;
        }
        t.record(coord, a[coord], (lp - lm) / (2.0 * GRADCHECK_STEP));
    }
    Ok(t.report)
}
