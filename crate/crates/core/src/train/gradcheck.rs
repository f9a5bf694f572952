//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamStore};

pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not produce spurious failures.
const REL_FLOOR: f64 = 1e-7;
/// Number of tenfold step reductions tried before a coordinate counts as a kink.
const STEP_REFINEMENTS: usize = 3;
/// Allowed relative gap between central differences at successive steps.
const CONVERGENCE_TOL: f64 = 1e-4;
/// Bound on the rounding error of one loss evaluation, relative to its size.
const ROUNDING: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    /// Coordinates sitting on a kink (differences never settle).
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    /// Groups whose error exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&GroupError> {
        self.groups.iter().filter(|g| g.max_rel_error >= tolerance).collect()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.failures(tolerance).is_empty()
    }
}

/// Compare the analytic gradient of `loss` against central differences with
/// step `step` for every parameter array. `loss(params, grads)` returns the
/// scalar and, when given a buffer, accumulates the analytic gradient.
/// At most `max_per_group` evenly spaced coordinates are probed per array.
pub fn grad_check<L>(params: &ParamStore<f64>, loss: L, step: f64, max_per_group: usize) -> GradCheckReport
where
    L: Fn(&ParamStore<f64>, Option<&mut Grads<f64>>) -> f64,
{
    let mut grads = Grads::zeros_like(params);
    let f0 = loss(params, Some(&mut grads));
    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (gi, entry) in params.entries().iter().enumerate() {
        let n = entry.data.len();
        let stride = n.div_ceil(max_per_group.max(1)).max(1);
        let mut report = GroupError { name: entry.name.clone(), checked: 0, skipped: 0, max_rel_error: 0.0, worst: None };
        for idx in (0..n).step_by(stride) {
            let analytic = grads.arrays()[gi][idx];
            let mut central = |h: f64| {
                let orig = entry.data[idx];
                probe.entries_mut()[gi].data[idx] = orig + h;
                let fp = loss(&probe, None);
                probe.entries_mut()[gi].data[idx] = orig - h;
                let fm = loss(&probe, None);
                probe.entries_mut()[gi].data[idx] = orig;
                let noise = ROUNDING * f0.abs().max(1.0) / h;
                let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
                let one_sided_ok = (right - left).abs() <= 0.1 * right.abs().max(left.abs()) + 4.0 * noise;
                ((fp - fm) / (2.0 * h), noise, one_sided_ok)
            };
            // Shrink the step until two successive central differences agree,
            // which steps over ReLU and max-pool kinks close to the probe point.
            let mut numeric = None;
            let mut prev = central(step);
            for k in 1..=STEP_REFINEMENTS {
                let next = central(step * 0.1f64.powi(k as i32));
                let gap = (prev.0 - next.0).abs();
                if prev.2 && gap <= CONVERGENCE_TOL * prev.0.abs().max(next.0.abs()) + 2.0 * next.1 {
                    numeric = Some(prev);
                    break;
                }
                prev = next;
            }
            let Some((numeric, noise, _)) = numeric else {
                report.skipped += 1;
                continue;
            };
            let excess = ((analytic - numeric).abs() - noise).max(0.0);
            let rel = excess / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((idx, analytic, numeric));
            }
        }
        groups.push(report);
    }
    GradCheckReport { groups }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![3], vec![0.5, -1.0, 2.0]);
        let good = |p: &ParamStore<f64>, g: Option<&mut Grads<f64>>| {
            let w = p.slice(id);
            if let Some(g) = g {
                for (gi, wi) in g.slice_mut(id).iter_mut().zip(w) {
                    *gi += 2.0 * wi;
                }
            }
            w.iter().map(|v| v * v).sum()
        };
        assert!(grad_check(&store, good, GRAD_CHECK_STEP, 10).max_rel_error() < 1e-6);
        let bad = |p: &ParamStore<f64>, g: Option<&mut Grads<f64>>| {
            let w = p.slice(id);
            if let Some(g) = g {
                for (gi, wi) in g.slice_mut(id).iter_mut().zip(w) {
                    *gi += 2.2 * wi;
                }
            }
            w.iter().map(|v| v * v).sum()
        };
        assert!(!grad_check(&store, bad, GRAD_CHECK_STEP, 10).passes(1e-3));
    }

    #[test]
    fn empty_fragment_passes_vacuously() {
        let store = ParamStore::<f64>::new();
        let r = grad_check(&store, |_, _| 1.0, GRAD_CHECK_STEP, 10);
        assert_eq!(r.checked(), 0);
        assert!(r.passes(1e-3));
    }

    #[test]
    fn kinks_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", vec![1], vec![0.0]);
        let abs = |p: &ParamStore<f64>, _g: Option<&mut Grads<f64>>| p.slice(id)[0].abs();
        let r = grad_check(&store, abs, GRAD_CHECK_STEP, 10);
        assert_eq!((r.checked(), r.skipped()), (0, 1));
    }
}
