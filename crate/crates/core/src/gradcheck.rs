//! Central finite-difference checks of analytic parameter gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::nn::{ParamSet, Tensor};

/// Step used by every finite-difference check in this crate.
pub const FD_STEP: f64 = 1e-4;

/// Relative error above which a probe is screened for a kink.
const KINK_SCREEN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub slot: usize,
    pub elem: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Probes dropped because a ReLU or max-pool switch fell inside `[x - h, x + h]`.
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        !self.probes.is_empty() && self.probes.iter().all(|p| p.rel_err <= tol)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares `grads` (one optional tensor per slot of `params`) against
/// central differences of `loss` on `n_probes` randomly drawn entries.
///
/// Entries with a non-negligible analytic gradient are preferred so the probe
/// exercises real signal; zero-gradient entries fill up the remainder.
///
/// A probe whose central difference is off by no more than the gap between
/// its one-sided differences straddles a kink of the piecewise-linear network
/// (for a single kink the central error is exactly half that gap). Such probes
/// are not evidence either way; they are skipped and replaced by the next candidate.
pub fn check(
    params: &mut ParamSet,
    grads: &[Option<Tensor>],
    n_probes: usize,
    rng: &mut impl Rng,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> GradCheckReport {
    let mut live = Vec::new();
    let mut dead = Vec::new();
    for (slot, t) in params.tensors().iter().enumerate() {
        for elem in 0..t.numel() {
            let a = grads[slot].as_ref().map_or(0.0, |g| g.data[elem]);
            if a.abs() > 1e-5 {
                live.push((slot, elem));
            } else {
                dead.push((slot, elem));
            }
        }
    }
    live.shuffle(rng);
    dead.shuffle(rng);
    let mut report = GradCheckReport::default();
    let base = loss(params);
    for (slot, elem) in live.into_iter().chain(dead) {
        if report.probes.len() == n_probes {
            break;
        }
        let orig = params.tensors()[slot].data[elem];
        params.tensors_mut()[slot].data[elem] = orig + FD_STEP;
        let up = loss(params);
        params.tensors_mut()[slot].data[elem] = orig - FD_STEP;
        let down = loss(params);
        params.tensors_mut()[slot].data[elem] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[slot].as_ref().map_or(0.0, |g| g.data[elem]);
        let rel_err = relative_error(analytic, numeric);
        if rel_err > KINK_SCREEN {
            let forward = (up - base) / FD_STEP;
            let backward = (base - down) / FD_STEP;
            if (analytic - numeric).abs() <= 0.6 * (forward - backward).abs() {
                report.kinks_skipped += 1;
                continue;
            }
        }
        report.probes.push(Probe { slot, elem, analytic, numeric, rel_err });
    }
    report
}
