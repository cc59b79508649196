//! Central-difference checking of analytic gradients held in a [`ParamStore`].

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};

/// Coordinates perturbed per parameter unless the parameter is smaller.
pub const MAX_COORDS: usize = 64;

/// Absolute floor of the relative-error denominator; below it both gradients
/// are indistinguishable from finite-difference noise.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Central differences at `h` and `h/4` that disagree by more than this
/// fraction mean a kink (a ReLU switching) lies inside `[θ−h, θ+h]`.
pub const KINK_TOL: f64 = 1e-3;

/// Step reduction used to re-estimate a coordinate after a kink is detected.
pub const REFINE_FACTOR: f64 = 4.0;

/// One-sided differences at `h` and `h/r` combined to cancel the `O(h)` term.
fn richardson(d_h: f64, d_small: f64) -> f64 {
    (REFINE_FACTOR * d_small - d_h) / (REFINE_FACTOR - 1.0)
}

fn disagree(a: f64, b: f64) -> bool {
    (a - b).abs() > KINK_TOL * a.abs().max(b.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// Coordinates re-estimated with a smaller step after a kink was detected.
    pub refined: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.coords_checked += other.coords_checked;
        self.refined += other.refined;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        } else if self.worst.is_none() {
            self.worst = other.worst;
        }
    }
}

impl Default for GradcheckReport {
    fn default() -> Self {
        GradcheckReport { max_rel_err: 0.0, max_abs_err: 0.0, coords_checked: 0, refined: 0, worst: None }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max_rel_err={:.3e} max_abs_err={:.3e} coords={} refined={}",
            self.max_rel_err, self.max_abs_err, self.coords_checked, self.refined
        )?;
        if let Some((name, i, a, n)) = &self.worst {
            write!(f, " worst={name}[{i}] analytic={a:.6e} numeric={n:.6e}")?;
        }
        Ok(())
    }
}

pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `store`'s gradient slots against `(f(θ+h) − f(θ−h)) / 2h` on up to
/// [`MAX_COORDS`] random coordinates of every non-frozen parameter.
///
/// Every coordinate is also estimated at `h/4`. If the two central
/// differences disagree, a kink lies within `h` and the `h/4` estimate is
/// used; if that one still straddles the kink (its one-sided differences
/// disagree), the side whose one-sided differences stayed consistent between
/// the two steps is used, Richardson-extrapolated. None of this looks at the analytic
/// value.
///
/// `f` must evaluate the loss from the store's current values; the store is
/// restored exactly after each perturbation.
pub fn finite_diff_gradcheck(
    store: &mut ParamStore<f64>,
    mut f: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    step: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("gradcheck step must be positive, got {step}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    let f0 = f(store)?;
    if !f0.is_finite() {
        return Err(Error::Numeric("non-finite loss at the unperturbed point".into()));
    }
    let ids: Vec<_> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let len = store.value(id).len();
        let coords = sample(&mut rng, len, len.min(MAX_COORDS)).into_vec();
        for j in coords {
            let orig = store.value(id).data()[j];
            let mut eval = |store: &mut ParamStore<f64>, h: f64| -> Result<(f64, f64)> {
                store.value_mut(id).data_mut()[j] = orig + h;
                let fp = f(store)?;
                store.value_mut(id).data_mut()[j] = orig - h;
                let fm = f(store)?;
                store.value_mut(id).data_mut()[j] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss while perturbing {}[{j}]", store.param(id).name)));
                }
                // forward and backward one-sided differences
                Ok(((fp - f0) / h, (f0 - fm) / h))
            };
            let (fwd, back) = eval(store, step)?;
            let (fwd2, back2) = eval(store, step / REFINE_FACTOR)?;
            let (c1, c2) = (0.5 * (fwd + back), 0.5 * (fwd2 + back2));
            let numeric = if !disagree(c1, c2) {
                c1
            } else {
                report.refined += 1;
                if !disagree(fwd2, back2) {
                    c2
                } else if (fwd - fwd2).abs() <= (back - back2).abs() {
                    // the kink is on the backward side, closer than step/REFINE_FACTOR
                    richardson(fwd, fwd2)
                } else {
                    richardson(back, back2)
                }
            };
            let analytic = store.grad(id).data()[j];
            let rel = grad_rel_error(analytic, numeric);
            report.coords_checked += 1;
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.param(id).name.clone(), j, analytic, numeric));
            }
        }
    }
    Ok(report)
}
