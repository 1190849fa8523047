//! Diminishing step-size schedule and the iteration count needed to reach a
//! target optimality gap.
//!
//! With `eta_k = c / (gamma + k)` and constants satisfying
//! `c > 1/M`, `c / (gamma + 1) <= 1/L`, the expected gap after `k`
//! iterations is bounded by `nu / (gamma + k)` where
//!
//! ```text
//! nu = max( L c^2 lambda^2 N / (2 B (2 c M - 1)),  (gamma + 1) (f(w_1) - f*) )
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants<T = f64> {
    /// L
    pub smoothness: T,
    /// M
    pub strong_convexity: T,
    /// lambda: bound on the root mean squared per-sample gradient norm.
    pub grad_bound: T,
    /// c
    pub step_scale: T,
    /// gamma
    pub step_shift: T,
    /// f(w_1) - f*
    pub initial_gap: T,
}

impl<T: Scalar> ConvergenceConstants<T> {
    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        let positive = |v: T, name: &'static str| {
            if v > zero && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(
                    name,
                    format!("{v} must be positive and finite"),
                ))
            }
        };
        positive(self.smoothness, "smoothness")?;
        positive(self.strong_convexity, "strong_convexity")?;
        positive(self.step_shift, "step_shift")?;
        if !(self.grad_bound >= zero) {
            return Err(Error::invalid("grad_bound", "must be non-negative"));
        }
        if !(self.initial_gap >= zero) {
            return Err(Error::invalid("initial_gap", "must be non-negative"));
        }
        if self.strong_convexity > self.smoothness {
            return Err(Error::invalid(
                "strong_convexity",
                "cannot exceed smoothness (M <= L)",
            ));
        }
        if !(self.step_scale * self.strong_convexity > T::one()) {
            return Err(Error::invalid(
                "step_scale",
                "need step_scale > 1/strong_convexity",
            ));
        }
        if self.step_size(1) > T::one() / self.smoothness {
            return Err(Error::invalid(
                "step_scale",
                "first step step_scale/(step_shift+1) exceeds 1/smoothness",
            ));
        }
        Ok(())
    }

    /// `c / (gamma + k)` for iteration `k >= 1`.
    pub fn step_size(&self, k: u64) -> T {
        step_size(k, self)
    }

    pub fn nu(&self, n_devices: usize, total_batch: u64) -> Result<T> {
        compute_nu(self, n_devices, total_batch)
    }
}

pub fn step_size<T: Scalar>(k: u64, consts: &ConvergenceConstants<T>) -> T {
    debug_assert!(k >= 1, "iterations are 1-based");
    consts.step_scale / (consts.step_shift + T::from_count(k))
}

/// The constant `nu` bounding the expected gap.
pub fn compute_nu<T: Scalar>(
    consts: &ConvergenceConstants<T>,
    n_devices: usize,
    total_batch: u64,
) -> Result<T> {
    let two = T::lit(2.0);
    let denom_factor = two * consts.step_scale * consts.strong_convexity - T::one();
    if !(denom_factor > T::zero()) {
        return Err(Error::DegenerateConstants(format!(
            "2 c M - 1 = {denom_factor} must be positive"
        )));
    }
    if total_batch == 0 {
        return Err(Error::invalid("total_batch", "must be at least 1"));
    }
    let c = consts.step_scale;
    let variance_term = consts.smoothness
        * c
        * c
        * consts.grad_bound
        * consts.grad_bound
        * T::from_count(n_devices as u64)
        / (two * T::from_count(total_batch) * denom_factor);
    let gap_term = (consts.step_shift + T::one()) * consts.initial_gap;
    Ok(variance_term.max(gap_term))
}

/// Smallest iteration count `k >= 1` with `nu / (gamma + k) <= epsilon`,
/// i.e. `max(1, ceil(nu/epsilon - gamma))`.
pub fn required_iterations<T: Scalar>(epsilon: T, nu: T, gamma: T) -> Result<u64> {
    if !(epsilon > T::zero()) || !epsilon.is_finite() {
        return Err(Error::invalid(
            "epsilon",
            format!("{epsilon} must be positive"),
        ));
    }
    if !(nu >= T::zero()) || !nu.is_finite() {
        return Err(Error::invalid(
            "nu",
            format!("{nu} must be finite and non-negative"),
        ));
    }
    let raw = nu / epsilon - gamma;
    if raw <= T::one() {
        return Ok(1);
    }
    // nu/epsilon often lands a rounding error away from an integer (2/0.1).
    let nearest = raw.round();
    let snap = T::lit(1e-9) * raw.max(T::one());
    let k = if (raw - nearest).abs() <= snap {
        nearest
    } else {
        raw.ceil()
    };
    k.to_u64()
        .ok_or_else(|| Error::invalid("epsilon", "iteration count overflows u64"))
}

/// `nu / (gamma + k)`.
pub fn gap_bound<T: Scalar>(k: u64, nu: T, gamma: T) -> T {
    nu / (gamma + T::from_count(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn reference() -> ConvergenceConstants<f64> {
        ConvergenceConstants {
            smoothness: 1.0,
            strong_convexity: 1.0,
            grad_bound: 0.1,
            step_scale: 1.5,
            step_shift: 1.0,
            initial_gap: 1.0,
        }
    }

    #[test]
    fn step_sizes() {
        let c = reference();
        assert_relative_eq!(step_size(1, &c), 0.75);
        assert_relative_eq!(step_size(2, &c), 0.5);
        assert!(step_size(1_000_000, &c) < 2e-6);
        assert!(c.step_size(10) < c.step_size(9));
    }

    #[test]
    fn nu_with_reference_constants() {
        let c = reference();
        let nu = compute_nu(&c, 20, 10_000).unwrap();
        assert_eq!(nu, 2.0);
        let variance_only = ConvergenceConstants {
            initial_gap: 0.0,
            ..c
        };
        let v = compute_nu(&variance_only, 20, 10_000).unwrap();
        assert_relative_eq!(v, 1.0 * 2.25 * 0.01 * 20.0 / (2.0 * 10_000.0 * 2.0));
        assert_relative_eq!(v, 1.125e-5, max_relative = 1e-12);
        let zero = ConvergenceConstants {
            grad_bound: 0.0,
            initial_gap: 0.0,
            ..c
        };
        assert_eq!(compute_nu(&zero, 20, 10_000).unwrap(), 0.0);
    }

    #[test]
    fn nu_rejects_degenerate_scale() {
        let c = ConvergenceConstants {
            step_scale: 0.5,
            ..reference()
        };
        assert!(matches!(
            compute_nu(&c, 2, 10),
            Err(Error::DegenerateConstants(_))
        ));
    }

    #[test]
    fn reference_iteration_counts() {
        assert_eq!(required_iterations(0.1, 2.0, 1.0).unwrap(), 19);
        assert_eq!(required_iterations(0.05, 2.0, 1.0).unwrap(), 39);
        assert_eq!(required_iterations(2.0, 2.0, 1.0).unwrap(), 1);
        assert_eq!(required_iterations(5.0, 2.0, 0.0).unwrap(), 1);
        assert!(required_iterations(0.0, 2.0, 1.0).is_err());
        assert_eq!(required_iterations(0.1f32, 2.0, 1.0).unwrap(), 19);
    }

    #[test]
    fn bounds_at_reference_counts() {
        assert_relative_eq!(gap_bound(19, 2.0, 1.0), 0.1);
        assert_relative_eq!(gap_bound(39, 2.0, 1.0), 0.05);
        assert_eq!(gap_bound(1, 0.0, 1.0), 0.0);
    }

    #[test]
    fn validation() {
        assert!(reference().validate().is_ok());
        let bad = ConvergenceConstants {
            step_scale: 0.9,
            ..reference()
        };
        assert!(bad.validate().is_err());
        let too_big_step = ConvergenceConstants {
            step_scale: 3.0,
            ..reference()
        };
        assert!(too_big_step.validate().is_err());
        let inverted = ConvergenceConstants {
            strong_convexity: 2.0,
            ..reference()
        };
        assert!(inverted.validate().is_err());
    }

    proptest! {
        #[test]
        fn gap_bound_strictly_decreasing(k in 1u64..100_000, nu in 1e-3f64..1e3, gamma in 1e-3f64..100.0) {
            prop_assert!(gap_bound(k + 1, nu, gamma) < gap_bound(k, nu, gamma));
        }

        #[test]
        fn required_iterations_reach_target(eps in 1e-4f64..10.0, nu in 0.0f64..100.0, gamma in 1e-3f64..50.0) {
            let k = required_iterations(eps, nu, gamma).unwrap();
            prop_assert!(k >= 1);
            prop_assert!(gap_bound(k, nu, gamma) <= eps * (1.0 + 1e-9));
            if k > 1 {
                // minimality
                prop_assert!(gap_bound(k - 1, nu, gamma) > eps * (1.0 - 1e-9));
            }
        }

        #[test]
        fn required_iterations_monotone_in_eps(e1 in 1e-3f64..1.0, e2 in 1e-3f64..1.0, nu in 0.0f64..50.0) {
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(required_iterations(hi, nu, 1.0).unwrap() <= required_iterations(lo, nu, 1.0).unwrap());
        }

        #[test]
        fn nu_monotone_in_devices_and_batch(n in 1usize..100, b in 1u64..100_000, lambda in 0.0f64..10.0) {
            let c = ConvergenceConstants { grad_bound: lambda, initial_gap: 0.0, ..reference() };
            prop_assert!(compute_nu(&c, n + 1, b).unwrap() >= compute_nu(&c, n, b).unwrap());
            prop_assert!(compute_nu(&c, n, b + 1).unwrap() <= compute_nu(&c, n, b).unwrap());
        }

        // One step of the expected-gap recursion
        //   e_{k+1} <= (1 - 2 eta_k M) e_k + (L/2) (eta_k lambda)^2 N / B
        // maps the bound nu/(gamma+k) into nu/(gamma+k+1).
        #[test]
        fn nu_closes_the_induction(
            k in 1u64..10_000,
            lambda in 0.0f64..5.0,
            gap in 0.0f64..10.0,
            n in 1usize..50,
            b in 1u64..10_000,
        ) {
            let c = ConvergenceConstants { grad_bound: lambda, initial_gap: gap, ..reference() };
            let nu = compute_nu(&c, n, b).unwrap();
            let eta = step_size(k, &c);
            let next = (1.0 - 2.0 * eta * c.strong_convexity) * gap_bound(k, nu, c.step_shift)
                + 0.5 * c.smoothness * (eta * lambda).powi(2) * n as f64 / b as f64;
            prop_assert!(next <= gap_bound(k + 1, nu, c.step_shift) * (1.0 + 1e-12) + 1e-15);
        }
    }
}
