//! Random-access iteration time.
//!
//! Every device that has finished computing and not yet delivered transmits
//! in each slot with probability `p_tr`; a slot succeeds iff exactly one
//! device transmits. With `m` contenders the success probability is
//! `p_suc(m) = m (1 - p_tr)^(m-1) p_tr`, so the wait for the next delivery is
//! geometric with that parameter.
//!
//! `N_avail` counts the devices still undelivered when the slowest device
//! becomes ready (slot `tau_N + 1`). Given `N_avail`, the remaining
//! communication time has mean `sum_{m=1}^{N_avail} 1 / p_suc(m)` and
//!
//! ```text
//! E[T_iter] = tau_N + E[ sum_{m=1}^{N_avail} 1 / p_suc(m) ].
//! ```
//!
//! The PMF of `N_avail` has closed forms for two and three devices; larger
//! systems use [`estimate_pmf_avail_mc`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::par_fold_trials;
use crate::scalar::Scalar;
use crate::stats::{McEstimate, RunningStats};
use crate::system::BatchAllocation;

/// Below this gap between `p_suc(1)` and `p_suc(2)` the telescoped
/// three-device expression is replaced by its finite sum.
pub const SINGULAR_RATE_GAP: f64 = 1e-12;

const PMF_SUM_TOL: f64 = 1e-9;

/// `P(N_avail = m)` for `m = 1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityPmf<T = f64> {
    probs: Vec<T>,
}

impl<T: Scalar> AvailabilityPmf<T> {
    /// Validates entries in `[0, 1]` summing to one within `1e-9`.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probs", "empty PMF"));
        }
        let tol = T::lit(PMF_SUM_TOL);
        if let Some(p) = probs
            .iter()
            .find(|p| !(**p >= -tol && **p <= T::one() + tol))
        {
            return Err(Error::invalid("probs", format!("entry {p} outside [0, 1]")));
        }
        let sum: T = probs.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(Error::invalid("probs", format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Point mass on `N_avail = n`.
    pub fn certain(n: usize) -> Self {
        let mut probs = vec![T::zero(); n];
        probs[n - 1] = T::one();
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn n_devices(&self) -> usize {
        self.probs.len()
    }

    /// `P(N_avail = m)`, 1-based.
    pub fn prob(&self, m: usize) -> T {
        self.probs[m - 1]
    }

    /// `E[ sum_{j=1}^{N_avail} 1/p_suc(j) ]`.
    pub fn expected_comm(&self, p_tr: T) -> T {
        let mut cumulative = T::zero();
        let mut total = T::zero();
        for (i, &p) in self.probs.iter().enumerate() {
            cumulative = cumulative + T::one() / p_suc(i + 1, p_tr);
            if p > T::zero() {
                total = total + p * cumulative;
            }
        }
        total
    }
}

/// Expected iteration time split into compute tail and communication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaTiming<T = f64> {
    /// `tau_N`, the slowest device's compute slots.
    pub compute_tail: u64,
    pub expected_comm: T,
    pub expected_iter: T,
}

impl<T: Scalar> RaTiming<T> {
    fn new(compute_tail: u64, expected_comm: T) -> Self {
        Self {
            compute_tail,
            expected_comm,
            expected_iter: T::from_count(compute_tail) + expected_comm,
        }
    }
}

/// Probability that exactly one of `m` contenders transmits.
pub fn p_suc<T: Scalar>(m: usize, p_tr: T) -> T {
    debug_assert!(m >= 1);
    let m_t = T::from_count(m as u64);
    m_t * (T::one() - p_tr).powi(m as i32 - 1) * p_tr
}

/// `sum_{m=1}^{n_avail} 1 / p_suc(m)`.
pub fn expected_comm_given_avail<T: Scalar>(n_avail: usize, p_tr: T) -> T {
    (1..=n_avail).map(|m| T::one() / p_suc(m, p_tr)).sum()
}

/// Two devices: device 1 has `tau2 - tau1` solo slots to deliver first.
pub fn pmf_avail_two<T: Scalar>(tau1: u64, tau2: u64, p_tr: T) -> AvailabilityPmf<T> {
    assert!(tau1 <= tau2, "compute slots must be ascending");
    let both = (T::one() - p_suc(1, p_tr)).powi(gap(tau1, tau2));
    AvailabilityPmf {
        probs: vec![T::one() - both, both],
    }
}

/// Three devices via the telescoped closed form.
///
/// Fails with [`Error::SingularRate`] when `p_suc(1)` and `p_suc(2)` coincide
/// (`p_tr = 1/2`), where the closed form divides by zero.
pub fn pmf_avail_three_telescoped<T: Scalar>(
    tau1: u64,
    tau2: u64,
    tau3: u64,
    p_tr: T,
) -> Result<AvailabilityPmf<T>> {
    let (p1, p2) = (p_suc(1, p_tr), p_suc(2, p_tr));
    if (p2 - p1).abs() < T::lit(SINGULAR_RATE_GAP) {
        return Err(Error::SingularRate {
            p_tr: p_tr.as_f64(),
        });
    }
    let (a, g) = (gap(tau1, tau2), gap(tau2, tau3));
    let solo = T::one() - p1;
    let head = solo.powi(a);
    let p3 = head * (T::one() - p2).powi(g);
    let mut p_two = (T::one() - head) * solo.powi(g)
        + head * p2 / (p2 - p1) * (solo.powi(g) - (T::one() - p2).powi(g));
    p_two = p_two.max(T::zero());
    Ok(three_from_tail(p_two, p3))
}

/// Three devices. Uses the telescoped form, or the explicit sum over the
/// first delivery slot when `p_tr` is (numerically) `1/2`.
pub fn pmf_avail_three<T: Scalar>(tau1: u64, tau2: u64, tau3: u64, p_tr: T) -> AvailabilityPmf<T> {
    assert!(
        tau1 <= tau2 && tau2 <= tau3,
        "compute slots must be ascending"
    );
    match pmf_avail_three_telescoped(tau1, tau2, tau3, p_tr) {
        Ok(pmf) => pmf,
        Err(_) => pmf_avail_three_summed(tau1, tau2, tau3, p_tr),
    }
}

/// Finite-sum form: first delivery either in `(tau1, tau2]` by device 1,
/// or at `tau2 + t` by one of devices 1-2 followed by the survivor failing
/// for the remaining `tau3 - tau2 - t` slots.
pub(crate) fn pmf_avail_three_summed<T: Scalar>(
    tau1: u64,
    tau2: u64,
    tau3: u64,
    p_tr: T,
) -> AvailabilityPmf<T> {
    let (p1, p2) = (p_suc(1, p_tr), p_suc(2, p_tr));
    let (a, g) = (gap(tau1, tau2), gap(tau2, tau3));
    let solo = T::one() - p1;
    let head = solo.powi(a);
    let mut window = T::zero();
    for t in 1..=g {
        window = window + p2 * (T::one() - p2).powi(t - 1) * solo.powi(g - t);
    }
    let p_two = (T::one() - head) * solo.powi(g) + head * window;
    let p3 = head * (T::one() - p2).powi(g);
    three_from_tail(p_two, p3)
}

fn three_from_tail<T: Scalar>(p_two: T, p_three: T) -> AvailabilityPmf<T> {
    let p_one = (T::one() - p_two - p_three).max(T::zero());
    AvailabilityPmf {
        probs: vec![p_one, p_two, p_three],
    }
}

fn gap(lo: u64, hi: u64) -> i32 {
    i32::try_from(hi - lo).expect("compute-slot gap fits in i32")
}

fn check_p_tr<T: Scalar>(n: usize, p_tr: T) -> Result<()> {
    let ok = p_tr > T::zero() && (p_tr < T::one() || (n == 1 && p_tr == T::one()));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(
            "p_tr",
            format!("{p_tr} unusable for {n} contending devices"),
        ))
    }
}

/// Closed-form `E[T_iter]` for one to three devices.
pub fn expected_iter_ra_closed<T: Scalar>(
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: T,
) -> Result<RaTiming<T>> {
    check_p_tr(alloc.len(), p_tr)?;
    let tau = alloc.compute_slots(rho);
    let pmf = match tau.as_slice() {
        [_] => AvailabilityPmf::certain(1),
        [t1, t2] => pmf_avail_two(*t1, *t2, p_tr),
        [t1, t2, t3] => pmf_avail_three(*t1, *t2, *t3, p_tr),
        _ => return Err(Error::UnsupportedN(alloc.len())),
    };
    Ok(RaTiming::new(*tau.last().unwrap(), pmf.expected_comm(p_tr)))
}

/// Simulates the head-start window `(tau_1, tau_N]` once and returns `N_avail`.
///
/// Contenders are exchangeable, so only their number matters: a slot with
/// `k` contenders succeeds with probability `p_suc(k)`, which is exactly the
/// law of `k` independent `p_tr` coin flips with the exactly-one rule.
fn sample_n_avail<R: Rng>(tau: &[u64], success: &[f64], rng: &mut R) -> usize {
    let n = tau.len();
    let last = tau[n - 1];
    let mut contenders = 0usize;
    let mut next = 0usize;
    let mut slot = tau[0];
    while next < n && tau[next] < last {
        // Admit every device ready by slot `slot + 1`.
        while next < n && tau[next] <= slot {
            contenders += 1;
            next += 1;
        }
        let horizon = if next < n { tau[next].min(last) } else { last };
        while slot < horizon {
            slot += 1;
            if contenders > 0 && rng.random::<f64>() < success[contenders] {
                contenders -= 1;
            }
        }
    }
    contenders + (n - next)
}

#[derive(Clone)]
struct PmfAcc {
    counts: Vec<u64>,
    comm: RunningStats,
}

fn run_pmf_mc(alloc: &BatchAllocation, rho: u64, p_tr: f64, trials: u64, seed: u64) -> PmfAcc {
    let tau = alloc.compute_slots(rho);
    let n = tau.len();
    let success: Vec<f64> = (0..=n)
        .map(|m| if m == 0 { 0.0 } else { p_suc(m, p_tr) })
        .collect();
    let comm_given: Vec<f64> = (0..=n)
        .map(|m| expected_comm_given_avail(m, p_tr))
        .collect();
    par_fold_trials(
        trials,
        seed,
        || PmfAcc {
            counts: vec![0; n],
            comm: RunningStats::new(),
        },
        |acc, rng| {
            let m = sample_n_avail(&tau, &success, rng);
            acc.counts[m - 1] += 1;
            acc.comm.push(comm_given[m]);
        },
        |mut a, b| {
            for (x, y) in a.counts.iter_mut().zip(&b.counts) {
                *x += y;
            }
            a.comm = a.comm.merge(b.comm);
            a
        },
    )
}

/// Monte-Carlo PMF of `N_avail` for any number of devices.
///
/// Each entry carries its own binomial standard error. Deterministic given
/// `seed`; trial `i` draws from stream `i`.
pub fn estimate_pmf_avail_mc<T: Scalar>(
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: T,
    trials: u64,
    seed: u64,
) -> Result<(AvailabilityPmf<T>, Vec<McEstimate>)> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    check_p_tr(alloc.len(), p_tr)?;
    let acc = run_pmf_mc(alloc, rho, p_tr.as_f64(), trials, seed);
    let total = trials as f64;
    let estimates: Vec<McEstimate> = acc
        .counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            let var = if trials > 1 {
                p * (1.0 - p) * total / (total - 1.0)
            } else {
                0.0
            };
            McEstimate {
                mean: p,
                std_err: (var / total).sqrt(),
                trials,
                seed,
            }
        })
        .collect();
    let probs = estimates.iter().map(|e| T::lit(e.mean)).collect();
    Ok((AvailabilityPmf { probs }, estimates))
}

/// `E[T_iter]` for any number of devices: closed form up to three devices
/// (zero standard error, `trials` unused), Monte Carlo beyond.
///
/// The reported standard error is that of the per-trial conditional
/// communication time, i.e. the linear combination of the PMF entries
/// including their covariance.
pub fn expected_iter_ra<T: Scalar>(
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: T,
    trials: u64,
    seed: u64,
) -> Result<(RaTiming<T>, McEstimate)> {
    if alloc.len() <= 3 {
        let timing = expected_iter_ra_closed(alloc, rho, p_tr)?;
        return Ok((timing, McEstimate::exact(timing.expected_iter.as_f64())));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    check_p_tr(alloc.len(), p_tr)?;
    let tail = alloc.compute_slots(rho).last().copied().unwrap_or(0);
    let acc = run_pmf_mc(alloc, rho, p_tr.as_f64(), trials, seed);
    let timing = RaTiming::new(tail, T::lit(acc.comm.mean()));
    let estimate = McEstimate {
        mean: tail as f64 + acc.comm.mean(),
        std_err: acc.comm.std_err(),
        trials,
        seed,
    };
    Ok((timing, estimate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn alloc(v: &[u64]) -> BatchAllocation {
        BatchAllocation::new(v.to_vec()).unwrap()
    }

    #[test]
    fn success_probability() {
        assert_relative_eq!(p_suc(1, 0.2), 0.2);
        assert_relative_eq!(p_suc(2, 0.2), 0.32);
        assert_relative_eq!(
            p_suc(20, 0.05),
            0.377_353_602_535_307_25,
            max_relative = 1e-12
        );
    }

    // Oracle: sum the probability of every transmit pattern with one transmitter.
    fn enumerate_p_suc(m: usize, p: f64) -> f64 {
        (0u32..(1 << m))
            .filter(|bits| bits.count_ones() == 1)
            .map(|bits| {
                (0..m)
                    .map(|i| if bits >> i & 1 == 1 { p } else { 1.0 - p })
                    .product::<f64>()
            })
            .sum()
    }

    #[test]
    fn success_probability_matches_enumeration() {
        for m in 1..=12 {
            for &p in &[0.05, 0.2, 0.5, 0.9] {
                assert_relative_eq!(p_suc(m, p), enumerate_p_suc(m, p), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn conditional_comm_time() {
        assert_relative_eq!(expected_comm_given_avail(1, 0.2), 5.0);
        assert_relative_eq!(expected_comm_given_avail(2, 0.2), 8.125);
        assert_relative_eq!(
            expected_comm_given_avail(3, 0.2),
            10.729_166_666_666_666,
            max_relative = 1e-12
        );
    }

    #[test]
    fn two_device_pmf() {
        assert_eq!(pmf_avail_two(4, 4, 0.2).probs(), &[0.0, 1.0]);
        let p = pmf_avail_two(4, 5, 0.2);
        assert_relative_eq!(p.prob(1), 0.2, epsilon = 1e-15);
        assert_relative_eq!(p.prob(2), 0.8, epsilon = 1e-15);
        let far = pmf_avail_two(0, 2000, 0.2);
        assert!(far.prob(1) > 1.0 - 1e-12);
    }

    #[test]
    fn three_device_pmf_against_finite_sum() {
        // Values from an independent evaluation of the untelescoped sum.
        let p = pmf_avail_three(1, 2, 3, 0.2);
        assert_relative_eq!(p.prob(1), 0.04, epsilon = 1e-12);
        assert_relative_eq!(p.prob(2), 0.416, epsilon = 1e-12);
        assert_relative_eq!(p.prob(3), 0.544, epsilon = 1e-12);
        let p = pmf_avail_three(1, 4, 9, 0.3);
        assert_relative_eq!(p.prob(1), 0.744_092_567_856, epsilon = 1e-12);
        assert_relative_eq!(p.prob(2), 0.233_394_395_001_6, epsilon = 1e-12);
        assert_relative_eq!(p.prob(3), 0.022_513_037_142_4, epsilon = 1e-12);
        assert_eq!(pmf_avail_three(7, 7, 7, 0.2).probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn singular_rate_falls_back_to_sum() {
        assert!(matches!(
            pmf_avail_three_telescoped(1, 2, 3, 0.5),
            Err(Error::SingularRate { .. })
        ));
        let p = pmf_avail_three(1, 2, 3, 0.5);
        assert_relative_eq!(p.prob(1), 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.prob(2), 0.5, epsilon = 1e-15);
        assert_relative_eq!(p.prob(3), 0.25, epsilon = 1e-15);
        // Continuity across the singular point.
        let near = pmf_avail_three(2, 5, 11, 0.5 + 1e-6);
        let at = pmf_avail_three(2, 5, 11, 0.5);
        for m in 1..=3 {
            assert_relative_eq!(near.prob(m), at.prob(m), epsilon = 1e-5);
        }
    }

    #[test]
    fn two_device_iteration_time() {
        let t = expected_iter_ra_closed(&alloc(&[245, 255]), 5, 0.2).unwrap();
        assert_eq!(t.compute_tail, 51);
        assert_relative_eq!(t.expected_iter, 58.0, epsilon = 1e-12);
        let eq = expected_iter_ra_closed(&alloc(&[50, 50]), 5, 0.2).unwrap();
        assert_relative_eq!(eq.expected_iter, 10.0 + 5.0 + 3.125, epsilon = 1e-12);
    }

    #[test]
    fn three_device_iteration_time() {
        let t = expected_iter_ra_closed(&alloc(&[20, 20, 20]), 5, 0.2).unwrap();
        assert_relative_eq!(
            t.expected_iter,
            4.0 + 10.729_166_666_666_666,
            epsilon = 1e-12
        );
        assert!(matches!(
            expected_iter_ra_closed(&alloc(&[1, 1, 1, 1]), 1, 0.2f64),
            Err(Error::UnsupportedN(4))
        ));
    }

    #[test]
    fn single_device_is_geometric() {
        let (t, est) = expected_iter_ra(&alloc(&[103]), 10, 0.25, 1, 0).unwrap();
        assert_relative_eq!(t.expected_iter, 11.0 + 4.0);
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn mc_equal_readiness_is_exact() {
        let (pmf, est) = estimate_pmf_avail_mc::<f64>(&alloc(&[40; 6]), 10, 0.2, 5000, 3).unwrap();
        assert_eq!(pmf.prob(6), 1.0);
        assert!(est.iter().all(|e| e.std_err == 0.0));
    }

    #[test]
    fn mc_two_device_pmf_matches_closed_form() {
        let a = alloc(&[40, 41]);
        let (pmf, est) = estimate_pmf_avail_mc::<f64>(&a, 10, 0.2, 200_000, 11).unwrap();
        let exact = pmf_avail_two(4, 5, 0.2);
        assert!(est[0].covers(exact.prob(1), 3.0));
        assert_relative_eq!(pmf.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn mc_is_reproducible() {
        let a = alloc(&[10, 20, 30, 40, 50]);
        let x = expected_iter_ra::<f64>(&a, 10, 0.2, 20_000, 99).unwrap();
        let y = expected_iter_ra::<f64>(&a, 10, 0.2, 20_000, 99).unwrap();
        assert_eq!(x, y);
        let z = expected_iter_ra::<f64>(&a, 10, 0.2, 20_000, 100).unwrap();
        assert_ne!(x.1.mean, z.1.mean);
    }

    #[test]
    fn pmf_validation() {
        assert!(AvailabilityPmf::new(vec![0.5, 0.5]).is_ok());
        assert!(AvailabilityPmf::new(vec![0.5, 0.6]).is_err());
        assert!(AvailabilityPmf::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let t = expected_iter_ra_closed(&alloc(&[245, 255]), 5, 0.2f32).unwrap();
        assert!((t.expected_iter - 58.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn comm_time_strictly_increasing(m in 1usize..40, p in 0.01f64..0.99) {
            prop_assert!(expected_comm_given_avail(m, p) < expected_comm_given_avail(m + 1, p));
        }

        #[test]
        fn closed_pmfs_sum_to_one(t1 in 0u64..50, d1 in 0u64..50, d2 in 0u64..50, p in 0.01f64..0.99) {
            let two = pmf_avail_two(t1, t1 + d1, p);
            let three = pmf_avail_three(t1, t1 + d1, t1 + d1 + d2, p);
            for pmf in [two.probs(), three.probs()] {
                prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(pmf.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
            // Telescoped and summed forms agree away from the singular point.
            if (p - 0.5).abs() > 1e-3 {
                let summed = pmf_avail_three_summed(t1, t1 + d1, t1 + d1 + d2, p);
                for m in 1..=3 {
                    prop_assert!((three.prob(m) - summed.prob(m)).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn success_peaks_at_reciprocal_population(m in 1usize..30, p in 0.001f64..0.999) {
            prop_assert!(p_suc(m, 1.0 / m as f64) >= p_suc(m, p) - 1e-15);
        }
    }
}
