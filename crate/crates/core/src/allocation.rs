//! Batch allocation.
//!
//! * [`stepwise_allocation`]: fills devices from the largest index down in
//!   increments of `delta`, widening the set of filled devices by one per
//!   pass, which staggers compute completion by about `delta / rho` slots.
//!   With `delta = rho` it attains the TDMA lower bound.
//! * [`optimal_two`]: exact continuous optimum of the ceiling-free expected
//!   RA iteration time for two devices.
//! * [`optimal_three`]: the three-device analogue, solved numerically with a
//!   projected Newton method and certified by its KKT residual.
//! * [`optimize_delta`]: picks the best step-wise gap from a candidate list
//!   for any number of devices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{compute_nu, required_iterations, ConvergenceConstants};
use crate::error::{Error, Result};
use crate::random_access::{expected_iter_ra, p_suc};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::stats::McEstimate;
use crate::system::{BatchAllocation, Protocol};
use crate::tdma::tdma_iter_time;

/// Gap between consecutive step-wise batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepwiseParams {
    /// 0 selects the equal split.
    pub delta: u64,
}

impl StepwiseParams {
    pub fn allocate(&self, n_devices: usize, total: u64) -> Result<BatchAllocation> {
        stepwise_allocation(n_devices, total, self.delta)
    }
}

/// Step-wise allocation of `total` samples over `n_devices`.
///
/// Each pass walks from device `N` downwards adding `delta` to each device it
/// covers. The first pass covers one device and every later pass covers one
/// more, up to `N`. The fill stops the moment the running total
/// reaches `total`, trimming the overshoot from the device just filled.
///
/// `delta = 0` gives the equal split, with the `total mod N` leftover
/// samples going one each to the highest-indexed devices.
pub fn stepwise_allocation(n_devices: usize, total: u64, delta: u64) -> Result<BatchAllocation> {
    if n_devices == 0 {
        return Err(Error::invalid("n_devices", "must be at least 1"));
    }
    if delta > total {
        return Err(Error::invalid(
            "delta",
            format!("{delta} exceeds total batch {total}"),
        ));
    }
    let n = n_devices;
    if delta == 0 {
        let base = total / n as u64;
        let extra = (total % n as u64) as usize;
        let sizes = (0..n).map(|i| base + u64::from(i >= n - extra)).collect();
        return BatchAllocation::new(sizes);
    }
    let mut sizes = vec![0u64; n];
    let mut assigned = 0u64;
    let mut width = 0usize;
    'fill: loop {
        for offset in 0..=width {
            let idx = n - 1 - offset;
            sizes[idx] += delta;
            assigned += delta;
            if assigned >= total {
                sizes[idx] -= assigned - total;
                break 'fill;
            }
        }
        width = (width + 1).min(n - 1);
    }
    BatchAllocation::new(sizes)
}

// ---------------------------------------------------------------------------
// Two devices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwoDeviceCase {
    /// Stationary point below zero: split evenly. Unreachable for
    /// `p_tr` in (0, 1) since `p_suc(2) < 2 p_suc(1)`, kept for completeness.
    Equal,
    /// Stationary point beyond `B`: device 1 idles.
    Degenerate,
    Interior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoDeviceOptimum<T = f64> {
    pub b1: T,
    pub b2: T,
    /// Unconstrained stationary gap, before clamping to `[0, B]`.
    pub stationary_gap: T,
    pub case_tag: TwoDeviceCase,
}

impl<T: Scalar> TwoDeviceOptimum<T> {
    pub fn gap(&self) -> T {
        self.b2 - self.b1
    }

    /// Integer allocation: `floor(b1)` and the remainder.
    pub fn rounded(&self, total: u64) -> BatchAllocation {
        let b1 = self.b1.floor().to_u64().unwrap_or(0).min(total / 2);
        BatchAllocation::new(vec![b1, total - b1]).expect("b1 <= total/2 keeps order")
    }
}

/// Gap-dependent part of the two-device expected iteration time,
/// `delta / (2 rho) + (1 - p_suc(1))^(delta / rho) / p_suc(2)`.
///
/// Adding `B / (2 rho) + 1 / p_suc(1)` gives the full ceiling-free time.
pub fn two_device_objective<T: Scalar>(delta: T, rho: u64, p_tr: T) -> T {
    let rho = T::from_count(rho);
    let (p1, p2) = (p_suc(1, p_tr), p_suc(2, p_tr));
    delta / (T::lit(2.0) * rho) + (T::one() - p1).powf(delta / rho) / p2
}

/// Continuous two-device optimum.
///
/// The objective is convex in the gap; its stationary point is
/// `rho / ln(1 - p1) * ln(-p2 / (2 ln(1 - p1)))`, clamped to `[0, B]`.
pub fn optimal_two<T: Scalar>(total: u64, rho: u64, p_tr: T) -> Result<TwoDeviceOptimum<T>> {
    check_open_unit(p_tr)?;
    if rho == 0 {
        return Err(Error::invalid("compute_rate", "must be at least 1"));
    }
    let (p1, p2) = (p_suc(1, p_tr), p_suc(2, p_tr));
    let log_idle = (-p1).ln_1p();
    let stationary = T::from_count(rho) / log_idle * (-p2 / (T::lit(2.0) * log_idle)).ln();
    let b = T::from_count(total);
    let half = T::lit(0.5);
    let (gap, case_tag) = if stationary < T::zero() {
        (T::zero(), TwoDeviceCase::Equal)
    } else if stationary > b {
        (b, TwoDeviceCase::Degenerate)
    } else {
        (stationary, TwoDeviceCase::Interior)
    };
    Ok(TwoDeviceOptimum {
        b1: half * (b - gap),
        b2: half * (b + gap),
        stationary_gap: stationary,
        case_tag,
    })
}

fn check_open_unit<T: Scalar>(p: T) -> Result<()> {
    if p > T::zero() && p < T::one() {
        Ok(())
    } else {
        Err(Error::invalid("p_tr", format!("{p} not in (0, 1)")))
    }
}

// ---------------------------------------------------------------------------
// Three devices
// ---------------------------------------------------------------------------

/// Continuous three-device optimum in gap coordinates
/// `delta_1 = B_2 - B_1`, `delta_2 = B_3 - B_2`.
///
/// Batches follow from `B_1 = (B - 2 delta_1 - delta_2) / 3`, so the feasible
/// set is `delta_i >= 0`, `2 delta_1 + delta_2 <= B`. Multipliers belong to
/// `-delta_1 <= 0`, `-delta_2 <= 0` and `2 delta_1 + delta_2 - B <= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeDeviceOptimum<T = f64> {
    pub deltas: (T, T),
    pub multipliers: (T, T, T),
    /// Ceiling-free expected iteration time at `deltas`.
    pub objective: T,
    pub kkt_residual: T,
    pub iterations: usize,
}

impl<T: Scalar> ThreeDeviceOptimum<T> {
    pub fn batches(&self, total: u64) -> (T, T, T) {
        let (d1, d2) = self.deltas;
        let b1 = (T::from_count(total) - T::lit(2.0) * d1 - d2) / T::lit(3.0);
        (b1, b1 + d1, b1 + d1 + d2)
    }

    /// Largest-remainder rounding that preserves the total and the order.
    pub fn rounded(&self, total: u64) -> BatchAllocation {
        let (b1, b2, b3) = self.batches(total);
        let reals = [b1, b2, b3].map(|b| b.max(T::zero()).as_f64());
        let mut ints = reals.map(|b| b.floor() as u64);
        let mut short = total.saturating_sub(ints.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| {
            let (fi, fj) = (reals[i] - reals[i].floor(), reals[j] - reals[j].floor());
            fj.partial_cmp(&fi).unwrap().then(j.cmp(&i))
        });
        for &i in order.iter().cycle() {
            if short == 0 {
                break;
            }
            ints[i] += 1;
            short -= 1;
        }
        BatchAllocation::from_unsorted(ints.to_vec()).expect("three entries")
    }

    /// Largest complementary-slackness product.
    pub fn slackness(&self, total: u64) -> T {
        let (d1, d2) = self.deltas;
        let (a1, a2, a3) = self.multipliers;
        let budget = T::lit(2.0) * d1 + d2 - T::from_count(total);
        (a1 * d1)
            .abs()
            .max((a2 * d2).abs())
            .max((a3 * budget).abs())
    }
}

/// Three-device objective with its precomputed rate constants.
#[derive(Debug, Clone, Copy)]
pub struct ThreeDeviceObjective<T> {
    total: T,
    rho: T,
    p1: T,
    p2: T,
    p3: T,
    log_a: T,
    log_b: T,
}

impl<T: Scalar> ThreeDeviceObjective<T> {
    pub fn new(total: u64, rho: u64, p_tr: T) -> Result<Self> {
        check_open_unit(p_tr)?;
        if rho == 0 {
            return Err(Error::invalid("compute_rate", "must be at least 1"));
        }
        let (p1, p2, p3) = (p_suc(1, p_tr), p_suc(2, p_tr), p_suc(3, p_tr));
        Ok(Self {
            total: T::from_count(total),
            rho: T::from_count(rho),
            p1,
            p2,
            p3,
            log_a: (-p1).ln_1p(),
            log_b: (-p2).ln_1p(),
        })
    }

    /// `((1-p1)^x - (1-p2)^x) / (p2 - p1)` and its derivative in `x`,
    /// evaluated without cancellation near `p1 = p2`.
    fn window(&self, x: T) -> (T, T) {
        let b = T::one() - self.p2;
        let d = self.p2 - self.p1;
        let bx = (x * self.log_b).exp();
        if d == T::zero() {
            let value = x * bx / b;
            let slope = bx / b * (T::one() + x * self.log_b);
            return (value, slope);
        }
        let delta = (d / b).ln_1p(); // ln(a / b)
        let growth = (x * delta).exp_m1();
        let value = bx * growth / d;
        let slope = bx * (self.log_b * growth / d + delta / d * (x * delta).exp());
        (value, slope)
    }

    /// Expected iteration time (ceiling-free) at gaps `(d1, d2)`.
    pub fn value(&self, d1: T, d2: T) -> T {
        let (x1, x2) = (d1 / self.rho, d2 / self.rho);
        let three = T::lit(3.0);
        let ax1 = (x1 * self.log_a).exp();
        let ax2 = (x2 * self.log_a).exp();
        let bx2 = (x2 * self.log_b).exp();
        let (psi, _) = self.window(x2);
        (self.total / self.rho + x1 + T::lit(2.0) * x2) / three
            + T::one() / self.p1
            + (ax2 + self.p1 * ax1 * psi) / self.p2
            + ax1 * bx2 / self.p3
    }

    pub fn gradient(&self, d1: T, d2: T) -> (T, T) {
        let (x1, x2) = (d1 / self.rho, d2 / self.rho);
        let three = T::lit(3.0);
        let ax1 = (x1 * self.log_a).exp();
        let ax2 = (x2 * self.log_a).exp();
        let bx2 = (x2 * self.log_b).exp();
        let (psi, dpsi) = self.window(x2);
        let g1 = T::one() / three
            + self.p1 / self.p2 * self.log_a * ax1 * psi
            + self.log_a * ax1 * bx2 / self.p3;
        let g2 = T::lit(2.0) / three
            + (self.log_a * ax2 + self.p1 * ax1 * dpsi) / self.p2
            + self.log_b * ax1 * bx2 / self.p3;
        (g1 / self.rho, g2 / self.rho)
    }

    fn hessian(&self, d1: T, d2: T) -> [[T; 2]; 2] {
        let h = T::lit(1e-5) * (T::one() + d1.abs().max(d2.abs()));
        let two_h = h + h;
        let (a1, a2) = self.gradient(d1 + h, d2);
        let (b1, b2) = self.gradient(d1 - h, d2);
        let (c1, c2) = self.gradient(d1, d2 + h);
        let (e1, e2) = self.gradient(d1, d2 - h);
        let h11 = (a1 - b1) / two_h;
        let h22 = (c2 - e2) / two_h;
        let h12 = T::lit(0.5) * ((a2 - b2) / two_h + (c1 - e1) / two_h);
        [[h11, h12], [h12, h22]]
    }
}

/// Feasible triangle `delta_i >= 0`, `2 delta_1 + delta_2 <= B`.
#[derive(Debug, Clone, Copy)]
struct Triangle<T> {
    total: T,
}

impl<T: Scalar> Triangle<T> {
    fn vertices(&self) -> [(T, T); 3] {
        [
            (T::zero(), T::zero()),
            (self.total / T::lit(2.0), T::zero()),
            (T::zero(), self.total),
        ]
    }

    fn contains(&self, p: (T, T)) -> bool {
        p.0 >= T::zero() && p.1 >= T::zero() && T::lit(2.0) * p.0 + p.1 <= self.total
    }

    /// Euclidean projection: the point itself, or the nearest point on an edge.
    fn project(&self, p: (T, T)) -> (T, T) {
        if self.contains(p) {
            return p;
        }
        let v = self.vertices();
        let mut best = v[0];
        let mut best_dist = T::infinity();
        for (s, e) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
            let q = project_segment(p, s, e);
            let dist = (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2);
            if dist < best_dist {
                best_dist = dist;
                best = q;
            }
        }
        // Snap the budget edge exactly onto its line.
        if (T::lit(2.0) * best.0 + best.1 - self.total).abs() <= self.tolerance() {
            best.1 = (self.total - T::lit(2.0) * best.0).max(T::zero());
        }
        best
    }

    /// Slack threshold for calling a constraint active.
    fn tolerance(&self) -> T {
        T::lit(1e-10) * (T::one() + self.total)
    }

    /// Constraint normals `(n, active)` in `n . delta <= c` form.
    fn active(&self, p: (T, T)) -> [bool; 3] {
        let tol = self.tolerance();
        [
            p.0 <= tol,
            p.1 <= tol,
            self.total - (T::lit(2.0) * p.0 + p.1) <= tol,
        ]
    }
}

fn project_segment<T: Scalar>(p: (T, T), s: (T, T), e: (T, T)) -> (T, T) {
    let (dx, dy) = (e.0 - s.0, e.1 - s.1);
    let len2 = dx * dx + dy * dy;
    if len2 == T::zero() {
        return s;
    }
    let t = (((p.0 - s.0) * dx + (p.1 - s.1) * dy) / len2)
        .max(T::zero())
        .min(T::one());
    (s.0 + t * dx, s.1 + t * dy)
}

const NORMALS: [(f64, f64); 3] = [(-1.0, 0.0), (0.0, -1.0), (2.0, 1.0)];

/// Least-squares multipliers for `grad + sum_i alpha_i n_i = 0` over the
/// active constraints, and the resulting stationarity residual.
fn multipliers<T: Scalar>(grad: (T, T), active: [bool; 3]) -> ([T; 3], T) {
    let idx: Vec<usize> = (0..3).filter(|&i| active[i]).collect();
    let n = |i: usize| (T::lit(NORMALS[i].0), T::lit(NORMALS[i].1));
    let mut alpha = [T::zero(); 3];
    match idx.as_slice() {
        [] => {}
        [i] => {
            let (nx, ny) = n(*i);
            alpha[*i] = -(grad.0 * nx + grad.1 * ny) / (nx * nx + ny * ny);
        }
        [i, j, ..] => {
            // Two normals span the plane; a third active constraint only
            // occurs at B = 0 where any split of the multipliers works.
            let (ax, ay) = n(*i);
            let (bx, by) = n(*j);
            let det = ax * by - ay * bx;
            alpha[*i] = (-grad.0 * by + grad.1 * bx) / det;
            alpha[*j] = (-ax * grad.1 + ay * grad.0) / det;
        }
    }
    let mut rx = grad.0;
    let mut ry = grad.1;
    for (i, &a) in alpha.iter().enumerate() {
        let (nx, ny) = n(i);
        rx = rx + a * nx;
        ry = ry + a * ny;
    }
    (alpha, rx.abs().max(ry.abs()))
}

/// KKT certificate at a feasible point: multipliers and residual
/// (stationarity, dual feasibility, complementary slackness).
fn kkt<T: Scalar>(
    obj: &ThreeDeviceObjective<T>,
    tri: &Triangle<T>,
    p: (T, T),
) -> ([T; 3], T, [bool; 3]) {
    let grad = obj.gradient(p.0, p.1);
    let mut active = tri.active(p);
    loop {
        let (alpha, stationarity) = multipliers(grad, active);
        // Release the most negative multiplier, if any.
        let worst = (0..3)
            .filter(|&i| active[i])
            .min_by(|&i, &j| alpha[i].partial_cmp(&alpha[j]).unwrap());
        match worst {
            Some(i) if alpha[i] < T::zero() && stationarity <= T::lit(1e-12) => {
                let mut released = active;
                released[i] = false;
                let (ra, rs) = multipliers(grad, released);
                if rs < -alpha[i] || ra.iter().all(|a| *a >= T::zero()) {
                    active = released;
                    continue;
                }
                return (alpha, stationarity.max(-alpha[i]), active);
            }
            Some(i) if alpha[i] < T::zero() => {
                return (alpha, stationarity.max(-alpha[i]), active);
            }
            _ => {
                let slack = [
                    (alpha[0] * p.0).abs(),
                    (alpha[1] * p.1).abs(),
                    (alpha[2] * (tri.total - T::lit(2.0) * p.0 - p.1)).abs(),
                ];
                let worst_slack = slack.iter().copied().fold(T::zero(), T::max);
                return (alpha, stationarity.max(worst_slack), active);
            }
        }
    }
}

pub const THREE_DEVICE_ITERATION_CAP: usize = 500;
const WARM_START_GRID: usize = 40;
const WARM_STARTS: usize = 4;

/// Numerical three-device optimum.
///
/// Warm-starts from the best points of a 40x40 grid over the feasible
/// triangle and runs projected Newton steps (gradient steps where the
/// Hessian is not positive definite) with Armijo backtracking until the KKT
/// residual drops below `tol`. Returns the best certified point, or
/// [`Error::NoConvergence`] if no start certifies within
/// [`THREE_DEVICE_ITERATION_CAP`] iterations.
pub fn optimal_three<T: Scalar>(
    total: u64,
    rho: u64,
    p_tr: T,
    tol: T,
) -> Result<ThreeDeviceOptimum<T>> {
    let obj = ThreeDeviceObjective::new(total, rho, p_tr)?;
    let tri = Triangle {
        total: T::from_count(total),
    };
    if total == 0 {
        let (alpha, residual, _) = kkt(&obj, &tri, (T::zero(), T::zero()));
        return Ok(ThreeDeviceOptimum {
            deltas: (T::zero(), T::zero()),
            multipliers: (alpha[0], alpha[1], alpha[2]),
            objective: obj.value(T::zero(), T::zero()),
            kkt_residual: residual,
            iterations: 0,
        });
    }

    let mut starts: Vec<(T, (T, T))> = Vec::new();
    let grid = WARM_START_GRID;
    for i in 0..=grid {
        let d1 = tri.total / T::lit(2.0) * T::from_count(i as u64) / T::from_count(grid as u64);
        let room = (tri.total - T::lit(2.0) * d1).max(T::zero());
        for j in 0..=grid {
            let d2 = room * T::from_count(j as u64) / T::from_count(grid as u64);
            starts.push((obj.value(d1, d2), (d1, d2)));
        }
    }
    starts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    starts.truncate(WARM_STARTS);
    for v in tri.vertices() {
        starts.push((obj.value(v.0, v.1), v));
    }

    let mut best: Option<ThreeDeviceOptimum<T>> = None;
    let mut worst_residual = T::zero();
    for (_, start) in starts {
        match projected_newton(&obj, &tri, start, tol) {
            Ok(sol) => {
                if best.is_none_or(|b| sol.objective < b.objective) {
                    best = Some(sol);
                }
            }
            Err(r) => worst_residual = worst_residual.max(r),
        }
    }
    best.ok_or(Error::NoConvergence {
        iterations: THREE_DEVICE_ITERATION_CAP,
        residual: worst_residual.as_f64(),
    })
}

fn projected_newton<T: Scalar>(
    obj: &ThreeDeviceObjective<T>,
    tri: &Triangle<T>,
    start: (T, T),
    tol: T,
) -> std::result::Result<ThreeDeviceOptimum<T>, T> {
    let mut p = tri.project(start);
    let mut value = obj.value(p.0, p.1);
    let mut residual = T::infinity();
    for iteration in 0..=THREE_DEVICE_ITERATION_CAP {
        let (alpha, r, active) = kkt(obj, tri, p);
        residual = r;
        if residual <= tol {
            return Ok(ThreeDeviceOptimum {
                deltas: p,
                multipliers: (alpha[0], alpha[1], alpha[2]),
                objective: value,
                kkt_residual: residual,
                iterations: iteration,
            });
        }
        let g = obj.gradient(p.0, p.1);
        let dir = newton_direction(obj, p, g, active);
        let slope = g.0 * dir.0 + g.1 * dir.1;
        if !(slope < T::zero()) {
            break;
        }
        let mut step = T::one();
        let mut moved = false;
        for _ in 0..80 {
            let cand = tri.project((p.0 + step * dir.0, p.1 + step * dir.1));
            let cv = obj.value(cand.0, cand.1);
            let decrease = g.0 * (cand.0 - p.0) + g.1 * (cand.1 - p.1);
            if cv <= value + T::lit(1e-4) * decrease || (cv < value && decrease < T::zero()) {
                moved = cand != p;
                p = cand;
                value = cv;
                break;
            }
            step = step * T::lit(0.5);
        }
        if !moved {
            break;
        }
    }
    Err(residual)
}

/// Newton direction restricted to the face defined by the active set.
fn newton_direction<T: Scalar>(
    obj: &ThreeDeviceObjective<T>,
    p: (T, T),
    g: (T, T),
    active: [bool; 3],
) -> (T, T) {
    let h = obj.hessian(p.0, p.1);
    let count = active.iter().filter(|a| **a).count();
    match count {
        0 => {
            let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
            if h[0][0] > T::zero() && det > T::zero() {
                (
                    -(h[1][1] * g.0 - h[0][1] * g.1) / det,
                    -(-h[0][1] * g.0 + h[0][0] * g.1) / det,
                )
            } else {
                (-g.0, -g.1)
            }
        }
        1 => {
            let i = active.iter().position(|a| *a).unwrap();
            // Unit tangent of the active edge.
            let (nx, ny) = (T::lit(NORMALS[i].0), T::lit(NORMALS[i].1));
            let norm = (nx * nx + ny * ny).sqrt();
            let (ux, uy) = (-ny / norm, nx / norm);
            let slope = g.0 * ux + g.1 * uy;
            let curve = ux * (h[0][0] * ux + h[0][1] * uy) + uy * (h[0][1] * ux + h[1][1] * uy);
            let t = if curve > T::zero() {
                -slope / curve
            } else {
                -slope
            };
            (t * ux, t * uy)
        }
        _ => {
            // At a vertex: step along the steepest feasible descent; the
            // projection keeps the iterate inside the triangle.
            (-g.0, -g.1)
        }
    }
}

// ---------------------------------------------------------------------------
// Gap sweep
// ---------------------------------------------------------------------------

/// Convergence inputs turning iteration time into completion time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionTarget<T = f64> {
    pub constants: ConvergenceConstants<T>,
    pub epsilon: T,
}

impl<T: Scalar> CompletionTarget<T> {
    /// `K(epsilon)` for the given system size.
    pub fn iterations(&self, n_devices: usize, total: u64) -> Result<u64> {
        let nu = compute_nu(&self.constants, n_devices, total)?;
        required_iterations(self.epsilon, nu, self.constants.step_shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub delta: u64,
    pub allocation: BatchAllocation,
    pub expected_iter: McEstimate,
    /// Iteration estimate scaled by `K(epsilon)`; equal to `expected_iter`
    /// when no completion target is given.
    pub expected_completion: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSweep {
    pub protocol: Protocol,
    pub iterations: u64,
    /// Rows in ascending `delta` order.
    pub rows: Vec<DeltaRow>,
    /// Index into `rows` of the smallest expected completion time.
    pub best: usize,
}

impl DeltaSweep {
    pub fn best_row(&self) -> &DeltaRow {
        &self.rows[self.best]
    }
}

/// Inputs of [`optimize_delta`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSearch<T = f64> {
    pub protocol: Protocol,
    pub n_devices: usize,
    pub total: u64,
    pub rho: u64,
    pub p_tr: T,
    pub deltas: Vec<u64>,
    pub trials: u64,
    pub seed: u64,
    pub target: Option<CompletionTarget<T>>,
}

/// Evaluates every candidate gap and returns the table with its argmin.
///
/// TDMA rows are exact. RA rows use the closed form up to three devices and
/// Monte Carlo beyond, with candidate `delta` seeded by
/// `derive_seed(seed, delta)` so rows do not depend on evaluation order.
/// Ties go to the smaller gap.
pub fn optimize_delta<T: Scalar>(search: &DeltaSearch<T>) -> Result<DeltaSweep> {
    let mut deltas = search.deltas.clone();
    deltas.sort_unstable();
    deltas.dedup();
    if deltas.is_empty() {
        return Err(Error::invalid("deltas", "candidate list is empty"));
    }
    let iterations = match &search.target {
        Some(t) => t.iterations(search.n_devices, search.total)?,
        None => 1,
    };
    let rows: Vec<DeltaRow> = deltas
        .par_iter()
        .map(|&delta| evaluate_delta(search, delta, iterations))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.expected_completion.mean < rows[best].expected_completion.mean {
            best = i;
        }
    }
    Ok(DeltaSweep {
        protocol: search.protocol,
        iterations,
        rows,
        best,
    })
}

fn evaluate_delta<T: Scalar>(
    search: &DeltaSearch<T>,
    delta: u64,
    iterations: u64,
) -> Result<DeltaRow> {
    let allocation = stepwise_allocation(search.n_devices, search.total, delta)?;
    let expected_iter = match search.protocol {
        Protocol::Tdma => McEstimate::exact(tdma_iter_time(&allocation, search.rho) as f64),
        Protocol::Ra => {
            let seed = derive_seed(search.seed, delta);
            expected_iter_ra(&allocation, search.rho, search.p_tr, search.trials, seed)?.1
        }
    };
    let k = iterations as f64;
    let expected_completion = McEstimate {
        mean: expected_iter.mean * k,
        std_err: expected_iter.std_err * k,
        ..expected_iter
    };
    Ok(DeltaRow {
        delta,
        allocation,
        expected_iter,
        expected_completion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_access::expected_iter_ra_closed;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sizes(n: usize, b: u64, d: u64) -> Vec<u64> {
        stepwise_allocation(n, b, d).unwrap().sizes().to_vec()
    }

    #[test]
    fn stepwise_traces() {
        assert_eq!(sizes(3, 12, 2), vec![2, 4, 6]);
        assert_eq!(sizes(3, 24, 2), vec![6, 8, 10]);
        assert_eq!(sizes(4, 8, 8), vec![0, 0, 0, 8]);
        assert_eq!(sizes(3, 10, 2), vec![0, 4, 6]);
        assert_eq!(sizes(2, 500, 7), vec![245, 255]);
    }

    #[test]
    fn stepwise_equal_split() {
        assert_eq!(sizes(3, 12, 0), vec![4, 4, 4]);
        assert_eq!(sizes(4, 10, 0), vec![2, 2, 3, 3]);
        assert!(stepwise_allocation(3, 5, 6).is_err());
        assert!(stepwise_allocation(0, 5, 1).is_err());
    }

    #[test]
    fn stepwise_matches_construction_at_exact_budget() {
        // B = rho (m N + N (N+1) / 2) with delta = rho gives B_n = rho (m + n).
        for &rho in &[1u64, 2, 5, 10] {
            for n in 2..=8usize {
                for m in 1..=10u64 {
                    let nn = n as u64;
                    let b = rho * (m * nn + nn * (nn + 1) / 2);
                    let expect: Vec<u64> = (1..=nn).map(|k| rho * (m + k)).collect();
                    assert_eq!(sizes(n, b, rho), expect, "rho={rho} n={n} m={m}");
                    let a = stepwise_allocation(n, b, rho).unwrap();
                    assert_eq!(tdma_iter_time(&a, rho), m + nn + 1);
                    assert_eq!(crate::tdma::tdma_lower_bound(n, b, rho), m + nn + 1);
                }
            }
        }
    }

    fn ascending(n: usize, total: u64, floor: u64, prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if n == 1 {
            if total >= floor {
                prefix.push(total);
                out.push(prefix.clone());
                prefix.pop();
            }
            return;
        }
        let mut b = floor;
        while b * n as u64 <= total {
            prefix.push(b);
            ascending(n - 1, total - b, b, prefix, out);
            prefix.pop();
            b += 1;
        }
    }

    #[test]
    fn stepwise_rho_is_tdma_optimal_at_small_scale() {
        for n in 2..=3usize {
            for rho in 1..=2u64 {
                for b in 1..=30u64 {
                    let mut all = Vec::new();
                    ascending(n, b, 0, &mut Vec::new(), &mut all);
                    let best = all
                        .into_iter()
                        .map(|s| tdma_iter_time(&BatchAllocation::new(s).unwrap(), rho))
                        .min()
                        .unwrap();
                    let sw = stepwise_allocation(n, b, rho.min(b)).unwrap();
                    assert_eq!(tdma_iter_time(&sw, rho), best, "n={n} rho={rho} b={b}");
                }
            }
        }
    }

    #[test]
    fn two_device_worked_case() {
        let opt = optimal_two(500, 5, 0.2f64).unwrap();
        assert_eq!(opt.case_tag, TwoDeviceCase::Interior);
        assert_relative_eq!(opt.stationary_gap, 7.453_531_034_835_956, epsilon = 1e-9);
        assert_relative_eq!(opt.b1, 246.273_234_482_582, epsilon = 1e-9);
        assert_relative_eq!(opt.b2, 253.726_765_517_418, epsilon = 1e-9);
        assert_eq!(opt.rounded(500).sizes(), &[246, 254]);
    }

    #[test]
    fn two_device_boundary_cases() {
        // Tiny budget: the stationary gap exceeds B.
        let opt = optimal_two(4, 5, 0.2f64).unwrap();
        assert_eq!(opt.case_tag, TwoDeviceCase::Degenerate);
        assert_eq!((opt.b1, opt.b2), (0.0, 4.0));
        // A negative stationary gap needs p_suc(2) > -2 ln(1 - p_suc(1)),
        // which never holds, so the gap stays positive across the range.
        for i in 1..1000 {
            let opt = optimal_two(500, 5, i as f64 / 1000.0).unwrap();
            assert!(opt.stationary_gap > 0.0);
            assert_ne!(opt.case_tag, TwoDeviceCase::Equal);
        }
        assert!(optimal_two(500, 5, 1.0f64).is_err());
    }

    #[test]
    fn two_device_objective_is_time_minus_constant() {
        // With rho dividing both batches the ceiling-free time is exact.
        for (b1, b2) in [(245u64, 255u64), (250, 250), (100, 400), (0, 500)] {
            let a = BatchAllocation::new(vec![b1, b2]).unwrap();
            let exact = expected_iter_ra_closed(&a, 5, 0.2f64)
                .unwrap()
                .expected_iter;
            let g = two_device_objective((b2 - b1) as f64, 5, 0.2);
            assert_relative_eq!(g + 500.0 / 10.0 + 5.0, exact, epsilon = 1e-9);
        }
    }

    #[test]
    fn three_device_objective_matches_closed_form() {
        for (b1, b2, b3) in [
            (100u64, 200u64, 300u64),
            (200, 200, 200),
            (0, 0, 600),
            (50, 250, 300),
        ] {
            let a = BatchAllocation::new(vec![b1, b2, b3]).unwrap();
            for &p in &[0.1, 0.2, 0.5, 0.7] {
                let obj = ThreeDeviceObjective::new(600, 5, p).unwrap();
                let exact = expected_iter_ra_closed(&a, 5, p).unwrap().expected_iter;
                assert_relative_eq!(
                    obj.value((b2 - b1) as f64, (b3 - b2) as f64),
                    exact,
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn three_device_gradient_matches_finite_differences() {
        for &p in &[0.15, 0.5, 0.5 + 1e-9, 0.8] {
            let obj = ThreeDeviceObjective::new(600, 5, p).unwrap();
            for &(d1, d2) in &[(3.0, 7.0), (0.0, 12.5), (40.0, 0.0), (1.0, 200.0)] {
                let h = 1e-5;
                let fd1 = (obj.value(d1 + h, d2) - obj.value(d1 - h, d2)) / (2.0 * h);
                let fd2 = (obj.value(d1, d2 + h) - obj.value(d1, d2 - h)) / (2.0 * h);
                let (g1, g2) = obj.gradient(d1, d2);
                assert_relative_eq!(g1, fd1, epsilon = 1e-7);
                assert_relative_eq!(g2, fd2, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn three_device_empty_budget() {
        let opt = optimal_three(0, 5, 0.2f64, 1e-6).unwrap();
        assert_eq!(opt.deltas, (0.0, 0.0));
    }

    fn grid_best(obj: &ThreeDeviceObjective<f64>, total: f64, step: f64) -> (f64, (f64, f64)) {
        let mut best = (f64::INFINITY, (0.0, 0.0));
        let mut d1 = 0.0;
        while 2.0 * d1 <= total {
            let mut d2 = 0.0;
            while 2.0 * d1 + d2 <= total {
                let v = obj.value(d1, d2);
                if v < best.0 {
                    best = (v, (d1, d2));
                }
                d2 += step;
            }
            d1 += step;
        }
        best
    }

    #[test]
    fn three_device_reference_case_matches_grid() {
        let opt = optimal_three(600, 5, 0.2f64, 1e-6).unwrap();
        let obj = ThreeDeviceObjective::new(600, 5, 0.2).unwrap();
        let (gv, (g1, g2)) = grid_best(&obj, 600.0, 0.5);
        assert!(opt.objective <= gv + 1e-12);
        assert!((opt.deltas.0 - g1).abs() <= 0.5 && (opt.deltas.1 - g2).abs() <= 0.5);
        assert!(opt.kkt_residual <= 1e-6);
        assert!(opt.slackness(600) <= 1e-6);
        let (b1, b2, b3) = opt.batches(600);
        assert_relative_eq!(b1 + b2 + b3, 600.0, epsilon = 1e-9);
        assert_eq!(opt.rounded(600).total(), 600);
    }

    #[test]
    fn three_device_heavy_contention_staggers_both_gaps() {
        let opt = optimal_three(600, 5, 0.9f64, 1e-6).unwrap();
        assert!(opt.deltas.0 > 0.0 && opt.deltas.1 > 0.0, "{:?}", opt.deltas);
        let obj = ThreeDeviceObjective::new(600, 5, 0.9).unwrap();
        let (gv, _) = grid_best(&obj, 600.0, 0.5);
        assert!(opt.objective <= gv + 1e-12);
    }

    #[test]
    fn three_device_tight_budget_activates_constraint() {
        for &(b, rho, p) in &[(4u64, 5u64, 0.2f64), (10, 5, 0.6), (30, 10, 0.9)] {
            let opt = optimal_three(b, rho, p, 1e-6).unwrap();
            let (d1, d2) = opt.deltas;
            let (a1, a2, a3) = opt.multipliers;
            assert!(a1 >= 0.0 && a2 >= 0.0 && a3 >= 0.0);
            assert!(a1 + a2 + a3 > 0.0, "some constraint should bind: {opt:?}");
            assert!(opt.kkt_residual <= 1e-6 && opt.slackness(b) <= 1e-6);
            assert!(2.0 * d1 + d2 <= b as f64 + 1e-9);
            let obj = ThreeDeviceObjective::new(b, rho, p).unwrap();
            let (gv, _) = grid_best(&obj, b as f64, b as f64 / 400.0);
            assert!(opt.objective <= gv + 1e-12);
        }
    }

    #[test]
    fn three_device_singular_rate() {
        let opt = optimal_three(300, 3, 0.5f64, 1e-6).unwrap();
        assert!(opt.kkt_residual <= 1e-6);
    }

    #[test]
    fn sweep_picks_rounded_two_device_optimum() {
        let search = DeltaSearch {
            protocol: Protocol::Ra,
            n_devices: 2,
            total: 500,
            rho: 5,
            p_tr: 0.2f64,
            deltas: vec![7, 0],
            trials: 1,
            seed: 0,
            target: None,
        };
        let sweep = optimize_delta(&search).unwrap();
        assert_eq!(
            sweep.rows.iter().map(|r| r.delta).collect::<Vec<_>>(),
            vec![0, 7]
        );
        assert_eq!(sweep.best_row().delta, 7);
        assert_relative_eq!(sweep.best_row().expected_iter.mean, 58.0, epsilon = 1e-12);
    }

    #[test]
    fn sweep_tdma_prefers_rho_and_scales_by_iterations() {
        let constants = ConvergenceConstants {
            smoothness: 1.0,
            strong_convexity: 1.0,
            grad_bound: 0.1,
            step_scale: 1.5,
            step_shift: 1.0,
            initial_gap: 1.0,
        };
        let search = DeltaSearch {
            protocol: Protocol::Tdma,
            n_devices: 20,
            total: 10_000,
            rho: 10,
            p_tr: 0.2f64,
            deltas: vec![0, 10, 20, 30, 40, 50],
            trials: 1,
            seed: 0,
            target: Some(CompletionTarget {
                constants,
                epsilon: 0.1,
            }),
        };
        let sweep = optimize_delta(&search).unwrap();
        assert_eq!(sweep.iterations, 19);
        assert_eq!(sweep.best_row().delta, 10);
        for row in &sweep.rows {
            assert_eq!(row.expected_completion.mean, 19.0 * row.expected_iter.mean);
        }
    }

    #[test]
    fn sweep_single_candidate_and_ties() {
        let mut search = DeltaSearch {
            protocol: Protocol::Tdma,
            n_devices: 3,
            total: 3,
            rho: 100,
            p_tr: 0.2f64,
            deltas: vec![1],
            trials: 1,
            seed: 0,
            target: None,
        };
        assert_eq!(optimize_delta(&search).unwrap().best_row().delta, 1);
        // Every gap gives the same TDMA time at this scale: smallest wins.
        search.deltas = vec![3, 1, 2];
        let sweep = optimize_delta(&search).unwrap();
        assert!(sweep
            .rows
            .windows(2)
            .all(|w| w[0].expected_iter.mean == w[1].expected_iter.mean));
        assert_eq!(sweep.best_row().delta, 1);
        search.deltas.clear();
        assert!(optimize_delta(&search).is_err());
    }

    proptest! {
        #[test]
        fn stepwise_sums_and_ascends(n in 1usize..30, b in 1u64..5000, frac in 0.0f64..1.0) {
            let delta = (frac * b as f64) as u64;
            let a = stepwise_allocation(n, b, delta).unwrap();
            prop_assert_eq!(a.total(), b);
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.sizes().windows(2).all(|w| w[0] <= w[1]));
            if delta > 0 {
                // Filled neighbours sit delta apart, except where an
                // unfinished pass stops and at the trimmed device.
                prop_assert!(a.sizes().windows(2).all(|w| w[1] - w[0] <= 2 * delta || w[0] == 0));
                let off: usize = a.sizes().windows(2).filter(|w| w[0] > 0 && w[1] - w[0] != delta).count();
                prop_assert!(off <= 2, "{:?}", a.sizes());
            }
        }

        #[test]
        fn two_device_optimum_beats_fine_grid(b in 10u64..3000, rho in 1u64..20, p in 0.02f64..0.95) {
            let opt = optimal_two(b, rho, p).unwrap();
            let at = two_device_objective(opt.gap(), rho, p);
            let step = b as f64 / 1000.0;
            for i in 0..=1000 {
                let d = i as f64 * step;
                prop_assert!(at <= two_device_objective(d, rho, p) + 1e-9);
            }
        }
    }
}
