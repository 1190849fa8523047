//! TDMA iteration time.
//!
//! Devices are indexed by ascending batch size. When several are ready the
//! lowest index transmits first, so device `n` transmits in slot
//! `max(tau_n, s_{n-1}) + 1` and the iteration ends with device `N`.
//! Unrolling the recursion gives the closed form
//! `max(tau_N, tau_{N-1} + 1, ..., tau_1 + N - 1) + 1`.
//!
//! A zero-batch device still owns a transmission slot; it uploads the
//! unchanged global model.

use serde::{Deserialize, Serialize};

use crate::system::BatchAllocation;

/// Per-device compute and transmission slots for one TDMA iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdmaTiming {
    pub compute_slots: Vec<u64>,
    pub transmit_slots: Vec<u64>,
    pub iter_time: u64,
}

/// `ceil(batch / rho)` slots.
pub fn compute_time(batch: u64, rho: u64) -> u64 {
    assert!(rho >= 1, "compute rate must be positive");
    batch.div_ceil(rho)
}

/// Builds the schedule by running the slot recursion.
pub fn tdma_schedule(alloc: &BatchAllocation, rho: u64) -> TdmaTiming {
    let compute_slots = alloc.compute_slots(rho);
    let mut transmit_slots = Vec::with_capacity(compute_slots.len());
    let mut prev = 0;
    for &tau in &compute_slots {
        prev = tau.max(prev) + 1;
        transmit_slots.push(prev);
    }
    TdmaTiming {
        iter_time: prev,
        compute_slots,
        transmit_slots,
    }
}

/// Closed-form iteration time.
pub fn tdma_iter_time(alloc: &BatchAllocation, rho: u64) -> u64 {
    let n = alloc.len() as u64;
    alloc
        .sizes()
        .iter()
        .enumerate()
        .map(|(i, &b)| compute_time(b, rho) + (n - 1 - i as u64))
        .max()
        .unwrap_or(0)
        + 1
}

/// Lower bound on the TDMA iteration time for any allocation of `total`
/// samples over `n` devices: `m + N + 1` with
/// `m = ceil((B/rho - N(N+1)/2) / N)`.
///
/// `m` is clamped at `-1`: every schedule needs at least `N` slots (device 1
/// transmits no earlier than slot 1 and each later device one slot after
/// it), and `N` slots suffice whenever `B <= rho N (N-1) / 2`. The bound is
/// tight for every input.
pub fn tdma_lower_bound(n: usize, total: u64, rho: u64) -> u64 {
    assert!(n >= 1 && rho >= 1);
    let n = n as u64;
    let triangle = rho * n * (n + 1) / 2;
    let m: i64 = if total > triangle {
        (total - triangle).div_ceil(rho * n) as i64
    } else if total > triangle - rho * n {
        0
    } else {
        -1
    };
    (m + n as i64 + 1) as u64
}
