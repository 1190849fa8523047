//! Slot-accurate simulation of one federated-learning iteration.
//!
//! Slots are numbered from 1. Device `n` computes during slots
//! `1..=tau_n` and may transmit from slot `tau_n + 1`. A delivered device
//! stops transmitting. Under TDMA the lowest-indexed ready device gets the
//! slot; under random access each ready device flips its own `p_tr` coin.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{par_fold_trials, SimRng};
use crate::stats::{McEstimate, RunningStats};
use crate::system::{BatchAllocation, Protocol};

pub const DEFAULT_SLOT_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotOutcome {
    Idle,
    /// 0-based device index.
    Success(usize),
    Collision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotEvent {
    pub slot: u64,
    /// 0-based indices of devices that transmitted.
    pub transmitters: Vec<usize>,
    /// Ready devices that had not yet delivered at the start of the slot.
    pub contenders: usize,
    pub outcome: SlotOutcome,
}

/// Every slot of one iteration, from slot 1 to the final delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTrace {
    pub events: Vec<SlotEvent>,
    pub iter_time: u64,
}

impl SlotTrace {
    /// Writes `slot,transmitters,outcome` records with 1-based device ids.
    ///
    /// Transmitters are `;`-separated (empty when idle); outcomes are
    /// `idle`, `success:<device>` or `collision`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "slot,transmitters,outcome")?;
        for e in &self.events {
            let tx: Vec<String> = e.transmitters.iter().map(|d| (d + 1).to_string()).collect();
            let outcome = match e.outcome {
                SlotOutcome::Idle => "idle".to_string(),
                SlotOutcome::Success(d) => format!("success:{}", d + 1),
                SlotOutcome::Collision => "collision".to_string(),
            };
            writeln!(out, "{},{},{}", e.slot, tx.join(";"), outcome)?;
        }
        Ok(())
    }
}

/// Receives slot events. The fast paths use `()` and skip idle stretches.
trait SlotObserver {
    fn slot(&mut self, slot: u64, transmitters: &[usize], contenders: usize, outcome: SlotOutcome);
    fn idle_until(&mut self, from: u64, to: u64);
}

impl SlotObserver for () {
    fn slot(&mut self, _: u64, _: &[usize], _: usize, _: SlotOutcome) {}
    fn idle_until(&mut self, _: u64, _: u64) {}
}

impl SlotObserver for Vec<SlotEvent> {
    fn slot(&mut self, slot: u64, transmitters: &[usize], contenders: usize, outcome: SlotOutcome) {
        self.push(SlotEvent {
            slot,
            transmitters: transmitters.to_vec(),
            contenders,
            outcome,
        });
    }

    fn idle_until(&mut self, from: u64, to: u64) {
        for slot in from..=to {
            self.slot(slot, &[], 0, SlotOutcome::Idle);
        }
    }
}

/// Ready-device bookkeeping shared by both protocols.
struct Readiness<'a> {
    tau: &'a [u64],
    next: usize,
    pending: Vec<usize>,
}

impl<'a> Readiness<'a> {
    fn new(tau: &'a [u64]) -> Self {
        Self {
            tau,
            next: 0,
            pending: Vec::with_capacity(tau.len()),
        }
    }

    /// Admits devices ready in `slot`, keeping `pending` in index order.
    fn admit(&mut self, slot: u64) {
        while self.next < self.tau.len() && self.tau[self.next] < slot {
            self.pending.push(self.next);
            self.next += 1;
        }
    }

    /// First slot in which some device is newly ready.
    fn next_ready_slot(&self) -> Option<u64> {
        self.tau.get(self.next).map(|t| t + 1)
    }
}

fn run_tdma<O: SlotObserver>(tau: &[u64], obs: &mut O) -> u64 {
    let mut ready = Readiness::new(tau);
    let mut slot = 0;
    let mut delivered = 0;
    while delivered < tau.len() {
        if ready.pending.is_empty() {
            let wake = ready.next_ready_slot().expect("undelivered device exists");
            if wake > slot + 1 {
                obs.idle_until(slot + 1, wake - 1);
            }
            slot = wake - 1;
        }
        slot += 1;
        ready.admit(slot);
        let contenders = ready.pending.len();
        let device = ready.pending.remove(0);
        obs.slot(slot, &[device], contenders, SlotOutcome::Success(device));
        delivered += 1;
    }
    slot
}

fn run_ra<O: SlotObserver>(
    tau: &[u64],
    p_tr: f64,
    rng: &mut SimRng,
    slot_cap: u64,
    obs: &mut O,
) -> Result<u64> {
    let mut ready = Readiness::new(tau);
    let mut slot = 0;
    let mut delivered = 0;
    let mut transmitters = Vec::with_capacity(tau.len());
    while delivered < tau.len() {
        if ready.pending.is_empty() {
            let wake = ready.next_ready_slot().expect("undelivered device exists");
            if wake > slot + 1 {
                obs.idle_until(slot + 1, wake - 1);
            }
            slot = wake - 1;
        }
        slot += 1;
        if slot > slot_cap {
            return Err(Error::SlotCapExceeded { cap: slot_cap });
        }
        ready.admit(slot);
        transmitters.clear();
        transmitters.extend(
            ready
                .pending
                .iter()
                .copied()
                .filter(|_| rng.random_bool(p_tr)),
        );
        let contenders = ready.pending.len();
        let outcome = match transmitters.as_slice() {
            [] => SlotOutcome::Idle,
            [d] => SlotOutcome::Success(*d),
            _ => SlotOutcome::Collision,
        };
        obs.slot(slot, &transmitters, contenders, outcome);
        if let SlotOutcome::Success(d) = outcome {
            ready.pending.retain(|&x| x != d);
            delivered += 1;
        }
    }
    Ok(slot)
}

fn check_p_tr(n: usize, p_tr: f64) -> Result<()> {
    if p_tr > 0.0 && p_tr <= 1.0 && (n == 1 || p_tr < 1.0) {
        Ok(())
    } else {
        Err(Error::invalid(
            "p_tr",
            format!("{p_tr} unusable for {n} devices"),
        ))
    }
}

pub fn simulate_iter_tdma(alloc: &BatchAllocation, rho: u64) -> SlotTrace {
    let tau = alloc.compute_slots(rho);
    let mut events = Vec::new();
    let iter_time = run_tdma(&tau, &mut events);
    SlotTrace { events, iter_time }
}

/// TDMA iteration time without building a trace.
pub fn tdma_iter_time_sim(alloc: &BatchAllocation, rho: u64) -> u64 {
    run_tdma(&alloc.compute_slots(rho), &mut ())
}

pub fn simulate_iter_ra(
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: f64,
    rng: &mut SimRng,
    slot_cap: u64,
) -> Result<SlotTrace> {
    check_p_tr(alloc.len(), p_tr)?;
    let tau = alloc.compute_slots(rho);
    let mut events = Vec::new();
    let iter_time = run_ra(&tau, p_tr, rng, slot_cap, &mut events)?;
    Ok(SlotTrace { events, iter_time })
}

/// Random-access iteration time without building a trace.
pub fn ra_iter_time_sim(
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: f64,
    rng: &mut SimRng,
    slot_cap: u64,
) -> Result<u64> {
    check_p_tr(alloc.len(), p_tr)?;
    run_ra(&alloc.compute_slots(rho), p_tr, rng, slot_cap, &mut ())
}

/// Total slots over `iterations` independent rounds.
pub fn simulate_completion(
    protocol: Protocol,
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: f64,
    iterations: u64,
    rng: &mut SimRng,
) -> Result<u64> {
    if iterations == 0 {
        return Err(Error::invalid("iterations", "must be at least 1"));
    }
    match protocol {
        Protocol::Tdma => Ok(iterations * tdma_iter_time_sim(alloc, rho)),
        Protocol::Ra => {
            check_p_tr(alloc.len(), p_tr)?;
            let tau = alloc.compute_slots(rho);
            let mut total = 0;
            for _ in 0..iterations {
                total += run_ra(&tau, p_tr, rng, DEFAULT_SLOT_CAP, &mut ())?;
            }
            Ok(total)
        }
    }
}

/// Monte-Carlo mean of the completion time over `trials` independent runs
/// of `iterations` rounds each; trial `i` uses stream `i` of `seed`.
pub fn simulate_completion_mc(
    protocol: Protocol,
    alloc: &BatchAllocation,
    rho: u64,
    p_tr: f64,
    iterations: u64,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    if protocol == Protocol::Tdma {
        let total = simulate_completion(
            protocol,
            alloc,
            rho,
            p_tr,
            iterations,
            &mut crate::rng::make_rng(seed),
        )?;
        return Ok(McEstimate::exact(total as f64));
    }
    let (stats, err) = par_fold_trials(
        trials,
        seed,
        || (RunningStats::new(), None::<Error>),
        |(stats, err), rng| {
            if err.is_none() {
                match simulate_completion(protocol, alloc, rho, p_tr, iterations, rng) {
                    Ok(t) => stats.push(t as f64),
                    Err(e) => *err = Some(e),
                }
            }
        },
        |(a, ea), (b, eb)| (a.merge(b), ea.or(eb)),
    );
    match err {
        Some(e) => Err(e),
        None => Ok(McEstimate::from_stats(&stats, seed)),
    }
}
