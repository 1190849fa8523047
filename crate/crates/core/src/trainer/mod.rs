//! Federated minibatch SGD on regularized logistic regression.
//!
//! Each round every device takes one SGD step from the global model on a
//! batch drawn without replacement from its shard, and the server averages
//! the local models with weights `B_n / B`. Slot counts per round come from
//! the slot-level simulator, so a trajectory can be read against time as
//! well as iterations.

mod dataset;

pub use dataset::Dataset;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{compute_nu, gap_bound, step_size, ConvergenceConstants};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, make_rng, SimRng};
use crate::scalar::Scalar;
use crate::simulator::{ra_iter_time_sim, DEFAULT_SLOT_CAP};
use crate::system::{validate_config, BatchAllocation, Protocol, SystemConfig};
use crate::tdma::tdma_iter_time;
use dataset::{dot, norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T = f64> {
    pub weights: Vec<T>,
    /// Completed aggregation rounds.
    pub iteration: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn zeros(dims: usize) -> Self {
        Self {
            weights: vec![T::zero(); dims],
            iteration: 0,
        }
    }

    pub fn from_weights(weights: Vec<T>) -> Self {
        Self {
            weights,
            iteration: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn check_dims<T: Scalar>(weights: &[T], data: &Dataset<T>) -> Result<()> {
    if weights.len() == data.dims() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "model has {} weights, data has {} features",
            weights.len(),
            data.dims()
        )))
    }
}

fn sample_loss<T: Scalar>(w: &[T], data: &Dataset<T>, i: usize) -> T {
    softplus(-data.label(i) * dot(w, data.row(i)))
}

/// Adds the loss gradient of sample `i` into `acc` and returns the norm of
/// the regularized per-sample gradient.
fn add_sample_grad<T: Scalar>(w: &[T], data: &Dataset<T>, i: usize, acc: &mut [T]) -> T {
    let y = data.label(i);
    let x = data.row(i);
    let coef = -y * sigmoid(-y * dot(w, x));
    let reg = data.reg_strength();
    let mut sq = T::zero();
    for ((a, &xj), &wj) in acc.iter_mut().zip(x).zip(w) {
        *a = *a + coef * xj;
        let g = coef * xj + reg * wj;
        sq = sq + g * g;
    }
    sq.sqrt()
}

fn ridge<T: Scalar>(w: &[T], data: &Dataset<T>) -> T {
    T::lit(0.5) * data.reg_strength() * dot(w, w)
}

/// Shard loss `f_n`: mean cross-entropy over the shard plus the ridge term.
pub fn local_loss<T: Scalar>(model: &ModelState<T>, data: &Dataset<T>, device: usize) -> Result<T> {
    check_dims(&model.weights, data)?;
    let shard = data.shard(device);
    if shard.is_empty() {
        return Ok(ridge(&model.weights, data));
    }
    let sum: T = shard
        .iter()
        .map(|&i| sample_loss(&model.weights, data, i))
        .sum();
    Ok(sum / T::from_count(shard.len() as u64) + ridge(&model.weights, data))
}

/// Global loss: shard losses weighted by shard size.
pub fn global_loss<T: Scalar>(model: &ModelState<T>, data: &Dataset<T>) -> Result<T> {
    let mut total = T::zero();
    for d in 0..data.n_devices() {
        let size = T::from_count(data.shard(d).len() as u64);
        total = total + size * local_loss(model, data, d)?;
    }
    Ok(total / T::from_count(data.len() as u64))
}

/// Full-dataset gradient of the global loss.
pub fn full_gradient<T: Scalar>(weights: &[T], data: &Dataset<T>) -> Result<Vec<T>> {
    check_dims(weights, data)?;
    let mut g = vec![T::zero(); data.dims()];
    for i in 0..data.len() {
        add_sample_grad(weights, data, i, &mut g);
    }
    let n = T::from_count(data.len() as u64);
    let reg = data.reg_strength();
    Ok(g.iter()
        .zip(weights)
        .map(|(&gi, &wi)| gi / n + reg * wi)
        .collect())
}

/// Batch-average gradient over the given sample indices, with the largest
/// per-sample gradient norm seen.
fn batch_gradient<T: Scalar>(weights: &[T], data: &Dataset<T>, batch: &[usize]) -> (Vec<T>, T) {
    let mut g = vec![T::zero(); data.dims()];
    let mut max_norm = T::zero();
    for &i in batch {
        max_norm = max_norm.max(add_sample_grad(weights, data, i, &mut g));
    }
    let n = T::from_count(batch.len() as u64);
    let reg = data.reg_strength();
    let g = g
        .iter()
        .zip(weights)
        .map(|(&gi, &wi)| gi / n + reg * wi)
        .collect();
    (g, max_norm)
}

/// RNG for device `device`'s batch draw in round `iteration`.
pub fn device_rng(seed: u64, iteration: u64, device: usize) -> SimRng {
    make_rng(derive_seed(derive_seed(seed, iteration), device as u64))
}

/// One local SGD step `w - eta * g` on a batch of `batch_size` samples drawn
/// without replacement from the device's shard.
pub fn local_step<T: Scalar>(
    model: &ModelState<T>,
    data: &Dataset<T>,
    device: usize,
    batch_size: u64,
    step: T,
    rng: &mut SimRng,
) -> Result<Vec<T>> {
    local_step_with_norm(model, data, device, batch_size, step, rng).map(|(w, _)| w)
}

fn local_step_with_norm<T: Scalar>(
    model: &ModelState<T>,
    data: &Dataset<T>,
    device: usize,
    batch_size: u64,
    step: T,
    rng: &mut SimRng,
) -> Result<(Vec<T>, T)> {
    check_dims(&model.weights, data)?;
    if batch_size == 0 {
        return Err(Error::EmptyBatch { device });
    }
    let shard_len = data.shard(device).len();
    if batch_size as usize > shard_len {
        return Err(Error::invalid(
            "total_batch",
            format!(
                "device {} batch {batch_size} exceeds its shard of {shard_len}",
                device + 1
            ),
        ));
    }
    let batch = data.sample_batch(device, batch_size as usize, rng);
    let (g, max_norm) = batch_gradient(&model.weights, data, &batch);
    let w = model
        .weights
        .iter()
        .zip(&g)
        .map(|(&w, &g)| w - step * g)
        .collect();
    Ok((w, max_norm))
}

/// Batch-size weighted average of local models.
///
/// `locals[n]` is ignored when device `n` has an empty batch, so callers
/// may pass the unchanged global model there.
pub fn aggregate<T: Scalar>(
    locals: &[Vec<T>],
    alloc: &BatchAllocation,
    iteration: u64,
) -> Result<ModelState<T>> {
    if locals.len() != alloc.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} local models for {} batches",
            locals.len(),
            alloc.len()
        )));
    }
    let dims = locals[0].len();
    if locals.iter().any(|l| l.len() != dims) {
        return Err(Error::DimensionMismatch(
            "local models differ in length".into(),
        ));
    }
    let total = T::from_count(alloc.total());
    let mut weights = vec![T::zero(); dims];
    for (local, &b) in locals.iter().zip(alloc.sizes()) {
        if b == 0 {
            continue;
        }
        let share = T::from_count(b) / total;
        for (acc, &v) in weights.iter_mut().zip(local) {
            *acc = *acc + share * v;
        }
    }
    Ok(ModelState { weights, iteration })
}

pub const REFERENCE_ITERATION_CAP: usize = 100_000;

/// Minimizer of the global loss by full-batch gradient descent with step
/// `1/L`, stopping when the gradient norm is at most `tol`.
pub fn reference_optimum<T: Scalar>(data: &Dataset<T>, tol: T) -> Result<(ModelState<T>, T)> {
    let step = T::one() / data.smoothness();
    let mut w = vec![T::zero(); data.dims()];
    let mut residual = T::infinity();
    for _ in 0..REFERENCE_ITERATION_CAP {
        let g = full_gradient(&w, data)?;
        residual = norm(&g);
        if residual <= tol {
            let model = ModelState::from_weights(w);
            let f = global_loss(&model, data)?;
            return Ok((model, f));
        }
        w.iter_mut().zip(&g).for_each(|(w, &g)| *w = *w - step * g);
    }
    Err(Error::NoConvergence {
        iterations: REFERENCE_ITERATION_CAP,
        residual: residual.as_f64(),
    })
}

/// Point `w* + t * direction` whose optimality gap equals `target`, found by
/// bisection on `t >= 0` (the gap grows monotonically along any ray from the
/// minimizer).
pub fn point_at_gap<T: Scalar>(
    data: &Dataset<T>,
    optimum: &ModelState<T>,
    f_star: T,
    direction: &[T],
    target: T,
) -> Result<ModelState<T>> {
    check_dims(direction, data)?;
    let len = norm(direction);
    if !(len > T::zero()) || !(target >= T::zero()) {
        return Err(Error::invalid(
            "initial_gap",
            "needs a non-zero direction and a non-negative gap",
        ));
    }
    let at = |t: T| {
        ModelState::from_weights(
            optimum
                .weights
                .iter()
                .zip(direction)
                .map(|(&w, &d)| w + t * d / len)
                .collect(),
        )
    };
    let gap = |t: T| global_loss(&at(t), data).map(|f| f - f_star);
    let mut hi = T::one();
    while gap(hi)? < target {
        hi = hi * T::lit(2.0);
        if !hi.is_finite() {
            return Err(Error::invalid("initial_gap", "target gap unreachable"));
        }
    }
    let mut lo = T::zero();
    for _ in 0..200 {
        let mid = T::lit(0.5) * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gap(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(at(hi))
}

/// One row per completed round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrajectory<T = f64> {
    pub iterations: Vec<u64>,
    /// Cumulative slots at the end of each round.
    pub slots: Vec<u64>,
    pub loss: Vec<T>,
    /// `loss - f*`.
    pub gap: Vec<T>,
    /// Theoretical gap bound for the model after each round.
    pub bound: Vec<T>,
    /// Largest per-sample gradient norm met during training, for comparison
    /// with the assumed `lambda`.
    pub max_grad_norm: T,
}

impl<T: Scalar> LossTrajectory<T> {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// First cumulative slot count at which the loss is at most `level`.
    pub fn slots_to_reach(&self, level: T) -> Option<u64> {
        self.loss
            .iter()
            .position(|&l| l <= level)
            .map(|i| self.slots[i])
    }

    /// Writes `iteration,slots,loss,gap,bound` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "slots", "loss", "gap", "bound"])?;
        for i in 0..self.len() {
            w.write_record([
                self.iterations[i].to_string(),
                self.slots[i].to_string(),
                self.loss[i].to_string(),
                self.gap[i].to_string(),
                self.bound[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a, T = f64> {
    pub config: &'a SystemConfig<T>,
    pub allocation: &'a BatchAllocation,
    pub constants: &'a ConvergenceConstants<T>,
    pub protocol: Protocol,
    pub iterations: u64,
    pub seed: u64,
    pub initial: ModelState<T>,
    /// Minimum global loss, for the gap column.
    pub f_star: T,
}

/// Runs federated SGD for `setup.iterations` rounds.
///
/// Round `k` uses step `c / (gamma + k)`. Devices with an empty batch sit
/// the round out. TDMA rounds cost their exact iteration time; RA rounds
/// are simulated with a generator derived from `(seed, k)`.
pub fn train_federated<T: Scalar>(
    data: &Dataset<T>,
    setup: &TrainSetup<'_, T>,
) -> Result<LossTrajectory<T>> {
    let cfg = setup.config;
    validate_config(cfg)?;
    setup.constants.validate()?;
    setup.allocation.check_against(cfg)?;
    data.check_allocation(setup.allocation)?;
    check_dims(&setup.initial.weights, data)?;
    if setup.iterations == 0 {
        return Err(Error::invalid("iterations", "must be at least 1"));
    }
    let nu = compute_nu(setup.constants, cfg.n_devices, cfg.total_batch)?;
    let gamma = setup.constants.step_shift;
    let p_tr = cfg.p_tr.as_f64();
    let tdma_round = tdma_iter_time(setup.allocation, cfg.compute_rate);

    let mut model = setup.initial.clone();
    let mut traj = LossTrajectory {
        max_grad_norm: T::zero(),
        ..Default::default()
    };
    let mut clock = 0u64;
    for k in 1..=setup.iterations {
        let eta = step_size(k, setup.constants);
        let locals: Vec<(Vec<T>, T)> = setup
            .allocation
            .sizes()
            .par_iter()
            .enumerate()
            .map(|(d, &b)| {
                if b == 0 {
                    return Ok((model.weights.clone(), T::zero()));
                }
                let mut rng = device_rng(setup.seed, k, d);
                local_step_with_norm(&model, data, d, b, eta, &mut rng)
            })
            .collect::<Result<_>>()?;
        for (_, n) in &locals {
            traj.max_grad_norm = traj.max_grad_norm.max(*n);
        }
        let locals: Vec<Vec<T>> = locals.into_iter().map(|(w, _)| w).collect();
        model = aggregate(&locals, setup.allocation, k)?;

        clock += match setup.protocol {
            Protocol::Tdma => tdma_round,
            Protocol::Ra => {
                let mut rng = make_rng(derive_seed(setup.seed ^ 0x5107_5107, k));
                ra_iter_time_sim(
                    setup.allocation,
                    cfg.compute_rate,
                    p_tr,
                    &mut rng,
                    DEFAULT_SLOT_CAP,
                )?
            }
        };
        let loss = global_loss(&model, data)?;
        traj.iterations.push(k);
        traj.slots.push(clock);
        traj.loss.push(loss);
        traj.gap.push(loss - setup.f_star);
        traj.bound.push(gap_bound(k + 1, nu, gamma));
    }
    Ok(traj)
}
