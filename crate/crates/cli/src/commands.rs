//! Experiment runners. Each returns a [`Report`]: one CSV table plus a
//! JSON summary and a short human-readable rendering.

use serde_json::{json, Value};
use wfl_core::allocation::{
    optimal_three, optimal_two, optimize_delta, stepwise_allocation, CompletionTarget, DeltaSearch,
};
use wfl_core::convergence::{compute_nu, required_iterations};
use wfl_core::random_access::expected_iter_ra;
use wfl_core::rng::{derive_seed, make_rng};
use wfl_core::simulator::{
    simulate_completion_mc, simulate_iter_ra, simulate_iter_tdma, DEFAULT_SLOT_CAP,
};
use wfl_core::tdma::{tdma_iter_time, tdma_lower_bound};
use wfl_core::trainer::{self, Dataset, ModelState, TrainSetup};
use wfl_core::{BatchAllocation, McEstimate, Protocol};

use crate::config::{AllocMethod, ExperimentConfig};
use crate::CliError;

pub struct Report {
    /// File stem for `--out`.
    pub name: &'static str,
    pub csv: Vec<u8>,
    pub summary: Value,
    pub text: String,
}

fn table(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

fn sizes_field(a: &BatchAllocation) -> String {
    a.sizes()
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// `K(epsilon)` when convergence constants and a target are configured.
fn completion_iterations(
    cfg: &ExperimentConfig,
    n: usize,
    b: u64,
) -> Result<Option<u64>, CliError> {
    match (&cfg.convergence, cfg.epsilon) {
        (Some(_), Some(eps)) => {
            let c = cfg.require_constants()?;
            let nu = compute_nu(&c, n, b)?;
            Ok(Some(required_iterations(eps, nu, c.step_shift)?))
        }
        _ => Ok(None),
    }
}

pub fn ktarget(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let consts = cfg.require_constants()?;
    let n = cfg
        .system
        .n_devices
        .ok_or_else(|| CliError::Config("missing field `system.n_devices`".into()))?;
    let b = cfg
        .system
        .total_batch
        .ok_or_else(|| CliError::Config("missing field `system.total_batch`".into()))?;
    let nu = compute_nu(&consts, n, b)?;
    let mut rows = Vec::new();
    let mut text = format!("nu = {nu}\n");
    let mut entries = Vec::new();
    for eps in cfg.require_epsilons()? {
        let k = required_iterations(eps, nu, consts.step_shift)?;
        rows.push(vec![eps.to_string(), nu.to_string(), k.to_string()]);
        text.push_str(&format!("K({eps}) = {k}\n"));
        entries.push(json!({ "epsilon": eps, "k": k }));
    }
    Ok(Report {
        name: "ktarget",
        csv: table(&["epsilon", "nu", "k"], &rows)?,
        summary: json!({ "nu": nu, "targets": entries }),
        text,
    })
}

pub fn time(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let sys = cfg.require_system()?;
    let protocol = cfg.require_protocol()?;
    let (alloc, delta) = cfg.require_allocation(&sys)?;
    let iter = match protocol {
        Protocol::Tdma => McEstimate::exact(tdma_iter_time(&alloc, sys.compute_rate) as f64),
        Protocol::Ra => {
            expected_iter_ra(&alloc, sys.compute_rate, sys.p_tr, cfg.trials(), cfg.seed())?.1
        }
    };
    let k = completion_iterations(cfg, sys.n_devices, sys.total_batch)?;
    let completion = k.map(|k| (iter.mean * k as f64, iter.std_err * k as f64));
    let opt = |v: Option<String>| v.unwrap_or_default();
    let row = vec![
        protocol.to_string(),
        sizes_field(&alloc),
        opt(delta.map(|d| d.to_string())),
        sys.p_tr.to_string(),
        iter.mean.to_string(),
        iter.std_err.to_string(),
        iter.trials.to_string(),
        opt(k.map(|k| k.to_string())),
        opt(completion.map(|c| c.0.to_string())),
        opt(completion.map(|c| c.1.to_string())),
    ];
    let mut text = format!("{protocol} iteration time: {}", iter.mean);
    if iter.std_err > 0.0 {
        text.push_str(&format!(
            " +- {} (SE, {} trials)",
            iter.std_err, iter.trials
        ));
    }
    text.push('\n');
    if let (Some(k), Some((c, se))) = (k, completion) {
        text.push_str(&format!("completion time over K = {k} iterations: {c}"));
        if se > 0.0 {
            text.push_str(&format!(" +- {se}"));
        }
        text.push('\n');
    }
    Ok(Report {
        name: "time",
        csv: table(
            &[
                "protocol",
                "allocation",
                "delta",
                "p_tr",
                "iter_time",
                "iter_se",
                "trials",
                "iterations",
                "completion",
                "completion_se",
            ],
            &[row],
        )?,
        summary: json!({
            "protocol": protocol,
            "allocation": alloc,
            "iter_time": iter,
            "iterations": k,
            "completion": completion.map(|c| c.0),
        }),
        text,
    })
}

pub fn allocate(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let sys = cfg.require_system()?;
    let method = cfg.method.unwrap_or(AllocMethod::Stepwise);
    let (alloc, summary, text) = match method {
        AllocMethod::Stepwise => {
            let delta = cfg
                .delta
                .ok_or_else(|| CliError::Config("missing field `delta`".into()))?;
            let a = stepwise_allocation(sys.n_devices, sys.total_batch, delta)?;
            let lb = tdma_lower_bound(sys.n_devices, sys.total_batch, sys.compute_rate);
            let t = tdma_iter_time(&a, sys.compute_rate);
            let text = format!(
                "step-wise allocation (delta = {delta}); TDMA time {t}, lower bound {lb}\n"
            );
            (
                a,
                json!({ "delta": delta, "tdma_iter_time": t, "tdma_lower_bound": lb }),
                text,
            )
        }
        AllocMethod::OptimalTwo => {
            if sys.n_devices != 2 {
                return Err(CliError::Config(
                    "optimal-two needs system.n_devices = 2".into(),
                ));
            }
            let opt = optimal_two(sys.total_batch, sys.compute_rate, sys.p_tr)?;
            let text = format!(
                "two-device optimum ({:?}): b1 = {}, b2 = {}, stationary gap = {}\n",
                opt.case_tag, opt.b1, opt.b2, opt.stationary_gap
            );
            (opt.rounded(sys.total_batch), json!(opt), text)
        }
        AllocMethod::OptimalThree => {
            if sys.n_devices != 3 {
                return Err(CliError::Config(
                    "optimal-three needs system.n_devices = 3".into(),
                ));
            }
            let opt = optimal_three(
                sys.total_batch,
                sys.compute_rate,
                sys.p_tr,
                cfg.tol.unwrap_or(1e-6),
            )?;
            let text = format!(
                "three-device optimum: deltas = ({}, {}), objective = {}, KKT residual = {:e}\n",
                opt.deltas.0, opt.deltas.1, opt.objective, opt.kkt_residual
            );
            (opt.rounded(sys.total_batch), json!(opt), text)
        }
    };
    let rows: Vec<Vec<String>> = alloc
        .sizes()
        .iter()
        .enumerate()
        .map(|(i, b)| vec![(i + 1).to_string(), b.to_string()])
        .collect();
    let text = format!("{text}batches: {}\n", sizes_field(&alloc));
    Ok(Report {
        name: "allocate",
        csv: table(&["device", "batch"], &rows)?,
        summary: json!({ "method": method, "allocation": alloc, "detail": summary }),
        text,
    })
}

pub fn sweep_delta(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let sys = cfg.require_system()?;
    let protocol = cfg.require_protocol()?;
    let target = match (&cfg.convergence, cfg.epsilon) {
        (Some(_), Some(epsilon)) => Some(CompletionTarget {
            constants: cfg.require_constants()?,
            epsilon,
        }),
        _ => None,
    };
    let sweep = optimize_delta(&DeltaSearch {
        protocol,
        n_devices: sys.n_devices,
        total: sys.total_batch,
        rho: sys.compute_rate,
        p_tr: sys.p_tr,
        deltas: cfg.require_deltas()?,
        trials: cfg.trials(),
        seed: cfg.seed(),
        target,
    })?;
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.delta.to_string(),
                protocol.to_string(),
                sys.p_tr.to_string(),
                sizes_field(&r.allocation),
                r.expected_iter.mean.to_string(),
                r.expected_completion.mean.to_string(),
                r.expected_completion.std_err.to_string(),
                u8::from(i == sweep.best).to_string(),
            ]
        })
        .collect();
    let best = sweep.best_row();
    let mut text = format!("{:>6}  {:>14}  {:>10}\n", "delta", "completion", "se");
    for r in &sweep.rows {
        text.push_str(&format!(
            "{:>6}  {:>14.4}  {:>10.4}\n",
            r.delta, r.expected_completion.mean, r.expected_completion.std_err
        ));
    }
    text.push_str(&format!(
        "best delta = {} (K = {})\n",
        best.delta, sweep.iterations
    ));
    Ok(Report {
        name: "sweep-delta",
        csv: table(
            &[
                "delta",
                "protocol",
                "p_tr",
                "allocation",
                "iter_time",
                "completion",
                "se",
                "best",
            ],
            &rows,
        )?,
        summary: json!({ "best_delta": best.delta, "iterations": sweep.iterations, "rows": sweep.rows }),
        text,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let sys = cfg.require_system()?;
    let protocol = cfg.require_protocol()?;
    let (alloc, _) = cfg.require_allocation(&sys)?;
    let t = cfg.train.clone().unwrap_or_default();
    let reg = t.reg_strength.unwrap_or(1.0);
    let mut data = match &t.data_csv {
        Some(path) => Dataset::read_csv(std::path::Path::new(path), reg)?,
        None => Dataset::synthetic(
            t.samples.unwrap_or(2000),
            t.dims.unwrap_or(20),
            t.separation.unwrap_or(1.0),
            reg,
            derive_seed(cfg.seed(), 0xda7a),
        )?,
    };
    data.partition_iid(sys.n_devices, derive_seed(cfg.seed(), 0x5a4d))?;
    let (optimum, f_star) = trainer::reference_optimum(&data, 1e-10)?;
    let direction = vec![-1.0; data.dims()];
    let initial = match t.initial_gap {
        Some(g) => trainer::point_at_gap(&data, &optimum, f_star, &direction, g)?,
        None => ModelState::zeros(data.dims()),
    };
    let gap0 = trainer::global_loss(&initial, &data)? - f_star;

    // Step schedule and lambda from the config; L, M and the initial gap
    // are measured on the data.
    let c = cfg.convergence.clone().unwrap_or_default();
    let miss = |f: &str| CliError::Config(format!("missing field `convergence.{f}`"));
    let constants = wfl_core::convergence::ConvergenceConstants {
        smoothness: data.smoothness(),
        strong_convexity: data.strong_convexity(),
        grad_bound: c.grad_bound.ok_or_else(|| miss("grad_bound"))?,
        step_scale: c.step_scale.ok_or_else(|| miss("step_scale"))?,
        step_shift: c.step_shift.ok_or_else(|| miss("step_shift"))?,
        initial_gap: gap0,
    };
    constants.validate()?;
    let nu = compute_nu(&constants, sys.n_devices, sys.total_batch)?;
    let iterations = match (cfg.iterations, cfg.epsilon) {
        (Some(k), _) => k,
        (None, Some(eps)) => required_iterations(eps, nu, constants.step_shift)?,
        (None, None) => {
            return Err(CliError::Config(
                "missing field `iterations` or `epsilon`".into(),
            ))
        }
    };
    let seeds = t.seeds.unwrap_or(1).max(1);

    let mut rows = Vec::new();
    let mut mean = vec![(0.0f64, 0.0f64, 0.0f64); iterations as usize];
    let mut max_grad = 0.0f64;
    let mut bound = Vec::new();
    for s in 0..seeds {
        let seed = cfg.seed().wrapping_add(s);
        let traj = trainer::train_federated(
            &data,
            &TrainSetup {
                config: &sys,
                allocation: &alloc,
                constants: &constants,
                protocol,
                iterations,
                seed,
                initial: initial.clone(),
                f_star,
            },
        )?;
        max_grad = max_grad.max(traj.max_grad_norm);
        for (i, m) in mean.iter_mut().enumerate() {
            rows.push(vec![
                seed.to_string(),
                traj.iterations[i].to_string(),
                traj.slots[i].to_string(),
                traj.loss[i].to_string(),
                traj.gap[i].to_string(),
                traj.bound[i].to_string(),
            ]);
            m.0 += traj.slots[i] as f64 / seeds as f64;
            m.1 += traj.loss[i] / seeds as f64;
            m.2 += traj.gap[i] / seeds as f64;
        }
        bound = traj.bound;
    }
    for (i, m) in mean.iter().enumerate().filter(|_| seeds > 1) {
        rows.push(vec![
            "mean".into(),
            (i + 1).to_string(),
            m.0.to_string(),
            m.1.to_string(),
            m.2.to_string(),
            bound[i].to_string(),
        ]);
    }
    let last = mean.last().copied().unwrap_or_default();
    let text = format!(
        "{protocol} training: {iterations} iterations x {seeds} seeds, initial gap {gap0}, nu {nu}\n\
         final seed-mean gap {} (bound {}), mean slots {}\n\
         max per-sample gradient norm {max_grad} (assumed lambda {})\n",
        last.2,
        bound.last().copied().unwrap_or_default(),
        last.0,
        constants.grad_bound
    );
    Ok(Report {
        name: "train",
        csv: table(
            &["seed", "iteration", "slots", "loss", "gap", "bound"],
            &rows,
        )?,
        summary: json!({
            "iterations": iterations,
            "seeds": seeds,
            "f_star": f_star,
            "initial_gap": gap0,
            "nu": nu,
            "smoothness": constants.smoothness,
            "strong_convexity": constants.strong_convexity,
            "final_mean_gap": last.2,
            "max_grad_norm": max_grad,
        }),
        text,
    })
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let sys = cfg.require_system()?;
    let protocol = cfg.require_protocol()?;
    let (alloc, _) = cfg.require_allocation(&sys)?;
    let trace = match protocol {
        Protocol::Tdma => simulate_iter_tdma(&alloc, sys.compute_rate),
        Protocol::Ra => simulate_iter_ra(
            &alloc,
            sys.compute_rate,
            sys.p_tr,
            &mut make_rng(cfg.seed()),
            DEFAULT_SLOT_CAP,
        )?,
    };
    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    let mut text = format!(
        "{protocol} iteration finished at slot {}\n",
        trace.iter_time
    );
    let mut completion = None;
    if let Some(k) = cfg.iterations {
        let est = simulate_completion_mc(
            protocol,
            &alloc,
            sys.compute_rate,
            sys.p_tr,
            k,
            cfg.trials(),
            derive_seed(cfg.seed(), k),
        )?;
        text.push_str(&format!(
            "completion over {k} iterations: {} +- {} (SE, {} trials)\n",
            est.mean, est.std_err, est.trials
        ));
        completion = Some(est);
    }
    Ok(Report {
        name: "simulate",
        csv,
        summary: json!({
            "protocol": protocol,
            "allocation": alloc,
            "iter_time": trace.iter_time,
            "completion": completion,
        }),
        text,
    })
}
