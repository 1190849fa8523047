//! JSON experiment configuration.
//!
//! Every field is optional at parse time; commands ask for what they need
//! through the `require_*` helpers so a missing value is reported by its
//! dotted path (`convergence.step_scale`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use wfl_core::allocation::stepwise_allocation;
use wfl_core::convergence::ConvergenceConstants;
use wfl_core::{BatchAllocation, Protocol, SystemConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_devices: Option<usize>,
    pub total_batch: Option<u64>,
    pub compute_rate: Option<u64>,
    pub p_tr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    pub smoothness: Option<f64>,
    pub strong_convexity: Option<f64>,
    pub grad_bound: Option<f64>,
    pub step_scale: Option<f64>,
    pub step_shift: Option<f64>,
    pub initial_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocMethod {
    Stepwise,
    OptimalTwo,
    OptimalThree,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub samples: Option<usize>,
    pub dims: Option<usize>,
    pub separation: Option<f64>,
    pub reg_strength: Option<f64>,
    /// Optimality gap of the starting point.
    pub initial_gap: Option<f64>,
    /// Number of seeds, starting at the run seed.
    pub seeds: Option<u64>,
    /// Read samples from this CSV instead of generating them.
    pub data_csv: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSection,
    pub convergence: Option<ConvergenceSection>,
    pub protocol: Option<Protocol>,
    /// Explicit ascending batch sizes; takes precedence over `delta`.
    pub allocation: Option<Vec<u64>>,
    pub delta: Option<u64>,
    pub deltas: Option<Vec<u64>>,
    pub method: Option<AllocMethod>,
    pub epsilon: Option<f64>,
    pub epsilons: Option<Vec<f64>>,
    pub iterations: Option<u64>,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub train: Option<TrainSection>,
}

fn missing(field: &str) -> CliError {
    CliError::Config(format!("missing field `{field}`"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        let (n, b, rho, p) = match name {
            "n20-p0.05" => (20, 10_000, 10, 0.05),
            "n20-p0.2" => (20, 10_000, 10, 0.2),
            "two-device" => (2, 500, 5, 0.2),
            other => {
                return Err(CliError::Config(format!(
                    "unknown preset `{other}` (expected n20-p0.05, n20-p0.2 or two-device)"
                )))
            }
        };
        let deltas = if n == 2 {
            vec![0, 5, 7, 10, 15]
        } else {
            vec![0, 10, 20, 30, 40, 50]
        };
        Ok(Self {
            system: SystemSection {
                n_devices: Some(n),
                total_batch: Some(b),
                compute_rate: Some(rho),
                p_tr: Some(p),
            },
            convergence: Some(ConvergenceSection {
                smoothness: Some(1.0),
                strong_convexity: Some(1.0),
                grad_bound: Some(0.1),
                step_scale: Some(1.5),
                step_shift: Some(1.0),
                initial_gap: Some(1.0),
            }),
            protocol: Some(Protocol::Ra),
            deltas: Some(deltas),
            epsilon: Some(0.1),
            epsilons: Some(vec![0.1, 0.05]),
            trials: Some(100_000),
            seed: Some(0),
            ..Self::default()
        })
    }

    pub fn require_system(&self) -> Result<SystemConfig<f64>, CliError> {
        let s = &self.system;
        let cfg = SystemConfig {
            n_devices: s.n_devices.ok_or_else(|| missing("system.n_devices"))?,
            total_batch: s.total_batch.ok_or_else(|| missing("system.total_batch"))?,
            compute_rate: s
                .compute_rate
                .ok_or_else(|| missing("system.compute_rate"))?,
            p_tr: s.p_tr.ok_or_else(|| missing("system.p_tr"))?,
        };
        wfl_core::validate_config(&cfg)?;
        Ok(cfg)
    }

    pub fn require_constants(&self) -> Result<ConvergenceConstants<f64>, CliError> {
        let c = self
            .convergence
            .as_ref()
            .ok_or_else(|| missing("convergence"))?;
        let get =
            |v: Option<f64>, name: &str| v.ok_or_else(|| missing(&format!("convergence.{name}")));
        let consts = ConvergenceConstants {
            smoothness: get(c.smoothness, "smoothness")?,
            strong_convexity: get(c.strong_convexity, "strong_convexity")?,
            grad_bound: get(c.grad_bound, "grad_bound")?,
            step_scale: get(c.step_scale, "step_scale")?,
            step_shift: get(c.step_shift, "step_shift")?,
            initial_gap: get(c.initial_gap, "initial_gap")?,
        };
        consts.validate()?;
        Ok(consts)
    }

    pub fn require_protocol(&self) -> Result<Protocol, CliError> {
        self.protocol.ok_or_else(|| missing("protocol"))
    }

    pub fn require_deltas(&self) -> Result<Vec<u64>, CliError> {
        self.deltas.clone().ok_or_else(|| missing("deltas"))
    }

    pub fn require_epsilons(&self) -> Result<Vec<f64>, CliError> {
        match (&self.epsilons, self.epsilon) {
            (Some(list), _) if !list.is_empty() => Ok(list.clone()),
            (_, Some(e)) => Ok(vec![e]),
            _ => Err(missing("epsilons")),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn trials(&self) -> u64 {
        self.trials.unwrap_or(100_000)
    }

    /// Explicit allocation, or the step-wise one for `delta`.
    pub fn require_allocation(
        &self,
        cfg: &SystemConfig<f64>,
    ) -> Result<(BatchAllocation, Option<u64>), CliError> {
        if let Some(sizes) = &self.allocation {
            return Ok((BatchAllocation::for_config(sizes.clone(), cfg)?, None));
        }
        let delta = self.delta.ok_or_else(|| missing("allocation` or `delta"))?;
        Ok((
            stepwise_allocation(cfg.n_devices, cfg.total_batch, delta)?,
            Some(delta),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["n20-p0.05", "n20-p0.2", "two-device"] {
            let c = ExperimentConfig::preset(name).unwrap();
            c.require_system().unwrap();
            c.require_constants().unwrap();
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn missing_field_is_named() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"system":{"n_devices":2,"total_batch":10,"compute_rate":1,"p_tr":0.2},
                "convergence":{"smoothness":1,"strong_convexity":1,"grad_bound":0.1,"step_shift":1,"initial_gap":1}}"#,
        )
        .unwrap();
        let err = c.require_constants().unwrap_err().to_string();
        assert!(err.contains("convergence.step_scale"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sytem":{}}"#).is_err());
    }
}
