//! System parameters and per-device batch allocations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Devices, total batch, compute rate and RA transmission probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig<T = f64> {
    pub n_devices: usize,
    /// Total samples per iteration summed over devices.
    pub total_batch: u64,
    /// Samples a device processes per slot.
    pub compute_rate: u64,
    pub p_tr: T,
}

impl<T: Scalar> SystemConfig<T> {
    pub fn new(n_devices: usize, total_batch: u64, compute_rate: u64, p_tr: T) -> Result<Self> {
        let cfg = Self {
            n_devices,
            total_batch,
            compute_rate,
            p_tr,
        };
        validate_config(&cfg)?;
        Ok(cfg)
    }
}

/// Checks every [`SystemConfig`] invariant, reporting the first violation.
///
/// With two or more devices `p_tr = 1` is rejected: simultaneously ready
/// devices would collide in every slot.
pub fn validate_config<T: Scalar>(cfg: &SystemConfig<T>) -> Result<()> {
    if cfg.n_devices == 0 {
        return Err(Error::invalid("n_devices", "must be at least 1"));
    }
    if cfg.total_batch == 0 {
        return Err(Error::invalid("total_batch", "must be at least 1"));
    }
    if cfg.compute_rate == 0 {
        return Err(Error::invalid("compute_rate", "must be at least 1"));
    }
    let p = cfg.p_tr;
    if !(p > T::zero() && p <= T::one()) {
        return Err(Error::invalid("p_tr", format!("{p} not in (0, 1]")));
    }
    if cfg.n_devices >= 2 && p == T::one() {
        return Err(Error::invalid(
            "p_tr",
            "must be < 1 with two or more devices (collisions never resolve)",
        ));
    }
    Ok(())
}

/// Uplink multiple-access scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Centrally scheduled, one device per slot.
    Tdma,
    /// Slotted random access with transmission probability `p_tr`.
    Ra,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Tdma => "tdma",
            Protocol::Ra => "ra",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tdma" => Ok(Protocol::Tdma),
            "ra" | "random-access" => Ok(Protocol::Ra),
            other => Err(Error::invalid(
                "protocol",
                format!("unknown protocol {other:?}"),
            )),
        }
    }
}

/// Per-device batch sizes in non-decreasing order.
///
/// Device `n` (0-based here, 1-based in reports) always holds the `n`-th
/// smallest batch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct BatchAllocation {
    sizes: Vec<u64>,
}

impl BatchAllocation {
    pub fn new(sizes: Vec<u64>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid(
                "sizes",
                "allocation needs at least one device",
            ));
        }
        if let Some(i) = sizes.windows(2).position(|w| w[0] > w[1]) {
            return Err(Error::invalid(
                "sizes",
                format!(
                    "not ascending at device {} ({} > {})",
                    i + 1,
                    sizes[i],
                    sizes[i + 1]
                ),
            ));
        }
        Ok(Self { sizes })
    }

    /// Sorts an arbitrary size multiset into the canonical ascending form.
    pub fn from_unsorted(mut sizes: Vec<u64>) -> Result<Self> {
        sizes.sort_unstable();
        Self::new(sizes)
    }

    /// Like [`BatchAllocation::new`] but also checks the sum against the config.
    pub fn for_config<T: Scalar>(sizes: Vec<u64>, cfg: &SystemConfig<T>) -> Result<Self> {
        let alloc = Self::new(sizes)?;
        alloc.check_against(cfg)?;
        Ok(alloc)
    }

    pub fn check_against<T: Scalar>(&self, cfg: &SystemConfig<T>) -> Result<()> {
        if self.len() != cfg.n_devices {
            return Err(Error::invalid(
                "sizes",
                format!("{} entries for {} devices", self.len(), cfg.n_devices),
            ));
        }
        if self.total() != cfg.total_batch {
            return Err(Error::invalid(
                "sizes",
                format!(
                    "sum {} differs from total_batch {}",
                    self.total(),
                    cfg.total_batch
                ),
            ));
        }
        Ok(())
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.sizes.iter().sum()
    }

    /// Per-device compute durations in slots.
    pub fn compute_slots(&self, rho: u64) -> Vec<u64> {
        self.sizes
            .iter()
            .map(|&b| crate::tdma::compute_time(b, rho))
            .collect()
    }
}

impl TryFrom<Vec<u64>> for BatchAllocation {
    type Error = Error;

    fn try_from(sizes: Vec<u64>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<BatchAllocation> for Vec<u64> {
    fn from(a: BatchAllocation) -> Self {
        a.sizes
    }
}
