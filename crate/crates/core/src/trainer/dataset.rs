use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::make_rng;
use crate::scalar::Scalar;
use crate::system::BatchAllocation;

/// Labelled samples for regularized logistic regression, split into
/// device-local shards.
///
/// Features are stored row-major. Labels are `-1` or `+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f64> {
    features: Vec<T>,
    dims: usize,
    labels: Vec<T>,
    partition: Vec<Vec<usize>>,
    reg_strength: T,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset held by a single device.
    pub fn new(rows: Vec<Vec<T>>, labels: Vec<T>, reg_strength: T) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("features", "dataset has no samples"));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let dims = rows[0].len();
        if dims == 0 {
            return Err(Error::invalid("features", "zero feature columns"));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != dims) {
            return Err(Error::DimensionMismatch(format!(
                "row {bad} has {} columns, expected {dims}",
                rows[bad].len()
            )));
        }
        if labels.iter().any(|&y| y != T::one() && y != -T::one()) {
            return Err(Error::invalid("labels", "labels must be -1 or +1"));
        }
        if !(reg_strength > T::zero()) {
            return Err(Error::invalid("reg_strength", "must be positive"));
        }
        let n = rows.len();
        Ok(Self {
            features: rows.into_iter().flatten().collect(),
            dims,
            labels,
            partition: vec![(0..n).collect()],
            reg_strength,
        })
    }

    /// Two Gaussian clusters centred at `+-separation * e_1` with unit
    /// covariance, labels alternating, rescaled so the largest feature
    /// norm is 1.
    pub fn synthetic(
        samples: usize,
        dims: usize,
        separation: T,
        reg_strength: T,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = make_rng(seed);
        let mut rows = Vec::with_capacity(samples);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let y = if i % 2 == 0 { T::one() } else { -T::one() };
            let mut row: Vec<T> = (0..dims)
                .map(|_| T::lit(StandardNormal.sample(&mut rng)))
                .collect();
            if let Some(first) = row.first_mut() {
                *first = *first + y * separation;
            }
            rows.push(row);
            labels.push(y);
        }
        let max_norm = rows.iter().map(|r| norm(r)).fold(T::zero(), T::max);
        if max_norm > T::zero() {
            for row in &mut rows {
                row.iter_mut().for_each(|v| *v = *v / max_norm);
            }
        }
        Self::new(rows, labels, reg_strength)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn reg_strength(&self) -> T {
        self.reg_strength
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn label(&self, i: usize) -> T {
        self.labels[i]
    }

    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn shard(&self, device: usize) -> &[usize] {
        &self.partition[device]
    }

    pub fn n_devices(&self) -> usize {
        self.partition.len()
    }

    /// Replaces the partition after checking it covers every sample once.
    pub fn set_partition(&mut self, partition: Vec<Vec<usize>>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for &i in partition.iter().flatten() {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(
                    "partition",
                    format!("index {i} out of range or repeated"),
                ));
            }
        }
        if partition.is_empty() || seen.contains(&false) {
            return Err(Error::invalid(
                "partition",
                "shards must cover every sample",
            ));
        }
        self.partition = partition;
        Ok(())
    }

    /// Shuffles the samples and deals them into `n` shards whose sizes
    /// differ by at most one.
    pub fn partition_iid(&mut self, n: usize, seed: u64) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(
                "n_devices",
                format!("cannot split {} samples into {n} shards", self.len()),
            ));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut make_rng(seed));
        let base = self.len() / n;
        let extra = self.len() % n;
        let mut shards = Vec::with_capacity(n);
        let mut rest = order.as_slice();
        for d in 0..n {
            let (head, tail) = rest.split_at(base + usize::from(d < extra));
            shards.push(head.to_vec());
            rest = tail;
        }
        self.set_partition(shards)
    }

    /// Every device must hold at least as many samples as its batch.
    pub fn check_allocation(&self, alloc: &BatchAllocation) -> Result<()> {
        if alloc.len() != self.n_devices() {
            return Err(Error::DimensionMismatch(format!(
                "{} batches for {} shards",
                alloc.len(),
                self.n_devices()
            )));
        }
        for (d, (&b, shard)) in alloc.sizes().iter().zip(&self.partition).enumerate() {
            if b as usize > shard.len() {
                return Err(Error::invalid(
                    "total_batch",
                    format!(
                        "device {} batch {b} exceeds its shard of {}",
                        d + 1,
                        shard.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Smoothness bound `max ||x||^2 / 4 + reg` of the regularized logistic loss.
    pub fn smoothness(&self) -> T {
        let max_sq = (0..self.len())
            .map(|i| dot(self.row(i), self.row(i)))
            .fold(T::zero(), T::max);
        max_sq / T::lit(4.0) + self.reg_strength
    }

    /// Strong convexity modulus, equal to the ridge strength.
    pub fn strong_convexity(&self) -> T {
        self.reg_strength
    }

    /// Writes `x1,...,xd,label` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.dims).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the [`write_csv`](Self::write_csv) layout: a header row, then
    /// feature columns with the label last.
    pub fn read_csv(path: &Path, reg_strength: T) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut vals = rec.iter().map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::invalid("features", format!("record {}: {e}", line + 1)))
            });
            let mut row: Vec<T> = vals.by_ref().collect::<Result<_>>()?;
            let label = row.pop().ok_or_else(|| {
                Error::invalid("features", format!("record {} is empty", line + 1))
            })?;
            rows.push(row);
            labels.push(label);
        }
        Self::new(rows, labels, reg_strength)
    }

    /// Draws a batch of `size` distinct shard positions.
    pub(crate) fn sample_batch<R: Rng + ?Sized>(
        &self,
        device: usize,
        size: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let shard = &self.partition[device];
        rand::seq::index::sample(rng, shard.len(), size)
            .into_iter()
            .map(|i| shard[i])
            .collect()
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
