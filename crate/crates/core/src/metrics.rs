//! Per-round records and the diagnostics that tie runs back to the
//! convergence analysis: global gradient norm, pairwise update
//! heterogeneity, and cumulative substitution error.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::StrategyKind;
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{full_loss_and_grad, local_update, LocalTrainConfig, ModelSpec};
use crate::rng::{Purpose, RngStream};
use crate::vector::{mean, sq_norm, ParamVector};

/// One row of the per-round CSV. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub strategy: StrategyKind,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub e_sq: f64,
    /// Empty on rounds skipped by the gradient cadence.
    pub grad_sq: Option<f64>,
    pub comp_count_delta: u64,
    pub n_dropped: usize,
    pub fallback_count: usize,
}

pub const ROUND_COLUMNS: [&str; 9] = [
    "t",
    "strategy",
    "test_accuracy",
    "test_loss",
    "e_sq",
    "grad_sq",
    "comp_count_delta",
    "n_dropped",
    "fallback_count",
];

pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(ROUND_COLUMNS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(ROUND_COLUMNS) {
        return Err(Error::InvalidArgument(format!(
            "{} does not have the round-record columns",
            path.display()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// `|| (1/K) sum_k grad F^k(w) ||^2` with full-batch client gradients.
pub fn full_gradient_norm(spec: &ModelSpec, w: &ParamVector, clients: &[ClientDataset]) -> Result<f64> {
    let grads = clients
        .iter()
        .map(|c| full_loss_and_grad(spec, w, c).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    sq_norm(&mean(grads.iter())?)
}

/// Mean full-batch training loss across clients, i.e. the global objective.
pub fn global_loss(spec: &ModelSpec, w: &ParamVector, clients: &[ClientDataset]) -> Result<f64> {
    let mut total = 0.0;
    for c in clients {
        total += full_loss_and_grad(spec, w, c)?.0;
    }
    Ok(total / clients.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityEstimate {
    pub n_clients: usize,
    /// Row-major K x K averages of `||Delta^i(w) - Delta^j(w)||^2`.
    pub sigma2_pair: Vec<f64>,
    pub sigma2_p_hat: f64,
    /// Maximum over ground-truth friend pairs; `None` without ground truth
    /// or when no client has a friend.
    pub sigma2_f_hat: Option<f64>,
}

impl HeterogeneityEstimate {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma2_pair[i * self.n_clients + j]
    }

    /// Ratio `sigma2_F / sigma2_P`, when both are defined and positive.
    pub fn friend_ratio(&self) -> Option<f64> {
        self.sigma2_f_hat
            .filter(|_| self.sigma2_p_hat > 0.0)
            .map(|f| f / self.sigma2_p_hat)
    }
}

/// Averages `||Delta^i(w) - Delta^j(w)||^2` over probe points and
/// repeats, each repeat drawing fresh mini-batch streams.
pub fn estimate_heterogeneity(
    spec: &ModelSpec,
    probe_points: &[ParamVector],
    clients: &[ClientDataset],
    cfg: &LocalTrainConfig,
    n_repeats: usize,
    seed: u64,
    friends: Option<&[BTreeSet<usize>]>,
) -> Result<HeterogeneityEstimate> {
    if probe_points.is_empty() {
        return Err(Error::InvalidArgument("no probe points".into()));
    }
    if n_repeats == 0 {
        return Err(Error::InvalidArgument("n_repeats must be at least 1".into()));
    }
    let k = clients.len();
    let mut acc = vec![0.0; k * k];
    let mut draw = 0u64;
    for w in probe_points {
        for _ in 0..n_repeats {
            let updates = clients
                .iter()
                .enumerate()
                .map(|(c, data)| {
                    let stream = RngStream::new(seed, Purpose::Heterogeneity, c as u64, draw);
                    local_update(spec, w, data, cfg, stream)
                })
                .collect::<Result<Vec<_>>>()?;
            draw += 1;
            for i in 0..k {
                for j in i + 1..k {
                    let d = sq_norm(&updates[i].sub(&updates[j])?)?;
                    acc[i * k + j] += d;
                    acc[j * k + i] += d;
                }
            }
        }
    }
    let n = draw as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    let sigma2_p_hat = acc.iter().cloned().fold(0.0, f64::max);
    let sigma2_f_hat = friends.and_then(|f| {
        let mut best: Option<f64> = None;
        for (i, set) in f.iter().enumerate() {
            for &j in set {
                let v = acc[i * k + j];
                best = Some(best.map_or(v, |b: f64| b.max(v)));
            }
        }
        best
    });
    Ok(HeterogeneityEstimate {
        n_clients: k,
        sigma2_pair: acc,
        sigma2_p_hat,
        sigma2_f_hat,
    })
}

/// Sum of `||e_t||^2` over the records.
pub fn cumulative_substitution(records: &[RoundRecord]) -> f64 {
    records.iter().map(|r| r.e_sq).sum()
}

/// Running minimum of the gradient norm, prefix by prefix, over the
/// rounds where it was measured.
pub fn running_min_grad_sq(records: &[RoundRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| r.grad_sq)
        .scan(f64::INFINITY, |m, g| {
            *m = m.min(g);
            Some(*m)
        })
        .collect()
}
