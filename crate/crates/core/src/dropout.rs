//! Per-round participation sets and diagnostics for the co-presence and
//! friend-presence conditions the friend-discovery analysis relies on.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Rounds ignored before [`check_common_rounds`] starts enforcing `N >= beta * t`.
pub const COMMON_ROUNDS_WARMUP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    IidRandom,
    Periodic,
    AdversarialRotating,
    FromFile,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::IidRandom => "iid_random",
            GeneratorKind::Periodic => "periodic",
            GeneratorKind::AdversarialRotating => "adversarial_rotating",
            GeneratorKind::FromFile => "from_file",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutSchedule {
    pub n_clients: usize,
    pub alpha: f64,
    pub kind: GeneratorKind,
    /// `participation[t]` is the sorted set of clients present in round t.
    pub participation: Vec<Vec<usize>>,
}

impl DropoutSchedule {
    pub fn rounds(&self) -> usize {
        self.participation.len()
    }

    pub fn present(&self, t: usize) -> &[usize] {
        &self.participation[t]
    }

    pub fn dropped(&self, t: usize) -> Vec<usize> {
        let present = &self.participation[t];
        (0..self.n_clients)
            .filter(|k| present.binary_search(k).is_err())
            .collect()
    }

    /// Number of client pairs co-present over the whole schedule, i.e.
    /// the pairwise score computations needed without candidate elimination.
    pub fn total_pairs(&self) -> u64 {
        self.participation
            .iter()
            .map(|s| (s.len() * s.len().saturating_sub(1) / 2) as u64)
            .sum()
    }

    /// Checks every round against the client range and the dropout cap.
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let k = self.n_clients;
        for (t, s) in self.participation.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidSchedule(format!("round {t} has no participants")));
            }
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidSchedule(format!(
                    "round {t} is not a sorted set of distinct ids"
                )));
            }
            if let Some(&bad) = s.iter().find(|&&c| c >= k) {
                return Err(Error::InvalidSchedule(format!(
                    "round {t} names client {bad}, only {k} clients exist"
                )));
            }
            let ratio = (k - s.len()) as f64 / k as f64;
            if ratio > self.alpha + 1e-12 {
                return Err(Error::InvalidSchedule(format!(
                    "round {t} drops {} of {k} clients, above alpha = {}",
                    k - s.len(),
                    self.alpha
                )));
            }
        }
        Ok(())
    }

    /// Loads the `from_file` format: a JSON array of per-round client-id arrays.
    pub fn load_json(path: &Path, n_clients: usize, alpha: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rounds: Vec<Vec<usize>> = serde_json::from_str(&text)?;
        let participation = rounds
            .into_iter()
            .map(|r| {
                let set: BTreeSet<usize> = r.iter().copied().collect();
                if set.len() != r.len() {
                    return Err(Error::InvalidSchedule("duplicate client id in a round".into()));
                }
                Ok(set.into_iter().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        if participation.is_empty() {
            return Err(Error::InvalidSchedule("schedule file has no rounds".into()));
        }
        let s = DropoutSchedule {
            n_clients,
            alpha,
            kind: GeneratorKind::FromFile,
            participation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.participation)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && (0.0..1.0).contains(&alpha)) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Number of clients dropped per round: floor(alpha * K), capped at K - 1.
pub fn dropped_per_round(n_clients: usize, alpha: f64) -> usize {
    // tolerance absorbs products such as 0.7 * 20 landing just under 14
    let m = (alpha * n_clients as f64 + 1e-9).floor() as usize;
    m.min(n_clients.saturating_sub(1))
}

fn complement(n_clients: usize, dropped: &BTreeSet<usize>) -> Vec<usize> {
    (0..n_clients).filter(|k| !dropped.contains(k)).collect()
}

/// Generates `rounds` participation sets for `n_clients` clients.
///
/// * `IidRandom`: a uniformly random subset of size `floor(alpha K)` drops each round.
/// * `Periodic`: client k drops in rounds with `(t - k) mod K < m`, a sliding window.
/// * `AdversarialRotating`: clients are cut into consecutive blocks of `m`;
///   each epoch visits every block in turn and the next epoch shifts the
///   blocks by one, giving `{0,1}, {2,3}, {1,2}, {3,0}, ...` for K = 4, m = 2.
pub fn generate_schedule(
    kind: GeneratorKind,
    n_clients: usize,
    rounds: usize,
    alpha: f64,
    rng: RngStream,
) -> Result<DropoutSchedule> {
    check_alpha(alpha)?;
    if n_clients == 0 || rounds == 0 {
        return Err(Error::InvalidArgument("need at least one client and one round".into()));
    }
    let k = n_clients;
    let m = dropped_per_round(k, alpha);
    let mut participation = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let dropped: BTreeSet<usize> = match kind {
            GeneratorKind::IidRandom => {
                let mut r = rng.for_round(t as u64).rng();
                index::sample(&mut r, k, m).into_iter().collect()
            }
            GeneratorKind::Periodic => (0..m).map(|j| (t + k - j % k) % k).collect(),
            GeneratorKind::AdversarialRotating => {
                if m == 0 {
                    BTreeSet::new()
                } else {
                    let blocks = k.div_ceil(m);
                    let epoch = t / blocks;
                    let block = t % blocks;
                    (0..m).map(|j| (epoch + block * m + j) % k).collect()
                }
            }
            GeneratorKind::FromFile => {
                return Err(Error::InvalidArgument(
                    "from_file schedules are loaded with DropoutSchedule::load_json".into(),
                ))
            }
        };
        participation.push(complement(k, &dropped));
    }
    let s = DropoutSchedule {
        n_clients,
        alpha,
        kind,
        participation,
    };
    s.validate()?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonRoundViolation {
    pub i: usize,
    pub j: usize,
    /// First round count (1-based) past warm-up at which the pair had never co-occurred.
    pub first_round: usize,
    /// How many post-warm-up rounds the pair spent at zero co-presence.
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonRoundsReport {
    /// Largest beta with `N_t >= beta * t` for all pairs and all `t >= warm-up`.
    pub beta_hat: f64,
    /// Mean over pairs of `N_T / T`, the empirical co-presence rate.
    pub mean_copresence: f64,
    pub violations: Vec<CommonRoundViolation>,
}

/// Scans the schedule for the co-presence condition `N_t^{i,j} >= beta t`.
pub fn check_common_rounds(s: &DropoutSchedule) -> CommonRoundsReport {
    let k = s.n_clients;
    let rounds = s.rounds();
    let warmup = COMMON_ROUNDS_WARMUP.min(rounds);
    let mut counts = vec![0usize; k * k];
    let mut beta_hat = f64::INFINITY;
    let mut zero_runs: Vec<Option<(usize, usize)>> = vec![None; k * k];
    let mut present = vec![false; k];
    for (t, set) in s.participation.iter().enumerate() {
        present.iter_mut().for_each(|p| *p = false);
        for &c in set {
            present[c] = true;
        }
        let elapsed = t + 1;
        for i in 0..k {
            for j in i + 1..k {
                let idx = i * k + j;
                if present[i] && present[j] {
                    counts[idx] += 1;
                }
                if elapsed >= warmup.max(1) {
                    beta_hat = beta_hat.min(counts[idx] as f64 / elapsed as f64);
                    if counts[idx] == 0 && elapsed > warmup {
                        let entry = zero_runs[idx].get_or_insert((elapsed, 0));
                        entry.1 += 1;
                    }
                }
            }
        }
    }
    let mut violations = Vec::new();
    let mut sum_rate = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            let idx = i * k + j;
            sum_rate += counts[idx] as f64 / rounds as f64;
            pairs += 1;
            if let Some((first_round, n)) = zero_runs[idx] {
                violations.push(CommonRoundViolation {
                    i,
                    j,
                    first_round,
                    rounds: n,
                });
            }
        }
    }
    if pairs == 0 {
        // a single client has no pairs; the condition holds vacuously
        beta_hat = 1.0;
    }
    CommonRoundsReport {
        beta_hat,
        mean_copresence: if pairs == 0 { 1.0 } else { sum_rate / pairs as f64 },
        violations,
    }
}

/// Returns every (round, client) where a dropped client has no friend present.
pub fn check_friend_presence(s: &DropoutSchedule, friends: &[BTreeSet<usize>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, set) in s.participation.iter().enumerate() {
        for k in s.dropped(t) {
            let has_friend = friends
                .get(k)
                .is_some_and(|f| f.iter().any(|j| set.binary_search(j).is_ok()));
            if !has_friend {
                out.push((t, k));
            }
        }
    }
    out
}
