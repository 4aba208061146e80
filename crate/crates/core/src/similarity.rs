//! Friend discovery: pairwise similarity of uploaded updates, running-mean
//! scores per client pair, substitute selection for dropped clients, and
//! the threshold race that shrinks each client's candidate set.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{norm, ParamVector};

/// Similarity function applied to a pair of updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `(cos(a, b) + 1) / 2`, in [0, 1].
    #[default]
    Cosine,
    /// `-||a - b||`. Accepted for experimentation only.
    NegDistance,
}

/// Normalised cosine similarity `(<a,b> / (|a||b|) + 1) / 2`.
pub fn cosine_score(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let dot = a.dot(b)?;
    let na = norm(a)?;
    let nb = norm(b)?;
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok(0.5 * (cos + 1.0))
}

pub fn neg_distance_score(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    norm(&a.sub(b)?).map(|d| -d)
}

impl ScoreKind {
    pub fn score(self, a: &ParamVector, b: &ParamVector) -> Result<f64> {
        match self {
            ScoreKind::Cosine => cosine_score(a, b),
            ScoreKind::NegDistance => neg_distance_score(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliminationConfig {
    pub enabled: bool,
    /// Failure probability target.
    pub p: f64,
    /// Assumed lower bound on the pairwise co-presence rate.
    pub beta: f64,
    /// Largest expected-score spread among one client's friends.
    pub delta_f: f64,
    /// Largest friend-set size.
    pub b_max: usize,
    /// Planned number of rounds.
    pub rounds: usize,
    #[serde(default = "one")]
    pub theta_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for EliminationConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p: 0.05,
            beta: 0.5,
            delta_f: 0.0,
            b_max: 1,
            rounds: 1,
            theta_scale: 1.0,
        }
    }
}

impl EliminationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let field = |f: &str| format!("similarity.elimination.{f}");
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::config(field("p"), "must lie in (0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(field("beta"), "must lie in (0, 1]"));
        }
        if !(self.delta_f.is_finite() && self.delta_f >= 0.0) {
            return Err(Error::config(field("delta_f"), "must be finite and non-negative"));
        }
        if self.b_max == 0 {
            return Err(Error::config(field("b_max"), "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config(field("rounds"), "must be at least 1"));
        }
        if !(self.theta_scale.is_finite() && self.theta_scale > 0.0) {
            return Err(Error::config(field("theta_scale"), "must be finite and positive"));
        }
        Ok(())
    }

    /// Elimination threshold after `t >= 1` rounds:
    /// `scale * (sqrt((2 ln(2 K^2 T B_max) - 2 ln p) / (beta t)) + delta_f)`.
    pub fn theta(&self, n_clients: usize, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::InvalidArgument("threshold undefined at t = 0".into()));
        }
        let k = n_clients as f64;
        let log_term = 2.0 * (2.0 * k * k * self.rounds as f64 * self.b_max as f64).ln()
            - 2.0 * self.p.ln();
        let radius = (log_term / (self.beta * t as f64)).sqrt();
        Ok(self.theta_scale * (radius + self.delta_f))
    }
}

/// Result of substitute selection for one dropped client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Friend(usize),
    /// No scored candidate is present; the caller falls back to the mean.
    NaiveFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityState {
    n_clients: usize,
    score_kind: ScoreKind,
    elimination: bool,
    /// Running-mean scores, row-major K x K; meaningful only where `counts > 0`.
    scores: Vec<f64>,
    counts: Vec<u64>,
    candidates: Vec<BTreeSet<usize>>,
    comp_count: u64,
}

impl SimilarityState {
    pub fn new(n_clients: usize, score_kind: ScoreKind, elimination: bool) -> Self {
        let candidates = (0..n_clients)
            .map(|k| (0..n_clients).filter(|&j| j != k).collect())
            .collect();
        Self {
            n_clients,
            score_kind,
            elimination,
            scores: vec![0.0; n_clients * n_clients],
            counts: vec![0; n_clients * n_clients],
            candidates,
            comp_count: 0,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    /// Running mean `R^{i,j}`, or `None` if the pair has never been scored.
    pub fn score(&self, i: usize, j: usize) -> Option<f64> {
        let idx = i * self.n_clients + j;
        (self.counts[idx] > 0).then_some(self.scores[idx])
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n_clients + j]
    }

    pub fn candidates(&self, k: usize) -> &BTreeSet<usize> {
        &self.candidates[k]
    }

    pub fn comp_count(&self) -> u64 {
        self.comp_count
    }

    pub fn elimination_enabled(&self) -> bool {
        self.elimination
    }

    /// Whether the pair is still raced: always when elimination is off,
    /// otherwise while either side keeps the other as a candidate.
    pub fn pair_active(&self, i: usize, j: usize) -> bool {
        !self.elimination || self.candidates[i].contains(&j) || self.candidates[j].contains(&i)
    }

    /// Folds one observation into the running mean of the pair.
    pub fn observe(&mut self, i: usize, j: usize, r: f64) {
        let k = self.n_clients;
        let n = self.counts[i * k + j] as f64;
        let prev = self.scores[i * k + j];
        let next = (n / (n + 1.0)) * prev + r / (n + 1.0);
        for idx in [i * k + j, j * k + i] {
            self.scores[idx] = next;
            self.counts[idx] += 1;
        }
    }

    /// Scores every active pair of present clients with `score_fn`, in
    /// lexicographic pair order. Pairs for which `score_fn` returns `None`
    /// are skipped and not counted. Returns the number of pairs scored.
    pub fn record_round<F>(&mut self, present: &[usize], mut score_fn: F) -> Result<u64>
    where
        F: FnMut(usize, usize) -> Result<Option<f64>>,
    {
        let mut sorted = present.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut scored = 0;
        for (a, &i) in sorted.iter().enumerate() {
            for &j in &sorted[a + 1..] {
                if !self.pair_active(i, j) {
                    continue;
                }
                if let Some(r) = score_fn(i, j)? {
                    self.observe(i, j, r);
                    scored += 1;
                }
            }
        }
        self.comp_count += scored;
        Ok(scored)
    }

    /// Scores the uploaded updates of one round. `updates[n]` belongs to
    /// client `present[n]`. Pairs involving a zero update are skipped.
    pub fn update_scores(&mut self, present: &[usize], updates: &[&ParamVector]) -> Result<u64> {
        if present.len() != updates.len() {
            return Err(Error::InvalidArgument(format!(
                "{} participants but {} updates",
                present.len(),
                updates.len()
            )));
        }
        let mut slot = vec![usize::MAX; self.n_clients];
        for (n, &c) in present.iter().enumerate() {
            slot[c] = n;
        }
        let kind = self.score_kind;
        self.record_round(present, |i, j| {
            let (a, b) = (updates[slot[i]], updates[slot[j]]);
            if kind == ScoreKind::Cosine && (a.is_zero() || b.is_zero()) {
                return Ok(None);
            }
            kind.score(a, b).map(Some)
        })
    }

    /// Best-scored candidate of `k` among `present`; unscored pairs rank
    /// below scored ones and ties go to the lowest id.
    pub fn select_substitute(&self, k: usize, present: &[usize]) -> Selection {
        let mut best: Option<(usize, f64)> = None;
        for &i in present {
            if i == k || (self.elimination && !self.candidates[k].contains(&i)) {
                continue;
            }
            if let Some(r) = self.score(k, i) {
                let better = match best {
                    None => true,
                    Some((bi, br)) => r > br || (r == br && i < bi),
                };
                if better {
                    best = Some((i, r));
                }
            }
        }
        best.map_or(Selection::NaiveFallback, |(i, _)| Selection::Friend(i))
    }

    /// One elimination pass after round count `t` (1-based): every client
    /// drops candidates whose score trails its current leader by at least
    /// the threshold. Returns the number of candidates removed.
    pub fn eliminate(&mut self, cfg: &EliminationConfig, t: usize) -> Result<usize> {
        if !self.elimination {
            return Ok(0);
        }
        let theta = cfg.theta(self.n_clients, t)?;
        let mut removed = 0;
        for k in 0..self.n_clients {
            let mut leader: Option<f64> = None;
            for &i in &self.candidates[k] {
                if let Some(r) = self.score(k, i) {
                    if leader.is_none_or(|l| r > l) {
                        leader = Some(r);
                    }
                }
            }
            let Some(top) = leader else { continue };
            let doomed: Vec<usize> = self.candidates[k]
                .iter()
                .copied()
                .filter(|&i| self.score(k, i).is_some_and(|r| top - r >= theta))
                .collect();
            for i in doomed {
                self.candidates[k].remove(&i);
                removed += 1;
            }
        }
        Ok(removed)
    }

    /// Writes the upper triangle as CSV rows `i,j,R,N` (R empty when unscored).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j", "R", "N"])?;
        for i in 0..self.n_clients {
            for j in i + 1..self.n_clients {
                let r = self.score(i, j).map(|v| v.to_string()).unwrap_or_default();
                w.write_record([i.to_string(), j.to_string(), r, self.count(i, j).to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Snapshot as read back from CSV: symmetric score matrix with `None` for
/// unscored pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub n_clients: usize,
    pub scores: Vec<Option<f64>>,
}

impl ScoreMatrix {
    pub fn from_state(state: &SimilarityState) -> Self {
        let k = state.n_clients;
        let scores = (0..k * k).map(|idx| state.score(idx / k, idx % k)).collect();
        Self { n_clients: k, scores }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.scores[i * self.n_clients + j]
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        let mut k = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |n: usize| -> Result<usize> {
                rec[n]
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad index in {}", path.display())))
            };
            let (i, j) = (parse(0)?, parse(1)?);
            let r = if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!("bad score in {}", path.display()))
                })?)
            };
            k = k.max(i + 1).max(j + 1);
            rows.push((i, j, r));
        }
        let mut scores = vec![None; k * k];
        for (i, j, r) in rows {
            scores[i * k + j] = r;
            scores[j * k + i] = r;
        }
        Ok(Self { n_clients: k, scores })
    }

    /// Mean score over intra-group and inter-group pairs for a grouping.
    pub fn block_means(&self, group_of: &[usize]) -> (f64, f64) {
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..self.n_clients {
            for j in i + 1..self.n_clients {
                if let Some(r) = self.get(i, j) {
                    if group_of[i] == group_of[j] {
                        intra += r;
                        ni += 1;
                    } else {
                        inter += r;
                        nx += 1;
                    }
                }
            }
        }
        let avg = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        (avg(intra, ni), avg(inter, nx))
    }
}
