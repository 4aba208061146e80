//! Global update rules. Every strategy sees only the updates uploaded by
//! the clients present in the round; the true updates of dropped clients
//! reach this module solely through [`substitution_error`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{Selection, SimilarityState};
use crate::vector::{axpy, mean, sq_norm, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Full,
    NaiveDropout,
    Stale,
    Fdms,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Full,
        StrategyKind::NaiveDropout,
        StrategyKind::Stale,
        StrategyKind::Fdms,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::NaiveDropout => "naive_dropout",
            StrategyKind::Stale => "stale",
            StrategyKind::Fdms => "fdms",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// Last uploaded update per client, with the round it was uploaded in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StaleCache {
    entries: BTreeMap<usize, (usize, ParamVector)>,
}

impl StaleCache {
    pub fn get(&self, k: usize) -> Option<&(usize, ParamVector)> {
        self.entries.get(&k)
    }

    /// Overwrites the entries of exactly the clients that uploaded this round.
    pub fn record(&mut self, round: usize, present: &[usize], updates: &[ParamVector]) {
        for (&k, u) in present.iter().zip(updates) {
            self.entries.insert(k, (round, u.clone()));
        }
    }
}

/// Where a dropped client's substitute update came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substitute {
    /// Mean over the participating clients.
    NaiveMean,
    /// Cached upload from an earlier round.
    Stale { round: usize },
    /// Nothing cached yet; contributes the zero vector.
    ZeroColdStart,
    /// Update of the client with the best similarity score.
    Friend(usize),
}

impl Substitute {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Substitute::NaiveMean => "naive_mean",
            Substitute::Stale { .. } => "stale",
            Substitute::ZeroColdStart => "zero",
            Substitute::Friend(_) => "friend",
        }
    }

    /// Client id or round number attached to the source, if any.
    pub fn source(&self) -> Option<usize> {
        match *self {
            Substitute::Stale { round } => Some(round),
            Substitute::Friend(i) => Some(i),
            _ => None,
        }
    }
}

/// Everything a strategy may read in one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundView<'a> {
    pub n_clients: usize,
    /// Participating clients in ascending id order.
    pub present: &'a [usize],
    /// Uploads aligned with `present`.
    pub updates: &'a [ParamVector],
    pub similarity: Option<&'a SimilarityState>,
    pub stale: Option<&'a StaleCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub w_next: ParamVector,
    pub delta: ParamVector,
    pub substitutes: BTreeMap<usize, Substitute>,
}

impl AggregateOutcome {
    pub fn fallback_count(&self) -> usize {
        self.substitutes
            .values()
            .filter(|s| matches!(s, Substitute::NaiveMean))
            .count()
    }
}

fn check_view(view: &RoundView<'_>) -> Result<()> {
    if view.present.is_empty() {
        return Err(Error::InvalidArgument("round has no participants".into()));
    }
    if view.present.len() != view.updates.len() {
        return Err(Error::InvalidArgument("participants and uploads differ in length".into()));
    }
    if view.present.windows(2).any(|w| w[0] >= w[1]) || *view.present.last().unwrap() >= view.n_clients {
        return Err(Error::InvalidArgument("participants must be sorted ids below K".into()));
    }
    Ok(())
}

/// Applies one global step `w_{t+1} = w_t + eta * Delta_t`.
///
/// `full` expects every client in `view.present`. `naive_dropout` averages
/// over the participants. `stale` and `fdms` fill each dropped client with a
/// substitute and average over all K clients.
pub fn aggregate_round(
    kind: StrategyKind,
    eta_global: f64,
    w_t: &ParamVector,
    view: RoundView<'_>,
) -> Result<AggregateOutcome> {
    check_view(&view)?;
    let mut substitutes = BTreeMap::new();
    let delta = match kind {
        StrategyKind::Full => {
            if view.present.len() != view.n_clients {
                return Err(Error::InvalidArgument(
                    "full participation requires every client's update".into(),
                ));
            }
            mean(view.updates)?
        }
        StrategyKind::NaiveDropout => {
            for k in dropped(&view) {
                substitutes.insert(k, Substitute::NaiveMean);
            }
            mean(view.updates)?
        }
        StrategyKind::Stale => {
            let cache = view
                .stale
                .ok_or_else(|| Error::InvalidArgument("stale strategy needs a cache".into()))?;
            let zero = ParamVector::zeros(w_t.dim());
            let mut slots: Vec<&ParamVector> = Vec::with_capacity(view.n_clients);
            let mut next = 0;
            for k in 0..view.n_clients {
                if view.present.get(next) == Some(&k) {
                    slots.push(&view.updates[next]);
                    next += 1;
                } else if let Some((round, u)) = cache.get(k) {
                    substitutes.insert(k, Substitute::Stale { round: *round });
                    slots.push(u);
                } else {
                    substitutes.insert(k, Substitute::ZeroColdStart);
                    slots.push(&zero);
                }
            }
            mean(slots)?
        }
        StrategyKind::Fdms => {
            let sim = view
                .similarity
                .ok_or_else(|| Error::InvalidArgument("fdms strategy needs similarity state".into()))?;
            let naive = mean(view.updates)?;
            let mut slots: Vec<&ParamVector> = Vec::with_capacity(view.n_clients);
            let mut next = 0;
            for k in 0..view.n_clients {
                if view.present.get(next) == Some(&k) {
                    slots.push(&view.updates[next]);
                    next += 1;
                    continue;
                }
                match sim.select_substitute(k, view.present) {
                    Selection::Friend(i) => {
                        let pos = view.present.binary_search(&i).expect("selected client is present");
                        substitutes.insert(k, Substitute::Friend(i));
                        slots.push(&view.updates[pos]);
                    }
                    Selection::NaiveFallback => {
                        substitutes.insert(k, Substitute::NaiveMean);
                        slots.push(&naive);
                    }
                }
            }
            mean(slots)?
        }
    };
    let w_next = axpy(eta_global, &delta, w_t)?;
    Ok(AggregateOutcome {
        w_next,
        delta,
        substitutes,
    })
}

fn dropped(view: &RoundView<'_>) -> Vec<usize> {
    (0..view.n_clients)
        .filter(|k| view.present.binary_search(k).is_err())
        .collect()
}

/// `e_t = Delta_t - mean_k(true Delta^k_t)` and its squared norm.
pub fn substitution_error(delta_t: &ParamVector, oracle_all: &[ParamVector]) -> Result<(ParamVector, f64)> {
    let full = mean(oracle_all)?;
    let e = delta_t.sub(&full)?;
    let sq = sq_norm(&e)?;
    Ok((e, sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::ScoreKind;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn view<'a>(
        k: usize,
        present: &'a [usize],
        updates: &'a [ParamVector],
        sim: Option<&'a SimilarityState>,
        stale: Option<&'a StaleCache>,
    ) -> RoundView<'a> {
        RoundView {
            n_clients: k,
            present,
            updates,
            similarity: sim,
            stale,
        }
    }

    #[test]
    fn naive_matches_substituted_mean() {
        let ups = [pv(&[2.0, 0.0]), pv(&[0.0, 2.0])];
        let w = pv(&[0.0, 0.0]);
        let out = aggregate_round(StrategyKind::NaiveDropout, 1.0, &w, view(3, &[0, 1], &ups, None, None)).unwrap();
        assert_eq!(out.delta, pv(&[1.0, 1.0]));
        let decomposed = mean([&ups[0], &ups[1], &out.delta]).unwrap();
        assert_eq!(decomposed, pv(&[1.0, 1.0]));
        assert_eq!(out.substitutes[&2], Substitute::NaiveMean);
        assert_eq!(out.fallback_count(), 1);
    }

    #[test]
    fn all_strategies_agree_without_dropout() {
        let ups = [pv(&[1.0, -1.0]), pv(&[0.5, 2.0]), pv(&[-3.0, 0.25])];
        let w = pv(&[0.1, 0.2]);
        let sim = SimilarityState::new(3, ScoreKind::Cosine, false);
        let cache = StaleCache::default();
        let present = [0, 1, 2];
        let results: Vec<ParamVector> = StrategyKind::ALL
            .iter()
            .map(|&k| {
                aggregate_round(k, 0.7, &w, view(3, &present, &ups, Some(&sim), Some(&cache)))
                    .unwrap()
                    .w_next
            })
            .collect();
        assert!(results.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn fdms_uses_best_scored_friend() {
        let ups = [pv(&[4.0, 0.0]), pv(&[0.0, 1.0])];
        let mut sim = SimilarityState::new(3, ScoreKind::Cosine, false);
        sim.observe(2, 0, 0.9);
        sim.observe(2, 1, 0.2);
        let w = pv(&[0.0, 0.0]);
        let out = aggregate_round(StrategyKind::Fdms, 1.0, &w, view(3, &[0, 1], &ups, Some(&sim), None)).unwrap();
        assert_eq!(out.substitutes[&2], Substitute::Friend(0));
        // (D0 + D1 + D0) / 3
        assert_eq!(out.delta, pv(&[8.0 / 3.0, 1.0 / 3.0]));
        assert_eq!(out.fallback_count(), 0);
    }

    #[test]
    fn fdms_falls_back_to_mean_when_unscored() {
        let ups = [pv(&[4.0, 0.0]), pv(&[0.0, 2.0])];
        let sim = SimilarityState::new(3, ScoreKind::Cosine, false);
        let w = pv(&[0.0, 0.0]);
        let out = aggregate_round(StrategyKind::Fdms, 1.0, &w, view(3, &[0, 1], &ups, Some(&sim), None)).unwrap();
        assert_eq!(out.substitutes[&2], Substitute::NaiveMean);
        assert_eq!(out.delta, pv(&[2.0, 1.0]));
    }

    #[test]
    fn stale_uses_cache_then_zero() {
        let mut cache = StaleCache::default();
        cache.record(4, &[1], &[pv(&[6.0, 6.0])]);
        let ups = [pv(&[3.0, 0.0])];
        let w = pv(&[1.0, 1.0]);
        let out = aggregate_round(StrategyKind::Stale, 2.0, &w, view(3, &[0], &ups, None, Some(&cache))).unwrap();
        assert_eq!(out.substitutes[&1], Substitute::Stale { round: 4 });
        assert_eq!(out.substitutes[&2], Substitute::ZeroColdStart);
        assert_eq!(out.delta, pv(&[3.0, 2.0]));
        assert_eq!(out.w_next, pv(&[7.0, 5.0]));
    }

    #[test]
    fn full_requires_everyone() {
        let ups = [pv(&[1.0])];
        let w = pv(&[0.0]);
        assert!(aggregate_round(StrategyKind::Full, 1.0, &w, view(2, &[0], &ups, None, None)).is_err());
        assert!(aggregate_round(StrategyKind::NaiveDropout, 1.0, &w, view(2, &[], &[], None, None)).is_err());
    }

    #[test]
    fn substitution_error_examples() {
        let all = [pv(&[1.0, 2.0]), pv(&[3.0, -2.0])];
        let full = mean(all.iter()).unwrap();
        let (e, sq) = substitution_error(&full, &all).unwrap();
        assert!(e.is_zero());
        assert_eq!(sq, 0.0);
        // K = 2, only client 0 present under naive averaging
        let (e, _) = substitution_error(&all[0], &all).unwrap();
        assert_eq!(e, all[0].sub(&all[1]).unwrap().scale(0.5).unwrap());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("fedprox".parse::<StrategyKind>().is_err());
    }
}
