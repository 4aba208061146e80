//! The round loop. For each seed the federation and dropout schedule are
//! built once; each strategy then replays that schedule on its own model
//! trajectory, with every client's local training driven by the same
//! (seed, client, round) stream regardless of strategy.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_round, substitution_error, RoundView, StaleCache, StrategyKind, Substitute};
use crate::data::FederationData;
use crate::dropout::DropoutSchedule;
use crate::error::{Error, Result};
use crate::harness::charts::{self, ChartInputs};
use crate::harness::config::ExperimentConfig;
use crate::metrics::{
    cumulative_substitution, estimate_heterogeneity, full_gradient_norm, write_rounds_csv,
    HeterogeneityEstimate, RoundRecord,
};
use crate::model::{evaluate, local_update, ModelSpec};
use crate::rng::{Purpose, RngStream};
use crate::similarity::SimilarityState;
use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub strategy: StrategyKind,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub cumulative_e_sq: f64,
    /// Pairwise score computations actually performed.
    pub comp_count: u64,
    /// Computations all-pairs scoring would have needed on the same schedule.
    pub comp_count_no_elimination: u64,
    pub rounds_completed: usize,
    pub diverged: bool,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "seed",
    "strategy",
    "final_accuracy",
    "best_accuracy",
    "cumulative_e_sq",
    "comp_count",
    "comp_count_no_elimination",
    "rounds_completed",
    "diverged",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SubstituteEvent {
    pub t: usize,
    pub dropped: usize,
    pub source: Substitute,
}

/// In-memory result of one (seed, strategy) run.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub seed: u64,
    pub strategy: StrategyKind,
    pub records: Vec<RoundRecord>,
    pub substitutes: Vec<SubstituteEvent>,
    pub snapshots: Vec<(usize, SimilarityState)>,
    pub final_similarity: Option<SimilarityState>,
    /// Model at the start of each probe round, for heterogeneity estimation.
    pub probes: Vec<ParamVector>,
    pub final_model: ParamVector,
    pub divergence: Option<String>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub federation: FederationData,
    pub schedule: DropoutSchedule,
    pub runs: Vec<StrategyRun>,
    pub heterogeneity: Option<HeterogeneityEstimate>,
}

impl SeedOutcome {
    pub fn run(&self, kind: StrategyKind) -> Option<&StrategyRun> {
        self.runs.iter().find(|r| r.strategy == kind)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub audit_checks: usize,
}

impl ExperimentOutcome {
    pub fn summaries(&self) -> Vec<RunSummary> {
        self.seeds
            .iter()
            .flat_map(|s| s.runs.iter().map(|r| r.summary.clone()))
            .collect()
    }

    pub fn any_divergence(&self) -> bool {
        self.seeds.iter().any(|s| s.runs.iter().any(|r| r.divergence.is_some()))
    }
}

/// Maps (seed, client, round, model bits) to the hash of the resulting update,
/// failing if the same inputs ever produce a different output.
#[derive(Default)]
struct Audit {
    seen: Mutex<HashMap<u64, u64>>,
    checks: Mutex<usize>,
}

impl Audit {
    fn check(&self, seed: u64, client: usize, round: usize, w: &ParamVector, out: &ParamVector) -> Result<()> {
        let mut h = DefaultHasher::new();
        (seed, client, round, w.to_bits()).hash(&mut h);
        let key = h.finish();
        let mut h = DefaultHasher::new();
        out.to_bits().hash(&mut h);
        let value = h.finish();
        let mut seen = self.seen.lock().expect("audit lock");
        match seen.get(&key) {
            Some(&prev) if prev != value => Err(Error::Audit(format!(
                "seed {seed}, client {client}, round {round}: same inputs gave different updates"
            ))),
            Some(_) => {
                *self.checks.lock().expect("audit lock") += 1;
                Ok(())
            }
            None => {
                seen.insert(key, value);
                Ok(())
            }
        }
    }
}

fn probe_rounds(rounds: usize) -> Vec<usize> {
    let mut r = vec![0, rounds / 4, rounds / 2, 3 * rounds / 4];
    r.dedup();
    r
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    spec: ModelSpec,
    seed: u64,
    data: &'a FederationData,
    schedule: &'a DropoutSchedule,
    w0: &'a ParamVector,
    audit: Option<&'a Audit>,
}

fn run_strategy(ctx: &RunContext<'_>, kind: StrategyKind) -> Result<StrategyRun> {
    let started = Instant::now();
    let cfg = ctx.cfg;
    let spec = &ctx.spec;
    let train = &cfg.model.train;
    let clients = &ctx.data.clients;
    let k = clients.len();
    let rounds = ctx.schedule.rounds();
    let everyone: Vec<usize> = (0..k).collect();
    let probe_at = probe_rounds(rounds);
    let elim = &cfg.similarity.elimination;

    let mut sim = (kind == StrategyKind::Fdms)
        .then(|| SimilarityState::new(k, cfg.similarity.score, elim.enabled));
    let mut stale = (kind == StrategyKind::Stale).then(StaleCache::default);
    let mut w = ctx.w0.clone();
    let mut records = Vec::with_capacity(rounds);
    let mut substitutes = Vec::new();
    let mut snapshots = Vec::new();
    let mut probes = Vec::new();
    let mut divergence = None;
    let mut no_elim_pairs = 0u64;

    for t in 0..rounds {
        if probe_at.contains(&t) {
            probes.push(w.clone());
        }
        let present: &[usize] = if kind == StrategyKind::Full {
            &everyone
        } else {
            ctx.schedule.present(t)
        };

        let oracle: Result<Vec<ParamVector>> = clients
            .iter()
            .enumerate()
            .map(|(c, data)| {
                let stream = RngStream::new(ctx.seed, Purpose::LocalTrain, c as u64, t as u64);
                local_update(spec, &w, data, train, stream).map_err(|e| match e {
                    e if e.is_divergence() => Error::Divergence {
                        round: t,
                        client: c,
                        detail: e.to_string(),
                    },
                    e => e,
                })
            })
            .collect();
        let oracle = match oracle {
            Ok(o) => o,
            Err(e) if e.is_divergence() => {
                warn!("seed {} {kind}: {e}", ctx.seed);
                divergence = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(audit) = ctx.audit {
            for (c, u) in oracle.iter().enumerate() {
                audit.check(ctx.seed, c, t, &w, u)?;
            }
        }
        let uploads: Vec<ParamVector> = present.iter().map(|&c| oracle[c].clone()).collect();

        let grad_sq = match cfg.metrics.grad_every {
            n if n > 0 && t % n == 0 => Some(full_gradient_norm(spec, &w, clients)?),
            _ => None,
        };

        let mut comp_delta = 0;
        if let Some(s) = sim.as_mut() {
            let refs: Vec<&ParamVector> = uploads.iter().collect();
            comp_delta = s.update_scores(present, &refs)?;
            no_elim_pairs += (present.len() * (present.len() - 1) / 2) as u64;
        }

        let view = RoundView {
            n_clients: k,
            present,
            updates: &uploads,
            similarity: sim.as_ref(),
            stale: stale.as_ref(),
        };
        let outcome = aggregate_round(kind, cfg.eta_global, &w, view)?;

        if let Some(s) = sim.as_mut() {
            if elim.enabled {
                s.eliminate(elim, t + 1)?;
            }
            let every = cfg.similarity.snapshot_every;
            if every > 0 && (t + 1) % every == 0 {
                snapshots.push((t, s.clone()));
            }
        }
        if let Some(cache) = stale.as_mut() {
            cache.record(t, present, &uploads);
        }

        let (_, e_sq) = substitution_error(&outcome.delta, &oracle)?;
        let evaluated = evaluate(spec, &outcome.w_next, &ctx.data.test_set);
        let (test_accuracy, test_loss) = match evaluated {
            Ok(v) => v,
            Err(e) if e.is_divergence() => {
                divergence = Some(format!("round {t}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        for (&dropped, &source) in &outcome.substitutes {
            substitutes.push(SubstituteEvent { t, dropped, source });
        }
        records.push(RoundRecord {
            t,
            strategy: kind,
            test_accuracy,
            test_loss,
            e_sq,
            grad_sq,
            comp_count_delta: comp_delta,
            n_dropped: k - present.len(),
            fallback_count: outcome.fallback_count(),
        });
        w = outcome.w_next;
    }

    let final_accuracy = records.last().map_or(f64::NAN, |r| r.test_accuracy);
    let best_accuracy = records.iter().map(|r| r.test_accuracy).fold(f64::NAN, f64::max);
    let summary = RunSummary {
        seed: ctx.seed,
        strategy: kind,
        final_accuracy,
        best_accuracy,
        cumulative_e_sq: cumulative_substitution(&records),
        comp_count: sim.as_ref().map_or(0, |s| s.comp_count()),
        comp_count_no_elimination: no_elim_pairs,
        rounds_completed: records.len(),
        diverged: divergence.is_some(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(StrategyRun {
        seed: ctx.seed,
        strategy: kind,
        records,
        substitutes,
        snapshots,
        final_similarity: sim,
        probes,
        final_model: w,
        divergence,
        summary,
    })
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, audit: Option<&Audit>) -> Result<SeedOutcome> {
    let federation = cfg.data.build(seed)?;
    let spec = cfg.model.spec();
    let k = federation.n_clients();
    if k == 0 {
        return Err(Error::config("data", "federation has no clients"));
    }
    if federation.clients[0].n_features != spec.n_features {
        return Err(Error::config("model.n_features", "does not match the data"));
    }
    let schedule = cfg.dropout.build(k, seed)?;
    let w0 = spec.init_params(RngStream::server(seed, Purpose::ModelInit, 0));
    let ctx = RunContext {
        cfg,
        spec: spec.clone(),
        seed,
        data: &federation,
        schedule: &schedule,
        w0: &w0,
        audit,
    };
    let runs = cfg
        .strategies
        .par_iter()
        .map(|&kind| run_strategy(&ctx, kind))
        .collect::<Result<Vec<_>>>()?;

    let heterogeneity = match cfg.metrics.heterogeneity_repeats {
        0 => None,
        repeats => runs.first().filter(|r| !r.probes.is_empty()).map(|r| {
            estimate_heterogeneity(
                &spec,
                &r.probes,
                &federation.clients,
                &cfg.model.train,
                repeats,
                seed,
                federation.ground_truth_friends.as_deref(),
            )
        }),
    }
    .transpose()?;

    Ok(SeedOutcome {
        seed,
        federation,
        schedule,
        runs,
        heterogeneity,
    })
}

/// Runs every (seed, strategy) pair in memory without writing anything.
pub fn simulate(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let audit = cfg.audit.then(Audit::default);
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, audit.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let audit_checks = audit.map_or(0, |a| *a.checks.lock().expect("audit lock"));
    Ok(ExperimentOutcome { seeds, audit_checks })
}

/// Simulates, then writes CSVs, schedules, snapshots and charts under the
/// resolved output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentOutcome, PathBuf)> {
    let outcome = simulate(cfg)?;
    let dir = cfg.resolved_output_dir();
    write_outputs(cfg, &outcome, &dir)?;
    Ok((outcome, dir))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

pub fn strategy_dir(root: &Path, seed: u64, kind: StrategyKind) -> PathBuf {
    seed_dir(root, seed).join(kind.as_str())
}

fn write_substitutes(path: &Path, events: &[SubstituteEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "dropped", "kind", "source"])?;
    for e in events {
        w.write_record([
            e.t.to_string(),
            e.dropped.to_string(),
            e.source.kind_str().to_string(),
            e.source.source().map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summaries(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summaries(path: &Path) -> Result<Vec<RunSummary>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Writes every artifact of an experiment below `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    cfg.save(&dir.join("config.json"))?;
    for seed in &outcome.seeds {
        let sdir = seed_dir(dir, seed.seed);
        mkdir(&sdir)?;
        seed.schedule.save_json(&sdir.join("schedule.json"))?;
        if let Some(h) = &seed.heterogeneity {
            let text = serde_json::to_string_pretty(h)?;
            let p = sdir.join("heterogeneity.json");
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        for run in &seed.runs {
            let rdir = strategy_dir(dir, seed.seed, run.strategy);
            mkdir(&rdir)?;
            write_rounds_csv(&rdir.join("rounds.csv"), &run.records)?;
            if run.strategy != StrategyKind::Full {
                write_substitutes(&rdir.join("substitutes.csv"), &run.substitutes)?;
            }
            for (t, snap) in &run.snapshots {
                snap.write_csv(&rdir.join(format!("similarity_t{t:05}.csv")))?;
            }
            if let Some(s) = &run.final_similarity {
                s.write_csv(&rdir.join("similarity_final.csv"))?;
            }
            if let Some(d) = &run.divergence {
                let p = rdir.join("divergence.txt");
                fs::write(&p, d).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let summaries = outcome.summaries();
    write_summaries(&dir.join("summary.csv"), &summaries)?;
    let timing: Vec<serde_json::Value> = summaries
        .iter()
        .map(|s| {
            serde_json::json!({
                "seed": s.seed,
                "strategy": s.strategy,
                "wall_clock_secs": s.wall_clock_secs,
            })
        })
        .collect();
    let p = dir.join("timing.json");
    fs::write(&p, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::io(&p, e))?;

    let inputs = ChartInputs::from_outcome(outcome);
    let written = charts::emit_charts(&inputs, &dir.join("charts"))?;
    info!("wrote {} charts under {}", written.len(), dir.display());
    Ok(())
}
