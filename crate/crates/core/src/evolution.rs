//! Evolutionary proxy search.
//!
//! Each iteration samples a pool from the population, takes its top-k by
//! fitness, mutates a uniformly chosen parent and inserts the offspring,
//! then drops the weakest member. Fitness is the JCM of per-dataset Kendall
//! taus on fixed subsets of the benchmark.
//!
//! Three acceptance strategies are provided: `Elitism` admits a mutant only
//! when it beats its parent by the margin (with a bounded retry loop and a
//! strict-improvement fallback), `Naive` admits the first valid mutant, and
//! `Random` ignores the population and inserts fresh random graphs.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{BenchError, BenchStore};
use crate::metrics::{jcm, kendall_tau};
use crate::proxy::{mutate, random_graph, score_network, ProxyGraph, ProxyScore};
use crate::rng::child_rng;
use crate::stats::NetworkStatistics;

/// Mutants are generated up front and scored in fixed-size chunks, so the
/// outcome does not depend on the thread count.
const EVAL_CHUNK: usize = 4;

/// Random initial graphs drawn per population slot before giving up.
const INIT_ATTEMPTS_PER_SLOT: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Elitism,
    Naive,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "elitism" => Ok(Strategy::Elitism),
            "naive" => Ok(Strategy::Naive),
            "random" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSettings {
    pub population: usize,
    pub iterations: usize,
    pub sample_ratio: f64,
    pub top_k: usize,
    pub mutation_prob: f64,
    pub margin: f64,
    pub retry_cap: usize,
    pub subset_size: usize,
    /// Per-dataset JCM weights; all ones when absent.
    pub alphas: Option<Vec<f64>>,
    pub seed: u64,
    /// Stop as soon as the best fitness reaches this value.
    pub target_jcm: Option<f64>,
}

impl Default for EvolutionSettings {
    fn default() -> Self {
        EvolutionSettings {
            population: 20,
            iterations: 200,
            sample_ratio: 0.5,
            top_k: 5,
            mutation_prob: 0.5,
            margin: 0.1,
            retry_cap: 32,
            subset_size: 100,
            alphas: None,
            seed: 0,
            target_jcm: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("no valid initial graph after {0} attempts")]
    NoValidInitial(usize),
    #[error("fitness context: {0}")]
    Context(String),
}

impl EvolutionSettings {
    pub fn pool_size(&self) -> usize {
        ((self.population as f64 * self.sample_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Settings(m.to_string()));
        if self.population == 0 {
            return bad("population must be positive");
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return bad("sample ratio must lie in (0, 1]");
        }
        let pool = self.pool_size();
        if self.top_k == 0 || self.top_k > pool || pool > self.population {
            return bad("need 1 <= top_k <= pool size <= population");
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad("mutation probability must lie in [0, 1]");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be non-negative");
        }
        if self.retry_cap == 0 {
            return bad("retry cap must be at least 1");
        }
        if self.subset_size < 2 {
            return bad("fitness subsets need at least 2 architectures");
        }
        if let Some(a) = &self.alphas {
            if a.iter().any(|&x| !(x >= 0.0)) {
                return bad("dataset weights must be non-negative");
            }
        }
        Ok(())
    }
}

/// Ground truth for one dataset, restricted to a frozen subset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSlice {
    pub name: String,
    /// Positions into the context's statistics.
    pub indices: Vec<usize>,
    pub accuracies: Vec<f64>,
}

/// Everything fitness needs: one statistics bundle per architecture and
/// per-dataset subsets with their accuracies.
pub struct FitnessContext<'a> {
    stats: &'a [NetworkStatistics],
    datasets: Vec<DatasetSlice>,
    alphas: Vec<f64>,
    /// Distinct statistics positions used by any dataset, ascending.
    unique: Vec<usize>,
    /// Per dataset, positions into `unique`.
    lookup: Vec<Vec<usize>>,
}

impl<'a> FitnessContext<'a> {
    pub fn new(
        stats: &'a [NetworkStatistics],
        datasets: Vec<DatasetSlice>,
        alphas: Option<Vec<f64>>,
    ) -> Result<Self, ConfigError> {
        let bad = |m: String| Err(ConfigError::Context(m));
        if datasets.is_empty() {
            return bad("no datasets".into());
        }
        for d in &datasets {
            if d.indices.len() != d.accuracies.len() {
                return bad(format!(
                    "{}: indices and accuracies differ in length",
                    d.name
                ));
            }
            if d.indices.len() < 2 {
                return bad(format!("{}: fewer than 2 architectures", d.name));
            }
            if let Some(&i) = d.indices.iter().find(|&&i| i >= stats.len()) {
                return bad(format!("{}: no statistics for index {i}", d.name));
            }
        }
        let alphas = alphas.unwrap_or_else(|| vec![1.0; datasets.len()]);
        if alphas.len() != datasets.len() {
            return bad(format!(
                "{} weights for {} datasets",
                alphas.len(),
                datasets.len()
            ));
        }
        let mut unique: Vec<usize> = datasets
            .iter()
            .flat_map(|d| d.indices.iter().copied())
            .collect();
        unique.sort_unstable();
        unique.dedup();
        let lookup = datasets
            .iter()
            .map(|d| {
                d.indices
                    .iter()
                    .map(|i| unique.binary_search(i).unwrap())
                    .collect()
            })
            .collect();
        Ok(FitnessContext {
            stats,
            datasets,
            alphas,
            unique,
            lookup,
        })
    }

    /// Draws `subset_size` validation records per dataset (frozen for the
    /// run) and reads their accuracies from the store.
    pub fn from_store(
        store: &BenchStore,
        stats: &'a [NetworkStatistics],
        val_indices: &[usize],
        distill: bool,
        settings: &EvolutionSettings,
    ) -> Result<Self, BenchError> {
        let mut datasets = Vec::new();
        for (d, name) in store.datasets().into_iter().enumerate() {
            let available: Vec<usize> = val_indices
                .iter()
                .copied()
                .filter(|&i| store.acc_by_idx(i, &name, distill).is_ok())
                .collect();
            if available.len() < 2 {
                continue;
            }
            let k = settings.subset_size.min(available.len());
            let mut rng = child_rng(settings.seed, "subset", d as u64);
            let mut picked: Vec<usize> = sample(&mut rng, available.len(), k)
                .into_iter()
                .map(|j| available[j])
                .collect();
            picked.sort_unstable();
            let accuracies = picked
                .iter()
                .map(|&i| store.acc_by_idx(i, &name, distill))
                .collect::<Result<Vec<_>, _>>()?;
            datasets.push(DatasetSlice {
                name,
                indices: picked,
                accuracies,
            });
        }
        FitnessContext::new(stats, datasets, settings.alphas.clone()).map_err(|e| {
            BenchError::Schema {
                line: 0,
                message: e.to_string(),
            }
        })
    }

    pub fn datasets(&self) -> &[DatasetSlice] {
        &self.datasets
    }

    /// The statistics bundle graphs must score validly on to enter the
    /// population.
    pub fn probe(&self) -> &NetworkStatistics {
        &self.stats[self.datasets[0].indices[0]]
    }

    /// Per-dataset Kendall taus, or `None` when any network score is invalid
    /// or a tau is undefined.
    pub fn taus(&self, g: &ProxyGraph) -> Option<Vec<f64>> {
        if !matches!(score_network(g, self.probe()), ProxyScore::Value(_)) {
            return None;
        }
        let mut scores = Vec::with_capacity(self.unique.len());
        for &i in &self.unique {
            scores.push(score_network(g, &self.stats[i]).value()?);
        }
        let mut taus = Vec::with_capacity(self.datasets.len());
        for (d, look) in self.datasets.iter().zip(&self.lookup) {
            let xs: Vec<f64> = look.iter().map(|&p| scores[p]).collect();
            let t = kendall_tau(&xs, &d.accuracies).ok()?;
            if t.is_nan() {
                return None;
            }
            taus.push(t);
        }
        Some(taus)
    }
}

/// JCM fitness, `None` when the graph is invalid on the context.
pub fn fitness(g: &ProxyGraph, ctx: &FitnessContext) -> Option<f64> {
    let taus = ctx.taus(g)?;
    jcm(&taus, &ctx.alphas).ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptPath {
    /// Offspring beat the parent by the margin.
    Margin,
    /// Retry cap hit; the best valid mutant strictly improved on the parent.
    Fallback,
    /// First valid mutant (naive strategy).
    FirstValid,
    /// Fresh random graph (random strategy).
    Fresh,
    /// Nothing inserted this iteration.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub best_jcm: f64,
    pub mean_jcm: f64,
    pub accepted: bool,
    pub path: AcceptPath,
    /// Candidates evaluated this iteration.
    pub retries: usize,
    pub invalid_mutants: usize,
    pub parent_fitness: Option<f64>,
    pub child_fitness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Member {
    pub graph: ProxyGraph,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvolutionResult {
    pub best: ProxyGraph,
    pub best_fitness: f64,
    pub initial_best: f64,
    pub trace: Vec<IterationRecord>,
    /// First iteration after which the best fitness met `target_jcm`
    /// (0 if the initial population already did).
    pub iterations_to_target: Option<usize>,
    pub population: Vec<Member>,
    /// Distinct graphs whose fitness was computed.
    pub evaluations: usize,
}

pub const TRACE_CSV_HEADER: &str =
    "iteration,best_jcm,mean_jcm,accepted,retries,path,invalid_mutants";

impl EvolutionResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.trace {
            let path = serde_json::to_value(r.path).unwrap();
            writeln!(
                out,
                "{},{:.6},{:.6},{},{},{},{}",
                r.iteration,
                r.best_jcm,
                r.mean_jcm,
                r.accepted,
                r.retries,
                path.as_str().unwrap(),
                r.invalid_mutants
            )
            .unwrap();
        }
        out
    }
}

/// Acceptance rule actually applied; the margin may be any value here so the
/// definitional equivalences can be exercised.
#[derive(Clone, Copy, Debug)]
enum Rule {
    Margin(f64),
    FirstValid,
    Fresh,
}

struct Cache<'c, 'a> {
    ctx: &'c FitnessContext<'a>,
    memo: HashMap<ProxyGraph, Option<f64>>,
}

impl Cache<'_, '_> {
    fn eval_many(&mut self, graphs: &[ProxyGraph]) -> Vec<Option<f64>> {
        let mut missing: Vec<ProxyGraph> = graphs
            .iter()
            .filter(|g| !self.memo.contains_key(g))
            .copied()
            .collect();
        missing.sort_by_key(|g| g.to_json());
        missing.dedup();
        let ctx = self.ctx;
        let computed: Vec<Option<f64>> = missing.par_iter().map(|g| fitness(g, ctx)).collect();
        self.memo.extend(missing.into_iter().zip(computed));
        graphs.iter().map(|g| self.memo[g]).collect()
    }
}

fn population_stats(pop: &[Member]) -> (f64, f64) {
    let best = pop
        .iter()
        .map(|m| m.fitness)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean = pop.iter().map(|m| m.fitness).sum::<f64>() / pop.len() as f64;
    (best, mean)
}

fn init_population(
    settings: &EvolutionSettings,
    cache: &mut Cache,
) -> Result<Vec<Member>, ConfigError> {
    let mut rng = child_rng(settings.seed, "init", 0);
    let cap = INIT_ATTEMPTS_PER_SLOT * settings.population;
    let mut pop = Vec::with_capacity(settings.population);
    let mut attempts = 0;
    while pop.len() < settings.population {
        let need = settings.population - pop.len();
        let batch: Vec<ProxyGraph> = (0..need.max(EVAL_CHUNK))
            .map(|_| random_graph(&mut rng))
            .collect();
        attempts += batch.len();
        for (g, f) in batch.iter().zip(cache.eval_many(&batch)) {
            if let Some(f) = f {
                if pop.len() < settings.population {
                    pop.push(Member {
                        graph: *g,
                        fitness: f,
                    });
                }
            }
        }
        if pop.len() < settings.population && attempts >= cap {
            return Err(ConfigError::NoValidInitial(attempts));
        }
    }
    Ok(pop)
}

/// Top-k of the pool by fitness, ties to the lower population index.
fn top_k(pop: &[Member], pool: &[usize], k: usize) -> Vec<usize> {
    let mut p = pool.to_vec();
    p.sort_by(|&a, &b| pop[b].fitness.total_cmp(&pop[a].fitness).then(a.cmp(&b)));
    p.truncate(k);
    p
}

fn run(
    settings: &EvolutionSettings,
    ctx: &FitnessContext,
    rule: Rule,
    observer: &mut dyn FnMut(&IterationRecord, &[Member]),
) -> Result<EvolutionResult, ConfigError> {
    let mut cache = Cache {
        ctx,
        memo: HashMap::new(),
    };
    let mut pop = init_population(settings, &mut cache)?;
    let mut rng = child_rng(settings.seed, "evolve", 0);
    let pool_size = settings.pool_size();

    let (mut best_fit, _) = population_stats(&pop);
    let mut best = pop
        .iter()
        .find(|m| m.fitness == best_fit)
        .map(|m| m.graph)
        .unwrap();
    let initial_best = best_fit;
    let reached = |f: f64| settings.target_jcm.is_some_and(|t| f >= t);
    let mut iterations_to_target = reached(best_fit).then_some(0);
    let mut trace = Vec::with_capacity(settings.iterations);

    for it in 1..=settings.iterations {
        if iterations_to_target.is_some() {
            break;
        }
        let (candidates, parent_fit) = match rule {
            Rule::Fresh => (
                (0..settings.retry_cap)
                    .map(|_| random_graph(&mut rng))
                    .collect::<Vec<_>>(),
                None,
            ),
            _ => {
                let pool: Vec<usize> = sample(&mut rng, pop.len(), pool_size).into_vec();
                let top = top_k(&pop, &pool, settings.top_k);
                let parent = &pop[top[rng.random_range(0..top.len())]];
                let graph = parent.graph;
                let fit = parent.fitness;
                (
                    (0..settings.retry_cap)
                        .map(|_| mutate(&graph, &mut rng, settings.mutation_prob))
                        .collect(),
                    Some(fit),
                )
            }
        };

        let mut chosen: Option<(usize, f64, AcceptPath)> = None;
        let mut best_valid: Option<(usize, f64)> = None;
        let mut evaluated = 0;
        let mut invalid = 0;
        'chunks: for (c, chunk) in candidates.chunks(EVAL_CHUNK).enumerate() {
            let fits = cache.eval_many(chunk);
            for (j, f) in fits.into_iter().enumerate() {
                let idx = c * EVAL_CHUNK + j;
                evaluated += 1;
                let Some(f) = f else {
                    invalid += 1;
                    continue;
                };
                if best_valid.is_none_or(|(_, b)| f > b) {
                    best_valid = Some((idx, f));
                }
                let path = match rule {
                    Rule::Margin(m) if f - parent_fit.unwrap() >= m => Some(AcceptPath::Margin),
                    Rule::Margin(_) => None,
                    Rule::FirstValid => Some(AcceptPath::FirstValid),
                    Rule::Fresh => Some(AcceptPath::Fresh),
                };
                if let Some(path) = path {
                    chosen = Some((idx, f, path));
                    break 'chunks;
                }
            }
        }
        if chosen.is_none() {
            if let (Rule::Margin(_), Some((idx, f))) = (rule, best_valid) {
                if f > parent_fit.unwrap() {
                    chosen = Some((idx, f, AcceptPath::Fallback));
                }
            }
        }

        if let Some((idx, f, _)) = chosen {
            pop.push(Member {
                graph: candidates[idx],
                fitness: f,
            });
            let worst = (0..pop.len())
                .min_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)))
                .unwrap();
            pop.remove(worst);
            if f > best_fit {
                best_fit = f;
                best = candidates[idx];
            }
        }
        let (_, mean) = population_stats(&pop);
        let rec = IterationRecord {
            iteration: it,
            best_jcm: best_fit,
            mean_jcm: mean,
            accepted: chosen.is_some(),
            path: chosen.map_or(AcceptPath::Skipped, |c| c.2),
            retries: evaluated,
            invalid_mutants: invalid,
            parent_fitness: parent_fit,
            child_fitness: chosen.map(|c| c.1),
        };
        observer(&rec, &pop);
        trace.push(rec);
        if reached(best_fit) {
            iterations_to_target = Some(it);
        }
    }

    Ok(EvolutionResult {
        best,
        best_fitness: best_fit,
        initial_best,
        trace,
        iterations_to_target,
        population: pop,
        evaluations: cache.memo.len(),
    })
}

fn rule_for(strategy: Strategy, settings: &EvolutionSettings) -> Rule {
    match strategy {
        Strategy::Elitism => Rule::Margin(settings.margin),
        Strategy::Naive => Rule::FirstValid,
        Strategy::Random => Rule::Fresh,
    }
}

/// Runs one strategy and calls `observer` after every iteration with the
/// trace row and the current population.
pub fn evolve_with(
    settings: &EvolutionSettings,
    ctx: &FitnessContext,
    strategy: Strategy,
    observer: &mut dyn FnMut(&IterationRecord, &[Member]),
) -> Result<EvolutionResult, ConfigError> {
    settings.validate()?;
    run(settings, ctx, rule_for(strategy, settings), observer)
}

pub fn evolve(
    settings: &EvolutionSettings,
    ctx: &FitnessContext,
) -> Result<EvolutionResult, ConfigError> {
    evolve_with(settings, ctx, Strategy::Elitism, &mut |_, _| {})
}

pub fn evolve_naive(
    settings: &EvolutionSettings,
    ctx: &FitnessContext,
) -> Result<EvolutionResult, ConfigError> {
    evolve_with(settings, ctx, Strategy::Naive, &mut |_, _| {})
}

pub fn random_search(
    settings: &EvolutionSettings,
    ctx: &FitnessContext,
) -> Result<EvolutionResult, ConfigError> {
    evolve_with(settings, ctx, Strategy::Random, &mut |_, _| {})
}
