//! Deterministic data and query generation, multi-client experiments and
//! verification against a scan oracle.

use std::fmt;
use std::sync::Barrier;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::column::{Column, ColumnId};
use crate::engine::{Engine, ExecOptions, Latching, Method, Policy, QueryMetrics, Session};
use crate::error::{Error, Result};
use crate::latch::LatchStatsSnapshot;
use crate::query::{Aggregate, Query};
use crate::Key;

/// Recorded in output metadata so runs can be reproduced.
pub const PRNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.3, seed_from_u64; column on stream 0, queries on stream 1)";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperimentConfig {
    pub n_tuples: usize,
    pub method: Method,
    pub latching: Latching,
    pub policy: Policy,
    pub clients: usize,
    pub total_queries: usize,
    /// Fraction of tuples each query selects.
    pub selectivity: f64,
    pub agg: Aggregate,
    pub seed: u64,
    /// Initial run size for the merge methods; `None` splits into four.
    pub run_capacity: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_tuples: 10_000_000,
            method: Method::Crack,
            latching: Latching::Piece,
            policy: Policy::Block,
            clients: 1,
            total_queries: 1024,
            selectivity: 0.0001,
            agg: Aggregate::Sum,
            seed: 42,
            run_capacity: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.clients == 0 {
            return bad("at least one client is required".into());
        }
        if self.total_queries % self.clients != 0 {
            return bad(format!(
                "{} queries cannot be split evenly across {} clients",
                self.total_queries, self.clients
            ));
        }
        if !(self.selectivity > 0.0 && self.selectivity <= 1.0) {
            return bad(format!("selectivity {} is outside (0, 1]", self.selectivity));
        }
        if self.latching == Latching::None && self.clients > 1 {
            return bad("latch mode none is only valid with a single client".into());
        }
        if self.run_capacity == Some(0) {
            return bad("run capacity must be at least 1".into());
        }
        if self.n_tuples > u32::MAX as usize {
            return bad(format!("{} tuples exceed the 32-bit row id space", self.n_tuples));
        }
        Ok(())
    }

    pub fn exec_options(&self) -> ExecOptions {
        ExecOptions {
            method: self.method,
            latching: self.latching,
            policy: self.policy,
        }
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tuples={} method={} latch={} policy={} clients={} queries={} selectivity={} agg={} seed={} run_capacity={}",
            self.n_tuples,
            self.method,
            self.latching,
            self.policy,
            self.clients,
            self.total_queries,
            self.selectivity,
            self.agg,
            self.seed,
            self.run_capacity.map_or("default".to_string(), |c| c.to_string()),
        )
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// The values `0..n` in a seed-determined random order.
pub fn generate_column(n: usize, seed: u64) -> Column {
    let mut keys: Vec<Key> = (0..n as Key).collect();
    keys.shuffle(&mut rng(seed, 0));
    Column::new(ColumnId(0), keys)
}

/// Range width for `selectivity` over a dense domain of `n` keys.
pub fn range_width(n: usize, selectivity: f64) -> Key {
    ((selectivity * n as f64).round() as Key).max(1)
}

/// Random ranges that each select exactly `range_width(n, s)` keys of the
/// domain `0..n`.
pub fn generate_queries(n_queries: usize, n: usize, selectivity: f64, agg: Aggregate, seed: u64) -> Vec<Query> {
    let w = range_width(n, selectivity);
    // The last window that still lies inside the domain is (n-w-1, n).
    let max_low = (n as Key - w - 1).max(-1);
    let mut r = rng(seed, 1);
    (0..n_queries)
        .map(|i| {
            let v1 = r.gen_range(-1..=max_low);
            Query::new(i as u64, v1, v1 + w + 1, agg)
        })
        .collect()
}

/// Scan-oracle answers for every query, computed block by block so each
/// block of the column is read once for all queries.
pub fn oracle_answers(column: &Column, queries: &[Query]) -> Vec<i128> {
    const BLOCK: usize = 1 << 14;
    let mut out = vec![0i128; queries.len()];
    for block in column.keys().chunks(BLOCK) {
        for (acc, q) in out.iter_mut().zip(queries) {
            *acc += q.agg.over_filtered(block, q.low, q.high);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecileStats {
    pub queries: usize,
    pub mean_response_ns: f64,
    pub mean_wait_ns: f64,
    pub mean_crack_ns: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// All clients' metrics in wall-clock completion order.
    pub metrics: Vec<QueryMetrics>,
    pub elapsed_ns: u64,
    pub queries_per_second: f64,
    pub latch_stats: LatchStatsSnapshot,
}

impl ExperimentResult {
    pub fn new(config: ExperimentConfig, mut metrics: Vec<QueryMetrics>, elapsed_ns: u64, latch_stats: LatchStatsSnapshot) -> Self {
        metrics.sort_by_key(|m| (m.completed_ns, m.seq));
        let secs = elapsed_ns as f64 / 1e9;
        let queries_per_second = if secs > 0.0 { metrics.len() as f64 / secs } else { 0.0 };
        Self {
            config,
            metrics,
            elapsed_ns,
            queries_per_second,
            latch_stats,
        }
    }

    /// Mean response time of the first `i + 1` queries, for every `i`.
    pub fn running_average(&self) -> Vec<f64> {
        running_average(self.metrics.iter().map(|m| m.response_ns))
    }

    /// Ten consecutive slices of the completion order.
    pub fn deciles(&self) -> Vec<DecileStats> {
        deciles(&self.metrics)
    }

    pub fn total_wait_ns(&self) -> u64 {
        self.metrics.iter().map(|m| m.wait_ns).sum()
    }

    pub fn total_crack_ns(&self) -> u64 {
        self.metrics.iter().map(|m| m.crack_ns).sum()
    }
}

pub fn running_average(values: impl IntoIterator<Item = u64>) -> Vec<f64> {
    let mut sum = 0f64;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v as f64;
            sum / (i + 1) as f64
        })
        .collect()
}

pub fn deciles(metrics: &[QueryMetrics]) -> Vec<DecileStats> {
    let n = metrics.len();
    (0..10)
        .map(|d| {
            let slice = &metrics[d * n / 10..(d + 1) * n / 10];
            let mean = |f: fn(&QueryMetrics) -> u64| {
                if slice.is_empty() {
                    0.0
                } else {
                    slice.iter().map(f).sum::<u64>() as f64 / slice.len() as f64
                }
            };
            DecileStats {
                queries: slice.len(),
                mean_response_ns: mean(|m| m.response_ns),
                mean_wait_ns: mean(|m| m.wait_ns),
                mean_crack_ns: mean(|m| m.crack_ns),
            }
        })
        .collect()
}

/// A configured experiment: its column, query list and engine. Running it
/// more than once keeps refining the same indexes.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub column: Column,
    pub queries: Vec<Query>,
    pub engine: Engine,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let column = generate_column(config.n_tuples, config.seed);
        Self::with_column(config, column)
    }

    /// Uses a given column; queries are still generated over `0..len`.
    pub fn with_column(mut config: ExperimentConfig, column: Column) -> Result<Self> {
        config.n_tuples = column.len();
        config.validate()?;
        let queries = generate_queries(
            config.total_queries,
            config.n_tuples,
            config.selectivity,
            config.agg,
            config.seed,
        );
        let engine = Engine::new(config.run_capacity);
        engine.add_column(column.clone())?;
        Ok(Self {
            config,
            column,
            queries,
            engine,
        })
    }

    /// Client `i` runs queries `[i*Q/C, (i+1)*Q/C)`; all clients start
    /// together.
    pub fn run(&self) -> Result<ExperimentResult> {
        let c = self.config.clients;
        let per_client = self.queries.len() / c;
        let barrier = Barrier::new(c);
        let opts = self.config.exec_options();
        let id = self.column.id();
        let epoch = Instant::now();
        let outcomes: Vec<Result<Vec<QueryMetrics>>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .queries
                .chunks(per_client.max(1))
                .enumerate()
                .map(|(i, chunk)| {
                    let barrier = &barrier;
                    let engine = &self.engine;
                    s.spawn(move || {
                        let session = Session::new(engine, i as u32, id, opts).with_epoch(epoch);
                        barrier.wait();
                        session.run(chunk)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        let elapsed = epoch.elapsed();
        let mut metrics = Vec::with_capacity(self.queries.len());
        for o in outcomes {
            metrics.extend(o?);
        }
        Ok(ExperimentResult::new(
            self.config,
            metrics,
            elapsed.as_nanos() as u64,
            self.engine.latch_stats(),
        ))
    }

    /// Structural checks on every index the run created.
    pub fn check_invariants(&mut self) -> std::result::Result<(), String> {
        self.engine.check_invariants(self.column.id())?;
        match self.engine.latches().live_records() {
            0 => Ok(()),
            n => Err(format!("{n} latch records still live after the run")),
        }
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentResult> {
    Experiment::prepare(config)?.run()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub seq: u64,
    pub expected: i128,
    pub actual: i128,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "query {} returned {} but the scan oracle gives {}",
            self.seq, self.actual, self.expected
        )
    }
}

/// Compares recorded results with oracle answers indexed by query seq.
pub fn check_results(metrics: &[QueryMetrics], expected: &[i128]) -> std::result::Result<usize, Divergence> {
    let mut ordered: Vec<&QueryMetrics> = metrics.iter().collect();
    ordered.sort_by_key(|m| m.seq);
    for m in ordered {
        let want = expected.get(m.seq as usize).copied().ok_or(Divergence {
            seq: m.seq,
            expected: i128::MIN,
            actual: m.result,
        })?;
        if m.result != want {
            return Err(Divergence {
                seq: m.seq,
                expected: want,
                actual: m.result,
            });
        }
    }
    Ok(metrics.len())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyReport {
    Ok { queries: usize },
    Diverged(Divergence),
    MissingQueries { expected: usize, recorded: usize },
    BrokenIndex(String),
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, VerifyReport::Ok { .. })
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyReport::Ok { queries } => write!(f, "OK, {queries} queries verified"),
            VerifyReport::Diverged(d) => write!(f, "divergence: {d}"),
            VerifyReport::MissingQueries { expected, recorded } => {
                write!(f, "expected {expected} query results, {recorded} recorded")
            }
            VerifyReport::BrokenIndex(e) => write!(f, "index invariant violated: {e}"),
        }
    }
}

/// Checks a finished run against the scan oracle and its indexes' invariants.
pub fn verify_run(experiment: &mut Experiment, result: &ExperimentResult) -> VerifyReport {
    if result.metrics.len() != experiment.queries.len() {
        return VerifyReport::MissingQueries {
            expected: experiment.queries.len(),
            recorded: result.metrics.len(),
        };
    }
    let expected = oracle_answers(&experiment.column, &experiment.queries);
    if let Err(d) = check_results(&result.metrics, &expected) {
        return VerifyReport::Diverged(d);
    }
    if let Err(e) = experiment.check_invariants() {
        return VerifyReport::BrokenIndex(e);
    }
    VerifyReport::Ok {
        queries: result.metrics.len(),
    }
}

/// Runs the experiment and verifies it.
pub fn verify(config: ExperimentConfig) -> Result<(ExperimentResult, VerifyReport)> {
    let mut experiment = Experiment::prepare(config)?;
    let result = experiment.run()?;
    let report = verify_run(&mut experiment, &result);
    Ok((result, report))
}
