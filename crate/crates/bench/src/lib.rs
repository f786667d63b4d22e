//! Shared fixtures for the criterion benches.

use ail_core::{generate_column, generate_queries, Aggregate, Column, Query};

pub const SEED: u64 = 42;

/// A shuffled column of `n` distinct keys and `count` queries over it.
pub fn fixture(n: usize, count: usize, selectivity: f64) -> (Column, Vec<Query>) {
    let column = generate_column(n, SEED);
    let queries = generate_queries(count, n, selectivity, Aggregate::Sum, SEED);
    (column, queries)
}
