use crate::Key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregate {
    /// `select count(*) ... where v1 < A < v2`
    Count,
    /// `select sum(A) ... where v1 < A < v2`
    Sum,
}

impl Aggregate {
    /// Aggregates keys already known to qualify.
    pub fn over(self, keys: &[Key]) -> i128 {
        match self {
            Aggregate::Count => keys.len() as i128,
            Aggregate::Sum => keys.iter().map(|&k| k as i128).sum(),
        }
    }

    /// Aggregates the keys of `keys` that satisfy `low < k < high`.
    pub fn over_filtered(self, keys: &[Key], low: Key, high: Key) -> i128 {
        let hits = keys.iter().filter(|&&k| low < k && k < high);
        match self {
            Aggregate::Count => hits.count() as i128,
            Aggregate::Sum => hits.map(|&k| k as i128).sum(),
        }
    }
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregate::Count => "count",
            Aggregate::Sum => "sum",
        })
    }
}

impl std::str::FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "count" => Ok(Aggregate::Count),
            "sum" => Ok(Aggregate::Sum),
            other => Err(format!("unknown aggregate '{other}' (expected count or sum)")),
        }
    }
}

/// A range aggregate with strict bounds on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub seq: u64,
    pub low: Key,
    pub high: Key,
    pub agg: Aggregate,
}

impl Query {
    pub fn new(seq: u64, low: Key, high: Key, agg: Aggregate) -> Self {
        debug_assert!(low < high);
        Self { seq, low, high, agg }
    }
}
