//! Query operators and per-client execution.
//!
//! An [`Engine`] owns the registered columns, their lazily created indexes and
//! the latch table. A [`Session`] is one client: it runs queries one after
//! another and records, per query, the response time, the time spent waiting
//! for latches and the time spent refining an index.
//!
//! Latching follows two phases per query. Refinement runs under exclusive
//! latches which are released as soon as it is done; aggregation then takes
//! shared latches. Cut positions are permanent, so a range computed in the
//! first phase stays valid in the second even if other clients crack inside
//! it meanwhile.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::column::{Column, ColumnId};
use crate::cracking::CrackBound;
use crate::error::{Error, Result};
use crate::index::CrackerIndex;
use crate::latch::{
    acquire_range_shared, redetermine, Acquired, Grant, GrantSet, LatchMode, LatchStatsSnapshot,
    LatchTable, LatchTarget, Redetermined,
};
use crate::merging::{MergeIndex, MergeMode, PartitionId, Refinement};
use crate::query::{Aggregate, Query};
use crate::toc::{Location, PositionRange};
use crate::{Key, Offset, RowId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Scan,
    Sort,
    Crack,
    Merge,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Scan,
        Method::Sort,
        Method::Crack,
        Method::Merge,
        Method::Hybrid,
    ];

    /// Whether queries of this method refine a shared index.
    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::Crack | Method::Merge | Method::Hybrid)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Scan => "scan",
            Method::Sort => "sort",
            Method::Crack => "crack",
            Method::Merge => "merge",
            Method::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected scan, sort, crack, merge or hybrid)"))
    }
}

/// Latch granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Latching {
    /// No concurrency control; only valid with a single client.
    None,
    Column,
    Piece,
}

impl fmt::Display for Latching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Latching::None => "none",
            Latching::Column => "column",
            Latching::Piece => "piece",
        })
    }
}

impl FromStr for Latching {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Latching::None),
            "column" => Ok(Latching::Column),
            "piece" => Ok(Latching::Piece),
            other => Err(format!("unknown latch mode '{other}' (expected none, column or piece)")),
        }
    }
}

/// What a query does when refinement would conflict with other clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Policy {
    /// Wait for the latch.
    #[default]
    Block,
    /// Skip refinement whose latch is not immediately available.
    Forgo,
    /// Stop refining once the budget, counted from query start, is spent.
    /// Checked only between the two bound cracks or between partition steps.
    EarlyTerminate(Duration),
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Block => f.write_str("block"),
            Policy::Forgo => f.write_str("forgo"),
            Policy::EarlyTerminate(d) => write!(f, "early:{}", d.as_millis()),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "block" => Ok(Policy::Block),
            "forgo" => Ok(Policy::Forgo),
            _ => {
                let ms = s
                    .strip_prefix("early:")
                    .ok_or_else(|| format!("unknown policy '{s}' (expected block, forgo or early:<ms>)"))?;
                let ms: u64 = ms
                    .parse()
                    .map_err(|_| format!("early-termination budget '{ms}' is not a whole number of ms"))?;
                Ok(Policy::EarlyTerminate(Duration::from_millis(ms)))
            }
        }
    }
}

/// Per-query measurements. All times are in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryMetrics {
    pub seq: u64,
    pub client_id: u32,
    pub response_ns: u64,
    /// Sum over every latch request of (grant time - request time).
    pub wait_ns: u64,
    /// Time spent creating or refining an index under exclusive latches.
    pub crack_ns: u64,
    pub result: i128,
    /// Completion time relative to the session epoch; orders queries across
    /// clients by wall clock.
    pub completed_ns: u64,
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u64::MAX as u128) as u64
}

/// One pass over the column.
pub fn scan_query(column: &Column, q: &Query) -> i128 {
    q.agg.over_filtered(column.keys(), q.low, q.high)
}

/// A fully sorted copy of a column with aligned row ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortedIndex {
    keys: Vec<Key>,
    rows: Vec<RowId>,
}

impl SortedIndex {
    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn rows(&self) -> &[RowId] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub fn build_sorted_index(column: &Column) -> SortedIndex {
    let mut pairs: Vec<(Key, RowId)> = column
        .keys()
        .iter()
        .enumerate()
        .map(|(r, &k)| (k, r as RowId))
        .collect();
    pairs.sort_unstable();
    let (keys, rows) = pairs.into_iter().unzip();
    SortedIndex { keys, rows }
}

pub fn sorted_query(si: &SortedIndex, q: &Query) -> i128 {
    let a = si.keys.partition_point(|&k| k <= q.low);
    let b = si.keys.partition_point(|&k| k < q.high);
    q.agg.over(&si.keys[a..b.max(a)])
}

struct ColumnState {
    column: Column,
    cracker: OnceLock<CrackerIndex>,
    runs: OnceLock<MergeIndex>,
    crack_sort: OnceLock<MergeIndex>,
    sorted: OnceLock<SortedIndex>,
    // Latch mode in use by running adaptive queries and how many there are.
    gate: Mutex<(Latching, usize)>,
}

/// Registered columns, their indexes and the latch table.
pub struct Engine {
    latches: LatchTable,
    columns: RwLock<HashMap<ColumnId, Arc<ColumnState>>>,
    run_capacity: Option<usize>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("columns", &self.columns.read().len())
            .field("run_capacity", &self.run_capacity)
            .finish()
    }
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(None)
    }
}

/// Default capacity of merge runs and crack-sort partitions: four of them.
pub fn default_run_capacity(n: usize) -> usize {
    n.div_ceil(4).max(1)
}

impl Engine {
    /// `run_capacity` sizes the initial runs of the merge methods; `None`
    /// means [`default_run_capacity`] of each column.
    pub fn new(run_capacity: Option<usize>) -> Self {
        Self {
            latches: LatchTable::new(),
            columns: RwLock::new(HashMap::new()),
            run_capacity,
        }
    }

    pub fn add_column(&self, column: Column) -> Result<ColumnId> {
        if self.run_capacity == Some(0) {
            return Err(Error::InvalidConfig("run capacity must be at least 1".into()));
        }
        let id = column.id();
        let mut columns = self.columns.write();
        if columns.contains_key(&id) {
            return Err(Error::InvalidConfig(format!("{id} is already registered")));
        }
        columns.insert(
            id,
            Arc::new(ColumnState {
                column,
                cracker: OnceLock::new(),
                runs: OnceLock::new(),
                crack_sort: OnceLock::new(),
                sorted: OnceLock::new(),
                gate: Mutex::new((Latching::None, 0)),
            }),
        );
        Ok(id)
    }

    pub fn latches(&self) -> &LatchTable {
        &self.latches
    }

    pub fn latch_stats(&self) -> LatchStatsSnapshot {
        self.latches.stats()
    }

    pub fn column(&self, id: ColumnId) -> Option<Column> {
        self.columns.read().get(&id).map(|s| s.column.clone())
    }

    fn state_mut(&mut self, id: ColumnId) -> Option<&mut ColumnState> {
        self.columns.get_mut().get_mut(&id).and_then(Arc::get_mut)
    }

    /// The cracker index, if a query created one.
    pub fn cracker_mut(&mut self, id: ColumnId) -> Option<&mut CrackerIndex> {
        self.state_mut(id)?.cracker.get_mut()
    }

    pub fn merge_index_mut(&mut self, id: ColumnId, mode: MergeMode) -> Option<&mut MergeIndex> {
        let st = self.state_mut(id)?;
        match mode {
            MergeMode::Adaptive => st.runs.get_mut(),
            MergeMode::CrackSort => st.crack_sort.get_mut(),
        }
    }

    pub fn sorted_index(&mut self, id: ColumnId) -> Option<&SortedIndex> {
        self.state_mut(id)?.sorted.get()
    }

    /// Runs the structural checks of every index created for `id`.
    pub fn check_invariants(&mut self, id: ColumnId) -> std::result::Result<(), String> {
        let st = self
            .state_mut(id)
            .ok_or_else(|| format!("{id} is unknown or still in use"))?;
        let column = st.column.clone();
        if let Some(idx) = st.cracker.get_mut() {
            idx.check_invariants(&column).map_err(|e| format!("cracker index: {e}"))?;
        }
        if let Some(mi) = st.runs.get_mut() {
            mi.check_invariants(&column).map_err(|e| format!("merge index: {e}"))?;
        }
        if let Some(mi) = st.crack_sort.get_mut() {
            mi.check_invariants(&column).map_err(|e| format!("crack-sort index: {e}"))?;
        }
        if let Some(si) = st.sorted.get() {
            let mut keys = column.keys().to_vec();
            keys.sort_unstable();
            if si.keys != keys {
                return Err("sorted index: keys differ from the sorted column".into());
            }
            if si.rows.iter().zip(&si.keys).any(|(&r, &k)| column.keys()[r as usize] != k) {
                return Err("sorted index: row ids misaligned".into());
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct Meter {
    wait: Duration,
    crack: Duration,
}

impl Meter {
    fn waited(&mut self, g: &Grant<'_>) {
        self.wait += g.waited();
    }

    fn crack<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.crack += t.elapsed();
        out
    }
}

struct Budget(Option<Instant>);

impl Budget {
    fn keep_going(&self) -> bool {
        self.0.map_or(true, |deadline| Instant::now() < deadline)
    }
}

/// Outcome of trying to place one cut in piece mode.
enum Cut {
    Done(Offset),
    Refused,
}

/// Leaves the column's mode gate when dropped.
struct GateTicket<'a>(&'a ColumnState);

impl Drop for GateTicket<'_> {
    fn drop(&mut self) {
        self.0.gate.lock().1 -= 1;
    }
}

/// How one client executes its queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    pub method: Method,
    pub latching: Latching,
    pub policy: Policy,
}

/// One client of an [`Engine`], bound to a column.
pub struct Session<'e> {
    engine: &'e Engine,
    client_id: u32,
    column: ColumnId,
    opts: ExecOptions,
    epoch: Instant,
}

impl<'e> Session<'e> {
    pub fn new(engine: &'e Engine, client_id: u32, column: ColumnId, opts: ExecOptions) -> Self {
        Self {
            engine,
            client_id,
            column,
            opts,
            epoch: Instant::now(),
        }
    }

    /// Measure completion times from `epoch` instead of session creation.
    pub fn with_epoch(mut self, epoch: Instant) -> Self {
        self.epoch = epoch;
        self
    }

    fn latched(&self) -> bool {
        self.opts.latching != Latching::None
    }

    fn table(&self) -> &'e LatchTable {
        &self.engine.latches
    }

    /// Runs the queries in order.
    pub fn run(&self, queries: &[Query]) -> Result<Vec<QueryMetrics>> {
        queries.iter().map(|q| self.execute(q)).collect()
    }

    pub fn execute(&self, q: &Query) -> Result<QueryMetrics> {
        if q.low >= q.high {
            return Err(Error::InvalidBounds {
                low: q.low,
                high: q.high,
            });
        }
        let start = Instant::now();
        let mut meter = Meter::default();
        let budget = Budget(match self.opts.policy {
            Policy::EarlyTerminate(d) => Some(start + d),
            _ => None,
        });
        let st = self.lookup(&mut meter)?;
        let result = match self.opts.method {
            Method::Scan => scan_query(&st.column, q),
            Method::Sort => sorted_query(st.sorted.get_or_init(|| build_sorted_index(&st.column)), q),
            Method::Crack => {
                let _ticket = self.enter(&st)?;
                let idx = self.init(&st.cracker, || Ok(CrackerIndex::new(&st.column)), &mut meter)?;
                self.cracked_query(idx, q, &mut meter, &budget)
            }
            Method::Merge | Method::Hybrid => {
                let _ticket = self.enter(&st)?;
                let cap = self
                    .engine
                    .run_capacity
                    .unwrap_or_else(|| default_run_capacity(st.column.len()));
                let mi = if self.opts.method == Method::Merge {
                    self.init(&st.runs, || MergeIndex::init_runs(&st.column, cap), &mut meter)?
                } else {
                    self.init(
                        &st.crack_sort,
                        || MergeIndex::init_unsorted_partitions(&st.column, cap),
                        &mut meter,
                    )?
                };
                self.merged_query(mi, q, &mut meter, &budget)
            }
        };
        let end = Instant::now();
        Ok(QueryMetrics {
            seq: q.seq,
            client_id: self.client_id,
            response_ns: nanos(end - start),
            wait_ns: nanos(meter.wait),
            crack_ns: nanos(meter.crack),
            result,
            completed_ns: nanos(end.saturating_duration_since(self.epoch)),
        })
    }

    /// Looks the column up under a shared registry latch.
    fn lookup(&self, meter: &mut Meter) -> Result<Arc<ColumnState>> {
        let g = self.latched().then(|| self.table().acquire(LatchTarget::Registry, LatchMode::Shared, None));
        if let Some(g) = &g {
            meter.waited(g);
        }
        let st = self.engine.columns.read().get(&self.column).cloned();
        drop(g);
        st.ok_or_else(|| Error::InvalidConfig(format!("{} is not registered", self.column)))
    }

    /// Admits an adaptive query. Without latches the query must be alone on
    /// the column, and latched queries must agree on the latch mode, since
    /// neither discipline excludes the other.
    fn enter<'s>(&self, st: &'s ColumnState) -> Result<GateTicket<'s>> {
        let mut gate = st.gate.lock();
        let (mode, active) = *gate;
        if active > 0 && (mode != self.opts.latching || mode == Latching::None) {
            return Err(Error::InvalidConfig(format!(
                "{} is being refined under latch mode {mode}; a concurrent {} query is unsafe",
                self.column, self.opts.latching
            )));
        }
        *gate = (self.opts.latching, active + 1);
        Ok(GateTicket(st))
    }

    /// Creates an index on first use, under an exclusive registry latch.
    fn init<'s, T>(
        &self,
        cell: &'s OnceLock<T>,
        create: impl FnOnce() -> Result<T>,
        meter: &mut Meter,
    ) -> Result<&'s T> {
        if let Some(v) = cell.get() {
            return Ok(v);
        }
        let g = self
            .latched()
            .then(|| self.table().acquire(LatchTarget::Registry, LatchMode::Exclusive, None));
        if let Some(g) = &g {
            meter.waited(g);
        }
        if cell.get().is_none() {
            let v = meter.crack(create)?;
            let _ = cell.set(v);
        }
        drop(g);
        Ok(cell.get().expect("initialized above"))
    }

    fn forgo(&self) -> bool {
        self.opts.policy == Policy::Forgo
    }

    /// Exclusive latch, or `None` if the policy forgoes a busy one.
    fn latch_exclusive(&self, target: LatchTarget, meter: &mut Meter) -> Option<Grant<'e>> {
        let g = if self.forgo() {
            self.table().try_acquire(target, LatchMode::Exclusive)?
        } else {
            self.table().acquire(target, LatchMode::Exclusive, None)
        };
        meter.waited(&g);
        Some(g)
    }

    fn latch_shared(&self, target: LatchTarget, meter: &mut Meter) -> Grant<'e> {
        let g = self.table().acquire(target, LatchMode::Shared, None);
        meter.waited(&g);
        g
    }

    fn cracked_query(&self, idx: &CrackerIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> i128 {
        if idx.is_empty() {
            return 0;
        }
        match self.opts.latching {
            Latching::Piece => self.cracked_piece_mode(idx, q, meter, budget),
            Latching::Column | Latching::None => self.cracked_column_mode(idx, q, meter, budget),
        }
    }

    fn cracked_column_mode(&self, idx: &CrackerIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> i128 {
        let col = LatchTarget::Column(idx.column_id());
        let latched = self.latched();
        let range = if latched {
            match self.latch_exclusive(col, meter) {
                // SAFETY: the exclusive column latch excludes every other
                // reader and writer of this index.
                Some(g) => {
                    let r = unsafe { crack_whole_column(idx, q, meter, budget) };
                    drop(g);
                    r
                }
                None => None,
            }
        } else {
            // SAFETY: the mode gate admitted this query as the column's only
            // unlatched user.
            unsafe { crack_whole_column(idx, q, meter, budget) }
        };
        if let (Some(r), Aggregate::Count) = (range, q.agg) {
            return r.len() as i128;
        }
        let g = latched.then(|| self.latch_shared(col, meter));
        // SAFETY: a shared column latch (or sole access) keeps writers out.
        let out = unsafe {
            match range {
                Some(r) => q.agg.over(idx.values_in(r.as_range())),
                None => walk_filtered(idx, q, |_| None),
            }
        };
        drop(g);
        out
    }

    fn cracked_piece_mode(&self, idx: &CrackerIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> i128 {
        let (lo, hi) = (CrackBound::lower(q.low), CrackBound::upper(q.high));
        let mut range = self.crack_both_in_one_piece(idx, lo, hi, meter);
        if range.is_none() {
            let (a, b) = match self.opts.policy {
                Policy::Block => match self.piece_cut(idx, lo, false, meter) {
                    Cut::Done(a) => (Some(a), done(self.piece_cut(idx, hi, true, meter))),
                    // The low piece is busy: do the independent high cut first.
                    Cut::Refused => {
                        let b = done(self.piece_cut(idx, hi, true, meter));
                        (Some(self.blocking_cut(idx, lo, meter)), b)
                    }
                },
                Policy::Forgo => (
                    done(self.piece_cut(idx, lo, false, meter)),
                    done(self.piece_cut(idx, hi, false, meter)),
                ),
                Policy::EarlyTerminate(_) => {
                    let a = self.blocking_cut(idx, lo, meter);
                    let b = budget
                        .keep_going()
                        .then(|| self.blocking_cut(idx, hi, meter));
                    (Some(a), b)
                }
            };
            if let (Some(a), Some(b)) = (a, b) {
                range = Some(PositionRange::new(a, b));
            }
        }
        match (range, q.agg) {
            (Some(r), Aggregate::Count) => r.len() as i128,
            (Some(r), Aggregate::Sum) => {
                let grants = acquire_range_shared(self.table(), idx, r);
                meter.wait += grants.waited();
                // SAFETY: shared latches on every piece of `r` are held.
                let out = q.agg.over(unsafe { idx.values_in(r.as_range()) });
                grants.release_all();
                out
            }
            (None, _) => {
                let table = self.table();
                let mut grants = GrantSet::new();
                // SAFETY: each piece is read only after its shared latch is
                // granted; the latches are held until the walk ends.
                let out = unsafe {
                    walk_filtered(idx, q, |start| {
                        let g = table.acquire(LatchTarget::Piece(idx.column_id(), start), LatchMode::Shared, None);
                        meter.waited(&g);
                        grants.push(g);
                        Some(())
                    })
                };
                grants.release_all();
                out
            }
        }
    }

    /// When both bounds fall into the same piece, cracks it in three under
    /// one latch. Returns `None` if the pieces differ or anything changed.
    fn crack_both_in_one_piece(
        &self,
        idx: &CrackerIndex,
        lo: CrackBound,
        hi: CrackBound,
        meter: &mut Meter,
    ) -> Option<PositionRange> {
        let (lo_cut, hi_cut) = (lo.boundary(), hi.boundary());
        let p = match (idx.locate(&lo_cut)?, idx.locate(&hi_cut)?) {
            (Location::Inside(p), Location::Inside(q)) if p.start == q.start => p,
            (Location::Boundary(a), Location::Boundary(b)) => return Some(PositionRange::new(a, b)),
            _ => return None,
        };
        let target = LatchTarget::Piece(idx.column_id(), p.start);
        let g = if self.forgo() {
            self.table().try_acquire(target, LatchMode::Exclusive)?
        } else {
            match self.table().acquire_or_retry(target, LatchMode::Exclusive, Some(lo.key)) {
                Acquired::Granted(g) => g,
                Acquired::Retry { waited } => {
                    meter.wait += waited;
                    return None;
                }
            }
        };
        meter.waited(&g);
        let cur = idx.piece_at(p.start).expect("piece starts are permanent");
        if !(cur.splits_at(&lo_cut) && cur.splits_at(&hi_cut)) {
            g.release();
            return None;
        }
        // SAFETY: the exclusive latch on `cur` is held.
        let (a, b) = meter
            .crack(|| unsafe { idx.crack_in_three_latched(&cur, lo, hi) })
            .expect("bounds checked against the latched piece");
        g.release_after_split();
        Some(PositionRange::new(a, b))
    }

    fn blocking_cut(&self, idx: &CrackerIndex, cut: CrackBound, meter: &mut Meter) -> Offset {
        match self.piece_cut(idx, cut, true, meter) {
            Cut::Done(o) => o,
            Cut::Refused => unreachable!("blocking cuts are never refused"),
        }
    }

    /// Places one cut, latching only the piece it falls into. A blocking
    /// request queues by its bound; on wake-up it re-determines which piece
    /// holds the bound and moves on if that piece is no longer the latched one.
    fn piece_cut(&self, idx: &CrackerIndex, cut: CrackBound, blocking: bool, meter: &mut Meter) -> Cut {
        let boundary = cut.boundary();
        loop {
            let piece = match idx.locate(&boundary) {
                Some(Location::Inside(p)) => p,
                Some(Location::Boundary(off)) => return Cut::Done(off),
                None => return Cut::Done(0),
            };
            let target = LatchTarget::Piece(idx.column_id(), piece.start);
            let g = if blocking {
                match self.table().acquire_or_retry(target, LatchMode::Exclusive, Some(cut.key)) {
                    Acquired::Granted(g) => g,
                    Acquired::Retry { waited } => {
                        meter.wait += waited;
                        continue;
                    }
                }
            } else {
                match self.table().try_acquire(target, LatchMode::Exclusive) {
                    Some(g) => g,
                    None => return Cut::Refused,
                }
            };
            meter.waited(&g);
            match redetermine(idx, &piece, cut) {
                Redetermined::NoCrack(off) => {
                    g.release();
                    return Cut::Done(off);
                }
                Redetermined::Crack(p) if p.start == piece.start => {
                    // SAFETY: the exclusive latch on the piece starting at
                    // `p.start` is held, and `p` is that piece now.
                    let off = meter
                        .crack(|| unsafe { idx.crack_in_two_latched(&p, cut) })
                        .expect("cut checked against the latched piece");
                    if p.start < off && off < p.end {
                        g.release_after_split();
                    } else {
                        g.release();
                    }
                    return Cut::Done(off);
                }
                Redetermined::Crack(_) => g.release(),
            }
        }
    }

    fn merged_query(&self, mi: &MergeIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> i128 {
        match self.opts.latching {
            Latching::None => {
                let r = refine_timed(mi, q, meter, budget);
                if r.complete {
                    mi.aggregate_final(q.low, q.high, q.agg)
                } else {
                    mi.aggregate_everywhere(q.low, q.high, q.agg)
                }
            }
            Latching::Column => {
                let col = LatchTarget::Column(mi.column_id());
                let complete = match self.latch_exclusive(col, meter) {
                    Some(g) => {
                        let r = refine_timed(mi, q, meter, budget);
                        drop(g);
                        r.complete
                    }
                    None => false,
                };
                let g = self.latch_shared(col, meter);
                let out = if complete {
                    mi.aggregate_final(q.low, q.high, q.agg)
                } else {
                    mi.aggregate_everywhere(q.low, q.high, q.agg)
                };
                drop(g);
                out
            }
            Latching::Piece => self.merged_partition_mode(mi, q, meter, budget),
        }
    }

    /// Per-partition latching: each migration step latches one partition and
    /// the final partition, and commits before the next step starts.
    fn merged_partition_mode(&self, mi: &MergeIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> i128 {
        let col = mi.column_id();
        let fin = LatchTarget::Final(col);
        let g = self.latch_shared(fin, meter);
        let gaps = mi.uncovered(q.low, q.high);
        if gaps.is_empty() {
            let out = mi.aggregate_final(q.low, q.high, q.agg);
            drop(g);
            return out;
        }
        drop(g);

        let n = mi.partition_count();
        let mut complete = true;
        for i in 0..n {
            if i > 0 && !budget.keep_going() {
                complete = false;
                break;
            }
            let Some(gp) = self.latch_exclusive(LatchTarget::Partition(col, PartitionId(i as u32)), meter) else {
                complete = false;
                break;
            };
            let Some(gf) = self.latch_exclusive(fin, meter) else {
                drop(gp);
                complete = false;
                break;
            };
            meter.crack(|| {
                mi.migrate(i, &gaps);
                if i + 1 == n {
                    mi.cover(&gaps);
                }
            });
            drop(gf);
            drop(gp);
        }

        if complete {
            let g = self.latch_shared(fin, meter);
            let out = mi.aggregate_final(q.low, q.high, q.agg);
            drop(g);
            return out;
        }
        let mut grants = GrantSet::new();
        for id in mi.partition_ids() {
            grants.push(self.latch_shared(LatchTarget::Partition(col, id), meter));
        }
        grants.push(self.latch_shared(fin, meter));
        let out = mi.aggregate_everywhere(q.low, q.high, q.agg);
        grants.release_all();
        out
    }
}

/// Refines with the whole index to itself; time counts as crack time only if
/// records actually moved.
fn refine_timed(mi: &MergeIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> Refinement {
    let t = Instant::now();
    let r = mi
        .refine_until(q.low, q.high, || budget.keep_going())
        .expect("bounds validated");
    if r.migrated > 0 {
        meter.crack += t.elapsed();
    }
    r
}

fn done(c: Cut) -> Option<Offset> {
    match c {
        Cut::Done(o) => Some(o),
        Cut::Refused => None,
    }
}

/// Cracks for `q` while holding the whole column; `None` if the budget ran
/// out between the two bound cracks.
///
/// # Safety
/// The caller has exclusive access to `idx`.
unsafe fn crack_whole_column(idx: &CrackerIndex, q: &Query, meter: &mut Meter, budget: &Budget) -> Option<PositionRange> {
    let (lo, hi) = (CrackBound::lower(q.low), CrackBound::upper(q.high));
    let lo_loc = idx.locate(&lo.boundary()).expect("non-empty");
    let hi_loc = idx.locate(&hi.boundary()).expect("non-empty");
    if let (Location::Inside(p), Location::Inside(r)) = (lo_loc, hi_loc) {
        if p.start == r.start {
            let (a, b) = meter
                .crack(|| idx.crack_in_three_latched(&p, lo, hi))
                .expect("fresh piece");
            return Some(PositionRange::new(a, b));
        }
    }
    let a = match lo_loc {
        Location::Boundary(off) => off,
        Location::Inside(p) => meter.crack(|| idx.crack_in_two_latched(&p, lo)).expect("fresh piece"),
    };
    let b = match hi_loc {
        Location::Boundary(off) => off,
        Location::Inside(_) if !budget.keep_going() => return None,
        Location::Inside(p) => meter.crack(|| idx.crack_in_two_latched(&p, hi)).expect("fresh piece"),
    };
    Some(PositionRange::new(a, b))
}

/// Answers `q` without relying on cuts at its bounds: walks the pieces that
/// may hold qualifying keys, aggregating inner pieces whole and filtering the
/// edge ones. `latch(start)` is called before each piece is read.
///
/// # Safety
/// After `latch` returns for a piece, no writer may touch that piece until
/// the walk ends.
unsafe fn walk_filtered(idx: &CrackerIndex, q: &Query, mut latch: impl FnMut(Offset) -> Option<()>) -> i128 {
    if idx.is_empty() {
        return 0;
    }
    let mut pos = idx
        .find_piece(q.low.saturating_add(1))
        .expect("non-empty")
        .start;
    let mut total = 0;
    while pos < idx.len() {
        latch(pos);
        let p = idx.piece_at(pos).expect("piece starts are permanent");
        if p.at_or_above(q.high) {
            break;
        }
        let keys = idx.values_in(p.start..p.end);
        total += if p.within(q.low, q.high) {
            q.agg.over(keys)
        } else {
            q.agg.over_filtered(keys, q.low, q.high)
        };
        pos = p.end;
    }
    total
}

/// Runs one client's queries in order and returns their metrics.
pub fn run_client(
    engine: &Engine,
    client_id: u32,
    column: ColumnId,
    queries: &[Query],
    opts: ExecOptions,
) -> Result<Vec<QueryMetrics>> {
    Session::new(engine, client_id, column, opts).run(queries)
}
