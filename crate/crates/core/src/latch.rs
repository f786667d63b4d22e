//! Short-term latches protecting in-memory index structures.
//!
//! One table serves every latch target (the index registry, whole columns,
//! cracker pieces, merge partitions and final partitions). Each target is a
//! reader/writer latch with two wait queues:
//!
//! * exclusive requests carrying a crack bound are kept sorted by bound, and
//!   the writer granted next is the one in the middle of the queue, so that
//!   the first crack after a conflict splits the contended piece in half;
//! * shared requests wait as one batch and are admitted together when no
//!   writer holds or is queued for the target.
//!
//! Latch records are created on first use and dropped again when a target is
//! free and nobody waits for it.

use std::collections::{HashMap, VecDeque};
use std::marker::PhantomData;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::column::ColumnId;
use crate::cracking::CrackBound;
use crate::index::CrackerIndex;
use crate::merging::PartitionId;
use crate::toc::{Piece, PositionRange};
use crate::{Key, Offset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatchMode {
    Shared,
    Exclusive,
}

/// What a latch protects. The derived order is the global acquisition order
/// used to avoid deadlock: registry, columns, pieces by start offset,
/// partitions by id, and final partitions last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LatchTarget {
    Registry,
    Column(ColumnId),
    Piece(ColumnId, Offset),
    Partition(ColumnId, PartitionId),
    Final(ColumnId),
}

#[derive(Debug)]
struct Slot {
    // Written and read only under the table mutex.
    outcome: AtomicU64,
    cv: Condvar,
}

const PENDING: u64 = 0;
const GRANTED: u64 = 1;
const RETRY: u64 = 2;

impl Slot {
    fn new() -> Arc<Self> {
        Arc::new(Self {
            outcome: AtomicU64::new(PENDING),
            cv: Condvar::new(),
        })
    }

    fn resolve(&self, outcome: u64) {
        self.outcome.store(outcome, Ordering::Relaxed);
        self.cv.notify_one();
    }
}

#[derive(Debug)]
struct QueuedWriter {
    bound: Option<Key>,
    arrival: u64,
    slot: Arc<Slot>,
}

#[derive(Debug, Default)]
struct LatchState {
    shared: usize,
    exclusive: bool,
    // Sorted by (bound, arrival).
    bounded_writers: Vec<QueuedWriter>,
    unbounded_writers: VecDeque<QueuedWriter>,
    readers: Vec<Arc<Slot>>,
}

impl LatchState {
    fn writers_waiting(&self) -> bool {
        !self.bounded_writers.is_empty() || !self.unbounded_writers.is_empty()
    }

    fn is_idle(&self) -> bool {
        self.shared == 0 && !self.exclusive && !self.writers_waiting() && self.readers.is_empty()
    }

    fn enqueue_writer(&mut self, w: QueuedWriter) {
        match w.bound {
            Some(b) => {
                let pos = self
                    .bounded_writers
                    .partition_point(|q| (q.bound, q.arrival) <= (Some(b), w.arrival));
                self.bounded_writers.insert(pos, w);
            }
            None => self.unbounded_writers.push_back(w),
        }
    }

    /// Removes the next writer to admit: the median of the bound-sorted queue
    /// (the ceil(k/2)-th smallest of k), else the oldest unbounded request.
    fn pop_next_writer(&mut self) -> Option<QueuedWriter> {
        let k = self.bounded_writers.len();
        if k > 0 {
            Some(self.bounded_writers.remove((k - 1) / 2))
        } else {
            self.unbounded_writers.pop_front()
        }
    }

    fn check(&self) {
        assert!(
            !(self.exclusive && self.shared > 0),
            "latch held exclusive and shared at once"
        );
    }

    /// Hands the latch to waiters after the last holder left.
    fn admit_waiters(&mut self, stats: &LatchStats) {
        debug_assert!(!self.exclusive && self.shared == 0);
        if let Some(w) = self.pop_next_writer() {
            self.exclusive = true;
            stats.handoffs.fetch_add(1, Ordering::Relaxed);
            w.slot.resolve(GRANTED);
        } else if !self.readers.is_empty() {
            self.shared += self.readers.len();
            for r in self.readers.drain(..) {
                r.resolve(GRANTED);
            }
        }
        self.check();
    }
}

/// Counters for tests and diagnostics.
#[derive(Debug, Default)]
pub struct LatchStats {
    pub acquisitions: AtomicU64,
    pub blocked: AtomicU64,
    /// Exclusive requests on piece targets that had to wait.
    pub blocked_exclusive_piece: AtomicU64,
    pub refused: AtomicU64,
    pub retries: AtomicU64,
    pub handoffs: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatchStatsSnapshot {
    pub acquisitions: u64,
    pub blocked: u64,
    pub blocked_exclusive_piece: u64,
    pub refused: u64,
    pub retries: u64,
    pub handoffs: u64,
}

#[derive(Debug, Default)]
pub struct LatchTable {
    states: Mutex<HashMap<LatchTarget, LatchState>>,
    stats: LatchStats,
    arrivals: AtomicU64,
}

/// A held latch. Released on drop; not transferable between threads.
#[must_use = "dropping a grant releases the latch immediately"]
#[derive(Debug)]
pub struct Grant<'a> {
    table: &'a LatchTable,
    target: LatchTarget,
    mode: LatchMode,
    waited: Duration,
    released: AtomicBool,
    _not_send: PhantomData<*const ()>,
}

impl Grant<'_> {
    pub fn target(&self) -> LatchTarget {
        self.target
    }

    pub fn mode(&self) -> LatchMode {
        self.mode
    }

    /// Time between the request and the grant.
    pub fn waited(&self) -> Duration {
        self.waited
    }

    pub fn release(self) {
        drop(self)
    }

    /// Releases an exclusive latch after the holder split the piece it
    /// protected. The next writer is admitted as usual; every other queued
    /// writer is told to retry, since its bound may now fall in a different
    /// piece that it can latch without waiting.
    pub fn release_after_split(self) {
        assert_eq!(self.mode, LatchMode::Exclusive);
        self.released.store(true, Ordering::Relaxed);
        self.table.release_raw(self.target, self.mode, true);
    }
}

impl Drop for Grant<'_> {
    fn drop(&mut self) {
        if !self.released.swap(true, Ordering::Relaxed) {
            self.table.release_raw(self.target, self.mode, false);
        }
    }
}

/// Outcome of a blocking request that may be bounced back for re-evaluation.
#[derive(Debug)]
pub enum Acquired<'a> {
    Granted(Grant<'a>),
    /// The protected piece changed while waiting; re-determine the target.
    Retry { waited: Duration },
}

/// Shared latches over consecutive pieces, released together.
#[derive(Debug, Default)]
pub struct GrantSet<'a> {
    grants: Vec<Grant<'a>>,
    waited: Duration,
}

impl<'a> GrantSet<'a> {
    pub fn new() -> Self {
        Self {
            grants: Vec::new(),
            waited: Duration::ZERO,
        }
    }

    pub fn push(&mut self, grant: Grant<'a>) {
        self.waited += grant.waited();
        self.grants.push(grant);
    }

    pub fn len(&self) -> usize {
        self.grants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grants.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = LatchTarget> + '_ {
        self.grants.iter().map(Grant::target)
    }

    pub fn waited(&self) -> Duration {
        self.waited
    }

    /// Releases every grant under a single acquisition of the table lock.
    pub fn release_all(mut self) {
        let Some(table) = self.grants.first().map(|g| g.table) else {
            return;
        };
        let mut states = table.states.lock();
        for g in self.grants.drain(..) {
            assert!(std::ptr::eq(g.table, table), "grant set spans latch tables");
            g.released.store(true, Ordering::Relaxed);
            table.release_locked(&mut states, g.target, g.mode, false);
        }
    }
}

impl LatchTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> LatchStatsSnapshot {
        let s = &self.stats;
        LatchStatsSnapshot {
            acquisitions: s.acquisitions.load(Ordering::Relaxed),
            blocked: s.blocked.load(Ordering::Relaxed),
            blocked_exclusive_piece: s.blocked_exclusive_piece.load(Ordering::Relaxed),
            refused: s.refused.load(Ordering::Relaxed),
            retries: s.retries.load(Ordering::Relaxed),
            handoffs: s.handoffs.load(Ordering::Relaxed),
        }
    }

    fn grant(&self, target: LatchTarget, mode: LatchMode, waited: Duration) -> Grant<'_> {
        self.stats.acquisitions.fetch_add(1, Ordering::Relaxed);
        Grant {
            table: self,
            target,
            mode,
            waited,
            released: AtomicBool::new(false),
            _not_send: PhantomData,
        }
    }

    /// Blocks until the latch is granted. A bounded exclusive request joins the
    /// bound-sorted writer queue. Split notifications are absorbed by
    /// re-queueing on the same target.
    pub fn acquire(&self, target: LatchTarget, mode: LatchMode, bound: Option<Key>) -> Grant<'_> {
        let start = Instant::now();
        loop {
            if let Acquired::Granted(mut g) = self.acquire_or_retry(target, mode, bound) {
                g.waited = start.elapsed();
                return g;
            }
        }
    }

    pub fn acquire_or_retry(
        &self,
        target: LatchTarget,
        mode: LatchMode,
        bound: Option<Key>,
    ) -> Acquired<'_> {
        let start = Instant::now();
        let mut states = self.states.lock();
        let st = states.entry(target).or_default();
        let slot = match mode {
            LatchMode::Shared => {
                if !st.exclusive && !st.writers_waiting() {
                    st.shared += 1;
                    st.check();
                    drop(states);
                    return Acquired::Granted(self.grant(target, mode, start.elapsed()));
                }
                let slot = Slot::new();
                st.readers.push(slot.clone());
                slot
            }
            LatchMode::Exclusive => {
                if !st.exclusive && st.shared == 0 && !st.writers_waiting() {
                    st.exclusive = true;
                    st.check();
                    drop(states);
                    return Acquired::Granted(self.grant(target, mode, start.elapsed()));
                }
                if matches!(target, LatchTarget::Piece(..)) {
                    self.stats
                        .blocked_exclusive_piece
                        .fetch_add(1, Ordering::Relaxed);
                }
                let slot = Slot::new();
                let arrival = self.arrivals.fetch_add(1, Ordering::Relaxed);
                st.enqueue_writer(QueuedWriter {
                    bound,
                    arrival,
                    slot: slot.clone(),
                });
                slot
            }
        };
        self.stats.blocked.fetch_add(1, Ordering::Relaxed);
        let outcome = loop {
            match slot.outcome.load(Ordering::Relaxed) {
                PENDING => slot.cv.wait(&mut states),
                o => break o,
            }
        };
        drop(states);
        let waited = start.elapsed();
        if outcome == RETRY {
            self.stats.retries.fetch_add(1, Ordering::Relaxed);
            Acquired::Retry { waited }
        } else {
            Acquired::Granted(self.grant(target, mode, waited))
        }
    }

    /// Grants only if nobody holds or waits for the target.
    pub fn try_acquire(&self, target: LatchTarget, mode: LatchMode) -> Option<Grant<'_>> {
        let start = Instant::now();
        let mut states = self.states.lock();
        let st = states.entry(target).or_default();
        let free = match mode {
            LatchMode::Shared => !st.exclusive && !st.writers_waiting(),
            LatchMode::Exclusive => !st.exclusive && st.shared == 0 && !st.writers_waiting(),
        };
        if !free {
            self.stats.refused.fetch_add(1, Ordering::Relaxed);
            if st.is_idle() {
                states.remove(&target);
            }
            return None;
        }
        match mode {
            LatchMode::Shared => st.shared += 1,
            LatchMode::Exclusive => st.exclusive = true,
        }
        st.check();
        drop(states);
        Some(self.grant(target, mode, start.elapsed()))
    }

    pub fn release(&self, grant: Grant<'_>) {
        drop(grant)
    }

    fn release_raw(&self, target: LatchTarget, mode: LatchMode, split: bool) {
        let mut states = self.states.lock();
        self.release_locked(&mut states, target, mode, split);
    }

    fn release_locked(
        &self,
        states: &mut HashMap<LatchTarget, LatchState>,
        target: LatchTarget,
        mode: LatchMode,
        split: bool,
    ) {
        let st = states
            .get_mut(&target)
            .unwrap_or_else(|| panic!("release of unheld latch {target:?}"));
        match mode {
            LatchMode::Shared => {
                assert!(st.shared > 0, "shared release of {target:?} without a holder");
                st.shared -= 1;
                if st.shared == 0 {
                    st.admit_waiters(&self.stats);
                }
            }
            LatchMode::Exclusive => {
                assert!(st.exclusive, "exclusive release of {target:?} without a holder");
                st.exclusive = false;
                let next = st.pop_next_writer();
                if split {
                    for w in st.bounded_writers.drain(..) {
                        w.slot.resolve(RETRY);
                    }
                }
                match next {
                    Some(w) => {
                        st.exclusive = true;
                        self.stats.handoffs.fetch_add(1, Ordering::Relaxed);
                        w.slot.resolve(GRANTED);
                    }
                    None => st.admit_waiters(&self.stats),
                }
            }
        }
        st.check();
        if st.is_idle() {
            states.remove(&target);
        }
    }

    /// Bounds of the exclusive requests queued on `target`, in queue order.
    pub fn queued_bounds(&self, target: LatchTarget) -> Vec<Option<Key>> {
        let states = self.states.lock();
        states.get(&target).map_or_else(Vec::new, |st| {
            st.bounded_writers
                .iter()
                .chain(st.unbounded_writers.iter())
                .map(|w| w.bound)
                .collect()
        })
    }

    pub fn queued_readers(&self, target: LatchTarget) -> usize {
        self.states.lock().get(&target).map_or(0, |st| st.readers.len())
    }

    /// `(shared holders, exclusive held)` for `target`.
    pub fn holders(&self, target: LatchTarget) -> (usize, bool) {
        self.states
            .lock()
            .get(&target)
            .map_or((0, false), |st| (st.shared, st.exclusive))
    }

    /// Number of latch records currently alive.
    pub fn live_records(&self) -> usize {
        self.states.lock().len()
    }
}

/// Where a writer that waited on a piece has to crack after waking up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Redetermined {
    /// The bound now falls inside this current piece.
    Crack(Piece),
    /// Somebody already cut at exactly this bound; its offset.
    NoCrack(Offset),
}

/// Walks the current pieces starting at `original.start` (which always
/// still begins a piece) and finds the one the bound now falls into.
pub fn redetermine(index: &CrackerIndex, original: &Piece, bound: CrackBound) -> Redetermined {
    let cut = bound.boundary();
    for piece in index.piece_walk(original) {
        if piece.low == Some(cut) {
            return Redetermined::NoCrack(piece.start);
        }
        if piece.high == Some(cut) {
            return Redetermined::NoCrack(piece.end);
        }
        if piece.splits_at(&cut) {
            return Redetermined::Crack(piece);
        }
    }
    // `original` did not hold the bound after all; fall back to a lookup.
    match index.locate(&cut) {
        Some(crate::toc::Location::Inside(p)) => Redetermined::Crack(p),
        Some(crate::toc::Location::Boundary(off)) => Redetermined::NoCrack(off),
        None => Redetermined::NoCrack(0),
    }
}

/// Takes shared latches on every piece of `range`, in ascending offset order.
/// `range` must start and end on piece boundaries, as crack results do.
pub fn acquire_range_shared<'t>(
    table: &'t LatchTable,
    index: &CrackerIndex,
    range: PositionRange,
) -> GrantSet<'t> {
    let column = index.column_id();
    let mut set = GrantSet::new();
    let mut pos = range.start;
    while pos < range.end {
        // Uncontended pieces are granted in one pass under the table lock.
        // A granted piece cannot change, so its end is where the next starts.
        {
            let mut states = table.states.lock();
            let toc = index.toc();
            while pos < range.end {
                let target = LatchTarget::Piece(column, pos);
                let st = states.entry(target).or_default();
                if st.exclusive || st.writers_waiting() {
                    break;
                }
                st.shared += 1;
                set.push(table.grant(target, LatchMode::Shared, Duration::ZERO));
                pos = toc.piece_at(pos).expect("range does not start on a piece boundary").end;
            }
        }
        if pos < range.end {
            set.push(table.acquire(LatchTarget::Piece(column, pos), LatchMode::Shared, None));
            // Holding the latch, the piece starting here can no longer change.
            pos = index.piece_at(pos).expect("range does not start on a piece boundary").end;
        }
    }
    debug_assert_eq!(pos, range.end, "range does not end on a piece boundary");
    set
}


#[cfg(test)]
mod index_tests {
    use super::*;
    use crate::column::Column;

    fn cracked_at_50() -> (CrackerIndex, Piece) {
        let keys: Vec<Key> = (0..100).rev().collect();
        let mut idx = CrackerIndex::new(&Column::new(ColumnId(0), keys));
        let original = idx.find_piece(0).unwrap();
        idx.crack_in_two(&original, CrackBound::upper(50)).unwrap();
        (idx, original)
    }

    #[test]
    fn redetermine_after_split() {
        let (idx, original) = cracked_at_50();
        match redetermine(&idx, &original, CrackBound::upper(30)) {
            Redetermined::Crack(p) => assert_eq!((p.start, p.end), (0, 50)),
            other => panic!("{other:?}"),
        }
        match redetermine(&idx, &original, CrackBound::upper(70)) {
            Redetermined::Crack(p) => assert_eq!((p.start, p.end), (50, 100)),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            redetermine(&idx, &original, CrackBound::upper(50)),
            Redetermined::NoCrack(50)
        );
        // Same cut expressed as a lower bound on 49.
        assert_eq!(
            redetermine(&idx, &original, CrackBound::lower(49)),
            Redetermined::NoCrack(50)
        );
    }

    #[test]
    fn range_shared_latches_in_order() {
        let (mut idx, _) = cracked_at_50();
        idx.crack_select(20, 80).unwrap();
        let table = LatchTable::new();
        let r = PositionRange::new(21, 80);
        let set = acquire_range_shared(&table, &idx, r);
        let targets: Vec<_> = set.targets().collect();
        assert_eq!(
            targets,
            vec![LatchTarget::Piece(ColumnId(0), 21), LatchTarget::Piece(ColumnId(0), 50)]
        );
        assert_eq!(table.holders(LatchTarget::Piece(ColumnId(0), 50)), (1, false));
        set.release_all();
        assert_eq!(table.live_records(), 0);

        assert!(acquire_range_shared(&table, &idx, PositionRange::new(7, 7)).is_empty());
        let whole = CrackerIndex::new(&Column::new(ColumnId(0), vec![1, 2, 3]));
        assert_eq!(acquire_range_shared(&table, &whole, PositionRange::new(0, 3)).len(), 1);
    }

    #[test]
    fn range_shared_waits_for_held_piece_then_continues() {
        let (mut idx, _) = cracked_at_50();
        idx.crack_select(20, 80).unwrap();
        let table = LatchTable::new();
        let held = table.acquire(LatchTarget::Piece(ColumnId(0), 50), LatchMode::Exclusive, None);
        std::thread::scope(|s| {
            let reader = s.spawn(|| {
                let set = acquire_range_shared(&table, &idx, PositionRange::new(21, 80));
                let targets: Vec<_> = set.targets().collect();
                set.release_all();
                targets
            });
            while table.queued_readers(LatchTarget::Piece(ColumnId(0), 50)) == 0 {
                std::thread::yield_now();
            }
            // The first piece was granted before the reader blocked.
            assert_eq!(table.holders(LatchTarget::Piece(ColumnId(0), 21)), (1, false));
            held.release();
            assert_eq!(
                reader.join().unwrap(),
                vec![LatchTarget::Piece(ColumnId(0), 21), LatchTarget::Piece(ColumnId(0), 50)]
            );
        });
        assert_eq!(table.live_records(), 0);
    }
}
