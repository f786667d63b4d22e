//! Adaptive merging and hybrid crack-sort over an in-memory partitioned index.
//!
//! The first query splits the column into partitions. Every later query
//! migrates the records it needs out of all partitions and into one sorted
//! final partition, so each record is merged at most once. Adaptive merging
//! keeps each partition sorted and cuts the qualifying slice out by binary
//! search; crack-sort leaves partitions unsorted and cracks them instead,
//! sorting only the extracted band.
//!
//! All `&self` operations assume the caller holds the right latches (see
//! [`crate::engine`]); partitions and the final partition sit behind
//! `RwLock`s that are only ever *tried*, so a latching bug shows up as a panic
//! rather than a silent data race.

use std::collections::BTreeMap;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::column::{Column, ColumnId};
use crate::error::{Error, Result};
use crate::index::CrackerIndex;
use crate::query::Aggregate;
use crate::toc::PositionRange;
use crate::{Key, RowId};

/// Leading key field that tells partitions apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartitionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Sorted runs, binary-searched.
    Adaptive,
    /// Unsorted partitions, cracked; extracted bands are sorted.
    CrackSort,
}

#[derive(Debug)]
enum PartitionData {
    Run { keys: Vec<Key>, rows: Vec<RowId> },
    Cracked(CrackerIndex),
}

#[derive(Debug)]
pub struct Partition {
    id: PartitionId,
    data: PartitionData,
}

fn sort_pairs(keys: Vec<Key>, rows: Vec<RowId>) -> (Vec<Key>, Vec<RowId>) {
    let mut pairs: Vec<(Key, RowId)> = keys.into_iter().zip(rows).collect();
    pairs.sort_unstable();
    pairs.into_iter().unzip()
}

impl Partition {
    pub fn id(&self) -> PartitionId {
        self.id
    }

    pub fn len(&self) -> usize {
        match &self.data {
            PartitionData::Run { keys, .. } => keys.len(),
            PartitionData::Cracked(idx) => idx.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_sorted_run(&self) -> bool {
        matches!(self.data, PartitionData::Run { .. })
    }

    /// Removes every record with a key in `[lo, hi]`, returned sorted.
    fn extract(&mut self, lo: Key, hi: Key) -> (Vec<Key>, Vec<RowId>) {
        match &mut self.data {
            PartitionData::Run { keys, rows } => {
                let a = keys.partition_point(|&k| k < lo);
                let b = keys.partition_point(|&k| k <= hi);
                (keys.drain(a..b).collect(), rows.drain(a..b).collect())
            }
            PartitionData::Cracked(idx) => {
                // lo > Key::MIN and hi < Key::MAX: both come from strict bounds.
                let range = idx
                    .crack_select(lo - 1, hi + 1)
                    .expect("gap bounds are ordered");
                let (keys, rows) = idx.extract(range);
                sort_pairs(keys, rows)
            }
        }
    }

    fn aggregate(&self, low: Key, high: Key, agg: Aggregate) -> i128 {
        match &self.data {
            PartitionData::Run { keys, .. } => {
                let a = keys.partition_point(|&k| k <= low);
                let b = keys.partition_point(|&k| k < high);
                agg.over(&keys[a..b.max(a)])
            }
            PartitionData::Cracked(idx) => {
                if idx.is_empty() {
                    return 0;
                }
                let (first, last) = {
                    let toc = idx.toc();
                    let first = toc.find_piece(low.saturating_add(1)).expect("non-empty");
                    let last = toc.find_piece(high.saturating_sub(1)).expect("non-empty");
                    (first, last)
                };
                // SAFETY: the caller holds this partition's latch (and its
                // read lock), so nothing reorders the array meanwhile.
                let keys = unsafe { idx.values_in(first.start..last.end.max(first.start)) };
                agg.over_filtered(keys, low, high)
            }
        }
    }

    fn for_each_record(&mut self, mut f: impl FnMut(Key, RowId)) {
        match &mut self.data {
            PartitionData::Run { keys, rows } => keys.iter().zip(rows.iter()).for_each(|(&k, &r)| f(k, r)),
            PartitionData::Cracked(idx) => {
                let keys = idx.values().to_vec();
                keys.iter().zip(idx.row_ids()).for_each(|(&k, &r)| f(k, r));
            }
        }
    }
}

/// Disjoint, non-adjacent closed key intervals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoveredSet {
    intervals: BTreeMap<Key, Key>,
}

impl CoveredSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Key, Key)> + '_ {
        self.intervals.iter().map(|(&a, &b)| (a, b))
    }

    /// Adds `[lo, hi]`, coalescing with overlapping or abutting intervals.
    pub fn insert(&mut self, lo: Key, hi: Key) {
        if lo > hi {
            return;
        }
        let (mut new_lo, mut new_hi) = (lo, hi);
        let touching: Vec<(Key, Key)> = self
            .intervals
            .range(..=hi.saturating_add(1))
            .rev()
            .take_while(|(_, &end)| end as i128 >= lo as i128 - 1)
            .map(|(&a, &b)| (a, b))
            .collect();
        for (a, b) in touching {
            self.intervals.remove(&a);
            new_lo = new_lo.min(a);
            new_hi = new_hi.max(b);
        }
        self.intervals.insert(new_lo, new_hi);
    }

    /// Sub-intervals of `[lo, hi]` not yet covered, ascending.
    pub fn gaps(&self, lo: Key, hi: Key) -> Vec<(Key, Key)> {
        let mut out = Vec::new();
        if lo > hi {
            return out;
        }
        let mut cursor = lo as i128;
        let start_from = self
            .intervals
            .range(..=lo)
            .next_back()
            .map_or(lo, |(&a, _)| a);
        for (&a, &b) in self.intervals.range(start_from..=hi) {
            if (b as i128) < cursor {
                continue;
            }
            if (a as i128) > cursor {
                out.push((cursor as Key, a - 1));
            }
            cursor = b as i128 + 1;
            if cursor > hi as i128 {
                return out;
            }
        }
        if cursor <= hi as i128 {
            out.push((cursor as Key, hi));
        }
        out
    }

    pub fn contains(&self, lo: Key, hi: Key) -> bool {
        self.gaps(lo, hi).is_empty()
    }
}

/// The sorted partition that receives migrated records.
#[derive(Debug, Default)]
pub struct FinalPartition {
    keys: Vec<Key>,
    rows: Vec<RowId>,
    covered: CoveredSet,
}

impl FinalPartition {
    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn rows(&self) -> &[RowId] {
        &self.rows
    }

    pub fn covered(&self) -> &CoveredSet {
        &self.covered
    }

    fn range(&self, low: Key, high: Key) -> PositionRange {
        let a = self.keys.partition_point(|&k| k <= low);
        let b = self.keys.partition_point(|&k| k < high);
        PositionRange::new(a, b.max(a))
    }

    /// Merges sorted records into place.
    fn absorb(&mut self, keys: Vec<Key>, rows: Vec<RowId>) {
        let (Some(&first), Some(&last)) = (keys.first(), keys.last()) else {
            return;
        };
        let lo = self.keys.partition_point(|&k| k < first);
        let hi = self.keys.partition_point(|&k| k <= last);
        let overlap = hi - lo;
        if overlap == 0 {
            self.keys.splice(lo..lo, keys);
            self.rows.splice(lo..lo, rows);
            return;
        }
        let mut merged_keys = Vec::with_capacity(overlap + keys.len());
        let mut merged_rows = Vec::with_capacity(overlap + keys.len());
        let (mut i, mut j) = (lo, 0);
        while i < hi && j < keys.len() {
            if self.keys[i] <= keys[j] {
                merged_keys.push(self.keys[i]);
                merged_rows.push(self.rows[i]);
                i += 1;
            } else {
                merged_keys.push(keys[j]);
                merged_rows.push(rows[j]);
                j += 1;
            }
        }
        merged_keys.extend_from_slice(&self.keys[i..hi]);
        merged_rows.extend_from_slice(&self.rows[i..hi]);
        merged_keys.extend_from_slice(&keys[j..]);
        merged_rows.extend_from_slice(&rows[j..]);
        self.keys.splice(lo..hi, merged_keys);
        self.rows.splice(lo..hi, merged_rows);
    }
}

/// Keys satisfying `low < k < high` as a closed interval, if any.
fn qualifying(low: Key, high: Key) -> Option<(Key, Key)> {
    let (lo, hi) = (low as i128 + 1, high as i128 - 1);
    (lo <= hi).then_some((lo as Key, hi as Key))
}

/// Result of a refinement that may stop early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Refinement {
    /// Records moved into the final partition.
    pub migrated: usize,
    /// Whether every requested key is now covered by the final partition.
    pub complete: bool,
}

#[derive(Debug)]
pub struct MergeIndex {
    column_id: ColumnId,
    mode: MergeMode,
    partitions: Vec<RwLock<Partition>>,
    final_part: RwLock<FinalPartition>,
}

const LATCH_BUG: &str = "merge index accessed without the required latch";

impl MergeIndex {
    fn chunked(column: &Column, capacity: usize, mode: MergeMode) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("partition capacity must be at least 1".into()));
        }
        let partitions = column
            .keys()
            .chunks(capacity)
            .enumerate()
            .map(|(i, chunk)| {
                let first_row = (i * capacity) as RowId;
                let keys = chunk.to_vec();
                let rows: Vec<RowId> = (first_row..first_row + chunk.len() as RowId).collect();
                let data = match mode {
                    MergeMode::Adaptive => {
                        let (keys, rows) = sort_pairs(keys, rows);
                        PartitionData::Run { keys, rows }
                    }
                    MergeMode::CrackSort => {
                        PartitionData::Cracked(CrackerIndex::from_parts(column.id(), keys, rows))
                    }
                };
                RwLock::new(Partition {
                    id: PartitionId(i as u32),
                    data,
                })
            })
            .collect();
        Ok(Self {
            column_id: column.id(),
            mode,
            partitions,
            final_part: RwLock::new(FinalPartition::default()),
        })
    }

    /// Splits the column into consecutive chunks and sorts each one.
    pub fn init_runs(column: &Column, run_capacity: usize) -> Result<Self> {
        Self::chunked(column, run_capacity, MergeMode::Adaptive)
    }

    /// Splits the column into consecutive unsorted chunks, each with its own
    /// table of contents.
    pub fn init_unsorted_partitions(column: &Column, partition_capacity: usize) -> Result<Self> {
        Self::chunked(column, partition_capacity, MergeMode::CrackSort)
    }

    pub fn column_id(&self) -> ColumnId {
        self.column_id
    }

    pub fn mode(&self) -> MergeMode {
        self.mode
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    pub fn partition_ids(&self) -> impl Iterator<Item = PartitionId> {
        (0..self.partitions.len() as u32).map(PartitionId)
    }

    fn part_mut(&self, i: usize) -> RwLockWriteGuard<'_, Partition> {
        self.partitions[i].try_write().expect(LATCH_BUG)
    }

    fn part(&self, i: usize) -> RwLockReadGuard<'_, Partition> {
        self.partitions[i].try_read().expect(LATCH_BUG)
    }

    fn final_mut(&self) -> RwLockWriteGuard<'_, FinalPartition> {
        self.final_part.try_write().expect(LATCH_BUG)
    }

    fn final_ref(&self) -> RwLockReadGuard<'_, FinalPartition> {
        self.final_part.try_read().expect(LATCH_BUG)
    }

    /// Parts of `(low, high)` whose records have not all reached the final
    /// partition. Needs at least a shared latch on the final partition.
    pub fn uncovered(&self, low: Key, high: Key) -> Vec<(Key, Key)> {
        match qualifying(low, high) {
            Some((lo, hi)) => self.final_ref().covered.gaps(lo, hi),
            None => Vec::new(),
        }
    }

    pub fn is_covered(&self, low: Key, high: Key) -> bool {
        self.uncovered(low, high).is_empty()
    }

    /// Moves every record of partition `i` inside `gaps` into the final
    /// partition. Needs exclusive latches on partition `i` and the final
    /// partition.
    pub fn migrate(&self, i: usize, gaps: &[(Key, Key)]) -> usize {
        let mut part = self.part_mut(i);
        let mut keys = Vec::new();
        let mut rows = Vec::new();
        for &(lo, hi) in gaps {
            let (k, r) = part.extract(lo, hi);
            keys.extend(k);
            rows.extend(r);
        }
        drop(part);
        let moved = keys.len();
        self.final_mut().absorb(keys, rows);
        moved
    }

    /// Records `gaps` as fully migrated. Only sound once [`migrate`] ran for
    /// every partition with these gaps.
    ///
    /// [`migrate`]: MergeIndex::migrate
    pub fn cover(&self, gaps: &[(Key, Key)]) {
        let mut fin = self.final_mut();
        for &(lo, hi) in gaps {
            fin.covered.insert(lo, hi);
        }
    }

    /// Position range of `low < k < high` inside the final partition.
    pub fn final_range(&self, low: Key, high: Key) -> PositionRange {
        self.final_ref().range(low, high)
    }

    pub fn aggregate_final(&self, low: Key, high: Key, agg: Aggregate) -> i128 {
        let fin = self.final_ref();
        let r = fin.range(low, high);
        agg.over(&fin.keys[r.as_range()])
    }

    pub fn aggregate_partition(&self, i: usize, low: Key, high: Key, agg: Aggregate) -> i128 {
        self.part(i).aggregate(low, high, agg)
    }

    /// Answers from the final partition plus whatever still sits in
    /// partitions. Needs shared latches on everything.
    pub fn aggregate_everywhere(&self, low: Key, high: Key, agg: Aggregate) -> i128 {
        let from_parts: i128 = (0..self.partitions.len())
            .map(|i| self.aggregate_partition(i, low, high, agg))
            .sum();
        from_parts + self.aggregate_final(low, high, agg)
    }

    /// Binary search in the final partition for a fully covered range.
    pub fn final_lookup(&self, low: Key, high: Key) -> Result<PositionRange> {
        if low >= high {
            return Err(Error::InvalidBounds { low, high });
        }
        if !self.is_covered(low, high) {
            return Err(Error::UncoveredRange { low, high });
        }
        Ok(self.final_range(low, high))
    }

    /// Migrates the uncovered parts of `(low, high)` partition by partition,
    /// asking `keep_going` before every partition after the first. Coverage
    /// is recorded only if every partition was visited.
    pub fn refine_until(
        &self,
        low: Key,
        high: Key,
        mut keep_going: impl FnMut() -> bool,
    ) -> Result<Refinement> {
        if low >= high {
            return Err(Error::InvalidBounds { low, high });
        }
        let gaps = self.uncovered(low, high);
        if gaps.is_empty() {
            return Ok(Refinement {
                migrated: 0,
                complete: true,
            });
        }
        let mut migrated = 0;
        for i in 0..self.partitions.len() {
            if i > 0 && !keep_going() {
                return Ok(Refinement {
                    migrated,
                    complete: false,
                });
            }
            migrated += self.migrate(i, &gaps);
        }
        self.cover(&gaps);
        Ok(Refinement {
            migrated,
            complete: true,
        })
    }

    /// Migrates everything `(low, high)` needs and returns its position range
    /// in the final partition.
    pub fn refine_range(&mut self, low: Key, high: Key) -> Result<PositionRange> {
        self.refine_until(low, high, || true)?;
        Ok(self.final_range(low, high))
    }

    pub fn final_partition(&mut self) -> &FinalPartition {
        self.final_part.get_mut()
    }

    pub fn partition_lens(&mut self) -> Vec<usize> {
        self.partitions.iter_mut().map(|p| p.get_mut().len()).collect()
    }

    /// Keys of every partition, for inspection.
    pub fn partition_keys(&mut self) -> Vec<Vec<Key>> {
        self.partitions
            .iter_mut()
            .map(|p| {
                let mut keys = Vec::new();
                p.get_mut().for_each_record(|k, _| keys.push(k));
                keys
            })
            .collect()
    }

    /// Conservation, final sortedness, covered soundness, and per-partition
    /// structure.
    pub fn check_invariants(&mut self, column: &Column) -> std::result::Result<(), String> {
        let keys = column.keys();
        let mut seen = vec![false; keys.len()];
        let mut check_record = |k: Key, r: RowId, place: &str| -> std::result::Result<(), String> {
            let r = r as usize;
            if r >= keys.len() || seen[r] {
                return Err(format!("{place}: row {r} out of range or duplicated"));
            }
            seen[r] = true;
            if keys[r] != k {
                return Err(format!("{place}: key {k} but column[{r}] = {}", keys[r]));
            }
            Ok(())
        };
        let fin = self.final_part.get_mut();
        for (&k, &r) in fin.keys.iter().zip(&fin.rows) {
            check_record(k, r, "final")?;
        }
        if fin.keys.len() != fin.rows.len() {
            return Err("final keys and rows differ in length".into());
        }
        if let Some(w) = fin.keys.windows(2).position(|w| w[0] > w[1]) {
            return Err(format!("final partition unsorted at {w}"));
        }
        let covered = fin.covered.clone();
        let final_keys = fin.keys.clone();
        for p in self.partitions.iter_mut() {
            let p = p.get_mut();
            let mut err = None;
            let mut prev: Option<Key> = None;
            let sorted = p.is_sorted_run();
            let id = p.id;
            p.for_each_record(|k, r| {
                if err.is_some() {
                    return;
                }
                let place = format!("partition {}", id.0);
                if let Err(e) = check_record(k, r, &place) {
                    err = Some(e);
                } else if sorted && prev.is_some_and(|pk| pk > k) {
                    err = Some(format!("{place} is not sorted"));
                } else if !covered.gaps(k, k).is_empty() {
                    prev = Some(k);
                } else {
                    err = Some(format!("{place} holds covered key {k}"));
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            if let PartitionData::Cracked(idx) = &mut p.data {
                idx.check_structure()?;
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(format!("row {r} is missing"));
        }
        for (lo, hi) in covered.iter() {
            let in_column = keys.iter().filter(|&&k| lo <= k && k <= hi).count();
            let a = final_keys.partition_point(|&k| k < lo);
            let b = final_keys.partition_point(|&k| k <= hi);
            if b - a != in_column {
                return Err(format!(
                    "covered [{lo}, {hi}] holds {} records in final, column has {in_column}",
                    b - a
                ));
            }
        }
        Ok(())
    }
}
