//! The cracker index: an aligned pair of arrays (values and the row ids they
//! came from) plus the table of contents describing its pieces.
//!
//! Cracking physically reorders the arrays. Several threads may reorder
//! *different* pieces at the same time, so the arrays live in shared cells and
//! the `unsafe` accessors hand out slices whose exclusivity the caller
//! guarantees by holding the matching piece or column latch. Methods taking
//! `&mut self` need no such contract.

use std::cell::UnsafeCell;
use std::ops::Range;

use parking_lot::{Mutex, MutexGuard};

use crate::column::{Column, ColumnId};
use crate::error::{Error, Result};
use crate::toc::{Boundary, Location, Piece, PositionRange, TableOfContents};
use crate::{Key, Offset, RowId};

/// A fixed-length array whose disjoint sub-slices may be mutated from
/// different threads.
pub(crate) struct SharedArray<T> {
    cells: Box<[UnsafeCell<T>]>,
}

// SAFETY: access to the cells is coordinated by latches held by callers of the
// unsafe accessors below; `T: Send` is all that crosses threads.
unsafe impl<T: Send> Sync for SharedArray<T> {}

impl<T: Copy> SharedArray<T> {
    pub(crate) fn from_vec(v: Vec<T>) -> Self {
        let boxed: Box<[T]> = v.into_boxed_slice();
        // SAFETY: UnsafeCell<T> has the same layout as T.
        let cells = unsafe { Box::from_raw(Box::into_raw(boxed) as *mut [UnsafeCell<T>]) };
        Self { cells }
    }

    pub(crate) fn len(&self) -> usize {
        self.cells.len()
    }

    fn base(&self) -> *mut T {
        self.cells.as_ptr() as *mut T
    }

    /// # Safety
    /// No other thread may write to `range` while the slice is alive.
    pub(crate) unsafe fn slice(&self, range: Range<usize>) -> &[T] {
        assert!(range.start <= range.end && range.end <= self.len());
        std::slice::from_raw_parts(self.base().add(range.start), range.end - range.start)
    }

    /// # Safety
    /// No other thread may access `range` while the slice is alive.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn slice_mut(&self, range: Range<usize>) -> &mut [T] {
        assert!(range.start <= range.end && range.end <= self.len());
        std::slice::from_raw_parts_mut(self.base().add(range.start), range.end - range.start)
    }

    pub(crate) fn as_slice(&mut self) -> &[T] {
        // SAFETY: `&mut self` excludes every other accessor.
        unsafe { self.slice(0..self.len()) }
    }

    pub(crate) fn into_vec(self) -> Vec<T> {
        // SAFETY: inverse of `from_vec`.
        let raw = Box::into_raw(self.cells) as *mut [T];
        unsafe { Box::from_raw(raw) }.into_vec()
    }
}

pub struct CrackerIndex {
    column_id: ColumnId,
    values: SharedArray<Key>,
    row_ids: SharedArray<RowId>,
    // Ordered-map mutations are short; the mutex only serialises the map
    // itself; the array pieces are protected by latches.
    toc: Mutex<TableOfContents>,
}

impl std::fmt::Debug for CrackerIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CrackerIndex")
            .field("column_id", &self.column_id)
            .field("len", &self.len())
            .field("pieces", &self.piece_count())
            .finish()
    }
}

impl CrackerIndex {
    /// Copies the column into a raw, uncracked index.
    pub fn new(column: &Column) -> Self {
        let values = column.keys().to_vec();
        let row_ids = (0..column.len() as RowId).collect();
        Self::from_parts(column.id(), values, row_ids)
    }

    pub fn from_parts(column_id: ColumnId, values: Vec<Key>, row_ids: Vec<RowId>) -> Self {
        assert_eq!(values.len(), row_ids.len(), "values and row ids must align");
        let len = values.len();
        Self {
            column_id,
            values: SharedArray::from_vec(values),
            row_ids: SharedArray::from_vec(row_ids),
            toc: Mutex::new(TableOfContents::new(len)),
        }
    }

    pub fn column_id(&self) -> ColumnId {
        self.column_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn toc(&self) -> MutexGuard<'_, TableOfContents> {
        self.toc.lock()
    }

    pub fn piece_count(&self) -> usize {
        self.toc.lock().piece_count()
    }

    pub fn find_piece(&self, key: Key) -> Result<Piece> {
        self.toc.lock().find_piece(key).ok_or(Error::EmptyIndex)
    }

    pub fn locate(&self, cut: &Boundary) -> Option<Location> {
        self.toc.lock().locate(cut)
    }

    pub fn piece_at(&self, start: Offset) -> Option<Piece> {
        self.toc.lock().piece_at(start)
    }

    /// Walks the current pieces in ascending order starting with the one that
    /// begins at `from.start`. `from` may be stale: a former piece's start
    /// always still begins some current piece.
    pub fn piece_walk(&self, from: &Piece) -> PieceWalk<'_> {
        PieceWalk {
            index: self,
            next_start: from.start,
        }
    }

    pub fn values(&mut self) -> &[Key] {
        self.values.as_slice()
    }

    pub fn row_ids(&mut self) -> &[RowId] {
        self.row_ids.as_slice()
    }

    pub fn into_parts(self) -> (Vec<Key>, Vec<RowId>, TableOfContents) {
        (
            self.values.into_vec(),
            self.row_ids.into_vec(),
            self.toc.into_inner(),
        )
    }

    /// # Safety
    /// The caller holds a shared (or exclusive) latch covering `range`.
    pub unsafe fn values_in(&self, range: Range<usize>) -> &[Key] {
        self.values.slice(range)
    }

    /// # Safety
    /// The caller holds an exclusive latch covering `range`.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn arrays_mut(&self, range: Range<usize>) -> (&mut [Key], &mut [RowId]) {
        (
            self.values.slice_mut(range.clone()),
            self.row_ids.slice_mut(range),
        )
    }

    /// Removes the positions in `range`, returning their values and row ids.
    /// Later offsets in the table of contents shift down accordingly.
    pub fn extract(&mut self, range: PositionRange) -> (Vec<Key>, Vec<RowId>) {
        if range.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let mut values = std::mem::replace(&mut self.values, SharedArray::from_vec(Vec::new())).into_vec();
        let mut rows = std::mem::replace(&mut self.row_ids, SharedArray::from_vec(Vec::new())).into_vec();
        let taken_values: Vec<Key> = values.drain(range.as_range()).collect();
        let taken_rows: Vec<RowId> = rows.drain(range.as_range()).collect();
        self.values = SharedArray::from_vec(values);
        self.row_ids = SharedArray::from_vec(rows);
        self.toc.get_mut().remove_positions(range);
        (taken_values, taken_rows)
    }

    /// Checks tiling and that every value lies inside its piece's key range.
    pub fn check_structure(&mut self) -> std::result::Result<(), String> {
        let values = self.values.as_slice().to_vec();
        let toc = self.toc.get_mut();
        if toc.array_len() != values.len() {
            return Err(format!("table describes {} positions, array has {}", toc.array_len(), values.len()));
        }
        toc.check_tiling()?;
        for piece in toc.pieces() {
            if let Some(p) = values[piece.start..piece.end].iter().position(|&v| !piece.contains(v)) {
                return Err(format!(
                    "value {} at position {} lies outside its piece {:?}",
                    values[piece.start + p],
                    piece.start + p,
                    piece
                ));
            }
        }
        for (cut, off) in toc.history() {
            if toc.offset_of(cut) != Some(*off) {
                return Err(format!("boundary {cut:?} at {off} was lost or moved"));
            }
        }
        Ok(())
    }

    /// Checks multiset equality with the column, row-id alignment and tiling.
    pub fn check_invariants(&mut self, column: &Column) -> std::result::Result<(), String> {
        let keys = column.keys();
        if self.len() != keys.len() {
            return Err(format!("index length {} != column length {}", self.len(), keys.len()));
        }
        let values = self.values.as_slice().to_vec();
        let rows = self.row_ids.as_slice();
        let mut seen = vec![false; keys.len()];
        for (p, (&v, &r)) in values.iter().zip(rows).enumerate() {
            let r = r as usize;
            if r >= keys.len() || seen[r] {
                return Err(format!("row id {r} at position {p} is out of range or repeated"));
            }
            seen[r] = true;
            if keys[r] != v {
                return Err(format!("position {p}: value {v} but column[{r}] = {}", keys[r]));
            }
        }
        self.check_structure()
    }
}

pub struct PieceWalk<'a> {
    index: &'a CrackerIndex,
    next_start: Offset,
}

impl Iterator for PieceWalk<'_> {
    type Item = Piece;

    fn next(&mut self) -> Option<Piece> {
        let piece = self.index.piece_at(self.next_start)?;
        self.next_start = piece.end;
        Some(piece)
    }
}
