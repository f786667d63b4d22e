//! In-place refinement of a cracker index.
//!
//! Each operation exists twice: a safe `&mut self` form for single-threaded
//! use, and an `unsafe` `_latched` form that the concurrent engine calls while
//! holding an exclusive latch on the piece (or column) being reorganised.

use crate::error::{Error, Result};
use crate::index::CrackerIndex;
use crate::toc::{Boundary, Location, Piece, PositionRange};
use crate::{Key, Offset, RowId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSide {
    /// From a predicate `key < A`: values `<= key` go left.
    Lower,
    /// From a predicate `A < key`: values `< key` go left.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrackBound {
    pub key: Key,
    pub side: BoundSide,
}

impl CrackBound {
    pub fn lower(key: Key) -> Self {
        Self {
            key,
            side: BoundSide::Lower,
        }
    }

    pub fn upper(key: Key) -> Self {
        Self {
            key,
            side: BoundSide::Upper,
        }
    }

    pub fn boundary(&self) -> Boundary {
        match self.side {
            BoundSide::Lower => Boundary::at_or_below(self.key),
            BoundSide::Upper => Boundary::below(self.key),
        }
    }
}

const BLOCK: usize = 128;

/// Partition of the aligned pair: values satisfying `goes_left` end up in
/// front. Returns the split point.
///
/// Blocks of `BLOCK` values are classified from both ends without branching
/// and their misplaced entries swapped pairwise; the remainder falls back to
/// the two-pointer loop.
pub fn partition_in_two<F>(values: &mut [Key], rows: &mut [RowId], goes_left: F) -> usize
where
    F: Fn(Key) -> bool,
{
    debug_assert_eq!(values.len(), rows.len());
    let mut l = 0;
    let mut r = values.len();
    let mut offs_l = [0u8; BLOCK];
    let mut offs_r = [0u8; BLOCK];
    let (mut start_l, mut num_l) = (0, 0);
    let (mut start_r, mut num_r) = (0, 0);
    while r - l >= 2 * BLOCK {
        if num_l == 0 {
            start_l = 0;
            let block = &values[l..l + BLOCK];
            for (i, &v) in block.iter().enumerate() {
                offs_l[num_l] = i as u8;
                num_l += !goes_left(v) as usize;
            }
        }
        if num_r == 0 {
            start_r = 0;
            let block = &values[r - BLOCK..r];
            for (i, &v) in block.iter().rev().enumerate() {
                offs_r[num_r] = i as u8;
                num_r += goes_left(v) as usize;
            }
        }
        let m = num_l.min(num_r);
        for k in 0..m {
            let a = l + offs_l[start_l + k] as usize;
            let b = r - 1 - offs_r[start_r + k] as usize;
            values.swap(a, b);
            rows.swap(a, b);
        }
        num_l -= m;
        num_r -= m;
        start_l += m;
        start_r += m;
        if num_l == 0 {
            l += BLOCK;
        }
        if num_r == 0 {
            r -= BLOCK;
        }
    }
    // Everything before l goes left and everything from r on goes right; a
    // half-consumed block is simply rescanned.
    l + partition_scalar(&mut values[l..r], &mut rows[l..r], goes_left)
}

fn partition_scalar<F>(values: &mut [Key], rows: &mut [RowId], goes_left: F) -> usize
where
    F: Fn(Key) -> bool,
{
    let mut lo = 0;
    let mut hi = values.len();
    loop {
        while lo < hi && goes_left(values[lo]) {
            lo += 1;
        }
        while lo < hi && !goes_left(values[hi - 1]) {
            hi -= 1;
        }
        if lo >= hi {
            return lo;
        }
        hi -= 1;
        values.swap(lo, hi);
        rows.swap(lo, hi);
        lo += 1;
    }
}

/// Three-way partition: `goes_left` values first, then the middle band, then
/// `goes_right` values. The predicates must be disjoint. Not stable.
pub fn partition_in_three<L, R>(
    values: &mut [Key],
    rows: &mut [RowId],
    goes_left: L,
    goes_right: R,
) -> (usize, usize)
where
    L: Fn(Key) -> bool,
    R: Fn(Key) -> bool,
{
    debug_assert_eq!(values.len(), rows.len());
    let a = partition_in_two(values, rows, goes_left);
    let b = partition_in_two(&mut values[a..], &mut rows[a..], |v| !goes_right(v));
    (a, a + b)
}

impl CrackerIndex {
    fn current_piece(&self, piece: &Piece) -> Result<Piece> {
        match self.piece_at(piece.start) {
            Some(p) if p.end == piece.end => Ok(p),
            _ => Err(Error::StalePiece { start: piece.start }),
        }
    }

    /// Splits `piece` at `bound`. Returns the offset of the cut.
    pub fn crack_in_two(&mut self, piece: &Piece, bound: CrackBound) -> Result<Offset> {
        // SAFETY: `&mut self` is exclusive over the whole index.
        unsafe { self.crack_in_two_latched(piece, bound) }
    }

    /// # Safety
    /// The caller holds an exclusive latch on `piece` (or its whole column).
    pub unsafe fn crack_in_two_latched(&self, piece: &Piece, bound: CrackBound) -> Result<Offset> {
        let piece = self.current_piece(piece)?;
        let cut = bound.boundary();
        if !piece.admits(&cut) {
            return Err(Error::StalePiece { start: piece.start });
        }
        if !piece.splits_at(&cut) {
            // The cut coincides with one of the piece's own edges.
            return Ok(if Some(cut) == piece.low { piece.start } else { piece.end });
        }
        let (values, rows) = self.arrays_mut(piece.start..piece.end);
        let split = piece.start + partition_in_two(values, rows, |v| cut.is_left(v));
        self.toc().insert(cut, split);
        Ok(split)
    }

    /// Splits `piece` into `(<= low) | (low < A < high) | (>= high)` in one pass.
    pub fn crack_in_three(
        &mut self,
        piece: &Piece,
        low: CrackBound,
        high: CrackBound,
    ) -> Result<(Offset, Offset)> {
        // SAFETY: `&mut self` is exclusive over the whole index.
        unsafe { self.crack_in_three_latched(piece, low, high) }
    }

    /// # Safety
    /// The caller holds an exclusive latch on `piece` (or its whole column).
    pub unsafe fn crack_in_three_latched(
        &self,
        piece: &Piece,
        low: CrackBound,
        high: CrackBound,
    ) -> Result<(Offset, Offset)> {
        if low.key >= high.key {
            return Err(Error::InvalidBounds {
                low: low.key,
                high: high.key,
            });
        }
        let piece = self.current_piece(piece)?;
        let (lo_cut, hi_cut) = (low.boundary(), high.boundary());
        if !piece.admits(&lo_cut) || !piece.admits(&hi_cut) {
            return Err(Error::StalePiece { start: piece.start });
        }
        let (values, rows) = self.arrays_mut(piece.start..piece.end);
        let (lt, gt) = partition_in_three(values, rows, |v| lo_cut.is_left(v), |v| !hi_cut.is_left(v));
        let (a, b) = (piece.start + lt, piece.start + gt);
        let mut toc = self.toc();
        // `insert` skips cuts at the piece edges; an empty middle band keeps
        // only the lower cut.
        toc.insert(lo_cut, a);
        if b != a {
            toc.insert(hi_cut, b);
        }
        Ok((a, b))
    }

    /// Answers `v1 < A < v2` by cracking at most the two pieces holding the
    /// bounds, and returns the contiguous range of qualifying positions.
    pub fn crack_select(&mut self, v1: Key, v2: Key) -> Result<PositionRange> {
        // SAFETY: `&mut self` is exclusive over the whole index.
        unsafe { self.crack_select_latched(v1, v2) }
    }

    /// # Safety
    /// The caller holds an exclusive latch on the whole column.
    pub unsafe fn crack_select_latched(&self, v1: Key, v2: Key) -> Result<PositionRange> {
        if v1 >= v2 {
            return Err(Error::InvalidBounds { low: v1, high: v2 });
        }
        if self.is_empty() {
            return Ok(PositionRange::default());
        }
        let (low, high) = (CrackBound::lower(v1), CrackBound::upper(v2));
        let lo_loc = self.locate(&low.boundary()).expect("non-empty");
        let hi_loc = self.locate(&high.boundary()).expect("non-empty");
        let (a, b) = match (lo_loc, hi_loc) {
            (Location::Inside(p), Location::Inside(q)) if p.start == q.start => {
                self.crack_in_three_latched(&p, low, high)?
            }
            _ => {
                let a = match lo_loc {
                    Location::Boundary(off) => off,
                    Location::Inside(p) => self.crack_in_two_latched(&p, low)?,
                };
                let b = match hi_loc {
                    Location::Boundary(off) => off,
                    Location::Inside(q) => self.crack_in_two_latched(&q, high)?,
                };
                (a, b)
            }
        };
        Ok(PositionRange::new(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::column::{Column, ColumnId};

    fn index(keys: &[Key]) -> (Column, CrackerIndex) {
        let col = Column::new(ColumnId(0), keys.to_vec());
        let idx = CrackerIndex::new(&col);
        (col, idx)
    }

    fn sorted(mut v: Vec<Key>) -> Vec<Key> {
        v.sort_unstable();
        v
    }

    // Oracle: keep the values that satisfy a predicate, in input order.
    fn filter(keys: &[Key], f: impl Fn(Key) -> bool) -> Vec<Key> {
        keys.iter().copied().filter(|&k| f(k)).collect()
    }

    #[test]
    fn block_partition_around_block_sizes() {
        for n in [0, 1, 2, BLOCK - 1, 2 * BLOCK - 1, 2 * BLOCK, 2 * BLOCK + 1, 5 * BLOCK + 37, 4000] {
            for pivot in [-1, 0, 3, 50, 97, 1000] {
                // Deterministic scramble of 0..n with duplicates.
                let keys: Vec<Key> = (0..n as i64).map(|i| (i * 7919 + 13) % 101).collect();
                let mut values = keys.clone();
                let mut rows: Vec<RowId> = (0..n as RowId).collect();
                let split = partition_in_two(&mut values, &mut rows, |v| v < pivot);
                assert_eq!(split, filter(&keys, |k| k < pivot).len(), "n={n} pivot={pivot}");
                assert!(values[..split].iter().all(|&v| v < pivot));
                assert!(values[split..].iter().all(|&v| v >= pivot));
                assert!(rows.iter().zip(&values).all(|(&r, &v)| keys[r as usize] == v));
                assert_eq!(sorted(values), sorted(keys.clone()));

                let mut values = keys.clone();
                let mut rows: Vec<RowId> = (0..n as RowId).collect();
                let (a, b) = partition_in_three(&mut values, &mut rows, |v| v < pivot, |v| v > pivot + 20);
                assert_eq!(a, filter(&keys, |k| k < pivot).len());
                assert_eq!(b - a, filter(&keys, |k| (pivot..=pivot + 20).contains(&k)).len());
                assert!(values[b..].iter().all(|&v| v > pivot + 20));
                assert!(rows.iter().zip(&values).all(|(&r, &v)| keys[r as usize] == v));
            }
        }
    }

    #[test]
    fn crack_in_two_lower_bound() {
        let keys = [5, 1, 9, 3, 7];
        let (col, mut idx) = index(&keys);
        let whole = idx.find_piece(0).unwrap();
        let r = idx.crack_in_two(&whole, CrackBound::lower(5)).unwrap();
        assert_eq!(r, filter(&keys, |k| k <= 5).len());
        assert_eq!(r, 3);
        let values = idx.values().to_vec();
        assert_eq!(sorted(values[..3].to_vec()), vec![1, 3, 5]);
        assert_eq!(sorted(values[3..].to_vec()), vec![7, 9]);
        assert_eq!(idx.piece_count(), 2);
        idx.check_invariants(&col).unwrap();
    }

    #[test]
    fn crack_in_two_degenerate_does_not_insert() {
        let (_, mut idx) = index(&[5, 1, 9, 3, 7]);
        let whole = idx.find_piece(0).unwrap();
        let r = idx.crack_in_two(&whole, CrackBound::upper(1)).unwrap();
        assert_eq!(r, 0);
        assert_eq!(idx.values(), &[5, 1, 9, 3, 7]);
        assert_eq!(idx.piece_count(), 1);
    }

    #[test]
    fn crack_in_two_duplicates_go_left() {
        let (_, mut idx) = index(&[2, 2, 2]);
        let whole = idx.find_piece(0).unwrap();
        let r = idx.crack_in_two(&whole, CrackBound::lower(2)).unwrap();
        assert_eq!(r, 3);
        assert_eq!(idx.piece_count(), 1);
    }

    #[test]
    fn crack_in_two_at_existing_edge_is_noop() {
        let (_, mut idx) = index(&[13, 4, 2, 16]);
        let whole = idx.find_piece(0).unwrap();
        assert_eq!(idx.crack_in_two(&whole, CrackBound::lower(10)).unwrap(), 2);
        let right = idx.piece_at(2).unwrap();
        let before = idx.values().to_vec();
        assert_eq!(idx.crack_in_two(&right, CrackBound::upper(11)).unwrap(), 2);
        assert_eq!(idx.values(), &before[..]);
    }

    #[test]
    fn stale_piece_is_reported() {
        let (_, mut idx) = index(&[13, 4, 2, 16]);
        let whole = idx.find_piece(0).unwrap();
        idx.crack_in_two(&whole, CrackBound::lower(10)).unwrap();
        assert!(matches!(
            idx.crack_in_two(&whole, CrackBound::lower(3)),
            Err(Error::StalePiece { start: 0 })
        ));
        let left = idx.piece_at(0).unwrap();
        assert!(matches!(
            idx.crack_in_two(&left, CrackBound::lower(12)),
            Err(Error::StalePiece { .. })
        ));
    }

    #[test]
    fn find_piece_after_crack() {
        let (_, mut idx) = index(&[13, 4, 2, 16]);
        let whole = idx.find_piece(0).unwrap();
        idx.crack_in_two(&whole, CrackBound::lower(10)).unwrap();
        // Partition oracle: two values <= 10, so the cut is at 2.
        assert_eq!(filter(&[13, 4, 2, 16], |k| k <= 10).len(), 2);
        assert_eq!(idx.find_piece(4).unwrap().positions(), PositionRange::new(0, 2));
        assert_eq!(idx.find_piece(10).unwrap().positions(), PositionRange::new(0, 2));
        assert_eq!(idx.find_piece(11).unwrap().positions(), PositionRange::new(2, 4));
    }

    #[test]
    fn crack_in_three_bands() {
        let keys = [13, 4, 2, 16, 9];
        let (col, mut idx) = index(&keys);
        let whole = idx.find_piece(0).unwrap();
        let (a, b) = idx
            .crack_in_three(&whole, CrackBound::lower(3), CrackBound::upper(10))
            .unwrap();
        let left = filter(&keys, |k| k <= 3);
        let mid = filter(&keys, |k| 3 < k && k < 10);
        assert_eq!((a, b), (left.len(), left.len() + mid.len()));
        assert_eq!((a, b), (1, 3));
        let v = idx.values().to_vec();
        assert_eq!(sorted(v[..1].to_vec()), vec![2]);
        assert_eq!(sorted(v[1..3].to_vec()), vec![4, 9]);
        assert_eq!(sorted(v[3..].to_vec()), vec![13, 16]);
        assert_eq!(idx.piece_count(), 3);
        idx.check_invariants(&col).unwrap();
    }

    #[test]
    fn crack_in_three_whole_and_empty_middle() {
        let (_, mut idx) = index(&[1, 2, 3]);
        let whole = idx.find_piece(0).unwrap();
        assert_eq!(
            idx.crack_in_three(&whole, CrackBound::lower(0), CrackBound::upper(10)).unwrap(),
            (0, 3)
        );
        assert_eq!(idx.piece_count(), 1);

        let (_, mut idx) = index(&[1, 2, 3]);
        let whole = idx.find_piece(0).unwrap();
        assert_eq!(
            idx.crack_in_three(&whole, CrackBound::lower(5), CrackBound::upper(6)).unwrap(),
            (3, 3)
        );
        assert_eq!(idx.piece_count(), 1);
    }

    #[test]
    fn crack_in_three_empty_interior_middle_keeps_one_cut() {
        let (col, mut idx) = index(&[9, 1]);
        let whole = idx.find_piece(0).unwrap();
        let (a, b) = idx
            .crack_in_three(&whole, CrackBound::lower(3), CrackBound::upper(5))
            .unwrap();
        assert_eq!((a, b), (1, 1));
        assert_eq!(idx.piece_count(), 2);
        idx.check_invariants(&col).unwrap();
        assert_eq!(idx.crack_select(3, 5).unwrap(), PositionRange::new(1, 1));
    }

    #[test]
    fn crack_in_three_rejects_inverted_bounds() {
        let (_, mut idx) = index(&[1, 2, 3]);
        let whole = idx.find_piece(0).unwrap();
        assert!(matches!(
            idx.crack_in_three(&whole, CrackBound::lower(5), CrackBound::upper(5)),
            Err(Error::InvalidBounds { .. })
        ));
    }

    #[test]
    fn crack_select_examples() {
        let keys = [13, 4, 2, 16, 9];
        let (col, mut idx) = index(&keys);
        let r = idx.crack_select(3, 10).unwrap();
        assert_eq!(r.len(), filter(&keys, |k| 3 < k && k < 10).len());
        let got = sorted(idx.values()[r.as_range()].to_vec());
        assert_eq!(got, vec![4, 9]);

        let before = idx.values().to_vec();
        assert_eq!(idx.crack_select(3, 10).unwrap(), r);
        assert_eq!(idx.values(), &before[..]);

        assert_eq!(idx.crack_select(1, 17).unwrap(), PositionRange::new(0, 5));
        idx.check_invariants(&col).unwrap();
        assert!(matches!(idx.crack_select(4, 4), Err(Error::InvalidBounds { .. })));
    }

    #[test]
    fn crack_select_spanning_pieces_touches_only_boundary_pieces() {
        let keys: Vec<Key> = vec![50, 10, 90, 30, 70, 20, 80, 60, 40, 0];
        let (col, mut idx) = index(&keys);
        idx.crack_select(25, 65).unwrap();
        let before = idx.values().to_vec();
        let r = idx.crack_select(15, 75).unwrap();
        let after = idx.values().to_vec();
        // The interior piece (25, 65) is untouched.
        let inner = idx.find_piece(40).unwrap();
        assert_eq!(before[inner.start..inner.end], after[inner.start..inner.end]);
        let got = sorted(after[r.as_range()].to_vec());
        assert_eq!(got, vec![20, 30, 40, 50, 60, 70]);
        idx.check_invariants(&col).unwrap();
    }

    #[test]
    fn empty_index_select() {
        let (_, mut idx) = index(&[]);
        assert_eq!(idx.crack_select(0, 10).unwrap(), PositionRange::default());
    }

    #[test]
    fn extreme_keys() {
        let keys = [i64::MIN, i64::MAX, 0, i64::MIN + 1, i64::MAX - 1];
        let (col, mut idx) = index(&keys);
        let r = idx.crack_select(i64::MIN, i64::MAX).unwrap();
        assert_eq!(r.len(), 3);
        let r = idx.crack_select(i64::MAX - 2, i64::MAX).unwrap();
        assert_eq!(r.len(), 1);
        idx.check_invariants(&col).unwrap();
    }
}
