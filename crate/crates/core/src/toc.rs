//! Table of contents for a cracker array.
//!
//! A boundary is a cut between two adjacent pieces. Each boundary carries the
//! key it was created for and which side of the cut that key itself falls on,
//! so duplicates of a pivot value always land deterministically. Internally a
//! boundary is compared by its *threshold*: the smallest key that belongs to
//! the right-hand side. Two boundaries with the same threshold describe the
//! same cut on the integer domain (`<= 4` and `< 5`) and compare equal.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::{Bound, Range};

use crate::{Key, Offset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Inclusivity {
    /// Values equal to the boundary key sit on the left (`<= key` left).
    BelongsLeft,
    /// Values equal to the boundary key sit on the right (`< key` left).
    BelongsRight,
}

#[derive(Debug, Clone, Copy)]
pub struct Boundary {
    pub key: Key,
    pub inclusivity: Inclusivity,
}

impl Boundary {
    /// Cut with every value `<= key` on the left.
    pub fn at_or_below(key: Key) -> Self {
        Self {
            key,
            inclusivity: Inclusivity::BelongsLeft,
        }
    }

    /// Cut with every value `< key` on the left.
    pub fn below(key: Key) -> Self {
        Self {
            key,
            inclusivity: Inclusivity::BelongsRight,
        }
    }

    /// Smallest key that falls right of this cut.
    pub fn threshold(&self) -> i128 {
        match self.inclusivity {
            Inclusivity::BelongsLeft => self.key as i128 + 1,
            Inclusivity::BelongsRight => self.key as i128,
        }
    }

    #[inline]
    pub fn is_left(&self, value: Key) -> bool {
        match self.inclusivity {
            Inclusivity::BelongsLeft => value <= self.key,
            Inclusivity::BelongsRight => value < self.key,
        }
    }
}

impl PartialEq for Boundary {
    fn eq(&self, other: &Self) -> bool {
        self.threshold() == other.threshold()
    }
}

impl Eq for Boundary {}

impl PartialOrd for Boundary {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Boundary {
    fn cmp(&self, other: &Self) -> Ordering {
        self.threshold().cmp(&other.threshold())
    }
}

/// Half-open range of positions in a cracker array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PositionRange {
    pub start: Offset,
    pub end: Offset,
}

impl PositionRange {
    pub fn new(start: Offset, end: Offset) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn as_range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// A contiguous segment of the cracker array together with the key range its
/// values are known to lie in. `None` bounds are open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub start: Offset,
    pub end: Offset,
    pub low: Option<Boundary>,
    pub high: Option<Boundary>,
}

impl Piece {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn positions(&self) -> PositionRange {
        PositionRange::new(self.start, self.end)
    }

    fn low_threshold(&self) -> i128 {
        self.low.map_or(i128::MIN, |b| b.threshold())
    }

    fn high_threshold(&self) -> i128 {
        self.high.map_or(i128::MAX, |b| b.threshold())
    }

    pub fn contains(&self, key: Key) -> bool {
        let k = key as i128;
        self.low_threshold() <= k && k < self.high_threshold()
    }

    /// True when `cut` falls strictly between this piece's bounding cuts.
    pub fn splits_at(&self, cut: &Boundary) -> bool {
        let t = cut.threshold();
        self.low_threshold() < t && t < self.high_threshold()
    }

    /// True when `cut` lies within the piece's closed cut range (interior or
    /// coinciding with one of its edges).
    pub fn admits(&self, cut: &Boundary) -> bool {
        let t = cut.threshold();
        self.low_threshold() <= t && t <= self.high_threshold()
    }

    /// True when every key this piece may hold satisfies `low < key < high`.
    pub fn within(&self, low: Key, high: Key) -> bool {
        self.low_threshold() > low as i128 && self.high_threshold() <= high as i128
    }

    /// True when every key this piece may hold is `>= key`.
    pub fn at_or_above(&self, key: Key) -> bool {
        self.low_threshold() >= key as i128
    }

    /// True when no key this piece may hold satisfies `low < key < high`.
    pub fn disjoint_from(&self, low: Key, high: Key) -> bool {
        self.high_threshold() <= low as i128 + 1 || self.low_threshold() >= high as i128
    }
}

/// Where a cut falls relative to the current pieces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// The cut already exists at this offset; no cracking needed.
    Boundary(Offset),
    /// The cut falls inside this piece.
    Inside(Piece),
}

#[derive(Debug, Clone, Default)]
pub struct TableOfContents {
    len: usize,
    by_key: BTreeMap<Boundary, Offset>,
    by_offset: BTreeMap<Offset, Boundary>,
    history: Vec<(Boundary, Offset)>,
}

impl TableOfContents {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            ..Default::default()
        }
    }

    pub fn array_len(&self) -> usize {
        self.len
    }

    pub fn piece_count(&self) -> usize {
        if self.len == 0 {
            0
        } else {
            self.by_key.len() + 1
        }
    }

    pub fn boundary_count(&self) -> usize {
        self.by_key.len()
    }

    pub fn offset_of(&self, cut: &Boundary) -> Option<Offset> {
        self.by_key.get(cut).copied()
    }

    fn piece_between(&self, low: Option<(&Boundary, &Offset)>, high: Option<(&Boundary, &Offset)>) -> Piece {
        Piece {
            start: low.map_or(0, |(_, &o)| o),
            end: high.map_or(self.len, |(_, &o)| o),
            low: low.map(|(b, _)| *b),
            high: high.map(|(b, _)| *b),
        }
    }

    /// The piece whose key range holds `key`.
    pub fn find_piece(&self, key: Key) -> Option<Piece> {
        if self.len == 0 {
            return None;
        }
        // A probe with threshold `key`: boundaries at or below it bound the
        // piece from the left, the first one above it from the right.
        let probe = Boundary::below(key);
        let low = self.by_key.range(..=probe).next_back();
        let high = self
            .by_key
            .range((Bound::Excluded(probe), Bound::Unbounded))
            .next();
        Some(self.piece_between(low, high))
    }

    pub fn locate(&self, cut: &Boundary) -> Option<Location> {
        if self.len == 0 {
            return None;
        }
        if let Some(off) = self.offset_of(cut) {
            return Some(Location::Boundary(off));
        }
        let low = self.by_key.range(..*cut).next_back();
        let high = self
            .by_key
            .range((Bound::Excluded(*cut), Bound::Unbounded))
            .next();
        Some(Location::Inside(self.piece_between(low, high)))
    }

    /// The current piece that begins exactly at `start`.
    pub fn piece_at(&self, start: Offset) -> Option<Piece> {
        if start >= self.len {
            return None;
        }
        let low = if start == 0 {
            None
        } else {
            let b = self.by_offset.get(&start)?;
            Some((b, &start))
        };
        let high = self
            .by_offset
            .range((Bound::Excluded(start), Bound::Unbounded))
            .next()
            .map(|(o, b)| (b, o));
        Some(self.piece_between(low, high))
    }

    /// Every current piece in ascending key order.
    pub fn pieces(&self) -> Vec<Piece> {
        let mut out = Vec::with_capacity(self.piece_count());
        let mut start = 0;
        while let Some(p) = self.piece_at(start) {
            start = p.end;
            out.push(p);
        }
        out
    }

    pub fn boundaries(&self) -> impl Iterator<Item = (Boundary, Offset)> + '_ {
        self.by_key.iter().map(|(b, o)| (*b, *o))
    }

    /// Every boundary ever inserted, in creation order.
    pub fn history(&self) -> &[(Boundary, Offset)] {
        &self.history
    }

    /// Records a new cut. Zero-width pieces are never created: cuts at either
    /// end of the array, duplicates, and cuts whose offset is not strictly
    /// between its neighbours' offsets are rejected with `false`.
    pub fn insert(&mut self, cut: Boundary, offset: Offset) -> bool {
        if offset == 0 || offset >= self.len || self.by_key.contains_key(&cut) {
            return false;
        }
        let below = self.by_key.range(..cut).next_back().map_or(0, |(_, &o)| o);
        let above = self
            .by_key
            .range((Bound::Excluded(cut), Bound::Unbounded))
            .next()
            .map_or(self.len, |(_, &o)| o);
        if !(below < offset && offset < above) {
            return false;
        }
        self.by_key.insert(cut, offset);
        self.by_offset.insert(offset, cut);
        self.history.push((cut, offset));
        true
    }

    /// Drops positions `range` from the array this table describes, shifting
    /// later offsets down. Boundaries that end up at the same offset, or at
    /// either end of the shortened array, are discarded (keeping the lowest
    /// cut), so the remaining pieces still tile the array.
    pub fn remove_positions(&mut self, range: PositionRange) {
        let removed = range.len();
        if removed == 0 {
            return;
        }
        let new_len = self.len - removed;
        let mut kept: BTreeMap<Boundary, Offset> = BTreeMap::new();
        let mut last_offset = None;
        for (b, o) in self.by_key.iter() {
            let shifted = if *o <= range.start {
                *o
            } else if *o < range.end {
                continue;
            } else {
                *o - removed
            };
            if shifted == 0 || shifted >= new_len || last_offset == Some(shifted) {
                continue;
            }
            last_offset = Some(shifted);
            kept.insert(*b, shifted);
        }
        self.len = new_len;
        self.by_offset = kept.iter().map(|(b, o)| (*o, *b)).collect();
        self.by_key = kept;
        self.history.clear();
    }

    /// Checks that pieces tile `[0, len)` with strictly increasing offsets.
    pub fn check_tiling(&self) -> Result<(), String> {
        let mut prev = 0;
        for (b, o) in self.by_key.iter() {
            if *o <= prev || *o >= self.len {
                return Err(format!(
                    "boundary {:?} at offset {} breaks ordering (previous {}, len {})",
                    b, o, prev, self.len
                ));
            }
            prev = *o;
        }
        if self.by_key.len() != self.by_offset.len() {
            return Err("key and offset maps disagree".into());
        }
        let covered: usize = self.pieces().iter().map(Piece::len).sum();
        if covered != self.len {
            return Err(format!("pieces cover {covered} of {} positions", self.len));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toc_with(len: usize, cuts: &[(Boundary, Offset)]) -> TableOfContents {
        let mut t = TableOfContents::new(len);
        for (b, o) in cuts {
            assert!(t.insert(*b, *o));
        }
        t
    }

    #[test]
    fn boundary_equality_uses_integer_threshold() {
        assert_eq!(Boundary::at_or_below(4), Boundary::below(5));
        assert!(Boundary::below(5) < Boundary::at_or_below(5));
        assert!(Boundary::at_or_below(i64::MAX) > Boundary::below(i64::MAX));
    }

    #[test]
    fn fresh_table_has_one_piece() {
        let t = TableOfContents::new(4);
        let p = t.find_piece(99).unwrap();
        assert_eq!((p.start, p.end), (0, 4));
        assert_eq!(t.piece_count(), 1);
        assert!(TableOfContents::new(0).find_piece(1).is_none());
        assert_eq!(TableOfContents::new(0).piece_count(), 0);
    }

    #[test]
    fn find_piece_respects_inclusivity() {
        let t = toc_with(4, &[(Boundary::at_or_below(10), 2)]);
        assert_eq!(t.find_piece(4).unwrap().positions(), PositionRange::new(0, 2));
        assert_eq!(t.find_piece(10).unwrap().positions(), PositionRange::new(0, 2));
        assert_eq!(t.find_piece(11).unwrap().positions(), PositionRange::new(2, 4));

        let t = toc_with(4, &[(Boundary::below(10), 2)]);
        assert_eq!(t.find_piece(10).unwrap().positions(), PositionRange::new(2, 4));
    }

    #[test]
    fn insert_rejects_degenerate_and_out_of_order() {
        let mut t = toc_with(10, &[(Boundary::below(50), 5)]);
        assert!(!t.insert(Boundary::below(20), 0));
        assert!(!t.insert(Boundary::below(20), 10));
        assert!(!t.insert(Boundary::below(20), 5));
        assert!(!t.insert(Boundary::below(20), 7));
        assert!(!t.insert(Boundary::at_or_below(49), 3));
        assert!(t.insert(Boundary::below(20), 3));
        assert_eq!(t.piece_count(), 3);
        t.check_tiling().unwrap();
    }

    #[test]
    fn piece_at_follows_offsets() {
        let t = toc_with(10, &[(Boundary::below(50), 5), (Boundary::below(20), 2)]);
        let p = t.piece_at(2).unwrap();
        assert_eq!((p.start, p.end), (2, 5));
        assert_eq!(p.low, Some(Boundary::below(20)));
        assert_eq!(p.high, Some(Boundary::below(50)));
        assert!(t.piece_at(3).is_none());
        assert!(t.piece_at(10).is_none());
        let starts: Vec<_> = t.pieces().iter().map(|p| p.start).collect();
        assert_eq!(starts, vec![0, 2, 5]);
    }

    #[test]
    fn locate_reports_existing_cut() {
        let t = toc_with(10, &[(Boundary::at_or_below(9), 5)]);
        assert_eq!(t.locate(&Boundary::below(10)), Some(Location::Boundary(5)));
        match t.locate(&Boundary::below(3)).unwrap() {
            Location::Inside(p) => assert_eq!((p.start, p.end), (0, 5)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn piece_range_predicates() {
        let p = Piece {
            start: 0,
            end: 3,
            low: Some(Boundary::at_or_below(3)),
            high: Some(Boundary::below(10)),
        };
        assert!(p.within(3, 10));
        assert!(!p.within(4, 10));
        assert!(p.disjoint_from(10, 20));
        assert!(p.disjoint_from(-5, 4));
        assert!(!p.disjoint_from(-5, 5));
        assert!(p.splits_at(&Boundary::below(5)));
        assert!(!p.splits_at(&Boundary::below(10)));
        assert!(p.admits(&Boundary::below(10)));
    }

    #[test]
    fn remove_positions_shifts_and_dedups() {
        // pieces [0,2) [2,4) [4,7) [7,10)
        let mut t = toc_with(
            10,
            &[
                (Boundary::below(10), 2),
                (Boundary::below(20), 4),
                (Boundary::below(30), 7),
            ],
        );
        t.remove_positions(PositionRange::new(2, 4));
        assert_eq!(t.array_len(), 8);
        let cuts: Vec<_> = t.boundaries().collect();
        assert_eq!(cuts, vec![(Boundary::below(10), 2), (Boundary::below(30), 5)]);
        t.check_tiling().unwrap();

        t.remove_positions(PositionRange::new(0, 2));
        let cuts: Vec<_> = t.boundaries().collect();
        assert_eq!(cuts, vec![(Boundary::below(30), 3)]);
        t.check_tiling().unwrap();
    }
}
