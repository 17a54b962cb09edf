use crate::seq::SequenceNumber;
use thiserror::Error;

const RANGE_FLAG: u32 = 0x8000_0000;

/// Ordered set of disjoint inclusive sequence ranges.
///
/// Ranges are kept sorted by modular order, so every live entry must sit in
/// a window narrower than 2^30.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LossList {
    ranges: Vec<(SequenceNumber, SequenceNumber)>,
}

fn le(a: SequenceNumber, b: SequenceNumber) -> bool {
    a == b || a.precedes(b)
}

impl LossList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ranges(&self) -> &[(SequenceNumber, SequenceNumber)] {
        &self.ranges
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Number of sequences covered.
    pub fn len(&self) -> u64 {
        self.ranges.iter().map(|(a, b)| b.offset_from(*a) as u64 + 1).sum()
    }

    pub fn first(&self) -> Option<SequenceNumber> {
        self.ranges.first().map(|r| r.0)
    }

    pub fn contains(&self, s: SequenceNumber) -> bool {
        self.ranges.iter().any(|&(a, b)| le(a, s) && le(s, b))
    }

    /// Inserts `[first, last]`, merging with overlapping or adjacent ranges.
    pub fn insert(&mut self, first: SequenceNumber, last: SequenceNumber) {
        debug_assert!(le(first, last));
        let (mut lo, mut hi) = (first, last);
        let mut out = Vec::with_capacity(self.ranges.len() + 1);
        let mut placed = false;
        for &(a, b) in &self.ranges {
            if b.next().precedes(lo) {
                out.push((a, b));
            } else if hi.next().precedes(a) {
                if !placed {
                    out.push((lo, hi));
                    placed = true;
                }
                out.push((a, b));
            } else {
                if a.precedes(lo) {
                    lo = a;
                }
                if hi.precedes(b) {
                    hi = b;
                }
            }
        }
        if !placed {
            out.push((lo, hi));
        }
        self.ranges = out;
    }

    pub fn insert_one(&mut self, s: SequenceNumber) {
        self.insert(s, s);
    }

    /// Removes a single sequence, splitting a range if needed. Returns
    /// whether it was present.
    pub fn remove(&mut self, s: SequenceNumber) -> bool {
        let Some(i) = self.ranges.iter().position(|&(a, b)| le(a, s) && le(s, b)) else {
            return false;
        };
        let (a, b) = self.ranges[i];
        match (a == s, b == s) {
            (true, true) => {
                self.ranges.remove(i);
            }
            (true, false) => self.ranges[i].0 = s.next(),
            (false, true) => self.ranges[i].1 = s.minus(1),
            (false, false) => {
                self.ranges[i].1 = s.minus(1);
                self.ranges.insert(i + 1, (s.next(), b));
            }
        }
        true
    }

    /// Drops every sequence that precedes `bound`.
    pub fn remove_before(&mut self, bound: SequenceNumber) {
        self.ranges.retain_mut(|(a, b)| {
            if b.precedes(bound) {
                false
            } else {
                if a.precedes(bound) {
                    *a = bound;
                }
                true
            }
        });
    }

    pub fn pop_first(&mut self) -> Option<SequenceNumber> {
        let s = self.first()?;
        self.remove(s);
        Some(s)
    }

    pub fn iter(&self) -> impl Iterator<Item = SequenceNumber> + '_ {
        self.ranges
            .iter()
            .flat_map(|&(a, b)| (0..=b.offset_from(a)).map(move |i| a.plus(i)))
    }

    pub fn clear(&mut self) {
        self.ranges.clear();
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NakError {
    #[error("NAK body length {0} is not a multiple of 4")]
    Misaligned(usize),
    #[error("NAK range start is not followed by an end")]
    DanglingRange,
    #[error("NAK range end precedes its start")]
    Inverted,
    #[error("NAK carries no ranges")]
    Empty,
}

/// Encodes ranges as big-endian words: a single loss is its sequence; a
/// range is `first | 0x8000_0000` followed by `last`.
pub fn encode_nak(ranges: &[(SequenceNumber, SequenceNumber)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ranges.len() * 8);
    for &(a, b) in ranges {
        if a == b {
            out.extend_from_slice(&a.value().to_be_bytes());
        } else {
            out.extend_from_slice(&(a.value() | RANGE_FLAG).to_be_bytes());
            out.extend_from_slice(&b.value().to_be_bytes());
        }
    }
    out
}

pub fn decode_nak(body: &[u8]) -> Result<Vec<(SequenceNumber, SequenceNumber)>, NakError> {
    if !body.len().is_multiple_of(4) {
        return Err(NakError::Misaligned(body.len()));
    }
    let words: Vec<u32> = body
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let w = words[i];
        if w & RANGE_FLAG != 0 {
            let last = *words.get(i + 1).ok_or(NakError::DanglingRange)?;
            if last & RANGE_FLAG != 0 {
                return Err(NakError::DanglingRange);
            }
            let (a, b) = (SequenceNumber::wrapping(w), SequenceNumber::wrapping(last));
            if b.precedes(a) {
                return Err(NakError::Inverted);
            }
            out.push((a, b));
            i += 2;
        } else {
            let s = SequenceNumber::wrapping(w);
            out.push((s, s));
            i += 1;
        }
    }
    if out.is_empty() {
        return Err(NakError::Empty);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn s(v: u32) -> SequenceNumber {
        SequenceNumber::wrapping(v)
    }

    #[test]
    fn single_insert() {
        let mut l = LossList::new();
        l.insert(s(10), s(12));
        assert_eq!(l.ranges(), &[(s(10), s(12))]);
        assert_eq!(l.len(), 3);
    }

    #[test]
    fn overlapping_ranges_merge() {
        let mut l = LossList::new();
        l.insert(s(10), s(12));
        l.insert(s(11), s(14));
        assert_eq!(l.ranges(), &[(s(10), s(14))]);
        l.insert(s(15), s(15));
        assert_eq!(l.ranges(), &[(s(10), s(15))]);
        l.insert(s(20), s(21));
        l.insert(s(1), s(2));
        assert_eq!(l.ranges(), &[(s(1), s(2)), (s(10), s(15)), (s(20), s(21))]);
        l.insert(s(3), s(19));
        assert_eq!(l.ranges(), &[(s(1), s(21))]);
    }

    #[test]
    fn remove_splits() {
        let mut l = LossList::new();
        l.insert(s(10), s(14));
        assert!(l.remove(s(12)));
        assert_eq!(l.ranges(), &[(s(10), s(11)), (s(13), s(14))]);
        assert!(!l.remove(s(12)));
        l.remove_before(s(11));
        assert_eq!(l.ranges(), &[(s(11), s(11)), (s(13), s(14))]);
        assert_eq!(l.pop_first(), Some(s(11)));
        assert_eq!(l.iter().collect::<Vec<_>>(), vec![s(13), s(14)]);
    }

    #[test]
    fn wraps_around_sequence_space() {
        let mut l = LossList::new();
        let max = SequenceNumber::MAX;
        l.insert(max.minus(1), max);
        l.insert(s(0), s(1));
        assert_eq!(l.ranges(), &[(max.minus(1), s(1))]);
        assert!(l.contains(s(0)) && l.contains(max));
        l.remove_before(s(0));
        assert_eq!(l.ranges(), &[(s(0), s(1))]);
    }

    #[test]
    fn nak_encoding() {
        let ranges = vec![(s(10), s(12)), (s(20), s(20))];
        let body = encode_nak(&ranges);
        assert_eq!(body, [0x80, 0, 0, 10, 0, 0, 0, 12, 0, 0, 0, 20]);
        assert_eq!(decode_nak(&body).unwrap(), ranges);
        assert_eq!(decode_nak(&body[..4]), Err(NakError::DanglingRange));
        assert_eq!(decode_nak(&body[..5]), Err(NakError::Misaligned(5)));
        assert_eq!(decode_nak(&[]), Err(NakError::Empty));
        assert_eq!(decode_nak(&[0x80, 0, 0, 12, 0, 0, 0, 10]), Err(NakError::Inverted));
    }

    proptest! {
        /// Oracle: expand every range into a plain set of integers.
        #[test]
        fn merge_matches_set_oracle(base in 0u32..=crate::seq::MAX_SEQ,
                                    ranges in proptest::collection::vec((0u32..500, 0u32..20), 0..30),
                                    removals in proptest::collection::vec(0u32..520, 0..10)) {
            let base = s(base);
            let mut l = LossList::new();
            let mut oracle = BTreeSet::new();
            for (start, len) in ranges {
                l.insert(base.plus(start), base.plus(start + len));
                oracle.extend(start..=start + len);
            }
            for r in removals {
                prop_assert_eq!(l.remove(base.plus(r)), oracle.remove(&r));
            }
            let got: Vec<u32> = l.iter().map(|x| x.offset_from(base)).collect();
            let want: Vec<u32> = oracle.iter().copied().collect();
            prop_assert_eq!(got, want);
            // Disjoint, sorted, non-adjacent.
            for w in l.ranges().windows(2) {
                prop_assert!(w[0].1.next().precedes(w[1].0));
            }
            prop_assert_eq!(decode_nak(&encode_nak(l.ranges())).ok().unwrap_or_default(), l.ranges().to_vec());
        }
    }
}
