//! 31-bit packet sequence numbers with modular ordering.

use std::cmp::Ordering;
use std::fmt;

/// Number of distinct sequence values (2^31).
pub const SEQ_SPACE: u32 = 1 << 31;
/// Largest representable sequence number.
pub const MAX_SEQ: u32 = SEQ_SPACE - 1;
const HALF_SPACE: u32 = 1 << 30;

/// A packet sequence number in `[0, 2^31)`.
///
/// Ordering uses the half-range convention: `a` precedes `b` iff
/// `0 < (b - a) mod 2^31 < 2^30`. This is only a total order over windows
/// of fewer than 2^30 live values, which is why `SequenceNumber` does not
/// implement `Ord`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SequenceNumber(u32);

impl SequenceNumber {
    pub const ZERO: SequenceNumber = SequenceNumber(0);
    pub const MAX: SequenceNumber = SequenceNumber(MAX_SEQ);

    /// Returns `None` if `value` does not fit in 31 bits.
    pub fn new(value: u32) -> Option<Self> {
        (value <= MAX_SEQ).then_some(SequenceNumber(value))
    }

    /// Reduces an arbitrary `u32` into the sequence space.
    pub fn wrapping(value: u32) -> Self {
        SequenceNumber(value & MAX_SEQ)
    }

    pub fn value(self) -> u32 {
        self.0
    }

    /// `(self + 1) mod 2^31`.
    pub fn next(self) -> Self {
        self.plus(1)
    }

    pub fn plus(self, n: u32) -> Self {
        SequenceNumber(self.0.wrapping_add(n) & MAX_SEQ)
    }

    pub fn minus(self, n: u32) -> Self {
        SequenceNumber(self.0.wrapping_sub(n) & MAX_SEQ)
    }

    /// Forward distance from `earlier` to `self`, i.e. `(self - earlier) mod 2^31`.
    pub fn offset_from(self, earlier: SequenceNumber) -> u32 {
        self.0.wrapping_sub(earlier.0) & MAX_SEQ
    }

    /// True iff `self` comes strictly before `other`.
    pub fn precedes(self, other: SequenceNumber) -> bool {
        let d = other.offset_from(self);
        d != 0 && d < HALF_SPACE
    }

    /// Modular comparison; meaningful only within a half-range window.
    pub fn cmp_modular(self, other: SequenceNumber) -> Ordering {
        if self == other {
            Ordering::Equal
        } else if self.precedes(other) {
            Ordering::Less
        } else {
            Ordering::Greater
        }
    }
}

/// `(s + 1) mod 2^31`.
pub fn next_sequence(s: SequenceNumber) -> SequenceNumber {
    s.next()
}

impl fmt::Debug for SequenceNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl fmt::Display for SequenceNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}
