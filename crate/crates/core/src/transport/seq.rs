//! 31-bit wire sequence numbers and their mapping to 64-bit packet numbers.
//!
//! Connection state counts packets with a monotonically increasing `u64`
//! starting at zero. Only the wire form wraps, as `(initial + n) mod 2^31`.

/// Largest representable wire sequence number plus one.
pub const SEQ_MODULUS: u32 = 1 << 31;
const SEQ_MASK: u32 = SEQ_MODULUS - 1;

/// A sequence number as carried in a packet header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqNo(u32);

impl SeqNo {
    pub fn new(raw: u32) -> Self {
        SeqNo(raw & SEQ_MASK)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn advance(self, n: u64) -> SeqNo {
        SeqNo(((self.0 as u64 + n) & SEQ_MASK as u64) as u32)
    }

    /// Signed distance `self - other` in the circular space, in `[-2^30, 2^30)`.
    pub fn diff(self, other: SeqNo) -> i64 {
        let d = self.0.wrapping_sub(other.0) & SEQ_MASK;
        if d >= SEQ_MODULUS / 2 {
            d as i64 - SEQ_MODULUS as i64
        } else {
            d as i64
        }
    }
}

/// Maps packet numbers to and from wire sequence numbers for one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpace {
    initial: SeqNo,
}

impl SeqSpace {
    pub fn new(initial: SeqNo) -> Self {
        SeqSpace { initial }
    }

    pub fn initial(&self) -> SeqNo {
        self.initial
    }

    pub fn encode(&self, pn: u64) -> SeqNo {
        self.initial.advance(pn)
    }

    /// Recovers the packet number closest to `reference`. Returns `None` when
    /// the result would precede the first packet of the stream.
    pub fn decode(&self, wire: SeqNo, reference: u64) -> Option<u64> {
        let d = wire.diff(self.encode(reference));
        let pn = reference as i64 + d;
        (pn >= 0).then_some(pn as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wraps_modulo_2_pow_31() {
        let s = SeqNo::new(SEQ_MODULUS - 1);
        assert_eq!(s.advance(1).get(), 0);
        assert_eq!(s.advance(1).diff(s), 1);
        assert_eq!(s.diff(s.advance(1)), -1);
        assert_eq!(SeqNo::new(u32::MAX).get(), SEQ_MODULUS - 1);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(initial in 0u32..SEQ_MODULUS, pn in 0u64..(1u64 << 40), jitter in -100_000i64..100_000) {
            let space = SeqSpace::new(SeqNo::new(initial));
            let reference = (pn as i64 + jitter).max(0) as u64;
            prop_assert_eq!(space.decode(space.encode(pn), reference), Some(pn));
        }
    }
}
