//! 64-bit encoded pointer layout and arithmetic.
//!
//! An encoded pointer packs a 40-bit object id above a 24-bit byte offset:
//!
//! ```text
//! bit 63                        24 23                      0
//!     +--------------------------+------------------------+
//!     |        id (40 bits)      |    offset (24 bits)    |
//!     +--------------------------+------------------------+
//! ```
//!
//! Issued ids keep the top 16 bits of the word nonzero, so encoded words stay
//! disjoint from canonical user-space addresses and `is_encoded` needs only a
//! shift. Pointer arithmetic acts on the whole word; steps that stay inside
//! one object move only the offset field, so subtracting two pointers into
//! the same object recovers their byte distance exactly, while a step that
//! escapes the offset field corrupts the id and (almost surely) faults on
//! dereference.

/// Width of the offset field: log2 of the 16 MiB per-object window.
pub const OFFSET_BITS: u32 = 24;
/// Width of the id field.
pub const ID_BITS: u32 = 64 - OFFSET_BITS;
/// Mask selecting the offset field of a word.
pub const OFFSET_MASK: u64 = (1 << OFFSET_BITS) - 1;
/// Per-object offset window in bytes.
pub const OFFSET_CAPACITY: u64 = 1 << OFFSET_BITS;
/// Largest representable id.
pub const MAX_ID: u64 = (1 << ID_BITS) - 1;
/// Words with any of the top 16 bits set are treated as encoded.
pub const ENCODED_SHIFT: u32 = 48;

/// A 64-bit word that may carry an (id, offset) encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct EncodedPointer(pub u64);

/// Decomposed form of an encoded word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdOffset {
    pub id: u64,
    pub offset: u32,
}

impl EncodedPointer {
    pub fn word(self) -> u64 {
        self.0
    }

    pub fn id(self) -> u64 {
        self.0 >> OFFSET_BITS
    }

    pub fn offset(self) -> u32 {
        (self.0 & OFFSET_MASK) as u32
    }

    pub fn is_encoded(self) -> bool {
        is_encoded(self)
    }

    /// Whole-word arithmetic, exactly what `p + k` does to a raw pointer.
    pub fn wrapping_add(self, k: i64) -> EncodedPointer {
        EncodedPointer(self.0.wrapping_add(k as u64))
    }
}

/// Packs id and offset into one word. Both fields must be in range.
pub fn flatten(pair: IdOffset) -> EncodedPointer {
    assert!(pair.id <= MAX_ID, "id out of range: {:#x}", pair.id);
    assert!(
        (pair.offset as u64) < OFFSET_CAPACITY,
        "offset out of range: {:#x}",
        pair.offset
    );
    EncodedPointer((pair.id << OFFSET_BITS) | pair.offset as u64)
}

/// Splits a word into its id and offset fields.
pub fn unflatten(p: EncodedPointer) -> IdOffset {
    IdOffset {
        id: p.0 >> OFFSET_BITS,
        offset: (p.0 & OFFSET_MASK) as u32,
    }
}

/// True when the word carries an encoding rather than a plain address.
pub fn is_encoded(p: EncodedPointer) -> bool {
    (p.0 >> ENCODED_SHIFT) != 0
}

/// Signed whole-word difference `q - p`. For two pointers into the same
/// object this is their byte distance regardless of the randomized encoding.
pub fn diff(p: EncodedPointer, q: EncodedPointer) -> i64 {
    q.0.wrapping_sub(p.0) as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Worked example: two live pointers and their raw words.
    const P_WORD: u64 = 0xac84_15a2_0956_6010;
    const P_ID: u64 = 0xac_8415_a209;
    const P_OFFSET: u32 = 0x56_6010;
    const Q_WORD: u64 = 0xb5da_178f_9e40_d020;
    const Q_ID: u64 = 0xb5_da17_8f9e;
    const Q_OFFSET: u32 = 0x40_d020;
    // q - p as a signed 64-bit value.
    const K: i64 = 672_727_314_255_736_848;

    #[test]
    fn flatten_packs_id_above_offset() {
        let p = flatten(IdOffset {
            id: P_ID,
            offset: P_OFFSET,
        });
        assert_eq!(p.word(), P_WORD);
        let q = flatten(IdOffset {
            id: Q_ID,
            offset: Q_OFFSET,
        });
        assert_eq!(q.word(), Q_WORD);
    }

    #[test]
    fn unflatten_splits_fields() {
        let pair = unflatten(EncodedPointer(P_WORD));
        assert_eq!(
            pair,
            IdOffset {
                id: P_ID,
                offset: P_OFFSET
            }
        );
        let pair = unflatten(EncodedPointer(Q_WORD));
        assert_eq!(
            pair,
            IdOffset {
                id: Q_ID,
                offset: Q_OFFSET
            }
        );
    }

    #[test]
    fn encoded_words_are_disjoint_from_plain_addresses() {
        assert!(is_encoded(EncodedPointer(P_WORD)));
        assert!(is_encoded(EncodedPointer(Q_WORD)));
        // A canonical user-space address has its top 16 bits clear.
        assert!(!is_encoded(EncodedPointer(0x0000_5647_4511_9010)));
        assert!(!is_encoded(EncodedPointer(0)));
        // Boundary: exactly one bit in the top 16.
        assert!(is_encoded(EncodedPointer(1 << 48)));
        assert!(!is_encoded(EncodedPointer((1 << 48) - 1)));
    }

    #[test]
    fn diff_recovers_byte_distance_across_objects() {
        let p = EncodedPointer(P_WORD);
        let q = EncodedPointer(Q_WORD);
        assert_eq!(diff(p, q), K);
        assert_eq!(diff(q, p), -K);
        // p + k lands exactly on q, same as raw pointer arithmetic.
        assert_eq!(p.wrapping_add(K), q);
    }

    #[test]
    fn diff_is_signed_across_wraparound() {
        let hi = EncodedPointer(u64::MAX);
        let lo = EncodedPointer(2);
        assert_eq!(diff(hi, lo), 3);
        assert_eq!(diff(lo, hi), -3);
    }

    proptest! {
        #[test]
        fn roundtrip_any_word(word in any::<u64>()) {
            let p = EncodedPointer(word);
            prop_assert_eq!(flatten(unflatten(p)), p);
        }

        #[test]
        fn roundtrip_any_pair(id in 0..=MAX_ID, offset in 0..OFFSET_CAPACITY) {
            let pair = IdOffset { id, offset: offset as u32 };
            prop_assert_eq!(unflatten(flatten(pair)), pair);
        }

        // In-object arithmetic stays within the offset field, so distances
        // between same-object pointers are exact.
        #[test]
        fn same_object_distance_is_exact(
            id in 1..=MAX_ID,
            zero in 0u64..OFFSET_CAPACITY / 2,
            i in 0u64..OFFSET_CAPACITY / 4,
            j in 0u64..OFFSET_CAPACITY / 4,
        ) {
            let base = flatten(IdOffset { id, offset: zero as u32 });
            let pi = base.wrapping_add(i as i64);
            let pj = base.wrapping_add(j as i64);
            prop_assert_eq!(diff(pi, pj), j as i64 - i as i64);
            prop_assert_eq!(unflatten(pi).id, id);
        }

        // Stepping below the start of the offset field borrows from the id,
        // so an underflowed pointer no longer names the same object.
        #[test]
        fn offset_underflow_escapes_the_id(id in 1..=MAX_ID, step in 1u64..=OFFSET_CAPACITY) {
            let base = flatten(IdOffset { id, offset: 0 });
            let under = base.wrapping_add(-(step as i64));
            prop_assert_ne!(unflatten(under).id, id);
        }
    }
}
