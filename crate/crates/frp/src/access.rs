//! Checked loads and stores through encoded pointers.
//!
//! `decode` passes plain words through untouched and translates encoded ones
//! via the object map, faulting when the id has no live mapping. Bounds are
//! enforced at access time, never on pointer arithmetic:
//!
//! * a load that leaves its object returns the in-bounds bytes and
//!   zero-fills the rest, flagging which bytes were zeroed;
//! * a store with any byte out of bounds aborts before writing anything;
//! * use-after-free faults for loads and stores alike, because the freed id
//!   is simply gone from the map.
//!
//! Plain (unencoded) accesses wrap into the scratch window and always
//! succeed; nothing at this layer polices native addresses.

use crate::encoding::{unflatten, EncodedPointer, IdOffset};
use crate::error::FaultClass;
use crate::heap::{ObjectMap, ObjectRecord};

/// Supported access widths in bytes.
pub const ACCESS_WIDTHS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Result of one load or store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessOutcome {
    /// Fully in-bounds access. `data` holds the loaded bytes; empty for
    /// stores.
    Ok { data: Vec<u8> },
    /// Load that left its object. `data[i]` is zero wherever
    /// `zeroed_mask[i]` is set.
    OobReadZeroed {
        data: Vec<u8>,
        zeroed_mask: Vec<bool>,
    },
    /// Aborted access.
    Fault(FaultClass),
}

impl AccessOutcome {
    pub fn is_fault(&self) -> bool {
        matches!(self, AccessOutcome::Fault(_))
    }

    pub fn fault(&self) -> Option<FaultClass> {
        match self {
            AccessOutcome::Fault(c) => Some(*c),
            _ => None,
        }
    }

    /// Loaded bytes, if the access produced any.
    pub fn data(&self) -> Option<&[u8]> {
        match self {
            AccessOutcome::Ok { data } => Some(data),
            AccessOutcome::OobReadZeroed { data, .. } => Some(data),
            AccessOutcome::Fault(_) => None,
        }
    }
}

/// Translates a pointer to its simulated address. Plain words pass through
/// unchanged; encoded words map to `arena_base + offset - zero` or fault if
/// the id is not live. No bounds are checked here.
pub fn decode(map: &ObjectMap, p: EncodedPointer) -> Result<u64, FaultClass> {
    if !p.is_encoded() {
        return Ok(p.word());
    }
    let IdOffset { id, offset } = unflatten(p);
    match map.lookup(id) {
        // arena_base >= 2^24 > zero, so this cannot underflow.
        Some(rec) => Ok(rec.arena_base + offset as u64 - rec.zero as u64),
        None => Err(FaultClass::UnmappedId),
    }
}

/// True when [lb, ub) lies inside the record's block.
pub fn check_bounds(rec: &ObjectRecord, lb: u64, ub: u64) -> bool {
    lb >= rec.arena_base && ub <= rec.arena_base + rec.size
}

/// Reads `width` bytes through `p`.
pub fn load(map: &ObjectMap, p: EncodedPointer, width: usize) -> AccessOutcome {
    assert!(
        ACCESS_WIDTHS.contains(&width),
        "unsupported access width {width}"
    );
    if !p.is_encoded() {
        let mut data = vec![0u8; width];
        map.scratch_read(p.word(), &mut data);
        return AccessOutcome::Ok { data };
    }
    let IdOffset { id, offset } = unflatten(p);
    let Some(rec) = map.lookup(id) else {
        return AccessOutcome::Fault(FaultClass::UnmappedId);
    };
    let lb = rec.arena_base + offset as u64 - rec.zero as u64;
    let ub = lb + width as u64;
    if check_bounds(rec, lb, ub) {
        let mut data = vec![0u8; width];
        map.heap_read(lb, &mut data);
        return AccessOutcome::Ok { data };
    }
    // Serve what the object owns, zero the rest, keep running.
    let end = rec.arena_base + rec.size;
    let mut data = vec![0u8; width];
    let mut zeroed_mask = vec![false; width];
    for i in 0..width {
        let a = lb + i as u64;
        if a >= rec.arena_base && a < end {
            data[i] = map.heap_byte(a);
        } else {
            zeroed_mask[i] = true;
        }
    }
    AccessOutcome::OobReadZeroed { data, zeroed_mask }
}

/// Writes `value` through `p`. All bytes must be in bounds or nothing is
/// written.
pub fn store(map: &mut ObjectMap, p: EncodedPointer, width: usize, value: &[u8]) -> AccessOutcome {
    assert!(
        ACCESS_WIDTHS.contains(&width),
        "unsupported access width {width}"
    );
    assert_eq!(value.len(), width, "value length does not match width");
    if !p.is_encoded() {
        map.scratch_write(p.word(), value);
        return AccessOutcome::Ok { data: Vec::new() };
    }
    let IdOffset { id, offset } = unflatten(p);
    let Some(rec) = map.lookup(id) else {
        return AccessOutcome::Fault(FaultClass::UnmappedId);
    };
    let lb = rec.arena_base + offset as u64 - rec.zero as u64;
    let ub = lb + width as u64;
    if !check_bounds(rec, lb, ub) {
        return AccessOutcome::Fault(FaultClass::OobWrite);
    }
    map.heap_write(lb, value);
    AccessOutcome::Ok { data: Vec::new() }
}
