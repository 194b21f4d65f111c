//! Fault taxonomy and configuration errors shared across the simulator.

use std::error::Error;
use std::fmt;

use serde::Serialize;

/// Terminal outcome classes for rejected operations.
///
/// Reads that merely leave their owning object are not faults; the access
/// engine serves the in-bounds bytes and zero-fills the rest. Everything
/// listed here aborts the offending operation with no side effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    /// Encoded id with no live mapping: dangling pointer or forged word.
    UnmappedId,
    /// Store with at least one byte outside the owning object.
    OobWrite,
    /// Allocation request too large for one offset window.
    LargeAllocation,
    /// Free of a word that is not the encoded base of a live object.
    InvalidFree,
    /// No unused id left to issue.
    IdExhaustion,
}

impl fmt::Display for FaultClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FaultClass::UnmappedId => "unmapped id",
            FaultClass::OobWrite => "out-of-bounds write",
            FaultClass::LargeAllocation => "allocation exceeds offset window",
            FaultClass::InvalidFree => "invalid free",
            FaultClass::IdExhaustion => "id space exhausted",
        };
        f.write_str(name)
    }
}

impl Error for FaultClass {}

/// Rejected simulator configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    /// id_random_bits above the 40-bit id field.
    IdBits(u32),
    /// offset_random_bits above the 12 randomizable offset bits.
    OffsetBits(u32),
    /// Alignment not a power of two in 1..=16.
    Alignment(u64),
    /// Cache entries not a positive multiple of the associativity.
    CacheGeometry { entries: u32, associativity: u32 },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::IdBits(n) => write!(f, "id_random_bits must be at most 40, got {n}"),
            ConfigError::OffsetBits(n) => {
                write!(f, "offset_random_bits must be at most 12, got {n}")
            }
            ConfigError::Alignment(a) => {
                write!(f, "alignment must be a power of two in 1..=16, got {a}")
            }
            ConfigError::CacheGeometry { entries, associativity } => write!(
                f,
                "cache entries ({entries}) must be a positive multiple of associativity ({associativity})"
            ),
        }
    }
}

impl Error for ConfigError {}
