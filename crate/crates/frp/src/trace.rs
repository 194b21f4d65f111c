//! Line-oriented trace format and replay runner.
//!
//! A trace drives the simulated heap one operation per line:
//!
//! ```text
//! # comment, blank lines ignored
//! alloc <label> <size>          # bind label to a fresh allocation
//! free <label>                  # free through the label's current word
//! lea <dst> <src> <delta>       # dst = src + delta (signed, unchecked)
//! load <label> <width>          # read width bytes through the label
//! store <label> <width> <0xHEX> # write width bytes (little-endian value)
//! raw_load <0xWORD> <width>     # read through a literal 64-bit word
//! ```
//!
//! Sizes, widths, and deltas are decimal; words and store values are
//! 0x-prefixed hex. Labels are defined by `alloc` and `lea`, must be defined
//! before use, and cannot be redefined. A freed label keeps its stale word,
//! which is exactly what a use-after-free trace wants.
//!
//! Replay records every operation's outcome, feeds each configured
//! translation cache on every decode of a live id, and never stops early:
//! faults are recorded and the run continues, mirroring a hardened process
//! that keeps executing. The report carries no wall-clock state, so a given
//! (trace, config, seed) triple always serializes to identical bytes.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::access::{load, store, AccessOutcome, ACCESS_WIDTHS};
use crate::cache::{CacheConfig, CacheSim, CacheStats};
use crate::encoding::EncodedPointer;
use crate::error::FaultClass;
use crate::harness::{entropy_for_config, EntropyValue};
use crate::heap::{FrpConfig, ObjectMap};
use crate::rng::RandomSource;

/// One parsed trace operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceOp {
    Alloc {
        label: String,
        size: u64,
    },
    Free {
        label: String,
    },
    Lea {
        dst: String,
        src: String,
        delta: i64,
    },
    Load {
        label: String,
        width: usize,
    },
    Store {
        label: String,
        width: usize,
        value: Vec<u8>,
    },
    RawLoad {
        word: u64,
        width: usize,
    },
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceOp::Alloc { label, size } => write!(f, "alloc {label} {size}"),
            TraceOp::Free { label } => write!(f, "free {label}"),
            TraceOp::Lea { dst, src, delta } => write!(f, "lea {dst} {src} {delta}"),
            TraceOp::Load { label, width } => write!(f, "load {label} {width}"),
            TraceOp::Store {
                label,
                width,
                value,
            } => {
                // Value bytes are little-endian in memory; print the number.
                write!(f, "store {label} {width} 0x")?;
                for b in value.iter().rev() {
                    write!(f, "{b:02x}")?;
                }
                Ok(())
            }
            TraceOp::RawLoad { word, width } => write!(f, "raw_load {word:#018x} {width}"),
        }
    }
}

/// Parse failure with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for TraceError {}

/// Parses a whole trace, validating widths and label discipline.
pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>, TraceError> {
    let mut ops = Vec::new();
    let mut defined: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |message: String| TraceError {
            line: line_no,
            message,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let expect_len = |n: usize| {
            if tok.len() == n {
                Ok(())
            } else {
                Err(err(format!(
                    "{} takes {} arguments, got {}",
                    tok[0],
                    n - 1,
                    tok.len() - 1
                )))
            }
        };
        let need = |label: &str| {
            if defined.contains_key(label) {
                Ok(())
            } else {
                Err(err(format!("label '{label}' used before definition")))
            }
        };
        let op = match tok[0] {
            "alloc" => {
                expect_len(3)?;
                let size = parse_u64(tok[2]).map_err(|m| err(format!("size: {m}")))?;
                TraceOp::Alloc {
                    label: tok[1].to_string(),
                    size,
                }
            }
            "free" => {
                expect_len(2)?;
                need(tok[1])?;
                TraceOp::Free {
                    label: tok[1].to_string(),
                }
            }
            "lea" => {
                expect_len(4)?;
                need(tok[2])?;
                let delta = tok[3]
                    .parse::<i64>()
                    .map_err(|e| err(format!("delta '{}': {e}", tok[3])))?;
                TraceOp::Lea {
                    dst: tok[1].to_string(),
                    src: tok[2].to_string(),
                    delta,
                }
            }
            "load" => {
                expect_len(3)?;
                need(tok[1])?;
                let width = parse_width(tok[2]).map_err(err)?;
                TraceOp::Load {
                    label: tok[1].to_string(),
                    width,
                }
            }
            "store" => {
                expect_len(4)?;
                need(tok[1])?;
                let width = parse_width(tok[2]).map_err(err)?;
                let value = parse_hex_value(tok[3], width).map_err(err)?;
                TraceOp::Store {
                    label: tok[1].to_string(),
                    width,
                    value,
                }
            }
            "raw_load" => {
                expect_len(3)?;
                let word = parse_hex_word(tok[1]).map_err(err)?;
                let width = parse_width(tok[2]).map_err(err)?;
                TraceOp::RawLoad { word, width }
            }
            other => return Err(err(format!("unknown operation '{other}'"))),
        };
        // alloc and lea define their label; duplicates are rejected so a
        // word can never be silently rebound.
        if let TraceOp::Alloc { label, .. } | TraceOp::Lea { dst: label, .. } = &op {
            if let Some(prev) = defined.insert(label.clone(), line_no) {
                return Err(TraceError {
                    line: line_no,
                    message: format!("label '{label}' already defined on line {prev}"),
                });
            }
        }
        ops.push(op);
    }
    Ok(ops)
}

fn parse_u64(s: &str) -> Result<u64, String> {
    s.parse::<u64>().map_err(|e| format!("'{s}': {e}"))
}

fn parse_width(s: &str) -> Result<usize, String> {
    let w = s
        .parse::<usize>()
        .map_err(|e| format!("width '{s}': {e}"))?;
    if ACCESS_WIDTHS.contains(&w) {
        Ok(w)
    } else {
        Err(format!("width {w} not one of {ACCESS_WIDTHS:?}"))
    }
}

fn hex_digits(s: &str) -> Result<&str, String> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| format!("'{s}' is not 0x-prefixed hex"))?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(format!("'{s}' is not 0x-prefixed hex"));
    }
    Ok(digits)
}

fn parse_hex_word(s: &str) -> Result<u64, String> {
    let digits = hex_digits(s)?;
    if digits.len() > 16 {
        return Err(format!("'{s}' does not fit in 64 bits"));
    }
    u64::from_str_radix(digits, 16).map_err(|e| format!("'{s}': {e}"))
}

/// Parses a store value into `width` little-endian memory bytes.
fn parse_hex_value(s: &str, width: usize) -> Result<Vec<u8>, String> {
    let digits = hex_digits(s)?;
    if digits.len() > width * 2 {
        return Err(format!("value '{s}' does not fit in {width} bytes"));
    }
    let padded = format!("{digits:0>w$}", w = width * 2);
    let mut bytes: Vec<u8> = (0..width)
        .map(|i| u8::from_str_radix(&padded[2 * i..2 * i + 2], 16).expect("validated hex"))
        .collect();
    bytes.reverse();
    Ok(bytes)
}

/// Per-class outcome counters over a whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub ops: u64,
    pub ok: u64,
    pub oob_read_zeroed: u64,
    pub unmapped_id: u64,
    pub oob_write: u64,
    pub invalid_free: u64,
    pub large_allocation: u64,
    pub id_exhaustion: u64,
}

impl Totals {
    pub fn faults(&self) -> u64 {
        self.unmapped_id
            + self.oob_write
            + self.invalid_free
            + self.large_allocation
            + self.id_exhaustion
    }

    fn count_fault(&mut self, class: FaultClass) {
        match class {
            FaultClass::UnmappedId => self.unmapped_id += 1,
            FaultClass::OobWrite => self.oob_write += 1,
            FaultClass::InvalidFree => self.invalid_free += 1,
            FaultClass::LargeAllocation => self.large_allocation += 1,
            FaultClass::IdExhaustion => self.id_exhaustion += 1,
        }
    }
}

/// Outcome of one replayed operation, in report form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeReport {
    Ok {
        /// Minted or computed word, for alloc and lea.
        #[serde(skip_serializing_if = "Option::is_none")]
        word: Option<String>,
        /// Loaded bytes in memory order, lowercase hex.
        #[serde(skip_serializing_if = "Option::is_none")]
        data: Option<String>,
    },
    OobReadZeroed {
        data: String,
        /// One character per byte: '1' where the byte was zero-filled.
        zeroed_mask: String,
    },
    Fault {
        class: FaultClass,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpReport {
    pub index: usize,
    pub op: String,
    pub outcome: OutcomeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheReport {
    pub entries: u32,
    pub associativity: u32,
    pub hit_latency: u64,
    pub miss_penalty: u64,
    pub stats: CacheStats,
}

/// Full replay result. Serializes deterministically: no timestamps, no
/// unordered containers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: FrpConfig,
    pub entropy: EntropyValue,
    pub totals: Totals,
    pub ops: Vec<OpReport>,
    pub caches: Vec<CacheReport>,
}

/// Replays `ops` against a fresh heap, one cache simulation per config.
pub fn run_trace(
    ops: &[TraceOp],
    cfg: &FrpConfig,
    caches: &[CacheConfig],
    mut src: RandomSource,
) -> RunReport {
    let mut map = ObjectMap::new(*cfg);
    let mut sims: Vec<CacheSim> = caches.iter().map(|c| CacheSim::new(*c)).collect();
    let mut labels: HashMap<String, u64> = HashMap::new();
    let mut totals = Totals::default();
    let mut op_reports = Vec::with_capacity(ops.len());
    for (index, op) in ops.iter().enumerate() {
        let word_of = |labels: &HashMap<String, u64>, label: &str| {
            *labels.get(label).expect("parser rejects undefined labels")
        };
        let outcome = match op {
            TraceOp::Alloc { label, size } => match map.malloc(&mut src, *size) {
                Ok(p) => {
                    labels.insert(label.clone(), p.word());
                    OutcomeReport::Ok {
                        word: Some(word_hex(p.word())),
                        data: None,
                    }
                }
                Err(class) => {
                    // The label still binds (to null) so later lines parse
                    // the way a C program would behave.
                    labels.insert(label.clone(), 0);
                    OutcomeReport::Fault { class }
                }
            },
            TraceOp::Free { label } => {
                let p = EncodedPointer(word_of(&labels, label));
                match map.free(p) {
                    Ok(()) => {
                        for sim in &mut sims {
                            sim.invalidate(p.id());
                        }
                        OutcomeReport::Ok {
                            word: None,
                            data: None,
                        }
                    }
                    Err(class) => OutcomeReport::Fault { class },
                }
            }
            TraceOp::Lea {
                dst,
                src: from,
                delta,
            } => {
                let word = word_of(&labels, from).wrapping_add(*delta as u64);
                labels.insert(dst.clone(), word);
                OutcomeReport::Ok {
                    word: Some(word_hex(word)),
                    data: None,
                }
            }
            TraceOp::Load { label, width } => {
                let p = EncodedPointer(word_of(&labels, label));
                touch_caches(&map, &mut sims, p);
                access_report(load(&map, p, *width))
            }
            TraceOp::Store {
                label,
                width,
                value,
            } => {
                let p = EncodedPointer(word_of(&labels, label));
                touch_caches(&map, &mut sims, p);
                access_report(store(&mut map, p, *width, value))
            }
            TraceOp::RawLoad { word, width } => {
                let p = EncodedPointer(*word);
                touch_caches(&map, &mut sims, p);
                access_report(load(&map, p, *width))
            }
        };
        totals.ops += 1;
        match &outcome {
            OutcomeReport::Ok { .. } => totals.ok += 1,
            OutcomeReport::OobReadZeroed { .. } => totals.oob_read_zeroed += 1,
            OutcomeReport::Fault { class } => totals.count_fault(*class),
        }
        op_reports.push(OpReport {
            index,
            op: op.to_string(),
            outcome,
        });
    }
    RunReport {
        seed: src.seed(),
        config: *cfg,
        entropy: entropy_for_config(cfg),
        totals,
        ops: op_reports,
        caches: sims
            .iter()
            .map(|sim| {
                let c = sim.config();
                CacheReport {
                    entries: c.entries,
                    associativity: c.associativity,
                    hit_latency: c.hit_latency,
                    miss_penalty: c.miss_penalty,
                    stats: sim.stats(),
                }
            })
            .collect(),
    }
}

/// Every decode of a live id counts as one translation in every cache.
fn touch_caches(map: &ObjectMap, sims: &mut [CacheSim], p: EncodedPointer) {
    if !p.is_encoded() {
        return;
    }
    if let Some(rec) = map.lookup(p.id()) {
        for sim in sims {
            sim.access(p.id(), rec.size);
        }
    }
}

fn access_report(outcome: AccessOutcome) -> OutcomeReport {
    match outcome {
        AccessOutcome::Ok { data } => OutcomeReport::Ok {
            word: None,
            data: if data.is_empty() {
                None
            } else {
                Some(bytes_hex(&data))
            },
        },
        AccessOutcome::OobReadZeroed { data, zeroed_mask } => OutcomeReport::OobReadZeroed {
            data: bytes_hex(&data),
            zeroed_mask: zeroed_mask
                .iter()
                .map(|&z| if z { '1' } else { '0' })
                .collect(),
        },
        AccessOutcome::Fault(class) => OutcomeReport::Fault { class },
    }
}

fn word_hex(word: u64) -> String {
    format!("{word:#018x}")
}

fn bytes_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_caches() -> Vec<CacheConfig> {
        [128u32, 512, 1024, 4096]
            .map(CacheConfig::with_entries)
            .to_vec()
    }

    #[test]
    fn parses_the_basic_forms() {
        let text = "\
# heap roundtrip
alloc a 16
store a 8 0x1122334455667788
load a 8          # trailing comment
lea b a 8
raw_load 0x0000564745119010 4
free a
";
        let ops = parse_trace(text).unwrap();
        assert_eq!(ops.len(), 6);
        assert_eq!(
            ops[0],
            TraceOp::Alloc {
                label: "a".into(),
                size: 16
            }
        );
        assert_eq!(
            ops[1],
            TraceOp::Store {
                label: "a".into(),
                width: 8,
                value: vec![0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11],
            }
        );
        assert_eq!(
            ops[3],
            TraceOp::Lea {
                dst: "b".into(),
                src: "a".into(),
                delta: 8
            }
        );
        assert_eq!(
            ops[4],
            TraceOp::RawLoad {
                word: 0x0000_5647_4511_9010,
                width: 4
            }
        );
    }

    #[test]
    fn short_store_values_zero_extend() {
        let ops = parse_trace("alloc a 8\nstore a 4 0x41\n").unwrap();
        assert_eq!(
            ops[1],
            TraceOp::Store {
                label: "a".into(),
                width: 4,
                value: vec![0x41, 0, 0, 0]
            }
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_trace("load a 8\n").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.message.contains("before definition"), "{}", err.message);

        let err = parse_trace("alloc a 8\n\nalloc a 16\n").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(
            err.message.contains("already defined on line 1"),
            "{}",
            err.message
        );

        let err = parse_trace("alloc a 8\nload a 3\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("width"), "{}", err.message);

        let err = parse_trace("alloc a 8\nstore a 2 0x12345\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("does not fit"), "{}", err.message);

        let err = parse_trace("jump a\n").unwrap_err();
        assert!(err.message.contains("unknown operation"), "{}", err.message);

        let err = parse_trace("alloc a\n").unwrap_err();
        assert!(err.message.contains("takes 2 arguments"), "{}", err.message);
    }

    #[test]
    fn roundtrip_trace_replays_clean() {
        let text = "\
alloc a 16
store a 8 0xdeadbeefcafef00d
load a 8
lea b a 8
store b 4 0x41424344
load b 4
free a
";
        let ops = parse_trace(text).unwrap();
        let report = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(1),
        );
        assert_eq!(report.totals.ops, 7);
        assert_eq!(report.totals.ok, 7);
        assert_eq!(report.totals.faults(), 0);
        assert_eq!(
            report.ops[2].outcome,
            OutcomeReport::Ok {
                word: None,
                data: Some("0df0fecaefbeadde".into())
            }
        );
        assert_eq!(
            report.ops[5].outcome,
            OutcomeReport::Ok {
                word: None,
                data: Some("44434241".into())
            }
        );
        // One object, five decodes, compulsory miss only.
        for cache in &report.caches {
            assert_eq!(cache.stats.misses, 1);
            assert_eq!(cache.stats.hits, 3);
            assert_eq!(cache.stats.unique_objects, 1);
            assert_eq!(cache.stats.mean_object_bytes, 16.0);
        }
    }

    #[test]
    fn out_of_bounds_and_stale_accesses_are_recorded() {
        let text = "\
alloc a 10
store a 8 0x0807060504030201
lea b a 6
load b 8
store b 8 0xffffffffffffffff
free a
load a 8
alloc c 10
load c 8
";
        let ops = parse_trace(text).unwrap();
        let report = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(2),
        );
        // load b 8 straddles the end: four real bytes (two of them never
        // written, so zero without being zero-filled) then four zeroed.
        assert_eq!(
            report.ops[3].outcome,
            OutcomeReport::OobReadZeroed {
                data: "0708000000000000".into(),
                zeroed_mask: "00001111".into(),
            }
        );
        // store b 8 must abort.
        assert_eq!(
            report.ops[4].outcome,
            OutcomeReport::Fault {
                class: FaultClass::OobWrite
            }
        );
        // Stale load faults.
        assert_eq!(
            report.ops[6].outcome,
            OutcomeReport::Fault {
                class: FaultClass::UnmappedId
            }
        );
        // The realloc reuses the freed bytes, so c sees a's final contents.
        let OutcomeReport::Ok {
            data: Some(data), ..
        } = &report.ops[8].outcome
        else {
            panic!("expected clean load, got {:?}", report.ops[8].outcome);
        };
        assert_eq!(data, "0102030405060708");
        assert_eq!(report.totals.oob_read_zeroed, 1);
        assert_eq!(report.totals.oob_write, 1);
        assert_eq!(report.totals.unmapped_id, 1);
        assert_eq!(report.totals.ok, 6);
        assert_eq!(report.totals.ops, 9);
    }

    #[test]
    fn wild_lea_faults_on_use() {
        // A delta beyond the offset window corrupts the id field.
        let text = "alloc a 8\nlea b a 16777216\nload b 8\n";
        let ops = parse_trace(text).unwrap();
        let report = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(3),
        );
        assert_eq!(
            report.ops[2].outcome,
            OutcomeReport::Fault {
                class: FaultClass::UnmappedId
            }
        );
    }

    #[test]
    fn frees_invalidate_every_cache() {
        let text = "alloc a 8\nload a 8\nload a 8\nfree a\n";
        let ops = parse_trace(text).unwrap();
        let report = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(4),
        );
        for cache in &report.caches {
            assert_eq!(cache.stats.invalidations, 1);
            assert_eq!(cache.stats.hits, 1);
            assert_eq!(cache.stats.misses, 1);
        }
    }

    #[test]
    fn failed_allocations_bind_null() {
        let text = "alloc a 16773121\nfree a\n";
        let ops = parse_trace(text).unwrap();
        let report = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(5),
        );
        assert_eq!(
            report.ops[0].outcome,
            OutcomeReport::Fault {
                class: FaultClass::LargeAllocation
            }
        );
        assert_eq!(
            report.ops[1].outcome,
            OutcomeReport::Fault {
                class: FaultClass::InvalidFree
            }
        );
    }

    #[test]
    fn totals_reconcile() {
        let text = "\
alloc a 8
load a 8
lea b a 4
load b 8
free a
free b
raw_load 0xffff000000000000 8
";
        let ops = parse_trace(text).unwrap();
        let report = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(6),
        );
        let t = report.totals;
        assert_eq!(t.ops, t.ok + t.oob_read_zeroed + t.faults());
        assert_eq!(t.ops, 7);
    }

    #[test]
    fn identical_runs_serialize_identically() {
        let text = "alloc a 64\nstore a 8 0x1234\nload a 8\nlea b a 32\nload b 8\nfree a\n";
        let ops = parse_trace(text).unwrap();
        let one = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(7),
        );
        let two = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(7),
        );
        assert_eq!(
            serde_json::to_string(&one).unwrap(),
            serde_json::to_string(&two).unwrap()
        );
        let other = run_trace(
            &ops,
            &FrpConfig::default(),
            &default_caches(),
            RandomSource::seeded(8),
        );
        assert_ne!(
            one.ops[0].outcome, other.ops[0].outcome,
            "different seed, same words"
        );
    }
}
