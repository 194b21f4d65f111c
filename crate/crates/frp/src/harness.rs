//! Attack harness: entropy accounting and probabilistic bypass experiments.
//!
//! Three probe loops mirror the classic heap attack shapes. Overflow and
//! underflow step a pointer away from a victim object one unit at a time;
//! use-after-free replays a stale pointer while reallocating over the freed
//! bytes. At full strength none of them should ever touch another object's
//! data within any practical attempt budget; scaled-down configurations
//! shrink the randomized bit count `b` until bypasses become observable, at
//! which point their statistics are checkable: sequential stepping succeeds
//! in at most 2^b attempts with mean 2^(b-1), and blind guessing succeeds
//! per attempt with probability (spray count) / 2^b.
//!
//! A success ("bypass") means the probe actually read another live object's
//! bytes. Reads that fault or return only zeroed out-of-bounds filler are
//! detections, not bypasses.
//!
//! Trials are independent given the master seed: trial i derives its own
//! stream, so parallel and sequential drivers return identical reports.

use std::collections::HashSet;

use serde::Serialize;

use crate::access::{load, store, AccessOutcome};
use crate::encoding::{flatten, unflatten, EncodedPointer, IdOffset, ID_BITS};
use crate::error::FaultClass;
use crate::heap::{FrpConfig, ObjectMap};
use crate::rng::RandomSource;

/// Byte every victim object is filled with.
const VICTIM_FILL: u8 = 0x56;
/// Byte every hidden target object is filled with; seeing it proves a leak.
const TARGET_FILL: u8 = 0xc3;
/// Probes read one 64-bit word, like the classic exploit loops.
const ATTACK_WIDTH: usize = 8;

/// Number of attacker-indistinguishable encodings for a bit budget, with its
/// base-2 logarithm for readability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyValue {
    pub exact: u128,
    pub log2: f64,
}

/// How to count the id field's contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Full width when all 40 id bits are random, scaled otherwise.
    Auto,
    /// Count every 40-bit id except zero and the 2^(id_bits-16) values whose
    /// words would collide with plain addresses.
    FullWidth,
    /// Plain power of two over the randomized bits.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyError {
    /// A bit count outside its field: id > 40, offset > 12, page not 0 or 8,
    /// align not 0 or 4.
    BitsOutOfRange { what: &'static str, got: u32 },
    /// The full-width correction subtracts 2^(id_bits - 16); below 16 id
    /// bits it is undefined.
    CorrectionUndefined { id_bits: u32 },
}

impl std::fmt::Display for EntropyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntropyError::BitsOutOfRange { what, got } => {
                write!(f, "{what} bit count out of range: {got}")
            }
            EntropyError::CorrectionUndefined { id_bits } => {
                write!(
                    f,
                    "full-width entropy needs at least 16 id bits, got {id_bits}"
                )
            }
        }
    }
}

impl std::error::Error for EntropyError {}

/// Counts the encodings an attacker cannot tell apart.
///
/// At full width the id field contributes `2^id_bits - 1 - 2^(id_bits - 16)`
/// values: zero never names an object and one id in 2^16 would leave the
/// word's top bits clear. Offset, page, and alignment bits multiply in as
/// plain powers of two. Scaled mode drops the correction, since scaled ids
/// ride on a fixed fill pattern that already avoids the reserved values.
pub fn entropy(
    id_bits: u32,
    offset_bits: u32,
    page_bits: u32,
    align_bits: u32,
    mode: EntropyMode,
) -> Result<EntropyValue, EntropyError> {
    if id_bits > ID_BITS {
        return Err(EntropyError::BitsOutOfRange {
            what: "id",
            got: id_bits,
        });
    }
    if offset_bits > 12 {
        return Err(EntropyError::BitsOutOfRange {
            what: "offset",
            got: offset_bits,
        });
    }
    if page_bits != 0 && page_bits != 8 {
        return Err(EntropyError::BitsOutOfRange {
            what: "page",
            got: page_bits,
        });
    }
    if align_bits != 0 && align_bits != 4 {
        return Err(EntropyError::BitsOutOfRange {
            what: "align",
            got: align_bits,
        });
    }
    let full_width = match mode {
        EntropyMode::FullWidth => true,
        EntropyMode::Scaled => false,
        EntropyMode::Auto => id_bits == ID_BITS,
    };
    let shift = offset_bits + page_bits + align_bits;
    let exact = if full_width {
        if id_bits < 16 {
            return Err(EntropyError::CorrectionUndefined { id_bits });
        }
        ((1u128 << id_bits) - 1 - (1u128 << (id_bits - 16))) << shift
    } else {
        1u128 << (id_bits + shift)
    };
    Ok(EntropyValue {
        exact,
        log2: (exact as f64).log2(),
    })
}

/// Entropy of a heap configuration under automatic mode selection.
pub fn entropy_for_config(cfg: &FrpConfig) -> EntropyValue {
    entropy(
        cfg.id_random_bits,
        cfg.offset_random_bits,
        if cfg.page_random { 8 } else { 0 },
        if cfg.align_random { 4 } else { 0 },
        EntropyMode::Auto,
    )
    .expect("valid config has valid bit counts")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Overflow,
    Underflow,
    UseAfterFree,
}

/// One probe experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Probes per trial before giving up.
    pub max_attempts: u64,
    pub victim_size: u64,
    pub target_size: u64,
    /// Hidden target objects sprayed per trial (use-after-free trials also
    /// allocate one fresh target per probe).
    pub spray_count: u32,
    pub trials: u32,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> AttackSpec {
        AttackSpec {
            kind,
            max_attempts: 10_000,
            victim_size: 8,
            target_size: 8,
            spray_count: 1,
            trials: 1,
        }
    }
}

/// Where every probe landed, summed over trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AttemptTally {
    /// Bypasses: probes that read another live object's bytes.
    pub target_hits: u64,
    /// In-bounds reads that stayed inside the victim itself (or a plain
    /// window); legal accesses, not bypasses.
    pub victim_reads: u64,
    /// Out-of-bounds reads fully contained by zero filling.
    pub oob_read_zeroed: u64,
    /// Probes whose id named no live object.
    pub unmapped_id: u64,
}

impl AttemptTally {
    pub fn total(&self) -> u64 {
        self.target_hits + self.victim_reads + self.oob_read_zeroed + self.unmapped_id
    }

    fn add(&mut self, other: &AttemptTally) {
        self.target_hits += other.target_hits;
        self.victim_reads += other.victim_reads;
        self.oob_read_zeroed += other.oob_read_zeroed;
        self.unmapped_id += other.unmapped_id;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub spec: AttackSpec,
    pub seed: u64,
    /// Trials that achieved at least one bypass.
    pub successes: u64,
    /// First bypass attempt number for each successful trial.
    pub attempts_per_success: Vec<u64>,
    /// Mean of `attempts_per_success`; 0 when there were no successes.
    pub mean_attempts: f64,
    /// Half-width of the 95% confidence interval on that mean.
    pub margin_95: f64,
    pub total_attempts: u64,
    pub tally: AttemptTally,
}

struct TrialOutput {
    first_success: Option<u64>,
    attempts_made: u64,
    tally: AttemptTally,
}

/// Runs the probe trials, in parallel when the `parallel` feature is on.
/// Results are identical to [`run_attack_seq`] either way.
pub fn run_attack(spec: &AttackSpec, cfg: &FrpConfig, src: &RandomSource) -> AttackReport {
    #[cfg(feature = "parallel")]
    return {
        use rayon::prelude::*;
        let outs: Vec<TrialOutput> = (0..spec.trials as u64)
            .into_par_iter()
            .map(|i| attack_trial(spec, cfg, src.derive(i)))
            .collect();
        aggregate_attack(spec, src.seed(), outs)
    };
    #[cfg(not(feature = "parallel"))]
    run_attack_seq(spec, cfg, src)
}

/// Single-threaded driver, always available.
pub fn run_attack_seq(spec: &AttackSpec, cfg: &FrpConfig, src: &RandomSource) -> AttackReport {
    let outs: Vec<TrialOutput> = (0..spec.trials as u64)
        .map(|i| attack_trial(spec, cfg, src.derive(i)))
        .collect();
    aggregate_attack(spec, src.seed(), outs)
}

/// One blind-guessing experiment: per trial, spray targets and draw up to
/// `guesses_per_trial` uniform patterns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct McSpec {
    pub guesses_per_trial: u64,
    pub trials: u64,
    pub spray_count: u32,
    pub target_size: u64,
}

impl Default for McSpec {
    fn default() -> McSpec {
        McSpec {
            guesses_per_trial: 1,
            trials: 100_000,
            spray_count: 1,
            target_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub spec: McSpec,
    pub seed: u64,
    /// Trials where some guess hit a target.
    pub successes: u64,
    /// Per-trial success frequency.
    pub p_hat: f64,
    /// 95% Wilson score interval for the success probability.
    pub ci95_low: f64,
    pub ci95_high: f64,
    /// Mean first-hit guess number over successful trials; 0 without any.
    pub mean_attempts: f64,
    /// Half-width of the 95% confidence interval on that mean.
    pub margin_95: f64,
}

/// Runs the guessing trials, in parallel when the `parallel` feature is on.
pub fn monte_carlo_bypass(spec: &McSpec, cfg: &FrpConfig, src: &RandomSource) -> McReport {
    #[cfg(feature = "parallel")]
    return {
        use rayon::prelude::*;
        let outs: Vec<Option<u64>> = (0..spec.trials)
            .into_par_iter()
            .map(|i| mc_trial(spec, cfg, src.derive(i)))
            .collect();
        aggregate_mc(spec, src.seed(), outs)
    };
    #[cfg(not(feature = "parallel"))]
    monte_carlo_bypass_seq(spec, cfg, src)
}

/// Single-threaded driver, always available.
pub fn monte_carlo_bypass_seq(spec: &McSpec, cfg: &FrpConfig, src: &RandomSource) -> McReport {
    let outs: Vec<Option<u64>> = (0..spec.trials)
        .map(|i| mc_trial(spec, cfg, src.derive(i)))
        .collect();
    aggregate_mc(spec, src.seed(), outs)
}

fn attack_trial(spec: &AttackSpec, cfg: &FrpConfig, mut rng: RandomSource) -> TrialOutput {
    let mut map = ObjectMap::new(*cfg);
    let victim = map
        .malloc(&mut rng, spec.victim_size)
        .expect("victim allocation");
    fill_bytes(&mut map, victim, spec.victim_size, VICTIM_FILL);
    // Low offset bits of every block here; attackers get them for free from
    // allocator layout.
    let known_low12 = map.lookup(victim.id()).expect("victim is live").arena_base & 0xfff;
    let mut target_ids = HashSet::new();
    spray_targets(
        &mut map,
        &mut rng,
        spec.spray_count,
        spec.target_size,
        &mut target_ids,
    );
    if spec.kind == AttackKind::UseAfterFree {
        map.free(victim).expect("victim is live");
    }
    let b = cfg.randomized_bits();
    let space_mask = if b >= 64 { u64::MAX } else { (1u64 << b) - 1 };
    let v_pat = pattern_bits(cfg, victim);
    let mut tally = AttemptTally::default();
    let mut first_success = None;
    let mut attempts_made = 0;
    for attempt in 1..=spec.max_attempts {
        attempts_made = attempt;
        let candidate = match spec.kind {
            // At full width the probe is literal pointer arithmetic.
            AttackKind::Overflow if !cfg.is_scaled() => victim.wrapping_add(attempt as i64),
            AttackKind::Underflow if !cfg.is_scaled() => victim.wrapping_add(-(attempt as i64)),
            // Scaled configurations step through the randomized pattern
            // space instead, so "every distance up to 2^b" stays meaningful.
            AttackKind::Overflow => EncodedPointer(compose_word(
                cfg,
                v_pat.wrapping_add(attempt) & space_mask,
                known_low12,
            )),
            AttackKind::Underflow => EncodedPointer(compose_word(
                cfg,
                v_pat.wrapping_sub(attempt) & space_mask,
                known_low12,
            )),
            // Stale pointer replay over fresh allocations. A failed
            // allocation (id exhaustion at tiny widths) just means this
            // probe fires without a new target.
            AttackKind::UseAfterFree => {
                if let Ok(t) = map.malloc(&mut rng, spec.target_size) {
                    fill_bytes(&mut map, t, spec.target_size, TARGET_FILL);
                    target_ids.insert(t.id());
                }
                victim
            }
        };
        let outcome = load(&map, candidate, ATTACK_WIDTH);
        let hit = is_target_hit(&target_ids, candidate, &outcome);
        match &outcome {
            AccessOutcome::Fault(FaultClass::UnmappedId) => tally.unmapped_id += 1,
            AccessOutcome::Fault(c) => unreachable!("load cannot fault with {c}"),
            AccessOutcome::Ok { .. } if !hit => tally.victim_reads += 1,
            AccessOutcome::OobReadZeroed { .. } if !hit => tally.oob_read_zeroed += 1,
            _ => tally.target_hits += 1,
        }
        if hit {
            first_success = Some(attempt);
            break;
        }
    }
    TrialOutput {
        first_success,
        attempts_made,
        tally,
    }
}

fn mc_trial(spec: &McSpec, cfg: &FrpConfig, mut rng: RandomSource) -> Option<u64> {
    let mut map = ObjectMap::new(*cfg);
    let mut target_ids = HashSet::new();
    let targets = spray_targets(
        &mut map,
        &mut rng,
        spec.spray_count,
        spec.target_size,
        &mut target_ids,
    );
    let known_low12 = targets
        .first()
        .map(|t| map.lookup(t.id()).expect("target is live").arena_base & 0xfff)
        .unwrap_or(0);
    let b = cfg.randomized_bits();
    for guess in 1..=spec.guesses_per_trial {
        let pat = if b == 0 { 0 } else { rng.next_bits(b) };
        let candidate = EncodedPointer(compose_word(cfg, pat, known_low12));
        let outcome = load(&map, candidate, ATTACK_WIDTH);
        if is_target_hit(&target_ids, candidate, &outcome) {
            return Some(guess);
        }
    }
    None
}

/// A probe bypasses the defense only when it reads at least one real byte
/// out of a hidden target object.
fn is_target_hit(
    target_ids: &HashSet<u64>,
    candidate: EncodedPointer,
    outcome: &AccessOutcome,
) -> bool {
    if !target_ids.contains(&candidate.id()) {
        return false;
    }
    match outcome {
        AccessOutcome::Ok { data } => {
            debug_assert!(
                data.iter().all(|&b| b == TARGET_FILL),
                "leak of non-sentinel bytes"
            );
            true
        }
        AccessOutcome::OobReadZeroed { data, zeroed_mask } => {
            let leaked = zeroed_mask.iter().any(|z| !z);
            debug_assert!(
                data.iter()
                    .zip(zeroed_mask)
                    .all(|(&b, &z)| z || b == TARGET_FILL),
                "leak of non-sentinel bytes"
            );
            leaked
        }
        AccessOutcome::Fault(_) => false,
    }
}

/// Allocates `count` sentinel-filled targets, each at the same in-page
/// position (bump cursor padded to a page boundary first).
fn spray_targets(
    map: &mut ObjectMap,
    rng: &mut RandomSource,
    count: u32,
    size: u64,
    ids: &mut HashSet<u64>,
) -> Vec<EncodedPointer> {
    let mut targets = Vec::with_capacity(count as usize);
    for _ in 0..count {
        pad_to_page(map);
        let t = map.malloc(rng, size).expect("target allocation");
        fill_bytes(map, t, size, TARGET_FILL);
        ids.insert(t.id());
        targets.push(t);
    }
    targets
}

fn pad_to_page(map: &mut ObjectMap) {
    let cursor = map.reserve_arena(0);
    let pad = (4096 - (cursor & 0xfff)) & 0xfff;
    if pad > 0 {
        map.reserve_arena(pad);
    }
}

fn fill_bytes(map: &mut ObjectMap, p: EncodedPointer, size: u64, byte: u8) {
    for i in 0..size {
        let out = store(map, p.wrapping_add(i as i64), 1, &[byte]);
        debug_assert!(!out.is_fault());
    }
}

/// Packs a pointer's randomized fields into one integer, id bits highest,
/// then high offset bits, then page and alignment bits when randomized.
fn pattern_bits(cfg: &FrpConfig, p: EncodedPointer) -> u64 {
    let IdOffset { id, offset } = unflatten(p);
    let mut pat = id & mask(cfg.id_random_bits);
    pat = (pat << cfg.offset_random_bits) | ((offset as u64 >> 12) & mask(cfg.offset_random_bits));
    if cfg.page_random {
        pat = (pat << 8) | ((offset as u64 >> 4) & 0xff);
    }
    if cfg.align_random {
        pat = (pat << 4) | (offset as u64 & 0xf);
    }
    pat
}

/// Inverse of [`pattern_bits`]: rebuilds a candidate word from a pattern,
/// taking non-randomized fields from the fixed id fill and `known_low12`.
fn compose_word(cfg: &FrpConfig, pattern: u64, known_low12: u64) -> u64 {
    let mut pat = pattern;
    let align = if cfg.align_random {
        let a = pat & 0xf;
        pat >>= 4;
        a
    } else {
        known_low12 & 0xf
    };
    let page = if cfg.page_random {
        let g = pat & 0xff;
        pat >>= 8;
        g
    } else {
        (known_low12 >> 4) & 0xff
    };
    let off_hi = pat & mask(cfg.offset_random_bits);
    pat >>= cfg.offset_random_bits;
    let id = cfg.fixed_id_bits() | (pat & mask(cfg.id_random_bits));
    flatten(IdOffset {
        id,
        offset: ((off_hi << 12) | (page << 4) | align) as u32,
    })
    .word()
}

fn mask(bits: u32) -> u64 {
    match bits {
        0 => 0,
        64.. => u64::MAX,
        _ => (1u64 << bits) - 1,
    }
}

fn aggregate_attack(spec: &AttackSpec, seed: u64, outs: Vec<TrialOutput>) -> AttackReport {
    let mut tally = AttemptTally::default();
    let mut attempts = Vec::new();
    let mut total_attempts = 0;
    for out in &outs {
        tally.add(&out.tally);
        total_attempts += out.attempts_made;
        if let Some(at) = out.first_success {
            attempts.push(at);
        }
    }
    let (mean, margin) = mean_and_margin95(&attempts);
    AttackReport {
        spec: *spec,
        seed,
        successes: attempts.len() as u64,
        attempts_per_success: attempts,
        mean_attempts: mean,
        margin_95: margin,
        total_attempts,
        tally,
    }
}

fn aggregate_mc(spec: &McSpec, seed: u64, outs: Vec<Option<u64>>) -> McReport {
    let attempts: Vec<u64> = outs.iter().flatten().copied().collect();
    let successes = attempts.len() as u64;
    let (p_hat, ci95_low, ci95_high) = wilson95(successes, spec.trials);
    let (mean, margin) = mean_and_margin95(&attempts);
    McReport {
        spec: *spec,
        seed,
        successes,
        p_hat,
        ci95_low,
        ci95_high,
        mean_attempts: mean,
        margin_95: margin,
    }
}

/// Sample mean and 95% normal-theory half-width; (0, 0) when degenerate.
fn mean_and_margin95(xs: &[u64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<u64>() as f64 / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Wilson score interval at 95%; well behaved near zero frequencies.
fn wilson95(successes: u64, trials: u64) -> (f64, f64, f64) {
    if trials == 0 {
        return (0.0, 0.0, 0.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = 1.96f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (p, (center - half).max(0.0), (center + half).min(1.0))
}
