//! Simulated heap: id assignment, offset randomization, object map.
//!
//! Object storage lives in a flat byte arena indexed by simulated addresses.
//! Addresses below [`HEAP_BASE`] form a scratch window that plain (unencoded)
//! pointers wrap into, so plain accesses never fault. Heap blocks are carved
//! above it by a bump allocator with exact-size reuse of freed blocks; an
//! alloc-free-alloc cycle of one size therefore lands on the same bytes,
//! which is the interesting case for use-after-free experiments.
//!
//! Each live object is an [`ObjectRecord`] keyed by id. The record's `zero`
//! is the offset field value that decodes to `arena_base`; the high 12 bits
//! of `zero` are drawn uniformly from the values that keep the whole object
//! inside the 16 MiB offset window, and the low 12 bits copy the block base
//! so decoded and encoded pointers agree on page position and alignment
//! (unless configured to randomize those too).

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::encoding::{flatten, EncodedPointer, IdOffset, ID_BITS, OFFSET_BITS, OFFSET_CAPACITY};
use crate::error::{ConfigError, FaultClass};
use crate::rng::RandomSource;

/// First heap address. Decoded addresses are `arena_base + offset - zero`
/// with `offset, zero < 2^24`, so starting the heap at 2^24 keeps them from
/// underflowing zero.
pub const HEAP_BASE: u64 = OFFSET_CAPACITY;
/// Scratch window for plain pointers, power of two. Plain accesses index
/// into it modulo its size.
pub const SCRATCH_BYTES: u64 = 1 << 20;
/// Hard cap on one allocation: one page below the offset window, so a legal
/// `zero` exists for every in-range size and page alignment.
pub const MAX_ALLOC_BYTES: u64 = OFFSET_CAPACITY - 4096;

/// Random draws per id before falling back to exact bookkeeping.
const ID_RETRIES: u32 = 128;
/// High id bits used when fewer than 40 id bits are randomized. The top
/// nibble keeps bit 39 set, so scaled-down words still read as encoded.
const ID_FILL: u64 = 0x00a5_a5a5_a5a5;

/// Knobs for the randomized encoding. Defaults give the full-strength
/// scheme; the scaled fields exist so experiments can shrink the search
/// space enough to observe bypasses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrpConfig {
    /// Randomized low id bits, 0..=40. Below 40, the remaining high bits
    /// come from a fixed pattern so the word still looks encoded.
    pub id_random_bits: u32,
    /// Randomized high offset bits (offset bits 12..=23), 0..=12.
    pub offset_random_bits: u32,
    /// Randomize offset bits 4..=11 instead of copying the block base.
    pub page_random: bool,
    /// Randomize offset bits 0..=3 instead of copying the block base.
    pub align_random: bool,
    /// Remember every id ever issued and never reissue one.
    pub track_all_ids: bool,
    /// Arena block alignment in bytes.
    pub alignment: u64,
}

impl Default for FrpConfig {
    fn default() -> FrpConfig {
        FrpConfig {
            id_random_bits: ID_BITS,
            offset_random_bits: 12,
            page_random: false,
            align_random: false,
            track_all_ids: true,
            alignment: 16,
        }
    }
}

impl FrpConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.id_random_bits > ID_BITS {
            return Err(ConfigError::IdBits(self.id_random_bits));
        }
        if self.offset_random_bits > 12 {
            return Err(ConfigError::OffsetBits(self.offset_random_bits));
        }
        if !(1..=16).contains(&self.alignment) || !self.alignment.is_power_of_two() {
            return Err(ConfigError::Alignment(self.alignment));
        }
        Ok(())
    }

    pub fn is_scaled(&self) -> bool {
        self.id_random_bits < ID_BITS
    }

    /// Fixed id bits above the randomized field. Zero at full width.
    pub fn fixed_id_bits(&self) -> u64 {
        if self.id_random_bits == ID_BITS {
            0
        } else {
            (ID_FILL >> self.id_random_bits) << self.id_random_bits
        }
    }

    /// Total bits an attacker must guess to reproduce a live encoding.
    pub fn randomized_bits(&self) -> u32 {
        self.id_random_bits
            + self.offset_random_bits
            + if self.page_random { 8 } else { 0 }
            + if self.align_random { 4 } else { 0 }
    }
}

/// Live object metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectRecord {
    /// First arena address of the block.
    pub arena_base: u64,
    /// Object size in bytes.
    pub size: u64,
    /// Offset field value that decodes to `arena_base`. Invariant:
    /// `zero + size <= 2^24`.
    pub zero: u32,
    /// The pointer handed out by malloc, kept to police frees.
    pub encoded_base: EncodedPointer,
}

/// The object map plus the arena it indexes into.
pub struct ObjectMap {
    cfg: FrpConfig,
    live: HashMap<u64, ObjectRecord>,
    /// Every id ever issued; maintained only when `track_all_ids`.
    issued: HashSet<u64>,
    arena: Arena,
}

impl ObjectMap {
    /// Panics on an invalid config; validate first when the config comes
    /// from user input.
    pub fn new(cfg: FrpConfig) -> ObjectMap {
        if let Err(e) = cfg.validate() {
            panic!("invalid config: {e}");
        }
        ObjectMap {
            cfg,
            live: HashMap::new(),
            issued: HashSet::new(),
            arena: Arena::new(),
        }
    }

    pub fn config(&self) -> &FrpConfig {
        &self.cfg
    }

    pub fn lookup(&self, id: u64) -> Option<&ObjectRecord> {
        self.live.get(&id)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// Ids issued so far; meaningful only when `track_all_ids` is on.
    pub fn issued_count(&self) -> usize {
        self.issued.len()
    }

    /// Draws an unused id. Ids never collide with a live object, and with
    /// `track_all_ids` never repeat at all. At full width, ids whose top 16
    /// bits would leave the word looking like a plain address are rejected.
    pub fn assign_id(&mut self, rng: &mut RandomSource) -> Result<u64, FaultClass> {
        let idb = self.cfg.id_random_bits;
        let fixed = self.cfg.fixed_id_bits();
        for _ in 0..ID_RETRIES {
            let id = fixed | if idb == 0 { 0 } else { rng.next_bits(idb) };
            if idb == ID_BITS && (id >> OFFSET_BITS) == 0 {
                continue;
            }
            if !self.id_taken(id) {
                self.note_issued(id);
                return Ok(id);
            }
        }
        // Repeated collisions mean the space is nearly full. Settle it
        // exactly: count occupancy, then scan from a random start. The scan
        // is only reachable for small id_random_bits, where it is cheap.
        if self.occupied_ids() >= self.usable_id_space() {
            return Err(FaultClass::IdExhaustion);
        }
        let span = 1u64 << idb;
        let start = if idb == 0 { 0 } else { rng.next_bits(idb) };
        for step in 0..span {
            let id = fixed | (start.wrapping_add(step) & (span - 1));
            if idb == ID_BITS && (id >> OFFSET_BITS) == 0 {
                continue;
            }
            if !self.id_taken(id) {
                self.note_issued(id);
                return Ok(id);
            }
        }
        Err(FaultClass::IdExhaustion)
    }

    /// Allocates `size` bytes and returns the encoded base pointer.
    pub fn malloc(
        &mut self,
        rng: &mut RandomSource,
        size: u64,
    ) -> Result<EncodedPointer, FaultClass> {
        if size > MAX_ALLOC_BYTES {
            return Err(FaultClass::LargeAllocation);
        }
        let id = self.assign_id(rng)?;
        let arena_base = self.arena.acquire(size, self.cfg.alignment);
        let zero = draw_zero(&self.cfg, rng, arena_base, size);
        let encoded_base = flatten(IdOffset { id, offset: zero });
        self.live.insert(
            id,
            ObjectRecord {
                arena_base,
                size,
                zero,
                encoded_base,
            },
        );
        Ok(encoded_base)
    }

    /// Frees a live object. Only the exact encoded base is accepted; stale,
    /// forged, interior, and plain words are all rejected with `InvalidFree`.
    pub fn free(&mut self, p: EncodedPointer) -> Result<(), FaultClass> {
        let id = p.id();
        match self.live.get(&id) {
            Some(rec) if rec.encoded_base == p => {
                let rec = self.live.remove(&id).expect("checked above");
                self.arena.release(rec.arena_base, rec.size);
                Ok(())
            }
            _ => Err(FaultClass::InvalidFree),
        }
    }

    /// Advances the bump cursor without minting an object, returning the
    /// skipped region's base. Lets callers control block placement, e.g. to
    /// put every target of an experiment at the same page offset.
    pub fn reserve_arena(&mut self, bytes: u64) -> u64 {
        self.arena.reserve_raw(bytes)
    }

    pub(crate) fn scratch_read(&self, addr: u64, buf: &mut [u8]) {
        self.arena.scratch_read(addr, buf)
    }

    pub(crate) fn scratch_write(&mut self, addr: u64, data: &[u8]) {
        self.arena.scratch_write(addr, data)
    }

    /// Reads heap bytes; the range must sit inside a live record.
    pub(crate) fn heap_read(&self, addr: u64, buf: &mut [u8]) {
        self.arena.heap_read(addr, buf)
    }

    pub(crate) fn heap_byte(&self, addr: u64) -> u8 {
        self.arena.heap_byte(addr)
    }

    pub(crate) fn heap_write(&mut self, addr: u64, data: &[u8]) {
        self.arena.heap_write(addr, data)
    }

    fn id_taken(&self, id: u64) -> bool {
        self.live.contains_key(&id) || (self.cfg.track_all_ids && self.issued.contains(&id))
    }

    fn note_issued(&mut self, id: u64) {
        if self.cfg.track_all_ids {
            self.issued.insert(id);
        }
    }

    fn occupied_ids(&self) -> u64 {
        if self.cfg.track_all_ids {
            self.issued.len() as u64
        } else {
            self.live.len() as u64
        }
    }

    fn usable_id_space(&self) -> u64 {
        if self.cfg.id_random_bits == ID_BITS {
            // Ids that zero the word's top 16 bits are reserved.
            (1u64 << ID_BITS) - (1u64 << OFFSET_BITS)
        } else {
            1u64 << self.cfg.id_random_bits
        }
    }
}

/// Picks the offset field value that will decode to `arena_base`.
fn draw_zero(cfg: &FrpConfig, rng: &mut RandomSource, arena_base: u64, size: u64) -> u32 {
    // Low 12 bits copy the block base unless configured to randomize.
    let align = if cfg.align_random {
        rng.next_bits(4)
    } else {
        arena_base & 0xf
    };
    let page = if cfg.page_random {
        rng.next_bits(8)
    } else {
        (arena_base >> 4) & 0xff
    };
    let low12 = (page << 4) | align;
    // High 12 bits: uniform over the values that keep zero + size inside the
    // offset window, clipped to the configured random width.
    let legal_max = (OFFSET_CAPACITY - size - low12) >> 12;
    let field_max = (1u64 << cfg.offset_random_bits) - 1;
    let r = rng.next_below(legal_max.min(field_max) + 1);
    let zero = (r << 12) | low12;
    debug_assert!(zero + size <= OFFSET_CAPACITY);
    zero as u32
}

/// Flat byte storage behind the object map.
struct Arena {
    /// Plain-pointer window; accesses wrap modulo `SCRATCH_BYTES`.
    scratch: Vec<u8>,
    /// Heap bytes; index = addr - HEAP_BASE. Freed bytes are retained.
    heap: Vec<u8>,
    /// Next fresh heap address.
    cursor: u64,
    /// Freed blocks by exact size, reused LIFO.
    free: HashMap<u64, Vec<u64>>,
}

impl Arena {
    fn new() -> Arena {
        Arena {
            scratch: vec![0; SCRATCH_BYTES as usize],
            heap: Vec::new(),
            cursor: HEAP_BASE,
            free: HashMap::new(),
        }
    }

    fn acquire(&mut self, size: u64, alignment: u64) -> u64 {
        if let Some(list) = self.free.get_mut(&size) {
            if let Some(base) = list.pop() {
                return base;
            }
        }
        self.cursor = round_up(self.cursor, alignment);
        let base = self.cursor;
        self.cursor += size;
        self.ensure(self.cursor);
        base
    }

    fn release(&mut self, base: u64, size: u64) {
        self.free.entry(size).or_default().push(base);
    }

    fn reserve_raw(&mut self, bytes: u64) -> u64 {
        let base = self.cursor;
        self.cursor += bytes;
        self.ensure(self.cursor);
        base
    }

    fn ensure(&mut self, end: u64) {
        let need = (end - HEAP_BASE) as usize;
        if need > self.heap.len() {
            self.heap.resize(need, 0);
        }
    }

    fn scratch_read(&self, addr: u64, buf: &mut [u8]) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = self.scratch[(addr.wrapping_add(i as u64) & (SCRATCH_BYTES - 1)) as usize];
        }
    }

    fn scratch_write(&mut self, addr: u64, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            self.scratch[(addr.wrapping_add(i as u64) & (SCRATCH_BYTES - 1)) as usize] = *b;
        }
    }

    fn heap_read(&self, addr: u64, buf: &mut [u8]) {
        let at = (addr - HEAP_BASE) as usize;
        buf.copy_from_slice(&self.heap[at..at + buf.len()]);
    }

    fn heap_byte(&self, addr: u64) -> u8 {
        self.heap[(addr - HEAP_BASE) as usize]
    }

    fn heap_write(&mut self, addr: u64, data: &[u8]) {
        let at = (addr - HEAP_BASE) as usize;
        self.heap[at..at + data.len()].copy_from_slice(data);
    }
}

fn round_up(v: u64, align: u64) -> u64 {
    (v + align - 1) & !(align - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::unflatten;
    use proptest::prelude::*;

    const SEEDS: [u64; 4] = [1, 42, 0xdead_beef, u64::MAX];

    fn full_cfg() -> FrpConfig {
        FrpConfig::default()
    }

    fn scaled_cfg(id_bits: u32, offset_bits: u32) -> FrpConfig {
        FrpConfig {
            id_random_bits: id_bits,
            offset_random_bits: offset_bits,
            ..FrpConfig::default()
        }
    }

    #[test]
    fn config_validation_bounds() {
        assert!(full_cfg().validate().is_ok());
        assert_eq!(
            FrpConfig {
                id_random_bits: 41,
                ..full_cfg()
            }
            .validate(),
            Err(ConfigError::IdBits(41))
        );
        assert_eq!(
            FrpConfig {
                offset_random_bits: 13,
                ..full_cfg()
            }
            .validate(),
            Err(ConfigError::OffsetBits(13))
        );
        assert_eq!(
            FrpConfig {
                alignment: 24,
                ..full_cfg()
            }
            .validate(),
            Err(ConfigError::Alignment(24))
        );
    }

    #[test]
    fn minted_pointers_are_always_encoded() {
        for seed in SEEDS {
            let mut rng = RandomSource::seeded(seed);
            let mut map = ObjectMap::new(full_cfg());
            for _ in 0..1000 {
                let p = map.malloc(&mut rng, 8).unwrap();
                assert!(p.is_encoded(), "plain-looking word {:#x}", p.word());
                assert_ne!(p.id() >> OFFSET_BITS, 0);
            }
        }
    }

    #[test]
    fn scaled_ids_carry_the_fill_pattern() {
        let cfg = scaled_cfg(8, 4);
        let mut rng = RandomSource::seeded(3);
        let mut map = ObjectMap::new(cfg);
        for _ in 0..100 {
            let p = map.malloc(&mut rng, 8).unwrap();
            assert!(p.is_encoded());
            assert_eq!(p.id() >> 8, ID_FILL >> 8);
        }
    }

    #[test]
    fn ids_and_words_never_repeat_while_tracking() {
        let mut rng = RandomSource::seeded(9);
        let mut map = ObjectMap::new(full_cfg());
        let mut ids = HashSet::new();
        let mut words = HashSet::new();
        for _ in 0..10_000 {
            let p = map.malloc(&mut rng, 16).unwrap();
            assert!(ids.insert(p.id()), "repeated id {:#x}", p.id());
            assert!(words.insert(p.word()));
            map.free(p).unwrap();
        }
    }

    #[test]
    fn id_space_pigeonhole_exhausts() {
        let cfg = scaled_cfg(4, 12);
        let mut rng = RandomSource::seeded(5);
        let mut map = ObjectMap::new(cfg);
        for _ in 0..16 {
            map.malloc(&mut rng, 8).unwrap();
        }
        assert_eq!(map.malloc(&mut rng, 8), Err(FaultClass::IdExhaustion));
        // Without tracking, freeing makes the id reusable again.
        let cfg = FrpConfig {
            track_all_ids: false,
            ..cfg
        };
        let mut map = ObjectMap::new(cfg);
        let mut held = Vec::new();
        for _ in 0..16 {
            held.push(map.malloc(&mut rng, 8).unwrap());
        }
        assert_eq!(map.malloc(&mut rng, 8), Err(FaultClass::IdExhaustion));
        map.free(held.pop().unwrap()).unwrap();
        assert!(map.malloc(&mut rng, 8).is_ok());
    }

    #[test]
    fn oversized_allocation_is_rejected() {
        let mut rng = RandomSource::seeded(2);
        let mut map = ObjectMap::new(full_cfg());
        assert_eq!(
            map.malloc(&mut rng, MAX_ALLOC_BYTES + 1),
            Err(FaultClass::LargeAllocation)
        );
        assert!(map.malloc(&mut rng, MAX_ALLOC_BYTES).is_ok());
    }

    #[test]
    fn zero_copies_low_bits_of_base() {
        for seed in SEEDS {
            let mut rng = RandomSource::seeded(seed);
            let mut map = ObjectMap::new(full_cfg());
            for size in [1u64, 8, 16, 100, 4096] {
                let p = map.malloc(&mut rng, size).unwrap();
                let rec = *map.lookup(p.id()).unwrap();
                assert_eq!(rec.zero as u64 & 0xfff, rec.arena_base & 0xfff);
                assert_eq!(rec.zero, p.offset());
                assert!(rec.zero as u64 + rec.size <= OFFSET_CAPACITY);
            }
        }
    }

    #[test]
    fn near_window_sized_object_pins_zero() {
        // A block base with nonzero low bits and a size one page under the
        // window leaves exactly one legal zero: the base's low 12 bits.
        let mut rng = RandomSource::seeded(17);
        let mut map = ObjectMap::new(full_cfg());
        map.reserve_arena(16);
        let size = MAX_ALLOC_BYTES;
        let p = map.malloc(&mut rng, size).unwrap();
        let rec = *map.lookup(p.id()).unwrap();
        assert_eq!(rec.arena_base & 0xfff, 16);
        // Enumerate the legal zeros directly.
        let legal: Vec<u64> = (0..OFFSET_CAPACITY)
            .step_by(4096)
            .map(|hi| hi | (rec.arena_base & 0xfff))
            .filter(|z| z + size <= OFFSET_CAPACITY)
            .collect();
        assert_eq!(legal, vec![16]);
        assert_eq!(rec.zero as u64, 16);
    }

    #[test]
    fn high_zero_bits_cover_the_field() {
        // Small objects leave all 2^12 high values legal. 16384 uniform
        // draws cover 1 - e^-4 of them in expectation, about 4021.
        let mut rng = RandomSource::seeded(23);
        let mut map = ObjectMap::new(full_cfg());
        let mut seen = HashSet::new();
        for _ in 0..16384 {
            let p = map.malloc(&mut rng, 8).unwrap();
            seen.insert(p.offset() >> 12);
            map.free(p).unwrap();
        }
        assert!(
            seen.len() > 3900,
            "only {} of 4096 high-zero values seen",
            seen.len()
        );
    }

    #[test]
    fn free_accepts_only_the_live_base() {
        let mut rng = RandomSource::seeded(13);
        let mut map = ObjectMap::new(full_cfg());
        let p = map.malloc(&mut rng, 32).unwrap();
        // Interior pointer.
        assert_eq!(map.free(p.wrapping_add(1)), Err(FaultClass::InvalidFree));
        // Plain word.
        assert_eq!(
            map.free(EncodedPointer(0x5647_4511_9010)),
            Err(FaultClass::InvalidFree)
        );
        assert_eq!(map.free(p), Ok(()));
        // Double free.
        assert_eq!(map.free(p), Err(FaultClass::InvalidFree));
        assert_eq!(map.live_count(), 0);
    }

    #[test]
    fn freed_blocks_are_reused_with_fresh_ids() {
        let mut rng = RandomSource::seeded(29);
        let mut map = ObjectMap::new(full_cfg());
        let p = map.malloc(&mut rng, 24).unwrap();
        let base = map.lookup(p.id()).unwrap().arena_base;
        map.free(p).unwrap();
        let q = map.malloc(&mut rng, 24).unwrap();
        assert_eq!(
            map.lookup(q.id()).unwrap().arena_base,
            base,
            "block not reused"
        );
        assert_ne!(q.id(), p.id(), "id reused while tracking");
        // A different size must not reuse the freed block.
        map.free(q).unwrap();
        let r = map.malloc(&mut rng, 32).unwrap();
        assert_ne!(map.lookup(r.id()).unwrap().arena_base, base);
    }

    #[test]
    fn reserve_arena_controls_placement() {
        let mut rng = RandomSource::seeded(31);
        let mut map = ObjectMap::new(full_cfg());
        let skipped = map.reserve_arena(4096);
        assert_eq!(skipped, HEAP_BASE);
        let p = map.malloc(&mut rng, 8).unwrap();
        assert_eq!(map.lookup(p.id()).unwrap().arena_base, HEAP_BASE + 4096);
    }

    proptest! {
        // Random alloc/free churn keeps the map consistent: live blocks are
        // pairwise disjoint, zeros stay legal, and records match their
        // encoded bases.
        #[test]
        fn live_blocks_stay_disjoint(seed in any::<u64>(), ops in 1usize..200) {
            let mut rng = RandomSource::seeded(seed);
            let mut map = ObjectMap::new(full_cfg());
            let mut held: Vec<EncodedPointer> = Vec::new();
            for step in 0..ops {
                if step % 3 == 2 && !held.is_empty() {
                    let p = held.swap_remove(step % held.len());
                    prop_assert_eq!(map.free(p), Ok(()));
                } else {
                    let size = (step as u64 * 37) % 300 + 1;
                    held.push(map.malloc(&mut rng, size).unwrap());
                }
            }
            let recs: Vec<ObjectRecord> = held.iter().map(|p| *map.lookup(p.id()).unwrap()).collect();
            for (i, a) in recs.iter().enumerate() {
                prop_assert!(a.zero as u64 + a.size <= OFFSET_CAPACITY);
                prop_assert_eq!(unflatten(a.encoded_base).offset, a.zero);
                for b in recs.iter().skip(i + 1) {
                    let disjoint = a.arena_base + a.size <= b.arena_base
                        || b.arena_base + b.size <= a.arena_base;
                    prop_assert!(disjoint, "overlap: {:?} vs {:?}", a, b);
                }
            }
        }
    }
}
