//! Set-associative LRU model of the id-to-record translation cache.
//!
//! Every decode of a live encoded pointer looks its id up here. Ids map to
//! sets by `id % set_count`; each set holds `associativity` entries in true
//! LRU order. A miss installs the id, evicting the least recently used entry
//! of a full set. Frees invalidate the id so a dead translation can never be
//! served.
//!
//! The cycle estimate is a flat linear model: hits cost `hit_latency`,
//! misses cost `hit_latency + miss_penalty`, where the penalty stands for
//! the walk to the backing table through the last-level cache and memory.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::ConfigError;

/// Geometry and latency parameters. The default is the full-size cache:
/// 4096 entries of 16 bytes, 8-way, 64 KiB total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    pub entries: u32,
    pub associativity: u32,
    pub entry_bytes: u32,
    /// Cycles charged on a hit.
    pub hit_latency: u64,
    /// Extra cycles charged on a miss.
    pub miss_penalty: u64,
}

impl Default for CacheConfig {
    fn default() -> CacheConfig {
        CacheConfig {
            entries: 4096,
            associativity: 8,
            entry_bytes: 16,
            hit_latency: 2,
            miss_penalty: 100,
        }
    }
}

impl CacheConfig {
    /// Default geometry at a different entry count.
    pub fn with_entries(entries: u32) -> CacheConfig {
        CacheConfig {
            entries,
            ..CacheConfig::default()
        }
    }

    pub fn set_count(&self) -> u32 {
        self.entries / self.associativity
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.entries as u64 * self.entry_bytes as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.entries == 0
            || self.associativity == 0
            || !self.entries.is_multiple_of(self.associativity)
        {
            return Err(ConfigError::CacheGeometry {
                entries: self.entries,
                associativity: self.associativity,
            });
        }
        Ok(())
    }
}

/// Counter snapshot plus derived figures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    /// Entries actually removed by an invalidation; no-op invalidations of
    /// absent ids do not count.
    pub invalidations: u64,
    /// Distinct ids ever accessed.
    pub unique_objects: u64,
    /// Mean size of those distinct objects in bytes.
    pub mean_object_bytes: f64,
    pub estimated_cycles: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
}

/// One simulated cache instance.
pub struct CacheSim {
    cfg: CacheConfig,
    /// sets[s] holds the resident ids of set s, most recently used first.
    sets: Vec<Vec<u64>>,
    hits: u64,
    misses: u64,
    invalidations: u64,
    seen: HashSet<u64>,
    seen_bytes: u64,
}

impl CacheSim {
    /// Panics on an invalid geometry; validate first for user input.
    pub fn new(cfg: CacheConfig) -> CacheSim {
        if let Err(e) = cfg.validate() {
            panic!("invalid cache config: {e}");
        }
        CacheSim {
            cfg,
            sets: vec![Vec::with_capacity(cfg.associativity as usize); cfg.set_count() as usize],
            hits: 0,
            misses: 0,
            invalidations: 0,
            seen: HashSet::new(),
            seen_bytes: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    /// Records one translation of `id` for an object of `object_bytes`.
    pub fn access(&mut self, id: u64, object_bytes: u64) -> CacheOutcome {
        if self.seen.insert(id) {
            self.seen_bytes += object_bytes;
        }
        let set = &mut self.sets[(id % self.cfg.set_count() as u64) as usize];
        if let Some(pos) = set.iter().position(|&t| t == id) {
            set.remove(pos);
            set.insert(0, id);
            self.hits += 1;
            return CacheOutcome::Hit;
        }
        set.insert(0, id);
        if set.len() > self.cfg.associativity as usize {
            set.pop();
        }
        self.misses += 1;
        CacheOutcome::Miss
    }

    /// Drops `id` if resident. Returns whether an entry was removed.
    pub fn invalidate(&mut self, id: u64) -> bool {
        let set = &mut self.sets[(id % self.cfg.set_count() as u64) as usize];
        if let Some(pos) = set.iter().position(|&t| t == id) {
            set.remove(pos);
            self.invalidations += 1;
            true
        } else {
            false
        }
    }

    pub fn stats(&self) -> CacheStats {
        let stats = CacheStats {
            accesses: self.hits + self.misses,
            hits: self.hits,
            misses: self.misses,
            invalidations: self.invalidations,
            unique_objects: self.seen.len() as u64,
            mean_object_bytes: if self.seen.is_empty() {
                0.0
            } else {
                self.seen_bytes as f64 / self.seen.len() as f64
            },
            estimated_cycles: 0,
        };
        CacheStats {
            estimated_cycles: estimate_cycles(&stats, &self.cfg),
            ..stats
        }
    }
}

/// Linear cycle model over the hit and miss counters.
pub fn estimate_cycles(stats: &CacheStats, cfg: &CacheConfig) -> u64 {
    stats.hits * cfg.hit_latency + stats.misses * (cfg.hit_latency + cfg.miss_penalty)
}
