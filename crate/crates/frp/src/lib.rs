//! Simulator for fully randomized pointers (FRP), a probabilistic
//! memory-safety scheme that replaces every heap pointer with a randomized
//! (id, offset) encoding over a simulated heap.
//!
//! * [`encoding`]: the 64-bit word layout and its arithmetic.
//! * [`rng`]: seeded ChaCha20 randomness with stable per-trial derivation.
//! * [`heap`]: id assignment, offset randomization, and the object map.
//! * [`access`]: checked loads and stores; zero-filled out-of-bounds reads,
//!   fatal out-of-bounds writes, fatal stale-pointer use.
//! * [`cache`]: set-associative LRU model of the translation cache.
//! * [`harness`]: entropy accounting plus overflow, underflow,
//!   use-after-free, and blind-guessing experiments.
//! * [`trace`]: a small trace language and its replay runner.
//!
//! Everything is deterministic under an explicit seed, including the attack
//! harness when the `parallel` feature spreads trials across threads.

pub mod access;
pub mod cache;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod heap;
pub mod rng;
pub mod trace;

pub use access::{check_bounds, decode, load, store, AccessOutcome, ACCESS_WIDTHS};
pub use cache::{estimate_cycles, CacheConfig, CacheOutcome, CacheSim, CacheStats};
pub use encoding::{diff, flatten, is_encoded, unflatten, EncodedPointer, IdOffset};
pub use error::{ConfigError, FaultClass};
pub use harness::{
    entropy, entropy_for_config, monte_carlo_bypass, monte_carlo_bypass_seq, run_attack,
    run_attack_seq, AttackKind, AttackReport, AttackSpec, AttemptTally, EntropyMode, EntropyValue,
    McReport, McSpec,
};
pub use heap::{FrpConfig, ObjectMap, ObjectRecord};
pub use rng::RandomSource;
pub use trace::{parse_trace, run_trace, RunReport, TraceError, TraceOp};
