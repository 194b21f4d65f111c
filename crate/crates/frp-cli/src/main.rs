//! `frp`: replay traces through the randomized-pointer heap, run bypass
//! experiments, and print entropy figures. Every subcommand emits one pretty
//! JSON document on stdout.
//!
//! Recorded faults are data, not errors: a trace full of out-of-bounds
//! probes still exits 0. Only parse, config, and I/O problems exit nonzero.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use frp::harness::EntropyError;
use frp::rng::os_seed;
use frp::{
    entropy, monte_carlo_bypass, parse_trace, run_attack, run_trace, AttackKind, AttackSpec,
    CacheConfig, EntropyMode, FrpConfig, McSpec, RandomSource,
};

#[derive(Parser)]
#[command(name = "frp", version, about = "Randomized-pointer heap simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace file through the heap and cache models.
    Run {
        /// Path to the trace file.
        #[arg(long)]
        trace: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run probe-loop attack trials against a hidden target.
    Attack {
        #[arg(long, value_enum)]
        kind: CliAttackKind,
        /// Probes per trial before giving up.
        #[arg(long, default_value_t = 10_000)]
        attempts: u64,
        #[arg(long, default_value_t = 1)]
        trials: u32,
        #[arg(long, default_value_t = 8)]
        victim_size: u64,
        #[arg(long, default_value_t = 8)]
        target_size: u64,
        /// Hidden targets allocated per trial.
        #[arg(long, default_value_t = 1)]
        spray: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Print the encoding-space size for a bit budget.
    Entropy {
        /// Randomized id bits.
        #[arg(long)]
        id: u32,
        /// Randomized high-offset bits.
        #[arg(long)]
        offset: u32,
        /// Randomize the 8 page-selection bits too.
        #[arg(long)]
        page: bool,
        /// Randomize the 4 sub-alignment bits too.
        #[arg(long)]
        align: bool,
        #[arg(long, value_enum, default_value_t = CliEntropyMode::Auto)]
        mode: CliEntropyMode,
    },
    /// Estimate the blind-guess bypass probability by simulation.
    Montecarlo {
        /// Guesses per trial before giving up.
        #[arg(long, default_value_t = 1)]
        guesses: u64,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        /// Hidden targets allocated per trial.
        #[arg(long, default_value_t = 1)]
        spray: u32,
        #[arg(long, default_value_t = 8)]
        target_size: u64,
        #[command(flatten)]
        common: Common,
    },
}

/// Heap and experiment knobs shared by every randomized subcommand.
#[derive(Args)]
struct Common {
    /// RNG seed; drawn from system entropy (and echoed in the report) when
    /// absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Randomized id bits, out of 40.
    #[arg(long, default_value_t = 40)]
    id_bits: u32,
    /// Randomized high-offset bits, out of 12.
    #[arg(long, default_value_t = 12)]
    offset_bits: u32,
    /// Randomize page-selection bits of each object's zero offset.
    #[arg(long)]
    page_random: bool,
    /// Randomize sub-alignment bits of each object's zero offset.
    #[arg(long)]
    align_random: bool,
    /// Remember every id ever issued so stale pointers always miss.
    #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
    track_all_ids: bool,
    /// Translation-cache sizes to simulate, in entries.
    #[arg(long, value_delimiter = ',', default_value = "128,512,1024,4096")]
    cache_entries: Vec<u32>,
}

impl Common {
    fn config(&self) -> Result<FrpConfig> {
        let cfg = FrpConfig {
            id_random_bits: self.id_bits,
            offset_random_bits: self.offset_bits,
            page_random: self.page_random,
            align_random: self.align_random,
            track_all_ids: self.track_all_ids,
            ..FrpConfig::default()
        };
        cfg.validate().context("invalid heap configuration")?;
        Ok(cfg)
    }

    fn caches(&self) -> Result<Vec<CacheConfig>> {
        let configs: Vec<CacheConfig> = self
            .cache_entries
            .iter()
            .map(|&n| CacheConfig::with_entries(n))
            .collect();
        for c in &configs {
            c.validate().context("invalid cache configuration")?;
        }
        Ok(configs)
    }

    fn source(&self) -> RandomSource {
        match self.seed {
            Some(s) => RandomSource::seeded(s),
            None => RandomSource::seeded(os_seed()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliAttackKind {
    /// Linear overflow probing upward from a victim.
    Of,
    /// Linear underflow probing downward.
    Uf,
    /// Replaying a freed pointer against reallocated memory.
    Uaf,
}

impl From<CliAttackKind> for AttackKind {
    fn from(k: CliAttackKind) -> AttackKind {
        match k {
            CliAttackKind::Of => AttackKind::Overflow,
            CliAttackKind::Uf => AttackKind::Underflow,
            CliAttackKind::Uaf => AttackKind::UseAfterFree,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CliEntropyMode {
    Auto,
    Full,
    Scaled,
}

impl From<CliEntropyMode> for EntropyMode {
    fn from(m: CliEntropyMode) -> EntropyMode {
        match m {
            CliEntropyMode::Auto => EntropyMode::Auto,
            CliEntropyMode::Full => EntropyMode::FullWidth,
            CliEntropyMode::Scaled => EntropyMode::Scaled,
        }
    }
}

/// Entropy answer with the question echoed back.
#[derive(Serialize)]
struct EntropyReport {
    id_bits: u32,
    offset_bits: u32,
    page_bits: u32,
    align_bits: u32,
    mode: EntropyMode,
    exact: u128,
    log2: f64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let json = match cli.command {
        Command::Run { trace, common } => {
            let cfg = common.config()?;
            let caches = common.caches()?;
            let text = std::fs::read_to_string(&trace)
                .with_context(|| format!("reading trace file {trace}"))?;
            let ops = parse_trace(&text).with_context(|| format!("parsing {trace}"))?;
            let report = run_trace(&ops, &cfg, &caches, common.source());
            serde_json::to_string_pretty(&report)?
        }
        Command::Attack {
            kind,
            attempts,
            trials,
            victim_size,
            target_size,
            spray,
            common,
        } => {
            let cfg = common.config()?;
            if attempts == 0 || trials == 0 {
                bail!("attack needs at least one attempt and one trial");
            }
            let spec = AttackSpec {
                max_attempts: attempts,
                trials,
                victim_size,
                target_size,
                spray_count: spray,
                ..AttackSpec::new(kind.into())
            };
            check_objects(victim_size, target_size)?;
            let report = run_attack(&spec, &cfg, &common.source());
            serde_json::to_string_pretty(&report)?
        }
        Command::Entropy {
            id,
            offset,
            page,
            align,
            mode,
        } => {
            let page_bits = if page { 8 } else { 0 };
            let align_bits = if align { 4 } else { 0 };
            let value = entropy(id, offset, page_bits, align_bits, mode.into())
                .map_err(adapt_entropy_error)?;
            let report = EntropyReport {
                id_bits: id,
                offset_bits: offset,
                page_bits,
                align_bits,
                mode: mode.into(),
                exact: value.exact,
                log2: value.log2,
            };
            serde_json::to_string_pretty(&report)?
        }
        Command::Montecarlo {
            guesses,
            trials,
            spray,
            target_size,
            common,
        } => {
            let cfg = common.config()?;
            if guesses == 0 || trials == 0 {
                bail!("montecarlo needs at least one guess and one trial");
            }
            let spec = McSpec {
                guesses_per_trial: guesses,
                trials,
                spray_count: spray,
                target_size,
            };
            check_objects(target_size, target_size)?;
            let report = monte_carlo_bypass(&spec, &cfg, &common.source());
            serde_json::to_string_pretty(&report)?
        }
    };
    // A closed pipe (report piped into head, say) is a normal way to stop
    // reading, not an error worth a panic or a nonzero exit.
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{json}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing report"),
        _ => Ok(()),
    }
}

/// Experiment object sizes are caller input, so reject what the simulated
/// heap would reject instead of letting a trial panic mid-run.
fn check_objects(victim: u64, target: u64) -> Result<()> {
    if victim == 0 || target == 0 {
        bail!("object sizes must be nonzero");
    }
    let limit = frp::heap::MAX_ALLOC_BYTES;
    if victim > limit || target > limit {
        bail!("object sizes must be at most {limit} bytes");
    }
    Ok(())
}

fn adapt_entropy_error(e: EntropyError) -> anyhow::Error {
    anyhow::Error::new(e).context("invalid entropy bit budget")
}
