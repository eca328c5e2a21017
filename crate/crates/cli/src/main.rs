use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bitrobust_cli::commands::{self, InjectSource};
use bitrobust_cli::config::{keys_help, ExperimentConfig};
use bitrobust_cli::error::CliError;
use bitrobust_core::report::sig6;
use bitrobust_core::selftest;
use clap::{Parser, Subcommand};

/// Train and evaluate quantized networks under memory bit errors.
#[derive(Parser)]
#[command(name = "bitrobust", version, after_long_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        config: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure clean and robust test error of a checkpoint.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides chip_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Profiled error map; may be repeated.
        #[arg(long = "map")]
        maps: Vec<PathBuf>,
        /// Comma-separated cell offsets for profiled maps.
        #[arg(long)]
        offsets: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a copy of a checkpoint with bit errors applied.
    Inject {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Random bit error rate.
        #[arg(long, conflicts_with = "map", required_unless_present = "map")]
        rate: Option<f64>,
        /// Profiled error map.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Cell offset into the map.
        #[arg(long, default_value_t = 0, requires = "map")]
        offset: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generalization bound for perturbed error.
    Bound { n: u64, l: u64, delta: f64 },
    /// Run built-in consistency checks.
    Selftest,
}

fn load(config: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = load(&config, out)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let a = commands::cmd_train(&cfg)?;
            if let Some(last) = a.outcome.trace.last() {
                println!("final clean loss {}", sig6(last.trace.clean_loss));
            }
            println!("checkpoint {}", a.checkpoint.display());
            println!("trace {}", a.trace.display());
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            maps,
            offsets,
            out,
        } => {
            let mut cfg = load(&config, out)?;
            if let Some(s) = seed {
                cfg.chip_seed = s;
            }
            let offsets = offsets
                .as_deref()
                .map(commands::parse_offsets)
                .transpose()?
                .unwrap_or_default();
            let a = commands::cmd_eval(&cfg, &checkpoint, &maps, &offsets)?;
            println!("te {}", sig6(a.results.report.te));
            for e in &a.results.report.entries {
                println!("p {} rte {} +- {}", sig6(e.p), sig6(e.rte_mean), sig6(e.rte_std));
            }
            for r in &a.results.profiled {
                println!("map {} rte {} +- {}", r.label, sig6(r.mean), sig6(r.std));
            }
            for &(eps, mean, std) in &a.results.linf {
                println!("linf {} rte {} +- {}", sig6(eps), sig6(mean), sig6(std));
            }
            println!("report {}", a.report.display());
        }
        Command::Inject {
            checkpoint,
            rate,
            map,
            offset,
            seed,
            out,
        } => {
            let source = match (rate, map) {
                (Some(p), None) => InjectSource::Random(p),
                (None, Some(map)) => InjectSource::Profiled { map, offset },
                _ => return Err(CliError::Usage("give exactly one of --rate and --map".into())),
            };
            let out = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            let r = commands::cmd_inject(&checkpoint, &source, seed, &out)?;
            println!("flipped_bits {}", r.flipped_bits);
            if let Some(e) = r.expected_flips {
                println!("expected_flips {}", sig6(e));
            }
            println!("affected_weights {}", r.affected_weights);
            println!("output {}", r.output.display());
        }
        Command::Bound { n, l, delta } => {
            for line in commands::cmd_bound(n, l, delta)? {
                println!("{line}");
            }
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", r.name, r.detail);
            }
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("BITERR_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size the thread pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
