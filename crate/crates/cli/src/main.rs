use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evoaug::harness::{self, ExperimentConfig, HarnessError, Session};
use evoaug::policy::SslAlgorithm;

/// Evolutionary search over augmentation policies for self-supervised
/// pretext tasks.
#[derive(Parser)]
#[command(name = "evoaug", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Concurrent evaluations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory replacing the configured one.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the GA for every seed (and every batch size of the study).
    Evolve {
        #[command(flatten)]
        common: Common,
        /// Fixed algorithm replacing the configured one (SO mode).
        #[arg(long)]
        algorithm: Option<SslAlgorithm>,
        /// Run SO once per algorithm with baselines and write
        /// directional.csv.
        #[arg(long, conflicts_with = "algorithm")]
        per_algorithm: bool,
    },
    /// Supervised and SSL-default baselines.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Retrain the best chromosomes with longer pretext training.
    RetrainBest {
        #[command(flatten)]
        common: Common,
    },
    /// Operator sensitivity and importance over the run logs.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = evoaug::explain::DEFAULT_TOP_N)]
        top_n: usize,
    },
    /// Loss landscape around the retrained best policy of one seed.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Seed whose best policy to use; defaults to the first seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write mini-shapes splits in the CIFAR-10 binary format.
    GenData {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
    },
    /// Evaluate one policy, e.g. `--policy Sharpness:0.95,Contrast:1.28`.
    EvalPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        policy: String,
    },
}

fn load(common: &Common, algorithm: Option<SslAlgorithm>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seeds) = &common.seed_override {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    if let Some(a) = algorithm {
        cfg.mode = evoaug::policy::Mode::So;
        cfg.algorithm = Some(a);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// How a command that did not error ended.
enum Outcome {
    Done,
    SeedsFailed(usize),
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Evolve {
            common,
            algorithm,
            per_algorithm,
        } => {
            let cfg = load(&common, algorithm)?;
            if per_algorithm {
                let rows = harness::run_directional(&cfg, common.jobs)?;
                println!("algorithm,evolved_best,ssl_default,supervised");
                for r in rows {
                    println!("{},{:.4},{:.4},{:.4}", r.algorithm, r.evolved_best, r.ssl_default, r.supervised);
                }
                return Ok(Outcome::Done);
            }
            let results = harness::run_batch_study(&cfg, common.jobs)?;
            let mut failed = 0;
            for (batch, s) in results {
                failed += s.failed.len();
                for r in &s.completed {
                    println!("bs{batch} seed {}: best {:.4} {}", r.seed, r.best.fitness, r.best.chromosome);
                }
                for f in &s.failed {
                    println!("bs{batch} seed {}: FAILED in generation {}: {}", f.seed, f.generation, f.error);
                }
            }
            Ok(if failed > 0 { Outcome::SeedsFailed(failed) } else { Outcome::Done })
        }
        Command::Baseline { common } => {
            let cfg = load(&common, None)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("baselines.csv");
            let rows = harness::run_baselines(&Session::new(cfg)?, common.jobs)?;
            harness::write_baselines_csv(&rows, std::fs::File::create(&path)?)?;
            for e in harness::baseline_expectations(&rows) {
                let mark = if e.met { "ok" } else { "FLAGGED" };
                println!(
                    "{}: ssl-default {:.4} vs supervised {:.4} [{mark}]",
                    e.algorithm, e.ssl_default_mean, e.supervised_mean
                );
            }
            println!("wrote {}", path.display());
            Ok(Outcome::Done)
        }
        Command::RetrainBest { common } => {
            let cfg = load(&common, None)?;
            for r in harness::retrain_best(&Session::new(cfg)?, common.jobs)? {
                println!("seed {} {} epochs {}: {:.4} (delta {:+.4})", r.seed, r.algorithm, r.epochs, r.accuracy, r.delta);
            }
            Ok(Outcome::Done)
        }
        Command::Explain { common, top_n } => {
            let cfg = load(&common, None)?;
            let rows = harness::explain_outputs(&cfg, top_n)?;
            println!("wrote {} rows to {}", rows.len(), cfg.output_dir.join("explain.csv").display());
            Ok(Outcome::Done)
        }
        Command::Landscape { common, seed } => {
            let cfg = load(&common, None)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let (tag, m) = harness::landscape_for_seed(&Session::new(cfg)?, seed, common.jobs)?;
            println!("landscape_{tag}.csv: center loss {}, checkpoint {}", m.center_loss, m.checkpoint_sha256);
            Ok(Outcome::Done)
        }
        Command::GenData {
            output,
            seed,
            n_train,
            n_test,
        } => {
            let (tr, te) = harness::export_minishapes(seed, n_train, n_test, &output)?;
            println!("wrote {} and {}", tr.display(), te.display());
            Ok(Outcome::Done)
        }
        Command::EvalPolicy { common, policy } => {
            let cfg = load(&common, None)?;
            let genes = harness::parse_policy(&policy).map_err(HarnessError::Config).context("--policy")?;
            let results = harness::eval_policy(&Session::new(cfg)?, &genes)?;
            if results.is_empty() {
                bail!("nothing evaluated");
            }
            println!("algorithm,seed,fitness");
            for (a, seed, f) in &results {
                println!("{a},{seed},{f}");
            }
            Ok(Outcome::Done)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(HarnessError::Config(_)) => 2,
        Some(HarnessError::Evaluator(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::SeedsFailed(n)) => {
            eprintln!("error: {n} seed(s) failed; outputs for the others were written");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
