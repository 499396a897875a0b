use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use grcgan::experiment::{eval_checkpoint, gen_data, reproduce, train_to_dir};
use grcgan::gradcheck::{run_all, GradCheckOptions};
use grcgan::{Checkpoint, ExperimentId, RunManifest};

#[derive(Parser)]
#[command(name = "grcgan", version, about = "Generator-regularized conditional GAN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Run manifest (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Replaces the manifest seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Replaces the manifest repetition count.
    #[arg(long, global = true, value_name = "N")]
    reps: Option<usize>,
    /// Fraction of the preset iteration budget.
    #[arg(long, global = true, value_name = "FRACTION")]
    scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a training set and the manifest that regenerates it.
    GenData { experiment: Option<ExperimentId> },
    /// Train the manifest's first variant and save a checkpoint.
    Train { experiment: Option<ExperimentId> },
    /// Score the checkpoint in the output directory.
    Eval {
        /// Checkpoint to score (defaults to DIR/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every variant and repetition and aggregate the scores.
    Reproduce {
        experiment: Option<ExperimentId>,
        /// Exit with status 2 when a target band is missed.
        #[arg(long)]
        check: bool,
    },
    /// Finite-difference checks of every layer, loss and penalty.
    Gradcheck {
        /// Deliberately perturb the analytic gradients; every check should fail.
        #[arg(long)]
        corrupt: bool,
    },
}

fn manifest(common: &Common, experiment: Option<ExperimentId>) -> Result<RunManifest> {
    let mut m = match (&common.config, experiment) {
        (Some(path), None) => RunManifest::load(path)
            .with_context(|| format!("reading manifest {}", path.display()))?,
        (Some(path), Some(e)) => {
            let m = RunManifest::load(path)?;
            if m.experiment != e {
                bail!("manifest {} is for {}, not {e}", path.display(), m.experiment);
            }
            m
        }
        (None, Some(e)) => RunManifest::new(e),
        (None, None) => bail!("give an experiment name or --config PATH"),
    };
    if let Some(s) = common.seed {
        m.seed = s;
    }
    if let Some(r) = common.reps {
        m.repetitions = r;
    }
    if let Some(s) = common.scale {
        m.scale = s;
    }
    m.validate()?;
    Ok(m)
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match cli.command {
        Command::GenData { experiment } => {
            let m = manifest(c, experiment)?;
            list(&gen_data(&m, &c.out)?);
        }
        Command::Train { experiment } => {
            let m = manifest(c, experiment)?;
            let ckpt = train_to_dir(&m, &c.out)?;
            println!(
                "trained {} ({}) for {} iterations; checkpoint in {}",
                m.experiment,
                ckpt.variant,
                ckpt.state.iteration,
                c.out.display()
            );
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| c.out.join("checkpoint.json"));
            let ckpt = Checkpoint::load(&path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            let summary = eval_checkpoint(&ckpt, &c.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Reproduce { experiment, check } => {
            let m = manifest(c, experiment)?;
            let out = experiment_dir(&c.out, m.experiment);
            let outcome = reproduce(&m, &out, |line| println!("{line}"))?;
            print!("{}", outcome.aggregate_csv);
            println!("wall clock: {:.1}s", outcome.seconds);
            for line in &outcome.checks {
                let tag = if line.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", line.name, line.detail);
            }
            if check && !outcome.all_passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Gradcheck { corrupt } => {
            let opts = GradCheckOptions {
                corrupt_backward: corrupt,
                seed: c.seed.unwrap_or(0),
                ..Default::default()
            };
            let results = run_all(&opts)?;
            let mut ok = true;
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!(
                    "[{tag}] {:<24} params {:>4}  max rel err {:.2e} (tol {:.0e})",
                    r.name, r.params, r.max_rel_error, r.tolerance
                );
                ok &= r.passed;
            }
            if !ok {
                bail!("gradient check failed");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn experiment_dir(out: &Path, e: ExperimentId) -> PathBuf {
    out.join(e.as_str())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
