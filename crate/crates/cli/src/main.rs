use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpa_core::flsim::{AttackKind, FLConfig, Scheme};
use cpa_core::plan::ExperimentPlan;
use cpa_core::suites::{run_suite, SUITES};
use cpa_core::Error;

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cpa-fed",
    version,
    about = "Federated learning with compressed private aggregation"
)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "CPA_FED_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        /// Experiment config (TOML, flat keys).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a parameter sweep; finished cells are skipped on rerun.
    Sweep {
        /// Plan file (TOML with `[base]` and `[axes]` tables).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated privacy budgets.
        #[arg(long, value_delimiter = ',')]
        sweep_epsilon: Vec<f64>,
        /// Comma-separated user counts.
        #[arg(long, value_delimiter = ',')]
        sweep_users: Vec<usize>,
        /// Comma-separated lattice rates.
        #[arg(long, value_delimiter = ',')]
        sweep_rate: Vec<u32>,
        /// Seeds per cell.
        #[arg(long)]
        repetitions: Option<usize>,
        /// Maximum number of cells.
        #[arg(long)]
        cap: Option<usize>,
        /// Run cells concurrently.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a named replication suite, or `all`, and report pass/fail.
    Replicate { suite: String },
    /// List replication suites.
    Suites,
}

#[derive(Args, Default)]
struct Overrides {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// vanilla, laplace, signsgd-rr, cpa, nested-cpa or cpa-no-rr.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    rate: Option<u32>,
    /// none, ones or flip.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    attack_frac: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut FLConfig) -> Result<(), Error> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.scheme {
            cfg.scheme = Scheme::parse(v)?;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.users {
            cfg.users = v;
        }
        if let Some(v) = self.rate {
            cfg.rate = v;
        }
        if let Some(v) = &self.attack {
            cfg.attack = AttackKind::parse(v)?;
        }
        if let Some(v) = self.attack_frac {
            cfg.attack_frac = v;
        }
        cfg.validate()
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_IO
    })
}

fn run_plan(plan: &ExperimentPlan, out: &Path, threads: usize) -> Result<(), Error> {
    let report = plan.run(out, threads, |msg| eprintln!("{msg}"))?;
    eprintln!(
        "{} cells run, {} reused; summary at {}",
        report.ran,
        report.skipped,
        report.summary_path.display()
    );
    Ok(())
}

fn replicate(name: &str, threads: usize) -> Result<bool, Error> {
    let names: Vec<&str> = if name == "all" {
        SUITES.to_vec()
    } else {
        vec![name]
    };
    let mut all_passed = true;
    for suite in names {
        let report = run_suite(suite, threads)?;
        println!("{report}");
        all_passed &= report.passed();
    }
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.unwrap_or_else(default_threads).max(1);
    let outcome = match cli.command {
        Command::Run { config, overrides } => (|| {
            let mut cfg = match config {
                Some(path) => FLConfig::from_file(path)?,
                None => FLConfig::default(),
            };
            overrides.apply(&mut cfg)?;
            run_plan(&ExperimentPlan::single(cfg), &overrides.out, threads)
        })()
        .map(|_| true),
        Command::Sweep {
            config,
            sweep_epsilon,
            sweep_users,
            sweep_rate,
            repetitions,
            cap,
            parallel,
            overrides,
        } => (|| {
            let mut plan = match config {
                Some(path) => ExperimentPlan::from_file(path)?,
                None => ExperimentPlan::default(),
            };
            overrides.apply(&mut plan.base)?;
            let axes = &mut plan.axes;
            if !sweep_epsilon.is_empty() {
                axes.epsilon = sweep_epsilon;
            }
            if !sweep_users.is_empty() {
                axes.users = sweep_users;
            }
            if !sweep_rate.is_empty() {
                axes.rate = sweep_rate;
            }
            plan.repetitions = repetitions.unwrap_or(plan.repetitions);
            plan.cap = cap.unwrap_or(plan.cap);
            plan.parallel_cells |= parallel;
            run_plan(&plan, &overrides.out, threads)
        })()
        .map(|_| true),
        Command::Replicate { suite } => replicate(&suite, threads),
        Command::Suites => {
            for s in SUITES {
                println!("{s}");
            }
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => exit_for(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use cpa_core::plan::SweepAxes;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = FLConfig::default();
        let o = Overrides {
            scheme: Some("nested-cpa".into()),
            epsilon: Some(2.0),
            users: Some(7),
            attack: Some("flip".into()),
            attack_frac: Some(0.2),
            ..Overrides::default()
        };
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.scheme, Scheme::NestedCpa);
        assert_eq!((cfg.epsilon, cfg.users), (2.0, 7));
        assert_eq!(cfg.attack, AttackKind::Flip);

        let bad = Overrides {
            attack_frac: Some(1.5),
            ..Overrides::default()
        };
        assert!(bad.apply(&mut FLConfig::default()).unwrap_err().is_config());
        let bad = Overrides {
            scheme: Some("qsgd".into()),
            ..Overrides::default()
        };
        assert!(bad.apply(&mut FLConfig::default()).is_err());
    }

    #[test]
    fn sweep_axes_default_empty() {
        assert_eq!(ExperimentPlan::default().axes, SweepAxes::default());
    }
}
