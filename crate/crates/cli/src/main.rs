use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hashvfl::data::Split;
use hashvfl_cli::config::ExperimentConfig;
use hashvfl_cli::harness::{self, Experiment};

#[derive(Parser)]
#[command(author, version, about = "Hashed vertical federated learning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a random class codebook.
    GenCodes {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        code_length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a system and write its checkpoint and training log.
    Train(Common),
    /// Accuracy of a trained checkpoint on both splits.
    Eval(Common),
    /// Invert one party's bottom model from each class code.
    AttackReconstruct {
        #[command(flatten)]
        common: Common,
        /// TV weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Optimization steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Targeted perturbation attack by one party.
    AttackPgd {
        #[command(flatten)]
        common: Common,
        /// Perturbation bound.
        #[arg(long)]
        omega: Option<f64>,
        /// Step size.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Label inference probe on one party's codes.
    AttackPla(Common),
    /// Consistency audit and abnormal-sample detection on the test split.
    Detect(Common),
    /// Accuracy under randomized-response code noise for several budgets.
    DpSweep {
        #[command(flatten)]
        common: Common,
        /// Privacy budget; repeat for several.
        #[arg(long = "epsilon")]
        epsilons: Vec<f64>,
    },
    /// Train the full system and single-toggle ablations over several seeds.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Root of the output tree.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the configured seed (selects a different output directory).
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to load instead of the experiment's own.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the configured code length.
    #[arg(long)]
    code_length: Option<usize>,
}

impl Common {
    fn experiment(&self, edit: impl FnOnce(&mut ExperimentConfig)) -> anyhow::Result<Experiment> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.code_length {
            cfg.code_length = Some(d);
        }
        let base = self.config.parent().unwrap_or(Path::new("."));
        let mut exp = Experiment::new(cfg, base, &self.out)?;
        // Attack and defense overrides keep the trained model's directory.
        edit(&mut exp.config);
        exp.config.validate()?;
        Ok(exp)
    }

    fn checkpoint(&self) -> Option<&Path> {
        self.checkpoint.as_deref()
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenCodes {
            classes,
            code_length,
            seed,
        } => {
            let cb = harness::gen_codes(classes, code_length, seed)?;
            print!("{}", harness::codes_csv(&cb));
        }
        Command::Train(c) => {
            let exp = c.experiment(|_| {})?;
            let ck = harness::run_train(&exp)?;
            let acc = ck.train_log.final_accuracy(Split::Test).context("no test records")?;
            println!("test accuracy {acc:.4}");
            println!("checkpoint {}", exp.checkpoint_path().display());
        }
        Command::Eval(c) => {
            let exp = c.experiment(|_| {})?;
            print_json(&harness::run_eval(&exp, c.checkpoint())?)?;
        }
        Command::AttackReconstruct { common, lambda, steps } => {
            let exp = common.experiment(|cfg| {
                if let Some(l) = lambda {
                    cfg.attack.lambda = l;
                }
                if let Some(s) = steps {
                    cfg.attack.steps = s;
                }
            })?;
            print_json(&harness::run_reconstruct(&exp, common.checkpoint())?.metrics)?;
        }
        Command::AttackPgd {
            common,
            omega,
            eta,
            steps,
        } => {
            let exp = common.experiment(|cfg| {
                if let Some(o) = omega {
                    cfg.attack.omega = o;
                }
                if let Some(e) = eta {
                    cfg.attack.eta = e;
                }
                if let Some(s) = steps {
                    cfg.attack.pgd_steps = s;
                }
            })?;
            print_json(&harness::run_pgd(&exp, common.checkpoint())?.metrics)?;
        }
        Command::AttackPla(c) => {
            let exp = c.experiment(|_| {})?;
            print_json(&harness::run_pla(&exp, c.checkpoint())?.metrics)?;
        }
        Command::Detect(c) => {
            let exp = c.experiment(|_| {})?;
            print_json(&harness::run_detect(&exp, c.checkpoint())?)?;
        }
        Command::DpSweep { common, epsilons } => {
            let exp = common.experiment(|cfg| {
                if !epsilons.is_empty() {
                    cfg.defense.epsilons = epsilons.clone();
                }
            })?;
            print!("{}", harness::run_dp_sweep(&exp, common.checkpoint())?.to_csv());
        }
        Command::Ablate(c) => {
            let exp = c.experiment(|_| {})?;
            let ab = harness::run_ablate(&exp)?;
            for v in harness::ABLATION_VARIANTS {
                if let Some(m) = ab.mean(v) {
                    println!("{v}: mean test accuracy {m:.4}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
