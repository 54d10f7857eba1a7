use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pac_imitation::pipeline::{self, files, ExperimentConfig};
use pac_imitation::Result;

#[derive(Parser)]
#[command(version, about = "PAC-Bayes certified fine-tuning of imitation-learned policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted expert demonstrations.
    Demos(Common),
    /// Train the cVAE on the demonstrations and store decoder and prior.
    Clone(Common),
    /// Fine-tune the prior on the training environments.
    Finetune(Common),
    /// Run the full pipeline and write a certificate.
    Certify(Common),
    /// Evaluate prior and posterior on held-out environments.
    Evaluate(Common),
    /// Repeat certification on fresh training sets and count bound violations.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = pipeline::MIN_TRIALS)]
        trials: usize,
    },
    /// Print the summary table of a run directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(short, long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override N, the number of training environments.
    #[arg(long)]
    n_envs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.finetune.n_epochs = e;
        }
        if let Some(n) = self.n_envs {
            cfg.bound.n_envs = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Demos(c) => {
            let cfg = c.load()?;
            let demos = pipeline::demos_stage(&cfg)?;
            println!(
                "wrote {} demonstrations to {}",
                demos.len(),
                cfg.output_dir.join(files::DEMOS).display()
            );
        }
        Command::Clone(c) => {
            let cfg = c.load()?;
            let clone = pipeline::clone_stage(&cfg)?;
            if let Some(last) = clone.log.last() {
                println!(
                    "cloned {} demonstrations: reconstruction {:.4}, kl {:.4}",
                    clone.n_demos, last.reconstruction, last.kl
                );
            }
        }
        Command::Finetune(c) => {
            let cfg = c.load()?;
            let (_, post) = pipeline::finetune_stage(&cfg)?;
            print_json(&post.posterior)?;
            println!("kl(posterior || prior) = {:.6}", post.kl);
        }
        Command::Certify(c) => {
            let cfg = c.load()?;
            let (cert, paths) = pipeline::run_certification(&cfg)?;
            print_json(&cert)?;
            println!("certificate written to {}", paths.certificate.display());
        }
        Command::Evaluate(c) => {
            let cfg = c.load()?;
            let eval = pipeline::evaluate_stage(&cfg)?;
            println!(
                "prior success {:.4}, posterior success {:.4} on {} test environments",
                eval.prior.success_rate, eval.posterior.success_rate, cfg.eval.n_test
            );
        }
        Command::Validate { common, trials } => {
            let cfg = common.load()?;
            let summary = pipeline::validate_bound(&cfg, trials)?;
            println!(
                "{} violations in {} trials (frequency {:.3}); median guaranteed success {:.4}",
                summary.violations,
                summary.trials.len(),
                summary.violation_frequency,
                summary.median_guaranteed_success
            );
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            let text = pipeline::report(&cfg.output_dir)?;
            pipeline::write_atomic(&cfg.output_dir.join(files::REPORT), text.as_bytes())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
