use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lyapdet::pipeline::{self, Command, Options};

/// Lyapunov-spectrum features and adversarial-input detectors for images.
#[derive(Debug, Parser)]
#[command(name = "lyapdet", version)]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true, default_value = "lyapdet.json")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of leading exponents used as features.
    #[arg(long, global = true)]
    feature_dim: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Lyapunov spectra of every image in the listed datasets.
    Exponents,
    /// Fit a detector on feature rows.
    Train,
    /// Score feature rows with a saved detector.
    Score,
    /// Write a noisy copy of a dataset.
    Perturb,
    /// Train a softmax victim and write FGSM images.
    AttackFgsm,
    /// Leave-one-attack-out evaluation of the logistic detector.
    EvalLoao,
    /// PCA projection of feature rows.
    Scatter,
    /// Detection rates, AUROC and bootstrap interval from a scores file.
    Report,
}

impl From<&Cmd> for Command {
    fn from(c: &Cmd) -> Self {
        match c {
            Cmd::Exponents => Command::Exponents,
            Cmd::Train => Command::Train,
            Cmd::Score => Command::Score,
            Cmd::Perturb => Command::Perturb,
            Cmd::AttackFgsm => Command::AttackFgsm,
            Cmd::EvalLoao => Command::EvalLoao,
            Cmd::Scatter => Command::Scatter,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let opts = Options {
        config: cli.config,
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
        feature_dim: cli.feature_dim,
    };
    let command = Command::from(&cli.command);
    match pipeline::run(command, &opts) {
        Ok(outcome) => {
            for f in &outcome.manifest.outputs {
                log::debug!("wrote {}", f.path);
            }
            if !outcome.ledger.is_empty() {
                log::warn!(
                    "{command}: {} image(s) failed, see {}/errors-{command}.json",
                    outcome.ledger.len(),
                    outcome.out_dir.display()
                );
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            log::error!("{command}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
