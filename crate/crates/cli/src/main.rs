use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbook_cli::{
    cmd_eval, cmd_finetune, cmd_partition, cmd_pretrain, cmd_report, cmd_synth, cmd_verify, CliError, Overrides, RunConfig,
};

#[derive(Parser)]
#[command(name = "fedbook", version, about = "Federated graph codebook pre-training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// fedbook, fedavg, no-phase1 or no-phase2.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Weight of a token's own value in the within-domain update.
    #[arg(long, global = true)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-domain client datasets.
    Synth,
    /// Split an on-disk dataset into per-domain clients.
    Partition,
    /// Federated pre-training; writes rounds.csv and checkpoint.bin.
    Pretrain,
    /// Fit task heads on a frozen backbone.
    Finetune,
    /// Score fitted heads on held-out instances; writes metrics.csv.
    Eval,
    /// Run the oracle and invariant suite.
    Verify,
    /// Summarize a run directory.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out,
        scheme: cli.scheme,
        lambda: cli.lambda,
    });
    cfg.validate()?;
    match cli.command {
        Command::Synth => println!("{}", cmd_synth(&cfg)?.display()),
        Command::Partition => println!("{}", cmd_partition(&cfg)?.display()),
        Command::Pretrain => {
            let outcome = cmd_pretrain(&cfg)?;
            for r in &outcome.reports {
                println!("round {} {} mean loss {:.6}", r.round, r.diagnostics.kind.as_str(), r.mean_loss());
            }
        }
        Command::Finetune => {
            for c in cmd_finetune(&cfg)? {
                let last = c.result.val_trace.last().map_or("-".into(), |v| format!("{v:.4}"));
                println!("client {} lr {} validation {last}", c.client_id, c.lr);
            }
        }
        Command::Eval => {
            for r in cmd_eval(&cfg)? {
                println!("client {} {} {:.4}", r.client_id, r.metric, r.value);
            }
        }
        Command::Verify => {
            let report = cmd_verify(&cfg)?;
            println!("{report}");
            if !report.all_passed() {
                return Err(CliError::Verification("at least one check failed".into()));
            }
        }
        Command::Report => print!("{}", cmd_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
