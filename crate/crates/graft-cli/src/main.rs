use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graft::error::Error;
use graft_cli::commands::{
    cmd_eval, cmd_gen_data, cmd_prune, cmd_train, default_out_dir, out_root, StageSel,
};
use graft_cli::config::RunConfig;
use graft_cli::ledger::{Ledger, LedgerRecord};
use graft_cli::suites::{run_suite, SuiteKind};

/// Multimodal re-identification with gradual fusion tokens: synthetic data
/// generation, two-stage training, retrieval evaluation, magnitude pruning
/// and ablation suites.
#[derive(Parser)]
#[command(name = "graft", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $GRAFT_OUT_DIR/<command>-<hash> or
    /// ./runs/<command>-<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train (warmstart + stage one + stage two by default) and evaluate.
    Train {
        #[command(flatten)]
        common: Common,
        /// Which stage(s) to run: 1, 2 or both.
        #[arg(long, default_value = "both")]
        stage: String,
        /// Resume a single stage from its checkpoint bundle directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Allow stage two without a stage-one checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate a checkpoint on the configured query/gallery split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Proceed despite a checkpoint/config hash mismatch.
        #[arg(long)]
        force: bool,
    },
    /// Iterative magnitude pruning with fine-tuning, from a checkpoint.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run an ablation suite: fusion | triplet-scheme | modalities |
    /// token-index.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: String,
    },
    /// Print a fully defaulted example configuration.
    ExampleConfig,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Data(_) => 3,
        Error::Divergence { .. } | Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn load_resolved(common: &Common) -> Result<RunConfig, Error> {
    RunConfig::from_path(&common.config)?.resolve(common.seed)
}

fn resolve_out(common: &Common, command: &str, cfg: &RunConfig) -> Result<PathBuf, Error> {
    match &common.out {
        Some(p) => Ok(p.clone()),
        None => Ok(default_out_dir(command, &cfg.hash()?)),
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let ledger = Ledger::at_root(&out_root());
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = load_resolved(&common)?;
            let out = resolve_out(&common, "gen-data", &cfg)?;
            cmd_gen_data(&cfg, &out, force, &ledger)
        }
        Command::Train {
            common,
            stage,
            resume,
            from_scratch,
        } => {
            let cfg = load_resolved(&common)?;
            let out = resolve_out(&common, "train", &cfg)?;
            let sel = match stage.as_str() {
                "1" | "one" => StageSel::One,
                "2" | "two" => StageSel::Two,
                "both" => StageSel::Both,
                other => {
                    return Err(Error::config(format!(
                        "--stage must be 1, 2 or both (got {other:?})"
                    )))
                }
            };
            cmd_train(&cfg, &out, sel, resume.as_deref(), from_scratch, &ledger).map(|_| ())
        }
        Command::Eval {
            common,
            checkpoint,
            force,
        } => {
            let cfg = load_resolved(&common)?;
            let out = resolve_out(&common, "eval", &cfg)?;
            cmd_eval(&cfg, &checkpoint, &out, force, &ledger).map(|_| ())
        }
        Command::Prune {
            common,
            checkpoint,
            force,
        } => {
            let cfg = load_resolved(&common)?;
            let out = resolve_out(&common, "prune", &cfg)?;
            cmd_prune(&cfg, &checkpoint, &out, force, &ledger).map(|_| ())
        }
        Command::Ablate { common, suite } => {
            let cfg = load_resolved(&common)?;
            let kind = SuiteKind::parse(&suite)?;
            let out = resolve_out(&common, &format!("ablate-{}", kind.name()), &cfg)?;
            let report = run_suite(kind, &cfg, &[cfg.seed])?;
            std::fs::create_dir_all(&out)?;
            cfg.write_resolved(&out)?;
            let csv = report.to_csv();
            std::fs::write(out.join(format!("{}.csv", kind.name())), &csv)?;
            print!("{csv}");
            for (k, v) in &report.notes {
                println!("# {k} = {v}");
            }
            let hash = cfg.hash()?;
            for cell in &report.cells {
                let mut rec = LedgerRecord::new(
                    &format!("ablate-{}", kind.name()),
                    &hash,
                    cfg.seed,
                    &out,
                );
                rec.extra.insert("label".into(), cell.label.clone());
                if let Some(m) = &cell.mean {
                    rec.metrics.insert("map".into(), m.map);
                    rec.metrics.insert("r1".into(), m.r1);
                    rec.metrics.insert("r5".into(), m.r5);
                    rec.metrics.insert("r10".into(), m.r10);
                }
                if let Some(e) = &cell.error {
                    rec.extra.insert("error".into(), e.clone());
                }
                ledger.append(&rec)?;
            }
            Ok(())
        }
        Command::ExampleConfig => {
            print!("{}", RunConfig::example().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
