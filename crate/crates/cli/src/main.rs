//! Command-line front end for continual compositional zero-shot runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cczsl_cli::{
    compare_dirs, eval_dump, execute_run, load_config, validate_source, CliError, SplitSource,
};
use cczsl_core::model::SawMode;

#[derive(Parser)]
#[command(name = "cczsl", version, about = "continual compositional zero-shot learning runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full protocol run and write an artifact directory.
    Run(RunArgs),
    /// Diff the metrics of two completed runs over the same split.
    Compare {
        /// First run directory (the baseline).
        a: PathBuf,
        /// Second run directory.
        b: PathBuf,
    },
    /// Check a split source against the protocol rules.
    ValidateSplits {
        /// Split source: `table:NAME` or `file:PATH`.
        source: String,
    },
    /// Re-score a stored prediction dump, optionally checking it against
    /// the run's summary bit for bit.
    EvalDump {
        /// Run directory holding the dump.
        #[arg(long)]
        run: PathBuf,
        /// Session whose accumulated dump to score.
        #[arg(long)]
        session: usize,
        /// Fail unless the recomputed metrics equal the stored ones.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory; defaults to the config's `out_dir` or `./run`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing artifact directory.
    #[arg(long)]
    force: bool,
    /// Split source override: `table:NAME` or `file:PATH`.
    #[arg(long)]
    splits: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Embedding width.
    #[arg(long)]
    d: Option<usize>,
    /// Fusion mode: off, tail-only, update-both, freeze-head.
    #[arg(long)]
    saw_mode: Option<String>,
    /// Drop the distillation loss.
    #[arg(long)]
    no_cskd: bool,
    /// Drop the attention-anchoring loss.
    #[arg(long)]
    no_cal: bool,
    /// Drop the head/tail orthogonality loss.
    #[arg(long)]
    no_opl: bool,
    /// Drop the within-tail decorrelation loss.
    #[arg(long)]
    no_idl: bool,
    /// Skip writing per-session checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

fn parse_saw_mode(s: &str) -> Result<SawMode, CliError> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        CliError::Config {
            detail: format!(
                "unknown fusion mode {s:?}; expected off, tail-only, update-both or freeze-head"
            ),
        }
    })
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(flag) = &args.splits {
        config.splits = SplitSource::from_flag(flag)?;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.lr {
        config.train.lr = v;
    }
    if let Some(v) = args.batch {
        config.train.batch = v;
    }
    if let Some(v) = args.d {
        config.train.d = v;
    }
    if let Some(s) = &args.saw_mode {
        config.train.saw_mode = parse_saw_mode(s)?;
    }
    config.ablation.cskd &= !args.no_cskd;
    config.ablation.cal &= !args.no_cal;
    config.ablation.opl &= !args.no_opl;
    config.ablation.idl &= !args.no_idl;
    config.checkpoints &= !args.no_checkpoints;

    let out = args
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    let summary = execute_run(&config, &out, args.force)?;

    println!("run complete: {}", out.display());
    println!("split {} (digest {:016x})", summary.split_label, summary.split_digest);
    for s in &summary.sessions {
        println!(
            "session {}: auc {:.4}, hm {:.4}, unseen {:.4}",
            s.session, s.czs.auc, s.czs.hm, s.czs.best_unseen
        );
    }
    if let Some(f) = &summary.forgetting {
        println!("f-auc {:.6} (lower is better)", f.f_auc);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare { a, b } => compare_dirs(&a, &b).map(|report| {
            print!("{}", report.render());
        }),
        Command::ValidateSplits { source } => SplitSource::from_flag(&source)
            .and_then(|s| validate_source(&s))
            .map(|text| print!("{text}")),
        Command::EvalDump { run, session, check } => {
            eval_dump(&run, session, check).map(|report| {
                print!("{}", cczsl_cli::render_report("czs", &report));
                if check {
                    println!("check passed: dump reproduces the stored metrics bit for bit");
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
