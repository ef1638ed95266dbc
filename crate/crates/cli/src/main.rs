use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scorp_cli::{
    cmd_ablate, cmd_case, cmd_ensemble, cmd_eval, cmd_predict, cmd_prepare, cmd_spwe, cmd_train, RunConfig,
};

/// Sememe prediction from dictionary definitions.
///
/// Settings come from built-in defaults, then `SCORP_SEED`, then `--config`,
/// then `--set key=value` pairs, then the explicit flags below.
#[derive(Parser, Debug)]
#[command(name = "scorp", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Master seed (defaults to $SCORP_SEED, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model mode, e.g. `mc`, `scorp +tw +se`, `scorp pool=mean`.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Name used for checkpoint, log and report files.
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the sememe inventory and the tagged dataset manifest.
    Prepare,
    /// Train one mode, keeping the best validation-MAP checkpoint.
    Train {
        /// Continue from `{run}.ckpt` when it exists.
        #[arg(long)]
        resume: bool,
        /// Train on `y·σ(x) + (1−y)·σ(−x)` without logarithms (same as
        /// `literal_loss = true`); for comparison experiments only.
        #[arg(long)]
        paper_literal_loss: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        ck: CheckpointArg,
        /// Bucketed MAP rows: `freq`, `oov` or `freq,oov`.
        #[arg(long)]
        buckets: Option<String>,
    },
    /// Rank sememes for one word and its definition.
    Predict {
        #[command(flatten)]
        ck: CheckpointArg,
        #[arg(long)]
        word: String,
        /// Whitespace-separated definition tokens.
        #[arg(long)]
        definition: String,
        #[arg(long)]
        top_k: Option<usize>,
        /// Also print the correspondence table.
        #[arg(long)]
        explain: bool,
    },
    /// Train and evaluate a list of modes into one table.
    Ablate {
        /// Comma-separated modes.
        #[arg(long)]
        modes: Option<String>,
    },
    /// Combine two score dumps by weighted addition.
    Ensemble {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        lambda_a: Option<f64>,
        #[arg(long)]
        lambda_b: Option<f64>,
        /// Add raw scores instead of standardized ones.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print correspondence case-study tables for dataset words.
    Case {
        #[command(flatten)]
        ck: CheckpointArg,
        /// Comma-separated words.
        #[arg(long)]
        words: String,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Evaluate the embedding-neighbor baseline.
    Spwe,
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint file (default `{out}/{run}.best.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("out", cli.out.clone());
    push("seed", cli.seed.map(|s| s.to_string()));
    push("mode", cli.mode.clone());
    push("run_name", cli.run_name.clone());
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match &cli.command {
        Command::Prepare | Command::Spwe => {}
        Command::Train {
            resume,
            paper_literal_loss,
        } => {
            push("resume", Some(resume.to_string()));
            if *paper_literal_loss {
                push("literal_loss", Some("true".into()));
            }
        }
        Command::Eval { ck, buckets } => {
            push("checkpoint", path(&ck.checkpoint));
            push("buckets", buckets.clone());
        }
        Command::Predict {
            ck,
            word,
            definition,
            top_k,
            explain,
        } => {
            push("checkpoint", path(&ck.checkpoint));
            push("word", Some(word.clone()));
            push("definition", Some(definition.clone()));
            push("top_k", top_k.map(|k| k.to_string()));
            push("explain", Some(explain.to_string()));
        }
        Command::Ablate { modes } => push("modes", modes.clone()),
        Command::Ensemble {
            a,
            b,
            lambda_a,
            lambda_b,
            raw,
            output,
        } => {
            push("ensemble_a", Some(a.display().to_string()));
            push("ensemble_b", Some(b.display().to_string()));
            push("lambda_a", lambda_a.map(|l| l.to_string()));
            push("lambda_b", lambda_b.map(|l| l.to_string()));
            push("raw_ensemble", Some(raw.to_string()));
            push("ensemble_out", path(output));
        }
        Command::Case { ck, words, top_k } => {
            push("checkpoint", path(&ck.checkpoint));
            push("words", Some(words.clone()));
            push("top_k", top_k.map(|k| k.to_string()));
        }
    }
    Ok(out)
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    eprintln!("error\t{kind}\t{}", msg.replace(['\n', '\t'], " "));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail("usage", first.trim_start_matches("error: "));
        }
    };
    let overrides = match overrides(&cli) {
        Ok(o) => o,
        Err(msg) => return fail("usage", &msg),
    };
    let cfg = match RunConfig::resolve(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => return fail(e.kind(), &e.to_string()),
    };
    let mut stdout = std::io::stdout().lock();
    let result = match cli.command {
        Command::Prepare => cmd_prepare(&cfg, &mut stdout).map(drop),
        Command::Train { .. } => cmd_train(&cfg, &mut stdout).map(drop),
        Command::Eval { .. } => cmd_eval(&cfg, &mut stdout).map(drop),
        Command::Predict { .. } => cmd_predict(&cfg, &mut stdout).map(drop),
        Command::Ablate { .. } => cmd_ablate(&cfg, &mut stdout).map(drop),
        Command::Ensemble { .. } => cmd_ensemble(&cfg, &mut stdout).map(drop),
        Command::Case { .. } => cmd_case(&cfg, &mut stdout).map(drop),
        Command::Spwe => cmd_spwe(&cfg, &mut stdout).map(drop),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
