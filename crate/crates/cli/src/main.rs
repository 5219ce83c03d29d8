use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rins_core::corpus::{Corpus, GrammarSpec};
use rins_core::eval::ScoreMode;
use rins_lab::error::{LabError, Result};
use rins_lab::evaluate::{cmd_eval, EvalOptions, TokenizerKind};
use rins_lab::fit::{cmd_fit, FitOptions, PointSelection};
use rins_lab::report::{cmd_report, summary, ReportOptions};
use rins_lab::run::{cmd_run, RunOptions};
use rins_lab::spec::{DEFAULT_DEPTH_CAP, DEFAULT_NONTERMINALS, DEFAULT_TERMINAL_VOCAB};
use rins_lab::sweep::{cmd_sweep, SweepOptions};

/// Compute-matched experiments with recursive parameter-sharing transformers.
///
/// Exit status: 0 on success, 2 for config errors, 3 for runtime failures.
/// Run directories are created under $LABCTL_OUT (default ./runs).
#[derive(Parser)]
#[command(name = "labctl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run spec (resuming an unfinished run in the same directory).
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a run directory that belongs to a different config.
        #[arg(long)]
        force: bool,
    },
    /// Run every candidate of a sweep file.
    Sweep {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent runs to train concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Resolve candidates and matched step counts without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Fit eval loss against compute for runs (or a points CSV).
    Fit {
        runs: Vec<PathBuf>,
        /// CSV with x and loss columns (and optionally series) instead of runs.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PointSelection::Stable)]
        select: PointSelection,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained run on multiple-choice tasks or held-out corpora.
    Eval {
        run: PathBuf,
        /// JSONL task file; repeatable.
        #[arg(long)]
        tasks: Vec<PathBuf>,
        /// Token corpus (.bin with sidecar, or .txt); repeatable.
        #[arg(long)]
        heldout: Vec<PathBuf>,
        /// Comma-separated round counts.
        #[arg(long, value_delimiter = ',')]
        rounds: Vec<usize>,
        #[arg(long, value_enum)]
        tokenizer: Option<TokenizerKind>,
        #[arg(long, value_enum, default_value_t = Score::PerToken)]
        score: Score,
        #[arg(long)]
        mask_reset: bool,
    },
    /// Comparison table, curves, fits and pattern checks over runs.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PointSelection::Stable)]
        select: PointSelection,
    },
    /// Write a token corpus file (with JSON sidecar).
    Corpus {
        #[command(subcommand)]
        kind: CorpusCmd,
    },
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Sample a random grammar.
    Grammar {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NONTERMINALS)]
        nonterminals: usize,
        #[arg(long, default_value_t = DEFAULT_TERMINAL_VOCAB)]
        vocab: u32,
        #[arg(long, default_value_t = DEFAULT_DEPTH_CAP)]
        depth_cap: usize,
        /// Also write this many tail tokens to a held-out file.
        #[arg(long, requires = "heldout_out")]
        heldout_tokens: Option<usize>,
        #[arg(long)]
        heldout_out: Option<PathBuf>,
    },
    /// Byte-tokenize a text file (documents split on blank lines).
    Text {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Score {
    PerToken,
    Total,
    FullSequence,
}

fn corpus(kind: CorpusCmd) -> Result<()> {
    match kind {
        CorpusCmd::Grammar {
            out,
            tokens,
            seed,
            nonterminals,
            vocab,
            depth_cap,
            heldout_tokens,
            heldout_out,
        } => {
            let g = GrammarSpec::random(nonterminals, vocab, depth_cap, seed);
            g.validate().map_err(|e| LabError::field("grammar", e))?;
            let held = heldout_tokens.unwrap_or(0);
            let all = Corpus::from_grammar(&g, tokens + held).map_err(LabError::runtime)?;
            let (train, tail) = all.split_tail(held as f64 / all.tokens.len() as f64);
            train.save(&out).map_err(LabError::runtime)?;
            if let Some(p) = heldout_out {
                tail.save(&p).map_err(LabError::runtime)?;
            }
            println!(
                "{} tokens, {} documents; derivation entropy bound {:.4} nats/token",
                train.meta.n_tokens,
                train.meta.n_docs,
                g.derivation_entropy_per_token()
            );
        }
        CorpusCmd::Text { input, out } => {
            let c = Corpus::load(&input).map_err(|e| LabError::Config(e.to_string()))?;
            c.save(&out).map_err(LabError::runtime)?;
            println!("{} tokens, {} documents", c.meta.n_tokens, c.meta.n_docs);
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { spec, out, force } => {
            let s = cmd_run(&spec, &RunOptions { out, force })?;
            let m = &s.manifest;
            println!(
                "{} {} in {}: {} steps, compute {} (expected {}), trace {}",
                m.name,
                m.status.as_str(),
                s.dir.display(),
                m.steps_done,
                m.realized_compute,
                m.expected_compute,
                m.trace_sha256.as_deref().unwrap_or("-")
            );
            if !m.status.is_terminal() || m.status != rins_lab::run::RunStatus::Completed {
                return Err(LabError::runtime(format!("run ended with status {}", m.status.as_str())));
            }
        }
        Cmd::Sweep { file, out, jobs, dry_run } => {
            let m = cmd_sweep(&file, &SweepOptions { out, jobs, dry_run })?;
            for r in &m.runs {
                println!(
                    "{:<24} {:<10} {}",
                    r.name,
                    r.status,
                    r.total_steps.map(|s| format!("{s} steps")).or(r.reason.clone()).unwrap_or_default()
                );
            }
            if m.failures() > 0 {
                return Err(LabError::runtime(format!("{} of {} runs failed", m.failures(), m.runs.len())));
            }
        }
        Cmd::Fit { runs, points, select, out } => {
            let r = cmd_fit(&runs, &FitOptions { out, selection: select, points })?;
            print!("{}", rins_lab::fit::fits_csv(&r));
            if let Some(f) = &r.family {
                print!("{}", f.optimal.breakpoints_csv());
            }
        }
        Cmd::Eval {
            run,
            tasks,
            heldout,
            rounds,
            tokenizer,
            score,
            mask_reset,
        } => {
            let score = match score {
                Score::PerToken => ScoreMode::PerToken,
                Score::Total => ScoreMode::Total,
                Score::FullSequence => ScoreMode::FullSequence,
            };
            let res = cmd_eval(
                &run,
                &EvalOptions {
                    tasks,
                    heldout,
                    rounds,
                    tokenizer,
                    score,
                    mask_reset,
                },
            )?;
            for r in &res.mcq {
                println!("{} r={} accuracy {:.4} ({} items)", r.task, r.rounds, r.accuracy, r.n_items);
            }
            for h in &res.heldout {
                println!("{} r={} loss {:.4}", h.corpus, h.rounds, h.loss);
            }
        }
        Cmd::Report { runs, out, select } => {
            let r = cmd_report(&runs, &ReportOptions { out, selection: select })?;
            print!("{}", summary(&r));
        }
        Cmd::Corpus { kind } => corpus(kind)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("labctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
