//! `labctl eval`: multiple-choice accuracy and held-out loss of a trained
//! run at chosen recursion rounds.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rins_core::corpus::{ByteTokenizer, Corpus};
use rins_core::eval::{eval_mcq, read_tasks, EvalRecord, IdTokenizer, ScoreMode, Tokenize};
use rins_core::model::checkpoint::Checkpoint;
use rins_core::train::{eval_loss, EvalSet};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::run::{read_manifest, CHECKPOINT};
use crate::store::{create_dir, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TokenizerKind {
    /// UTF-8 bytes, EOS 256.
    Byte,
    /// Whitespace-separated integer ids.
    Ids,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub tasks: Vec<PathBuf>,
    pub heldout: Vec<PathBuf>,
    /// Defaults to every round the run was evaluated at during training.
    pub rounds: Vec<usize>,
    /// Defaults to the run's corpus tokenizer.
    pub tokenizer: Option<TokenizerKind>,
    pub score: ScoreMode,
    pub mask_reset: bool,
}

/// Held-out log-perplexity of one corpus at one round count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutRecord {
    pub corpus: String,
    pub rounds: usize,
    pub loss: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub mcq: Vec<EvalRecord>,
    pub heldout: Vec<HeldoutRecord>,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "task".into())
}

/// Scores the run's latest checkpoint and writes
/// `<run>/evals/<task>.jsonl` per task file and `<run>/evals/heldout.jsonl`.
pub fn cmd_eval(run_dir: &Path, opts: &EvalOptions) -> Result<EvalResults> {
    if opts.tasks.is_empty() && opts.heldout.is_empty() {
        return Err(LabError::Config("eval needs --tasks or --heldout".into()));
    }
    let manifest = read_manifest(run_dir)?;
    let ck = Checkpoint::load(&run_dir.join(CHECKPOINT)).map_err(LabError::runtime)?;
    let model = ck.to_model().map_err(LabError::runtime)?;
    let rounds = if opts.rounds.is_empty() { manifest.eval_rounds.clone() } else { opts.rounds.clone() };
    for &r in &rounds {
        model.route(r).map_err(|e| LabError::field("rounds", e))?;
    }
    let kind = opts.tokenizer.unwrap_or(match manifest.train_data.tokenizer.as_str() {
        "byte" => TokenizerKind::Byte,
        _ => TokenizerKind::Ids,
    });
    let ids = IdTokenizer { eos: manifest.train_data.eos };
    let tok: &dyn Tokenize = match kind {
        TokenizerKind::Byte => &ByteTokenizer,
        TokenizerKind::Ids => &ids,
    };
    let out_dir = run_dir.join("evals");
    create_dir(&out_dir)?;
    let mut results = EvalResults::default();
    for path in &opts.tasks {
        let f = fs::File::open(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let items = read_tasks(BufReader::new(f)).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let task = stem(path);
        let mut records = Vec::new();
        for &r in &rounds {
            let rep = eval_mcq(&model, tok, &items, r, opts.score).map_err(LabError::runtime)?;
            log::info!("{task} @r{r}: accuracy {:.4} over {} items", rep.accuracy, rep.n_items);
            records.push(EvalRecord {
                task: task.clone(),
                rounds: r,
                accuracy: rep.accuracy,
                n_items: rep.n_items,
            });
        }
        write_jsonl(&out_dir.join(format!("{task}.jsonl")), &records)?;
        results.mcq.extend(records);
    }
    for path in &opts.heldout {
        let corpus = Corpus::load(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let name = stem(path);
        let set = EvalSet::from_tokens(&name, &corpus.tokens, corpus.meta.eos, model.dims.seq_len, usize::MAX)
            .map_err(LabError::runtime)?;
        for &r in &rounds {
            let loss = eval_loss(&model, &set, r, opts.mask_reset).map_err(LabError::runtime)?;
            log::info!("{name} @r{r}: loss {loss:.4}");
            results.heldout.push(HeldoutRecord {
                corpus: name.clone(),
                rounds: r,
                loss,
                rows: set.rows.len(),
            });
        }
    }
    if !results.heldout.is_empty() {
        write_jsonl(&out_dir.join("heldout.jsonl"), &results.heldout)?;
    }
    Ok(results)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    rins_core::eval::write_jsonl(rows, &mut buf).map_err(LabError::runtime)?;
    write_atomic(path, &buf)
}
