//! Zero-shot multiple-choice scoring by answer log-perplexity.

use std::fmt;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sample_document, ByteTokenizer, CorpusError, GrammarSpec};
use crate::model::{ModelError, RecursiveModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{item}: {message}")]
    Item { item: String, message: String },
    #[error("{item}: {len} tokens exceed the context of {max}")]
    Overflow { item: String, len: usize, max: usize },
    #[error("no items to evaluate")]
    Empty,
    #[error("{item}: {source}")]
    Model {
        item: String,
        #[source]
        source: ModelError,
    },
    #[error("task file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStyle {
    #[default]
    Plain,
    Boolq,
    Piqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub context: String,
    #[serde(default)]
    pub prefix: String,
    pub options: Vec<String>,
    pub gold_index: usize,
    #[serde(default)]
    pub style: TaskStyle,
}

/// Labels an item in diagnostics by position and optional id.
struct ItemLabel<'a>(usize, &'a McqItem);

impl fmt::Display for ItemLabel<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.1.id {
            Some(id) => write!(f, "item {} ({id})", self.0),
            None => write!(f, "item {}", self.0),
        }
    }
}

impl McqItem {
    pub fn validate(&self) -> Result<(), String> {
        if self.options.len() < 2 {
            return Err(format!("needs at least 2 options, has {}", self.options.len()));
        }
        if self.gold_index >= self.options.len() {
            return Err(format!(
                "gold_index {} out of range for {} options",
                self.gold_index,
                self.options.len()
            ));
        }
        Ok(())
    }

    /// Same item with options reordered so that new option `i` is old
    /// option `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> McqItem {
        McqItem {
            options: perm.iter().map(|&i| self.options[i].clone()).collect(),
            gold_index: perm.iter().position(|&i| i == self.gold_index).expect("permutation"),
            ..self.clone()
        }
    }
}

/// A rendered option: the conditioning prompt and the scored continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub prompt: String,
    pub continuation: String,
}

impl Rendered {
    pub fn text(&self) -> String {
        format!("{}{}", self.prompt, self.continuation)
    }
}

/// Instantiates the item's template for one option.
///
/// - plain: `context prefix option`, space separated, empty parts omitted
/// - boolq: `{passage} Based on this, the answer to the question: {question}, is: {answer}`
/// - piqa: `The goal is: {goal} The solution is: {sol}.`
pub fn render_template(style: TaskStyle, item: &McqItem, option: usize) -> Result<Rendered, String> {
    let answer = item
        .options
        .get(option)
        .ok_or_else(|| format!("option {option} out of range"))?;
    let require = |field: &str, value: &str| {
        if value.is_empty() {
            Err(format!("{style:?} template needs a non-empty {field}"))
        } else {
            Ok(())
        }
    };
    Ok(match style {
        TaskStyle::Plain => {
            let prompt = [item.context.as_str(), item.prefix.as_str()]
                .iter()
                .filter(|s| !s.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join(" ");
            let continuation = if prompt.is_empty() {
                answer.clone()
            } else {
                format!(" {answer}")
            };
            Rendered { prompt, continuation }
        }
        TaskStyle::Boolq => {
            require("context (passage)", &item.context)?;
            require("prefix (question)", &item.prefix)?;
            Rendered {
                prompt: format!(
                    "{} Based on this, the answer to the question: {}, is:",
                    item.context, item.prefix
                ),
                continuation: format!(" {answer}"),
            }
        }
        TaskStyle::Piqa => {
            require("prefix (goal)", &item.prefix)?;
            Rendered {
                prompt: format!("The goal is: {} The solution is:", item.prefix),
                continuation: format!(" {answer}."),
            }
        }
    })
}

/// Text to token ids, plus the id prepended as beginning-of-sequence.
pub trait Tokenize {
    fn encode(&self, text: &str) -> Result<Vec<u32>, String>;
    fn bos(&self) -> u32;
}

impl Tokenize for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, String> {
        Ok(ByteTokenizer::encode(self, text))
    }

    fn bos(&self) -> u32 {
        ByteTokenizer::EOS
    }
}

/// Whitespace-separated decimal token ids, for tasks built on id-level corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdTokenizer {
    pub eos: u32,
}

impl Tokenize for IdTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, String> {
        text.split_whitespace()
            .map(|w| w.parse::<u32>().map_err(|_| format!("{w:?} is not a token id")))
            .collect()
    }

    fn bos(&self) -> u32 {
        self.eos
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Mean negative log-likelihood of the answer tokens.
    #[default]
    PerToken,
    /// Summed negative log-likelihood of the answer tokens.
    Total,
    /// Mean negative log-likelihood of every token after BOS.
    FullSequence,
}

fn score_at(
    model: &RecursiveModel,
    tok: &dyn Tokenize,
    item: &McqItem,
    label: &ItemLabel<'_>,
    option: usize,
    rounds: usize,
    mode: ScoreMode,
) -> Result<f64, EvalError> {
    let item_err = |message: String| EvalError::Item {
        item: label.to_string(),
        message,
    };
    let r = render_template(item.style, item, option).map_err(item_err)?;
    let mut seq = vec![tok.bos()];
    seq.extend(tok.encode(&r.prompt).map_err(item_err)?);
    let answer_start = seq.len();
    seq.extend(tok.encode(&r.continuation).map_err(item_err)?);
    if seq.len() == answer_start {
        return Err(item_err(format!("option {option} renders to no tokens")));
    }
    let len = seq.len() - 1;
    if len > model.dims.seq_len {
        return Err(EvalError::Overflow {
            item: label.to_string(),
            len,
            max: model.dims.seq_len,
        });
    }
    let logits = model.forward(&seq[..len], rounds).map_err(|source| EvalError::Model {
        item: label.to_string(),
        source,
    })?;
    // Target at input position t is seq[t + 1].
    let first = match mode {
        ScoreMode::FullSequence => 0,
        _ => answer_start - 1,
    };
    let nll: f64 = (first..len).map(|t| -logits.log_prob(t, seq[t + 1])).sum();
    Ok(match mode {
        ScoreMode::Total => nll,
        _ => nll / (len - first) as f64,
    })
}

/// Score of one option (lower is better); only the option's tokens count
/// unless `mode` says otherwise.
pub fn score_option(
    model: &RecursiveModel,
    tok: &dyn Tokenize,
    item: &McqItem,
    option: usize,
    rounds: usize,
    mode: ScoreMode,
) -> Result<f64, EvalError> {
    score_at(model, tok, item, &ItemLabel(0, item), option, rounds, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqReport {
    pub accuracy: f64,
    pub n_items: usize,
    pub predictions: Vec<usize>,
}

/// Accuracy of picking the lowest-scoring option (ties go to the lowest index).
pub fn eval_mcq(
    model: &RecursiveModel,
    tok: &dyn Tokenize,
    items: &[McqItem],
    rounds: usize,
    mode: ScoreMode,
) -> Result<McqReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut predictions = Vec::with_capacity(items.len());
    let mut correct = 0;
    for (i, item) in items.iter().enumerate() {
        let label = ItemLabel(i, item);
        item.validate().map_err(|message| EvalError::Item {
            item: label.to_string(),
            message,
        })?;
        let mut best = (0, f64::INFINITY);
        for o in 0..item.options.len() {
            let s = score_at(model, tok, item, &label, o, rounds, mode)?;
            if s < best.1 {
                best = (o, s);
            }
        }
        correct += usize::from(best.0 == item.gold_index);
        predictions.push(best.0);
    }
    Ok(McqReport {
        accuracy: correct as f64 / items.len() as f64,
        n_items: items.len(),
        predictions,
    })
}

/// One line of an eval results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub rounds: usize,
    pub accuracy: f64,
    pub n_items: usize,
}

pub fn read_tasks<R: BufRead>(r: R) -> Result<Vec<McqItem>, EvalError> {
    let mut items = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: McqItem = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        item.validate().map_err(|message| EvalError::Parse { line: i + 1, message })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_jsonl<T: Serialize, W: Write>(rows: &[T], mut w: W) -> io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn ids(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Copy items over id tokens: the context is a random sequence, the prefix
/// repeats its first half and the gold option repeats the rest. Distractors
/// are random sequences of the same length.
pub fn copy_task(n_items: usize, len: usize, vocab: u32, n_options: usize, seed: u64) -> Vec<McqItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = len / 2;
    (0..n_items)
        .map(|i| {
            let s: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
            let gold = rng.random_range(0..n_options);
            let options = (0..n_options)
                .map(|o| {
                    if o == gold {
                        ids(&s[half..])
                    } else {
                        ids(&(half..len).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>())
                    }
                })
                .collect();
            McqItem {
                id: Some(format!("copy-{i}")),
                context: ids(&s),
                prefix: ids(&s[..half]),
                options,
                gold_index: gold,
                style: TaskStyle::Plain,
            }
        })
        .collect()
}

/// Grammar-consistency items: the gold option is the true continuation of
/// a sampled document; distractors replace its tokens with uniformly random
/// terminals.
pub fn grammar_task(
    spec: &GrammarSpec,
    n_items: usize,
    prompt_len: usize,
    answer_len: usize,
    n_options: usize,
    seed: u64,
) -> Result<Vec<McqItem>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_items);
    let mut attempts = 0;
    while items.len() < n_items {
        attempts += 1;
        if attempts > 1000 * n_items.max(1) {
            return Err(EvalError::Item {
                item: "grammar task".into(),
                message: format!("grammar rarely yields documents of {} tokens", prompt_len + answer_len),
            });
        }
        let doc = sample_document(spec, &mut rng)?;
        if doc.len() < prompt_len + answer_len {
            continue;
        }
        let gold_seq = &doc[prompt_len..prompt_len + answer_len];
        let gold = rng.random_range(0..n_options);
        let options = (0..n_options)
            .map(|o| {
                if o == gold {
                    ids(gold_seq)
                } else {
                    let fake: Vec<u32> = (0..answer_len).map(|_| rng.random_range(0..spec.terminal_vocab)).collect();
                    ids(&fake)
                }
            })
            .collect();
        items.push(McqItem {
            id: Some(format!("grammar-{}", items.len())),
            context: String::new(),
            prefix: ids(&doc[..prompt_len]),
            options,
            gold_index: gold,
            style: TaskStyle::Plain,
        });
    }
    Ok(items)
}
