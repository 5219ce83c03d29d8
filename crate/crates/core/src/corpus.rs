//! Token streams for desk-scale training: a probabilistic context-free
//! grammar generator, a byte-level tokenizer and sequence packing.

use std::collections::VecDeque;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("grammar: {0}")]
    Grammar(String),
    #[error("seq_len must be >= 2, got {0}")]
    SeqLen(usize),
    #[error("batch_size must be >= 1")]
    BatchSize,
    #[error("token {token} is not a byte or EOS")]
    NotAByte { token: u32 },
    #[error("corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corpus sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("corpus file {path} has {len} bytes, not a multiple of 4")]
    Truncated { path: PathBuf, len: usize },
}

/// Right-hand-side symbol of a production: a terminal id or a nonterminal index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GSymbol {
    T(u32),
    N(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Production {
    pub symbols: Vec<GSymbol>,
    pub prob: f64,
}

impl Production {
    fn is_terminal_only(&self) -> bool {
        self.symbols.iter().all(|s| matches!(s, GSymbol::T(_)))
    }
}

/// Probabilistic grammar. Nonterminal `i` rewrites by `rules[i]`.
///
/// Below `depth_cap` nesting levels a nonterminal may only use its
/// terminal-only productions (renormalised); if it has none it emits nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub rules: Vec<Vec<Production>>,
    pub start: usize,
    pub depth_cap: usize,
    pub terminal_vocab: u32,
    pub seed: u64,
}

const PROB_TOL: f64 = 1e-9;

impl GrammarSpec {
    /// Small default grammar: 4 nonterminals, depth cap 8, 64 terminals.
    pub fn default_with_seed(seed: u64) -> Self {
        Self::random(4, 64, 8, seed)
    }

    /// Random grammar with `ALTERNATIVES` productions per nonterminal, each
    /// with 2-3 right-hand-side symbols drawn from the whole terminal
    /// vocabulary. Half the productions are terminal-only; the rest nest
    /// nonterminals (`t N t`, `t N`, `N t`, `N N`, `t N N`), so terminals
    /// after a nested span depend on the enclosing production. Recursive
    /// mass is reduced until the mean offspring matrix has spectral radius
    /// at most `TARGET_RADIUS`.
    pub fn random(nonterminals: usize, terminal_vocab: u32, depth_cap: usize, seed: u64) -> Self {
        const ALTERNATIVES: usize = 16;
        const TARGET_RADIUS: f64 = 0.9;
        assert!(nonterminals >= 1 && terminal_vocab >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_616d);
        let shapes: [&[bool]; 7] = [
            &[false, false],
            &[false, false, false],
            &[false, true, false],
            &[false, true],
            &[true, false],
            &[true, true],
            &[false, true, true],
        ];
        let mut rules: Vec<Vec<Production>> = (0..nonterminals)
            .map(|_| {
                let weights: Vec<f64> = (0..ALTERNATIVES).map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                weights
                    .iter()
                    .enumerate()
                    .map(|(b, w)| {
                        let shape = if b < ALTERNATIVES / 2 {
                            shapes[rng.random_range(0..2)]
                        } else {
                            shapes[rng.random_range(2..shapes.len())]
                        };
                        let symbols = shape
                            .iter()
                            .map(|&is_nt| {
                                if is_nt {
                                    GSymbol::N(rng.random_range(0..nonterminals))
                                } else {
                                    GSymbol::T(rng.random_range(0..terminal_vocab))
                                }
                            })
                            .collect();
                        Production {
                            symbols,
                            prob: w / total,
                        }
                    })
                    .collect()
            })
            .collect();
        while spectral_radius_bound(&mean_matrix(&rules)) > TARGET_RADIUS {
            for prods in rules.iter_mut() {
                for p in prods.iter_mut() {
                    if !p.is_terminal_only() {
                        p.prob *= 0.95;
                    }
                }
                let total: f64 = prods.iter().map(|p| p.prob).sum();
                for p in prods.iter_mut() {
                    p.prob /= total;
                }
            }
        }
        let spec = GrammarSpec {
            rules,
            start: 0,
            depth_cap,
            terminal_vocab,
            seed,
        };
        debug_assert!(spec.validate().is_ok());
        spec
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Grammar(m));
        if self.rules.is_empty() {
            return bad("no nonterminals".into());
        }
        if self.start >= self.rules.len() {
            return bad(format!("start symbol {} out of range", self.start));
        }
        if self.depth_cap < 1 {
            return bad("depth cap must be >= 1".into());
        }
        for (nt, prods) in self.rules.iter().enumerate() {
            if prods.is_empty() {
                return bad(format!("nonterminal {nt} has no productions"));
            }
            let mut sum = 0.0;
            for p in prods {
                if !(p.prob >= 0.0 && p.prob.is_finite()) {
                    return bad(format!("nonterminal {nt}: invalid probability {}", p.prob));
                }
                sum += p.prob;
                for s in &p.symbols {
                    match *s {
                        GSymbol::T(t) if t >= self.terminal_vocab => {
                            return bad(format!("nonterminal {nt}: terminal {t} >= vocab {}", self.terminal_vocab))
                        }
                        GSymbol::N(n) if n >= self.rules.len() => {
                            return bad(format!("nonterminal {nt}: unknown nonterminal {n}"))
                        }
                        _ => {}
                    }
                }
            }
            if (sum - 1.0).abs() > PROB_TOL {
                return bad(format!("nonterminal {nt}: probabilities sum to {sum}"));
            }
        }
        let rho = spectral_radius_bound(&self.mean_matrix());
        if rho >= 1.0 {
            return bad(format!(
                "expected expansion is infinite without the depth cap (branching rate {rho:.4} >= 1)"
            ));
        }
        Ok(())
    }

    /// Upper bound on the entropy rate in nats per token (EOS included):
    /// expected derivation entropy of a document over its expected length,
    /// ignoring the depth cap. Ambiguous grammars have a lower true rate.
    pub fn derivation_entropy_per_token(&self) -> f64 {
        let mut a = self.mean_matrix();
        for (i, row) in a.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v = -*v;
            }
            row[i] += 1.0;
        }
        let mut rhs: Vec<[f64; 2]> = self
            .rules
            .iter()
            .map(|prods| {
                let h: f64 = prods.iter().filter(|p| p.prob > 0.0).map(|p| -p.prob * p.prob.ln()).sum();
                let t: f64 = prods
                    .iter()
                    .map(|p| p.prob * p.symbols.iter().filter(|s| matches!(s, GSymbol::T(_))).count() as f64)
                    .sum();
                [h, t]
            })
            .collect();
        solve_in_place(&mut a, &mut rhs);
        let [h, t] = rhs[self.start];
        h / (t + 1.0)
    }

    /// `m[i][j]` = expected number of `N(j)` produced by one rewrite of `N(i)`.
    pub fn mean_matrix(&self) -> Vec<Vec<f64>> {
        mean_matrix(&self.rules)
    }
}

fn mean_matrix(rules: &[Vec<Production>]) -> Vec<Vec<f64>> {
    let n = rules.len();
    let mut m = vec![vec![0.0; n]; n];
    for (i, prods) in rules.iter().enumerate() {
        for p in prods {
            for s in &p.symbols {
                if let GSymbol::N(j) = *s {
                    m[i][j] += p.prob;
                }
            }
        }
    }
    m
}

/// Gauss-Jordan elimination with partial pivoting; leaves the solution in `rhs`.
fn solve_in_place<const K: usize>(a: &mut [Vec<f64>], rhs: &mut [[f64; K]]) {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("nonempty");
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        let d = a[col][col];
        for row in 0..n {
            if row != col {
                let f = a[row][col] / d;
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                for k in 0..K {
                    rhs[row][k] -= f * rhs[col][k];
                }
            }
        }
    }
    for (row, r) in rhs.iter_mut().enumerate() {
        for v in r.iter_mut() {
            *v /= a[row][row];
        }
    }
}

/// Spectral radius of a nonnegative matrix by Gelfand's formula, using
/// repeated squaring with renormalisation to avoid overflow.
fn spectral_radius_bound(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a = m.to_vec();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..40 {
        let norm = a.iter().map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
        if norm == 0.0 {
            return 0.0;
        }
        for r in a.iter_mut() {
            for v in r.iter_mut() {
                *v /= norm;
            }
        }
        log_scale += norm.ln() / power;
        let mut sq = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i][k];
                if aik != 0.0 {
                    for j in 0..n {
                        sq[i][j] += aik * a[k][j];
                    }
                }
            }
        }
        a = sq;
        power *= 2.0;
    }
    let norm = a.iter().map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
    if norm == 0.0 {
        return 0.0;
    }
    (log_scale + norm.ln() / power).exp()
}

/// Per-nonterminal production samplers, with and without the depth cap.
struct Sampler<'a> {
    spec: &'a GrammarSpec,
    full: Vec<WeightedIndex<f64>>,
    capped: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a GrammarSpec) -> Self {
        let full = spec
            .rules
            .iter()
            .map(|prods| WeightedIndex::new(prods.iter().map(|p| p.prob)).expect("validated probabilities"))
            .collect();
        let capped = spec
            .rules
            .iter()
            .map(|prods| {
                let idx: Vec<usize> = (0..prods.len()).filter(|&i| prods[i].is_terminal_only()).collect();
                let dist = WeightedIndex::new(idx.iter().map(|&i| prods[i].prob)).ok()?;
                Some((idx, dist))
            })
            .collect();
        Sampler { spec, full, capped }
    }

    fn document<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![(GSymbol::N(self.spec.start), 0usize)];
        while let Some((sym, depth)) = stack.pop() {
            match sym {
                GSymbol::T(t) => out.push(t),
                GSymbol::N(n) => {
                    let choice = if depth < self.spec.depth_cap {
                        self.full[n].sample(rng)
                    } else {
                        match &self.capped[n] {
                            Some((idx, dist)) => idx[dist.sample(rng)],
                            None => continue,
                        }
                    };
                    for &s in self.spec.rules[n][choice].symbols.iter().rev() {
                        stack.push((s, depth + 1));
                    }
                }
            }
        }
        out
    }
}

/// One sampled document: the terminals of a full expansion of the start symbol.
pub fn sample_document<R: Rng + ?Sized>(spec: &GrammarSpec, rng: &mut R) -> Result<Vec<u32>, CorpusError> {
    spec.validate()?;
    Ok(Sampler::new(spec).document(rng))
}

/// Samples documents until at least `n_tokens` terminals were produced,
/// using a generator seeded from `spec.seed`.
pub fn generate_corpus(spec: &GrammarSpec, n_tokens: usize) -> Result<Vec<Vec<u32>>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate_corpus_with(spec, n_tokens, &mut rng)
}

pub fn generate_corpus_with<R: Rng + ?Sized>(
    spec: &GrammarSpec,
    n_tokens: usize,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>, CorpusError> {
    spec.validate()?;
    let sampler = Sampler::new(spec);
    let mut docs = Vec::new();
    let mut produced = 0;
    let mut empty_run = 0;
    while produced < n_tokens {
        let doc = sampler.document(rng);
        if doc.is_empty() {
            empty_run += 1;
            if empty_run > 10_000 {
                return Err(CorpusError::Grammar("grammar keeps producing empty documents".into()));
            }
            continue;
        }
        empty_run = 0;
        produced += doc.len();
        docs.push(doc);
    }
    Ok(docs)
}

/// Bytes map to ids 0..=255; id 256 is the end-of-document separator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOS: u32 = 256;
    pub const VOCAB: usize = 257;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn decode_bytes(&self, tokens: &[u32]) -> Result<Vec<u8>, CorpusError> {
        tokens
            .iter()
            .map(|&t| u8::try_from(t).map_err(|_| CorpusError::NotAByte { token: t }))
            .collect()
    }

    /// Lossy only where the byte sequence is not valid UTF-8.
    pub fn decode(&self, tokens: &[u32]) -> Result<String, CorpusError> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(tokens)?).into_owned())
    }
}

/// Splits text into documents at blank lines and byte-encodes each one.
pub fn ingest_text(text: &str) -> Vec<Vec<u32>> {
    text.split("\n\n")
        .filter(|d| !d.trim().is_empty())
        .map(|d| ByteTokenizer.encode(d))
        .collect()
}

/// Concatenates documents, appending `eos` after each.
pub fn join_documents(docs: &[Vec<u32>], eos: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        out.extend_from_slice(d);
        out.push(eos);
    }
    out
}

/// A training window: `seq_len + 1` contiguous stream tokens split into
/// inputs and next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedRow {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    /// Positions (within the `seq_len + 1` window) holding EOS.
    pub boundaries: Vec<usize>,
    /// Document index of each input position, counting from 0 per row.
    pub segments: Vec<u32>,
}

impl PackedRow {
    fn from_window(window: &[u32], eos: u32) -> Self {
        let n = window.len() - 1;
        let boundaries = window
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == eos).then_some(i))
            .collect();
        let mut seg = 0;
        let segments = window[..n]
            .iter()
            .map(|&t| {
                let s = seg;
                if t == eos {
                    seg += 1;
                }
                s
            })
            .collect();
        PackedRow {
            tokens: window[..n].to_vec(),
            targets: window[1..].to_vec(),
            boundaries,
            segments,
        }
    }

    /// The `seq_len + 1` window this row was cut from.
    pub fn window(&self) -> Vec<u32> {
        let mut w = self.tokens.clone();
        w.push(*self.targets.last().expect("nonempty row"));
        w
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBatch {
    pub rows: Vec<PackedRow>,
}

/// Iterator over packed batches; the trailing partial window is dropped and
/// a final partial batch is still yielded.
pub struct PackIter<I: Iterator<Item = u32>> {
    stream: I,
    buf: VecDeque<u32>,
    eos: u32,
    seq_len: usize,
    batch_size: usize,
    rows_emitted: usize,
    done: bool,
}

impl<I: Iterator<Item = u32>> PackIter<I> {
    fn next_row(&mut self) -> Option<PackedRow> {
        let w = self.seq_len + 1;
        while self.buf.len() < w {
            match self.stream.next() {
                Some(t) => self.buf.push_back(t),
                None => return None,
            }
        }
        let window: Vec<u32> = self.buf.drain(..w).collect();
        Some(PackedRow::from_window(&window, self.eos))
    }
}

impl<I: Iterator<Item = u32>> Iterator for PackIter<I> {
    type Item = PackedBatch;

    fn next(&mut self) -> Option<PackedBatch> {
        if self.done {
            return None;
        }
        let mut rows = Vec::with_capacity(self.batch_size);
        while rows.len() < self.batch_size {
            match self.next_row() {
                Some(r) => rows.push(r),
                None => {
                    self.done = true;
                    break;
                }
            }
        }
        self.rows_emitted += rows.len();
        if self.done && self.rows_emitted == 0 {
            log::warn!(
                "token stream shorter than one window of {} tokens; no batches produced",
                self.seq_len + 1
            );
        }
        (!rows.is_empty()).then_some(PackedBatch { rows })
    }
}

/// Packs an already-joined token stream (documents separated by `eos`).
pub fn pack_tokens<I: IntoIterator<Item = u32>>(
    stream: I,
    eos: u32,
    seq_len: usize,
    batch_size: usize,
) -> Result<PackIter<I::IntoIter>, CorpusError> {
    if seq_len < 2 {
        return Err(CorpusError::SeqLen(seq_len));
    }
    if batch_size == 0 {
        return Err(CorpusError::BatchSize);
    }
    Ok(PackIter {
        stream: stream.into_iter(),
        buf: VecDeque::new(),
        eos,
        seq_len,
        batch_size,
        rows_emitted: 0,
        done: false,
    })
}

/// Joins documents with `eos` separators and packs them.
pub fn pack_sequences(
    docs: &[Vec<u32>],
    eos: u32,
    seq_len: usize,
    batch_size: usize,
) -> Result<PackIter<std::vec::IntoIter<u32>>, CorpusError> {
    pack_tokens(join_documents(docs, eos), eos, seq_len, batch_size)
}

/// Every full window of `stream`, in order.
pub fn pack_rows(stream: &[u32], eos: u32, seq_len: usize) -> Result<Vec<PackedRow>, CorpusError> {
    Ok(pack_tokens(stream.iter().copied(), eos, seq_len, 1)?
        .flat_map(|b| b.rows)
        .collect())
}

/// Metadata stored next to a raw token file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    /// `"grammar"` or `"byte"`.
    pub tokenizer: String,
    pub vocab: usize,
    pub eos: u32,
    pub n_tokens: usize,
    pub n_docs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grammar: Option<GrammarSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

/// A joined token stream with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    pub meta: CorpusMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Corpus {
    /// Grammar corpus: terminals `0..terminal_vocab`, EOS = `terminal_vocab`.
    pub fn from_grammar(spec: &GrammarSpec, n_tokens: usize) -> Result<Self, CorpusError> {
        let docs = generate_corpus(spec, n_tokens)?;
        let eos = spec.terminal_vocab;
        Ok(Corpus {
            tokens: join_documents(&docs, eos),
            meta: CorpusMeta {
                tokenizer: "grammar".into(),
                vocab: spec.terminal_vocab as usize + 1,
                eos,
                n_tokens: docs.iter().map(|d| d.len() + 1).sum(),
                n_docs: docs.len(),
                grammar: Some(spec.clone()),
                seed: Some(spec.seed),
                source: None,
            },
        })
    }

    pub fn from_text(text: &str, source: Option<String>) -> Self {
        let docs = ingest_text(text);
        let tokens = join_documents(&docs, ByteTokenizer::EOS);
        Corpus {
            meta: CorpusMeta {
                tokenizer: "byte".into(),
                vocab: ByteTokenizer::VOCAB,
                eos: ByteTokenizer::EOS,
                n_tokens: tokens.len(),
                n_docs: docs.len(),
                grammar: None,
                seed: None,
                source,
            },
            tokens,
        }
    }

    /// Splits at a document boundary so that roughly `fraction` of the
    /// tokens go to the second part.
    pub fn split_tail(&self, fraction: f64) -> (Corpus, Corpus) {
        let target = ((1.0 - fraction.clamp(0.0, 1.0)) * self.tokens.len() as f64) as usize;
        let cut = self.tokens[..target]
            .iter()
            .rposition(|&t| t == self.meta.eos)
            .map_or(0, |i| i + 1);
        let part = |tokens: &[u32]| Corpus {
            tokens: tokens.to_vec(),
            meta: CorpusMeta {
                n_tokens: tokens.len(),
                n_docs: tokens.iter().filter(|&&t| t == self.meta.eos).count(),
                ..self.meta.clone()
            },
        };
        (part(&self.tokens[..cut]), part(&self.tokens[cut..]))
    }

    /// Writes little-endian `u32` ids to `path` and metadata to `path.json`.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut bytes = Vec::with_capacity(self.tokens.len() * 4);
        for t in &self.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        fs::write(path, bytes).map_err(io_err)?;
        let side = sidecar_path(path);
        let json = serde_json::to_vec_pretty(&self.meta).map_err(|source| CorpusError::Sidecar {
            path: side.clone(),
            source,
        })?;
        fs::write(&side, json).map_err(|source| CorpusError::Io { path: side, source })
    }

    /// Loads a raw token file with its sidecar, or ingests a `.txt` file.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let io_err = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        if path.extension().is_some_and(|e| e == "txt") {
            let text = fs::read_to_string(path).map_err(io_err)?;
            return Ok(Self::from_text(&text, Some(path.display().to_string())));
        }
        let bytes = fs::read(path).map_err(io_err)?;
        if bytes.len() % 4 != 0 {
            return Err(CorpusError::Truncated {
                path: path.to_path_buf(),
                len: bytes.len(),
            });
        }
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let side = sidecar_path(path);
        let raw = fs::read(&side).map_err(|source| CorpusError::Io {
            path: side.clone(),
            source,
        })?;
        let meta = serde_json::from_slice(&raw).map_err(|source| CorpusError::Sidecar { path: side, source })?;
        Ok(Corpus { tokens, meta })
    }
}
