//! Run specs: the TOML schema, its resolution into concrete training inputs,
//! and the config hash.
//!
//! ```toml
//! signature = "A^2B"          # exponent or flat form; "AB@d2" also accepted
//! degree = 1                   # optional, default 1
//! name = "a2b"                 # optional; names the run directory
//! output = "exp1/a2b"          # optional; relative to the output root
//!
//! [model]
//! d_model = 128
//! n_heads = 4
//! mlp_dim = 512
//! seq_len = 32
//! total_layers = 6
//! # vocab defaults to the corpus vocabulary
//!
//! [train]                      # every TrainConfig field
//! peak_lr = 1e-3
//! weight_decay = 5e-5
//! warmup_steps = 1000
//! cooldown_steps = 2000
//! batch_size = 4
//! seed = 0
//! # total_steps is required unless [baseline] is present
//!
//! [policy]                     # r_max follows the signature
//! p_skip = 0.0
//! kv_share = false
//! adapters = false
//!
//! [corpus]
//! train = "data/train.bin"     # relative to the spec file
//! eval = [{ name = "heldout", path = "data/heldout.bin" }]
//! # or, generated on the fly:
//! # [corpus.grammar]
//! # seed = 1
//! # train_tokens = 400000
//! # eval_tokens = 20000
//!
//! [baseline]                   # compute matching
//! signature = "AB"
//! steps = 20000
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rins_core::corpus::{Corpus, GrammarSpec};
use rins_core::ledger::{expected_stochastic_cost, feasible_layers_per_block, matched_steps, matched_steps_stochastic};
use rins_core::{ModelDims, RecursionPolicy, Signature, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::store::sha256_hex;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    name: Option<String>,
    signature: String,
    degree: Option<u32>,
    output: Option<PathBuf>,
    model: ModelSection,
    train: toml::Table,
    #[serde(default)]
    policy: PolicySection,
    corpus: CorpusSection,
    baseline: Option<BaselineRef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    d_model: usize,
    n_heads: usize,
    mlp_dim: usize,
    seq_len: usize,
    total_layers: usize,
    vocab: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PolicySection {
    p_skip: f64,
    kv_share: bool,
    adapters: bool,
    inference_rounds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub eval: Vec<EvalCorpusRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grammar: Option<GrammarCorpus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCorpusRef {
    pub name: String,
    pub path: PathBuf,
}

/// A corpus sampled from [`GrammarSpec::random`]; the last `eval_tokens`
/// become the `heldout` eval set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarCorpus {
    #[serde(default = "default_nonterminals")]
    pub nonterminals: usize,
    #[serde(default = "default_terminal_vocab")]
    pub terminal_vocab: u32,
    #[serde(default = "default_depth_cap")]
    pub depth_cap: usize,
    pub seed: u64,
    pub train_tokens: usize,
    pub eval_tokens: usize,
}

fn default_nonterminals() -> usize {
    DEFAULT_NONTERMINALS
}
fn default_terminal_vocab() -> u32 {
    DEFAULT_TERMINAL_VOCAB
}
fn default_depth_cap() -> usize {
    DEFAULT_DEPTH_CAP
}

pub const DEFAULT_NONTERMINALS: usize = 8;
pub const DEFAULT_TERMINAL_VOCAB: u32 = 64;
pub const DEFAULT_DEPTH_CAP: usize = 8;

impl GrammarCorpus {
    pub fn grammar(&self) -> GrammarSpec {
        GrammarSpec::random(self.nonterminals, self.terminal_vocab, self.depth_cap, self.seed)
    }
}

/// The run whose compute budget a spec is matched to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRef {
    pub signature: Signature,
    pub steps: u64,
}

/// A fully resolved run: everything that determines the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub signature: Signature,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub policy: RecursionPolicy,
    pub corpus: CorpusSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Directory that relative corpus paths are resolved against.
    #[serde(default)]
    pub base_dir: PathBuf,
}

/// Training and eval token streams of a run.
pub struct RunData {
    pub train: Corpus,
    pub evals: Vec<(String, Corpus)>,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_table(table, base_dir)
    }

    pub fn from_table(table: toml::Table, base_dir: &Path) -> Result<Self> {
        let file = SpecFile::deserialize(toml::Value::Table(table)).map_err(|e| LabError::Config(e.to_string()))?;
        resolve(file, base_dir)
    }

    /// Hex SHA-256 of the canonical JSON of the spec, leaving out the name,
    /// output directory and base directory. Object keys are sorted, so key
    /// order in the source file does not matter.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        if let Some(obj) = v.as_object_mut() {
            for k in ["name", "output", "base_dir"] {
                obj.remove(k);
            }
        }
        sha256_hex(v.to_string().as_bytes())
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_data(&self) -> Result<RunData> {
        load_corpora(&self.corpus, &self.base_dir).map_err(|e| match e {
            LabError::Config(m) => LabError::Runtime(m),
            other => other,
        })
    }

    /// Ledger expectation of one step's cost under the policy.
    pub fn expected_step_cost(&self) -> f64 {
        expected_stochastic_cost(&self.signature.expand(), &self.dims, self.policy.p_skip, self.train.cost_mode)
            .expect("validated at resolution")
    }

    /// Resolved location of the train corpus, when it is a file.
    pub fn train_path(&self) -> Option<PathBuf> {
        self.corpus.train.as_deref().map(|p| self.resolve_path(p))
    }
}

/// Short label for directories and plot series: the tagged signature plus
/// any non-default policy flags, e.g. `AAAB@d1+ps0.5+ad`.
pub fn run_label(sig: &Signature, policy: &RecursionPolicy) -> String {
    let mut s = sig.tagged();
    if policy.p_skip > 0.0 {
        s.push_str(&format!("+ps{}", policy.p_skip));
    }
    if policy.adapters {
        s.push_str("+ad");
    }
    if policy.kv_share {
        s.push_str("+kv");
    }
    if let Some(r) = policy.inference_rounds {
        s.push_str(&format!("+inf{r}"));
    }
    s
}

fn parse_signature(text: &str, degree: Option<u32>, field: &str) -> Result<Signature> {
    let sig = match degree {
        Some(d) if text.contains('@') => {
            return Err(LabError::field(field, format!("{text:?} carries a degree tag and degree = {d} is also set")))
        }
        Some(d) => Signature::parse(text, d),
        None => Signature::parse_tagged(text),
    };
    sig.map_err(|e| LabError::field(field, e))
}

fn resolve(file: SpecFile, base_dir: &Path) -> Result<RunSpec> {
    let signature = parse_signature(&file.signature, file.degree, "signature")?;
    let m = &file.model;
    if m.total_layers > 0 {
        if let Err(e) = feasible_layers_per_block(&signature, m.total_layers) {
            return Err(LabError::field(
                "signature",
                format!(
                    "{} is infeasible with model.total_layers = {}: layers_per_block = 0 ({} unique blocks); {e}",
                    signature.tagged(),
                    m.total_layers,
                    signature.unique_leaf_count()
                ),
            ));
        }
    }

    let data = load_corpora(&file.corpus, base_dir)?;
    let corpus_vocab = data.train.meta.vocab;
    let vocab = match m.vocab {
        Some(v) if v < corpus_vocab => {
            return Err(LabError::field("model.vocab", format!("{v} is smaller than the corpus vocabulary {corpus_vocab}")))
        }
        Some(v) => v,
        None => corpus_vocab,
    };
    let dims = ModelDims {
        d_model: m.d_model,
        n_heads: m.n_heads,
        mlp_dim: m.mlp_dim,
        vocab,
        seq_len: m.seq_len,
        total_layers: m.total_layers,
    };
    dims.validate().map_err(|e| LabError::field("model", e))?;

    let p = &file.policy;
    let policy = RecursionPolicy {
        r_max: signature.rins_rounds().unwrap_or(1),
        p_skip: p.p_skip,
        kv_share: p.kv_share,
        adapters: p.adapters,
        inference_rounds: p.inference_rounds,
    };
    policy.validate().map_err(|e| LabError::field("policy", e))?;
    if policy.adapters && !signature.is_rins() {
        return Err(LabError::field(
            "policy.adapters",
            format!("adapters need an A^r B signature with r >= 2, got {}", signature.tagged()),
        ));
    }
    if policy.p_skip > 0.0 && !signature.is_rins() {
        return Err(LabError::field(
            "policy.p_skip",
            format!("stochastic rounds need an A^r B signature with r >= 2, got {}", signature.tagged()),
        ));
    }

    let mut train_table = file.train.clone();
    if file.baseline.is_some() {
        if train_table.contains_key("total_steps") {
            return Err(LabError::field(
                "train.total_steps",
                "must not be set when [baseline] is given; it is derived by compute matching",
            ));
        }
        // Placeholder so the remaining fields deserialize; replaced below.
        train_table.insert("total_steps".into(), toml::Value::Integer(1));
    }
    let mut train = TrainConfig::deserialize(toml::Value::Table(train_table)).map_err(|e| LabError::field("train", e))?;
    if let Some(b) = &file.baseline {
        train.total_steps = derive_steps(b, &signature, &dims, &policy, &train)?;
        log::info!(
            "{}: {} steps matched to {} x {} steps",
            signature.tagged(),
            train.total_steps,
            b.signature.tagged(),
            b.steps
        );
    }
    train.validate().map_err(|e| LabError::Config(e.to_string()))?;

    Ok(RunSpec {
        name: file.name.unwrap_or_else(|| run_label(&signature, &policy)),
        signature,
        dims,
        train,
        policy,
        corpus: file.corpus,
        baseline: file.baseline,
        output: file.output,
        base_dir: base_dir.to_path_buf(),
    })
}

fn derive_steps(
    b: &BaselineRef,
    signature: &Signature,
    dims: &ModelDims,
    policy: &RecursionPolicy,
    train: &TrainConfig,
) -> Result<u64> {
    let base_plan = b.signature.expand();
    let plan = signature.expand();
    let steps = if policy.p_skip > 0.0 {
        matched_steps_stochastic(&base_plan, &plan, dims, dims, b.steps, policy.p_skip, train.cost_mode)
    } else {
        matched_steps(&base_plan, &plan, dims, dims, b.steps, train.cost_mode)
    };
    steps.map_err(|e| LabError::field("baseline", e))
}

fn load_corpora(c: &CorpusSection, base_dir: &Path) -> Result<RunData> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let mut evals = Vec::new();
    let train = match (&c.train, &c.grammar) {
        (Some(_), Some(_)) => return Err(LabError::field("corpus", "set either train or grammar, not both")),
        (None, None) => return Err(LabError::field("corpus", "one of train or grammar is required")),
        (Some(p), None) => {
            let path = resolve(p);
            Corpus::load(&path).map_err(|e| LabError::field("corpus.train", e))?
        }
        (None, Some(g)) => {
            if g.train_tokens == 0 || g.eval_tokens == 0 {
                return Err(LabError::field("corpus.grammar", "train_tokens and eval_tokens must be positive"));
            }
            let spec = g.grammar();
            spec.validate().map_err(|e| LabError::field("corpus.grammar", e))?;
            let total = g.train_tokens + g.eval_tokens;
            let all = Corpus::from_grammar(&spec, total).map_err(|e| LabError::field("corpus.grammar", e))?;
            let (train, heldout) = all.split_tail(g.eval_tokens as f64 / all.tokens.len() as f64);
            evals.push(("heldout".to_string(), heldout));
            train
        }
    };
    let mut names: BTreeMap<String, ()> = evals.iter().map(|(n, _)| (n.clone(), ())).collect();
    for (i, e) in c.eval.iter().enumerate() {
        let field = format!("corpus.eval[{i}]");
        if names.insert(e.name.clone(), ()).is_some() {
            return Err(LabError::field(&field, format!("duplicate eval name {:?}", e.name)));
        }
        if e.name.is_empty() || e.name.contains('@') || e.name.contains(',') {
            return Err(LabError::field(&field, "name must be non-empty without '@' or ','"));
        }
        let corpus = Corpus::load(&resolve(&e.path)).map_err(|err| LabError::field(&field, err))?;
        if corpus.meta.eos != train.meta.eos || corpus.meta.tokenizer != train.meta.tokenizer {
            return Err(LabError::field(&field, "tokenizer or EOS differs from the train corpus"));
        }
        evals.push((e.name.clone(), corpus));
    }
    if evals.is_empty() {
        log::warn!("no eval corpora; the trace will carry train loss only");
    }
    Ok(RunData { train, evals })
}
