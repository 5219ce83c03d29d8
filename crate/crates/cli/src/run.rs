//! `labctl run`: one training run in its own directory, resumable from the
//! latest checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rins_core::corpus::Corpus;
use rins_core::ledger::{feasible_layers_per_block, CostMode};
use rins_core::model::checkpoint::Checkpoint;
use rins_core::model::RecursiveModel;
use rins_core::train::{EvalSet, LossTrace, TrainStatus, TrainStream, Trainer};
use rins_core::{ModelDims, RecursionPolicy, Signature, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::spec::{run_label, RunSpec};
use crate::store::{create_dir, read_json, sha256_hex, write_atomic, write_json, DirLock};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_SPEC: &str = "run.json";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const TRACE_CSV: &str = "trace.csv";
pub const CHECKPOINT: &str = "checkpoint.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Diverged,
    NonFiniteGradient,
    Failed,
}

impl RunStatus {
    /// Finished runs are never re-executed.
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Completed | RunStatus::Diverged | RunStatus::NonFiniteGradient)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
            RunStatus::NonFiniteGradient => "non_finite_gradient",
            RunStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMatch {
    pub signature: Signature,
    pub baseline_steps: u64,
    pub matched_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub name: String,
    pub source: String,
    pub tokenizer: String,
    pub vocab: usize,
    pub eos: u32,
    pub n_tokens: usize,
    pub sha256: String,
}

impl DataInfo {
    fn of(name: &str, source: String, c: &Corpus) -> Self {
        let mut bytes = Vec::with_capacity(c.tokens.len() * 4);
        for t in &c.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        DataInfo {
            name: name.to_string(),
            source,
            tokenizer: c.meta.tokenizer.clone(),
            vocab: c.meta.vocab,
            eos: c.meta.eos,
            n_tokens: c.tokens.len(),
            sha256: sha256_hex(&bytes),
        }
    }
}

/// Self-description of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub signature: Signature,
    pub dims: ModelDims,
    pub policy: RecursionPolicy,
    pub train: TrainConfig,
    pub cost_mode: CostMode,
    pub baseline: Option<BaselineMatch>,
    pub layers_per_block: usize,
    pub params: usize,
    pub adapter_params: usize,
    pub expected_step_cost: f64,
    pub expected_compute: f64,
    pub realized_compute: f64,
    pub steps_done: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
    pub eval_rounds: Vec<usize>,
    pub final_train_loss: Option<f64>,
    pub final_eval: BTreeMap<String, f64>,
    pub train_data: DataInfo,
    pub eval_data: Vec<DataInfo>,
    pub trace_sha256: Option<String>,
    pub elapsed_seconds: f64,
}

impl Manifest {
    /// Name of the first eval corpus, the one fits and comparisons use.
    pub fn primary_eval(&self) -> Option<&str> {
        self.eval_data.first().map(|d| d.name.as_str())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory; defaults to the spec's `output`, else `<root>/<name>`.
    pub out: Option<PathBuf>,
    /// Discard a run directory that belongs to a different config.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// True when the directory already held a finished run.
    pub reused: bool,
}

pub fn run_dir_for(spec: &RunSpec, root: &Path, out: Option<&Path>) -> PathBuf {
    match (out, &spec.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) if o.is_absolute() => o.clone(),
        (None, Some(o)) => root.join(o),
        (None, None) => root.join(&spec.name),
    }
}

pub fn cmd_run(spec_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let spec = RunSpec::load(spec_path)?;
    let dir = run_dir_for(&spec, &crate::output_root(), opts.out.as_deref());
    let summary = execute(&spec, &dir, opts.force)?;
    if let Ok(text) = fs::read(spec_path) {
        write_atomic(&dir.join("spec.toml"), &text)?;
    }
    Ok(summary)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

pub fn read_trace(dir: &Path) -> Result<LossTrace> {
    let path = dir.join(TRACE_JSONL);
    let f = fs::File::open(&path).map_err(|e| LabError::runtime(format!("reading {}: {e}", path.display())))?;
    LossTrace::read_jsonl(std::io::BufReader::new(f))
        .map_err(|e| LabError::runtime(format!("parsing {}: {e}", path.display())))
}

/// Trains `spec` in `dir`. A directory holding a finished run of the same
/// config is returned as is; an unfinished one resumes from its checkpoint.
pub fn execute(spec: &RunSpec, dir: &Path, force: bool) -> Result<RunSummary> {
    let hash = spec.config_hash();
    let previous = if dir.join(MANIFEST).exists() {
        let m = read_manifest(dir)?;
        if m.config_hash != hash {
            if !force {
                return Err(LabError::Config(format!(
                    "{} holds a run of config {} but this spec hashes to {hash}; use --force or another output",
                    dir.display(),
                    m.config_hash
                )));
            }
            log::warn!("discarding run of config {} in {}", m.config_hash, dir.display());
            fs::remove_dir_all(dir).map_err(|e| LabError::runtime(format!("clearing {}: {e}", dir.display())))?;
            None
        } else if m.status.is_terminal() {
            log::info!("{}: already {} ({} steps)", dir.display(), m.status.as_str(), m.steps_done);
            return Ok(RunSummary {
                dir: dir.to_path_buf(),
                manifest: m,
                reused: true,
            });
        } else {
            Some(m)
        }
    } else {
        None
    };
    create_dir(dir)?;
    let _lock = DirLock::acquire(dir)?;
    write_json(&dir.join(RESOLVED_SPEC), spec)?;

    let started = Instant::now();
    let prior_elapsed = previous.as_ref().map_or(0.0, |m| m.elapsed_seconds);
    let mut manifest = initial_manifest(spec, &hash)?;
    manifest.elapsed_seconds = prior_elapsed;
    match train_in_dir(spec, dir, &mut manifest, previous.is_some(), started, prior_elapsed) {
        Ok(()) => Ok(RunSummary {
            dir: dir.to_path_buf(),
            manifest,
            reused: false,
        }),
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.detail = Some(serde_json::json!({ "error": e.to_string() }));
            manifest.elapsed_seconds = prior_elapsed + started.elapsed().as_secs_f64();
            write_json(&dir.join(MANIFEST), &manifest)?;
            Err(e)
        }
    }
}

fn initial_manifest(spec: &RunSpec, hash: &str) -> Result<Manifest> {
    let data_placeholder = DataInfo {
        name: String::new(),
        source: String::new(),
        tokenizer: String::new(),
        vocab: 0,
        eos: 0,
        n_tokens: 0,
        sha256: String::new(),
    };
    let layers_per_block =
        feasible_layers_per_block(&spec.signature, spec.dims.total_layers).map_err(|e| LabError::field("signature", e))?;
    let expected_step_cost = spec.expected_step_cost();
    Ok(Manifest {
        name: spec.name.clone(),
        label: run_label(&spec.signature, &spec.policy),
        config_hash: hash.to_string(),
        seed: spec.train.seed,
        signature: spec.signature.clone(),
        dims: spec.dims,
        policy: spec.policy.clone(),
        train: spec.train.clone(),
        cost_mode: spec.train.cost_mode,
        baseline: spec.baseline.as_ref().map(|b| BaselineMatch {
            signature: b.signature.clone(),
            baseline_steps: b.steps,
            matched_steps: spec.train.total_steps,
        }),
        layers_per_block,
        params: 0,
        adapter_params: 0,
        expected_step_cost,
        expected_compute: expected_step_cost * spec.train.total_steps as f64,
        realized_compute: 0.0,
        steps_done: 0,
        status: RunStatus::Running,
        detail: None,
        eval_rounds: spec.train.resolved_eval_rounds(&spec.policy),
        final_train_loss: None,
        final_eval: BTreeMap::new(),
        train_data: data_placeholder,
        eval_data: Vec::new(),
        trace_sha256: None,
        elapsed_seconds: 0.0,
    })
}

fn train_in_dir(
    spec: &RunSpec,
    dir: &Path,
    manifest: &mut Manifest,
    resuming: bool,
    started: Instant,
    prior_elapsed: f64,
) -> Result<()> {
    let data = spec.load_data()?;
    let train_source = spec
        .train_path()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "grammar".into());
    manifest.train_data = DataInfo::of("train", train_source, &data.train);
    manifest.eval_data = data
        .evals
        .iter()
        .map(|(name, c)| DataInfo::of(name, c.meta.source.clone().unwrap_or_else(|| name.clone()), c))
        .collect();

    let rt = |e: rins_core::train::TrainError| LabError::runtime(e);
    let eos = data.train.meta.eos;
    let stream = TrainStream::from_tokens(
        &data.train.tokens,
        eos,
        spec.dims.seq_len,
        spec.train.shuffle.then_some(spec.train.seed),
    )
    .map_err(rt)?;
    let evals: Vec<EvalSet> = data
        .evals
        .iter()
        .map(|(name, c)| EvalSet::from_tokens(name, &c.tokens, eos, spec.dims.seq_len, spec.train.eval_rows))
        .collect::<Result<_, _>>()
        .map_err(rt)?;

    let ck_path = dir.join(CHECKPOINT);
    let mut trainer = if resuming && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path).map_err(LabError::runtime)?;
        let trace = read_trace(dir)?;
        log::info!("{}: resuming at step {}", dir.display(), ck.step);
        Trainer::resume(&ck, trace, spec.train.clone(), &stream, &evals).map_err(rt)?
    } else {
        let model = RecursiveModel::new(&spec.signature, spec.dims, spec.policy.clone(), spec.train.seed)
            .map_err(|e| LabError::field("model", e))?;
        Trainer::new(model, spec.train.clone(), &stream, &evals).map_err(rt)?
    };
    manifest.params = trainer.model.params.count();
    manifest.adapter_params = trainer.model.params.adapter_count();
    log::info!(
        "{}: {} params, {} steps, expected step cost {}",
        manifest.name,
        manifest.params,
        spec.train.total_steps,
        manifest.expected_step_cost
    );
    write_json(&dir.join(MANIFEST), &*manifest)?;

    let outcome = trainer
        .run(|t| {
            persist(dir, t, manifest, RunStatus::Running, None, prior_elapsed + started.elapsed().as_secs_f64())
                .map_err(|e| rins_core::train::TrainError::Resume(e.to_string()))?;
            if let Some(r) = t.trace.last() {
                let evals: Vec<String> = r.eval.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                log::info!("{} step {}: train {:.4} {}", manifest.name, r.step, r.train_loss, evals.join(" "));
            }
            Ok(())
        })
        .map_err(rt)?;
    let status = match outcome.status {
        TrainStatus::Completed => RunStatus::Completed,
        TrainStatus::Diverged { .. } => RunStatus::Diverged,
        TrainStatus::NonFiniteGradient { .. } => RunStatus::NonFiniteGradient,
    };
    let detail = serde_json::to_value(&outcome.status).ok();
    persist(dir, &trainer, manifest, status, detail, prior_elapsed + started.elapsed().as_secs_f64())
}

/// Checkpoint, trace files and manifest, each written atomically; the
/// manifest goes last so it never points past the checkpoint.
fn persist(
    dir: &Path,
    t: &Trainer<'_>,
    manifest: &mut Manifest,
    status: RunStatus,
    detail: Option<serde_json::Value>,
    elapsed: f64,
) -> Result<()> {
    let mut ck = Vec::new();
    t.checkpoint().write_to(&mut ck).map_err(LabError::runtime)?;
    write_atomic(&dir.join(CHECKPOINT), &ck)?;
    let jsonl = t.trace.jsonl_bytes();
    write_atomic(&dir.join(TRACE_JSONL), &jsonl)?;
    write_atomic(&dir.join(TRACE_CSV), t.trace.to_csv().as_bytes())?;
    manifest.status = status;
    manifest.detail = detail;
    manifest.steps_done = t.step;
    manifest.realized_compute = t.compute;
    manifest.final_train_loss = t.trace.last().map(|r| r.train_loss);
    manifest.final_eval = t
        .trace
        .eval_keys()
        .into_iter()
        .filter_map(|k| t.trace.final_eval(&k).map(|v| (k, v)))
        .collect();
    manifest.trace_sha256 = Some(sha256_hex(&jsonl));
    manifest.elapsed_seconds = elapsed;
    write_json(&dir.join(MANIFEST), &*manifest)
}
