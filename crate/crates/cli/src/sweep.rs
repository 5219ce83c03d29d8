//! `labctl sweep`: many runs sharing a base spec, each in its own
//! subdirectory, plus a sweep manifest and a comparison CSV.
//!
//! ```toml
//! [sweep]
//! mode = "enumerate"          # the architecture sweep list, or "list"
//! output = "arch12"           # relative to the output root
//! # mode = "list" takes explicit entries:
//! # [[sweep.runs]]
//! # signature = "A^3B"
//! # name = "a3b-ps0.5"
//! # p_skip = 0.5
//! # adapters = true
//!
//! [base]                      # a run spec without `signature`
//! ...
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rins_core::ledger::enumerate_sweep;
use rins_core::Signature;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::report::{comparison_csv, ComparisonRow};
use crate::run::{execute, RunStatus};
use crate::spec::RunSpec;
use crate::store::{create_dir, write_atomic, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Enumerate,
    List,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub signature: String,
    pub degree: Option<u32>,
    pub name: Option<String>,
    pub p_skip: Option<f64>,
    pub adapters: Option<bool>,
    pub kv_share: Option<bool>,
    pub inference_rounds: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    mode: SweepMode,
    output: Option<PathBuf>,
    #[serde(default)]
    runs: Vec<SweepEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    sweep: SweepSection,
    base: toml::Table,
}

/// Outcome of one sweep candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub name: String,
    pub signature: String,
    pub degree: u32,
    /// `completed`, `diverged`, `non_finite_gradient`, `failed` or `skipped`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub runs: Vec<SweepOutcome>,
}

impl SweepManifest {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.status == "failed").count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    pub out: Option<PathBuf>,
    pub jobs: usize,
    /// Resolve and list candidates without training.
    pub dry_run: bool,
}

enum Planned {
    Run { spec: Box<RunSpec>, dir: PathBuf },
    Skip(SweepOutcome),
}

/// Directory name for a candidate; `^` and `@` are kept, `/` cannot occur.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "^@+.-_".contains(c) { c } else { '_' })
        .collect()
}

fn entry_table(base: &toml::Table, e: &SweepEntry) -> toml::Table {
    let mut t = base.clone();
    t.insert("signature".into(), e.signature.clone().into());
    match e.degree {
        Some(d) => {
            t.insert("degree".into(), i64::from(d).into());
        }
        None => {
            t.remove("degree");
        }
    }
    t.remove("output");
    match &e.name {
        Some(n) => {
            t.insert("name".into(), n.clone().into());
        }
        None => {
            t.remove("name");
        }
    }
    let policy = t
        .entry("policy")
        .or_insert_with(|| toml::Value::Table(Default::default()));
    if let toml::Value::Table(p) = policy {
        if let Some(v) = e.p_skip {
            p.insert("p_skip".into(), v.into());
        }
        if let Some(v) = e.adapters {
            p.insert("adapters".into(), v.into());
        }
        if let Some(v) = e.kv_share {
            p.insert("kv_share".into(), v.into());
        }
        if let Some(v) = e.inference_rounds {
            p.insert("inference_rounds".into(), (v as i64).into());
        }
    }
    t
}

fn plan(file: &SweepFile, base_dir: &Path, out: &Path) -> Result<Vec<Planned>> {
    let entries: Vec<SweepEntry> = match file.sweep.mode {
        SweepMode::List => {
            if file.sweep.runs.is_empty() {
                return Err(LabError::field("sweep.runs", "list mode needs at least one entry"));
            }
            file.sweep.runs.clone()
        }
        SweepMode::Enumerate => {
            if !file.sweep.runs.is_empty() {
                return Err(LabError::field("sweep.runs", "only allowed with mode = \"list\""));
            }
            let total_layers = file
                .base
                .get("model")
                .and_then(|m| m.get("total_layers"))
                .and_then(toml::Value::as_integer)
                .ok_or_else(|| LabError::field("base.model.total_layers", "required to enumerate the sweep"))?;
            enumerate_sweep(total_layers as usize)
                .into_iter()
                .map(|c| SweepEntry {
                    signature: c.signature.render(),
                    degree: Some(c.signature.degree()),
                    name: None,
                    p_skip: None,
                    adapters: None,
                    kv_share: None,
                    inference_rounds: None,
                })
                .collect()
        }
    };
    let mut planned = Vec::with_capacity(entries.len());
    let mut seen = std::collections::BTreeSet::new();
    for (i, e) in entries.iter().enumerate() {
        let sig = match e.degree {
            Some(d) => Signature::parse(&e.signature, d),
            None => Signature::parse_tagged(&e.signature),
        }
        .map_err(|err| LabError::field(&format!("sweep.runs[{i}].signature"), err))?;
        let layers = file
            .base
            .get("model")
            .and_then(|m| m.get("total_layers"))
            .and_then(toml::Value::as_integer)
            .unwrap_or(0) as usize;
        if layers > 0 && sig.layers_per_block(layers) == 0 {
            planned.push(Planned::Skip(SweepOutcome {
                name: e.name.clone().unwrap_or_else(|| sig.tagged()),
                signature: sig.render(),
                degree: sig.degree(),
                status: "skipped".into(),
                reason: Some(format!(
                    "infeasible: layers_per_block = 0 ({} unique blocks, {layers} layers)",
                    sig.unique_leaf_count()
                )),
                run_dir: None,
                config_hash: None,
                total_steps: None,
            }));
            continue;
        }
        let spec = RunSpec::from_table(entry_table(&file.base, e), base_dir)
            .map_err(|err| LabError::Config(format!("sweep entry {i} ({}): {err}", e.signature)))?;
        if !seen.insert(spec.name.clone()) {
            return Err(LabError::field(
                &format!("sweep.runs[{i}]"),
                format!("duplicate run name {:?}; set `name` to tell variants apart", spec.name),
            ));
        }
        let dir = out.join(slug(&spec.name));
        planned.push(Planned::Run {
            spec: Box::new(spec),
            dir,
        });
    }
    Ok(planned)
}

pub fn cmd_sweep(sweep_path: &Path, opts: &SweepOptions) -> Result<SweepManifest> {
    let text = std::fs::read_to_string(sweep_path)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", sweep_path.display())))?;
    let file: SweepFile = toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))?;
    let base_dir = sweep_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let root = crate::output_root();
    let out = match (&opts.out, &file.sweep.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) if o.is_absolute() => o.clone(),
        (None, Some(o)) => root.join(o),
        (None, None) => root.join(
            sweep_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sweep".into()),
        ),
    };
    let planned = plan(&file, &base_dir, &out)?;
    create_dir(&out)?;
    if !opts.dry_run {
        write_atomic(&out.join("sweep.toml"), text.as_bytes())?;
    }
    run_planned(planned, &out, opts)
}

fn run_planned(planned: Vec<Planned>, out: &Path, opts: &SweepOptions) -> Result<SweepManifest> {
    let outcomes: Mutex<Vec<Option<SweepOutcome>>> = Mutex::new(vec![None; planned.len()]);
    let next = AtomicUsize::new(0);
    let manifest_path = out.join(if opts.dry_run { "sweep.plan.json" } else { "sweep.json" });
    let snapshot = |outcomes: &[Option<SweepOutcome>]| -> Result<()> {
        let runs = outcomes.iter().flatten().cloned().collect();
        write_json(&manifest_path, &SweepManifest { runs })
    };
    for (i, p) in planned.iter().enumerate() {
        if let Planned::Skip(s) = p {
            log::info!("skipping {}: {}", s.name, s.reason.as_deref().unwrap_or(""));
            outcomes.lock().unwrap()[i] = Some(s.clone());
        }
    }
    let worker = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(p) = planned.get(i) else { return Ok(()) };
            let Planned::Run { spec, dir } = p else { continue };
            let mut o = SweepOutcome {
                name: spec.name.clone(),
                signature: spec.signature.render(),
                degree: spec.signature.degree(),
                status: "planned".into(),
                reason: None,
                run_dir: Some(dir.display().to_string()),
                config_hash: Some(spec.config_hash()),
                total_steps: Some(spec.train.total_steps),
            };
            if !opts.dry_run {
                log::info!("sweep: starting {} ({} steps)", spec.name, spec.train.total_steps);
                match execute(spec, dir, false) {
                    Ok(s) => o.status = s.manifest.status.as_str().into(),
                    Err(e) => {
                        log::error!("sweep: {} failed: {e}", spec.name);
                        o.status = RunStatus::Failed.as_str().into();
                        o.reason = Some(e.to_string());
                    }
                }
            }
            let mut guard = outcomes.lock().unwrap();
            guard[i] = Some(o);
            snapshot(&guard)?;
        }
    };
    let jobs = opts.jobs.max(1);
    if jobs == 1 {
        worker()?;
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..jobs).map(|_| s.spawn(&worker)).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Result<Vec<()>>>()
        })?;
    }
    let outcomes = outcomes.into_inner().unwrap();
    snapshot(&outcomes)?;
    let manifest = SweepManifest {
        runs: outcomes.into_iter().flatten().collect(),
    };
    if !opts.dry_run {
        write_comparison(out, &manifest)?;
    }
    Ok(manifest)
}

/// Comparison CSV over every candidate: finished runs contribute the rows
/// their own directories produce, the rest a status-only row.
fn write_comparison(out: &Path, manifest: &SweepManifest) -> Result<()> {
    let mut rows = Vec::new();
    for o in &manifest.runs {
        let from_dir = o
            .run_dir
            .as_deref()
            .map(Path::new)
            .filter(|d| d.join(crate::run::MANIFEST).exists())
            .map(ComparisonRow::from_run_dir)
            .transpose();
        match from_dir {
            Ok(Some(r)) => rows.extend(r),
            _ => rows.push(ComparisonRow::status_only(&o.name, &o.signature, o.degree, &o.status)),
        }
    }
    write_atomic(&out.join("comparison.csv"), comparison_csv(&rows).as_bytes())
}
