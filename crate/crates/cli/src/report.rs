//! `labctl report`: comparison table, loss-vs-compute curves, fits and the
//! two desk-scale checks (the optimal-r pattern and stochastic no-regret).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rins_core::train::eval_key;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fit::{collect_run_dirs, fit_runs, primary_key, series_label, write_fits, FitsReport, PointSelection, RunRecord};
use crate::store::{create_dir, write_atomic, write_json};

/// One row per (run, eval series) with the series' final loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub signature: String,
    pub degree: u32,
    pub p_skip: Option<f64>,
    pub adapters: Option<bool>,
    pub kv_share: Option<bool>,
    pub status: String,
    pub layers_per_block: Option<usize>,
    pub params: Option<usize>,
    pub steps: Option<u64>,
    pub expected_compute: Option<f64>,
    pub realized_compute: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub eval_key: Option<String>,
    pub final_eval_loss: Option<f64>,
}

impl ComparisonRow {
    /// Rows for one run directory, read from its manifest alone.
    pub fn from_run_dir(dir: &Path) -> Result<Vec<Self>> {
        let m = crate::run::read_manifest(dir)?;
        let base = ComparisonRow {
            run: m.name.clone(),
            signature: m.signature.render(),
            degree: m.signature.degree(),
            p_skip: Some(m.policy.p_skip),
            adapters: Some(m.policy.adapters),
            kv_share: Some(m.policy.kv_share),
            status: m.status.as_str().into(),
            layers_per_block: Some(m.layers_per_block),
            params: Some(m.params),
            steps: Some(m.steps_done),
            expected_compute: Some(m.expected_compute),
            realized_compute: Some(m.realized_compute),
            final_train_loss: m.final_train_loss,
            eval_key: None,
            final_eval_loss: None,
        };
        if m.final_eval.is_empty() {
            return Ok(vec![base]);
        }
        Ok(m.final_eval
            .iter()
            .map(|(k, &v)| ComparisonRow {
                eval_key: Some(k.clone()),
                final_eval_loss: Some(v),
                ..base.clone()
            })
            .collect())
    }

    pub fn status_only(name: &str, signature: &str, degree: u32, status: &str) -> Self {
        ComparisonRow {
            run: name.into(),
            signature: signature.into(),
            degree,
            p_skip: None,
            adapters: None,
            kv_share: None,
            status: status.into(),
            layers_per_block: None,
            params: None,
            steps: None,
            expected_compute: None,
            realized_compute: None,
            final_train_loss: None,
            eval_key: None,
            final_eval_loss: None,
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

pub const COMPARISON_HEADER: &str = "run,signature,degree,p_skip,adapters,kv_share,status,layers_per_block,params,steps,expected_compute,realized_compute,final_train_loss,eval_key,final_eval_loss";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.run,
            r.signature,
            r.degree,
            opt(&r.p_skip),
            opt(&r.adapters),
            opt(&r.kv_share),
            r.status,
            opt(&r.layers_per_block),
            opt(&r.params),
            opt(&r.steps),
            opt(&r.expected_compute),
            opt(&r.realized_compute),
            opt(&r.final_train_loss),
            opt(&r.eval_key),
            opt(&r.final_eval_loss),
        );
    }
    s
}

/// Loss-vs-compute points for external plotting: `x` is cumulative
/// compute, `y` the eval loss, `series` the signature and rounds.
pub fn curves_csv(runs: &[RunRecord]) -> String {
    let mut s = String::from("x,y,series,eval_corpus,run,step\n");
    for run in runs {
        for rec in &run.trace.records {
            for (key, loss) in &rec.eval {
                let Some((corpus, rounds)) = key.rsplit_once("@r").and_then(|(c, r)| Some((c, r.parse().ok()?))) else {
                    continue;
                };
                let _ = writeln!(
                    s,
                    "{},{loss},{},{corpus},{},{}",
                    rec.compute,
                    series_label(&run.manifest, rounds),
                    run.manifest.name,
                    rec.step
                );
            }
        }
    }
    s
}

/// The expected optimal-r pattern: fitted curves cross, and larger `r`
/// brings a larger exponent and a lower asymptote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCheck {
    pub rounds: Vec<usize>,
    pub c: BTreeMap<usize, f64>,
    pub eps_inf: BTreeMap<usize, f64>,
    pub curves_cross: bool,
    pub crossings_extrapolated: bool,
    pub c_increases_with_r: bool,
    pub eps_inf_decreases_with_r: bool,
    pub rstar_nondecreasing: bool,
    pub held: bool,
}

fn pattern(fits: &FitsReport) -> Option<PatternCheck> {
    let fam = fits.family.as_ref()?;
    let rounds: Vec<usize> = fam.fits.keys().copied().collect();
    let c: BTreeMap<usize, f64> = fam.fits.iter().map(|(&r, f)| (r, f.c)).collect();
    let eps: BTreeMap<usize, f64> = fam.fits.iter().map(|(&r, f)| (r, f.eps_inf)).collect();
    let cv: Vec<f64> = c.values().copied().collect();
    let ev: Vec<f64> = eps.values().copied().collect();
    let c_up = cv.windows(2).all(|w| w[1] > w[0]);
    let e_down = ev.windows(2).all(|w| w[1] < w[0]);
    let cross = !fam.optimal.breakpoints.is_empty();
    let max_x = fam.fits.values().map(|f| f.x_max).fold(0.0, f64::max);
    let extrapolated = fam.optimal.breakpoints.iter().any(|b| b.x_break > max_x);
    let mono = fam.optimal.is_nondecreasing();
    Some(PatternCheck {
        rounds,
        c,
        eps_inf: eps,
        curves_cross: cross,
        crossings_extrapolated: extrapolated,
        c_increases_with_r: c_up,
        eps_inf_decreases_with_r: e_down,
        rstar_nondecreasing: mono,
        held: cross && c_up && e_down && mono,
    })
}

/// Rounds-1 eval loss of a stochastic run against the final loss of its
/// compute-matched baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoRegretCheck {
    pub run: String,
    pub p_skip: f64,
    pub adapters: bool,
    pub baseline_run: String,
    pub eval_key: String,
    pub loss_r1: f64,
    pub baseline_loss: f64,
    /// `(loss_r1 - baseline_loss) / baseline_loss`.
    pub relative_diff: f64,
    pub within_5_percent: bool,
}

fn no_regret(runs: &[RunRecord]) -> Vec<NoRegretCheck> {
    let mut out = Vec::new();
    for run in runs {
        let m = &run.manifest;
        if m.policy.p_skip == 0.0 {
            continue;
        }
        let Some(b) = &m.baseline else { continue };
        let Some(key) = primary_key(m, 1) else { continue };
        let Some(&loss_r1) = m.final_eval.get(&key) else { continue };
        let baseline = runs.iter().find(|o| {
            let om = &o.manifest;
            om.signature == b.signature
                && om.policy.p_skip == 0.0
                && om.steps_done == b.baseline_steps
                && om.train_data.sha256 == m.train_data.sha256
        });
        let Some(base) = baseline else {
            log::warn!("{}: no baseline run {} x {} in the report set", m.name, b.signature, b.baseline_steps);
            continue;
        };
        let bm = &base.manifest;
        let Some(bkey) = bm.primary_eval().map(|c| eval_key(c, bm.policy.eval_rounds())) else { continue };
        let Some(&baseline_loss) = bm.final_eval.get(&bkey) else { continue };
        let rel = (loss_r1 - baseline_loss) / baseline_loss;
        out.push(NoRegretCheck {
            run: m.name.clone(),
            p_skip: m.policy.p_skip,
            adapters: m.policy.adapters,
            baseline_run: bm.name.clone(),
            eval_key: key,
            loss_r1,
            baseline_loss,
            relative_diff: rel,
            within_5_percent: rel <= 0.05,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<String>,
    pub selection: PointSelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PatternCheck>,
    pub no_regret: Vec<NoRegretCheck>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub out: Option<PathBuf>,
    pub selection: PointSelection,
}

/// Writes `comparison.csv`, `curves.csv`, the fit files and `report.json`.
pub fn cmd_report(paths: &[PathBuf], opts: &ReportOptions) -> Result<Report> {
    let dirs = collect_run_dirs(paths)?;
    let runs = dirs.iter().map(|d| RunRecord::load(d)).collect::<Result<Vec<_>>>()?;
    let out = opts.out.clone().unwrap_or_else(|| crate::output_root().join("report"));
    create_dir(&out)?;
    let mut rows = Vec::new();
    for d in &dirs {
        rows.extend(ComparisonRow::from_run_dir(d)?);
    }
    write_atomic(&out.join("comparison.csv"), comparison_csv(&rows).as_bytes())?;
    write_atomic(&out.join("curves.csv"), curves_csv(&runs).as_bytes())?;
    let fits = fit_runs(&runs, opts.selection);
    write_fits(&out, &fits)?;
    let report = Report {
        runs: runs.iter().map(|r| r.manifest.name.clone()).collect(),
        selection: opts.selection,
        pattern: pattern(&fits),
        no_regret: no_regret(&runs),
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// Human-readable summary printed by the CLI.
pub fn summary(report: &Report) -> String {
    let mut s = String::new();
    if let Some(p) = &report.pattern {
        let _ = writeln!(s, "optimal-r pattern over r = {:?}: {}", p.rounds, if p.held { "held" } else { "did not hold" });
        for r in &p.rounds {
            let _ = writeln!(s, "  r={r}: c={:.4} eps_inf={:.4}", p.c[r], p.eps_inf[r]);
        }
        let _ = writeln!(
            s,
            "  curves cross: {} (extrapolated: {}), c increasing: {}, eps_inf decreasing: {}, r* nondecreasing: {}",
            p.curves_cross, p.crossings_extrapolated, p.c_increases_with_r, p.eps_inf_decreases_with_r, p.rstar_nondecreasing
        );
    }
    for n in &report.no_regret {
        let _ = writeln!(
            s,
            "no-regret {}: r1 loss {:.4} vs baseline {:.4} ({:+.2}%) {}",
            n.run,
            n.loss_r1,
            n.baseline_loss,
            100.0 * n.relative_diff,
            if n.within_5_percent { "within 5%" } else { "outside 5%" }
        );
    }
    s
}
