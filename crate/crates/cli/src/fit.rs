//! `labctl fit`: power-law fits of eval loss against compute per run and
//! series, and the optimal-r frontier across an `A^r B` family.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rins_core::scaling::{fit_power_law, log_grid, optimal_r, FitResult, OptimalR, RCurveFamily};
use rins_core::train::{eval_key, LossTrace};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::run::{read_manifest, read_trace, Manifest, MANIFEST};
use crate::spec::run_label;
use crate::store::{create_dir, write_atomic, write_json};

/// Fewer eval points than this and a series is not fitted.
pub const MIN_POINTS: usize = 4;

/// Which eval points of a trace enter a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PointSelection {
    /// Every eval point.
    All,
    /// Points after warmup and before cooldown, where the schedule is the
    /// slowly decaying part and loss tracks compute smoothly.
    #[default]
    Stable,
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub trace: LossTrace,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(RunRecord {
            dir: dir.to_path_buf(),
            manifest: read_manifest(dir)?,
            trace: read_trace(dir)?,
        })
    }

    /// `(compute, loss)` for one eval series under `sel`.
    pub fn points(&self, key: &str, sel: PointSelection) -> Vec<(f64, f64)> {
        let t = &self.manifest.train;
        let last_stable = t.total_steps - t.cooldown_steps;
        self.trace
            .records
            .iter()
            .filter(|r| match sel {
                PointSelection::All => true,
                PointSelection::Stable => r.step > t.warmup_steps && r.step <= last_stable,
            })
            .filter_map(|r| r.eval.get(key).map(|&l| (r.compute, l)))
            .collect()
    }
}

/// Expands each path: a run directory as itself, any other directory into
/// its immediate subdirectories that hold runs (a sweep output).
pub fn collect_run_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(MANIFEST).exists() {
            out.push(p.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| LabError::runtime(format!("reading {}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(MANIFEST).exists())
            .collect();
        if subs.is_empty() {
            return Err(LabError::runtime(format!("{} holds no run directories", p.display())));
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

/// Series label `<signature+policy>@r<rounds>`.
pub fn series_label(m: &Manifest, rounds: usize) -> String {
    format!("{}@r{rounds}", run_label(&m.signature, &m.policy))
}

fn split_key(key: &str) -> Option<(&str, usize)> {
    let (corpus, r) = key.rsplit_once("@r")?;
    Some((corpus, r.parse().ok()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesFit {
    pub run: String,
    pub series: String,
    pub eval_key: String,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFit {
    pub eval_corpus: String,
    /// Rounds `r` to the series fitted for it.
    pub members: BTreeMap<usize, String>,
    pub fits: BTreeMap<usize, FitResult>,
    pub optimal: OptimalR,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitsReport {
    pub selection: PointSelection,
    pub series: Vec<SeriesFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyFit>,
}

fn fit_series(run: &str, series: String, key: String, pts: &[(f64, f64)]) -> SeriesFit {
    let (fit, excluded) = if pts.len() < MIN_POINTS {
        (None, Some(format!("{} eval points, need {MIN_POINTS}", pts.len())))
    } else {
        match fit_power_law(pts) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    if let Some(why) = &excluded {
        log::warn!("{run} {series}: excluded from fits ({why})");
    }
    SeriesFit {
        run: run.to_string(),
        series,
        eval_key: key,
        n_points: pts.len(),
        fit,
        excluded,
    }
}

/// Whether a run belongs to the deterministic `A^r B` family (with `AB` as
/// `r = 1`), and its `r`.
fn family_rounds(m: &Manifest) -> Option<usize> {
    let r = m.signature.rins_rounds()?;
    (m.policy.p_skip == 0.0 && !m.policy.adapters && m.policy.inference_rounds.is_none()).then_some(r)
}

/// Fits every eval series of every run; deterministic `A^r B` runs with at
/// least two distinct `r` also get the optimal-r frontier on their primary
/// eval corpus at full rounds.
pub fn fit_runs(runs: &[RunRecord], sel: PointSelection) -> FitsReport {
    let mut series = Vec::new();
    let mut family: BTreeMap<usize, (String, FitResult)> = BTreeMap::new();
    let corpus = runs.iter().find_map(|r| r.manifest.primary_eval().map(str::to_string));
    for run in runs {
        let m = &run.manifest;
        for key in run.trace.eval_keys() {
            let Some((c, rounds)) = split_key(&key) else { continue };
            let label = series_label(m, rounds);
            let s = fit_series(&m.name, label.clone(), key.clone(), &run.points(&key, sel));
            if let (Some(r), Some(fit), Some(primary)) = (family_rounds(m), s.fit, corpus.as_deref()) {
                if c == primary && rounds == r {
                    if let Some((other, _)) = family.get(&r) {
                        log::warn!("{label}: r = {r} already represented by {other}; keeping the first");
                    } else {
                        family.insert(r, (label, fit));
                    }
                }
            }
            series.push(s);
        }
    }
    let family = match (family.len() >= 2, corpus) {
        (true, Some(eval_corpus)) => {
            let fits: RCurveFamily = family.iter().map(|(&r, (_, f))| (r, *f)).collect();
            let lo = fits.values().map(|f| f.x_min).fold(f64::INFINITY, f64::min);
            let hi = fits.values().map(|f| f.x_max).fold(0.0, f64::max);
            // Out to 1000x the largest budget; points past 10x are flagged.
            let optimal = optimal_r(&fits, &log_grid(lo, hi * 1e3, 241)).expect("non-empty family and grid");
            Some(FamilyFit {
                eval_corpus,
                members: family.into_iter().map(|(r, (s, _))| (r, s)).collect(),
                fits,
                optimal,
            })
        }
        _ => None,
    };
    FitsReport {
        selection: sel,
        series,
        family,
    }
}

/// Fits points from a CSV with a header naming `x` (or `compute`) and `loss`
/// (or `y`) columns, plus an optional `series` column.
pub fn fit_points_file(path: &Path) -> Result<FitsReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h));
    let (Some(xi), Some(yi)) = (col(&["x", "compute"]), col(&["loss", "y"])) else {
        return Err(LabError::Config(format!("{}: header needs x and loss columns", path.display())));
    };
    let si = col(&["series"]);
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| LabError::Config(format!("{}: row {}: bad number in column {i}", path.display(), line + 2)))
        };
        let series = si.and_then(|i| rec.get(i)).unwrap_or("points").to_string();
        groups.entry(series).or_default().push((num(xi)?, num(yi)?));
    }
    let run = path.display().to_string();
    Ok(FitsReport {
        selection: PointSelection::All,
        series: groups
            .into_iter()
            .map(|(s, pts)| fit_series(&run, s.clone(), s, &pts))
            .collect(),
        family: None,
    })
}

pub fn fits_csv(report: &FitsReport) -> String {
    let mut s = String::from("run,series,eval_key,n_points,beta,c,eps_inf,residual,excluded\n");
    for f in &report.series {
        let (b, c, e, res) = match f.fit {
            Some(r) => (r.beta.to_string(), r.c.to_string(), r.eps_inf.to_string(), r.residual.to_string()),
            None => Default::default(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{b},{c},{e},{res},{}",
            f.run,
            f.series,
            f.eval_key,
            f.n_points,
            f.excluded.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

/// Writes `fits.json`, `fits.csv` and, with a family, `breakpoints.csv` and
/// `rstar.csv`.
pub fn write_fits(out: &Path, report: &FitsReport) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("fits.json"), report)?;
    write_atomic(&out.join("fits.csv"), fits_csv(report).as_bytes())?;
    for stale in ["breakpoints.csv", "rstar.csv"] {
        let _ = std::fs::remove_file(out.join(stale));
    }
    if let Some(f) = &report.family {
        write_atomic(&out.join("breakpoints.csv"), f.optimal.breakpoints_csv().as_bytes())?;
        write_atomic(&out.join("rstar.csv"), f.optimal.points_csv().as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out: Option<PathBuf>,
    pub selection: PointSelection,
    pub points: Option<PathBuf>,
}

pub fn cmd_fit(paths: &[PathBuf], opts: &FitOptions) -> Result<FitsReport> {
    let report = match &opts.points {
        Some(p) => fit_points_file(p)?,
        None => {
            if paths.is_empty() {
                return Err(LabError::Config("fit needs run directories or --points".into()));
            }
            let runs = collect_run_dirs(paths)?
                .iter()
                .map(|d| RunRecord::load(d))
                .collect::<Result<Vec<_>>>()?;
            fit_runs(&runs, opts.selection)
        }
    };
    let out = opts.out.clone().unwrap_or_else(|| crate::output_root().join("fits"));
    write_fits(&out, &report)?;
    Ok(report)
}

/// Key of the primary eval series of a run at `rounds`.
pub fn primary_key(m: &Manifest, rounds: usize) -> Option<String> {
    m.primary_eval().map(|c| eval_key(c, rounds))
}
