//! Saturating power-law fits `loss(x) = beta * x^(-c) + eps_inf` and the
//! compute-optimal number of recursion rounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("compute values must be distinct; {0} appears twice")]
    DuplicateX(f64),
    #[error("point {index}: compute {x} and loss {loss} must both be positive and finite")]
    InvalidPoint { index: usize, x: f64, loss: f64 },
    #[error("loss does not decrease with compute (fitted exponent {0})")]
    NotDecreasing(f64),
    #[error("empty curve family")]
    EmptyFamily,
    #[error("empty compute grid")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: f64,
    pub c: f64,
    pub eps_inf: f64,
    /// Sum of squared `ln(loss)` errors (weighted when weights are used).
    pub residual: f64,
    pub n_points: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl FitResult {
    pub fn predict(&self, x: f64) -> f64 {
        self.beta * x.powf(-self.c) + self.eps_inf
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Number of geometric `eps_inf` candidates.
    pub grid_size: usize,
    /// Closest candidate to `min(loss)`, as a fraction of `min(loss)`.
    pub min_gap: f64,
    /// Weight point `i` (after sorting by compute) by `((i + 1) / n)^recency`.
    /// Zero weighs every point equally.
    pub recency: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grid_size: 256,
            min_gap: 1e-6,
            recency: 0.0,
        }
    }
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitResult, FitError> {
    fit_power_law_with(points, &FitOptions::default())
}

struct Prepared {
    ln_x: Vec<f64>,
    loss: Vec<f64>,
    ln_loss: Vec<f64>,
    weight: Vec<f64>,
}

impl Prepared {
    /// Weighted OLS of `ln(loss - eps_inf)` on `ln x`, scored in `ln(loss)`.
    fn fit_at(&self, eps_inf: f64) -> (f64, f64, f64) {
        let w_sum: f64 = self.weight.iter().sum();
        let ys: Vec<f64> = self.loss.iter().map(|l| (l - eps_inf).ln()).collect();
        let mx = dot(&self.weight, &self.ln_x) / w_sum;
        let my = dot(&self.weight, &ys) / w_sum;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for i in 0..ys.len() {
            let dx = self.ln_x[i] - mx;
            sxy += self.weight[i] * dx * (ys[i] - my);
            sxx += self.weight[i] * dx * dx;
        }
        let slope = sxy / sxx;
        let ln_beta = my - slope * mx;
        let residual = (0..ys.len())
            .map(|i| {
                let pred = (ln_beta + slope * self.ln_x[i]).exp() + eps_inf;
                self.weight[i] * (self.ln_loss[i] - pred.ln()).powi(2)
            })
            .sum();
        (ln_beta.exp(), -slope, residual)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Grid search over `eps_inf` in `[0, min(loss))`, geometric in the gap
/// `min(loss) - eps_inf`, with an inner log-log regression per candidate,
/// then golden-section refinement around the best grid cell. Points may be
/// given in any order.
pub fn fit_power_law_with(points: &[(f64, f64)], opts: &FitOptions) -> Result<FitResult, FitError> {
    if points.len() < 4 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    for (index, &(x, loss)) in points.iter().enumerate() {
        if !(x > 0.0 && x.is_finite() && loss > 0.0 && loss.is_finite()) {
            return Err(FitError::InvalidPoint { index, x, loss });
        }
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(FitError::DuplicateX(w[0].0));
    }
    let n = sorted.len();
    let prep = Prepared {
        ln_x: sorted.iter().map(|p| p.0.ln()).collect(),
        loss: sorted.iter().map(|p| p.1).collect(),
        ln_loss: sorted.iter().map(|p| p.1.ln()).collect(),
        weight: (0..n).map(|i| ((i + 1) as f64 / n as f64).powf(opts.recency)).collect(),
    };
    let min_loss = prep.loss.iter().copied().fold(f64::INFINITY, f64::min);

    // Candidate k sits at gap min_loss * min_gap^(k / (m - 1)); k = 0 is eps_inf = 0.
    let m = opts.grid_size.max(2);
    let log_gap_lo = opts.min_gap.ln();
    let eps_at = |t: f64| min_loss * (1.0 - (t * log_gap_lo).exp());
    let score = |t: f64| prep.fit_at(eps_at(t)).2;
    let ts: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let residuals: Vec<f64> = ts.iter().map(|&t| score(t)).collect();
    let best = (0..m)
        .min_by(|&a, &b| residuals[a].total_cmp(&residuals[b]))
        .expect("nonempty grid");

    let lo = ts[best.saturating_sub(1)];
    let hi = ts[(best + 1).min(m - 1)];
    let (t_ref, r_ref) = golden_section(score, lo, hi, 1e-12);
    let t = if r_ref <= residuals[best] { t_ref } else { ts[best] };

    let eps_inf = eps_at(t);
    let (beta, c, residual) = prep.fit_at(eps_inf);
    if !(c > 0.0) {
        return Err(FitError::NotDecreasing(c));
    }
    Ok(FitResult {
        beta,
        c,
        eps_inf,
        residual,
        n_points: n,
        x_min: sorted[0].0,
        x_max: sorted[n - 1].0,
    })
}

/// Minimum of `f` on `[lo, hi]`, assuming unimodality.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    if fa <= fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

/// Fits keyed by recursion rounds `r`.
pub type RCurveFamily = BTreeMap<usize, FitResult>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStarPoint {
    pub x: f64,
    pub r: usize,
    /// `x` lies more than 10x outside the combined compute range of the fits.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub x_break: f64,
    pub r_from: usize,
    pub r_to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalR {
    pub points: Vec<RStarPoint>,
    pub breakpoints: Vec<Breakpoint>,
}

impl OptimalR {
    pub fn any_extrapolated(&self) -> bool {
        self.points.iter().any(|p| p.extrapolated)
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].r <= w[1].r)
    }

    pub fn breakpoints_csv(&self) -> String {
        let mut out = String::from("x_break,r\n");
        for b in &self.breakpoints {
            let _ = writeln!(out, "{},{}", b.x_break, b.r_to);
        }
        out
    }

    pub fn points_csv(&self) -> String {
        let mut out = String::from("x,r,extrapolated\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.x, p.r, p.extrapolated);
        }
        out
    }
}

fn argmin_r(family: &RCurveFamily, x: f64) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (&r, fit) in family {
        let e = fit.predict(x);
        // Strict comparison keeps the smaller r on ties (keys ascend).
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((r, e));
        }
    }
    best.expect("nonempty family").0
}

/// Log-spaced grid of `n` compute values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// `r*(x)` on the grid, with each change of `r*` between neighbouring grid
/// points located by regula falsi on the two curves' difference in `ln x`.
pub fn optimal_r(family: &RCurveFamily, grid: &[f64]) -> Result<OptimalR, FitError> {
    if family.is_empty() {
        return Err(FitError::EmptyFamily);
    }
    if grid.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let lo = family.values().map(|f| f.x_min).fold(f64::INFINITY, f64::min);
    let hi = family.values().map(|f| f.x_max).fold(0.0, f64::max);
    let points: Vec<RStarPoint> = grid
        .iter()
        .map(|&x| RStarPoint {
            x,
            r: argmin_r(family, x),
            extrapolated: x > 10.0 * hi || x < lo / 10.0,
        })
        .collect();
    let mut breakpoints = Vec::new();
    for w in points.windows(2) {
        if w[0].r != w[1].r {
            let (a, b) = (&family[&w[0].r], &family[&w[1].r]);
            let diff = |ln_x: f64| {
                let x = ln_x.exp();
                a.predict(x) - b.predict(x)
            };
            let x_break = regula_falsi(diff, w[0].x.ln(), w[1].x.ln(), 1e-13).exp();
            breakpoints.push(Breakpoint {
                x_break,
                r_from: w[0].r,
                r_to: w[1].r,
            });
        }
    }
    Ok(OptimalR { points, breakpoints })
}

/// Illinois variant of false position on a bracketing interval.
fn regula_falsi(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 || fa.signum() == fb.signum() {
        return b;
    }
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c);
        if fc == 0.0 || (b - a).abs() < tol * (1.0 + c.abs()) {
            return c;
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa /= 2.0;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb /= 2.0;
            }
            side = 1;
        }
    }
    (a * fb - b * fa) / (fb - fa)
}
