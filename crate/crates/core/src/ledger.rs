//! Parameter counts, per-step compute cost and compute-matched step budgets.
//!
//! Costs count forward passes only. The default unit is one layer pass over
//! one token; because every run in a comparison shares the batch size, a
//! step's cost is reported per sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signature::{ExecutionPlan, Signature};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("{signature} is infeasible with {total_layers} layers ({unique} unique blocks, 0 layers per block)")]
    Infeasible {
        signature: String,
        total_layers: usize,
        unique: usize,
    },
    #[error("invalid model dims: {0}")]
    InvalidDims(String),
    #[error("skip probability must be in [0, 1), got {0}")]
    SkipProbability(f64),
    #[error("baseline steps must be >= 1")]
    ZeroSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub total_layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), LedgerError> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_dim", self.mlp_dim),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("total_layers", self.total_layers),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(LedgerError::InvalidDims(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LedgerError::InvalidDims(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one decoder layer: Q/K/V/O projections (no bias), two
    /// layer norms (gain and bias), and a two-layer MLP with biases.
    pub fn layer_params(&self) -> usize {
        let d = self.d_model;
        let m = self.mlp_dim;
        4 * d * d + 2 * 2 * d + (d * m + m) + (m * d + d)
    }

    /// Token and position embeddings, final norm and output head.
    pub fn embedding_and_head_params(&self) -> usize {
        let d = self.d_model;
        self.vocab * d + self.seq_len * d + 2 * d + d * self.vocab
    }

    /// Forward FLOPs for one token through one layer, counting a
    /// multiply-add as two FLOPs: `12 d^2 + 4 d (seq_len / 2) + 4 d mlp`.
    pub fn layer_flops_per_token(&self) -> u128 {
        let d = self.d_model as u128;
        let s = self.seq_len as u128;
        let m = self.mlp_dim as u128;
        12 * d * d + 2 * d * s + 4 * d * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    #[default]
    LayerPass,
    ExactFlops,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub mode: CostMode,
    pub per_step_cost: f64,
    pub param_count: usize,
}

pub fn feasible_layers_per_block(
    sig: &Signature,
    total_layers: usize,
) -> Result<usize, LedgerError> {
    match sig.layers_per_block(total_layers) {
        0 => Err(LedgerError::Infeasible {
            signature: sig.tagged(),
            total_layers,
            unique: sig.unique_leaf_count(),
        }),
        n => Ok(n),
    }
}

/// Total parameter count. Repeated leaf calls add nothing.
pub fn param_count(plan: &ExecutionPlan, dims: &ModelDims) -> Result<usize, LedgerError> {
    dims.validate()?;
    let lpb = feasible_layers_per_block(plan.source(), dims.total_layers)?;
    Ok(dims.embedding_and_head_params() + plan.unique_leaf_count() * lpb * dims.layer_params())
}

// Cost of a single leaf-block call, in integer units.
fn block_call_units(lpb: usize, dims: &ModelDims, mode: CostMode) -> u128 {
    let layer_tokens = (lpb * dims.seq_len) as u128;
    match mode {
        CostMode::LayerPass => layer_tokens,
        CostMode::ExactFlops => layer_tokens * dims.layer_flops_per_token(),
    }
}

/// Exact integer cost of executing `calls` leaf blocks.
pub fn cost_units_for_calls(
    sig: &Signature,
    dims: &ModelDims,
    calls: usize,
    mode: CostMode,
) -> Result<u128, LedgerError> {
    dims.validate()?;
    let lpb = feasible_layers_per_block(sig, dims.total_layers)?;
    Ok(calls as u128 * block_call_units(lpb, dims, mode))
}

pub fn step_cost_units(
    plan: &ExecutionPlan,
    dims: &ModelDims,
    mode: CostMode,
) -> Result<u128, LedgerError> {
    cost_units_for_calls(plan.source(), dims, plan.len(), mode)
}

/// Forward cost of one step (per sequence) with every leaf executed.
pub fn step_cost(plan: &ExecutionPlan, dims: &ModelDims, mode: CostMode) -> Result<f64, LedgerError> {
    step_cost_units(plan, dims, mode).map(|u| u as f64)
}

pub fn ledger(plan: &ExecutionPlan, dims: &ModelDims, mode: CostMode) -> Result<CostLedger, LedgerError> {
    Ok(CostLedger {
        mode,
        per_step_cost: step_cost(plan, dims, mode)?,
        param_count: param_count(plan, dims)?,
    })
}

/// Expected per-step cost when every skip-eligible position is dropped
/// independently with probability `p_skip`.
pub fn expected_stochastic_cost(
    plan: &ExecutionPlan,
    dims: &ModelDims,
    p_skip: f64,
    mode: CostMode,
) -> Result<f64, LedgerError> {
    if !(0.0..1.0).contains(&p_skip) {
        return Err(LedgerError::SkipProbability(p_skip));
    }
    let per_call = cost_units_for_calls(plan.source(), dims, 1, mode)? as f64;
    let expected_calls: f64 = plan
        .skip_eligible()
        .iter()
        .map(|&eligible| if eligible { 1.0 - p_skip } else { 1.0 })
        .sum();
    Ok(expected_calls * per_call)
}

/// `floor(baseline_steps * baseline_cost / variant_cost)`, so the variant's
/// total compute never exceeds the baseline's.
pub fn matched_steps_for_costs(baseline_cost: f64, variant_cost: f64, baseline_steps: u64) -> u64 {
    assert!(variant_cost > 0.0, "variant cost must be positive");
    (baseline_steps as f64 * baseline_cost / variant_cost).floor() as u64
}

pub fn matched_steps(
    baseline: &ExecutionPlan,
    variant: &ExecutionPlan,
    dims_baseline: &ModelDims,
    dims_variant: &ModelDims,
    baseline_steps: u64,
    mode: CostMode,
) -> Result<u64, LedgerError> {
    if baseline_steps == 0 {
        return Err(LedgerError::ZeroSteps);
    }
    let b = step_cost_units(baseline, dims_baseline, mode)?;
    let v = step_cost_units(variant, dims_variant, mode)?;
    // Integer arithmetic keeps the floor exact.
    Ok((baseline_steps as u128 * b / v) as u64)
}

/// Compute matching against a stochastic variant, using its expected cost.
pub fn matched_steps_stochastic(
    baseline: &ExecutionPlan,
    variant: &ExecutionPlan,
    dims_baseline: &ModelDims,
    dims_variant: &ModelDims,
    baseline_steps: u64,
    p_skip: f64,
    mode: CostMode,
) -> Result<u64, LedgerError> {
    if baseline_steps == 0 {
        return Err(LedgerError::ZeroSteps);
    }
    if p_skip == 0.0 {
        return matched_steps(baseline, variant, dims_baseline, dims_variant, baseline_steps, mode);
    }
    let b = step_cost(baseline, dims_baseline, mode)?;
    let v = expected_stochastic_cost(variant, dims_variant, p_skip, mode)?;
    Ok(matched_steps_for_costs(b, v, baseline_steps))
}

/// The architecture sweep's signature list, in sweep order after the
/// baseline and repeat-all-over entries.
pub const SWEEP_SIGNATURES: [&str; 9] = [
    "ABB", "ABA", "AAB", "ABBC", "AABC", "ABCC", "ABBB", "AAAB", "AABB",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepCandidate {
    pub signature: Signature,
    pub layers_per_block: usize,
}

impl SweepCandidate {
    pub fn feasible(&self) -> bool {
        self.layers_per_block > 0
    }
}

/// Enumerates the architecture sweep: baseline `A`, repeat-all-over `AA`,
/// `AAA`, `AAAA`, then every listed signature at degrees 1 through 3.
pub fn enumerate_sweep(total_layers: usize) -> Vec<SweepCandidate> {
    let mut out = Vec::with_capacity(4 + SWEEP_SIGNATURES.len() * 3);
    let mut add = |text: &str, degree: u32| {
        let signature = Signature::parse(text, degree).expect("static sweep signature");
        let layers_per_block = signature.layers_per_block(total_layers);
        out.push(SweepCandidate {
            signature,
            layers_per_block,
        });
    };
    for text in ["A", "AA", "AAA", "AAAA"] {
        add(text, 1);
    }
    for text in SWEEP_SIGNATURES {
        for degree in 1..=3 {
            add(text, degree);
        }
    }
    out
}

/// One JSONL record of a sweep manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub signature: String,
    pub degree: u32,
    pub feasible: bool,
    pub layers_per_block: usize,
    pub params: Option<usize>,
    pub steps_matched: Option<u64>,
}

/// Builds sweep manifest records, matching every feasible candidate to
/// `baseline_steps` of `baseline`.
pub fn sweep_records(
    candidates: &[SweepCandidate],
    baseline: &Signature,
    dims: &ModelDims,
    baseline_steps: u64,
    mode: CostMode,
) -> Result<Vec<SweepRecord>, LedgerError> {
    let base_plan = baseline.expand();
    candidates
        .iter()
        .map(|c| {
            let (params, steps) = if c.feasible() {
                let plan = c.signature.expand();
                (
                    Some(param_count(&plan, dims)?),
                    Some(matched_steps(&base_plan, &plan, dims, dims, baseline_steps, mode)?),
                )
            } else {
                (None, None)
            };
            Ok(SweepRecord {
                signature: c.signature.render(),
                degree: c.signature.degree(),
                feasible: c.feasible(),
                layers_per_block: c.layers_per_block,
                params,
                steps_matched: steps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(total_layers: usize, seq_len: usize) -> ModelDims {
        ModelDims {
            d_model: 64,
            n_heads: 4,
            mlp_dim: 256,
            vocab: 100,
            seq_len,
            total_layers,
        }
    }

    fn plan(s: &str) -> ExecutionPlan {
        Signature::parse_tagged(s).unwrap().expand()
    }

    #[test]
    fn validation() {
        let mut d = dims(4, 8);
        assert!(d.validate().is_ok());
        d.n_heads = 3;
        assert!(d.validate().is_err());
        d.n_heads = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn repetition_adds_no_parameters() {
        let d = dims(12, 32);
        assert_eq!(param_count(&plan("ABBC"), &d), param_count(&plan("ABC"), &d));
        assert_eq!(param_count(&plan("AAB"), &d), param_count(&plan("AB"), &d));
        for r in 1..6 {
            assert_eq!(
                param_count(&Signature::rins(r).expand(), &d).unwrap(),
                param_count(&plan("AB"), &d).unwrap()
            );
        }
    }

    #[test]
    fn tiny_param_count_by_hand() {
        // d=8, heads=2, mlp=16, vocab=11, 4 layers, plan AB, seq 5.
        let d = ModelDims {
            d_model: 8,
            n_heads: 2,
            mlp_dim: 16,
            vocab: 11,
            seq_len: 5,
            total_layers: 4,
        };
        let tensors: [usize; 12] = [
            8 * 8, 8 * 8, 8 * 8, 8 * 8, // q k v o
            8, 8, 8, 8,                 // ln1 g/b, ln2 g/b
            8 * 16, 16, 16 * 8, 8,      // w1 b1 w2 b2
        ];
        let layer: usize = tensors.iter().sum();
        assert_eq!(layer, 568);
        let outer = 11 * 8 + 5 * 8 + 8 + 8 + 8 * 11;
        assert_eq!(param_count(&plan("AB"), &d).unwrap(), outer + 4 * layer);
    }

    #[test]
    fn infeasible_plan_is_rejected() {
        let d = dims(12, 32);
        assert!(matches!(
            param_count(&plan("ABBC@d3"), &d),
            Err(LedgerError::Infeasible { unique: 27, .. })
        ));
        assert!(step_cost(&plan("ABBC@d3"), &d, CostMode::LayerPass).is_err());
    }

    #[test]
    fn cost_ratios() {
        let d = dims(12, 32);
        for mode in [CostMode::LayerPass, CostMode::ExactFlops] {
            let abbc = step_cost(&plan("ABBC"), &d, mode).unwrap();
            let abc = step_cost(&plan("ABC"), &d, mode).unwrap();
            assert_eq!(abbc / abc, 4.0 / 3.0);
            assert_eq!(
                step_cost(&plan("A^1B"), &d, mode).unwrap(),
                step_cost(&plan("AB"), &d, mode).unwrap()
            );
        }
        let long = step_cost(&plan("AB"), &dims(12, 1536), CostMode::LayerPass).unwrap();
        let short = step_cost(&plan("AB"), &dims(12, 1024), CostMode::LayerPass).unwrap();
        assert_eq!(long / short, 1.5);
    }

    #[test]
    fn cost_increases_with_rounds() {
        let d = dims(8, 16);
        for mode in [CostMode::LayerPass, CostMode::ExactFlops] {
            let costs: Vec<f64> = (1..6)
                .map(|r| step_cost(&Signature::rins(r).expand(), &d, mode).unwrap())
                .collect();
            assert!(costs.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn matched_step_budgets() {
        let d = dims(12, 32);
        let ab = plan("AB");
        let m = |v: &str| matched_steps(&ab, &plan(v), &d, &d, 200_000, CostMode::LayerPass).unwrap();
        assert_eq!(m("A^2B"), 133_333);
        assert_eq!(m("AB"), 200_000);
        assert_eq!(m("ABAB"), 100_000);
        assert!(matched_steps(&ab, &ab, &d, &d, 0, CostMode::LayerPass).is_err());
    }

    #[test]
    fn modes_agree_on_matched_steps() {
        let d = dims(12, 32);
        let ab = plan("AB");
        for v in ["AAB", "AAAB", "ABAB", "ABBC", "AB@d2"] {
            let p = plan(v);
            assert_eq!(
                matched_steps(&ab, &p, &d, &d, 200_000, CostMode::LayerPass).unwrap(),
                matched_steps(&ab, &p, &d, &d, 200_000, CostMode::ExactFlops).unwrap(),
                "{v}"
            );
        }
    }

    #[test]
    fn stochastic_expected_cost() {
        let d = dims(2, 1);
        let a3b = plan("A^3B");
        let ab = step_cost(&plan("AB"), &d, CostMode::LayerPass).unwrap();
        let pass = ab / 2.0;
        let e = |p| expected_stochastic_cost(&a3b, &d, p, CostMode::LayerPass).unwrap() / pass;
        assert_eq!(e(0.0), 4.0);
        assert_eq!(e(0.5), 3.0);
        assert!((e(0.8) - 2.4).abs() < 1e-12);
        assert_eq!(e(0.5) * pass / ab, 1.5);
        assert!(expected_stochastic_cost(&a3b, &d, 1.0, CostMode::LayerPass).is_err());
        assert!(expected_stochastic_cost(&a3b, &d, -0.1, CostMode::LayerPass).is_err());
        // Affine with negative slope.
        let (a, b, c) = (e(0.1), e(0.4), e(0.7));
        assert!(((b - a) - (c - b)).abs() < 1e-12 && b < a);
        assert!((e(0.999_999) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn stochastic_matching() {
        let d = dims(12, 32);
        let ab = plan("AB");
        let a3b = plan("A^3B");
        let steps =
            matched_steps_stochastic(&ab, &a3b, &d, &d, 30_000, 0.5, CostMode::LayerPass).unwrap();
        assert_eq!(steps, 20_000);
        assert_eq!(
            matched_steps_stochastic(&ab, &a3b, &d, &d, 30_000, 0.0, CostMode::LayerPass).unwrap(),
            15_000
        );
    }

    #[test]
    fn sweep_enumeration() {
        let all = enumerate_sweep(12);
        assert_eq!(all.len(), 31);
        assert_eq!(all[0].signature.tagged(), "A@d1");
        assert_eq!(all[3].signature.tagged(), "AAAA@d1");
        assert_eq!(all[4].signature.tagged(), "ABB@d1");
        assert_eq!(all[5].signature.tagged(), "ABB@d2");
        let abbc3 = all.iter().find(|c| c.signature.tagged() == "ABBC@d3").unwrap();
        assert!(!abbc3.feasible());

        let one = enumerate_sweep(1);
        for c in &one {
            assert_eq!(c.feasible(), c.signature.unique_leaf_count() == 1);
        }
    }

    #[test]
    fn sweep_manifest_records() {
        let d = dims(12, 32);
        let cands = enumerate_sweep(12);
        let recs = sweep_records(&cands, &Signature::parse("AB", 1).unwrap(), &d, 1000, CostMode::LayerPass).unwrap();
        assert_eq!(recs.len(), 31);
        let aab = recs.iter().find(|r| r.signature == "AAB" && r.degree == 1).unwrap();
        assert_eq!(aab.steps_matched, Some(666));
        let bad = recs.iter().find(|r| r.signature == "ABBC" && r.degree == 3).unwrap();
        assert!(!bad.feasible && bad.params.is_none());
        let line = serde_json::to_string(aab).unwrap();
        assert!(line.starts_with("{\"signature\":\"AAB\",\"degree\":1,\"feasible\":true"));
    }
}
