//! Compute-matched training: learning-rate schedule, Adam and the step loop.

pub mod adam;
pub mod trace;

use std::cell::RefCell;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{pack_rows, CorpusError, PackedRow};
use crate::ledger::{cost_units_for_calls, expected_stochastic_cost, CostMode, LedgerError};
use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{Example, ModelError, ModelParams, RecursionPolicy, RecursiveModel};
pub use adam::{adam_step, AdamConfig, AdamState, StepStats};
pub use trace::{eval_key, LossTrace, TraceRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train.{field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("training stream has no full window")]
    EmptyStream,
    #[error("resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn default_clip() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_eval_interval() -> u64 {
    200
}
fn default_eval_rows() -> usize {
    32
}
fn default_divergence() -> f64 {
    10.0
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub cooldown_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    /// Held-out windows scored per eval corpus.
    #[serde(default = "default_eval_rows")]
    pub eval_rows: usize,
    /// Rounds to evaluate at; empty means every round up to `r_max` for
    /// stochastic policies and `eval_rounds()` otherwise.
    #[serde(default)]
    pub eval_rounds: Vec<usize>,
    #[serde(default)]
    pub cost_mode: CostMode,
    /// Stop attention at document boundaries inside packed rows.
    #[serde(default)]
    pub mask_reset: bool,
    /// Reshuffle training windows every pass over the stream.
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Abort when the batch loss exceeds this multiple of the first loss.
    #[serde(default = "default_divergence")]
    pub divergence_factor: f64,
}

impl TrainConfig {
    /// Desk-scale defaults around the given step budget.
    pub fn with_steps(total_steps: u64) -> Self {
        let warmup = (total_steps / 20).max(1).min(total_steps);
        TrainConfig {
            peak_lr: 1e-3,
            weight_decay: 5e-5,
            warmup_steps: warmup,
            cooldown_steps: (total_steps / 10).min(total_steps - warmup),
            total_steps,
            batch_size: 8,
            grad_clip_norm: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_interval: 200,
            eval_rows: 32,
            eval_rounds: Vec::new(),
            cost_mode: CostMode::LayerPass,
            mask_reset: false,
            shuffle: true,
            divergence_factor: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, message: String| Err(TrainError::Config { field, message });
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", format!("must be > 0, got {}", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be >= 1".into());
        }
        if self.warmup_steps + self.cooldown_steps > self.total_steps {
            return bad(
                "warmup_steps",
                format!(
                    "warmup {} + cooldown {} exceeds total_steps {}",
                    self.warmup_steps, self.cooldown_steps, self.total_steps
                ),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !self.grad_clip_norm.is_finite() {
            return bad("grad_clip_norm", "must be finite".into());
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(field, format!("must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be > 0".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be >= 1".into());
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor", "must be > 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
        }
    }

    pub fn resolved_eval_rounds(&self, policy: &RecursionPolicy) -> Vec<usize> {
        if !self.eval_rounds.is_empty() {
            return self.eval_rounds.clone();
        }
        if policy.p_skip > 0.0 {
            (1..=policy.r_max).collect()
        } else {
            vec![policy.eval_rounds()]
        }
    }
}

/// Learning rate before update number `step`: linear warmup to `peak_lr`,
/// then `peak_lr * sqrt(warmup / step)`, then a linear ramp from the
/// value at `total - cooldown` down to zero at `total`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> Result<f64, TrainError> {
    if step > cfg.total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    let w = cfg.warmup_steps;
    let rsqrt = |s: u64| {
        let w = w.max(1) as f64;
        cfg.peak_lr * (w / (s as f64).max(w)).sqrt()
    };
    let cool_start = cfg.total_steps - cfg.cooldown_steps;
    Ok(if step < w {
        cfg.peak_lr * step as f64 / w as f64
    } else if step <= cool_start {
        rsqrt(step)
    } else {
        rsqrt(cool_start) * (cfg.total_steps - step) as f64 / cfg.cooldown_steps as f64
    })
}

/// Training windows served cyclically; batch `s` is fully determined by
/// `s`, so a resumed run sees exactly the batches it would have seen.
#[derive(Debug)]
pub struct TrainStream {
    rows: Vec<PackedRow>,
    shuffle_seed: Option<u64>,
    cached: RefCell<Option<(u64, Vec<usize>)>>,
}

impl TrainStream {
    pub fn new(rows: Vec<PackedRow>, shuffle_seed: Option<u64>) -> Result<Self, TrainError> {
        if rows.is_empty() {
            return Err(TrainError::EmptyStream);
        }
        Ok(TrainStream {
            rows,
            shuffle_seed,
            cached: RefCell::new(None),
        })
    }

    pub fn from_tokens(tokens: &[u32], eos: u32, seq_len: usize, shuffle_seed: Option<u64>) -> Result<Self, TrainError> {
        Self::new(pack_rows(tokens, eos, seq_len)?, shuffle_seed)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn index(&self, k: u64) -> usize {
        let n = self.rows.len() as u64;
        let (epoch, pos) = (k / n, (k % n) as usize);
        let Some(seed) = self.shuffle_seed else {
            return pos;
        };
        let mut cached = self.cached.borrow_mut();
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.rows.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            perm.shuffle(&mut rng);
            *cached = Some((epoch, perm));
        }
        cached.as_ref().expect("filled above").1[pos]
    }

    /// Passes over the stream completed before batch `step` starts.
    pub fn epoch_of(&self, step: u64, batch_size: usize) -> u64 {
        step * batch_size as u64 / self.rows.len() as u64
    }

    pub fn batch(&self, step: u64, batch_size: usize) -> Vec<&PackedRow> {
        (0..batch_size as u64)
            .map(|i| &self.rows[self.index(step * batch_size as u64 + i)])
            .collect()
    }
}

/// Held-out windows scored at every evaluation.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub rows: Vec<PackedRow>,
}

impl EvalSet {
    pub fn from_tokens(name: &str, tokens: &[u32], eos: u32, seq_len: usize, max_rows: usize) -> Result<Self, TrainError> {
        let mut rows = pack_rows(tokens, eos, seq_len)?;
        rows.truncate(max_rows);
        if rows.is_empty() {
            return Err(TrainError::EmptyStream);
        }
        Ok(EvalSet {
            name: name.to_string(),
            rows,
        })
    }
}

fn examples<'a>(rows: &[&'a PackedRow], mask_reset: bool) -> Vec<Example<'a>> {
    rows.iter()
        .map(|r| Example {
            tokens: &r.tokens,
            targets: &r.targets,
            segments: mask_reset.then_some(r.segments.as_slice()),
        })
        .collect()
}

/// Mean next-token log-perplexity of `model` on `set` at `rounds`.
pub fn eval_loss(model: &RecursiveModel, set: &EvalSet, rounds: usize, mask_reset: bool) -> Result<f64, TrainError> {
    let route = model.route(rounds)?;
    let rows: Vec<&PackedRow> = set.rows.iter().collect();
    Ok(model.batch_loss(&examples(&rows, mask_reset), &route)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    Diverged { step: u64, loss: f64, initial_loss: f64 },
    NonFiniteGradient { step: u64, tensor: String, grad_norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub status: TrainStatus,
    pub trace: LossTrace,
    /// Ledger expectation of one step's cost under the recursion policy.
    pub expected_step_cost: f64,
}

impl TrainOutcome {
    /// Realized mean per-step cost.
    pub fn realized_step_cost(&self) -> f64 {
        match self.trace.last() {
            Some(r) => r.compute / r.step as f64,
            None => 0.0,
        }
    }
}

enum StepResult {
    Continue,
    Abort(TrainStatus),
}

/// Owns the model and optimizer state for one run.
pub struct Trainer<'a> {
    pub model: RecursiveModel,
    pub adam: AdamState<ModelParams>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub compute: f64,
    pub initial_loss: Option<f64>,
    pub trace: LossTrace,
    data: &'a TrainStream,
    evals: &'a [EvalSet],
    eval_rounds: Vec<usize>,
    expected_step_cost: f64,
    epochs_seen: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: RecursiveModel, cfg: TrainConfig, data: &'a TrainStream, evals: &'a [EvalSet]) -> Result<Self, TrainError> {
        cfg.validate()?;
        let adam = AdamState::new(&model.params);
        Self::assemble(model, adam, cfg, data, evals)
    }

    fn assemble(
        model: RecursiveModel,
        adam: AdamState<ModelParams>,
        cfg: TrainConfig,
        data: &'a TrainStream,
        evals: &'a [EvalSet],
    ) -> Result<Self, TrainError> {
        let eval_rounds = cfg.resolved_eval_rounds(&model.policy);
        for &r in &eval_rounds {
            model.route(r)?;
        }
        let expected_step_cost = expected_stochastic_cost(&model.plan, &model.dims, model.policy.p_skip, cfg.cost_mode)?;
        Ok(Trainer {
            model,
            adam,
            cfg,
            step: 0,
            compute: 0.0,
            initial_loss: None,
            trace: LossTrace::default(),
            data,
            evals,
            eval_rounds,
            expected_step_cost,
            epochs_seen: 0,
        })
    }

    pub fn expected_step_cost(&self) -> f64 {
        self.expected_step_cost
    }

    /// Model, optimizer moments and loop counters in one checkpoint.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, self.step);
        ck.push_params("adam.m.", &self.adam.m);
        ck.push_params("adam.v.", &self.adam.v);
        ck.extra = serde_json::json!({
            "adam_t": self.adam.t,
            "compute": self.compute,
            "initial_loss": self.initial_loss,
        });
        ck
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// trace is cut back to the checkpoint step.
    pub fn resume(
        ck: &Checkpoint,
        mut trace: LossTrace,
        cfg: TrainConfig,
        data: &'a TrainStream,
        evals: &'a [EvalSet],
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = ck.to_model()?;
        let mut adam = AdamState::new(&model.params);
        ck.load_params("adam.m.", &mut adam.m)?;
        ck.load_params("adam.v.", &mut adam.v)?;
        let field = |name: &str| {
            ck.extra
                .get(name)
                .cloned()
                .ok_or_else(|| TrainError::Resume(format!("checkpoint lacks {name}")))
        };
        adam.t = field("adam_t")?
            .as_u64()
            .ok_or_else(|| TrainError::Resume("adam_t is not an integer".into()))?;
        let compute = field("compute")?
            .as_f64()
            .ok_or_else(|| TrainError::Resume("compute is not a number".into()))?;
        let initial_loss = field("initial_loss")?.as_f64();
        trace.truncate_after(ck.step);
        let last_step = trace.last().map_or(0, |r| r.step);
        if last_step != ck.step {
            return Err(TrainError::Resume(format!(
                "trace ends at step {last_step}, checkpoint is at step {}",
                ck.step
            )));
        }
        let mut t = Self::assemble(model, adam, cfg, data, evals)?;
        t.step = ck.step;
        t.compute = compute;
        t.initial_loss = initial_loss;
        t.trace = trace;
        t.epochs_seen = data.epoch_of(ck.step, t.cfg.batch_size);
        Ok(t)
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        rng
    }

    fn step_once(&mut self) -> Result<StepResult, TrainError> {
        let s = self.step + 1;
        let lr = lr_at(&self.cfg, s)?;
        let route = self.model.sample_route(&mut self.step_rng(s));
        let epoch = self.data.epoch_of(self.step + 1, self.cfg.batch_size);
        if epoch > self.epochs_seen {
            log::info!("training stream exhausted after {epoch} pass(es); cycling");
            self.epochs_seen = epoch;
        }
        let rows = self.data.batch(self.step, self.cfg.batch_size);
        let (loss, grads) = self
            .model
            .batch_loss_and_grads(&examples(&rows, self.cfg.mask_reset), &route)?;
        let initial = *self.initial_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > self.cfg.divergence_factor * initial {
            log::warn!("step {s}: loss {loss} exceeds {}x initial {initial}; aborting", self.cfg.divergence_factor);
            return Ok(StepResult::Abort(TrainStatus::Diverged {
                step: s,
                loss,
                initial_loss: initial,
            }));
        }
        if let Err(nf) = adam_step(&mut self.model.params, &grads, &mut self.adam, &self.cfg.adam(), lr) {
            let tensor = self.model.params.names()[nf.tensor].clone();
            log::error!("step {s}: non-finite gradient in {tensor} (norm {})", nf.grad_norm);
            return Ok(StepResult::Abort(TrainStatus::NonFiniteGradient {
                step: s,
                tensor,
                grad_norm: nf.grad_norm,
            }));
        }
        let cost = cost_units_for_calls(self.model.plan.source(), &self.model.dims, route.calls.len(), self.cfg.cost_mode)?;
        self.step = s;
        self.compute += cost as f64;
        self.trace
            .push(TraceRecord {
                step: s,
                compute: self.compute,
                train_loss: loss,
                rounds: route.rounds,
                lr,
                eval: Default::default(),
            })
            .expect("step and compute increase");
        Ok(StepResult::Continue)
    }

    /// Scores every eval set at every configured round count and attaches
    /// the results to the latest trace record.
    pub fn evaluate(&mut self) -> Result<(), TrainError> {
        let mut results = Vec::new();
        for set in self.evals {
            for &r in &self.eval_rounds {
                let loss = eval_loss(&self.model, set, r, self.cfg.mask_reset)?;
                results.push((eval_key(&set.name, r), loss));
            }
        }
        if let Some(rec) = self.trace.records.last_mut() {
            rec.eval.extend(results);
        }
        Ok(())
    }

    /// Trains to `total_steps`, evaluating every `eval_interval` steps and
    /// at the end. `on_eval` runs after each evaluation (for checkpoints).
    pub fn run(&mut self, mut on_eval: impl FnMut(&Self) -> Result<(), TrainError>) -> Result<TrainOutcome, TrainError> {
        let mut status = TrainStatus::Completed;
        while self.step < self.cfg.total_steps {
            if let StepResult::Abort(s) = self.step_once()? {
                status = s;
                break;
            }
            if self.step % self.cfg.eval_interval == 0 || self.step == self.cfg.total_steps {
                self.evaluate()?;
                on_eval(self)?;
            }
        }
        Ok(TrainOutcome {
            status,
            trace: self.trace.clone(),
            expected_step_cost: self.expected_step_cost,
        })
    }
}

/// Trains `model` in place with no checkpoint hook.
pub fn train(
    model: RecursiveModel,
    data: &TrainStream,
    evals: &[EvalSet],
    cfg: TrainConfig,
) -> Result<(RecursiveModel, TrainOutcome), TrainError> {
    let mut t = Trainer::new(model, cfg, data, evals)?;
    let outcome = t.run(|_| Ok(()))?;
    Ok((t.model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(warmup: u64, cooldown: u64, total: u64) -> TrainConfig {
        TrainConfig {
            warmup_steps: warmup,
            cooldown_steps: cooldown,
            peak_lr: 1e-3,
            ..TrainConfig::with_steps(total)
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(100, 100, 1000);
        assert_eq!(lr_at(&c, 100).unwrap(), 1e-3);
        assert_eq!(lr_at(&c, 1000).unwrap(), 0.0);
        assert!((lr_at(&c, 400).unwrap() - 0.5e-3).abs() < 1e-18);
        assert_eq!(lr_at(&c, 0).unwrap(), 0.0);
        assert!((lr_at(&c, 50).unwrap() - 0.5e-3).abs() < 1e-18);
        assert!(lr_at(&c, 1001).is_err());
        let at_cool = 1e-3 * (100.0f64 / 900.0).sqrt();
        assert!((lr_at(&c, 950).unwrap() - at_cool * 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_field() {
        let mut c = cfg(600, 600, 1000);
        assert!(matches!(c.validate(), Err(TrainError::Config { field: "warmup_steps", .. })));
        c = cfg(10, 10, 100);
        c.peak_lr = 0.0;
        assert!(matches!(c.validate(), Err(TrainError::Config { field: "peak_lr", .. })));
    }

    proptest! {
        #[test]
        fn schedule_is_continuous_at_joints(w in 1u64..500, cd in 1u64..500, extra in 0u64..1000, peak in 1e-5f64..1e-1) {
            let c = TrainConfig { peak_lr: peak, ..cfg(w, cd, w + cd + extra) };
            let f = |s: f64| {
                // Piecewise formulas evaluated at real-valued steps.
                let cool = (c.total_steps - cd) as f64;
                if s < w as f64 { peak * s / w as f64 }
                else if s <= cool { peak * (w as f64 / s).sqrt() }
                else { peak * (w as f64 / cool).sqrt() * (c.total_steps as f64 - s) / cd as f64 }
            };
            for joint in [w as f64, (c.total_steps - cd) as f64] {
                let left = f(joint - 1e-9);
                let right = f(joint + 1e-9);
                prop_assert!((left - right).abs() < 1e-9 * peak.max(1.0) + 1e-12);
            }
            for s in [0, w, w + extra / 2, c.total_steps - cd, c.total_steps] {
                prop_assert!((lr_at(&c, s).unwrap() - f(s as f64)).abs() <= 1e-15 * peak.max(1.0) * 10.0);
                prop_assert!(lr_at(&c, s).unwrap() <= peak);
            }
        }
    }
}
