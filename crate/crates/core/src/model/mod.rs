//! Decoder-only transformer whose depth follows an [`ExecutionPlan`].
//!
//! For `A^r B` plans the recursive block `A` is applied to its own output
//! `rounds` times before `B`. Optional per-round linear adapters sit at the
//! `A -> B` boundary, and with KV sharing every repeated call of a block
//! attends to the keys and values computed by that block's first call.

pub mod checkpoint;
pub mod layer;
pub mod ops;
pub mod params;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{feasible_layers_per_block, LedgerError, ModelDims};
use crate::signature::{ExecutionPlan, Signature};
use layer::{AttnMask, KvGrad, LayerCache, LayerShape};
use ops::{layer_norm, layer_norm_backward, log_sum_exp, matmul, matmul_at_acc, matmul_bt, LayerNormCache};
pub use params::{AdapterFraction, LayerParams, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("rounds {rounds} outside [1, {r_max}]")]
    RoundsOutOfRange { rounds: usize, r_max: usize },
    #[error("token id {token} at position {position} >= vocab {vocab}")]
    TokenOutOfRange {
        token: u32,
        position: usize,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds context {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid recursion policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// How recursion is trained and evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionPolicy {
    pub r_max: usize,
    pub p_skip: f64,
    pub kv_share: bool,
    pub adapters: bool,
    pub inference_rounds: Option<usize>,
}

impl RecursionPolicy {
    /// Deterministic policy matching the signature: `r` for `A^r B`,
    /// 1 for everything else.
    pub fn for_signature(sig: &Signature) -> Self {
        RecursionPolicy {
            r_max: sig.rins_rounds().unwrap_or(1),
            p_skip: 0.0,
            kv_share: false,
            adapters: false,
            inference_rounds: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.r_max < 1 {
            return Err(ModelError::Policy("r_max must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_skip) {
            return Err(ModelError::Policy(format!("p_skip {} not in [0, 1)", self.p_skip)));
        }
        if let Some(r) = self.inference_rounds {
            if r < 1 || r > self.r_max {
                return Err(ModelError::Policy(format!(
                    "inference_rounds {r} outside [1, {}]",
                    self.r_max
                )));
            }
        }
        Ok(())
    }

    pub fn eval_rounds(&self) -> usize {
        self.inference_rounds.unwrap_or(self.r_max)
    }
}

/// Number of recursion rounds for one training step:
/// `1 + Binomial(r_max - 1, 1 - p_skip)`. The first and last calls of the
/// plan always run, so every round beyond the first survives independently.
pub fn sample_rounds<R: Rng + ?Sized>(policy: &RecursionPolicy, rng: &mut R) -> usize {
    1 + (1..policy.r_max)
        .filter(|_| rng.random::<f64>() >= policy.p_skip)
        .count()
}

/// Concrete sequence of leaf calls for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub calls: Vec<usize>,
    /// `(call position, adapter number)`: the adapter is applied to the
    /// hidden state entering that call.
    pub adapter: Option<(usize, usize)>,
    /// Recursion rounds this route represents (1 for non-RINS plans
    /// executed in full).
    pub rounds: usize,
}

/// Row-major `seq x vocab` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub seq: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    /// `log p(token | prefix)` at position `t`.
    pub fn log_prob(&self, t: usize, token: u32) -> f64 {
        let row = self.row(t);
        row[token as usize] - log_sum_exp(row)
    }
}

/// Keys and values of the recursive block (`A`) kept for reuse.
///
/// `layers[l]` holds one `(keys, values)` entry per freshly computed pair
/// at layer `l` of block `A`. With KV sharing there is exactly one entry per
/// layer regardless of how many rounds ran.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KVCacheSet {
    pub layers: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl KVCacheSet {
    pub fn byte_size(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|(k, v)| (k.len() + v.len()) * std::mem::size_of::<f64>())
            .sum()
    }
}

/// KV-cache bytes for block `A` of an `A^r B` model at full context:
/// `layers_of_A * 2 * seq_len * d_model * element_size`, multiplied by
/// `rounds` unless KV sharing is on.
pub fn kv_cache_bytes(dims: &ModelDims, policy: &RecursionPolicy, rounds: usize, element_size: usize) -> u64 {
    let layers_a = (dims.total_layers / 2) as u64;
    let per_round = layers_a * 2 * dims.seq_len as u64 * dims.d_model as u64 * element_size as u64;
    if policy.kv_share {
        per_round
    } else {
        per_round * rounds as u64
    }
}

/// One training/evaluation sequence.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub targets: &'a [u32],
    /// Document ids per position; when set, attention does not cross
    /// document boundaries.
    pub segments: Option<&'a [u32]>,
}

struct CallTrace {
    leaf: usize,
    adapter_input: Option<(usize, Vec<f64>)>,
    layers: Vec<LayerCache>,
}

struct ForwardTrace {
    calls: Vec<CallTrace>,
    final_ln: LayerNormCache,
    final_hidden: Vec<f64>,
    logits: Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecursiveModel {
    pub dims: ModelDims,
    pub plan: ExecutionPlan,
    pub policy: RecursionPolicy,
    pub params: ModelParams,
}

impl RecursiveModel {
    pub fn new(
        signature: &Signature,
        dims: ModelDims,
        policy: RecursionPolicy,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let plan = signature.expand();
        let (lpb, adapters) = Self::check(&plan, &dims, &policy)?;
        let params = ModelParams::init(&dims, plan.unique_leaf_count(), lpb, adapters, seed);
        Ok(RecursiveModel {
            dims,
            plan,
            policy,
            params,
        })
    }

    /// Assembles a model from existing weights, validating shapes.
    pub fn from_parts(
        plan: ExecutionPlan,
        dims: ModelDims,
        policy: RecursionPolicy,
        params: ModelParams,
    ) -> Result<Self, ModelError> {
        let (lpb, adapters) = Self::check(&plan, &dims, &policy)?;
        let want = ModelParams::zeros(&dims, plan.unique_leaf_count(), lpb, adapters);
        if want.shapes() != params.shapes() {
            return Err(ModelError::Shape(
                "parameter shapes do not match dims, plan and policy".into(),
            ));
        }
        Ok(RecursiveModel {
            dims,
            plan,
            policy,
            params,
        })
    }

    fn check(plan: &ExecutionPlan, dims: &ModelDims, policy: &RecursionPolicy) -> Result<(usize, usize), ModelError> {
        dims.validate()?;
        policy.validate()?;
        let lpb = feasible_layers_per_block(plan.source(), dims.total_layers)?;
        let rins = plan.source().rins_rounds();
        if policy.r_max != rins.unwrap_or(1) {
            return Err(ModelError::Policy(format!(
                "r_max {} does not match signature {}",
                policy.r_max,
                plan.source()
            )));
        }
        if policy.adapters && rins.is_none() {
            return Err(ModelError::Policy(format!(
                "adapters need an A^r B signature, got {}",
                plan.source()
            )));
        }
        let adapters = if policy.adapters { policy.r_max } else { 0 };
        Ok((lpb, adapters))
    }

    pub fn layers_per_block(&self) -> usize {
        self.params.layers_per_block()
    }

    /// Swaps the weights of this model into a new policy. Adapter storage is
    /// added (identity) or dropped as needed.
    pub fn with_policy(&self, policy: RecursionPolicy) -> Result<Self, ModelError> {
        let (lpb, adapters) = Self::check(&self.plan, &self.dims, &policy)?;
        let mut params = self.params.clone();
        if params.adapters.len() != adapters {
            params.adapters = ModelParams::init(&self.dims, 0, lpb, adapters, 0).adapters;
        }
        Ok(RecursiveModel {
            dims: self.dims,
            plan: self.plan.clone(),
            policy,
            params,
        })
    }

    fn shape(&self, seq: usize) -> LayerShape {
        LayerShape {
            seq,
            d_model: self.dims.d_model,
            n_heads: self.dims.n_heads,
            mlp_dim: self.dims.mlp_dim,
        }
    }

    /// Route that runs the recursive block `rounds` times. Non-RINS plans
    /// only accept `rounds = 1` and execute their full leaf sequence.
    pub fn route(&self, rounds: usize) -> Result<Route, ModelError> {
        if rounds < 1 || rounds > self.policy.r_max {
            return Err(ModelError::RoundsOutOfRange {
                rounds,
                r_max: self.policy.r_max,
            });
        }
        match self.plan.source().rins_rounds() {
            Some(_) => {
                let mut calls = vec![0; rounds];
                calls.push(1);
                let adapter = self.policy.adapters.then_some((rounds, rounds));
                Ok(Route {
                    calls,
                    adapter,
                    rounds,
                })
            }
            None => Ok(Route {
                calls: self.plan.leaf_sequence().to_vec(),
                adapter: None,
                rounds: 1,
            }),
        }
    }

    /// Route that executes only the plan positions marked in `executed`.
    pub fn route_from_mask(&self, executed: &[bool]) -> Result<Route, ModelError> {
        if executed.len() != self.plan.len() {
            return Err(ModelError::Shape(format!(
                "execution mask has {} entries, plan has {}",
                executed.len(),
                self.plan.len()
            )));
        }
        if self.plan.source().rins_rounds().is_some() {
            let r = self.policy.r_max;
            if !executed[0] || !executed[r] {
                return Err(ModelError::Shape("first and last calls must execute".into()));
            }
            return self.route(executed[..r].iter().filter(|&&e| e).count());
        }
        let calls: Vec<usize> = self
            .plan
            .leaf_sequence()
            .iter()
            .zip(executed)
            .filter_map(|(&l, &e)| e.then_some(l))
            .collect();
        if calls.is_empty() {
            return Err(ModelError::Shape("empty route".into()));
        }
        Ok(Route {
            calls,
            adapter: None,
            rounds: 1,
        })
    }

    /// Samples the route for one training step. `A^r B` plans draw the
    /// round count; other plans drop each skip-eligible call independently.
    pub fn sample_route<R: Rng + ?Sized>(&self, rng: &mut R) -> Route {
        if self.plan.source().rins_rounds().is_some() {
            return self
                .route(sample_rounds(&self.policy, rng))
                .expect("sampled rounds within range");
        }
        let executed: Vec<bool> = self
            .plan
            .skip_eligible()
            .iter()
            .map(|&eligible| !eligible || rng.random::<f64>() >= self.policy.p_skip)
            .collect();
        self.route_from_mask(&executed)
            .unwrap_or_else(|_| self.route(1).expect("full route"))
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Shape("empty sequence".into()));
        }
        if tokens.len() > self.dims.seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.dims.seq_len,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.dims.vocab)
        {
            return Err(ModelError::TokenOutOfRange {
                token,
                position,
                vocab: self.dims.vocab,
            });
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32], route: &Route, mask: AttnMask<'_>, mut kv_out: Option<&mut KVCacheSet>) -> ForwardTrace {
        let d = self.dims.d_model;
        let t = tokens.len();
        let shape = self.shape(t);
        let p = &self.params;

        let mut x = vec![0.0; t * d];
        for (pos, &tok) in tokens.iter().enumerate() {
            let row = &mut x[pos * d..(pos + 1) * d];
            let te = &p.token_embedding[tok as usize * d..(tok as usize + 1) * d];
            let pe = &p.position_embedding[pos * d..(pos + 1) * d];
            for c in 0..d {
                row[c] = te[c] + pe[c];
            }
        }

        let mut first_call: HashMap<usize, usize> = HashMap::new();
        let mut calls: Vec<CallTrace> = Vec::with_capacity(route.calls.len());
        for (pos, &leaf) in route.calls.iter().enumerate() {
            let mut adapter_input = None;
            if let Some((at, k)) = route.adapter {
                if at == pos {
                    let y = matmul(&x, &p.adapters[k - 1], t, d, d);
                    adapter_input = Some((k, std::mem::replace(&mut x, y)));
                }
            }
            let owner = if self.policy.kv_share {
                first_call.get(&leaf).copied()
            } else {
                None
            };
            let mut layers = Vec::with_capacity(p.blocks[leaf].len());
            for (l, lp) in p.blocks[leaf].iter().enumerate() {
                let shared = owner.map(|o| {
                    let c = &calls[o].layers[l];
                    (c.k.as_slice(), c.v.as_slice())
                });
                let (y, cache) = layer::forward(lp, &x, shape, mask, shared);
                if leaf == 0 && !cache.kv_shared {
                    if let Some(kv) = kv_out.as_deref_mut() {
                        if kv.layers.len() <= l {
                            kv.layers.resize_with(l + 1, Vec::new);
                        }
                        kv.layers[l].push((cache.k.clone(), cache.v.clone()));
                    }
                }
                layers.push(cache);
                x = y;
            }
            first_call.entry(leaf).or_insert(pos);
            calls.push(CallTrace {
                leaf,
                adapter_input,
                layers,
            });
        }

        let (final_hidden, final_ln) = layer_norm(&x, &p.final_gain, &p.final_bias);
        let logits = Logits {
            seq: t,
            vocab: self.dims.vocab,
            data: matmul(&final_hidden, &p.head, t, d, self.dims.vocab),
        };
        ForwardTrace {
            calls,
            final_ln,
            final_hidden,
            logits,
        }
    }

    fn backward(&self, tokens: &[u32], route: &Route, trace: &ForwardTrace, dlogits: &[f64], g: &mut ModelParams) {
        let d = self.dims.d_model;
        let v = self.dims.vocab;
        let t = tokens.len();
        let shape = self.shape(t);
        let p = &self.params;

        matmul_at_acc(&trace.final_hidden, dlogits, t, d, v, &mut g.head);
        let dh = matmul_bt(dlogits, &p.head, t, v, d);
        let mut dx = layer_norm_backward(&dh, &trace.final_ln, &p.final_gain, &mut g.final_gain, &mut g.final_bias);

        let mut first_call: HashMap<usize, usize> = HashMap::new();
        for (pos, &leaf) in route.calls.iter().enumerate() {
            first_call.entry(leaf).or_insert(pos);
        }
        let mut pending: HashMap<(usize, usize), KvGrad> = HashMap::new();
        for (pos, call) in trace.calls.iter().enumerate().rev() {
            let leaf = call.leaf;
            for l in (0..call.layers.len()).rev() {
                let extra = pending.remove(&(pos, l));
                let (dxi, routed) = layer::backward(
                    &p.blocks[leaf][l],
                    &call.layers[l],
                    &dx,
                    shape,
                    &mut g.blocks[leaf][l],
                    extra,
                );
                if let Some((dk, dv)) = routed {
                    let owner = first_call[&leaf];
                    let slot = pending
                        .entry((owner, l))
                        .or_insert_with(|| (vec![0.0; t * d], vec![0.0; t * d]));
                    ops::add_assign(&mut slot.0, &dk);
                    ops::add_assign(&mut slot.1, &dv);
                }
                dx = dxi;
            }
            if let Some((k, input)) = &call.adapter_input {
                matmul_at_acc(input, &dx, t, d, d, &mut g.adapters[k - 1]);
                dx = matmul_bt(&dx, &p.adapters[k - 1], t, d, d);
            }
        }

        for (pos, &tok) in tokens.iter().enumerate() {
            let row = &dx[pos * d..(pos + 1) * d];
            ops::add_assign(&mut g.token_embedding[tok as usize * d..(tok as usize + 1) * d], row);
            ops::add_assign(&mut g.position_embedding[pos * d..(pos + 1) * d], row);
        }
    }

    pub fn forward(&self, tokens: &[u32], rounds: usize) -> Result<Logits, ModelError> {
        let route = self.route(rounds)?;
        self.forward_route(tokens, &route, None)
    }

    pub fn forward_route(&self, tokens: &[u32], route: &Route, segments: Option<&[u32]>) -> Result<Logits, ModelError> {
        self.check_tokens(tokens)?;
        let mask = self.mask(tokens.len(), segments)?;
        Ok(self.run(tokens, route, mask, None).logits)
    }

    /// Forward pass that also returns the keys and values held for block `A`.
    pub fn forward_with_cache(&self, tokens: &[u32], rounds: usize) -> Result<(Logits, KVCacheSet), ModelError> {
        let route = self.route(rounds)?;
        self.check_tokens(tokens)?;
        let mut kv = KVCacheSet::default();
        let trace = self.run(tokens, &route, AttnMask::Causal, Some(&mut kv));
        Ok((trace.logits, kv))
    }

    fn mask<'a>(&self, len: usize, segments: Option<&'a [u32]>) -> Result<AttnMask<'a>, ModelError> {
        match segments {
            None => Ok(AttnMask::Causal),
            Some(s) if s.len() == len => Ok(AttnMask::Segmented(s)),
            Some(s) => Err(ModelError::Shape(format!("{} segment ids for {len} tokens", s.len()))),
        }
    }

    /// Mean next-token cross-entropy (natural log).
    pub fn loss(&self, tokens: &[u32], targets: &[u32], rounds: usize) -> Result<f64, ModelError> {
        let route = self.route(rounds)?;
        let ex = Example {
            tokens,
            targets,
            segments: None,
        };
        self.batch_loss(&[ex], &route)
    }

    pub fn batch_loss(&self, batch: &[Example<'_>], route: &Route) -> Result<f64, ModelError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for ex in batch {
            self.check_example(ex)?;
            let logits = self.forward_route(ex.tokens, route, ex.segments)?;
            for (pos, &tgt) in ex.targets.iter().enumerate() {
                total -= logits.log_prob(pos, tgt);
            }
            count += ex.targets.len();
        }
        Ok(total / count as f64)
    }

    fn check_example(&self, ex: &Example<'_>) -> Result<(), ModelError> {
        if ex.tokens.len() != ex.targets.len() {
            return Err(ModelError::Shape(format!(
                "{} tokens but {} targets",
                ex.tokens.len(),
                ex.targets.len()
            )));
        }
        self.check_tokens(ex.tokens)?;
        self.check_tokens(ex.targets)
    }

    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        targets: &[u32],
        rounds: usize,
    ) -> Result<(f64, ModelParams), ModelError> {
        let route = self.route(rounds)?;
        let ex = Example {
            tokens,
            targets,
            segments: None,
        };
        self.batch_loss_and_grads(&[ex], &route)
    }

    /// Mean cross-entropy over every target in the batch and its gradient.
    /// A block called several times receives the sum of its per-call
    /// gradients.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[Example<'_>],
        route: &Route,
    ) -> Result<(f64, ModelParams), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let count: usize = batch.iter().map(|ex| ex.targets.len()).sum();
        let inv = 1.0 / count as f64;
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        let v = self.dims.vocab;
        for ex in batch {
            let mask = self.mask(ex.tokens.len(), ex.segments)?;
            let trace = self.run(ex.tokens, route, mask, None);
            let mut dlogits = trace.logits.data.clone();
            for (pos, &tgt) in ex.targets.iter().enumerate() {
                let row = &mut dlogits[pos * v..(pos + 1) * v];
                let lse = log_sum_exp(row);
                total += lse - row[tgt as usize];
                for val in row.iter_mut() {
                    *val = (*val - lse).exp() * inv;
                }
                row[tgt as usize] -= inv;
            }
            self.backward(ex.tokens, route, &trace, &dlogits, &mut grads);
        }
        Ok((total * inv, grads))
    }
}
