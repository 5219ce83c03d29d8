use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ledger::ModelDims;
use crate::signature::leaf_label;

const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm decoder layer. Projection matrices are stored
/// `in x out`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

const LAYER_TENSOR_NAMES: [&str; 12] = [
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "ln1.gain",
    "ln1.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

impl LayerParams {
    fn zeros(d: usize, m: usize) -> Self {
        LayerParams {
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w1: vec![0.0; d * m],
            b1: vec![0.0; m],
            w2: vec![0.0; m * d],
            b2: vec![0.0; d],
        }
    }

    fn init(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(d, m);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo, &mut p.w1, &mut p.w2] {
            fill_normal(w, rng);
        }
        p.ln1_gain.fill(1.0);
        p.ln2_gain.fill(1.0);
        p
    }

    fn shapes(d: usize, m: usize) -> [Vec<usize>; 12] {
        [
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, m],
            vec![m],
            vec![m, d],
            vec![d],
        ]
    }

    fn tensors(&self) -> [&Vec<f64>; 12] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All trainable tensors of a recursive model. Each unique leaf block is
/// stored once no matter how often the plan calls it. The same structure
/// doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d_model: usize,
    pub mlp_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub token_embedding: Vec<f64>,
    pub position_embedding: Vec<f64>,
    /// `blocks[leaf][layer]`.
    pub blocks: Vec<Vec<LayerParams>>,
    pub final_gain: Vec<f64>,
    pub final_bias: Vec<f64>,
    pub head: Vec<f64>,
    /// `adapters[k - 1]` is used after `k` recursion rounds.
    pub adapters: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(dims: &ModelDims, unique_blocks: usize, layers_per_block: usize, adapters: usize) -> Self {
        let (d, m) = (dims.d_model, dims.mlp_dim);
        ModelParams {
            d_model: d,
            mlp_dim: m,
            vocab: dims.vocab,
            max_seq: dims.seq_len,
            token_embedding: vec![0.0; dims.vocab * d],
            position_embedding: vec![0.0; dims.seq_len * d],
            blocks: (0..unique_blocks)
                .map(|_| (0..layers_per_block).map(|_| LayerParams::zeros(d, m)).collect())
                .collect(),
            final_gain: vec![0.0; d],
            final_bias: vec![0.0; d],
            head: vec![0.0; d * dims.vocab],
            adapters: vec![vec![0.0; d * d]; adapters],
        }
    }

    /// Gaussian weights (std 0.02), unit norm gains, zero biases and
    /// identity adapters.
    pub fn init(
        dims: &ModelDims,
        unique_blocks: usize,
        layers_per_block: usize,
        adapters: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (dims.d_model, dims.mlp_dim);
        let mut p = Self::zeros(dims, unique_blocks, layers_per_block, 0);
        fill_normal(&mut p.token_embedding, &mut rng);
        fill_normal(&mut p.position_embedding, &mut rng);
        p.blocks = (0..unique_blocks)
            .map(|_| (0..layers_per_block).map(|_| LayerParams::init(d, m, &mut rng)).collect())
            .collect();
        p.final_gain.fill(1.0);
        fill_normal(&mut p.head, &mut rng);
        p.adapters = (0..adapters).map(|_| identity(d)).collect();
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn layers_per_block(&self) -> usize {
        self.blocks.first().map_or(0, Vec::len)
    }

    /// Canonical tensor names, in storage order.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embed.token".to_string(), "embed.position".to_string()];
        for (leaf, layers) in self.blocks.iter().enumerate() {
            for l in 0..layers.len() {
                for n in LAYER_TENSOR_NAMES {
                    out.push(format!("block.{}.layer.{l}.{n}", leaf_label(leaf)));
                }
            }
        }
        out.extend(["final_norm.gain", "final_norm.bias", "head"].map(String::from));
        out.extend((1..=self.adapters.len()).map(|k| format!("adapter.{k}")));
        out
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let (d, m) = (self.d_model, self.mlp_dim);
        let mut out = vec![vec![self.vocab, d], vec![self.max_seq, d]];
        for layers in &self.blocks {
            for _ in layers {
                out.extend(LayerParams::shapes(d, m));
            }
        }
        out.extend([vec![d], vec![d], vec![d, self.vocab]]);
        out.extend(self.adapters.iter().map(|_| vec![d, d]));
        out
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layers in &self.blocks {
            for layer in layers {
                out.extend(layer.tensors());
            }
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head]);
        out.extend(self.adapters.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layers in &mut self.blocks {
            for layer in layers {
                out.extend(layer.tensors_mut());
            }
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.head]);
        out.extend(self.adapters.iter_mut());
        out
    }

    /// Total scalar count, adapters included.
    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.iter().map(Vec::len).sum()
    }

    pub fn embedding_count(&self) -> usize {
        self.token_embedding.len() + self.position_embedding.len()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            super::ops::add_assign(dst, src);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Fraction of parameters held by the adapter bank, with and without the
/// embedding tables in the denominator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterFraction {
    pub of_total: f64,
    pub of_non_embedding: f64,
}

impl ModelParams {
    pub fn adapter_fraction(&self) -> AdapterFraction {
        let adapters = self.adapter_count() as f64;
        let total = self.count() as f64;
        AdapterFraction {
            of_total: adapters / total,
            of_non_embedding: adapters / (total - self.embedding_count() as f64),
        }
    }
}

fn fill_normal(w: &mut [f64], rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for v in w.iter_mut() {
        *v = normal.sample(rng);
    }
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}
