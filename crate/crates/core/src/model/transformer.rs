use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{Example, Minibatch};
use crate::adapter::{AdapterState, ComposedParams};
use crate::error::{Result, ZoError};
use crate::numerics::{sample_gaussian, DenseMatrix, LayerId, StreamKey, StreamRole};
use crate::params::{MatrixTarget, ParamSet, VectorTarget};
use crate::scoring::{Precision, Scorer};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_prompt_len: usize,
    pub init_seed: u64,
    /// Standard deviation of the (tied) embedding at initialization.
    pub embed_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_prompt_len: 16,
            init_seed: 7,
            embed_std: 0.15,
        }
    }
}

impl ModelConfig {
    /// A model small enough for per-parameter finite differences
    /// (under 400 scalars).
    pub fn tiny() -> Self {
        Self {
            vocab: 16,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            max_prompt_len: 8,
            init_seed: 7,
            embed_std: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(ZoError::config("model.vocab must be at least 4"));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(ZoError::config("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ZoError::config(
                "model.d_model must be divisible by model.n_heads",
            ));
        }
        if self.max_prompt_len == 0 {
            return Err(ZoError::config("model.max_prompt_len must be positive"));
        }
        if !(self.embed_std.is_finite() && self.embed_std >= 0.0) {
            return Err(ZoError::config(
                "model.embed_std must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Which projection a trainable block is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
    Out,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Out,
        Projection::Up,
        Projection::Down,
    ];

    fn code(self) -> u32 {
        match self {
            Projection::Query => 1,
            Projection::Key => 2,
            Projection::Value => 3,
            Projection::Out => 4,
            Projection::Up => 5,
            Projection::Down => 6,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Out => "out",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }
}

pub const EMBEDDING_ID: LayerId = 0;
const FINAL_NORM_SCALE_ID: LayerId = 1;
const FINAL_NORM_SHIFT_ID: LayerId = 2;

/// Stable id of a projection block in layer `layer`.
pub fn projection_id(layer: usize, p: Projection) -> LayerId {
    100 * (layer as u32 + 1) + p.code()
}

fn norm_id(layer: usize, which: u32) -> LayerId {
    100 * (layer as u32 + 1) + 10 + which
}

/// Decoder-only transformer parameters.
///
/// Storage: matrix 0 is the embedding (also the output head). Layer `l`
/// owns matrices `1 + 4l ..= 4 + 4l`: packed QKV `d×3d`, output `d×d`, up
/// `d×4d`, down `4d×d`. Vectors `4l..4l+4` are the two pre-norms'
/// scale/shift, and the final norm follows. The embedding is frozen; the
/// six projection blocks per layer are the LoRA targets, the norm vectors
/// are the 1-D targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let seed = config.init_seed;
        let draw = |id: LayerId, rows: usize, cols: usize, std: f64| -> Result<DenseMatrix> {
            Ok(
                sample_gaussian(StreamKey::new(seed, 0, id, StreamRole::Init), rows, cols)?
                    .scaled(std),
            )
        };
        let mut matrices = vec![draw(EMBEDDING_ID, config.vocab, d, config.embed_std)?];
        let mut vectors = Vec::new();
        let mut mtargets = Vec::new();
        let mut vtargets = Vec::new();
        let inv = 1.0 / (d as f64).sqrt();
        for l in 0..config.n_layers {
            let base = matrices.len();
            let q = draw(projection_id(l, Projection::Query), d, d, inv)?;
            let k = draw(projection_id(l, Projection::Key), d, d, inv)?;
            let v = draw(projection_id(l, Projection::Value), d, d, inv)?;
            matrices.push(DenseMatrix::hcat(d, &[&q, &k, &v])?);
            matrices.push(draw(projection_id(l, Projection::Out), d, d, 0.5 * inv)?);
            matrices.push(draw(projection_id(l, Projection::Up), d, 4 * d, inv)?);
            matrices.push(draw(
                projection_id(l, Projection::Down),
                4 * d,
                d,
                0.5 / ((4 * d) as f64).sqrt(),
            )?);
            for p in Projection::ALL {
                let (storage, col_offset, rows, cols) = match p {
                    Projection::Query => (base, 0, d, d),
                    Projection::Key => (base, d, d, d),
                    Projection::Value => (base, 2 * d, d, d),
                    Projection::Out => (base + 1, 0, d, d),
                    Projection::Up => (base + 2, 0, d, 4 * d),
                    Projection::Down => (base + 3, 0, 4 * d, d),
                };
                mtargets.push(MatrixTarget {
                    id: projection_id(l, p),
                    name: format!("layer{l}.{}", p.name()),
                    storage,
                    col_offset,
                    rows,
                    cols,
                });
            }
            for (which, name, init) in [
                (1, "norm1.scale", 1.0),
                (2, "norm1.shift", 0.0),
                (3, "norm2.scale", 1.0),
                (4, "norm2.shift", 0.0),
            ] {
                vtargets.push(VectorTarget {
                    id: norm_id(l, which),
                    name: format!("layer{l}.{name}"),
                    storage: vectors.len(),
                    len: d,
                });
                vectors.push(vec![init; d]);
            }
        }
        for (id, name, init) in [
            (FINAL_NORM_SCALE_ID, "final_norm.scale", 1.0),
            (FINAL_NORM_SHIFT_ID, "final_norm.shift", 0.0),
        ] {
            vtargets.push(VectorTarget {
                id,
                name: name.into(),
                storage: vectors.len(),
                len: d,
            });
            vectors.push(vec![init; d]);
        }
        let params = ParamSet::new(matrices, vectors, mtargets, vtargets)?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn embedding(&self) -> &DenseMatrix {
        &self.params.matrices[0]
    }

    pub fn packed_qkv(&self, layer: usize) -> &DenseMatrix {
        &self.params.matrices[1 + 4 * layer]
    }

    pub fn scorer(&self) -> TransformerScorer {
        TransformerScorer {
            config: self.config.clone(),
        }
    }
}

/// Gold-option negative log-likelihood under teacher forcing, averaged over
/// the batch. The adapter, if any, is applied as a composed view.
pub fn forward_score(
    model: &ModelParams,
    adapter: Option<&AdapterState>,
    batch: &Minibatch,
    precision: Precision,
) -> Result<f64> {
    model
        .scorer()
        .score(&model.params, adapter, batch, precision)
}

/// Fraction of examples whose gold option has the highest summed
/// log-probability; ties go to the lowest option index.
pub fn eval_accuracy(
    model: &ModelParams,
    adapter: Option<&AdapterState>,
    pool: &Minibatch,
    precision: Precision,
) -> Result<f64> {
    model
        .scorer()
        .accuracy(&model.params, adapter, pool, precision)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerScorer {
    pub config: ModelConfig,
}

impl TransformerScorer {
    pub fn new(config: ModelConfig) -> Self {
        Self { config }
    }

    fn check_batch(&self, batch: &Minibatch) -> Result<()> {
        if batch.examples.is_empty() {
            return Err(ZoError::input("cannot score an empty batch"));
        }
        for ex in &batch.examples {
            ex.validate(self.config.vocab)?;
            if ex.prompt.is_empty() {
                return Err(ZoError::input("prompt must not be empty"));
            }
        }
        Ok(())
    }

    /// Per-example option log-probabilities.
    pub fn option_logprobs(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        batch: &Minibatch,
        precision: Precision,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        let view = ComposedParams::new(params, adapter);
        Ok(match precision {
            Precision::Real64 => {
                let net = Net::<f64>::from_view(&self.config, &view);
                run_examples(&batch.examples, |ex| net.option_logprobs(ex))
            }
            Precision::Real32 => {
                let net = Net::<f32>::from_view(&self.config, &view);
                run_examples(&batch.examples, |ex| net.option_logprobs(ex))
            }
        })
    }

    pub fn accuracy(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        pool: &Minibatch,
        precision: Precision,
    ) -> Result<f64> {
        let lps = self.option_logprobs(params, adapter, pool, precision)?;
        let correct = pool
            .examples
            .iter()
            .zip(&lps)
            .filter(|(ex, lp)| argmax_first(lp) == ex.gold)
            .count();
        Ok(correct as f64 / pool.examples.len() as f64)
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn run_examples<R, F>(examples: &[Example], f: F) -> Vec<R>
where
    R: Send,
    F: Fn(&Example) -> R + Sync + Send,
{
    // Order-preserving parallel map; reductions happen afterwards in
    // example order.
    examples.par_iter().map(f).collect()
}

impl Scorer for TransformerScorer {
    fn score(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        batch: &Minibatch,
        precision: Precision,
    ) -> Result<f64> {
        self.check_batch(batch)?;
        let view = ComposedParams::new(params, adapter);
        let losses: Vec<f64> = match precision {
            Precision::Real64 => {
                let net = Net::<f64>::from_view(&self.config, &view);
                run_examples(&batch.examples, |ex| -net.gold_logprob(ex))
            }
            Precision::Real32 => {
                let net = Net::<f32>::from_view(&self.config, &view);
                run_examples(&batch.examples, |ex| -net.gold_logprob(ex))
            }
        };
        let mut total = 0.0;
        for l in &losses {
            total += l;
        }
        Ok(total / losses.len() as f64)
    }

    fn cost_units(&self, _params: &ParamSet, batch: &Minibatch) -> u64 {
        let d = self.config.d_model as u64;
        let per_token = self.config.n_layers as u64 * 12 * d * d;
        batch
            .examples
            .iter()
            .map(|ex| {
                let opt = ex.options.get(ex.gold).map_or(1, |o| o.len()) as u64;
                let tokens = ex.prompt.len() as u64 + opt.saturating_sub(1);
                tokens * per_token + opt * d * self.config.vocab as u64
            })
            .sum()
    }

    fn eval_accuracy(
        &self,
        params: &ParamSet,
        adapter: Option<&AdapterState>,
        pool: &Minibatch,
        precision: Precision,
    ) -> Result<Option<f64>> {
        self.accuracy(params, adapter, pool, precision).map(Some)
    }
}

trait Real: Float + FromPrimitive + Sum + Send + Sync {
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite")
    }
}

impl Real for f64 {}
impl Real for f32 {}

struct Layer<T> {
    qkv: Vec<T>,
    out: Vec<T>,
    up: Vec<T>,
    down: Vec<T>,
    n1_scale: Vec<T>,
    n1_shift: Vec<T>,
    n2_scale: Vec<T>,
    n2_shift: Vec<T>,
}

struct Net<T> {
    vocab: usize,
    d: usize,
    heads: usize,
    embedding: Vec<T>,
    layers: Vec<Layer<T>>,
    nf_scale: Vec<T>,
    nf_shift: Vec<T>,
}

fn cast<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64_lossy(x)).collect()
}

impl<T: Real> Net<T> {
    fn from_view(cfg: &ModelConfig, view: &ComposedParams<'_>) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|l| Layer {
                qkv: cast(view.matrices[1 + 4 * l].data()),
                out: cast(view.matrices[2 + 4 * l].data()),
                up: cast(view.matrices[3 + 4 * l].data()),
                down: cast(view.matrices[4 + 4 * l].data()),
                n1_scale: cast(&view.vectors[4 * l]),
                n1_shift: cast(&view.vectors[4 * l + 1]),
                n2_scale: cast(&view.vectors[4 * l + 2]),
                n2_shift: cast(&view.vectors[4 * l + 3]),
            })
            .collect();
        let nf = 4 * cfg.n_layers;
        Self {
            vocab: cfg.vocab,
            d: cfg.d_model,
            heads: cfg.n_heads,
            embedding: cast(view.matrices[0].data()),
            layers,
            nf_scale: cast(&view.vectors[nf]),
            nf_shift: cast(&view.vectors[nf + 1]),
        }
    }

    fn gold_logprob(&self, ex: &Example) -> f64 {
        self.sequence_logprob(&ex.prompt, &ex.options[ex.gold])
    }

    fn option_logprobs(&self, ex: &Example) -> Vec<f64> {
        if ex.options.iter().all(|o| o.len() == 1) {
            let h = self.final_hidden(&ex.prompt);
            let last = &h[(ex.prompt.len() - 1) * self.d..];
            let lsm = self.log_softmax_logits(last);
            ex.options
                .iter()
                .map(|o| lsm[o[0] as usize].to_f64().unwrap())
                .collect()
        } else {
            ex.options
                .iter()
                .map(|o| self.sequence_logprob(&ex.prompt, o))
                .collect()
        }
    }

    /// `Σⱼ log p(option[j] | prompt, option[..j])`.
    fn sequence_logprob(&self, prompt: &[u32], option: &[u32]) -> f64 {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&option[..option.len() - 1]);
        let h = self.final_hidden(&tokens);
        let mut total = T::zero();
        for (j, &tok) in option.iter().enumerate() {
            let pos = prompt.len() - 1 + j;
            let lsm = self.log_softmax_logits(&h[pos * self.d..(pos + 1) * self.d]);
            total = total + lsm[tok as usize];
        }
        total.to_f64().unwrap()
    }

    fn log_softmax_logits(&self, hidden: &[T]) -> Vec<T> {
        let d = self.d;
        let logits: Vec<T> = (0..self.vocab)
            .map(|v| dot(&hidden[..d], &self.embedding[v * d..(v + 1) * d]))
            .collect();
        let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        logits.into_iter().map(|x| x - lse).collect()
    }

    /// Final-norm hidden states, `len × d`, row-major.
    fn final_hidden(&self, tokens: &[u32]) -> Vec<T> {
        let d = self.d;
        let n = tokens.len();
        let mut x = Vec::with_capacity(n * d);
        for &t in tokens {
            x.extend_from_slice(&self.embedding[t as usize * d..(t as usize + 1) * d]);
        }
        for layer in &self.layers {
            let a = layer_norm(&x, n, d, &layer.n1_scale, &layer.n1_shift);
            let qkv = matmul(&a, n, d, &layer.qkv, 3 * d);
            let attn = self.causal_attention(&qkv, n);
            let proj = matmul(&attn, n, d, &layer.out, d);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi = *xi + *p;
            }
            let b = layer_norm(&x, n, d, &layer.n2_scale, &layer.n2_shift);
            let mut up = matmul(&b, n, d, &layer.up, 4 * d);
            for u in up.iter_mut() {
                *u = gelu(*u);
            }
            let down = matmul(&up, n, 4 * d, &layer.down, d);
            for (xi, p) in x.iter_mut().zip(&down) {
                *xi = *xi + *p;
            }
        }
        layer_norm(&x, n, d, &self.nf_scale, &self.nf_shift)
    }

    fn causal_attention(&self, qkv: &[T], n: usize) -> Vec<T> {
        let d = self.d;
        let hd = d / self.heads;
        let inv_sqrt = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut out = vec![T::zero(); n * d];
        let mut scores = vec![T::zero(); n];
        for h in 0..self.heads {
            let qo = h * hd;
            let ko = d + h * hd;
            let vo = 2 * d + h * hd;
            for t in 0..n {
                let q = &qkv[t * 3 * d + qo..t * 3 * d + qo + hd];
                let mut max = T::neg_infinity();
                for s in 0..=t {
                    let k = &qkv[s * 3 * d + ko..s * 3 * d + ko + hd];
                    scores[s] = dot(q, k) * inv_sqrt;
                    max = max.max(scores[s]);
                }
                let mut z = T::zero();
                for sc in scores.iter_mut().take(t + 1) {
                    *sc = (*sc - max).exp();
                    z = z + *sc;
                }
                let dst = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
                for s in 0..=t {
                    let p = scores[s] / z;
                    let v = &qkv[s * 3 * d + vo..s * 3 * d + vo + hd];
                    for (o, vv) in dst.iter_mut().zip(v) {
                        *o = *o + p * *vv;
                    }
                }
            }
        }
        out
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s = s + *x * *y;
    }
    s
}

/// `x (n×k) · w (k×m)`.
fn matmul<T: Real>(x: &[T], n: usize, k: usize, w: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let a = x[i * k + kk];
            let wrow = &w[kk * m..(kk + 1) * m];
            for (o, b) in dst.iter_mut().zip(wrow) {
                *o = *o + a * *b;
            }
        }
    }
    out
}

fn layer_norm<T: Real>(x: &[T], n: usize, d: usize, scale: &[T], shift: &[T]) -> Vec<T> {
    let eps = T::from_f64_lossy(LN_EPS);
    let df = T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * scale[j] + shift[j];
        }
    }
    out
}

/// tanh approximation of GELU.
fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}
