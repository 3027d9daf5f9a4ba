//! A small decoder-only transformer with LoRA attach points on all attention
//! projections, residual-stream steering hooks, and seeded sampling.
//!
//! Blocks are pre-norm, so the residual stream between blocks is a
//! well-defined injection site: a steering hook at layer `l` adds its vector
//! to the block-`l` output residual at every position, which means layers
//! below `l` are untouched and the recorded layer-`l` activation differs from
//! an unhooked run by exactly `gamma * s`.
//!
//! Positions use the fixed sinusoidal encoding, attention is causal, and the
//! MLP uses the tanh GELU. There is no KV cache; generation re-runs the full
//! forward pass per emitted token, which keeps gradients and activations
//! trivially consistent at this scale.

mod backward;

pub use backward::{
    backward_adapters, completion_log_prob, AdapterGradients, LogitLoss, NextTokenCrossEntropy,
    ScaledCompletionLogProb,
};

use crate::numerics::{softmax, Matrix, NumericsError, Rng, TokenId, Vector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input token sequence is empty")]
    EmptyInput,
    #[error("input length {len} exceeds context window {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("steering hook targets layer {layer} but the model has {n_layers} layers")]
    BadHookLayer { layer: usize, n_layers: usize },
    #[error("steering vector has length {got}, expected d_model = {want}")]
    HookDimension { got: usize, want: usize },
    #[error("trainable adapter has no attach points")]
    EmptyTrainableSet,
    #[error("sampled decoding requires temperature > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("max_new_tokens must be >= 1")]
    ZeroMaxTokens,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture hyperparameters of the toy LM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub eos_token: TokenId,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn toy_default() -> Self {
        ModelConfig {
            vocab_size: crate::vocab::VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            context_len: 64,
            eos_token: crate::vocab::EOS,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.context_len == 0
        {
            return Err("all model dimensions must be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.eos_token as usize >= self.vocab_size {
            return Err("eos_token outside vocabulary".into());
        }
        Ok(())
    }
}

/// Attention projection site for LoRA attachment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn short_name(&self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Projection> {
        match s {
            "q" => Some(Projection::Query),
            "k" => Some(Projection::Key),
            "v" => Some(Projection::Value),
            "o" => Some(Projection::Output),
            _ => None,
        }
    }
}

/// One attention-projection attach point: (layer, projection).
pub type AttachPoint = (usize, Projection);

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub(crate) gain: Vector,
    pub(crate) bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub(crate) wq: Matrix,
    pub(crate) wk: Matrix,
    pub(crate) wv: Matrix,
    pub(crate) wo: Matrix,
    pub(crate) mlp_in: Matrix,
    pub(crate) mlp_out: Matrix,
    pub(crate) ln1: LayerNormParams,
    pub(crate) ln2: LayerNormParams,
}

impl LayerWeights {
    pub fn projection(&self, proj: Projection) -> &Matrix {
        match proj {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
            Projection::Output => &self.wo,
        }
    }
}

/// Frozen base parameters. There is no public mutation: the struct can only
/// be built whole (seeded init or validated parts) and all accessors are
/// read-only, so the content hash is stable for the lifetime of a deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    final_ln: LayerNormParams,
    unembedding: Matrix,
}

const INIT_STD: f64 = 0.08;

impl ModelWeights {
    /// Seeded Gaussian initialization; the base model of a deployment.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let mut rng = Rng::from_seed(seed);
        let d = config.d_model;
        let mut gauss =
            |rows: usize, cols: usize, rng: &mut Rng| -> Matrix {
                Matrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols).map(|_| rng.normal(0.0, INIT_STD)).collect(),
                )
            };
        let embedding = gauss(config.vocab_size, d, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: gauss(d, d, &mut rng),
                wk: gauss(d, d, &mut rng),
                wv: gauss(d, d, &mut rng),
                wo: gauss(d, d, &mut rng),
                mlp_in: gauss(d, config.d_ff, &mut rng),
                mlp_out: gauss(config.d_ff, d, &mut rng),
                ln1: LayerNormParams {
                    gain: Vector::from_vec(vec![1.0; d]),
                    bias: Vector::zeros(d),
                },
                ln2: LayerNormParams {
                    gain: Vector::from_vec(vec![1.0; d]),
                    bias: Vector::zeros(d),
                },
            })
            .collect();
        let final_ln = LayerNormParams {
            gain: Vector::from_vec(vec![1.0; d]),
            bias: Vector::zeros(d),
        };
        let unembedding = gauss(d, config.vocab_size, &mut rng);
        ModelWeights {
            config,
            embedding,
            layers,
            final_ln,
            unembedding,
        }
    }

    /// Rebuilds weights from deserialized tensors, validating every shape.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Matrix,
        layers: Vec<LayerWeights>,
        final_ln: LayerNormParams,
        unembedding: Matrix,
    ) -> Result<Self, String> {
        config.validate()?;
        let d = config.d_model;
        let check = |m: &Matrix, rows: usize, cols: usize, name: &str| -> Result<(), String> {
            if m.rows() != rows || m.cols() != cols {
                return Err(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    m.rows(),
                    m.cols()
                ));
            }
            Ok(())
        };
        check(&embedding, config.vocab_size, d, "embedding")?;
        check(&unembedding, d, config.vocab_size, "unembedding")?;
        if layers.len() != config.n_layers {
            return Err(format!(
                "expected {} layers, got {}",
                config.n_layers,
                layers.len()
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            for proj in Projection::ALL {
                check(l.projection(proj), d, d, &format!("layer {i} {proj:?}"))?;
            }
            check(&l.mlp_in, d, config.d_ff, &format!("layer {i} mlp_in"))?;
            check(&l.mlp_out, config.d_ff, d, &format!("layer {i} mlp_out"))?;
            for ln in [&l.ln1, &l.ln2] {
                if ln.gain.len() != d || ln.bias.len() != d {
                    return Err(format!("layer {i} layer-norm params have wrong length"));
                }
            }
        }
        if final_ln.gain.len() != d || final_ln.bias.len() != d {
            return Err("final layer-norm params have wrong length".into());
        }
        Ok(ModelWeights {
            config,
            embedding,
            layers,
            final_ln,
            unembedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub fn final_ln(&self) -> &LayerNormParams {
        &self.final_ln
    }

    /// SHA-256 over the config and every tensor in a fixed order; the
    /// immutability evidence used by merge/release checks and `hash_shared`.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"sea-model-v1");
        for v in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.n_layers,
            self.config.n_heads,
            self.config.d_ff,
            self.config.context_len,
            self.config.eos_token as usize,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        hash_matrix(&mut h, "embedding", &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            for proj in Projection::ALL {
                hash_matrix(&mut h, &format!("layer{i}.{}", proj.short_name()), l.projection(proj));
            }
            hash_matrix(&mut h, &format!("layer{i}.mlp_in"), &l.mlp_in);
            hash_matrix(&mut h, &format!("layer{i}.mlp_out"), &l.mlp_out);
            hash_vector(&mut h, &format!("layer{i}.ln1.gain"), &l.ln1.gain);
            hash_vector(&mut h, &format!("layer{i}.ln1.bias"), &l.ln1.bias);
            hash_vector(&mut h, &format!("layer{i}.ln2.gain"), &l.ln2.gain);
            hash_vector(&mut h, &format!("layer{i}.ln2.bias"), &l.ln2.bias);
        }
        hash_vector(&mut h, "final_ln.gain", &self.final_ln.gain);
        hash_vector(&mut h, "final_ln.bias", &self.final_ln.bias);
        hash_matrix(&mut h, "unembedding", &self.unembedding);
        h.finalize().into()
    }
}

pub(crate) fn hash_matrix(h: &mut Sha256, name: &str, m: &Matrix) {
    h.update(name.as_bytes());
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
}

pub(crate) fn hash_vector(h: &mut Sha256, name: &str, v: &Vector) {
    h.update(name.as_bytes());
    h.update((v.len() as u64).to_le_bytes());
    for x in v.data() {
        h.update(x.to_le_bytes());
    }
}

/// Read-only view of the weights seen by a forward pass. `ModelWeights` is
/// the identity view; a merged adapter view substitutes effective attention
/// projections while leaving everything else untouched.
pub trait WeightView {
    fn base(&self) -> &ModelWeights;
    fn attention_projection(&self, layer: usize, proj: Projection) -> &Matrix;
}

impl WeightView for ModelWeights {
    fn base(&self) -> &ModelWeights {
        self
    }

    fn attention_projection(&self, layer: usize, proj: Projection) -> &Matrix {
        self.layers[layer].projection(proj)
    }
}

/// Additive residual-stream injection at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringHook {
    pub layer: usize,
    pub vector: Vector,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sampled { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeParams {
            mode: DecodeMode::Greedy,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn sampled(temperature: f64, max_new_tokens: usize, seed: u64) -> Self {
        DecodeParams {
            mode: DecodeMode::Sampled { temperature },
            max_new_tokens,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_new_tokens == 0 {
            return Err(ModelError::ZeroMaxTokens);
        }
        if let DecodeMode::Sampled { temperature } = self.mode {
            if !(temperature > 0.0) {
                return Err(ModelError::InvalidTemperature(temperature));
            }
        }
        Ok(())
    }
}

/// Logits plus the post-injection residual stream at every layer
/// (one `seq_len x d_model` matrix per layer).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub residuals: Vec<Matrix>,
}

const LN_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sinusoidal_position(pos: usize, d_model: usize, out: &mut [f64]) {
    for i in 0..d_model / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
        out[2 * i] = (pos as f64 * freq).sin();
        out[2 * i + 1] = (pos as f64 * freq).cos();
    }
}

/// Per-layer intermediates cached by the forward pass for reverse mode.
pub(crate) struct LayerCache {
    pub ln1_norm: Matrix,
    pub ln1_inv_std: Vec<f64>,
    pub ln1_out: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn_probs: Vec<Matrix>,
    pub context: Matrix,
    pub ln2_norm: Matrix,
    pub ln2_inv_std: Vec<f64>,
    pub mlp_pre: Matrix,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub final_norm: Matrix,
    pub final_inv_std: Vec<f64>,
    pub logits: Matrix,
    pub residuals: Vec<Matrix>,
}

fn validate_hooks(
    hooks: &[SteeringHook],
    config: &ModelConfig,
) -> Result<(), ModelError> {
    for hook in hooks {
        if hook.layer >= config.n_layers {
            return Err(ModelError::BadHookLayer {
                layer: hook.layer,
                n_layers: config.n_layers,
            });
        }
        if hook.vector.len() != config.d_model {
            return Err(ModelError::HookDimension {
                got: hook.vector.len(),
                want: config.d_model,
            });
        }
    }
    Ok(())
}

pub(crate) fn forward_cached(
    view: &dyn WeightView,
    tokens: &[TokenId],
    hooks: &[SteeringHook],
) -> Result<ForwardCache, ModelError> {
    let base = view.base();
    let cfg = base.config().clone();
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > cfg.context_len {
        return Err(ModelError::ContextOverflow {
            len: tokens.len(),
            context_len: cfg.context_len,
        });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(NumericsError::TokenOutOfRange {
                id: t,
                vocab_size: cfg.vocab_size,
            }
            .into());
        }
    }
    validate_hooks(hooks, &cfg)?;

    let seq = tokens.len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Token embedding plus sinusoidal positions.
    let mut x = Matrix::zeros(seq, d);
    let mut pos = vec![0.0; d];
    for (t, &tok) in tokens.iter().enumerate() {
        sinusoidal_position(t, d, &mut pos);
        let emb = base.embedding().row(tok as usize);
        let row = x.row_mut(t);
        for i in 0..d {
            row[i] = emb[i] + pos[i];
        }
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    let mut residuals = Vec::with_capacity(cfg.n_layers);

    for layer_idx in 0..cfg.n_layers {
        let lw = base.layer(layer_idx);
        let x_in = x.clone();

        // Pre-attention layer norm.
        let mut ln1_norm = Matrix::zeros(seq, d);
        let mut ln1_out = Matrix::zeros(seq, d);
        let mut ln1_inv_std = vec![0.0; seq];
        for t in 0..seq {
            let inv = layer_norm_like(
                x_in.row(t),
                lw.ln1.gain.data(),
                lw.ln1.bias.data(),
                ln1_norm.row_mut(t),
                ln1_out.row_mut(t),
            );
            ln1_inv_std[t] = inv;
        }

        let q = ln1_out.matmul(view.attention_projection(layer_idx, Projection::Query))?;
        let k = ln1_out.matmul(view.attention_projection(layer_idx, Projection::Key))?;
        let v = ln1_out.matmul(view.attention_projection(layer_idx, Projection::Value))?;

        // Causal attention per head.
        let mut attn_probs = Vec::with_capacity(n_heads);
        let mut context = Matrix::zeros(seq, d);
        for h in 0..n_heads {
            let off = h * head_dim;
            let mut probs = Matrix::zeros(seq, seq);
            for t in 0..seq {
                let q_row = &q.row(t)[off..off + head_dim];
                let mut scores = vec![f64::NEG_INFINITY; t + 1];
                for s in 0..=t {
                    let k_row = &k.row(s)[off..off + head_dim];
                    let mut dot = 0.0;
                    for i in 0..head_dim {
                        dot += q_row[i] * k_row[i];
                    }
                    scores[s] = dot * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in 0..=t {
                    let e = (scores[s] - max).exp();
                    probs.set(t, s, e);
                    total += e;
                }
                for s in 0..=t {
                    probs.set(t, s, probs.get(t, s) / total);
                }
                let ctx_row = context.row_mut(t);
                for s in 0..=t {
                    let p = probs.get(t, s);
                    let v_row = &v.row(s)[off..off + head_dim];
                    for i in 0..head_dim {
                        ctx_row[off + i] += p * v_row[i];
                    }
                }
            }
            attn_probs.push(probs);
        }

        let attn_out = context.matmul(view.attention_projection(layer_idx, Projection::Output))?;
        let a1 = x_in.add(&attn_out)?;

        // Pre-MLP layer norm.
        let mut ln2_norm = Matrix::zeros(seq, d);
        let mut ln2_out = Matrix::zeros(seq, d);
        let mut ln2_inv_std = vec![0.0; seq];
        for t in 0..seq {
            let inv = layer_norm_like(
                a1.row(t),
                lw.ln2.gain.data(),
                lw.ln2.bias.data(),
                ln2_norm.row_mut(t),
                ln2_out.row_mut(t),
            );
            ln2_inv_std[t] = inv;
        }

        let mlp_pre = ln2_out.matmul(&lw.mlp_in)?;
        let mut mlp_act = Matrix::zeros(seq, cfg.d_ff);
        for t in 0..seq {
            let pre = mlp_pre.row(t);
            let act = mlp_act.row_mut(t);
            for i in 0..cfg.d_ff {
                act[i] = gelu(pre[i]);
            }
        }
        let mlp_out = mlp_act.matmul(&lw.mlp_out)?;
        let mut y = a1.add(&mlp_out)?;

        // Steering injection at the block output, every position. Hooks on
        // the same layer are summed first so equal-and-opposite vectors
        // cancel exactly in IEEE arithmetic.
        let mut injection: Option<Vec<f64>> = None;
        for hook in hooks.iter().filter(|hk| hk.layer == layer_idx) {
            let inj = injection.get_or_insert_with(|| vec![0.0; d]);
            for i in 0..d {
                inj[i] += hook.gamma * hook.vector.get(i);
            }
        }
        if let Some(inj) = injection {
            for t in 0..seq {
                let row = y.row_mut(t);
                for i in 0..d {
                    row[i] += inj[i];
                }
            }
        }

        residuals.push(y.clone());
        layer_caches.push(LayerCache {
            ln1_norm,
            ln1_inv_std,
            ln1_out,
            q,
            k,
            v,
            attn_probs,
            context,
            ln2_norm,
            ln2_inv_std,
            mlp_pre,
        });
        x = y;
    }

    let mut final_norm = Matrix::zeros(seq, d);
    let mut final_out = Matrix::zeros(seq, d);
    let mut final_inv_std = vec![0.0; seq];
    for t in 0..seq {
        let inv = layer_norm_like(
            x.row(t),
            base.final_ln().gain.data(),
            base.final_ln().bias.data(),
            final_norm.row_mut(t),
            final_out.row_mut(t),
        );
        final_inv_std[t] = inv;
    }
    let logits = final_out.matmul(base.unembedding())?;

    Ok(ForwardCache {
        layers: layer_caches,
        final_norm,
        final_inv_std,
        logits,
        residuals,
    })
}

/// Writes both the normalized values (pre gain/bias) and the full output.
fn layer_norm_like(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    norm_out: &mut [f64],
    full_out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        norm_out[i] = (x[i] - mean) * inv_std;
        full_out[i] = norm_out[i] * gain[i] + bias[i];
    }
    inv_std
}

/// Full forward pass: logits for every position plus per-layer post-injection
/// residual activations.
pub fn forward(
    view: &dyn WeightView,
    tokens: &[TokenId],
    hooks: &[SteeringHook],
) -> Result<ForwardOutput, ModelError> {
    let cache = forward_cached(view, tokens, hooks)?;
    Ok(ForwardOutput {
        logits: cache.logits,
        residuals: cache.residuals,
    })
}

/// Autoregressive decoding. Greedy mode is a pure function of
/// (weights, prompt, hooks); sampled mode is a pure function of those plus
/// the seed. Stops at `max_new_tokens`, the end-of-sequence token, or the
/// context limit; the terminating EOS is not included in the output.
pub fn generate(
    view: &dyn WeightView,
    prompt: &[TokenId],
    params: &DecodeParams,
    hooks: &[SteeringHook],
) -> Result<Vec<TokenId>, ModelError> {
    params.validate()?;
    let cfg = view.base().config().clone();
    if prompt.len() > cfg.context_len {
        return Err(ModelError::ContextOverflow {
            len: prompt.len(),
            context_len: cfg.context_len,
        });
    }
    let mut rng = Rng::from_seed(params.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..params.max_new_tokens {
        if seq.len() >= cfg.context_len {
            break;
        }
        let fwd = forward(view, &seq, hooks)?;
        let last = fwd.logits.row(seq.len() - 1);
        let next = match params.mode {
            DecodeMode::Greedy => {
                let mut best = 0usize;
                for (i, v) in last.iter().enumerate() {
                    if *v > last[best] {
                        best = i;
                    }
                }
                best as TokenId
            }
            DecodeMode::Sampled { temperature } => {
                let probs = softmax(&Vector::from_vec(last.to_vec()), temperature)?;
                rng.categorical(probs.data()) as TokenId
            }
        };
        if next == cfg.eos_token {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            context_len: 16,
            eos_token: 0,
        }
    }

    fn tiny_model() -> ModelWeights {
        ModelWeights::init(tiny_config(), 0xBEEF)
    }

    fn hook(layer: usize, gamma: f64, fill: f64, d: usize) -> SteeringHook {
        SteeringHook {
            layer,
            vector: Vector::from_vec(vec![fill; d]),
            gamma,
        }
    }

    #[test]
    fn zero_gamma_hook_is_a_bitwise_noop() {
        let m = tiny_model();
        let tokens = [3u32, 7, 1, 12];
        let plain = forward(&m, &tokens, &[]).unwrap();
        let hooked = forward(&m, &tokens, &[hook(1, 0.0, 0.5, 16)]).unwrap();
        assert_eq!(plain.logits, hooked.logits);
        assert_eq!(plain.residuals, hooked.residuals);
    }

    #[test]
    fn single_hook_only_perturbs_its_layer_and_above() {
        let m = tiny_model();
        let tokens = [3u32, 7, 1, 12];
        let s = Vector::from_vec((0..16).map(|i| 0.01 * i as f64).collect());
        let gamma = 0.7;
        let plain = forward(&m, &tokens, &[]).unwrap();
        let hooked = forward(
            &m,
            &tokens,
            &[SteeringHook {
                layer: 1,
                vector: s.clone(),
                gamma,
            }],
        )
        .unwrap();
        // Layers below the hook are untouched, bitwise.
        assert_eq!(plain.residuals[0], hooked.residuals[0]);
        // The hooked layer differs by exactly gamma * s at every position.
        for t in 0..tokens.len() {
            for i in 0..16 {
                let want = plain.residuals[1].get(t, i) + gamma * s.get(i);
                assert_eq!(hooked.residuals[1].get(t, i), want);
            }
        }
    }

    #[test]
    fn opposite_hooks_cancel_bitwise() {
        let m = tiny_model();
        let tokens = [5u32, 2, 9];
        let s = Vector::from_vec((0..16).map(|i| (i as f64).sin()).collect());
        let neg = Vector::from_vec(s.data().iter().map(|v| -v).collect());
        let plain = forward(&m, &tokens, &[]).unwrap();
        let hooked = forward(
            &m,
            &tokens,
            &[
                SteeringHook {
                    layer: 0,
                    vector: s,
                    gamma: 1.3,
                },
                SteeringHook {
                    layer: 0,
                    vector: neg,
                    gamma: 1.3,
                },
            ],
        )
        .unwrap();
        assert_eq!(plain.logits, hooked.logits);
        assert_eq!(plain.residuals, hooked.residuals);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = tiny_model();
        assert!(matches!(
            forward(&m, &[], &[]),
            Err(ModelError::EmptyInput)
        ));
        let long = vec![1u32; 17];
        assert!(matches!(
            forward(&m, &long, &[]),
            Err(ModelError::ContextOverflow { .. })
        ));
        assert!(matches!(
            forward(&m, &[1], &[hook(9, 1.0, 0.0, 16)]),
            Err(ModelError::BadHookLayer { .. })
        ));
        assert!(matches!(
            forward(&m, &[1], &[hook(0, 1.0, 0.0, 3)]),
            Err(ModelError::HookDimension { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let m = tiny_model();
        let prompt = [4u32, 4, 8];
        let params = DecodeParams::sampled(1.0, 8, 99);
        let a = generate(&m, &prompt, &params, &[]).unwrap();
        let b = generate(&m, &prompt, &params, &[]).unwrap();
        assert_eq!(a, b);
        let greedy = DecodeParams::greedy(8);
        let g1 = generate(&m, &prompt, &greedy, &[]).unwrap();
        let g2 = generate(&m, &prompt, &greedy, &[]).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn greedy_ignores_zero_gamma_hooks() {
        let m = tiny_model();
        let prompt = [4u32, 4, 8];
        let params = DecodeParams::greedy(6);
        let a = generate(&m, &prompt, &params, &[]).unwrap();
        let b = generate(&m, &prompt, &params, &[hook(0, 0.0, 1.0, 16)]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hash_is_stable_across_forward_and_generate() {
        let m = tiny_model();
        let before = m.content_hash();
        let _ = forward(&m, &[1, 2, 3], &[]).unwrap();
        let _ = generate(&m, &[1, 2], &DecodeParams::sampled(1.0, 8, 7), &[]).unwrap();
        assert_eq!(before, m.content_hash());
    }

    #[test]
    fn hash_is_sensitive_to_tiny_perturbations() {
        let m = tiny_model();
        let mut emb = m.embedding().clone();
        emb.set(0, 0, emb.get(0, 0) + 1e-9);
        let perturbed = ModelWeights::from_parts(
            m.config().clone(),
            emb,
            (0..m.config().n_layers).map(|i| m.layer(i).clone()).collect(),
            m.final_ln().clone(),
            m.unembedding().clone(),
        )
        .unwrap();
        assert_ne!(m.content_hash(), perturbed.content_hash());
    }

    #[test]
    fn decode_params_validation() {
        assert!(DecodeParams::sampled(0.0, 4, 1).validate().is_err());
        assert!(DecodeParams::greedy(0).validate().is_err());
        assert!(DecodeParams::sampled(1.0, 4, 1).validate().is_ok());
    }
}
