//! Reverse-mode gradients restricted to LoRA adapter parameters.
//!
//! The backward pass propagates activation gradients through the whole
//! network but only ever materializes parameter gradients for effective
//! attention projections, which are then chained into (B, A) coordinates of
//! the trainable adapter. There is no code path that produces a gradient
//! object for any `ModelWeights` field: [`AdapterGradients`] can only hold
//! per-attach-point low-rank pairs.

use super::{forward_cached, ForwardCache, ModelError, Projection, WeightView};
use crate::adapters::LoraAdapter;
use crate::numerics::{Matrix, TokenId};
use crate::toy_lm::AttachPoint;
use std::collections::BTreeMap;

/// Scalar objective over logits together with its gradient.
pub trait LogitLoss {
    /// Returns the loss value and `d loss / d logits` (same shape as logits).
    fn value_and_grad(&self, logits: &Matrix) -> (f64, Matrix);
}

/// Mean next-token cross entropy over explicit (row, target) pairs.
#[derive(Debug, Clone)]
pub struct NextTokenCrossEntropy {
    /// Logit row `r` is scored against target token `t` for each `(r, t)`.
    pub targets: Vec<(usize, TokenId)>,
}

impl NextTokenCrossEntropy {
    /// Scores every next-token prediction of `tokens` from position
    /// `predict_from` onward: row `t` predicts `tokens[t + 1]`.
    pub fn over_sequence(tokens: &[TokenId], predict_from: usize) -> Self {
        let targets = (predict_from..tokens.len().saturating_sub(1))
            .map(|t| (t, tokens[t + 1]))
            .collect();
        NextTokenCrossEntropy { targets }
    }
}

fn row_log_softmax(row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_total = total.ln() + max;
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let log_probs = row.iter().map(|v| v - log_total).collect();
    (probs, log_probs)
}

impl LogitLoss for NextTokenCrossEntropy {
    fn value_and_grad(&self, logits: &Matrix) -> (f64, Matrix) {
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        if self.targets.is_empty() {
            return (0.0, grad);
        }
        let n = self.targets.len() as f64;
        let mut loss = 0.0;
        for &(row, target) in &self.targets {
            let (probs, log_probs) = row_log_softmax(logits.row(row));
            loss -= log_probs[target as usize] / n;
            let g = grad.row_mut(row);
            for (i, p) in probs.iter().enumerate() {
                g[i] += p / n;
            }
            g[target as usize] -= 1.0 / n;
        }
        (loss, grad)
    }
}

/// `coeff * sum(log p(token | prefix))` over a completion span. The building
/// block for preference objectives: the coefficient carries the outer-loss
/// chain factor, so one backward pass per sequence suffices.
#[derive(Debug, Clone)]
pub struct ScaledCompletionLogProb {
    pub targets: Vec<(usize, TokenId)>,
    pub coeff: f64,
}

impl ScaledCompletionLogProb {
    /// Targets for the completion span `[completion_start, tokens.len())` of
    /// a prompt+completion sequence: row `t` predicts `tokens[t + 1]`.
    pub fn over_completion(tokens: &[TokenId], completion_start: usize, coeff: f64) -> Self {
        assert!(completion_start >= 1, "completion must follow a prompt");
        let targets = (completion_start..tokens.len())
            .map(|t| (t - 1, tokens[t]))
            .collect();
        ScaledCompletionLogProb { targets, coeff }
    }
}

impl LogitLoss for ScaledCompletionLogProb {
    fn value_and_grad(&self, logits: &Matrix) -> (f64, Matrix) {
        let mut grad = Matrix::zeros(logits.rows(), logits.cols());
        let mut total = 0.0;
        for &(row, target) in &self.targets {
            let (probs, log_probs) = row_log_softmax(logits.row(row));
            total += log_probs[target as usize];
            let g = grad.row_mut(row);
            for (i, p) in probs.iter().enumerate() {
                g[i] -= self.coeff * p;
            }
            g[target as usize] += self.coeff;
        }
        (self.coeff * total, grad)
    }
}

/// Log-probability of a completion under the view, without gradients.
pub fn completion_log_prob(
    view: &dyn WeightView,
    tokens: &[TokenId],
    completion_start: usize,
) -> Result<f64, ModelError> {
    assert!(completion_start >= 1 && completion_start <= tokens.len());
    let cache = forward_cached(view, tokens, &[])?;
    let mut total = 0.0;
    for t in completion_start..tokens.len() {
        let (_, log_probs) = row_log_softmax(cache.logits.row(t - 1));
        total += log_probs[tokens[t] as usize];
    }
    Ok(total)
}

/// Gradients for adapter parameters only: one (dB, dA) pair per attach point.
/// By construction there is no field for any base-weight tensor.
#[derive(Debug, Clone)]
pub struct AdapterGradients {
    grads: BTreeMap<AttachPoint, (Matrix, Matrix)>,
}

impl AdapterGradients {
    pub fn attach_points(&self) -> Vec<AttachPoint> {
        self.grads.keys().copied().collect()
    }

    /// (dB, dA) at one attach point.
    pub fn pair(&self, point: AttachPoint) -> Option<&(Matrix, Matrix)> {
        self.grads.get(&point)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AttachPoint, &(Matrix, Matrix))> {
        self.grads.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|(db, da)| db.data().iter().chain(da.data()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .values()
            .all(|(db, da)| {
                db.data().iter().all(|v| v.is_finite()) && da.data().iter().all(|v| v.is_finite())
            })
    }
}

/// Layer-norm backward with frozen gain: maps the output gradient to the
/// input gradient given the cached normalized values and 1/std per row.
fn layer_norm_backward(
    d_out: &Matrix,
    norm: &Matrix,
    inv_std: &[f64],
    gain: &[f64],
) -> Matrix {
    let rows = d_out.rows();
    let cols = d_out.cols();
    let n = cols as f64;
    let mut d_in = Matrix::zeros(rows, cols);
    for t in 0..rows {
        let dy = d_out.row(t);
        let xh = norm.row(t);
        let mut dxh = vec![0.0; cols];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..cols {
            dxh[i] = dy[i] * gain[i];
            m1 += dxh[i];
            m2 += dxh[i] * xh[i];
        }
        m1 /= n;
        m2 /= n;
        let out = d_in.row_mut(t);
        for i in 0..cols {
            out[i] = inv_std[t] * (dxh[i] - m1 - xh[i] * m2);
        }
    }
    d_in
}

fn head_slice(m: &Matrix, head: usize, head_dim: usize) -> Matrix {
    let off = head * head_dim;
    let mut out = Matrix::zeros(m.rows(), head_dim);
    for t in 0..m.rows() {
        let src = &m.row(t)[off..off + head_dim];
        out.row_mut(t).copy_from_slice(src);
    }
    out
}

fn head_scatter_add(target: &mut Matrix, src: &Matrix, head: usize, head_dim: usize) {
    let off = head * head_dim;
    for t in 0..src.rows() {
        let dst = &mut target.row_mut(t)[off..off + head_dim];
        let s = src.row(t);
        for i in 0..head_dim {
            dst[i] += s[i];
        }
    }
}

/// Full-network activation backward collecting `d loss / d W_eff` for every
/// attention projection.
fn backward_projection_grads(
    view: &dyn WeightView,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> Result<BTreeMap<AttachPoint, Matrix>, ModelError> {
    let base = view.base();
    let cfg = base.config();
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Unembedding and final layer norm.
    let d_final_out = d_logits.matmul(&base.unembedding().transpose())?;
    let mut dx = layer_norm_backward(
        &d_final_out,
        &cache.final_norm,
        &cache.final_inv_std,
        base.final_ln().gain.data(),
    );

    let mut proj_grads: BTreeMap<AttachPoint, Matrix> = BTreeMap::new();

    for layer_idx in (0..cfg.n_layers).rev() {
        let lw = base.layer(layer_idx);
        let lc = &cache.layers[layer_idx];
        let dy = dx; // gradient at the block output (hook injection is additive)

        // MLP branch.
        let d_mlp_act = dy.matmul(&lw.mlp_out.transpose())?;
        let mut d_mlp_pre = Matrix::zeros(d_mlp_act.rows(), d_mlp_act.cols());
        for t in 0..d_mlp_act.rows() {
            let da = d_mlp_act.row(t);
            let pre = lc.mlp_pre.row(t);
            let dp = d_mlp_pre.row_mut(t);
            for i in 0..da.len() {
                dp[i] = da[i] * super::gelu_prime(pre[i]);
            }
        }
        let d_ln2_out = d_mlp_pre.matmul(&lw.mlp_in.transpose())?;
        let d_a1_mlp = layer_norm_backward(
            &d_ln2_out,
            &lc.ln2_norm,
            &lc.ln2_inv_std,
            lw.ln2.gain.data(),
        );
        let d_a1 = dy.add(&d_a1_mlp)?;

        // Attention output projection.
        let d_attn_out = &d_a1;
        let wo_eff = view.attention_projection(layer_idx, Projection::Output);
        let d_wo = lc.context.transpose().matmul(d_attn_out)?;
        let d_context = d_attn_out.matmul(&wo_eff.transpose())?;

        // Per-head attention backward.
        let seq = d_context.rows();
        let mut d_q = Matrix::zeros(seq, cfg.d_model);
        let mut d_k = Matrix::zeros(seq, cfg.d_model);
        let mut d_v = Matrix::zeros(seq, cfg.d_model);
        for h in 0..n_heads {
            let q_h = head_slice(&lc.q, h, head_dim);
            let k_h = head_slice(&lc.k, h, head_dim);
            let v_h = head_slice(&lc.v, h, head_dim);
            let d_ctx_h = head_slice(&d_context, h, head_dim);
            let probs = &lc.attn_probs[h];

            let d_probs = d_ctx_h.matmul(&v_h.transpose())?;
            let d_v_h = probs.transpose().matmul(&d_ctx_h)?;

            // Softmax backward per row; masked entries have prob 0.
            let mut d_scores = Matrix::zeros(seq, seq);
            for t in 0..seq {
                let mut dot = 0.0;
                for s in 0..=t {
                    dot += d_probs.get(t, s) * probs.get(t, s);
                }
                for s in 0..=t {
                    let p = probs.get(t, s);
                    d_scores.set(t, s, p * (d_probs.get(t, s) - dot));
                }
            }
            let d_q_h = d_scores.matmul(&k_h)?.scale(scale);
            let d_k_h = d_scores.transpose().matmul(&q_h)?.scale(scale);

            head_scatter_add(&mut d_q, &d_q_h, h, head_dim);
            head_scatter_add(&mut d_k, &d_k_h, h, head_dim);
            head_scatter_add(&mut d_v, &d_v_h, h, head_dim);
        }

        // Q/K/V projection weight gradients and the path back to ln1.
        let ln1_out_t = lc.ln1_out.transpose();
        let d_wq = ln1_out_t.matmul(&d_q)?;
        let d_wk = ln1_out_t.matmul(&d_k)?;
        let d_wv = ln1_out_t.matmul(&d_v)?;

        let wq_eff = view.attention_projection(layer_idx, Projection::Query);
        let wk_eff = view.attention_projection(layer_idx, Projection::Key);
        let wv_eff = view.attention_projection(layer_idx, Projection::Value);
        let mut d_ln1_out = d_q.matmul(&wq_eff.transpose())?;
        d_ln1_out = d_ln1_out.add(&d_k.matmul(&wk_eff.transpose())?)?;
        d_ln1_out = d_ln1_out.add(&d_v.matmul(&wv_eff.transpose())?)?;

        let d_x_attn = layer_norm_backward(
            &d_ln1_out,
            &lc.ln1_norm,
            &lc.ln1_inv_std,
            lw.ln1.gain.data(),
        );
        dx = d_a1.add(&d_x_attn)?;

        proj_grads.insert((layer_idx, Projection::Query), d_wq);
        proj_grads.insert((layer_idx, Projection::Key), d_wk);
        proj_grads.insert((layer_idx, Projection::Value), d_wv);
        proj_grads.insert((layer_idx, Projection::Output), d_wo);
    }

    Ok(proj_grads)
}

/// Runs a forward pass, evaluates the loss, and returns exact reverse-mode
/// gradients for the trainable adapter's (B, A) parameters only.
pub fn backward_adapters(
    view: &dyn WeightView,
    tokens: &[TokenId],
    loss: &dyn LogitLoss,
    trainable: &LoraAdapter,
) -> Result<(f64, AdapterGradients), ModelError> {
    let points = trainable.attach_points();
    if points.is_empty() {
        return Err(ModelError::EmptyTrainableSet);
    }
    let cache = forward_cached(view, tokens, &[])?;
    let (loss_value, d_logits) = loss.value_and_grad(&cache.logits);
    assert_eq!(d_logits.rows(), cache.logits.rows());
    assert_eq!(d_logits.cols(), cache.logits.cols());

    let proj_grads = backward_projection_grads(view, &cache, &d_logits)?;

    // Chain rule into low-rank coordinates: W_eff = ... + scale * B A, so
    // dB = scale * dW A^T and dA = scale * B^T dW.
    let scale = trainable.effective_scale();
    let mut grads = BTreeMap::new();
    for point in points {
        let d_w = proj_grads
            .get(&point)
            .expect("projection gradient exists for every attach point");
        let pair = trainable.pair(point).expect("attach point has a pair");
        let d_b = d_w.matmul(&pair.a.transpose())?.scale(scale);
        let d_a = pair.b.transpose().matmul(d_w)?.scale(scale);
        grads.insert(point, (d_b, d_a));
    }
    Ok((loss_value, AdapterGradients { grads }))
}
