//! LoRA adapter algebra: construction, scaled low-rank deltas, and the
//! weighted linear merge of an expert bank plus an optional personal adapter
//! into a single effective-weight view over a frozen base model.
//!
//! Deltas are materialized densely (`d_model x d_model`) so the merge
//! arithmetic is directly assertable in tests. The merged view never touches
//! the base weights; release verifies that with a content-hash check.

use crate::numerics::{Matrix, Rng, Vector};
use crate::toy_lm::{AttachPoint, ModelConfig, ModelWeights, Projection, WeightView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("expert bank is empty")]
    EmptyBank,
    #[error("weight vector has {got} entries, bank has {want} experts")]
    WeightCountMismatch { got: usize, want: usize },
    #[error("weights are off the probability simplex: {reason}")]
    OffSimplex { reason: String },
    #[error("adapter dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("experts do not share an attach-point structure")]
    MismatchedAttachStructure,
    #[error("merged view already released")]
    AlreadyReleased,
    #[error("base weights changed while a merged view was alive")]
    BaseMutated,
    #[error("domain name list has {got} entries, bank has {want} experts")]
    DomainNameMismatch { got: usize, want: usize },
}

/// How a low-rank delta is scaled when applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoraScaling {
    /// Conventional `alpha / rank` scaling.
    #[default]
    AlphaOverRank,
    /// Bare `B A` with no scaling.
    Bare,
}

/// One low-rank pair: `b` is `d_model x rank`, `a` is `rank x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub b: Matrix,
    pub a: Matrix,
}

/// A named LoRA adapter over a set of attention-projection attach points.
/// Used both for shared domain experts and per-user personal adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    name: String,
    rank: usize,
    alpha: f64,
    scaling: LoraScaling,
    pairs: BTreeMap<AttachPoint, LoraPair>,
}

impl LoraAdapter {
    /// Standard LoRA init over every attention projection of every layer:
    /// B = 0, A ~ N(0, 0.02), so the initial delta is exactly zero.
    pub fn seeded_init(
        name: &str,
        config: &ModelConfig,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Self {
        assert!(rank >= 1, "rank must be >= 1");
        assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be finite and > 0");
        let mut rng = Rng::from_seed(seed);
        let d = config.d_model;
        let mut pairs = BTreeMap::new();
        for layer in 0..config.n_layers {
            for proj in Projection::ALL {
                let b = Matrix::zeros(d, rank);
                let a = Matrix::from_vec(
                    rank,
                    d,
                    (0..rank * d).map(|_| rng.normal(0.0, 0.02)).collect(),
                );
                pairs.insert((layer, proj), LoraPair { b, a });
            }
        }
        LoraAdapter {
            name: name.to_string(),
            rank,
            alpha,
            scaling: LoraScaling::AlphaOverRank,
            pairs,
        }
    }

    /// Builds an adapter from explicit pairs, validating rank and dimensions.
    pub fn from_pairs(
        name: &str,
        rank: usize,
        alpha: f64,
        scaling: LoraScaling,
        pairs: BTreeMap<AttachPoint, LoraPair>,
    ) -> Result<Self, MergeError> {
        if rank == 0 || !(alpha > 0.0) || !alpha.is_finite() {
            return Err(MergeError::DimensionMismatch(format!(
                "adapter {name}: rank {rank} / alpha {alpha} invalid"
            )));
        }
        for ((layer, proj), pair) in &pairs {
            if pair.b.cols() != rank || pair.a.rows() != rank {
                return Err(MergeError::DimensionMismatch(format!(
                    "adapter {name} at layer {layer} {proj:?}: B is {}x{}, A is {}x{}, rank {rank}",
                    pair.b.rows(),
                    pair.b.cols(),
                    pair.a.rows(),
                    pair.a.cols()
                )));
            }
            if pair.b.rows() != pair.a.cols() {
                return Err(MergeError::DimensionMismatch(format!(
                    "adapter {name} at layer {layer} {proj:?}: B rows {} != A cols {}",
                    pair.b.rows(),
                    pair.a.cols()
                )));
            }
        }
        Ok(LoraAdapter {
            name: name.to_string(),
            rank,
            alpha,
            scaling,
            pairs,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> LoraScaling {
        self.scaling
    }

    pub fn with_scaling(mut self, scaling: LoraScaling) -> Self {
        self.scaling = scaling;
        self
    }

    /// Delta multiplier applied to `B A`.
    pub fn effective_scale(&self) -> f64 {
        match self.scaling {
            LoraScaling::AlphaOverRank => self.alpha / self.rank as f64,
            LoraScaling::Bare => 1.0,
        }
    }

    pub fn attach_points(&self) -> Vec<AttachPoint> {
        self.pairs.keys().copied().collect()
    }

    pub fn pair(&self, point: AttachPoint) -> Option<&LoraPair> {
        self.pairs.get(&point)
    }

    pub(crate) fn pair_mut(&mut self, point: AttachPoint) -> Option<&mut LoraPair> {
        self.pairs.get_mut(&point)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&AttachPoint, &LoraPair)> {
        self.pairs.iter()
    }

    /// Dense scaled delta `effective_scale * B A` at one attach point.
    pub fn delta(&self, point: AttachPoint) -> Option<Matrix> {
        let pair = self.pairs.get(&point)?;
        let product = pair.b.matmul(&pair.a).expect("rank dimensions validated");
        Some(product.scale(self.effective_scale()))
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update(self.name.as_bytes());
        h.update((self.rank as u64).to_le_bytes());
        h.update(self.alpha.to_le_bytes());
        h.update(match self.scaling {
            LoraScaling::AlphaOverRank => [0u8],
            LoraScaling::Bare => [1u8],
        });
        for ((layer, proj), pair) in &self.pairs {
            h.update((*layer as u64).to_le_bytes());
            h.update(proj.short_name().as_bytes());
            crate::toy_lm::hash_matrix(h, "b", &pair.b);
            crate::toy_lm::hash_matrix(h, "a", &pair.a);
        }
    }
}

/// Ordered bank of shared domain experts.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    experts: Vec<LoraAdapter>,
    domain_names: Vec<String>,
}

impl ExpertBank {
    pub fn new(experts: Vec<LoraAdapter>, domain_names: Vec<String>) -> Result<Self, MergeError> {
        if experts.is_empty() {
            return Err(MergeError::EmptyBank);
        }
        if domain_names.len() != experts.len() {
            return Err(MergeError::DomainNameMismatch {
                got: domain_names.len(),
                want: experts.len(),
            });
        }
        let reference = experts[0].attach_points();
        for e in &experts[1..] {
            if e.attach_points() != reference {
                return Err(MergeError::MismatchedAttachStructure);
            }
        }
        Ok(ExpertBank {
            experts,
            domain_names,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, i: usize) -> &LoraAdapter {
        &self.experts[i]
    }

    pub fn experts(&self) -> &[LoraAdapter] {
        &self.experts
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn attach_points(&self) -> Vec<AttachPoint> {
        self.experts[0].attach_points()
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        h.update((self.experts.len() as u64).to_le_bytes());
        for (name, expert) in self.domain_names.iter().zip(&self.experts) {
            h.update(name.as_bytes());
            expert.hash_into(h);
        }
    }
}

/// Effective-weight view produced by [`merge`]: the frozen base plus dense
/// per-attach-point deltas. Single-owner per inference session; release
/// clears the delta storage and re-verifies the base hash.
#[derive(Debug)]
pub struct MergedView<'a> {
    base: &'a ModelWeights,
    deltas: BTreeMap<AttachPoint, Matrix>,
    effective: BTreeMap<AttachPoint, Matrix>,
    base_hash: [u8; 32],
    released: bool,
}

impl<'a> MergedView<'a> {
    pub fn delta(&self, point: AttachPoint) -> Option<&Matrix> {
        self.deltas.get(&point)
    }

    pub fn attach_points(&self) -> Vec<AttachPoint> {
        self.deltas.keys().copied().collect()
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// Frees delta storage and verifies the base weights are unchanged.
    pub fn release(&mut self) -> Result<(), MergeError> {
        if self.released {
            return Err(MergeError::AlreadyReleased);
        }
        if self.base.content_hash() != self.base_hash {
            return Err(MergeError::BaseMutated);
        }
        self.deltas.clear();
        self.effective.clear();
        self.released = true;
        Ok(())
    }
}

impl<'a> WeightView for MergedView<'a> {
    fn base(&self) -> &ModelWeights {
        self.base
    }

    fn attention_projection(&self, layer: usize, proj: Projection) -> &Matrix {
        assert!(!self.released, "merged view used after release");
        self.effective
            .get(&(layer, proj))
            .unwrap_or_else(|| self.base.layer(layer).projection(proj))
    }
}

fn check_simplex(weights: &Vector, k: usize) -> Result<(), MergeError> {
    if weights.len() != k {
        return Err(MergeError::WeightCountMismatch {
            got: weights.len(),
            want: k,
        });
    }
    for (i, w) in weights.data().iter().enumerate() {
        if *w < 0.0 || !w.is_finite() {
            return Err(MergeError::OffSimplex {
                reason: format!("entry {i} is {w}"),
            });
        }
    }
    let sum = weights.sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(MergeError::OffSimplex {
            reason: format!("sum is {sum}"),
        });
    }
    Ok(())
}

fn check_adapter_dims(adapter: &LoraAdapter, config: &ModelConfig) -> Result<(), MergeError> {
    let d = config.d_model;
    for ((layer, proj), pair) in adapter.pairs() {
        if *layer >= config.n_layers {
            return Err(MergeError::DimensionMismatch(format!(
                "adapter {} attaches to layer {layer} but model has {} layers",
                adapter.name(),
                config.n_layers
            )));
        }
        if pair.b.rows() != d || pair.a.cols() != d {
            return Err(MergeError::DimensionMismatch(format!(
                "adapter {} at layer {layer} {proj:?} has B {}x{} / A {}x{}, model d_model {d}",
                adapter.name(),
                pair.b.rows(),
                pair.b.cols(),
                pair.a.rows(),
                pair.a.cols()
            )));
        }
    }
    Ok(())
}

/// Weighted linear combination of the expert bank plus an optional personal
/// adapter (merged unweighted), materialized as dense effective projections.
pub fn merge<'a>(
    base: &'a ModelWeights,
    bank: &ExpertBank,
    weights: &Vector,
    personal: Option<&LoraAdapter>,
) -> Result<MergedView<'a>, MergeError> {
    check_simplex(weights, bank.k())?;
    let config = base.config();
    for expert in bank.experts() {
        check_adapter_dims(expert, config)?;
    }
    if let Some(p) = personal {
        check_adapter_dims(p, config)?;
    }

    let mut points: Vec<AttachPoint> = bank.attach_points();
    if let Some(p) = personal {
        for point in p.attach_points() {
            if !points.contains(&point) {
                points.push(point);
            }
        }
        points.sort();
    }

    let d = config.d_model;
    let mut deltas = BTreeMap::new();
    let mut effective = BTreeMap::new();
    for point in points {
        let mut delta = Matrix::zeros(d, d);
        for (i, expert) in bank.experts().iter().enumerate() {
            let w = weights.get(i);
            if w == 0.0 {
                continue;
            }
            if let Some(expert_delta) = expert.delta(point) {
                delta
                    .add_scaled_assign(&expert_delta, w)
                    .map_err(|e| MergeError::DimensionMismatch(e.to_string()))?;
            }
        }
        if let Some(p) = personal {
            if let Some(personal_delta) = p.delta(point) {
                delta
                    .add_scaled_assign(&personal_delta, 1.0)
                    .map_err(|e| MergeError::DimensionMismatch(e.to_string()))?;
            }
        }
        let eff = base
            .layer(point.0)
            .projection(point.1)
            .add(&delta)
            .map_err(|e| MergeError::DimensionMismatch(e.to_string()))?;
        deltas.insert(point, delta);
        effective.insert(point, eff);
    }

    Ok(MergedView {
        base,
        deltas,
        effective,
        base_hash: base.content_hash(),
        released: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_lm::{forward, generate, DecodeParams};

    fn tiny_config() -> ModelConfig {
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

    fn random_adapter(name: &str, config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> LoraAdapter {
        let mut adapter = LoraAdapter::seeded_init(name, config, rank, alpha, seed);
        let mut rng = Rng::from_seed(seed ^ 0x5EED);
        for point in adapter.attach_points() {
            let pair = adapter.pair_mut(point).unwrap();
            let d = pair.b.rows();
            let r = pair.b.cols();
            pair.b = Matrix::from_vec(d, r, (0..d * r).map(|_| rng.normal(0.0, 0.1)).collect());
        }
        adapter
    }

    fn one_hot(k: usize, j: usize) -> Vector {
        let mut v = vec![0.0; k];
        v[j] = 1.0;
        Vector::from_vec(v)
    }

    #[test]
    fn one_hot_merge_is_single_scaled_delta() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 1);
        let e0 = random_adapter("e0", &cfg, 2, 4.0, 10);
        let e1 = random_adapter("e1", &cfg, 2, 4.0, 11);
        let bank = ExpertBank::new(vec![e0.clone(), e1], vec!["a".into(), "b".into()]).unwrap();
        let view = merge(&base, &bank, &one_hot(2, 0), None).unwrap();
        for point in bank.attach_points() {
            let want = e0.delta(point).unwrap();
            assert!(view.delta(point).unwrap().max_abs_diff(&want) == 0.0);
            let eff = view.attention_projection(point.0, point.1);
            let expected = base.layer(point.0).projection(point.1).add(&want).unwrap();
            assert_eq!(eff, &expected);
        }
    }

    #[test]
    fn zero_b_adapter_merge_behaves_as_base() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 2);
        // seeded_init keeps B = 0, so deltas are exactly zero.
        let e0 = LoraAdapter::seeded_init("zero", &cfg, 2, 4.0, 3);
        let bank = ExpertBank::new(vec![e0], vec!["z".into()]).unwrap();
        let view = merge(&base, &bank, &one_hot(1, 0), None).unwrap();
        let tokens = [1u32, 5, 9];
        let a = forward(&base, &tokens, &[]).unwrap();
        let b = forward(&view, &tokens, &[]).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn half_half_merge_is_mean_of_single_expert_deltas() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 4);
        let e0 = random_adapter("e0", &cfg, 2, 4.0, 20);
        let e1 = random_adapter("e1", &cfg, 3, 6.0, 21);
        let bank =
            ExpertBank::new(vec![e0.clone(), e1.clone()], vec!["a".into(), "b".into()]).unwrap();
        let view = merge(&base, &bank, &Vector::from_vec(vec![0.5, 0.5]), None).unwrap();
        for point in bank.attach_points() {
            let mean = e0
                .delta(point)
                .unwrap()
                .scale(0.5)
                .add(&e1.delta(point).unwrap().scale(0.5))
                .unwrap();
            assert!(view.delta(point).unwrap().max_abs_diff(&mean) < 1e-12);
        }
    }

    #[test]
    fn off_simplex_weights_are_rejected() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 5);
        let bank = ExpertBank::new(
            vec![random_adapter("e", &cfg, 2, 4.0, 30)],
            vec!["e".into()],
        )
        .unwrap();
        assert!(matches!(
            merge(&base, &bank, &Vector::from_vec(vec![-0.1]), None),
            Err(MergeError::OffSimplex { .. })
        ));
        assert!(matches!(
            merge(&base, &bank, &Vector::from_vec(vec![0.5]), None),
            Err(MergeError::OffSimplex { .. })
        ));
        assert!(matches!(
            merge(&base, &bank, &Vector::from_vec(vec![0.5, 0.5]), None),
            Err(MergeError::WeightCountMismatch { .. })
        ));
    }

    #[test]
    fn release_frees_and_double_release_errors() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 6);
        let hash_before = base.content_hash();
        let bank = ExpertBank::new(
            vec![random_adapter("e", &cfg, 2, 4.0, 31)],
            vec!["e".into()],
        )
        .unwrap();
        let mut view = merge(&base, &bank, &one_hot(1, 0), None).unwrap();
        view.release().unwrap();
        assert!(view.is_released());
        assert!(matches!(view.release(), Err(MergeError::AlreadyReleased)));
        assert_eq!(base.content_hash(), hash_before);
    }

    #[test]
    fn merge_release_leaves_baseline_generation_unchanged() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 7);
        let bank = ExpertBank::new(
            vec![random_adapter("e", &cfg, 2, 4.0, 32)],
            vec!["e".into()],
        )
        .unwrap();
        let personal = random_adapter("me", &cfg, 2, 2.0, 33);
        let params = DecodeParams::greedy(6);
        let before = generate(&base, &[3, 4], &params, &[]).unwrap();
        let mut view = merge(&base, &bank, &one_hot(1, 0), Some(&personal)).unwrap();
        let _ = generate(&view, &[3, 4], &params, &[]).unwrap();
        view.release().unwrap();
        let after = generate(&base, &[3, 4], &params, &[]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn merge_linearity_on_random_adapters() {
        let cfg = tiny_config();
        let base = ModelWeights::init(cfg.clone(), 8);
        let experts: Vec<LoraAdapter> = (0..4)
            .map(|i| random_adapter(&format!("e{i}"), &cfg, 2, 4.0, 40 + i as u64))
            .collect();
        let names: Vec<String> = (0..4).map(|i| format!("d{i}")).collect();
        let bank = ExpertBank::new(experts.clone(), names).unwrap();
        let weights = Vector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let view = merge(&base, &bank, &weights, None).unwrap();
        for point in bank.attach_points() {
            let mut want = Matrix::zeros(cfg.d_model, cfg.d_model);
            for (i, e) in experts.iter().enumerate() {
                want.add_scaled_assign(&e.delta(point).unwrap(), weights.get(i))
                    .unwrap();
            }
            assert!(view.delta(point).unwrap().max_abs_diff(&want) < 1e-10);
        }
    }
}
