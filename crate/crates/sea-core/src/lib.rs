//! Separable expert architecture over a desk-scale toy language model:
//! composable shared domain experts, deletable per-user proxy artifacts, a
//! deterministic deletion protocol, and noise-calibrated statistical
//! verification.

pub mod adapters;
pub mod numerics;
pub mod router;
pub mod toy_lm;
pub mod vocab;
