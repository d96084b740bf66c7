//! Query-to-cluster cost matrix and exact one-to-one assignment.

mod hungarian;
pub mod oracle;

pub use hungarian::hungarian;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid match weights: {0}")]
    Weights(String),
}

/// Weights of the classification and localization terms of the cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub lambda_m_cls: f64,
    pub lambda_m_loc: f64,
}

impl MatchWeights {
    pub fn new(lambda_m_cls: f64, lambda_m_loc: f64) -> Result<Self, MatchError> {
        let w = Self {
            lambda_m_cls,
            lambda_m_loc,
        };
        w.validate()?;
        Ok(w)
    }

    /// Pure L1 geometry, no classification term.
    pub fn geometry_only() -> Self {
        Self {
            lambda_m_cls: 0.0,
            lambda_m_loc: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_m_cls) || !ok(self.lambda_m_loc) {
            return Err(MatchError::Weights(format!(
                "{self:?} must be finite and >= 0"
            )));
        }
        if self.lambda_m_cls == 0.0 && self.lambda_m_loc == 0.0 {
            return Err(MatchError::Weights("both weights are zero".into()));
        }
        Ok(())
    }
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            lambda_m_cls: 1.0,
            lambda_m_loc: 2.0,
        }
    }
}

/// `(Q, K)` cost matrix, row-major.
pub fn cost_matrix(
    probs: &[f64],
    locs: &[[f64; 2]],
    targets: &[[f64; 2]],
    w: &MatchWeights,
) -> Vec<f64> {
    assert_eq!(probs.len(), locs.len(), "one location per query");
    let mut out = Vec::with_capacity(probs.len() * targets.len());
    for (p, y) in probs.iter().zip(locs) {
        for g in targets {
            let l1 = (y[0] - g[0]).abs() + (y[1] - g[1]).abs();
            out.push(w.lambda_m_cls * -p + w.lambda_m_loc * l1);
        }
    }
    out
}

/// Optimal assignment and the per-query class labels it implies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, target)` pairs, sorted by query.
    pub pairs: Vec<(usize, usize)>,
    /// 1 for matched queries, 0 otherwise.
    pub labels: Vec<u8>,
}

impl MatchResult {
    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }
}

/// Matches queries `(probs, locs)` to target centres.
pub fn match_queries(
    probs: &[f64],
    locs: &[[f64; 2]],
    targets: &[[f64; 2]],
    w: &MatchWeights,
) -> Result<MatchResult, MatchError> {
    w.validate()?;
    if probs.len() != locs.len() {
        return Err(MatchError::Shape(format!(
            "{} probabilities but {} locations",
            probs.len(),
            locs.len()
        )));
    }
    let q = probs.len();
    let mut labels = vec![0u8; q];
    if targets.is_empty() {
        return Ok(MatchResult {
            pairs: Vec::new(),
            labels,
        });
    }
    let cost = cost_matrix(probs, locs, targets, w);
    let pairs = hungarian(&cost, q, targets.len())?;
    for &(i, _) in &pairs {
        labels[i] = 1;
    }
    Ok(MatchResult { pairs, labels })
}

/// Sum of the selected entries.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * cols + j]).sum()
}
