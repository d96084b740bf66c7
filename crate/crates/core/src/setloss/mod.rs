//! Set objective: weighted cross entropy over every query plus L1
//! localization over matched pairs. The assignment is computed from the
//! current forward values and enters the graph only as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::{match_queries, MatchError, MatchResult, MatchWeights};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Class index of "no fire" in the logits.
pub const NO_FIRE: usize = 0;
/// Class index of "fire" in the logits.
pub const FIRE: usize = 1;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("invalid loss config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// How the weighted cross-entropy sum is normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassNorm {
    /// Divide by the number of queries.
    #[default]
    PerQuery,
    /// Divide by the sum of the class weights actually used.
    WeightedMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_loc: f64,
    pub w_eos: f64,
    pub match_weights: MatchWeights,
    #[serde(default)]
    pub class_norm: ClassNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_loc: 5.0,
            w_eos: 0.1,
            match_weights: MatchWeights::default(),
            class_norm: ClassNorm::PerQuery,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_loc.is_finite() && self.lambda_loc >= 0.0) {
            return Err(LossError::Config(format!(
                "lambda_loc {} must be >= 0",
                self.lambda_loc
            )));
        }
        if !(self.w_eos.is_finite() && self.w_eos > 0.0) {
            return Err(LossError::Config(format!(
                "w_eos {} must be > 0",
                self.w_eos
            )));
        }
        self.match_weights.validate()?;
        Ok(())
    }
}

/// Decoder output for one entity: `(Q, 2)` class logits and `(Q, 2)`
/// normalised locations.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub logits: Var,
    pub locs: Var,
}

/// Fire probability `softmax(z)[FIRE]` per query, from forward values.
pub fn fire_probs<T: Scalar>(g: &Graph<T>, logits: Var) -> Vec<f64> {
    let z = g.value(logits);
    let q = z.shape()[0];
    (0..q)
        .map(|i| {
            let (a, b) = (z.at2(i, NO_FIRE).as_f64(), z.at2(i, FIRE).as_f64());
            // softmax over two classes is a sigmoid of the difference
            let d = b - a;
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Locations as points, from forward values.
pub fn locations<T: Scalar>(g: &Graph<T>, locs: Var) -> Vec<[f64; 2]> {
    let y = g.value(locs);
    (0..y.shape()[0])
        .map(|i| [y.at2(i, 0).as_f64(), y.at2(i, 1).as_f64()])
        .collect()
}

/// Weighted cross entropy with class weights `{w_eos, 1}`.
pub fn classification_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[u8],
    w_eos: f64,
    norm: ClassNorm,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(TensorError::shape(
            "classification_loss",
            format!("logits {shape:?} vs {} labels", labels.len()),
        )
        .into());
    }
    let q = labels.len();
    let mut weights = vec![0.0f64; q * 2];
    let mut total_weight = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        let w = if c as usize == FIRE { 1.0 } else { w_eos };
        weights[i * 2 + c as usize] = w;
        total_weight += w;
    }
    let denom = match norm {
        ClassNorm::PerQuery => q as f64,
        ClassNorm::WeightedMean => total_weight,
    };
    let logp = g.log_softmax(logits, 1)?;
    let wt = g.constant(Tensor::from_f64(vec![q, 2], &weights)?);
    let picked = g.mul(logp, wt)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / denom.max(f64::MIN_POSITIVE))?)
}

/// Mean per-coordinate L1 distance over matched pairs; a constant zero when
/// nothing is matched.
pub fn localization_loss<T: Scalar>(
    g: &mut Graph<T>,
    locs: Var,
    targets: &[[f64; 2]],
    pairs: &[(usize, usize)],
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let goal: Vec<f64> = pairs.iter().flat_map(|p| targets[p.1]).collect();
    let picked = g.gather(locs, 0, rows)?;
    let goal = g.constant(Tensor::from_f64(vec![pairs.len(), 2], &goal)?);
    let diff = g.sub(picked, goal)?;
    let dist = g.abs(diff)?;
    let s = g.sum(dist)?;
    Ok(g.scale(s, 1.0 / (2.0 * pairs.len() as f64))?)
}

/// Loss node plus the pieces worth logging.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub cls: f64,
    pub loc: f64,
    pub matching: MatchResult,
}

impl LossOutput {
    pub fn value<T: Scalar>(&self, g: &Graph<T>) -> f64 {
        g.value(self.total).data()[0].as_f64()
    }
}

/// Matches, then builds `L_cls + lambda_loc * L_loc`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    queries: QueryVars,
    targets: &[[f64; 2]],
    config: &LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    let probs = fire_probs(g, queries.logits);
    let locs = locations(g, queries.locs);
    let matching = match_queries(&probs, &locs, targets, &config.match_weights)?;
    let cls = classification_loss(
        g,
        queries.logits,
        &matching.labels,
        config.w_eos,
        config.class_norm,
    )?;
    let loc = localization_loss(g, queries.locs, targets, &matching.pairs)?;
    let weighted = g.scale(loc, config.lambda_loc)?;
    let total = g.add(cls, weighted)?;
    Ok(LossOutput {
        total,
        cls: g.value(cls).data()[0].as_f64(),
        loc: g.value(loc).data()[0].as_f64(),
        matching,
    })
}
