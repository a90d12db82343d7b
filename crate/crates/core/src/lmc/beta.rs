use std::fmt;
use std::str::FromStr;

use crate::error::LmcError;
use crate::graph::Graph;
use crate::partition::MiniBatch;

/// Quality score of a boundary node's incomplete up-to-date value, applied to
/// `x = deg_local / deg_global`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Square,
    TwoXMinusSquare,
    Linear,
    One,
    Sin,
}

impl ScoreKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScoreKind::Square => x * x,
            ScoreKind::TwoXMinusSquare => 2.0 * x - x * x,
            ScoreKind::Linear => x,
            ScoreKind::One => 1.0,
            ScoreKind::Sin => x.sin(),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScoreKind::Square => "x2",
            ScoreKind::TwoXMinusSquare => "2x-x2",
            ScoreKind::Linear => "x",
            ScoreKind::One => "1",
            ScoreKind::Sin => "sin",
        };
        f.write_str(s)
    }
}

impl FromStr for ScoreKind {
    type Err = LmcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "x2" | "x^2" => Ok(ScoreKind::Square),
            "2x-x2" | "2x-x^2" => Ok(ScoreKind::TwoXMinusSquare),
            "x" => Ok(ScoreKind::Linear),
            "1" | "one" => Ok(ScoreKind::One),
            "sin" | "sin(x)" => Ok(ScoreKind::Sin),
            other => Err(LmcError::invalid(format!("unknown score kind {other:?}"))),
        }
    }
}

/// `beta_i = alpha * score(deg_local(i) / deg_global(i))`, shared by every
/// layer of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub alpha: f64,
    pub score: ScoreKind,
}

impl BetaSchedule {
    pub fn new(alpha: f64, score: ScoreKind) -> Result<Self, LmcError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(LmcError::invalid(format!("alpha = {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha, score })
    }

    /// Small batches favor a small `beta`; large ones use the plain `alpha`.
    pub fn default_for(num_clusters: usize, batch_clusters: usize) -> Self {
        if 2 * batch_clusters >= num_clusters {
            Self {
                alpha: 1.0,
                score: ScoreKind::One,
            }
        } else {
            Self {
                alpha: 0.4,
                score: ScoreKind::TwoXMinusSquare,
            }
        }
    }

    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            score: ScoreKind::One,
        }
    }
}

/// Degree of `node` inside the subgraph induced by the batch closure.
pub fn local_degree(node: usize, batch: &MiniBatch, g: &Graph) -> usize {
    g.neighbors(node)
        .iter()
        .filter(|&&j| batch.halo.contains(j))
        .count()
}

pub fn beta_for(node: usize, batch: &MiniBatch, g: &Graph, sched: &BetaSchedule) -> f64 {
    let global = g.degree(node);
    if global == 0 {
        return 0.0;
    }
    let x = local_degree(node, batch, g) as f64 / global as f64;
    (sched.score.apply(x) * sched.alpha).clamp(0.0, 1.0)
}

/// `beta` for every boundary node, aligned with `batch.boundary()`.
pub fn boundary_betas(batch: &MiniBatch, g: &Graph, sched: &BetaSchedule) -> Vec<f64> {
    batch
        .boundary()
        .iter()
        .map(|&i| beta_for(i, batch, g, sched))
        .collect()
}
