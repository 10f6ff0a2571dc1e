//! Conflict-aware gradient aggregation across per-objective gradients.
//!
//! Each training step produces one flat gradient per objective (the original
//! full-model loss plus one compatible loss per training crop ratio). When
//! two of them point against each other, summing them lets one objective
//! cancel another. Projection instead removes, from a working copy of each
//! gradient, the component along every raw gradient it conflicts with, then
//! sums the projected copies. Projections always target the raw gradients,
//! never the evolving copies, and the pair order is reshuffled per copy from
//! a seeded generator so no objective is systematically favored.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("gradient for {objective} has {got} entries, expected {expected}")]
    LengthMismatch {
        objective: String,
        expected: usize,
        got: usize,
    },
    #[error("gradient for {objective} is empty")]
    EmptyGradient { objective: String },
    #[error("gradient for {objective} has non-finite value {value} at index {index}")]
    NonFinite {
        objective: String,
        value: f64,
        index: usize,
    },
    #[error("no gradients to aggregate")]
    EmptySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Project,
    Summation,
}

/// Per-step seed: the run seed folded with the global step index so every
/// step shuffles differently but reruns reproduce exactly.
pub fn step_seed(global_seed: u64, step_index: u64) -> u64 {
    global_seed ^ step_index
}

/// Flat per-objective gradients of one step, all the same length.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    names: Vec<String>,
    grads: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, grad: Vec<f64>) -> Result<(), GradError> {
        let name = name.into();
        if grad.is_empty() {
            return Err(GradError::EmptyGradient { objective: name });
        }
        if let Some(first) = self.grads.first() {
            if grad.len() != first.len() {
                return Err(GradError::LengthMismatch {
                    objective: name,
                    expected: first.len(),
                    got: grad.len(),
                });
            }
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GradError::NonFinite {
                objective: name,
                value,
                index,
            });
        }
        self.names.push(name);
        self.grads.push(grad);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.grads.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn raw(&self) -> &[Vec<f64>] {
        &self.grads
    }

    /// Fraction of unordered raw pairs with negative dot product.
    pub fn conflict_rate(&self) -> f64 {
        let n = self.grads.len();
        if n < 2 {
            return 0.0;
        }
        let mut conflicts = 0usize;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                pairs += 1;
                if dot(&self.grads[i], &self.grads[j]) < 0.0 {
                    conflicts += 1;
                }
            }
        }
        conflicts as f64 / pairs as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes from `target` its component along `against` when the two
/// conflict. Returns whether a projection happened.
pub fn project_pair(target: &mut [f64], against: &[f64]) -> bool {
    let d = dot(target, against);
    if d >= 0.0 {
        return false;
    }
    let norm_sq = dot(against, against);
    if norm_sq == 0.0 {
        return false;
    }
    let coef = d / norm_sq;
    for (t, &a) in target.iter_mut().zip(against) {
        *t -= coef * a;
    }
    true
}

/// Combines the set into a single flat gradient. The caller negates and
/// scales the result into a parameter update.
pub fn aggregate(set: &GradientSet, mode: AggregationMode, seed: u64) -> Result<Vec<f64>, GradError> {
    if set.is_empty() {
        return Err(GradError::EmptySet);
    }
    let raw = &set.grads;
    match mode {
        AggregationMode::Summation => Ok(sum_rows(raw)),
        AggregationMode::Project => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut copies = raw.clone();
            let mut order: Vec<usize> = (0..raw.len()).collect();
            for (a, copy) in copies.iter_mut().enumerate() {
                order.shuffle(&mut rng);
                for &b in &order {
                    if b == a {
                        continue;
                    }
                    project_pair(copy, &raw[b]);
                }
            }
            Ok(sum_rows(&copies))
        }
    }
}

fn sum_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for row in rows {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
