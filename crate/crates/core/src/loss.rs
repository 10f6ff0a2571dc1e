//! Training objectives.
//!
//! The compatible loss turns sub-model logits into Dirichlet evidence and
//! scores the implied opinion: an integrated cross-entropy under the
//! Dirichlet plus a KL pull toward the uniform Dirichlet that keeps evidence
//! for wrong classes from growing unchecked. A plain softmax cross-entropy
//! through the shared classifier serves as the ablation baseline, and the
//! original full-model objective is cross-entropy with an optional
//! batch-hard triplet term on normalized features.

use crate::tensor::{special, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch of labels is empty")]
    EmptyBatch,
    #[error("{labels} labels for a batch of {rows} rows")]
    LabelCountMismatch { labels: usize, rows: usize },
    #[error("kl weight must be finite and nonnegative, got {0}")]
    BadLambda(f64),
    #[error("negative evidence {value} at element {index}")]
    NegativeEvidence { value: f64, index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Evidential,
    BctBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompatibleLossConfig {
    pub lambda: f64,
    pub kind: LossKind,
}

impl Default for CompatibleLossConfig {
    fn default() -> Self {
        CompatibleLossConfig {
            lambda: 0.2,
            kind: LossKind::Evidential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginalLossKind {
    SoftmaxCe,
    SoftmaxCePlusTriplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OriginalLossConfig {
    pub kind: OriginalLossKind,
    pub triplet_margin: f64,
}

impl Default for OriginalLossConfig {
    fn default() -> Self {
        OriginalLossConfig {
            kind: OriginalLossKind::SoftmaxCePlusTriplet,
            triplet_margin: 0.3,
        }
    }
}

/// Subjective opinion of one batch: evidence `[B × C]` and the derived
/// Dirichlet quantities, all live on the tape.
#[derive(Debug, Clone, Copy)]
pub struct DirichletOpinion {
    pub evidence: Var,
    pub alpha: Var,
    /// Row sums of alpha, `[B]`.
    pub strength: Var,
    pub belief: Var,
    pub uncertainty: Var,
    pub batch: usize,
    pub num_classes: usize,
}

/// One-hot rows for dense labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor, LossError> {
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut data = vec![0.0; labels.len() * num_classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(LossError::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        data[r * num_classes + l] = 1.0;
    }
    Ok(Tensor::matrix(labels.len(), num_classes, data).expect("one-hot shape"))
}

/// Builds the opinion for raw nonnegative evidence already on the tape.
pub fn opinion_from_evidence(tape: &mut Tape, evidence: Var) -> Result<DirichletOpinion, LossError> {
    let (batch, num_classes) = tape
        .value(evidence)
        .dims2()
        .ok_or(TensorError::BadRank {
            op: "opinion_from_evidence",
            expected: "rank-2 evidence",
            got: tape.value(evidence).shape().to_vec(),
        })?;
    if let Some((index, &value)) = tape
        .value(evidence)
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v < 0.0)
    {
        return Err(LossError::NegativeEvidence { value, index });
    }
    let alpha = tape.add_scalar(evidence, 1.0)?;
    let strength = tape.sum_axis(alpha, 1)?;
    let s_col = tape.reshape(strength, vec![batch, 1])?;
    let am1 = tape.add_scalar(alpha, -1.0)?;
    let belief = tape.div(am1, s_col)?;
    let c_leaf = tape.leaf(Tensor::vector(vec![num_classes as f64; batch]))?;
    let uncertainty = tape.div(c_leaf, strength)?;
    Ok(DirichletOpinion {
        evidence,
        alpha,
        strength,
        belief,
        uncertainty,
        batch,
        num_classes,
    })
}

/// Evidence head: sub-model features through the shared classifier, exp
/// activation, Dirichlet opinion. Differentiable end to end.
pub fn make_opinion(
    tape: &mut Tape,
    features: Var,
    cls_weight: Var,
    cls_bias: Var,
) -> Result<DirichletOpinion, LossError> {
    let logits = tape.matmul_bt(features, cls_weight)?;
    let logits = tape.add(logits, cls_bias)?;
    let evidence = tape.exp(logits)?;
    opinion_from_evidence(tape, evidence)
}

/// Expected cross-entropy under the opinion's Dirichlet:
/// per row Σ_c y_c (ψ(S) − ψ(α_c)), batch mean.
pub fn evidential_ce(
    tape: &mut Tape,
    opinion: &DirichletOpinion,
    labels: &[usize],
) -> Result<Var, LossError> {
    check_labels(labels, opinion)?;
    let y = tape.leaf(one_hot(labels, opinion.num_classes)?)?;
    let psi_alpha = tape.digamma(opinion.alpha)?;
    let psi_s = tape.digamma(opinion.strength)?;
    let psi_s_col = tape.reshape(psi_s, vec![opinion.batch, 1])?;
    let gap = tape.sub(psi_s_col, psi_alpha)?;
    let picked = tape.mul(y, gap)?;
    let rows = tape.sum_axis(picked, 1)?;
    Ok(tape.mean_all(rows)?)
}

/// KL(Dir(α) ‖ Dir(1)), batch mean. Zero iff every α is exactly 1.
pub fn kl_to_uniform(tape: &mut Tape, opinion: &DirichletOpinion) -> Result<Var, LossError> {
    let c = opinion.num_classes;
    let lg_c = special::lgamma(c as f64).expect("class count is positive");
    let lg_s = tape.lgamma(opinion.strength)?;
    let t1 = tape.add_scalar(lg_s, -lg_c)?;
    let lg_a = tape.lgamma(opinion.alpha)?;
    let sum_lg_a = tape.sum_axis(lg_a, 1)?;
    let t1 = tape.sub(t1, sum_lg_a)?;
    let am1 = tape.add_scalar(opinion.alpha, -1.0)?;
    let psi_alpha = tape.digamma(opinion.alpha)?;
    let psi_s = tape.digamma(opinion.strength)?;
    let psi_s_col = tape.reshape(psi_s, vec![opinion.batch, 1])?;
    let gap = tape.sub(psi_alpha, psi_s_col)?;
    let weighted = tape.mul(am1, gap)?;
    let t2 = tape.sum_axis(weighted, 1)?;
    let rows = tape.add(t1, t2)?;
    Ok(tape.mean_all(rows)?)
}

/// Compatible objective of one sub-model: evidential cross-entropy plus
/// λ-weighted KL, or the plain-softmax baseline when configured.
pub fn compatible_loss(
    tape: &mut Tape,
    features: Var,
    cls_weight: Var,
    cls_bias: Var,
    labels: &[usize],
    cfg: &CompatibleLossConfig,
) -> Result<Var, LossError> {
    if !cfg.lambda.is_finite() || cfg.lambda < 0.0 {
        return Err(LossError::BadLambda(cfg.lambda));
    }
    match cfg.kind {
        LossKind::Evidential => {
            let opinion = make_opinion(tape, features, cls_weight, cls_bias)?;
            let ce = evidential_ce(tape, &opinion, labels)?;
            let kl = kl_to_uniform(tape, &opinion)?;
            let scaled = tape.mul_scalar(kl, cfg.lambda)?;
            Ok(tape.add(ce, scaled)?)
        }
        LossKind::BctBaseline => bct_baseline_loss(tape, features, cls_weight, cls_bias, labels),
    }
}

/// Ablation baseline: softmax cross-entropy of sub-model features through
/// the shared full-model classifier.
pub fn bct_baseline_loss(
    tape: &mut Tape,
    features: Var,
    cls_weight: Var,
    cls_bias: Var,
    labels: &[usize],
) -> Result<Var, LossError> {
    let logits = tape.matmul_bt(features, cls_weight)?;
    let logits = tape.add(logits, cls_bias)?;
    let (_, c) = tape.value(logits).dims2().expect("logits are rank-2");
    let y = tape.leaf(one_hot(labels, c)?)?;
    let ce = tape.softmax_cross_entropy_rows(logits, y)?;
    Ok(tape.mean_all(ce)?)
}

/// Full-model objective: classifier cross-entropy, plus batch-hard triplet
/// on L2-normalized features when enabled.
pub fn original_loss(
    tape: &mut Tape,
    features: Var,
    cls_weight: Var,
    cls_bias: Var,
    labels: &[usize],
    cfg: &OriginalLossConfig,
) -> Result<Var, LossError> {
    let ce = bct_baseline_loss(tape, features, cls_weight, cls_bias, labels)?;
    match cfg.kind {
        OriginalLossKind::SoftmaxCe => Ok(ce),
        OriginalLossKind::SoftmaxCePlusTriplet => {
            let normed = tape.l2_normalize_rows(features)?;
            let tri = tape.batch_hard_triplet(normed, labels, cfg.triplet_margin)?;
            Ok(tape.add(ce, tri)?)
        }
    }
}

fn check_labels(labels: &[usize], opinion: &DirichletOpinion) -> Result<(), LossError> {
    if labels.len() != opinion.batch {
        return Err(LossError::LabelCountMismatch {
            labels: labels.len(),
            rows: opinion.batch,
        });
    }
    Ok(())
}
