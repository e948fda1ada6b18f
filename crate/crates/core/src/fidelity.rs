//! Learnable per-source fidelity scores.
//!
//! Scores live on the probability simplex: nonnegative and summing to one.
//! They are parameterized by unconstrained logits through the softmax map,
//! so plain gradient descent on the logits explores exactly the simplex
//! interior.

use serde::{Deserialize, Serialize};

use crate::error::{DmspError, Result};

/// Unconstrained fidelity parameters, one per source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityLogits(Vec<f64>);

impl FidelityLogits {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(DmspError::InvalidLogits("no sources".into()));
        }
        if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
            return Err(DmspError::InvalidLogits(format!("non-finite logit {v}")));
        }
        Ok(Self(logits))
    }

    /// All-zero logits, i.e. uniform scores.
    pub fn uniform(sources: usize) -> Self {
        Self(vec![0.0; sources.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scores(&self) -> FidelityScores {
        FidelityScores(softmax(&self.0))
    }
}

/// Fidelity scores: entries in `(0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityScores(Vec<f64>);

impl FidelityScores {
    /// Accepts a vector on the simplex (sum within 1e-9 of one, entries
    /// nonnegative).
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(DmspError::NotInSimplexInterior(format!("{scores:?}")));
        }
        let total: f64 = scores.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DmspError::NotInSimplexInterior(format!(
                "scores sum to {total}"
            )));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Max-shifted softmax; finite for any finite input.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn scores_from_logits(logits: &FidelityLogits) -> Result<FidelityScores> {
    if let Some(v) = logits.0.iter().find(|v| !v.is_finite()) {
        return Err(DmspError::InvalidLogits(format!("non-finite logit {v}")));
    }
    Ok(logits.scores())
}

/// Canonical preimage `log(scores)`.
pub fn logits_from_scores(scores: &FidelityScores) -> Result<FidelityLogits> {
    if let Some(s) = scores.0.iter().find(|s| s.is_nan() || **s <= 0.0) {
        return Err(DmspError::NotInSimplexInterior(format!(
            "score {s} is not strictly positive"
        )));
    }
    FidelityLogits::new(scores.0.iter().map(|s| s.ln()).collect())
}

/// Gradient of `sum_i C_i * L_i` with respect to the logits:
/// `C_j * (L_j - sum_i C_i L_i)`.
pub fn fidelity_gradient(logits: &FidelityLogits, per_source_losses: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != per_source_losses.len() {
        return Err(DmspError::Dimension(format!(
            "{} logits but {} losses",
            logits.len(),
            per_source_losses.len()
        )));
    }
    let scores = scores_from_logits(logits)?;
    let c = scores.as_slice();
    let mean: f64 = c.iter().zip(per_source_losses).map(|(c, l)| c * l).sum();
    Ok(c
        .iter()
        .zip(per_source_losses)
        .map(|(c, l)| c * (l - mean))
        .collect())
}
