//! Accuracy metrics and the held-out evaluation harness.
//!
//! Variances are population (`1/n`) variances throughout. Metrics that are
//! undefined on a degenerate set (zero target or prediction variance) are
//! `None` and listed by name in `undefined`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MultiSourceDataset, SplitIndices, TruthGrid};
use crate::error::{DmspError, Result};
use crate::model::{forward, ContextIndex, ModelParams, Query};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub evs: Option<f64>,
    pub cod: Option<f64>,
    pub pearson: Option<f64>,
    pub n: usize,
    pub undefined: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

pub fn evaluate(predictions: &[f64], targets: &[f64]) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(DmspError::InvalidEvaluationSet(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(DmspError::InvalidEvaluationSet("non-finite value".into()));
    }
    let n = targets.len();
    let err: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| p - t).collect();
    let mae = mean(err.iter().map(|e| e.abs()), n);
    let mse = mean(err.iter().map(|e| e * e), n);
    let y_mean = mean(targets.iter().copied(), n);
    let p_mean = mean(predictions.iter().copied(), n);
    let e_mean = mean(err.iter().copied(), n);
    let var_y = mean(targets.iter().map(|y| (y - y_mean).powi(2)), n);
    let var_p = mean(predictions.iter().map(|p| (p - p_mean).powi(2)), n);
    let var_e = mean(err.iter().map(|e| (e - e_mean).powi(2)), n);
    let cov = mean(
        predictions
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - p_mean) * (y - y_mean)),
        n,
    );

    let mut undefined = Vec::new();
    let (evs, cod) = if var_y > 0.0 {
        (Some(1.0 - var_e / var_y), Some(1.0 - mse / var_y))
    } else {
        undefined.extend(["evs".to_string(), "cod".to_string()]);
        (None, None)
    };
    let pearson = if var_y > 0.0 && var_p > 0.0 {
        Some((cov / (var_p.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0))
    } else {
        undefined.push("pearson".to_string());
        None
    };
    Ok(MetricsReport {
        mae,
        rmse: mse.sqrt(),
        evs,
        cod,
        pearson,
        n,
        undefined,
    })
}

/// What held-out predictions are scored against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// Observed targets of the test samples of one source.
    Source(usize),
    /// A ground-truth grid, looked up at the nearest node of every test
    /// sample of every source.
    Truth(&'a TruthGrid),
}

/// One scored test location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub source_id: usize,
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub prediction: f64,
    pub reference: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rows: Vec<ResidualRow>,
    /// Test samples no source could predict.
    pub skipped: usize,
}

/// Predicts every test sample (with the training split as context and the
/// sample's own features) and scores the fused predictions.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &MultiSourceDataset,
    split: &SplitIndices,
    reference: Reference<'_>,
    k: usize,
) -> Result<Evaluation> {
    let context = dataset.subset(&split.train)?;
    let index = ContextIndex::build(&context)?;
    let items: Vec<(usize, usize)> = match reference {
        Reference::Source(s) => {
            let idx = split.test.get(s).ok_or_else(|| {
                DmspError::Config(format!("reference source {s} does not exist"))
            })?;
            idx.iter().map(|&j| (s, j)).collect()
        }
        Reference::Truth(_) => split
            .test
            .iter()
            .enumerate()
            .flat_map(|(s, idx)| idx.iter().map(move |&j| (s, j)))
            .collect(),
    };
    let results: Vec<Option<ResidualRow>> = items
        .par_iter()
        .map(|&(s, j)| {
            let sample = &dataset.source(s).samples()[j];
            let q = Query::external(s, &sample.features, sample.location, sample.timestamp);
            let pred = match forward(params, &context, &index, &q, k) {
                Ok(p) => p.fused,
                Err(DmspError::NoUsableSource) => return Ok(None),
                Err(e) => return Err(e),
            };
            let truth = match reference {
                Reference::Source(_) => sample.target,
                Reference::Truth(grid) => grid.nearest(sample.location),
            };
            Ok(Some(ResidualRow {
                source_id: s,
                index: j,
                x: sample.location.x,
                y: sample.location.y,
                prediction: pred,
                reference: truth,
                residual: pred - truth,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let rows: Vec<ResidualRow> = results.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(DmspError::NoEvaluableSamples);
    }
    let preds: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
    let refs: Vec<f64> = rows.iter().map(|r| r.reference).collect();
    Ok(Evaluation {
        report: evaluate(&preds, &refs)?,
        rows,
        skipped,
    })
}

pub fn save_residuals(path: &Path, rows: &[ResidualRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DmspError::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| DmspError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| DmspError::io(path, e))
}
