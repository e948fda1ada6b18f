//! Masked leave-one-out training.
//!
//! Each step hides one training observation, predicts it from everything
//! else and descends on the fidelity-weighted squared error. Network weights
//! and fidelity logits are updated together by Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mask_target, MaskedView, MultiSourceDataset, Sample, SplitIndices};
use crate::error::{DmspError, Result};
use crate::fidelity::softmax;
use crate::model::{
    forward, forward_traced, Checkpoint, ContextIndex, ModelConfig, ModelParams, Query,
    SourcePrediction,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Which observations supervise and whether fidelity is learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    /// Only this source supervises and predicts; fidelity stays fixed.
    SingleSource(usize),
    /// Fidelity logits stay at zero: all sources weigh the same.
    FrozenUniformFidelity,
}

impl TrainMode {
    fn supervises(self, source: usize) -> bool {
        match self {
            TrainMode::SingleSource(i) => i == source,
            _ => true,
        }
    }

    fn learns_fidelity(self) -> bool {
        matches!(self, TrainMode::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub k_neighbors: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Samples per optimizer step; gradients are averaged within a batch.
    pub batch_size: usize,
    /// Visit sources then samples in stored order instead of shuffling.
    pub strict_order: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            max_epochs: 500,
            patience: 20,
            k_neighbors: 3,
            seed: 0,
            mode: TrainMode::Full,
            batch_size: 1,
            strict_order: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sources: usize) -> Result<()> {
        let fail = |m: String| Err(DmspError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.k_neighbors == 0 {
            return fail("k must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if let TrainMode::SingleSource(i) = self.mode {
            if i >= sources {
                return fail(format!("single-source mode names source {i} of {sources}"));
            }
        }
        Ok(())
    }
}

/// Squared error.
pub fn loss(prediction: f64, target: f64) -> f64 {
    (prediction - target).powi(2)
}

/// Adam moment estimates, flattened in [`ModelParams::to_flat`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    grads: &ModelParams,
    lr: f64,
) -> Result<()> {
    let mut theta = params.to_flat();
    let g = grads.to_flat();
    if g.len() != theta.len() || adam.m.len() != theta.len() || adam.v.len() != theta.len() {
        return Err(DmspError::Dimension(format!(
            "{} parameters, {} gradients, {} moments",
            theta.len(),
            g.len(),
            adam.m.len()
        )));
    }
    adam.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(adam.step as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(adam.step as f64);
    for i in 0..theta.len() {
        adam.m[i] = ADAM_BETA1 * adam.m[i] + (1.0 - ADAM_BETA1) * g[i];
        adam.v[i] = ADAM_BETA2 * adam.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = adam.m[i] / c1;
        let v_hat = adam.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    params.load_flat(&theta)
}

/// Loss and parameter gradient of one masked sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    /// Fidelity-weighted squared error `C_i (ŷ - y)^2`.
    pub loss: f64,
    pub squared_error: f64,
    pub prediction: SourcePrediction,
    pub grads: ModelParams,
}

/// Exact gradient of `C_i (ŷ - y)^2` for the sample hidden by `view`.
///
/// The logits receive gradient both through the loss weight `C_i` and
/// through the fusion weights inside `ŷ`.
pub fn compute_gradients(
    params: &ModelParams,
    view: &MaskedView<'_>,
    index: &ContextIndex,
    k: usize,
) -> Result<SampleGradient> {
    let (source, j) = (view.masked_source(), view.masked_index());
    let target = view.unmask().source(source).samples()[j].target;
    let query = Query::masked(view).expect("view has a masked sample");
    let trace = match forward_traced(params, view, index, &query, k) {
        Ok(t) => t,
        Err(DmspError::NoUsableSource) => {
            return Err(DmspError::SampleSkipped {
                source_id: source,
                index: j,
            })
        }
        Err(e) => return Err(e),
    };
    let prediction = trace.prediction().clone();
    let scores = softmax(params.fidelity.as_slice());
    let c = scores[source];
    let err = prediction.fused - target;
    let sq = err * err;

    let mut grads = params.zeros_like();
    trace.backward(params, 2.0 * c * err, &mut grads);
    let logit_grads = grads.fidelity.as_mut_slice();
    for (s, g) in logit_grads.iter_mut().enumerate() {
        let delta = if s == source { 1.0 } else { 0.0 };
        *g += sq * c * (delta - scores[s]);
    }
    Ok(SampleGradient {
        loss: c * sq,
        squared_error: sq,
        prediction,
        grads,
    })
}

/// Training context (the training split) and the held-out validation samples.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    train: MultiSourceDataset,
    index: ContextIndex,
    validation: Vec<(usize, Sample)>,
}

impl TrainingSet {
    pub fn new(dataset: &MultiSourceDataset, split: &SplitIndices) -> Result<Self> {
        let train = dataset.subset(&split.train)?;
        let index = ContextIndex::build(&train)?;
        let validation = split
            .validation
            .iter()
            .enumerate()
            .flat_map(|(s, idx)| idx.iter().map(move |&j| (s, j)))
            .map(|(s, j)| (s, dataset.source(s).samples()[j].clone()))
            .collect();
        Ok(Self {
            train,
            index,
            validation,
        })
    }

    pub fn train(&self) -> &MultiSourceDataset {
        &self.train
    }

    pub fn index(&self) -> &ContextIndex {
        &self.index
    }

    pub fn validation(&self) -> &[(usize, Sample)] {
        &self.validation
    }
}

/// Per-epoch entry of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error of the masked training predictions per source;
    /// `None` for sources that did not supervise.
    pub train_loss_per_source: Vec<Option<f64>>,
    pub val_loss: Option<f64>,
    pub fidelity_scores: Vec<f64>,
    pub skipped: usize,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub best_params: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val: f64,
    pub since_improvement: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            adam: AdamState::new(params.param_count()),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_val: f64::INFINITY,
            since_improvement: 0,
            history: Vec::new(),
        }
    }

    /// Fresh state for `config`: seeded initialization, and in single-source
    /// mode only that source enabled for prediction.
    pub fn init(feature_dims: &[usize], config: &TrainConfig) -> Result<Self> {
        config.validate(feature_dims.len())?;
        let mut params = ModelParams::init(feature_dims, config.model, config.seed)?;
        if let TrainMode::SingleSource(i) = config.mode {
            params.set_enabled_sources((0..feature_dims.len()).map(|s| s == i).collect())?;
        }
        Ok(Self::new(params))
    }

    /// Checkpoint whose model is the best-validation parameters and whose
    /// extra sections carry the optimizer and loop state.
    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.best_params.clone());
        ckpt.sections.insert("state.params".into(), self.params.to_flat());
        ckpt.sections.insert("state.adam_m".into(), self.adam.m.clone());
        ckpt.sections.insert("state.adam_v".into(), self.adam.v.clone());
        ckpt.sections.insert(
            "state.scalars".into(),
            vec![
                self.adam.step as f64,
                self.epoch as f64,
                self.best_val,
                self.since_improvement as f64,
            ],
        );
        ckpt.metadata = serde_json::json!({
            "train_config": config,
            "history": self.history,
        });
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let missing = |name: &str| DmspError::Checkpoint(format!("missing section {name}"));
        let section = |name: &str| ckpt.sections.get(name).ok_or_else(|| missing(name));
        let config: TrainConfig = serde_json::from_value(ckpt.metadata["train_config"].clone())
            .map_err(|e| DmspError::Checkpoint(format!("train_config: {e}")))?;
        let history: Vec<EpochRecord> = serde_json::from_value(ckpt.metadata["history"].clone())
            .map_err(|e| DmspError::Checkpoint(format!("history: {e}")))?;
        let mut params = ckpt.params.clone();
        params.load_flat(section("state.params")?)?;
        let m = section("state.adam_m")?.clone();
        let v = section("state.adam_v")?.clone();
        let scalars = section("state.scalars")?;
        if scalars.len() != 4 || m.len() != params.param_count() || v.len() != m.len() {
            return Err(DmspError::Checkpoint("malformed training state".into()));
        }
        let state = Self {
            best_params: ckpt.params.clone(),
            params,
            adam: AdamState {
                m,
                v,
                step: scalars[0] as u64,
            },
            epoch: scalars[1] as usize,
            best_val: scalars[2],
            since_improvement: scalars[3] as usize,
            history,
        };
        Ok((state, config))
    }

    /// True once early stopping triggered or the epoch budget is spent.
    pub fn finished(&self, config: &TrainConfig) -> bool {
        self.epoch >= config.max_epochs || self.since_improvement >= config.patience
    }
}

/// Visiting order of the supervising `(source, index)` pairs for `epoch`.
pub fn epoch_order(train: &MultiSourceDataset, config: &TrainConfig, epoch: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..train.source_count())
        .filter(|&s| config.mode.supervises(s))
        .flat_map(|s| (0..train.source(s).len()).map(move |j| (s, j)))
        .collect();
    if !config.strict_order {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
    }
    order
}

fn scale(grads: &mut ModelParams, factor: f64) {
    grads.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|g| *g *= factor));
}

fn accumulate(into: &mut ModelParams, from: &ModelParams) {
    let from = from.to_flat();
    let mut offset = 0;
    into.visit_mut(&mut |_, _, d| {
        for (a, b) in d.iter_mut().zip(&from[offset..]) {
            *a += b;
        }
        offset += d.len();
    });
}

/// One pass over the supervising training samples with an optimizer step
/// after every `batch_size` of them.
pub fn train_epoch(state: &mut TrainState, data: &TrainingSet, config: &TrainConfig) -> Result<EpochRecord> {
    let n_sources = data.train.source_count();
    let order = epoch_order(&data.train, config, state.epoch + 1);
    let mut sums = vec![0.0; n_sources];
    let mut counts = vec![0usize; n_sources];
    let mut skipped = 0;
    let mut batch: Option<ModelParams> = None;
    let mut in_batch = 0usize;

    let flush = |state: &mut TrainState, batch: &mut Option<ModelParams>, n: usize| -> Result<()> {
        if let Some(mut g) = batch.take() {
            if n > 1 {
                scale(&mut g, 1.0 / n as f64);
            }
            if !config.mode.learns_fidelity() {
                g.fidelity.as_mut_slice().fill(0.0);
            }
            adam_step(&mut state.params, &mut state.adam, &g, config.learning_rate)?;
        }
        Ok(())
    };

    for &(s, j) in &order {
        let view = mask_target(&data.train, s, j)?;
        match compute_gradients(&state.params, &view, &data.index, config.k_neighbors) {
            Ok(sg) => {
                sums[s] += sg.squared_error;
                counts[s] += 1;
                match &mut batch {
                    Some(b) => accumulate(b, &sg.grads),
                    None => batch = Some(sg.grads),
                }
                in_batch += 1;
                if in_batch == config.batch_size {
                    flush(state, &mut batch, in_batch)?;
                    in_batch = 0;
                }
            }
            Err(DmspError::SampleSkipped { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    flush(state, &mut batch, in_batch)?;
    if counts.iter().sum::<usize>() == 0 {
        return Err(DmspError::NoUsableSource);
    }
    if !state.params.is_finite() {
        return Err(DmspError::Numeric(format!(
            "parameters became non-finite in epoch {}",
            state.epoch + 1
        )));
    }
    state.epoch += 1;
    Ok(EpochRecord {
        epoch: state.epoch,
        train_loss_per_source: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        val_loss: None,
        fidelity_scores: softmax(state.params.fidelity.as_slice()),
        skipped,
    })
}

/// Mean fidelity-weighted squared error of fused predictions on the
/// validation samples of supervising sources; `None` if none is predictable.
pub fn validation_loss(params: &ModelParams, data: &TrainingSet, config: &TrainConfig) -> Result<Option<f64>> {
    let scores = softmax(params.fidelity.as_slice());
    let losses: Vec<Option<f64>> = data
        .validation
        .par_iter()
        .filter(|(s, _)| config.mode.supervises(*s))
        .map(|(s, sample)| {
            let q = Query::external(*s, &sample.features, sample.location, sample.timestamp);
            match forward(params, &data.train, &data.index, &q, config.k_neighbors) {
                Ok(p) => Ok(Some(scores[*s] * loss(p.fused, sample.target))),
                Err(DmspError::NoUsableSource) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let ok: Vec<f64> = losses.into_iter().flatten().collect();
    Ok((!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64))
}

/// Summary written next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    pub final_fidelity_scores: Vec<f64>,
}

/// Runs epochs until early stopping or `max_epochs`; `on_epoch` sees the
/// state after each epoch (e.g. for checkpointing).
pub fn resume(
    mut state: TrainState,
    data: &TrainingSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<(TrainState, TrainReport)> {
    config.validate(data.train.source_count())?;
    while !state.finished(config) {
        let mut record = train_epoch(&mut state, data, config)?;
        let val = validation_loss(&state.params, data, config)?;
        record.val_loss = val;
        // Without any predictable validation sample, fall back to the
        // training objective so early stopping still has a signal.
        let signal = val.unwrap_or_else(|| {
            let l: Vec<f64> = record.train_loss_per_source.iter().flatten().copied().collect();
            l.iter().sum::<f64>() / l.len().max(1) as f64
        });
        if signal < state.best_val {
            state.best_val = signal;
            state.best_params = state.params.clone();
            state.since_improvement = 0;
        } else {
            state.since_improvement += 1;
        }
        state.history.push(record);
        on_epoch(&state)?;
    }
    let report = report_of(&state, config);
    Ok((state, report))
}

pub fn report_of(state: &TrainState, config: &TrainConfig) -> TrainReport {
    let best_epoch = state
        .history
        .iter()
        .filter(|r| r.epoch <= state.epoch)
        .rev()
        .nth(state.since_improvement)
        .map(|r| r.epoch);
    TrainReport {
        config: *config,
        epochs: state.history.clone(),
        best_epoch,
        best_val_loss: state.best_val.is_finite().then_some(state.best_val),
        stopped_early: state.since_improvement >= config.patience && state.epoch < config.max_epochs,
        final_fidelity_scores: softmax(state.best_params.fidelity.as_slice()),
    }
}

/// Trains from scratch on the training split; returns the best-validation
/// parameters with the final state and report.
pub fn fit(
    dataset: &MultiSourceDataset,
    split: &SplitIndices,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainState, TrainReport)> {
    let data = TrainingSet::new(dataset, split)?;
    let state = TrainState::init(&dataset.feature_dims(), config)?;
    let (state, report) = resume(state, &data, config, |_| Ok(()))?;
    Ok((state.best_params.clone(), state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, SourceDataset, DEFAULT_FRACTIONS};
    use crate::geometry::GeoPoint;
    use rand::Rng;

    fn toy(rng: &mut ChaCha8Rng, sizes: &[usize], dims: &[usize]) -> MultiSourceDataset {
        let sources = sizes
            .iter()
            .zip(dims)
            .enumerate()
            .map(|(i, (&n, &p))| {
                let samples = (0..n)
                    .map(|_| {
                        let x: f64 = rng.random_range(0.0..4.0);
                        let y: f64 = rng.random_range(0.0..4.0);
                        Sample {
                            location: GeoPoint::new(x, y),
                            features: (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
                            target: (x + y).sin() + rng.random_range(-0.1..0.1),
                            timestamp: 0,
                        }
                    })
                    .collect();
                SourceDataset::new(i, format!("s{i}"), p, samples).unwrap()
            })
            .collect();
        MultiSourceDataset::new(sources).unwrap()
    }

    fn objective(params: &ModelParams, view: &MaskedView<'_>, index: &ContextIndex, k: usize) -> f64 {
        let (s, j) = (view.masked_source(), view.masked_index());
        let y = view.unmask().source(s).samples()[j].target;
        let q = Query::masked(view).unwrap();
        let p = forward(params, view, index, &q, k).unwrap();
        softmax(params.fidelity.as_slice())[s] * loss(p.fused, y)
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(3.0, 5.0), 4.0);
        assert_eq!(loss(1.5, 1.5), 0.0);
        assert_eq!(0.5 * loss(3.0, 5.0), 2.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig { hidden_dim: 4, num_layers: 2 };
        for trial in 0..4 {
            let d = toy(&mut rng, &[6, 6], &[1, 2]);
            let mut params = ModelParams::init(&[1, 2], cfg, trial).unwrap();
            params.fidelity.as_mut_slice().copy_from_slice(&[0.4, -0.3]);
            let index = ContextIndex::build(&d).unwrap();
            let view = mask_target(&d, (trial % 2) as usize, trial as usize).unwrap();
            let g = compute_gradients(&params, &view, &index, 2).unwrap().grads.to_flat();
            let base = params.to_flat();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut p = params.clone();
                let mut v = base.clone();
                v[i] += h;
                p.load_flat(&v).unwrap();
                let up = objective(&p, &view, &index, 2);
                v[i] -= 2.0 * h;
                p.load_flat(&v).unwrap();
                let down = objective(&p, &view, &index, 2);
                let fd = (up - down) / (2.0 * h);
                let tol = 1e-8f64.max(1e-5 * fd.abs().max(g[i].abs()));
                assert!((g[i] - fd).abs() <= tol, "trial {trial} coord {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn zero_network_gradient_is_confined_to_output_bias_and_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = toy(&mut rng, &[6, 6], &[1, 1]);
        let params = ModelParams::zeros(&[1, 1], ModelConfig { hidden_dim: 4, num_layers: 2 }).unwrap();
        let index = ContextIndex::build(&d).unwrap();
        let view = mask_target(&d, 0, 2).unwrap();
        let sg = compute_gradients(&params, &view, &index, 3).unwrap();
        let mut nonzero = Vec::new();
        sg.grads.visit(&mut |name, _, data| {
            if data.iter().any(|g| *g != 0.0) {
                nonzero.push(name.to_string());
            }
        });
        assert_eq!(nonzero, vec!["decoder.2.bias", "fidelity.logits"]);
        // Symmetric logits: the two sources' logit gradients are opposite.
        let l = sg.grads.fidelity.as_slice();
        assert!((l[0] + l[1]).abs() < 1e-15);
    }

    #[test]
    fn logit_gradient_sign_follows_loss() {
        // Source 0 is masked; its loss exceeds the weighted mean of
        // (its loss, zero), so raising its logit raises the objective.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = toy(&mut rng, &[6, 6], &[1, 1]);
        let params = ModelParams::init(&[1, 1], ModelConfig { hidden_dim: 4, num_layers: 1 }, 2).unwrap();
        let index = ContextIndex::build(&d).unwrap();
        let view = mask_target(&d, 0, 0).unwrap();
        let sg = compute_gradients(&params, &view, &index, 2).unwrap();
        let p = &sg.prediction;
        let y = d.source(0).samples()[0].target;
        // Loss-weight path is C0 (1 - C0) L > 0; the fusion path is
        // 2 C0 (ŷ - y) w0 (y0 - ŷ).
        let fusion = 2.0 * 0.5 * (p.fused - y) * p.weights[0] * (p.per_source[0].unwrap() - p.fused);
        let weight_path = 0.25 * sg.squared_error;
        let g0 = sg.grads.fidelity.as_slice()[0];
        assert!((g0 - (weight_path + fusion)).abs() < 1e-12);
        if fusion >= 0.0 {
            assert!(g0 > 0.0);
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = ModelParams::init(&[1], ModelConfig { hidden_dim: 2, num_layers: 1 }, 0).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(p.param_count());
        let zero = p.zeros_like();
        adam_step(&mut p, &mut adam, &zero, 0.001).unwrap();
        assert_eq!(p, before);

        // First step moves each coordinate by lr * sign(g).
        let mut g = p.zeros_like();
        let signs: Vec<f64> = (0..p.param_count()).map(|i| if i % 3 == 0 { -2.5 } else { 0.7 }).collect();
        g.load_flat(&signs).unwrap();
        let mut adam = AdamState::new(p.param_count());
        let start = p.to_flat();
        adam_step(&mut p, &mut adam, &g, 0.001).unwrap();
        for ((a, b), s) in p.to_flat().iter().zip(&start).zip(&signs) {
            assert!(((a - b) + 0.001 * s.signum()).abs() < 1e-9);
        }

        // Constant gradient: step size approaches lr.
        let mut adam = AdamState::new(p.param_count());
        let mut last = p.to_flat();
        let mut step = 0.0;
        for _ in 0..1000 {
            adam_step(&mut p, &mut adam, &g, 0.001).unwrap();
            let now = p.to_flat();
            step = (now[1] - last[1]).abs();
            last = now;
        }
        assert!((step - 0.001).abs() < 0.05 * 0.001);

        let other = ModelParams::init(&[3], ModelConfig { hidden_dim: 2, num_layers: 1 }, 0).unwrap();
        assert!(matches!(
            adam_step(&mut p, &mut adam, &other, 0.001),
            Err(DmspError::Dimension(_))
        ));
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { hidden_dim: 4, num_layers: 2 },
            max_epochs: 5,
            patience: 3,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn epoch_touches_every_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = toy(&mut rng, &[10, 10], &[1, 1]);
        let sp = split(&d, DEFAULT_FRACTIONS, 1).unwrap();
        let data = TrainingSet::new(&d, &sp).unwrap();
        let config = small_config();
        let mut state = TrainState::init(&[1, 1], &config).unwrap();
        let before = state.params.clone();
        let rec = train_epoch(&mut state, &data, &config).unwrap();
        let mut unchanged = Vec::new();
        let after = state.params.to_flat();
        let mut offset = 0;
        before.visit(&mut |name, _, d| {
            if d == &after[offset..offset + d.len()] {
                unchanged.push(name.to_string());
            }
            offset += d.len();
        });
        assert!(unchanged.is_empty(), "{unchanged:?}");
        assert_eq!(rec.train_loss_per_source.len(), 2);
        assert!(rec.train_loss_per_source.iter().all(|l| l.is_some()));
    }

    #[test]
    fn frozen_mode_keeps_logits_and_matches_zeroed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = toy(&mut rng, &[12, 12], &[1, 1]);
        let sp = split(&d, DEFAULT_FRACTIONS, 1).unwrap();
        let data = TrainingSet::new(&d, &sp).unwrap();
        let config = TrainConfig {
            mode: TrainMode::FrozenUniformFidelity,
            ..small_config()
        };
        let mut state = TrainState::init(&[1, 1], &config).unwrap();
        for _ in 0..2 {
            train_epoch(&mut state, &data, &config).unwrap();
        }
        assert_eq!(state.params.fidelity.as_slice(), &[0.0, 0.0]);

        // Same trajectory by hand: full-mode gradients with logits zeroed.
        let mut manual = TrainState::init(&[1, 1], &small_config()).unwrap();
        for epoch in 1..=2 {
            for (s, j) in epoch_order(&data.train, &config, epoch) {
                let view = mask_target(&data.train, s, j).unwrap();
                let mut g = compute_gradients(&manual.params, &view, &data.index, 3).unwrap().grads;
                g.fidelity.as_mut_slice().fill(0.0);
                adam_step(&mut manual.params, &mut manual.adam, &g, 0.001).unwrap();
            }
        }
        assert_eq!(manual.params, state.params);
    }

    #[test]
    fn single_source_mode_ignores_other_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = toy(&mut rng, &[12, 12], &[1, 1]);
        let sp = split(&d, DEFAULT_FRACTIONS, 1).unwrap();
        let config = TrainConfig {
            mode: TrainMode::SingleSource(1),
            ..small_config()
        };
        let (a, _, report) = fit(&d, &sp, &config).unwrap();
        assert_eq!(a.enabled_sources(), &[false, true]);
        assert!(report.epochs.iter().all(|r| r.train_loss_per_source[0].is_none()));
        // Scrambling source 0's targets changes nothing.
        let mut scrambled = d.clone();
        for j in 0..12 {
            scrambled = scrambled.with_target(0, j, 1e6 * j as f64).unwrap();
        }
        let (b, _, _) = fit(&scrambled, &sp, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_is_deterministic_and_resumable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = toy(&mut rng, &[15, 15], &[1, 1]);
        let sp = split(&d, DEFAULT_FRACTIONS, 2).unwrap();
        let config = small_config();
        let (a, sa, ra) = fit(&d, &sp, &config).unwrap();
        let (b, sb, rb) = fit(&d, &sp, &config).unwrap();
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(sa, sb);
        assert_eq!(ra, rb);

        // Stop after 2 epochs, round-trip through a checkpoint, continue.
        let data = TrainingSet::new(&d, &sp).unwrap();
        let short = TrainConfig { max_epochs: 2, ..config };
        let (half, _) = resume(TrainState::init(&[1, 1], &config).unwrap(), &data, &short, |_| Ok(())).unwrap();
        let bytes = crate::model::checkpoint_bytes(&half.to_checkpoint(&config).unwrap()).unwrap();
        let (restored, restored_cfg) =
            TrainState::from_checkpoint(&crate::model::checkpoint_from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(restored, half);
        assert_eq!(restored_cfg, config);
        let (done, report) = resume(restored, &data, &config, |_| Ok(())).unwrap();
        assert_eq!(done, sa);
        assert_eq!(report, ra);
    }

    #[test]
    fn early_stop_with_patience_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = toy(&mut rng, &[15, 15], &[1, 1]);
        let sp = split(&d, DEFAULT_FRACTIONS, 2).unwrap();
        // A huge learning rate overshoots after the first epoch.
        let config = TrainConfig {
            patience: 1,
            max_epochs: 50,
            learning_rate: 0.5,
            ..small_config()
        };
        let (best, state, report) = fit(&d, &sp, &config).unwrap();
        assert!(report.stopped_early);
        let best_epoch = report.best_epoch.unwrap();
        assert_eq!(state.epoch, best_epoch + 1);
        let best_val = report.epochs[best_epoch - 1].val_loss.unwrap();
        assert_eq!(report.best_val_loss, Some(best_val));
        let data = TrainingSet::new(&d, &sp).unwrap();
        assert_eq!(validation_loss(&best, &data, &config).unwrap(), Some(best_val));
    }

    #[test]
    fn full_batch_training_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = toy(&mut rng, &[20], &[1]);
        let sp = split(&d, DEFAULT_FRACTIONS, 3).unwrap();
        let data = TrainingSet::new(&d, &sp).unwrap();
        let config = TrainConfig {
            batch_size: 1000,
            strict_order: true,
            learning_rate: 0.01,
            ..small_config()
        };
        let mut state = TrainState::init(&[1], &config).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let l = train_epoch(&mut state, &data, &config).unwrap().train_loss_per_source[0].unwrap();
            assert!(l < last, "{l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate(2).is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate(2).is_err());
        assert!(TrainConfig { mode: TrainMode::SingleSource(2), ..TrainConfig::default() }.validate(2).is_err());
        assert!(TrainConfig::default().validate(2).is_ok());
    }
}
