//! The prediction network: a shared spatial relationship encoder, per-source
//! graph convolution stacks, a shared decoder and fidelity-weighted fusion.
//!
//! All layers use `tanh` except the final decoder layer, which is linear.

mod checkpoint;
mod dense;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmspError, Result};
use crate::fidelity::FidelityLogits;

pub use checkpoint::{
    from_bytes as checkpoint_from_bytes, load_checkpoint, save_checkpoint, to_bytes as checkpoint_bytes,
    Checkpoint, CHECKPOINT_VERSION,
};
pub use dense::Dense;
pub use forward::{
    decode, encode_edge, forward, forward_on_graphs, forward_traced, graph_conv_layer, node_inputs, predict_at,
    ContextIndex, EdgeEmbedding, ForwardTrace, Query, SourcePrediction,
};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            num_layers: 2,
        }
    }
}

/// One edge-conditioned message-passing layer.
///
/// `message` maps `[h_source ; edge_embedding]` to a message; `update` maps
/// `[h_node ; mean of incoming messages]` to the new node state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub message: Dense,
    pub update: Dense,
}

impl ConvLayer {
    fn new(input: usize, hidden: usize, rng: Option<&mut ChaCha8Rng>) -> Self {
        match rng {
            Some(rng) => Self {
                message: Dense::uniform(input + hidden, hidden, rng),
                update: Dense::uniform(input + hidden, hidden, rng),
            },
            None => Self {
                message: Dense::zeros(input + hidden, hidden),
                update: Dense::zeros(input + hidden, hidden),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.update.inputs() - self.update.outputs()
    }
}

/// All trainable parameters.
///
/// The same structure doubles as a gradient accumulator (see
/// [`ModelParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    config: ModelConfig,
    feature_dims: Vec<usize>,
    /// Sources taking part in prediction. All true except in single-source
    /// ablation runs.
    enabled_sources: Vec<bool>,
    pub encoder: Dense,
    /// `convs[source][layer]`.
    pub convs: Vec<Vec<ConvLayer>>,
    /// Three layers: hidden -> hidden -> hidden -> 1.
    pub decoder: Vec<Dense>,
    pub fidelity: FidelityLogits,
}

impl ModelParams {
    /// Seeded initialization: weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fidelity logits zero.
    pub fn init(feature_dims: &[usize], config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(feature_dims, config, Some(&mut rng))
    }

    /// Parameters with every entry zero.
    pub fn zeros(feature_dims: &[usize], config: ModelConfig) -> Result<Self> {
        Self::build(feature_dims, config, None)
    }

    fn build(
        feature_dims: &[usize],
        config: ModelConfig,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Self> {
        if feature_dims.is_empty() {
            return Err(DmspError::Config("at least one source is required".into()));
        }
        if config.hidden_dim == 0 || config.num_layers == 0 {
            return Err(DmspError::Config(
                "hidden_dim and num_layers must be positive".into(),
            ));
        }
        let h = config.hidden_dim;
        let mut dense = |i: usize, o: usize| match rng.as_deref_mut() {
            Some(r) => Dense::uniform(i, o, r),
            None => Dense::zeros(i, o),
        };
        let encoder = dense(2, h);
        let mut convs = Vec::with_capacity(feature_dims.len());
        for &p in feature_dims {
            let mut layers = Vec::with_capacity(config.num_layers);
            for l in 0..config.num_layers {
                let input = if l == 0 { p + 2 } else { h };
                layers.push(ConvLayer::new(input, h, rng.as_deref_mut()));
            }
            convs.push(layers);
        }
        let mut dense = |i: usize, o: usize| match rng.as_deref_mut() {
            Some(r) => Dense::uniform(i, o, r),
            None => Dense::zeros(i, o),
        };
        let decoder = vec![dense(h, h), dense(h, h), dense(h, 1)];
        Ok(Self {
            config,
            feature_dims: feature_dims.to_vec(),
            enabled_sources: vec![true; feature_dims.len()],
            encoder,
            convs,
            decoder,
            fidelity: FidelityLogits::uniform(feature_dims.len()),
        })
    }

    /// Same shapes, all zero; used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, data| data.fill(0.0));
        z
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn source_count(&self) -> usize {
        self.feature_dims.len()
    }

    pub fn feature_dims(&self) -> &[usize] {
        &self.feature_dims
    }

    pub fn enabled_sources(&self) -> &[bool] {
        &self.enabled_sources
    }

    /// Restricts prediction to the given sources.
    pub fn set_enabled_sources(&mut self, enabled: Vec<bool>) -> Result<()> {
        if enabled.len() != self.source_count() || !enabled.iter().any(|&e| e) {
            return Err(DmspError::Config(format!(
                "enabled source mask {enabled:?} must have {} entries with at least one set",
                self.source_count()
            )));
        }
        self.enabled_sources = enabled;
        Ok(())
    }

    /// Visits every parameter block in a fixed order with its name and shape.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("encoder.weight", &self.encoder.weight_shape(), self.encoder.weights());
        f("encoder.bias", &[self.encoder.outputs()], self.encoder.bias());
        for (i, layers) in self.convs.iter().enumerate() {
            for (l, conv) in layers.iter().enumerate() {
                for (part, d) in [("message", &conv.message), ("update", &conv.update)] {
                    f(&format!("conv.{i}.{l}.{part}.weight"), &d.weight_shape(), d.weights());
                    f(&format!("conv.{i}.{l}.{part}.bias"), &[d.outputs()], d.bias());
                }
            }
        }
        for (d, layer) in self.decoder.iter().enumerate() {
            f(&format!("decoder.{d}.weight"), &layer.weight_shape(), layer.weights());
            f(&format!("decoder.{d}.bias"), &[layer.outputs()], layer.bias());
        }
        f("fidelity.logits", &[self.fidelity.len()], self.fidelity.as_slice());
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.encoder.weight_shape();
        let bias_shape = [self.encoder.outputs()];
        let (w, b) = self.encoder.parts_mut();
        f("encoder.weight", &shape, w);
        f("encoder.bias", &bias_shape, b);
        for (i, layers) in self.convs.iter_mut().enumerate() {
            for (l, conv) in layers.iter_mut().enumerate() {
                for (part, d) in [("message", &mut conv.message), ("update", &mut conv.update)] {
                    let shape = d.weight_shape();
                    let bias_shape = [d.outputs()];
                    let (w, b) = d.parts_mut();
                    f(&format!("conv.{i}.{l}.{part}.weight"), &shape, w);
                    f(&format!("conv.{i}.{l}.{part}.bias"), &bias_shape, b);
                }
            }
        }
        for (d, layer) in self.decoder.iter_mut().enumerate() {
            let shape = layer.weight_shape();
            let bias_shape = [layer.outputs()];
            let (w, b) = layer.parts_mut();
            f(&format!("decoder.{d}.weight"), &shape, w);
            f(&format!("decoder.{d}.bias"), &bias_shape, b);
        }
        let n = [self.fidelity.len()];
        f("fidelity.logits", &n, self.fidelity.as_mut_slice());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    /// All parameters concatenated in [`visit`](Self::visit) order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(DmspError::Dimension(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, _, d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}
