//! Multi-label classifier: convolutional backbone, global average pooling,
//! a dense ReLU head with dropout, and one sigmoid output per node.
//!
//! All weights live in one flat `f32` vector (backbone first, then head) so
//! optimization, checkpointing and gradient bookkeeping are uniform.

mod backbone;
mod checkpoint;
mod loss;
mod schedule;
mod source;
mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, ConvSpec, ConvStack, FeatureMap, TOY_CNN};
pub use checkpoint::{load_checkpoint, load_checkpoint_with, CheckpointMeta};
pub use loss::{bce_grad, bce_loss, sigmoid, BCE_EPS};
pub use schedule::lr_at;
pub use source::{targets_for, InputSource, LabeledSet, MemorySource, RecordSource};
pub use train::{train, Adam, EpochRecord, History, SelectionMetric, TrainConfig};

use crate::error::{Error, Result};
use crate::imaging::ModelInput;
use crate::predictions::PredictionMatrix;
use crate::taxonomy::NodeId;

/// Smallest distance of any reported probability from 0 and 1.
pub const PROB_MARGIN: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    ToyCnn,
    /// Supplied by the caller through [`Model::with_backbone`].
    External,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-cnn" => Ok(BackboneKind::ToyCnn),
            "external" => Ok(BackboneKind::External),
            other => Err(Error::invalid(format!("unknown backbone {other:?}"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::ToyCnn => "toy-cnn",
            BackboneKind::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub head_units: usize,
    pub head_layers: usize,
    pub dropout: f32,
    pub num_outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::ToyCnn,
            head_units: 512,
            head_layers: 2,
            dropout: 0.2,
            num_outputs: 1,
        }
    }
}

impl ModelConfig {
    pub fn with_outputs(num_outputs: usize) -> Self {
        ModelConfig {
            num_outputs,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.num_outputs == 0 {
            return Err(Error::invalid("num_outputs must be at least 1"));
        }
        if self.head_units == 0 {
            return Err(Error::invalid("head_units must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
}

impl Dense {
    fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        let w = &params[self.w_off..self.b_off];
        let b = &params[self.b_off..self.b_off + self.outputs];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, params: &[f32], x: &[f32], dy: &[f32], grads: Option<&mut [f32]>) -> Vec<f32> {
        let w = &params[self.w_off..self.b_off];
        if let Some(g) = grads {
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let gw = &mut g[self.w_off + o * self.inputs..self.w_off + (o + 1) * self.inputs];
                for (gi, xi) in gw.iter_mut().zip(x) {
                    *gi += d * xi;
                }
                g[self.b_off + o] += d;
            }
        }
        let mut dx = vec![0.0f32; self.inputs];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            for (dxi, wi) in dx.iter_mut().zip(row) {
                *dxi += d * wi;
            }
        }
        dx
    }
}

/// Intermediate values of one forward pass, kept for back-propagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    input: FeatureMap,
    acts: Vec<FeatureMap>,
    pooled: Vec<f32>,
    /// post-ReLU hidden activations, before dropout
    hidden: Vec<Vec<f32>>,
    /// dropout scale per hidden unit (0 or 1/(1-p)); empty when inactive
    masks: Vec<Vec<f32>>,
    pub(crate) logits: Vec<f32>,
}

/// Classifier with a pluggable backbone.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    backbone: Arc<dyn Backbone>,
    params: Vec<f32>,
    hidden: Vec<Dense>,
    output: Dense,
}

/// Builds a model with freshly initialized weights.
///
/// Only `toy-cnn` can be built from a config alone; other backbones go
/// through [`Model::with_backbone`].
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    match cfg.backbone {
        BackboneKind::ToyCnn => Model::with_backbone(cfg.clone(), Arc::new(ConvStack::toy()), seed),
        BackboneKind::External => Err(Error::invalid(
            "the external backbone has no built-in implementation; supply one with Model::with_backbone",
        )),
    }
}

impl Model {
    pub fn with_backbone(config: ModelConfig, backbone: Arc<dyn Backbone>, seed: u64) -> Result<Self> {
        let mut model = Model::uninitialized(config, backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = model.backbone.param_count();
        model.backbone.init_params(&mut model.params[..nb], &mut rng);
        for layer in model.hidden.clone() {
            init_dense(&mut model.params, &layer, 2.0, &mut rng);
        }
        let out = model.output;
        init_dense(&mut model.params, &out, 1.0, &mut rng);
        Ok(model)
    }

    /// Model with the given weights, e.g. restored from a checkpoint.
    pub fn from_params(config: ModelConfig, backbone: Arc<dyn Backbone>, params: Vec<f32>) -> Result<Self> {
        let mut model = Model::uninitialized(config, backbone)?;
        if params.len() != model.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    fn uninitialized(config: ModelConfig, backbone: Arc<dyn Backbone>) -> Result<Self> {
        config.validate()?;
        let mut offset = backbone.param_count();
        let mut inputs = backbone.out_channels();
        let dense = |inputs: usize, outputs: usize, offset: &mut usize| {
            let layer = Dense {
                inputs,
                outputs,
                w_off: *offset,
                b_off: *offset + inputs * outputs,
            };
            *offset += inputs * outputs + outputs;
            layer
        };
        let mut hidden = Vec::new();
        for _ in 0..config.head_layers {
            hidden.push(dense(inputs, config.head_units, &mut offset));
            inputs = config.head_units;
        }
        let output = dense(inputs, config.num_outputs, &mut offset);
        Ok(Model {
            config,
            backbone,
            params: vec![0.0; offset],
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn num_outputs(&self) -> usize {
        self.config.num_outputs
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the output layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let o = self.output;
        self.params[o.w_off..o.b_off + o.outputs].fill(0.0);
    }

    /// Multiplies the output layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f32) {
        let o = self.output;
        for v in &mut self.params[o.w_off..o.b_off + o.outputs] {
            *v *= factor;
        }
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.backbone.layer_names()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("model has no layer named {name:?}")))
    }

    /// Forward pass. `dropout` carries the generator for training-mode
    /// dropout; `None` runs in inference mode.
    pub(crate) fn forward(&self, input: &ModelInput, mut dropout: Option<&mut ChaCha8Rng>) -> Result<Trace> {
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::invalid("empty model input"));
        }
        let x = FeatureMap {
            channels: 1,
            height: input.height(),
            width: input.width(),
            data: input.pixels().iter().copied().collect(),
        };
        let acts = self.backbone.forward(&self.params, &x);
        let top = acts
            .last()
            .ok_or_else(|| Error::invalid("backbone produced no feature maps"))?;
        let pooled = global_average(top);
        let keep = 1.0 - self.config.dropout;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        let mut masks = Vec::new();
        let mut h = pooled.clone();
        for layer in &self.hidden {
            let a: Vec<f32> = layer.forward(&self.params, &h).into_iter().map(|v| v.max(0.0)).collect();
            h = a.clone();
            if let Some(rng) = dropout.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    let mask: Vec<f32> = (0..a.len())
                        .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    for (v, m) in h.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    masks.push(mask);
                }
            }
            hidden.push(a);
        }
        let logits = self.output.forward(&self.params, &h);
        Ok(Trace {
            input: x,
            acts,
            pooled,
            hidden,
            masks,
            logits,
        })
    }

    /// Gradient of `dlogits . logits` with respect to the pooled features,
    /// accumulating head parameter gradients on the way.
    fn head_backward(&self, trace: &Trace, dlogits: &[f32], mut grads: Option<&mut [f32]>) -> Vec<f32> {
        let layer_input = |i: usize| -> Vec<f32> {
            if i == 0 {
                return trace.pooled.clone();
            }
            let mut h = trace.hidden[i - 1].clone();
            if let Some(m) = trace.masks.get(i - 1) {
                for (v, s) in h.iter_mut().zip(m) {
                    *v *= s;
                }
            }
            h
        };
        let n = self.hidden.len();
        let mut d = self.output.backward(&self.params, &layer_input(n), dlogits, grads.as_deref_mut());
        for i in (0..n).rev() {
            if let Some(m) = trace.masks.get(i) {
                for (v, s) in d.iter_mut().zip(m) {
                    *v *= s;
                }
            }
            for (v, a) in d.iter_mut().zip(&trace.hidden[i]) {
                if *a <= 0.0 {
                    *v = 0.0;
                }
            }
            d = self.hidden[i].backward(&self.params, &layer_input(i), &d, grads.as_deref_mut());
        }
        d
    }

    /// Back-propagates `dlogits` through the whole network, adding the
    /// parameter gradient into `grads`.
    pub(crate) fn backward(&self, trace: &Trace, dlogits: &[f32], grads: &mut [f32]) {
        let dpooled = self.head_backward(trace, dlogits, Some(grads));
        let top = trace.acts.last().expect("non-empty trace");
        let grad_top = spread_average(&dpooled, top);
        let nb = self.backbone.param_count();
        self.backbone.backward(
            &self.params,
            &trace.input,
            &trace.acts,
            grad_top,
            None,
            Some(&mut grads[..nb]),
        );
    }

    /// Activation of backbone layer `layer` and the gradient of output
    /// `output`'s pre-sigmoid logit with respect to it. Inference mode.
    pub fn layer_gradient(&self, input: &ModelInput, output: usize, layer: usize) -> Result<(FeatureMap, FeatureMap)> {
        if output >= self.num_outputs() {
            return Err(Error::invalid(format!(
                "output {output} out of range for {} outputs",
                self.num_outputs()
            )));
        }
        let trace = self.forward(input, None)?;
        if layer >= trace.acts.len() {
            return Err(Error::invalid(format!("layer {layer} out of range")));
        }
        let mut onehot = vec![0.0f32; self.num_outputs()];
        onehot[output] = 1.0;
        let dpooled = self.head_backward(&trace, &onehot, None);
        let top = trace.acts.last().expect("non-empty trace");
        let grad_top = spread_average(&dpooled, top);
        let grad = self
            .backbone
            .backward(&self.params, &trace.input, &trace.acts, grad_top, Some(layer), None)
            .expect("backward stops at a valid layer");
        let mut acts = trace.acts;
        Ok((acts.swap_remove(layer), grad))
    }

    pub fn logits(&self, input: &ModelInput) -> Result<Vec<f32>> {
        Ok(self.forward(input, None)?.logits)
    }

    /// Sigmoid scores, kept strictly inside (0, 1).
    pub fn predict_one(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(self.logits(input)?.iter().map(|&z| probability(z)).collect())
    }
}

pub(crate) fn probability(z: f32) -> f64 {
    sigmoid(z as f64).clamp(PROB_MARGIN, 1.0 - PROB_MARGIN)
}

fn init_dense(params: &mut [f32], layer: &Dense, gain: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, (gain / layer.inputs as f64).sqrt()).expect("positive std");
    for v in &mut params[layer.w_off..layer.b_off] {
        *v = normal.sample(rng) as f32;
    }
    params[layer.b_off..layer.b_off + layer.outputs].fill(0.0);
}

fn global_average(map: &FeatureMap) -> Vec<f32> {
    let n = map.spatial() as f32;
    (0..map.channels)
        .map(|c| map.plane(c).iter().sum::<f32>() / n)
        .collect()
}

fn spread_average(dpooled: &[f32], like: &FeatureMap) -> FeatureMap {
    let n = like.spatial();
    let mut g = FeatureMap::zeros(like.channels, like.height, like.width);
    for (c, d) in dpooled.iter().enumerate() {
        g.data[c * n..(c + 1) * n].fill(d / n as f32);
    }
    g
}

/// Scores for every input of `source`, one row per item in source order.
///
/// Inputs are loaded and scored `batch_size` at a time across the rayon
/// pool; each row depends only on its own input.
pub fn predict(
    model: &Model,
    source: &dyn InputSource,
    columns: &[NodeId],
    batch_size: usize,
) -> Result<PredictionMatrix> {
    if columns.len() != model.num_outputs() {
        return Err(Error::DimensionMismatch(format!(
            "{} columns for a model with {} outputs",
            columns.len(),
            model.num_outputs()
        )));
    }
    let batch = batch_size.max(1);
    let mut values = Vec::with_capacity(source.len() * columns.len());
    let mut ids = Vec::with_capacity(source.len());
    for start in (0..source.len()).step_by(batch) {
        let end = (start + batch).min(source.len());
        let rows: Result<Vec<Vec<f64>>> = (start..end)
            .into_par_iter()
            .map(|i| model.predict_one(&source.load(i)?))
            .collect();
        for (i, row) in (start..end).zip(rows?) {
            ids.push(source.image_id(i).to_string());
            values.extend(row);
        }
    }
    PredictionMatrix::new(ids, columns.to_vec(), values)
}
