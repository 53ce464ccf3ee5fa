//! Tiny pre-norm decoder-only transformer with MLP output-unit injection.

mod checkpoint;
mod config;
mod forward;
mod infer;
mod params;

pub use checkpoint::{params_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::Reader;
pub use config::TransformerConfig;
pub use forward::{batch_loss, head_logits, hidden_states, BoundParams, GraphInjection, TargetedSequence};
pub use infer::{argmax, Decoder, ForwardCapture, InferenceModel, InjectionSpec, LayerCapture};
pub use params::{LayerParams, ModelParams, ParamGroup, ParamInfo, ParamPartition, Trainability};

use crate::data::NtpSample;
use crate::error::{Error, Result};
use crate::numerics::{kernels, Graph, Reduction, Tensor};

/// Causal logits `[len, vocab]`, optionally with one output unit overridden.
pub fn forward(params: &ModelParams, tokens: &[usize], injection: Option<&InjectionSpec>) -> Result<Tensor> {
    InferenceModel::new(params).logits(tokens, injection)
}

/// `-log p(target | prefix)` read from the logits at the last prefix position.
pub fn next_token_loss(params: &ModelParams, sample: &NtpSample) -> Result<f64> {
    next_token_loss_with(&InferenceModel::new(params), sample, None)
}

pub fn next_token_loss_with(model: &InferenceModel<'_>, sample: &NtpSample, injection: Option<&InjectionSpec>) -> Result<f64> {
    if sample.prefix.is_empty() {
        return Err(Error::contract("next-token sample with empty prefix"));
    }
    let vocab = model.params().config.vocab_size;
    if sample.target >= vocab {
        return Err(Error::Index(format!("target {} >= vocab {vocab}", sample.target)));
    }
    let logits = model.logits(&sample.prefix, injection)?;
    let row = logits.row(sample.prefix.len() - 1);
    Ok(kernels::log_sum_exp(row) - row[sample.target])
}

/// Loss of `sample` with output unit `(layer, neuron)` set to `value` at the
/// prediction position, plus its derivative with respect to `value`.
pub fn injected_loss_grad(params: &ModelParams, sample: &NtpSample, layer: usize, neuron: usize, value: f64) -> Result<(f64, f64)> {
    if sample.prefix.is_empty() {
        return Err(Error::contract("next-token sample with empty prefix"));
    }
    let mut g = Graph::new();
    let frozen = ParamPartition {
        entries: params.infos().into_iter().map(|i| (i, Trainability::Frozen)).collect(),
    };
    let bp = BoundParams::bind(&mut g, params, &frozen);
    let a = g.param(Tensor::scalar(value));
    let last = sample.prefix.len() - 1;
    let inj = GraphInjection {
        layer,
        neuron,
        rows: vec![last],
        value: a,
    };
    let hidden = hidden_states(&mut g, &bp, &params.config, &[&sample.prefix], Some(&inj))?;
    let logits = head_logits(&mut g, &bp, hidden, &[last])?;
    let loss = g.cross_entropy(logits, &[sample.target], Reduction::Sum)?;
    g.backward(loss)?;
    let grad = g.grad(a).map(|t| t.data()[0]).unwrap_or(0.0);
    Ok((g.value(loss).data()[0], grad))
}

/// One recorded down-projection output `β` for `(layer, neuron, sample)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    pub neuron: usize,
    pub sample: usize,
    pub value: f64,
}

/// Down-projection outputs at each sample's prediction position,
/// indexed `[sample][layer][neuron]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecords {
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ActivationRecords {
    pub fn get(&self, layer: usize, neuron: usize, sample: usize) -> f64 {
        self.values[sample][layer][neuron]
    }

    pub fn records(&self) -> impl Iterator<Item = ActivationRecord> + '_ {
        self.values.iter().enumerate().flat_map(|(i, layers)| {
            layers.iter().enumerate().flat_map(move |(l, row)| {
                row.iter().enumerate().map(move |(k, &value)| ActivationRecord {
                    layer: l,
                    neuron: k,
                    sample: i,
                    value,
                })
            })
        })
    }
}

pub fn record_activations(params: &ModelParams, samples: &[NtpSample]) -> Result<ActivationRecords> {
    let model = InferenceModel::new(params);
    let d = params.config.d_model;
    let values = samples
        .iter()
        .map(|s| {
            let (_, cap) = model.hidden(&s.prefix, None, true)?;
            let cap = cap.expect("capture requested");
            let last = s.prefix.len() - 1;
            Ok(cap
                .layers
                .iter()
                .map(|lc| lc.mlp_out[last * d..(last + 1) * d].to_vec())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(ActivationRecords { values })
}
