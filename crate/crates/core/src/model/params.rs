use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::TransformerConfig;
use crate::error::{Error, Result};
use crate::masking::NeuronMask;
use crate::numerics::Tensor;

/// Freeze-policy group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AttentionProj,
    MlpDown,
    MlpUp,
    Norm,
    Embed,
    Head,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::AttentionProj => "attention_proj",
            ParamGroup::MlpDown => "mlp_down",
            ParamGroup::MlpUp => "mlp_up",
            ParamGroup::Norm => "norm",
            ParamGroup::Embed => "embed",
            ParamGroup::Head => "head",
        }
    }
}

/// Weights of one pre-norm block. Linear weights are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    /// `[d_model, d_ff]`; row `k` produces output neuron `k`.
    pub w_down: Tensor,
    pub b_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: TransformerConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub w_head: Tensor,
}

pub(crate) const LAYER_FIELDS: [(&str, ParamGroup); 12] = [
    ("ln1.gain", ParamGroup::Norm),
    ("ln1.bias", ParamGroup::Norm),
    ("attn.wq", ParamGroup::AttentionProj),
    ("attn.wk", ParamGroup::AttentionProj),
    ("attn.wv", ParamGroup::AttentionProj),
    ("attn.wo", ParamGroup::AttentionProj),
    ("ln2.gain", ParamGroup::Norm),
    ("ln2.bias", ParamGroup::Norm),
    ("mlp.up.weight", ParamGroup::MlpUp),
    ("mlp.up.bias", ParamGroup::MlpUp),
    ("mlp.down.weight", ParamGroup::MlpDown),
    ("mlp.down.bias", ParamGroup::MlpDown),
];

impl LayerParams {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

/// Parameter identity: canonical name plus freeze group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Layer index for per-layer tensors.
    pub layer: Option<usize>,
}

impl ModelParams {
    /// Random initialization; `std` scales every weight matrix.
    pub fn init(config: TransformerConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut randn = |shape: &[usize], s: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) * s).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        };
        let d = config.d_model;
        let f = config.d_ff;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = randn(&[config.vocab_size, d], std);
        let pos_emb = randn(&[config.max_seq_len, d], std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: randn(&[d, d], std),
                wk: randn(&[d, d], std),
                wv: randn(&[d, d], std),
                wo: randn(&[d, d], proj_std),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: randn(&[f, d], std),
                b_up: Tensor::zeros(&[f]),
                w_down: randn(&[d, f], proj_std),
                b_down: Tensor::zeros(&[d]),
            });
        }
        let w_head = randn(&[config.vocab_size, d], std);
        Ok(ModelParams {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            w_head,
        })
    }

    /// Canonical parameter list, in checkpoint order.
    pub fn infos(&self) -> Vec<ParamInfo> {
        let mut out = vec![
            ParamInfo { name: "embed.tok".into(), group: ParamGroup::Embed, layer: None },
            ParamInfo { name: "embed.pos".into(), group: ParamGroup::Embed, layer: None },
        ];
        for l in 0..self.layers.len() {
            for (field, group) in LAYER_FIELDS {
                out.push(ParamInfo {
                    name: format!("layers.{l}.{field}"),
                    group,
                    layer: Some(l),
                });
            }
        }
        out.push(ParamInfo { name: "ln_f.gain".into(), group: ParamGroup::Norm, layer: None });
        out.push(ParamInfo { name: "ln_f.bias".into(), group: ParamGroup::Norm, layer: None });
        out.push(ParamInfo { name: "head.weight".into(), group: ParamGroup::Head, layer: None });
        out
    }

    /// Tensors in the same order as [`ModelParams::infos`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.fields());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.w_head]);
        out
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_tensors(config: TransformerConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = ModelParams::init(config, 0, 0.0)?;
        let expected: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::shape("from_tensors", &[expected.len()], &[tensors.len()]));
        }
        for ((slot, t), shape) in params.tensors_mut().into_iter().zip(tensors).zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("from_tensors", &shape, t.shape()));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Splits parameters into trainable and frozen sets under the unlearning
    /// freeze policy: attention projections are fully trainable, the MLP
    /// down-projection is trainable per output row as selected by `mask`
    /// (all rows when no mask is given), everything else is frozen.
    pub fn parameter_groups(&self, mask: Option<&NeuronMask>) -> Result<ParamPartition> {
        if let Some(m) = mask {
            m.check_dims(self.config.n_layers, self.config.d_model)?;
        }
        let entries = self
            .infos()
            .into_iter()
            .map(|info| {
                let rule = match info.group {
                    ParamGroup::AttentionProj => Trainability::Full,
                    ParamGroup::MlpDown => match mask {
                        None => Trainability::Full,
                        Some(m) => Trainability::Rows(m.layer(info.layer.expect("layer param")).to_vec()),
                    },
                    _ => Trainability::Frozen,
                };
                (info, rule)
            })
            .collect();
        Ok(ParamPartition { entries })
    }

    /// Partition with every parameter trainable, used for standard training.
    pub fn all_trainable(&self) -> ParamPartition {
        ParamPartition {
            entries: self.infos().into_iter().map(|i| (i, Trainability::Full)).collect(),
        }
    }
}

/// How much of a parameter tensor may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainability {
    Frozen,
    Full,
    /// Per leading-dimension row; a 1-D tensor treats each element as a row.
    Rows(Vec<bool>),
}

impl Trainability {
    pub fn any(&self) -> bool {
        match self {
            Trainability::Frozen => false,
            Trainability::Full => true,
            Trainability::Rows(r) => r.iter().any(|&b| b),
        }
    }

    /// Whether the gradient must be computed at all.
    pub fn needs_grad(&self) -> bool {
        !matches!(self, Trainability::Frozen)
    }

    /// Per-scalar trainability for a tensor of `len` elements and `rows` rows.
    pub fn element_mask(&self, len: usize, rows: usize) -> Vec<bool> {
        match self {
            Trainability::Frozen => vec![false; len],
            Trainability::Full => vec![true; len],
            Trainability::Rows(r) => {
                let per_row = len / rows;
                (0..len).map(|i| r[i / per_row]).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamPartition {
    pub entries: Vec<(ParamInfo, Trainability)>,
}

impl ParamPartition {
    pub fn trainable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, t)| t.any())
            .map(|(i, _)| i.name.as_str())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, t)| !t.any())
            .map(|(i, _)| i.name.as_str())
            .collect()
    }

    /// Number of individual scalars allowed to change.
    pub fn trainable_scalars(&self, params: &ModelParams) -> usize {
        self.entries
            .iter()
            .zip(params.tensors())
            .map(|((_, rule), t)| {
                let rows = t.shape()[0];
                rule.element_mask(t.len(), rows).iter().filter(|&&b| b).count()
            })
            .sum()
    }
}
