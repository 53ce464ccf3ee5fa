//! Differentiable forward pass recorded on a [`Graph`].

use super::config::TransformerConfig;
use super::params::{ModelParams, ParamPartition, LAYER_FIELDS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Reduction, Tensor, Var};

/// Graph handles for every parameter, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    n_layers: usize,
}

impl BoundParams {
    /// Records every parameter on the graph; only those the partition
    /// allows to change track gradients.
    pub fn bind(g: &mut Graph, params: &ModelParams, partition: &ParamPartition) -> Self {
        let vars = params
            .tensors()
            .into_iter()
            .zip(&partition.entries)
            .map(|(t, (_, rule))| {
                if rule.needs_grad() {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            vars,
            n_layers: params.config.n_layers,
        }
    }

    pub fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    pub fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    /// Field `f` of layer `l`, indexed as in the canonical layer layout.
    pub fn layer(&self, l: usize, f: usize) -> Var {
        self.vars[2 + LAYER_FIELDS.len() * l + f]
    }

    pub fn lnf_gain(&self) -> Var {
        self.vars[2 + LAYER_FIELDS.len() * self.n_layers]
    }

    pub fn lnf_bias(&self) -> Var {
        self.vars[3 + LAYER_FIELDS.len() * self.n_layers]
    }

    pub fn head(&self) -> Var {
        self.vars[4 + LAYER_FIELDS.len() * self.n_layers]
    }

    /// Gradients for each parameter, `None` where untracked or unreached.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }
}

pub(crate) mod field {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_GAIN: usize = 6;
    pub const LN2_BIAS: usize = 7;
    pub const W_UP: usize = 8;
    pub const B_UP: usize = 9;
    pub const W_DOWN: usize = 10;
    pub const B_DOWN: usize = 11;
}

/// Override of one down-projection output unit on the graph.
#[derive(Debug, Clone)]
pub struct GraphInjection {
    pub layer: usize,
    pub neuron: usize,
    /// Global row indices (into the concatenated batch) that receive the value.
    pub rows: Vec<usize>,
    /// Scalar `[1]` node holding the injected activation.
    pub value: Var,
}

/// `x · Wᵀ` for a weight stored `[out, in]`.
fn linear(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    g.matmul(x, wt)
}

/// Runs the blocks over a batch of sequences, returning the final
/// normalized hidden states `[Σ len, d_model]` with rows concatenated in
/// batch order.
pub fn hidden_states(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &TransformerConfig,
    seqs: &[&[usize]],
    injection: Option<&GraphInjection>,
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut tok_ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.is_empty() {
            return Err(Error::contract("empty sequence"));
        }
        if s.len() > cfg.max_seq_len {
            return Err(Error::Index(format!("sequence length {} > max_seq_len {}", s.len(), cfg.max_seq_len)));
        }
        spans.push((tok_ids.len(), s.len()));
        for (p, &t) in s.iter().enumerate() {
            if t >= cfg.vocab_size {
                return Err(Error::Index(format!("token {t} >= vocab {}", cfg.vocab_size)));
            }
            tok_ids.push(t);
            pos_ids.push(p);
        }
    }
    if let Some(inj) = injection {
        if inj.layer >= cfg.n_layers || inj.neuron >= cfg.d_model {
            return Err(Error::Index(format!("injection at layer {} neuron {}", inj.layer, inj.neuron)));
        }
        if let Some(&r) = inj.rows.iter().find(|&&r| r >= tok_ids.len()) {
            return Err(Error::Index(format!("injection row {r} of {}", tok_ids.len())));
        }
    }

    let te = g.gather_rows(bp.tok_emb(), &tok_ids)?;
    let pe = g.gather_rows(bp.pos_emb(), &pos_ids)?;
    let mut x = g.add(te, pe)?;
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    for l in 0..cfg.n_layers {
        use field::*;
        let h = g.layer_norm(x, bp.layer(l, LN1_GAIN), bp.layer(l, LN1_BIAS))?;
        let q = linear(g, h, bp.layer(l, WQ))?;
        let k = linear(g, h, bp.layer(l, WK))?;
        let v = linear(g, h, bp.layer(l, WV))?;
        let mut seq_outs = Vec::with_capacity(spans.len());
        for &(start, len) in &spans {
            let (qs, ks, vs) = if spans.len() == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_rows(q, start, len)?,
                    g.slice_rows(k, start, len)?,
                    g.slice_rows(v, start, len)?,
                )
            };
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (qh, kh, vh) = if cfg.n_heads == 1 {
                    (qs, ks, vs)
                } else {
                    (
                        g.slice_cols(qs, head * hd, hd)?,
                        g.slice_cols(ks, head * hd, hd)?,
                        g.slice_cols(vs, head * hd, hd)?,
                    )
                };
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let scores = g.causal_mask(scores)?;
                let probs = g.softmax(scores)?;
                heads.push(g.matmul(probs, vh)?);
            }
            seq_outs.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        let attn = if seq_outs.len() == 1 { seq_outs[0] } else { g.concat_rows(&seq_outs)? };
        let attn = linear(g, attn, bp.layer(l, WO))?;
        x = g.add(x, attn)?;

        let h2 = g.layer_norm(x, bp.layer(l, LN2_GAIN), bp.layer(l, LN2_BIAS))?;
        let up = linear(g, h2, bp.layer(l, W_UP))?;
        let up = g.add_bias(up, bp.layer(l, B_UP))?;
        let act = g.gelu(up)?;
        let down = linear(g, act, bp.layer(l, W_DOWN))?;
        let mut mlp = g.add_bias(down, bp.layer(l, B_DOWN))?;
        if let Some(inj) = injection.filter(|i| i.layer == l) {
            let table = g.reshape(inj.value, &[1, 1])?;
            let spread = g.gather_rows(table, &vec![0; inj.rows.len()])?;
            let spread = g.reshape(spread, &[inj.rows.len()])?;
            let cells: Vec<(usize, usize)> = inj.rows.iter().map(|&r| (r, inj.neuron)).collect();
            mlp = g.overwrite(mlp, spread, &cells)?;
        }
        x = g.add(x, mlp)?;
    }
    g.layer_norm(x, bp.lnf_gain(), bp.lnf_bias())
}

/// Projects selected hidden rows onto the vocabulary.
pub fn head_logits(g: &mut Graph, bp: &BoundParams, hidden: Var, rows: &[usize]) -> Result<Var> {
    let sel = g.gather_rows(hidden, rows)?;
    linear(g, sel, bp.head())
}

/// One teacher-forced training sequence: tokens plus `(position, target)`
/// pairs, where the logits at `position` must predict `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetedSequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<(usize, usize)>,
}

/// Mean cross-entropy over every target of every sequence in the batch.
pub fn batch_loss(g: &mut Graph, bp: &BoundParams, cfg: &TransformerConfig, batch: &[TargetedSequence]) -> Result<Var> {
    let seqs: Vec<&[usize]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let hidden = hidden_states(g, bp, cfg, &seqs, None)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for s in batch {
        for &(p, t) in &s.targets {
            if p >= s.tokens.len() {
                return Err(Error::Index(format!("target position {p} of {}", s.tokens.len())));
            }
            rows.push(offset + p);
            targets.push(t);
        }
        offset += s.tokens.len();
    }
    if rows.is_empty() {
        return Err(Error::contract("batch has no targets"));
    }
    let logits = head_logits(g, bp, hidden, &rows)?;
    g.cross_entropy(logits, &targets, Reduction::Mean)
}
