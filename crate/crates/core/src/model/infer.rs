//! Graph-free forward pass for evaluation, generation and activation
//! capture. Uses the same kernels in the same order as the graph path, so
//! values match it bit for bit.

use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;

/// Override of one MLP down-projection output unit at chosen positions.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSpec {
    pub layer: usize,
    pub neuron: usize,
    pub value: f64,
    /// Token positions receiving the override.
    pub positions: Vec<usize>,
}

/// Per-layer intermediates of one sequence, each `[len, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    /// Residual stream after the attention sub-block.
    pub resid_mid: Vec<f64>,
    /// Down-projection output before the residual add.
    pub mlp_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCapture {
    pub len: usize,
    pub layers: Vec<LayerCapture>,
}

struct LayerWeights {
    wq_t: Vec<f64>,
    wk_t: Vec<f64>,
    wv_t: Vec<f64>,
    wo_t: Vec<f64>,
    up_t: Vec<f64>,
    down_t: Vec<f64>,
}

/// Parameters with weights pre-transposed for row-major `x · Wᵀ`.
pub struct InferenceModel<'a> {
    params: &'a ModelParams,
    layers: Vec<LayerWeights>,
    head_t: Vec<f64>,
}

impl<'a> InferenceModel<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let c = &params.config;
        let (d, f) = (c.d_model, c.d_ff);
        let layers = params
            .layers
            .iter()
            .map(|lp| LayerWeights {
                wq_t: kernels::transpose(lp.wq.data(), d, d),
                wk_t: kernels::transpose(lp.wk.data(), d, d),
                wv_t: kernels::transpose(lp.wv.data(), d, d),
                wo_t: kernels::transpose(lp.wo.data(), d, d),
                up_t: kernels::transpose(lp.w_up.data(), f, d),
                down_t: kernels::transpose(lp.w_down.data(), d, f),
            })
            .collect();
        InferenceModel {
            params,
            layers,
            head_t: kernels::transpose(params.w_head.data(), c.vocab_size, d),
        }
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let c = &self.params.config;
        if tokens.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        if tokens.len() > c.max_seq_len {
            return Err(Error::Index(format!("sequence length {} > max_seq_len {}", tokens.len(), c.max_seq_len)));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Index(format!("token {t} >= vocab {}", c.vocab_size)));
        }
        Ok(())
    }

    /// Final normalized hidden states `[len, d_model]`.
    pub fn hidden(
        &self,
        tokens: &[usize],
        injection: Option<&InjectionSpec>,
        capture: bool,
    ) -> Result<(Vec<f64>, Option<ForwardCapture>)> {
        self.check_tokens(tokens)?;
        let c = &self.params.config;
        let (d, f, t_len) = (c.d_model, c.d_ff, tokens.len());
        if let Some(inj) = injection {
            if inj.layer >= c.n_layers || inj.neuron >= d {
                return Err(Error::Index(format!("injection at layer {} neuron {}", inj.layer, inj.neuron)));
            }
            if let Some(&p) = inj.positions.iter().find(|&&p| p >= t_len) {
                return Err(Error::Index(format!("injection position {p} of {t_len}")));
            }
            if !inj.value.is_finite() {
                return Err(Error::NonFinite("injection value".into()));
            }
        }
        let p = self.params;
        let mut x = vec![0.0; t_len * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = p.tok_emb.row(tok);
            let pe = p.pos_emb.row(i);
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        let hd = c.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut captures = Vec::new();
        let mut h = vec![0.0; t_len * d];
        for (l, (lp, lw)) in p.layers.iter().zip(&self.layers).enumerate() {
            for i in 0..t_len {
                kernels::layer_norm_row(&x[i * d..(i + 1) * d], lp.ln1_gain.data(), lp.ln1_bias.data(), &mut h[i * d..(i + 1) * d]);
            }
            let q = kernels::matmul(&h, &lw.wq_t, t_len, d, d);
            let k = kernels::matmul(&h, &lw.wk_t, t_len, d, d);
            let v = kernels::matmul(&h, &lw.wv_t, t_len, d, d);
            let mut concat = vec![0.0; t_len * d];
            let mut qh = vec![0.0; t_len * hd];
            let mut kh = vec![0.0; t_len * hd];
            let mut vh = vec![0.0; t_len * hd];
            let mut probs = vec![0.0; t_len * t_len];
            for head in 0..c.n_heads {
                for i in 0..t_len {
                    let src = i * d + head * hd;
                    qh[i * hd..(i + 1) * hd].copy_from_slice(&q[src..src + hd]);
                    kh[i * hd..(i + 1) * hd].copy_from_slice(&k[src..src + hd]);
                    vh[i * hd..(i + 1) * hd].copy_from_slice(&v[src..src + hd]);
                }
                let kt = kernels::transpose(&kh, t_len, hd);
                let mut scores = kernels::matmul(&qh, &kt, t_len, hd, t_len);
                for s in scores.iter_mut() {
                    *s *= inv_sqrt;
                }
                for i in 0..t_len {
                    for j in (i + 1)..t_len {
                        scores[i * t_len + j] += f64::NEG_INFINITY;
                    }
                    kernels::softmax_row(&scores[i * t_len..(i + 1) * t_len], &mut probs[i * t_len..(i + 1) * t_len]);
                }
                let out = kernels::matmul(&probs, &vh, t_len, t_len, hd);
                for i in 0..t_len {
                    concat[i * d + head * hd..i * d + (head + 1) * hd].copy_from_slice(&out[i * hd..(i + 1) * hd]);
                }
            }
            let attn = kernels::matmul(&concat, &lw.wo_t, t_len, d, d);
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += ai;
            }
            let resid_mid = if capture { x.clone() } else { Vec::new() };
            for i in 0..t_len {
                kernels::layer_norm_row(&x[i * d..(i + 1) * d], lp.ln2_gain.data(), lp.ln2_bias.data(), &mut h[i * d..(i + 1) * d]);
            }
            let mut up = kernels::matmul(&h, &lw.up_t, t_len, d, f);
            kernels::add_bias(&mut up, lp.b_up.data());
            for u in up.iter_mut() {
                *u = kernels::gelu(*u);
            }
            let mut mlp = kernels::matmul(&up, &lw.down_t, t_len, f, d);
            kernels::add_bias(&mut mlp, lp.b_down.data());
            if let Some(inj) = injection.filter(|i| i.layer == l) {
                for &pos in &inj.positions {
                    mlp[pos * d + inj.neuron] = inj.value;
                }
            }
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += mi;
            }
            if capture {
                captures.push(LayerCapture {
                    keys: k,
                    values: v,
                    resid_mid,
                    mlp_out: mlp,
                });
            }
        }
        let mut out = vec![0.0; t_len * d];
        for i in 0..t_len {
            kernels::layer_norm_row(&x[i * d..(i + 1) * d], p.lnf_gain.data(), p.lnf_bias.data(), &mut out[i * d..(i + 1) * d]);
        }
        let cap = capture.then(|| ForwardCapture {
            len: t_len,
            layers: captures,
        });
        Ok((out, cap))
    }

    /// Causal logits `[len, vocab]`.
    pub fn logits(&self, tokens: &[usize], injection: Option<&InjectionSpec>) -> Result<Tensor> {
        let (hidden, _) = self.hidden(tokens, injection, false)?;
        let c = &self.params.config;
        let logits = kernels::matmul(&hidden, &self.head_t, tokens.len(), c.d_model, c.vocab_size);
        Tensor::new(vec![tokens.len(), c.vocab_size], logits)
    }

    /// Logits of the listed rows of a sequence.
    pub fn logits_at(&self, tokens: &[usize], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
        let (hidden, _) = self.hidden(tokens, None, false)?;
        let c = &self.params.config;
        rows.iter()
            .map(|&r| {
                if r >= tokens.len() {
                    return Err(Error::Index(format!("row {r} of {}", tokens.len())));
                }
                Ok(kernels::matmul(&hidden[r * c.d_model..(r + 1) * c.d_model], &self.head_t, 1, c.d_model, c.vocab_size))
            })
            .collect()
    }

    pub fn decoder(&self) -> Decoder<'_, 'a> {
        Decoder {
            model: self,
            keys: vec![Vec::new(); self.params.config.n_layers],
            values: vec![Vec::new(); self.params.config.n_layers],
            len: 0,
        }
    }

    /// Greedy continuation of `prompt`, stopping at `stop` or after
    /// `max_new` tokens. The stop token is not included.
    pub fn generate_greedy(&self, prompt: &[usize], max_new: usize, stop: usize) -> Result<Vec<usize>> {
        self.check_tokens(prompt)?;
        let mut dec = self.decoder();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = dec.step(t)?;
        }
        let mut out = Vec::new();
        let limit = self.params.config.max_seq_len;
        for _ in 0..max_new {
            let next = argmax(&logits);
            if next == stop {
                break;
            }
            out.push(next);
            if dec.len() >= limit {
                break;
            }
            logits = dec.step(next)?;
        }
        Ok(out)
    }
}

/// First index of the maximum; ties resolve to the lowest id.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Incremental decoder with cached keys and values.
pub struct Decoder<'m, 'a> {
    model: &'m InferenceModel<'a>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl Decoder<'_, '_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one token and returns the logits at its position.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let p = self.model.params;
        let c = &p.config;
        if self.len >= c.max_seq_len {
            return Err(Error::Index(format!("decoder full at {}", c.max_seq_len)));
        }
        if token >= c.vocab_size {
            return Err(Error::Index(format!("token {token} >= vocab {}", c.vocab_size)));
        }
        let (d, f, hd) = (c.d_model, c.d_ff, c.head_dim());
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let pos = self.len;
        let n = pos + 1;
        let mut x: Vec<f64> = p.tok_emb.row(token).iter().zip(p.pos_emb.row(pos)).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];
        let mut scores = vec![0.0; n];
        let mut probs = vec![0.0; n];
        for (l, (lp, lw)) in p.layers.iter().zip(&self.model.layers).enumerate() {
            kernels::layer_norm_row(&x, lp.ln1_gain.data(), lp.ln1_bias.data(), &mut h);
            let q = kernels::matmul(&h, &lw.wq_t, 1, d, d);
            let k = kernels::matmul(&h, &lw.wk_t, 1, d, d);
            let v = kernels::matmul(&h, &lw.wv_t, 1, d, d);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];
            let mut concat = vec![0.0; d];
            for head in 0..c.n_heads {
                let qs = &q[head * hd..(head + 1) * hd];
                for t in 0..n {
                    scores[t] = kernels::dot(qs, &keys[t * d + head * hd..t * d + (head + 1) * hd]) * inv_sqrt;
                }
                kernels::softmax_row(&scores, &mut probs);
                let out = &mut concat[head * hd..(head + 1) * hd];
                for t in 0..n {
                    let vt = &values[t * d + head * hd..t * d + (head + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vt) {
                        *o += probs[t] * vv;
                    }
                }
            }
            let attn = kernels::matmul(&concat, &lw.wo_t, 1, d, d);
            for (xi, ai) in x.iter_mut().zip(&attn) {
                *xi += ai;
            }
            kernels::layer_norm_row(&x, lp.ln2_gain.data(), lp.ln2_bias.data(), &mut h);
            let mut up = kernels::matmul(&h, &lw.up_t, 1, d, f);
            kernels::add_bias(&mut up, lp.b_up.data());
            for u in up.iter_mut() {
                *u = kernels::gelu(*u);
            }
            let mut mlp = kernels::matmul(&up, &lw.down_t, 1, f, d);
            kernels::add_bias(&mut mlp, lp.b_down.data());
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += mi;
            }
        }
        kernels::layer_norm_row(&x.clone(), p.lnf_gain.data(), p.lnf_bias.data(), &mut x);
        self.len += 1;
        Ok(kernels::matmul(&x, &self.model.head_t, 1, d, c.vocab_size))
    }
}
