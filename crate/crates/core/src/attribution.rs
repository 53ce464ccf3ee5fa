//! Per-neuron forget-set attribution by stepped activation scaling.
//!
//! For output unit `k` of layer `l` and sample `i` with recorded activation
//! `β`, the unit is overwritten with `a_j = (j/m)·β` at the prediction
//! position and the loss gradient with respect to `a_j` is taken. The score
//! is `(1/m) Σ_i Σ_j β·∂L_i(a_j)/∂a_j`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NtpSample;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::model::{injected_loss_grad, record_activations, ForwardCapture, InferenceModel, ModelParams, Reader};
use crate::numerics::{kernels, Graph, Reduction, Tensor, Var};

pub const SCORES_MAGIC: &[u8; 8] = b"SIMUSCOR";
pub const SCORES_VERSION: u32 = 1;

/// `a_j = (j/m)·β` for `j = 1..=m`.
pub fn activation_steps(beta: f64, m: usize) -> Vec<f64> {
    (1..=m).map(|j| (j as f64 / m as f64) * beta).collect()
}

/// Source of activations and injected-loss gradients for the accumulation
/// driver. The model implementation is [`ModelProbe`]; closed-form probes
/// are used to test the accumulation itself.
pub trait InjectionProbe {
    /// `(n_layers, width)`.
    fn dims(&self) -> (usize, usize);
    fn n_samples(&self) -> usize;
    /// Recorded activations of sample `i`, `[layer][neuron]`.
    fn activations(&mut self, sample: usize) -> Result<Vec<Vec<f64>>>;
    /// `∂L_i/∂a` for each `(neuron, a)` injected at `layer`, one injection
    /// at a time. Called after `activations(sample)`.
    fn grads(&mut self, layer: usize, sample: usize, points: &[(usize, f64)]) -> Result<Vec<f64>>;
}

/// Raw accumulation before the `1/m` factor, plus the number of excluded
/// non-finite gradient terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAttribution {
    pub sums: Vec<Vec<f64>>,
    pub nonfinite: usize,
}

/// Accumulates `Σ_i Σ_j β·g` per unit. For each `(l, k)` samples are added
/// in order and steps in order within a sample, so the result does not
/// depend on how the probe batches its work.
pub fn accumulate(probe: &mut dyn InjectionProbe, m: usize) -> Result<RawAttribution> {
    if m == 0 {
        return Err(Error::Config { field: "m".into(), reason: "attribution steps must be >= 1".into() });
    }
    let (n_layers, width) = probe.dims();
    let n = probe.n_samples();
    if n == 0 {
        return Err(Error::contract("attribution needs a nonempty dataset"));
    }
    let mut sums = vec![vec![0.0; width]; n_layers];
    let mut nonfinite = 0;
    for i in 0..n {
        let betas = probe.activations(i)?;
        for (l, layer_betas) in betas.iter().enumerate() {
            // Units with zero activation contribute exactly zero.
            let live: Vec<usize> = (0..width).filter(|&k| layer_betas[k] != 0.0).collect();
            if live.is_empty() {
                continue;
            }
            let mut points = Vec::with_capacity(live.len() * m);
            for &k in &live {
                for a in activation_steps(layer_betas[k], m) {
                    points.push((k, a));
                }
            }
            let grads = probe.grads(l, i, &points)?;
            for (idx, &k) in live.iter().enumerate() {
                let beta = layer_betas[k];
                let mut inner = 0.0;
                for &gj in &grads[idx * m..(idx + 1) * m] {
                    let term = beta * gj;
                    if term.is_finite() {
                        inner += term;
                    } else {
                        nonfinite += 1;
                    }
                }
                sums[l][k] += inner;
            }
        }
    }
    Ok(RawAttribution { sums, nonfinite })
}

/// Batched injection on a real model. For one sample and layer, all
/// injected copies differ only at the prediction position, and causal
/// attention keeps earlier positions untouched, so the copies are stacked
/// as rows and only that position is recomputed through the later layers
/// against the cached keys and values of the prefix.
pub struct ModelProbe<'a> {
    params: &'a ModelParams,
    model: InferenceModel<'a>,
    samples: &'a [NtpSample],
    weights_t: Vec<[Tensor; 6]>,
    head_t: Tensor,
    current: Option<(usize, ForwardCapture)>,
}

impl<'a> ModelProbe<'a> {
    pub fn new(params: &'a ModelParams, samples: &'a [NtpSample]) -> Result<Self> {
        let c = &params.config;
        for s in samples {
            if s.prefix.is_empty() {
                return Err(Error::contract("next-token sample with empty prefix"));
            }
            if s.target >= c.vocab_size {
                return Err(Error::Index(format!("target {} >= vocab {}", s.target, c.vocab_size)));
            }
        }
        let t = |w: &Tensor| {
            let (r, cols) = w.dims2();
            Tensor::new(vec![cols, r], kernels::transpose(w.data(), r, cols)).expect("transpose shape")
        };
        let weights_t = params
            .layers
            .iter()
            .map(|lp| [t(&lp.wq), t(&lp.wk), t(&lp.wv), t(&lp.wo), t(&lp.w_up), t(&lp.w_down)])
            .collect();
        Ok(ModelProbe {
            params,
            model: InferenceModel::new(params),
            samples,
            weights_t,
            head_t: t(&params.w_head),
            current: None,
        })
    }
}

fn repeat_row(row: &[f64], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![n, row.len()], data).expect("nonempty rows")
}

impl InjectionProbe for ModelProbe<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.params.config.n_layers, self.params.config.d_model)
    }

    fn n_samples(&self) -> usize {
        self.samples.len()
    }

    fn activations(&mut self, sample: usize) -> Result<Vec<Vec<f64>>> {
        let s = &self.samples[sample];
        let (_, cap) = self.model.hidden(&s.prefix, None, true)?;
        let cap = cap.expect("capture requested");
        let d = self.params.config.d_model;
        let last = s.prefix.len() - 1;
        let betas = cap.layers.iter().map(|lc| lc.mlp_out[last * d..(last + 1) * d].to_vec()).collect();
        self.current = Some((sample, cap));
        Ok(betas)
    }

    fn grads(&mut self, layer: usize, sample: usize, points: &[(usize, f64)]) -> Result<Vec<f64>> {
        let cap = match &self.current {
            Some((i, cap)) if *i == sample => cap,
            _ => return Err(Error::contract("grads requested before activations for this sample")),
        };
        let p = self.params;
        let c = &p.config;
        let (d, hd) = (c.d_model, c.head_dim());
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let s = &self.samples[sample];
        let last = s.prefix.len() - 1;
        let b = points.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let row = |v: &[f64]| v[last * d..(last + 1) * d].to_vec();

        let mut g = Graph::new();
        let lc = &cap.layers[layer];
        let base = g.constant(repeat_row(&row(&lc.mlp_out), b));
        let vals = g.param(Tensor::new(vec![b], points.iter().map(|&(_, a)| a).collect())?);
        let cells: Vec<(usize, usize)> = points.iter().enumerate().map(|(r, &(k, _))| (r, k)).collect();
        let mlp = g.overwrite(base, vals, &cells)?;
        let resid = g.constant(repeat_row(&row(&lc.resid_mid), b));
        let mut x = g.add(resid, mlp)?;

        for l in layer + 1..c.n_layers {
            let lp = &p.layers[l];
            let wt = &self.weights_t[l];
            let lc = &cap.layers[l];
            let ln1g = g.constant(lp.ln1_gain.clone());
            let ln1b = g.constant(lp.ln1_bias.clone());
            let h = g.layer_norm(x, ln1g, ln1b)?;
            let wq = g.constant(wt[0].clone());
            let wk = g.constant(wt[1].clone());
            let wv = g.constant(wt[2].clone());
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let (qh, kh, vh) = if c.n_heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice_cols(q, head * hd, hd)?, g.slice_cols(k, head * hd, hd)?, g.slice_cols(v, head * hd, hd)?)
                };
                let own = g.row_dot(qh, kh)?;
                let out = if last == 0 {
                    let own = g.scale(own, inv_sqrt)?;
                    let probs = g.softmax(own)?;
                    g.scale_rows(vh, probs)?
                } else {
                    let mut kp_t = vec![0.0; hd * last];
                    let mut vp = vec![0.0; last * hd];
                    for t in 0..last {
                        for e in 0..hd {
                            kp_t[e * last + t] = lc.keys[t * d + head * hd + e];
                            vp[t * hd + e] = lc.values[t * d + head * hd + e];
                        }
                    }
                    let kp_t = g.constant(Tensor::new(vec![hd, last], kp_t)?);
                    let vp = g.constant(Tensor::new(vec![last, hd], vp)?);
                    let prior = g.matmul(qh, kp_t)?;
                    let scores = g.concat_cols(&[prior, own])?;
                    let scores = g.scale(scores, inv_sqrt)?;
                    let probs = g.softmax(scores)?;
                    let pp = g.slice_cols(probs, 0, last)?;
                    let ps = g.slice_cols(probs, last, 1)?;
                    let from_prior = g.matmul(pp, vp)?;
                    let from_own = g.scale_rows(vh, ps)?;
                    g.add(from_prior, from_own)?
                };
                heads.push(out);
            }
            let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let wo = g.constant(wt[3].clone());
            let attn = g.matmul(attn, wo)?;
            x = g.add(x, attn)?;
            let ln2g = g.constant(lp.ln2_gain.clone());
            let ln2b = g.constant(lp.ln2_bias.clone());
            let h2 = g.layer_norm(x, ln2g, ln2b)?;
            let wu = g.constant(wt[4].clone());
            let bu = g.constant(lp.b_up.clone());
            let up = g.matmul(h2, wu)?;
            let up = g.add_bias(up, bu)?;
            let act = g.gelu(up)?;
            let wd = g.constant(wt[5].clone());
            let bd = g.constant(lp.b_down.clone());
            let down = g.matmul(act, wd)?;
            let down = g.add_bias(down, bd)?;
            x = g.add(x, down)?;
        }
        let lfg = g.constant(p.lnf_gain.clone());
        let lfb = g.constant(p.lnf_bias.clone());
        let hf = g.layer_norm(x, lfg, lfb)?;
        let head = g.constant(self.head_t.clone());
        let logits = g.matmul(hf, head)?;
        let loss = g.cross_entropy(logits, &vec![s.target; b], Reduction::Sum)?;
        g.backward(loss)?;
        Ok(grad_or_zero(&g, vals, b))
    }
}

fn grad_or_zero(g: &Graph, v: Var, n: usize) -> Vec<f64> {
    g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n])
}

/// Reference per-unit path: one full injected forward and backward per
/// step. Returns `Σ_j β·∂L(a_j)/∂a_j` and the count of excluded non-finite
/// terms.
pub fn neuron_sample_attribution(params: &ModelParams, layer: usize, neuron: usize, sample: &NtpSample, m: usize) -> Result<(f64, usize)> {
    let c = &params.config;
    if layer >= c.n_layers || neuron >= c.d_model {
        return Err(Error::Index(format!("unit ({layer}, {neuron}) outside model")));
    }
    let beta = record_activations(params, std::slice::from_ref(sample))?.get(layer, neuron, 0);
    let mut acc = 0.0;
    let mut nonfinite = 0;
    if beta == 0.0 {
        return Ok((0.0, 0));
    }
    for a in activation_steps(beta, m) {
        let (_, grad) = injected_loss_grad(params, sample, layer, neuron, a)?;
        let term = beta * grad;
        if term.is_finite() {
            acc += term;
        } else {
            nonfinite += 1;
        }
    }
    Ok((acc, nonfinite))
}

/// Content hash of a sample list.
pub fn samples_hash(samples: &[NtpSample]) -> String {
    let mut buf = Vec::new();
    for s in samples {
        buf.extend_from_slice(&(s.prefix.len() as u64).to_le_bytes());
        for &t in &s.prefix {
            buf.extend_from_slice(&(t as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(s.target as u64).to_le_bytes());
    }
    sha256_hex(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresHeader {
    pub model_hash: String,
    pub dataset_hash: String,
    pub m: usize,
    pub n_samples: usize,
    pub nonfinite: usize,
    /// Hash of the experiment configuration that produced the scores.
    #[serde(default)]
    pub config_hash: String,
    /// Creation time in seconds since the Unix epoch; excluded from the
    /// content hash.
    pub timestamp: u64,
}

/// Attribution score per layer and down-projection output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionScores {
    pub layers: Vec<Vec<f64>>,
    pub m: usize,
    pub header: ScoresHeader,
}

pub fn attribution_scores(params: &ModelParams, samples: &[NtpSample], m: usize) -> Result<AttributionScores> {
    let mut probe = ModelProbe::new(params, samples)?;
    let raw = accumulate(&mut probe, m)?;
    let header = ScoresHeader {
        model_hash: crate::model::params_hash(params),
        dataset_hash: samples_hash(samples),
        m,
        n_samples: samples.len(),
        nonfinite: raw.nonfinite,
        config_hash: String::new(),
        timestamp: now_secs(),
    };
    Ok(AttributionScores::from_raw(raw, m, header))
}

pub(crate) fn now_secs() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl AttributionScores {
    pub fn from_raw(raw: RawAttribution, m: usize, header: ScoresHeader) -> Self {
        let layers = raw
            .sums
            .into_iter()
            .map(|row| row.into_iter().map(|s| s / m as f64).collect())
            .collect();
        AttributionScores { layers, m, header }
    }

    fn encode(&self, with_timestamp: bool) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        if !with_timestamp {
            header.timestamp = 0;
        }
        let mut out = Vec::new();
        out.extend_from_slice(SCORES_MAGIC);
        out.extend_from_slice(&SCORES_VERSION.to_le_bytes());
        let h = serde_json::to_vec(&header)?;
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        let width = self.layers.first().map_or(0, Vec::len);
        out.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        out.extend_from_slice(&(width as u64).to_le_bytes());
        for row in &self.layers {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.encode(true)
    }

    /// Hash of scores and header, ignoring the timestamp.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.encode(false).expect("header serializes"))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, origin };
        if r.take(8)? != SCORES_MAGIC {
            return Err(Error::format(origin, "bad magic"));
        }
        let version = r.u32()?;
        if version != SCORES_VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: ScoresHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(origin, e.to_string()))?;
        let n_layers = r.u64()? as usize;
        let width = r.u64()? as usize;
        if n_layers.checked_mul(width).and_then(|n| n.checked_mul(8)) != Some(r.remaining()) {
            return Err(Error::format(origin, "score payload does not match its shape"));
        }
        let mut layers = vec![vec![0.0; width]; n_layers];
        for row in layers.iter_mut() {
            for v in row.iter_mut() {
                *v = r.f64()?;
            }
        }
        if layers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format(origin, "non-finite score"));
        }
        Ok(AttributionScores { layers, m: header.m, header })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        AttributionScores::from_bytes(&bytes, path)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,neuron,score\n");
        for (l, row) in self.layers.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                s.push_str(&format!("{l},{k},{v:e}\n"));
            }
        }
        s
    }
}

/// Closed-form probes: one layer, one unit per sample activation `β_i`, and
/// a loss whose derivative is known analytically.
pub mod synthetic {
    use super::*;

    pub enum Loss {
        /// `L(a) = c·a`.
        Linear(f64),
        /// `L(a) = a²/2`.
        Quadratic,
    }

    pub struct ClosedFormProbe {
        pub betas: Vec<f64>,
        pub loss: Loss,
    }

    impl InjectionProbe for ClosedFormProbe {
        fn dims(&self) -> (usize, usize) {
            (1, 1)
        }

        fn n_samples(&self) -> usize {
            self.betas.len()
        }

        fn activations(&mut self, sample: usize) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![self.betas[sample]]])
        }

        fn grads(&mut self, _layer: usize, _sample: usize, points: &[(usize, f64)]) -> Result<Vec<f64>> {
            Ok(points
                .iter()
                .map(|&(_, a)| match self.loss {
                    Loss::Linear(c) => c,
                    Loss::Quadratic => a,
                })
                .collect())
        }
    }

    /// Attribution score of the single unit.
    pub fn score(betas: &[f64], loss: Loss, m: usize) -> Result<f64> {
        let mut probe = ClosedFormProbe { betas: betas.to_vec(), loss };
        Ok(accumulate(&mut probe, m)?.sums[0][0] / m as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::{score, Loss};
    use super::*;
    use crate::model::TransformerConfig;

    #[test]
    fn steps_examples() {
        assert_eq!(activation_steps(0.0, 3), vec![0.0; 3]);
        assert_eq!(activation_steps(1.0, 5), vec![0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(activation_steps(-2.0, 4), vec![-0.5, -1.0, -1.5, -2.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(score(&[1.0], Loss::Quadratic, 0).is_err());
    }

    #[test]
    fn linear_loss_independent_of_m() {
        for m in [1, 3, 7, 20] {
            let s = score(&[1.5], Loss::Linear(0.8), m).unwrap();
            assert!((s - 1.5 * 0.8).abs() < 1e-14, "m={m}: {s}");
        }
    }

    #[test]
    fn quadratic_closed_form() {
        let beta: f64 = 1.7;
        for m in [1, 2, 10, 50] {
            let s = score(&[beta], Loss::Quadratic, m).unwrap();
            let expected = beta * beta * (m as f64 + 1.0) / (2.0 * m as f64);
            assert!((s - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_dataset_doubles() {
        let once = score(&[0.3, -1.2, 2.0], Loss::Quadratic, 4).unwrap();
        let twice = score(&[0.3, -1.2, 2.0, 0.3, -1.2, 2.0], Loss::Quadratic, 4).unwrap();
        assert!((twice - 2.0 * once).abs() <= 1e-15 * once.abs().max(1.0));
    }

    struct Poisoned;
    impl InjectionProbe for Poisoned {
        fn dims(&self) -> (usize, usize) {
            (1, 2)
        }
        fn n_samples(&self) -> usize {
            1
        }
        fn activations(&mut self, _: usize) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![1.0, 1.0]])
        }
        fn grads(&mut self, _: usize, _: usize, points: &[(usize, f64)]) -> Result<Vec<f64>> {
            Ok(points.iter().map(|&(k, _)| if k == 0 { f64::NAN } else { 1.0 }).collect())
        }
    }

    #[test]
    fn nonfinite_terms_excluded_and_counted() {
        let raw = accumulate(&mut Poisoned, 3).unwrap();
        assert_eq!(raw.sums[0][0], 0.0);
        assert_eq!(raw.sums[0][1], 3.0);
        assert_eq!(raw.nonfinite, 3);
    }

    fn tiny() -> (ModelParams, Vec<NtpSample>) {
        let cfg = TransformerConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 12, vocab_size: 11, max_seq_len: 16 };
        let p = ModelParams::init(cfg, 3, 0.4).unwrap();
        let samples = vec![
            NtpSample { prefix: vec![1, 4, 2, 7], target: 5, pair_id: 0, answer_pos: 0 },
            NtpSample { prefix: vec![3], target: 9, pair_id: 1, answer_pos: 0 },
            NtpSample { prefix: vec![0, 10, 6], target: 1, pair_id: 1, answer_pos: 1 },
        ];
        (p, samples)
    }

    #[test]
    fn batched_matches_reference_path() {
        let (p, samples) = tiny();
        let m = 3;
        let scores = attribution_scores(&p, &samples, m).unwrap();
        for l in 0..2 {
            for k in 0..8 {
                let mut acc = 0.0;
                for s in &samples {
                    acc += neuron_sample_attribution(&p, l, k, s, m).unwrap().0;
                }
                let reference = acc / m as f64;
                let got = scores.layers[l][k];
                assert!((got - reference).abs() <= 1e-10 * reference.abs().max(1e-3), "({l},{k}) {got} vs {reference}");
            }
        }
    }

    #[test]
    fn scores_deterministic_and_linear() {
        let (p, samples) = tiny();
        let a = attribution_scores(&p, &samples, 2).unwrap();
        let b = attribution_scores(&p, &samples, 2).unwrap();
        assert_eq!(a.layers, b.layers);
        let doubled: Vec<NtpSample> = samples.iter().chain(&samples).cloned().collect();
        let d = attribution_scores(&p, &doubled, 2).unwrap();
        for (ra, rd) in a.layers.iter().zip(&d.layers) {
            for (x, y) in ra.iter().zip(rd) {
                assert!((y - 2.0 * x).abs() <= 1e-14 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn dead_unit_scores_zero() {
        let (mut p, samples) = tiny();
        p.layers[1].w_down.data_mut()[3 * 12..4 * 12].fill(0.0);
        p.layers[1].b_down.data_mut()[3] = 0.0;
        let s = attribution_scores(&p, &samples, 3).unwrap();
        assert_eq!(s.layers[1][3], 0.0);
        assert_eq!(neuron_sample_attribution(&p, 1, 3, &samples[0], 3).unwrap().0, 0.0);
    }

    #[test]
    fn file_roundtrip_and_content_hash() {
        let (p, samples) = tiny();
        let mut s = attribution_scores(&p, &samples, 2).unwrap();
        let path = Path::new("mem");
        let back = AttributionScores::from_bytes(&s.to_bytes().unwrap(), path).unwrap();
        assert_eq!(back, s);
        let h = s.content_hash();
        s.header.timestamp += 1000;
        assert_eq!(s.content_hash(), h);
        s.layers[0][0] += 1.0;
        assert_ne!(s.content_hash(), h);
        let bytes = s.to_bytes().unwrap();
        assert!(AttributionScores::from_bytes(&bytes[..bytes.len() - 3], path).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let (p, _) = tiny();
        assert!(attribution_scores(&p, &[], 2).is_err());
    }
}
