//! Finite-difference checks of every autodiff primitive and of the model
//! losses, shared by the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate_corpus, training_sequence, Split, VOCAB_SIZE};
use crate::error::Result;
use crate::model::{batch_loss, BoundParams, ModelParams, TargetedSequence, TransformerConfig};
use crate::numerics::{central_difference, Graph, Reduction, Tensor, Var};
use crate::unlearn::graddiff_loss;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
}

/// `max|a - c| / max(max|c|, 1e-8)`: relative error in the max norm, so
/// near-zero coordinates of a nonzero gradient do not dominate.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|c| c.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

type Build = fn(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

/// Scalar loss `sum(out * w)` with fixed random weights `w`, so every output
/// coordinate contributes a distinct amount.
fn case_loss(case: &Case, x: &[f64], seed: u64, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let mut vars = Vec::new();
    let mut off = 0;
    for s in &case.shapes {
        let n: usize = s.iter().product();
        vars.push(g.param(Tensor::new(s.clone(), x[off..off + n].to_vec())?));
        off += n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let out = (case.build)(&mut g, &vars, &mut rng)?;
    let loss = if g.value(out).is_scalar() {
        out
    } else {
        let shape = g.value(out).shape().to_vec();
        let w: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = g.constant(Tensor::new(shape, w)?);
        let prod = g.mul(out, wv)?;
        g.sum(prod)?
    };
    let value = g.value(loss).data()[0];
    if !want_grad {
        return Ok((value, vec![]));
    }
    g.backward(loss)?;
    let grad = vars
        .iter()
        .flat_map(|&v| g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    Ok((value, grad))
}

fn check_case(case: &Case, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let (_, analytic) = case_loss(case, &x, seed, true)?;
    let numeric = central_difference(|p| case_loss(case, p, seed, false).map_or(f64::NAN, |v| v.0), &x, FD_STEP);
    Ok(rel_err(&analytic, &numeric))
}

fn cases() -> Vec<Case> {
    fn c(name: &'static str, shapes: &[&[usize]], build: Build) -> Case {
        Case { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build }
    }
    vec![
        c("matmul", &[&[3, 4], &[4, 2]], |g, v, _| g.matmul(v[0], v[1])),
        c("add", &[&[3, 2], &[3, 2]], |g, v, _| g.add(v[0], v[1])),
        c("sub", &[&[3, 2], &[3, 2]], |g, v, _| g.sub(v[0], v[1])),
        c("mul", &[&[3, 2], &[3, 2]], |g, v, _| g.mul(v[0], v[1])),
        c("scale", &[&[2, 3]], |g, v, _| g.scale(v[0], -0.7)),
        c("add_bias", &[&[3, 4], &[4]], |g, v, _| g.add_bias(v[0], v[1])),
        c("transpose", &[&[2, 3]], |g, v, _| g.transpose(v[0])),
        c("reshape", &[&[2, 6]], |g, v, _| g.reshape(v[0], &[3, 4])),
        c("slice_rows", &[&[5, 3]], |g, v, _| g.slice_rows(v[0], 1, 3)),
        c("slice_cols", &[&[3, 5]], |g, v, _| g.slice_cols(v[0], 2, 2)),
        c("concat_rows", &[&[2, 3], &[1, 3]], |g, v, _| g.concat_rows(&[v[0], v[1], v[0]])),
        c("concat_cols", &[&[2, 3], &[2, 1]], |g, v, _| g.concat_cols(&[v[1], v[0]])),
        c("gather_rows", &[&[4, 3]], |g, v, _| g.gather_rows(v[0], &[2, 0, 2, 3])),
        c("softmax", &[&[3, 4]], |g, v, _| g.softmax(v[0])),
        c("layer_norm", &[&[3, 5], &[5], &[5]], |g, v, _| g.layer_norm(v[0], v[1], v[2])),
        c("gelu", &[&[3, 4]], |g, v, _| g.gelu(v[0])),
        c("causal_mask_softmax", &[&[4, 4]], |g, v, _| {
            let m = g.causal_mask(v[0])?;
            g.softmax(m)
        }),
        c("cross_entropy_mean", &[&[3, 5]], |g, v, r| {
            let t: Vec<usize> = (0..3).map(|_| r.gen_range(0..5)).collect();
            g.cross_entropy(v[0], &t, Reduction::Mean)
        }),
        c("cross_entropy_sum", &[&[4, 3]], |g, v, r| {
            let t: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
            g.cross_entropy(v[0], &t, Reduction::Sum)
        }),
        c("sum", &[&[3, 3]], |g, v, _| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        }),
        c("mean", &[&[2, 5]], |g, v, _| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        }),
        c("overwrite", &[&[3, 4], &[2]], |g, v, _| g.overwrite(v[0], v[1], &[(0, 1), (2, 3)])),
        c("row_dot", &[&[3, 4], &[3, 4]], |g, v, _| g.row_dot(v[0], v[1])),
        c("scale_rows", &[&[3, 4], &[3, 1]], |g, v, _| g.scale_rows(v[0], v[1])),
        c("attention_block", &[&[4, 6], &[6, 6], &[6, 6]], |g, v, _| {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, 0.4)?;
            let m = g.causal_mask(s)?;
            let p = g.softmax(m)?;
            g.matmul(p, v[0])
        }),
    ]
}

/// Every graph primitive (plus one composed attention block) at `seeds`
/// random points each.
pub fn primitive_checks(seeds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for case in cases() {
        for seed in 0..seeds {
            out.push(GradCheck { name: case.name.to_string(), seed, rel_err: check_case(&case, seed)? });
        }
    }
    Ok(out)
}

fn tiny_config() -> TransformerConfig {
    TransformerConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 12, vocab_size: VOCAB_SIZE, max_seq_len: 128 }
}

fn with_flat(params: &ModelParams, flat: &[f64]) -> ModelParams {
    let mut p = params.clone();
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    p
}

/// Compares `grads` with central differences of `loss` on 40 random
/// coordinates of the flattened parameter vector.
fn check_params(params: &ModelParams, loss: impl Fn(&ModelParams) -> f64, grads: &[Option<Tensor>], seed: u64) -> f64 {
    let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic: Vec<f64> = params
        .tensors()
        .iter()
        .zip(grads)
        .flat_map(|(t, g)| g.as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = (0..40).map(|_| rng.gen_range(0..flat.len())).collect();
    picks.sort_unstable();
    picks.dedup();
    let sub_analytic: Vec<f64> = picks.iter().map(|&i| analytic[i]).collect();
    let sub_x: Vec<f64> = picks.iter().map(|&i| flat[i]).collect();
    let numeric = central_difference(
        |sub| {
            let mut full = flat.clone();
            for (k, &i) in picks.iter().enumerate() {
                full[i] = sub[k];
            }
            loss(&with_flat(params, &full))
        },
        &sub_x,
        FD_STEP,
    );
    rel_err(&sub_analytic, &numeric)
}

fn random_sequences(seed: u64) -> Vec<TargetedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| {
            let len = rng.gen_range(4..9);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..VOCAB_SIZE)).collect();
            let targets = (1..len).map(|p| (p - 1, tokens[p])).collect();
            TargetedSequence { tokens, targets }
        })
        .collect()
}

fn training_loss(params: &ModelParams, batch: &[TargetedSequence]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, &params.all_trainable());
    let l = batch_loss(&mut g, &bp, &params.config, batch)?;
    let value = g.value(l).data()[0];
    g.backward(l)?;
    Ok((value, bp.grads(&g)))
}

/// End-to-end checks on a small random model: the training loss over random
/// token sequences and the GradDiff loss over corpus QA pairs.
pub fn model_checks(seeds: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let params = ModelParams::init(tiny_config(), seed, 0.3)?;
        let batch = random_sequences(seed);
        let (_, grads) = training_loss(&params, &batch)?;
        let err = check_params(&params, |p| training_loss(p, &batch).map_or(f64::NAN, |v| v.0), &grads, seed);
        out.push(GradCheck { name: "model_loss".into(), seed, rel_err: err });
    }
    let corpus = generate_corpus(3, 6, 2, 0.3)?;
    let seqs = |split| -> Result<Vec<TargetedSequence>> {
        corpus.split(split).into_iter().take(2).map(|p| training_sequence(p, 128)).collect()
    };
    let (forget, retain) = (seqs(Split::Forget)?, seqs(Split::Retain)?);
    for seed in 0..seeds {
        let params = ModelParams::init(tiny_config(), seed + 100, 0.3)?;
        let part = params.all_trainable();
        let (_, grads) = graddiff_loss(&params, &part, &forget, &retain, 0.7, None)?;
        let loss = |p: &ModelParams| graddiff_loss(p, &part, &forget, &retain, 0.7, None).map_or(f64::NAN, |v| v.0.loss);
        let err = check_params(&params, loss, &grads, seed);
        out.push(GradCheck { name: "graddiff_loss".into(), seed, rel_err: err });
    }
    Ok(out)
}
