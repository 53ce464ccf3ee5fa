//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simu_core::attribution::{attribution_scores, synthetic};
use simu_core::config::ExperimentConfig;
use simu_core::data::{generate_corpus, Split, VOCAB_SIZE};
use simu_core::eval::aggregate_score;
use simu_core::masking::{merge_masks, threshold_layers, MaskMeta, MaskStrategy, NeuronMask};
use simu_core::model::{
    next_token_loss_with, params_hash, record_activations, InferenceModel, InjectionSpec, ModelParams, ParamGroup,
    TransformerConfig,
};
use simu_core::pipeline::{Manifest, Pipeline};
use simu_core::selfcheck::{model_checks, primitive_checks};
use simu_core::unlearn::{run_unlearning, Method, OptimizerState, RunEvent, UnlearnConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// 1. Aggregate formula against the printed comparison table

/// `(name, printed aggregate, em_f, rouge_f, mia, em_r, rouge_r)`.
const TABLE: [(&str, f64, f64, f64, f64, f64, f64); 8] = [
    ("LLaMA2-7B Original", 0.4437, 0.8525, 0.9796, 0.7894, 0.8575, 0.9825),
    ("LLaMA2-7B FO-GradDiff", 0.4738, 0.7275, 0.5174, 0.7627, 0.7650, 0.6115),
    ("LLaMA2-7B SO-GradDiff", 0.7957, 0.1025, 0.0221, 0.2156, 0.7225, 0.5960),
    ("LLaMA2-7B SIMU-GradDiff", 0.7963, 0.2000, 0.0241, 0.2440, 0.7800, 0.6694),
    ("OLMo-1B Original", 0.4227, 0.7750, 0.8503, 0.7727, 0.7875, 0.8239),
    ("OLMo-1B FO-GradDiff", 0.7059, 0.2650, 0.0214, 0.1957, 0.6300, 0.3814),
    ("OLMo-1B SO-GradDiff", 0.8235, 0.2275, 0.0077, 0.1889, 0.7800, 0.7614),
    ("OLMo-1B SIMU-GradDiff", 0.8438, 0.1025, 0.0029, 0.1923, 0.7550, 0.7616),
];

/// The OLMo Original row prints 0.4227 but its own columns give 0.4427;
/// it is checked against the recomputed value.
const MISPRINTED: (&str, f64) = ("OLMo-1B Original", 0.4427);

fn criterion_1() -> Outcome {
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, printed, ef, rf, mia, er, rr) in TABLE {
        let got = aggregate_score(ef, rf, mia, er, rr).unwrap();
        let want = if name == MISPRINTED.0 { MISPRINTED.1 } else { printed };
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 5e-4 {
            bad.push(format!("{name}: {got:.5} vs {want}"));
        }
    }
    let ok = bad.is_empty();
    outcome(
        ok,
        format!(
            "8 rows, max |diff| {worst:.2e} (printed 0.4227 for {} checked as {}) {}",
            MISPRINTED.0,
            MISPRINTED.1,
            bad.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Attribution against a numeric-differentiation re-implementation

fn brute_force_scores(params: &ModelParams, samples: &[simu_core::data::NtpSample], m: usize) -> Vec<Vec<f64>> {
    let model = InferenceModel::new(params);
    let acts = record_activations(params, samples).unwrap();
    let (nl, d) = (params.config.n_layers, params.config.d_model);
    let loss_at = |l: usize, k: usize, i: usize, a: f64| {
        let s = &samples[i];
        let spec = InjectionSpec { layer: l, neuron: k, value: a, positions: vec![s.prefix.len() - 1] };
        next_token_loss_with(&model, s, Some(&spec)).unwrap()
    };
    let mut out = vec![vec![0.0; d]; nl];
    for (l, row) in out.iter_mut().enumerate() {
        for (k, slot) in row.iter_mut().enumerate() {
            let mut total = 0.0;
            for i in 0..samples.len() {
                let beta = acts.get(l, k, i);
                for j in 1..=m {
                    let a = j as f64 / m as f64 * beta;
                    // Five-point stencil: O(h^4) truncation keeps the
                    // derivative accurate at a step large enough to
                    // suppress rounding noise.
                    let h = 1e-3 * a.abs().max(1.0);
                    let f = |x: f64| loss_at(l, k, i, x);
                    let dl = (f(a - 2.0 * h) - 8.0 * f(a - h) + 8.0 * f(a + h) - f(a + 2.0 * h)) / (12.0 * h);
                    total += beta * dl;
                }
            }
            *slot = total / m as f64;
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let cfg = TransformerConfig { n_layers: 1, d_model: 2, n_heads: 1, d_ff: 4, vocab_size: VOCAB_SIZE, max_seq_len: 128 };
    let params = ModelParams::init(cfg, 11, 0.8).unwrap();
    let corpus = generate_corpus(5, 4, 2, 0.25).unwrap();
    let (samples, _) = corpus.samples(Split::Forget, cfg.max_seq_len);
    let samples = vec![samples[0].clone(), samples[3].clone()];
    let got = attribution_scores(&params, &samples, 2).unwrap();
    let want = brute_force_scores(&params, &samples, 2);
    let mut worst: f64 = 0.0;
    for (g, w) in got.layers.iter().flatten().zip(want.iter().flatten()) {
        worst = worst.max((g - w).abs() / w.abs().max(1e-12));
    }
    outcome(worst <= 1e-5, format!("max rel err {worst:.2e}, scores {:?}", got.layers))
}

// ---------------------------------------------------------------------------
// 3. Riemann sum on the quadratic loss

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for m in [2usize, 10, 50] {
        for beta in [-2.5, -0.3, 0.7, 1.0, 3.0] {
            let att = synthetic::score(&[beta], synthetic::Loss::Quadratic, m).unwrap();
            let gap = (att - beta * beta / 2.0).abs();
            worst = worst.max((gap - beta * beta / (2.0 * m as f64)).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max deviation {worst:.2e} for m in {{2,10,50}}"))
}

// ---------------------------------------------------------------------------
// 4. Gradient suite

fn criterion_4() -> Outcome {
    let mut checks = primitive_checks(5).unwrap();
    checks.extend(model_checks(4).unwrap());
    let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let failing: Vec<_> = checks.iter().filter(|c| !(c.rel_err <= 1e-6)).map(|c| c.name.clone()).collect();
    outcome(
        checks.len() >= 100 && failing.is_empty(),
        format!("{} cases, max rel err {worst:.2e} {}", checks.len(), failing.join(",")),
    )
}

// ---------------------------------------------------------------------------
// 5. Mask-freeze invariant

fn half_mask(n_layers: usize, width: usize, seed: u64) -> NeuronMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..n_layers)
        .map(|_| {
            let mut bits: Vec<bool> = (0..width).map(|k| k < width / 2).collect();
            bits.shuffle(&mut rng);
            bits
        })
        .collect();
    NeuronMask::from_layers(layers, MaskMeta::default()).unwrap()
}

fn criterion_5() -> Outcome {
    let corpus = generate_corpus(0, 40, 10, 0.1).unwrap();
    let original = ModelParams::init(TransformerConfig::desk(VOCAB_SIZE), 3, 0.05).unwrap();
    let mask = half_mask(4, 64, 9);
    let mut cfg = UnlearnConfig::desk(Method::SimuGradDiff);
    let per_epoch = corpus.split(Split::Forget).len().div_ceil(cfg.batch_size);
    cfg.epochs = 25usize.div_ceil(per_epoch);
    let out = run_unlearning(&original, &corpus, &cfg, Some(&mask)).unwrap();
    let steps = out.record.events.iter().filter(|e| matches!(e, RunEvent::Step { .. })).count();
    let OptimizerState::Sophia(state) = &out.state else {
        return outcome(false, "SIMU run did not use Sophia");
    };
    let mut drift = 0usize;
    let mut history = 0usize;
    let mut changed = 0usize;
    for (i, info) in original.infos().iter().enumerate() {
        let (before, after) = (original.tensors()[i].data(), out.params.tensors()[i].data());
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        match info.group {
            ParamGroup::MlpDown => {
                let l = info.layer.unwrap();
                let row = before.len() / 64;
                for k in 0..64 {
                    let r = k * row..(k + 1) * row;
                    if mask.get(l, k) {
                        changed += usize::from(!same(&before[r.clone()], &after[r]));
                    } else {
                        drift += usize::from(!same(&before[r.clone()], &after[r.clone()]));
                        let zero = |t: &[f64]| t[r.clone()].iter().all(|v| v.to_bits() == 0);
                        history += usize::from(!zero(state.m[i].data()) || !zero(state.h[i].data()));
                    }
                }
            }
            ParamGroup::AttentionProj => {}
            _ => drift += usize::from(!same(before, after)),
        }
    }
    outcome(
        steps == 25 && drift == 0 && history == 0 && changed > 0,
        format!("{steps} steps; drifted frozen tensors/rows {drift}; nonzero bit-0 history {history}; updated bit-1 rows {changed}"),
    )
}

// ---------------------------------------------------------------------------
// 6. All-ones SIMU equals SO

fn criterion_6() -> Outcome {
    let corpus = generate_corpus(0, 40, 10, 0.1).unwrap();
    let original = ModelParams::init(TransformerConfig::desk(VOCAB_SIZE), 4, 0.05).unwrap();
    let mut so = UnlearnConfig::desk(Method::SoGradDiff);
    so.epochs = 2;
    let simu = UnlearnConfig { method: Method::SimuGradDiff, ..so.clone() };
    let a = run_unlearning(&original, &corpus, &so, None).unwrap();
    let b = run_unlearning(&original, &corpus, &simu, Some(&NeuronMask::all_ones(4, 64))).unwrap();
    let ca = simu_core::model::Checkpoint::new(a.params.clone()).to_bytes().unwrap();
    let cb = simu_core::model::Checkpoint::new(b.params.clone()).to_bytes().unwrap();
    outcome(ca == cb && a.params != original, format!("checkpoint bytes equal: {}; params hash {}", ca == cb, &params_hash(&a.params)[..12]))
}

// ---------------------------------------------------------------------------
// 7. Desk-scale trend

fn criterion_7(root: &Path) -> Outcome {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let out = root.join("desk");
    let p = Pipeline::new(base.clone(), out.clone()).unwrap();
    p.gen_data().unwrap();
    p.train().unwrap();
    p.attribute().unwrap();
    p.mask().unwrap();
    let orig = p.evaluate("original").unwrap().report;
    let mut lines = vec![format!("original em_f {:.3} em_r {:.3} agg {:.4}", orig.em_forget, orig.em_retain, orig.aggregate)];
    let (mut gates, mut wins) = (orig.em_forget >= 0.95, 0);
    for seed in 0..5u64 {
        let mut cfg = base.clone();
        cfg.unlearn.seed = seed;
        let ps = Pipeline::new(cfg, out.clone()).unwrap();
        ps.unlearn(Method::SoGradDiff).unwrap();
        ps.unlearn(Method::SimuGradDiff).unwrap();
        let so = ps.evaluate("so").unwrap().report;
        let simu = ps.evaluate("simu").unwrap().report;
        gates &= simu.em_forget <= 0.20 && simu.em_retain >= 0.70;
        wins += usize::from(simu.aggregate >= so.aggregate);
        lines.push(format!(
            "seed {seed}: SIMU em_f {:.3} em_r {:.3} agg {:.4} | SO em_f {:.3} em_r {:.3} agg {:.4}",
            simu.em_forget, simu.em_retain, simu.aggregate, so.em_forget, so.em_retain, so.aggregate
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    lines.push(format!("SIMU >= SO aggregate on {wins}/5 seeds ({}); {secs:.0} s", if wins >= 3 { "met" } else { "not met" }));
    outcome(gates, lines.join("\n    "))
}

// ---------------------------------------------------------------------------
// 8. Masking properties

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let (l, w) = (rng.gen_range(1..6), rng.gen_range(1..20));
    (0..l).map(|_| (0..w).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mk = |layers| NeuronMask::from_layers(layers, MaskMeta::default()).unwrap();
    let (mut mono, mut scale, mut subset) = (0, 0, 0);
    for _ in 0..200 {
        let s = random_scores(&mut rng);
        let (a, b) = (rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        mono += usize::from(mk(threshold_layers(&s, hi).unwrap()).is_subset_of(&mk(threshold_layers(&s, lo).unwrap())));

        let l = rng.gen_range(0..s.len());
        let c = 2f64.powi(rng.gen_range(-12..12));
        let mut scaled = s.clone();
        scaled[l].iter_mut().for_each(|v| *v *= c);
        scale += usize::from(threshold_layers(&s, lo).unwrap() == threshold_layers(&scaled, lo).unwrap());

        let r: Vec<Vec<f64>> = s.iter().map(|row| row.iter().map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let fm = mk(threshold_layers(&s, lo).unwrap());
        let rm = mk(threshold_layers(&r, lo).unwrap());
        let only = merge_masks(&fm, &rm, MaskStrategy::ForgetOnly).unwrap();
        let dual = merge_masks(&fm, &rm, MaskStrategy::Dual).unwrap();
        subset += usize::from(only.is_subset_of(&dual));
    }
    outcome(
        mono == 200 && scale == 200 && subset == 200,
        format!("monotone {mono}/200, scale-invariant {scale}/200, forget_only within dual {subset}/200"),
    )
}

// ---------------------------------------------------------------------------
// 9. Determinism of the CLI pipeline

const SMALL_CONFIG: &str = r#"
[data]
n_entities = 8
facts_per_entity = 2
forget_fraction = 0.2

[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32

[train]
max_epochs = 300
batch_size = 4
learning_rate = 0.01
em_bar = 0.5
check_every = 10

[attribution]
m = 2

[unlearn.fo]
epochs = 2
[unlearn.so]
epochs = 2
[unlearn.simu]
epochs = 2
"#;

fn run_cli(config: &Path, out: &Path) -> Result<Manifest, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_simu"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("run")
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let bytes = std::fs::read(out.join("manifest.json")).map_err(|e| e.to_string())?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn criterion_9(root: &Path) -> Outcome {
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let a = run_cli(&config, &root.join("run_a"));
    let b = run_cli(&config, &root.join("run_b"));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<_> = a.artifacts.iter().filter(|(k, v)| b.artifacts.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
            outcome(
                a == b && a.artifacts.len() >= 15,
                format!("{} artifacts compared, {} differ {}", a.artifacts.len(), differing.len(), differing.join(",")),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("aggregate formula", Box::new(criterion_1)),
        ("attribution oracle", Box::new(criterion_2)),
        ("Riemann property", Box::new(criterion_3)),
        ("gradient suite", Box::new(criterion_4)),
        ("mask-freeze invariant", Box::new(criterion_5)),
        ("optimizer equivalence", Box::new(criterion_6)),
        ("desk-scale trend", Box::new(|| criterion_7(root.path()))),
        ("masking properties", Box::new(criterion_8)),
        ("determinism", Box::new(|| criterion_9(root.path()))),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "criterion {}: {} {name} ({:.1} s): {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
