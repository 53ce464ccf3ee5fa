//! Standard training of the original model and GradDiff unlearning with
//! first-order, second-order and masked second-order optimizers.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Corpus, QaPair, Split};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::hashing::sha256_hex;
use crate::masking::NeuronMask;
use crate::model::{batch_loss, BoundParams, InferenceModel, ModelParams, ParamPartition, TargetedSequence};
use crate::numerics::{Graph, Tensor};
use crate::optim::{adam_step, masked_sophia_step, sophia_step, AdamConfig, AdamState, SophiaConfig, SophiaState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fo")]
    FoGradDiff,
    #[serde(rename = "so")]
    SoGradDiff,
    #[serde(rename = "simu")]
    SimuGradDiff,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FoGradDiff => "fo",
            Method::SoGradDiff => "so",
            Method::SimuGradDiff => "simu",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fo" | "fo-graddiff" => Ok(Method::FoGradDiff),
            "so" | "so-graddiff" => Ok(Method::SoGradDiff),
            "simu" | "simu-graddiff" => Ok(Method::SimuGradDiff),
            other => Err(Error::Config { field: "method".into(), reason: format!("unknown method `{other}`") }),
        }
    }
}

fn shuffled<T: Clone>(items: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

fn sequences(pairs: &[&QaPair], max_seq_len: usize) -> Result<Vec<TargetedSequence>> {
    pairs.iter().map(|p| data::training_sequence(p, max_seq_len)).collect()
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config { field: "batch_size".into(), reason: "must be >= 1".into() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Original model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound on epochs; training stops once the bar is met.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub init_std: f64,
    /// Required exact-match rate on both forget and retain pairs.
    pub em_bar: f64,
    /// Epochs between memorization checks.
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 150,
            batch_size: 16,
            adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            seed: 0,
            init_std: 0.05,
            em_bar: 0.95,
            check_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochStat>,
    pub em_forget: f64,
    pub em_retain: f64,
}

/// Trains on every forget and retain pair (holdout pairs stay unseen) until
/// greedy answers reach the exact-match bar on both splits.
pub fn train_original(corpus: &Corpus, model_cfg: crate::model::TransformerConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_batch_size(cfg.batch_size)?;
    cfg.adam.validate()?;
    let mut params = ModelParams::init(model_cfg, cfg.seed, cfg.init_std)?;
    let seen: Vec<&QaPair> = corpus.pairs.iter().filter(|p| p.split != Split::Holdout).collect();
    if seen.is_empty() {
        return Err(Error::contract("no training pairs"));
    }
    let forget = corpus.split(Split::Forget);
    let retain = corpus.split(Split::Retain);
    let seqs = sequences(&seen, model_cfg.max_seq_len)?;
    let partition = params.all_trainable();
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let max_new = eval::max_new_tokens(corpus);
    let mut epochs = Vec::new();
    let (mut em_f, mut em_r) = (0.0, 0.0);
    for epoch in 0..cfg.max_epochs {
        let order = shuffled(&seqs, &mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_grads(&params, &partition, |g, bp| batch_loss(g, bp, &params.config, batch))?;
            adam_step(&mut params, &grads, &mut state, &cfg.adam)?;
            total += loss;
            steps += 1;
        }
        epochs.push(EpochStat { epoch, mean_loss: total / steps as f64 });
        let last = epoch + 1 == cfg.max_epochs;
        if (epoch + 1) % cfg.check_every.max(1) == 0 || last {
            let model = InferenceModel::new(&params);
            em_f = if forget.is_empty() { 1.0 } else { eval::generation_scores(&model, &forget, max_new)?.0 };
            em_r = if retain.is_empty() { 1.0 } else { eval::generation_scores(&model, &retain, max_new)?.0 };
            if em_f >= cfg.em_bar && em_r >= cfg.em_bar {
                return Ok(TrainOutcome { params, epochs, em_forget: em_f, em_retain: em_r });
            }
        }
    }
    Err(Error::Training(format!(
        "memorization bar {} not reached after {} epochs: forget EM {em_f:.4}, retain EM {em_r:.4}, final epoch loss {:.4}",
        cfg.em_bar,
        cfg.max_epochs,
        epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    )))
}

/// Records a loss on a fresh graph, backpropagates it and returns its value
/// with one gradient slot per parameter (`None` where frozen).
pub fn loss_and_grads(
    params: &ModelParams,
    partition: &ParamPartition,
    build: impl FnOnce(&mut Graph, &BoundParams) -> Result<crate::numerics::Var>,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, params, partition);
    let loss = build(&mut g, &bp)?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0], bp.grads(&g)))
}

// ---------------------------------------------------------------------------
// GradDiff

/// Loss value and its parts for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradDiffParts {
    pub forget_ce: f64,
    pub retain_ce: f64,
    pub loss: f64,
    /// The ascent term was dropped because forget CE exceeded the ceiling.
    pub ascent_dropped: bool,
}

/// `mean retain CE − λ·mean forget CE` on the graph. The forget term is
/// recorded first. With a `ceiling`, a forget CE above it drops the ascent
/// term for this evaluation.
pub fn graddiff_graph(
    g: &mut Graph,
    bp: &BoundParams,
    params: &ModelParams,
    forget: &[TargetedSequence],
    retain: &[TargetedSequence],
    lambda: f64,
    ceiling: Option<f64>,
) -> Result<(crate::numerics::Var, GradDiffParts)> {
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::contract("GradDiff needs nonempty forget and retain batches"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config { field: "lambda".into(), reason: format!("{lambda} must be finite and >= 0") });
    }
    let f = batch_loss(g, bp, &params.config, forget)?;
    let r = batch_loss(g, bp, &params.config, retain)?;
    let forget_ce = g.value(f).data()[0];
    let retain_ce = g.value(r).data()[0];
    let ascent_dropped = ceiling.is_some_and(|c| forget_ce > c);
    let loss = if ascent_dropped {
        r
    } else {
        let scaled = g.scale(f, lambda)?;
        g.sub(r, scaled)?
    };
    let value = g.value(loss).data()[0];
    Ok((loss, GradDiffParts { forget_ce, retain_ce, loss: value, ascent_dropped }))
}

/// GradDiff loss of one forget/retain batch pair with its gradients.
pub fn graddiff_loss(
    params: &ModelParams,
    partition: &ParamPartition,
    forget: &[TargetedSequence],
    retain: &[TargetedSequence],
    lambda: f64,
    ceiling: Option<f64>,
) -> Result<(GradDiffParts, Vec<Option<Tensor>>)> {
    let mut parts = None;
    let (_, grads) = loss_and_grads(params, partition, |g, bp| {
        let (loss, p) = graddiff_graph(g, bp, params, forget, retain, lambda, ceiling)?;
        parts = Some(p);
        Ok(loss)
    })?;
    Ok((parts.expect("loss recorded"), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sophia: SophiaConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Epochs between evaluation snapshots; 0 disables them.
    pub eval_every: usize,
    /// Forget CE above which the ascent term is dropped for a step.
    pub forget_ceiling: Option<f64>,
}

impl UnlearnConfig {
    pub fn desk(method: Method) -> Self {
        UnlearnConfig {
            method,
            lambda: if method == Method::FoGradDiff { 0.3 } else { 0.5 },
            epochs: 50,
            batch_size: 8,
            sophia: SophiaConfig { lr: 1e-4, ..SophiaConfig::default() },
            adam: AdamConfig { lr: 1e-4, ..AdamConfig::default() },
            seed: 0,
            eval_every: 10,
            forget_ceiling: Some(20.0),
        }
    }

    pub fn validate(&self, mask: Option<&NeuronMask>) -> Result<()> {
        check_batch_size(self.batch_size)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config { field: "lambda".into(), reason: format!("{} must be finite and >= 0", self.lambda) });
        }
        if let Some(c) = self.forget_ceiling {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config { field: "forget_ceiling".into(), reason: format!("{c} must be positive") });
            }
        }
        match (self.method, mask) {
            (Method::SimuGradDiff, None) => Err(Error::Config { field: "mask".into(), reason: "SIMU needs a mask".into() }),
            (Method::FoGradDiff | Method::SoGradDiff, Some(_)) => {
                Err(Error::Config { field: "mask".into(), reason: format!("{} takes no mask", self.method.as_str()) })
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub em_forget: f64,
    pub rouge_forget: f64,
    pub mia: f64,
    pub em_retain: f64,
    pub rouge_retain: f64,
    pub aggregate: f64,
}

impl From<&EvalReport> for MetricSnapshot {
    fn from(r: &EvalReport) -> Self {
        MetricSnapshot {
            em_forget: r.em_forget,
            rouge_forget: r.rouge_forget,
            mia: r.mia,
            em_retain: r.em_retain,
            rouge_retain: r.rouge_retain,
            aggregate: r.aggregate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Step {
        step: usize,
        epoch: usize,
        #[serde(flatten)]
        parts: GradDiffParts,
    },
    Eval {
        step: usize,
        epoch: usize,
        #[serde(flatten)]
        metrics: MetricSnapshot,
    },
}

/// Append-only log of one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config_hash: String,
    pub events: Vec<RunEvent>,
    /// Milliseconds since run start for each event; not part of the hash.
    pub elapsed_ms: Vec<u64>,
    pub wall_clock_ms: u64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    fn push(&mut self, event: RunEvent, start: &Instant) {
        self.events.push(event);
        self.elapsed_ms.push(start.elapsed().as_millis() as u64);
    }

    pub fn guard_events(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, RunEvent::Step { parts, .. } if parts.ascent_dropped))
            .count()
    }

    /// Hash of method, config hash and events; timings are excluded.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_vec(&(&self.method, &self.config_hash, &self.events)).expect("record serializes");
        sha256_hex(&body)
    }

    /// One JSON object per line: a header, then one line per event.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        serde_json::to_writer(
            &mut out,
            &serde_json::json!({
                "event": "header",
                "method": self.method,
                "config_hash": self.config_hash,
                "wall_clock_ms": self.wall_clock_ms,
                "checkpoint": self.checkpoint,
            }),
        )?;
        out.push(b'\n');
        for (e, ms) in self.events.iter().zip(&self.elapsed_ms) {
            let mut v = serde_json::to_value(e)?;
            v["elapsed_ms"] = serde_json::json!(ms);
            serde_json::to_writer(&mut out, &v)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_jsonl()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Adam(AdamState),
    Sophia(SophiaState),
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub params: ModelParams,
    pub record: RunRecord,
    pub state: OptimizerState,
}

pub fn config_hash(cfg: &UnlearnConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

/// Epochs over shuffled forget batches, each paired with the next batch of
/// a cycling retain stream.
pub fn run_unlearning(original: &ModelParams, corpus: &Corpus, cfg: &UnlearnConfig, mask: Option<&NeuronMask>) -> Result<UnlearnOutcome> {
    cfg.validate(mask)?;
    let start = Instant::now();
    let max_len = original.config.max_seq_len;
    let forget = sequences(&corpus.split(Split::Forget), max_len)?;
    let retain = sequences(&corpus.split(Split::Retain), max_len)?;
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::contract("unlearning needs forget and retain pairs"));
    }
    let partition = original.parameter_groups(mask)?;
    let mut params = original.clone();
    let mut state = match cfg.method {
        Method::FoGradDiff => OptimizerState::Adam(AdamState::new(&params)),
        _ => OptimizerState::Sophia(SophiaState::new(&params)),
    };
    let mut record = RunRecord {
        method: cfg.method,
        config_hash: config_hash(cfg),
        events: Vec::new(),
        elapsed_ms: Vec::new(),
        wall_clock_ms: 0,
        checkpoint: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut retain_order = shuffled(&retain, &mut rng);
    let mut retain_pos = 0;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(&forget, &mut rng);
        for fb in order.chunks(cfg.batch_size) {
            let mut rb = Vec::with_capacity(cfg.batch_size);
            while rb.len() < cfg.batch_size {
                if retain_pos == retain_order.len() {
                    retain_order = shuffled(&retain, &mut rng);
                    retain_pos = 0;
                }
                rb.push(retain_order[retain_pos].clone());
                retain_pos += 1;
            }
            let (parts, grads) = graddiff_loss(&params, &partition, fb, &rb, cfg.lambda, cfg.forget_ceiling)?;
            match &mut state {
                OptimizerState::Adam(s) => adam_step(&mut params, &grads, s, &cfg.adam)?,
                OptimizerState::Sophia(s) => match mask {
                    Some(m) => masked_sophia_step(&mut params, &grads, s, &cfg.sophia, m)?,
                    None => sophia_step(&mut params, &grads, s, &cfg.sophia)?,
                },
            }
            record.push(RunEvent::Step { step, epoch, parts }, &start);
            step += 1;
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            let report = eval::evaluate(&params, corpus)?;
            record.push(RunEvent::Eval { step, epoch, metrics: MetricSnapshot::from(&report) }, &start);
        }
    }
    let violations = freeze_violations(original, &params, &partition);
    if !violations.is_empty() {
        return Err(Error::Invariant(format!("frozen parameters changed: {}", violations.join(", "))));
    }
    if let (OptimizerState::Sophia(s), Some(m)) = (&state, mask) {
        let dirty = masked_state_violations(&params, s, m);
        if !dirty.is_empty() {
            return Err(Error::Invariant(format!("optimizer state moved on masked rows: {}", dirty.join(", "))));
        }
    }
    record.wall_clock_ms = start.elapsed().as_millis() as u64;
    Ok(UnlearnOutcome { params, record, state })
}

/// Names of tensors with a changed element that the partition forbids
/// from changing. Comparison is bitwise.
pub fn freeze_violations(before: &ModelParams, after: &ModelParams, partition: &ParamPartition) -> Vec<String> {
    let mut out = Vec::new();
    for (((info, rule), a), b) in partition.entries.iter().zip(before.tensors()).zip(after.tensors()) {
        let allowed = rule.element_mask(a.len(), a.shape()[0]);
        let changed = a
            .data()
            .iter()
            .zip(b.data())
            .zip(&allowed)
            .any(|((x, y), &ok)| !ok && x.to_bits() != y.to_bits());
        if changed {
            out.push(info.name.clone());
        }
    }
    out
}

/// Down-projection tensors whose Sophia moments are nonzero on a row with
/// mask bit 0. Starting from zero state, masked rows must never move.
pub fn masked_state_violations(params: &ModelParams, state: &SophiaState, mask: &NeuronMask) -> Vec<String> {
    let mut out = Vec::new();
    for (i, info) in params.infos().iter().enumerate() {
        if info.group != crate::model::ParamGroup::MlpDown {
            continue;
        }
        let rows = mask.layer(info.layer.expect("layer param"));
        let per_row = state.m[i].len() / rows.len();
        let moved = (0..state.m[i].len())
            .any(|j| !rows[j / per_row] && (state.m[i].data()[j].to_bits() != 0 || state.h[i].data()[j].to_bits() != 0));
        if moved {
            out.push(info.name.clone());
        }
    }
    out
}
