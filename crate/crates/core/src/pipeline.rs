//! File-based pipeline stages. Each stage reads its inputs from the output
//! directory, writes its artifacts there and records their content hashes
//! in `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{attribution_scores, AttributionScores};
use crate::config::ExperimentConfig;
use crate::data::{generate_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::hashing::sha256_hex;
use crate::masking::{mask_stats, merge_masks, threshold_layers, threshold_mask, MaskStrategy, MaskStats, NeuronMask};
use crate::model::{params_hash, Checkpoint};
use crate::unlearn::{run_unlearning, train_original, Method, UnlearnOutcome};

pub const CORPUS: &str = "corpus.jsonl";
pub const ORIGINAL: &str = "original.ckpt";
pub const TRAIN_LOG: &str = "train_log.json";
pub const SCORES_FORGET: &str = "scores_forget.bin";
pub const SCORES_RETAIN: &str = "scores_retain.bin";
pub const MASK: &str = "mask.bin";
pub const MASK_STATS: &str = "mask_stats.json";
pub const MANIFEST: &str = "manifest.json";

/// Evaluation targets in report order.
pub const TARGETS: [&str; 4] = ["original", "fo", "so", "simu"];

pub fn checkpoint_name(method: Method) -> String {
    format!("{}.ckpt", method.as_str())
}

pub fn run_log_name(method: Method) -> String {
    format!("run_{}.jsonl", method.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub config_hash: String,
    /// Artifact file name to content hash.
    pub artifacts: BTreeMap<String, String>,
}

/// Evaluation report with the hashes of everything it depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub target: String,
    pub config_hash: String,
    pub corpus_hash: String,
    pub model_hash: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainLog {
    config_hash: String,
    corpus_hash: String,
    model_hash: String,
    em_forget: f64,
    em_retain: f64,
    epoch_losses: Vec<f64>,
}

/// Ablated quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateParam {
    Threshold,
    Steps,
    Strategy,
}

impl std::str::FromStr for AblateParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" => Ok(AblateParam::Threshold),
            "m" => Ok(AblateParam::Steps),
            "strategy" | "mask-strategy" => Ok(AblateParam::Strategy),
            other => Err(Error::Config { field: "param".into(), reason: format!("cannot ablate `{other}` (expected t, m or strategy)") }),
        }
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    config_hash: String,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&out)?;
        let config_hash = cfg.hash();
        Ok(Pipeline { cfg, out, config_hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(Manifest { config_hash: self.config_hash.clone(), artifacts: BTreeMap::new() });
        }
        serde_json::from_slice(&std::fs::read(&p)?).map_err(|e| Error::format(&p, e.to_string()))
    }

    fn record(&self, entries: &[(String, String)]) -> Result<()> {
        let mut m = self.manifest()?;
        m.config_hash = self.config_hash.clone();
        for (k, v) in entries {
            m.artifacts.insert(k.clone(), v.clone());
        }
        write(&self.path(MANIFEST), &serde_json::to_vec_pretty(&m)?)
    }

    fn file_hash(&self, name: &str) -> Result<(String, String)> {
        Ok((name.to_string(), sha256_hex(&std::fs::read(self.path(name))?)))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.path(CORPUS))
    }

    pub fn gen_data(&self) -> Result<Corpus> {
        let d = &self.cfg.data;
        let corpus = generate_corpus(d.seed, d.n_entities, d.facts_per_entity, d.forget_fraction)?;
        corpus.save(&self.path(CORPUS))?;
        self.record(&[self.file_hash(CORPUS)?])?;
        Ok(corpus)
    }

    fn checkpoint(&self, params: crate::model::ModelParams, meta: &[(&str, String)]) -> Checkpoint {
        let mut ck = Checkpoint::new(params);
        ck.metadata.insert("config_hash".into(), self.config_hash.clone());
        for (k, v) in meta {
            ck.metadata.insert((*k).into(), v.clone());
        }
        ck
    }

    pub fn train(&self) -> Result<Checkpoint> {
        let corpus = self.load_corpus()?;
        let corpus_hash = corpus.content_hash()?;
        let mut tc = self.cfg.train_config();
        tc.seed = self.cfg.model.seed ^ self.cfg.train.seed.rotate_left(17);
        let outcome = train_original(&corpus, self.cfg.model.transformer(), &tc)?;
        let model_hash = params_hash(&outcome.params);
        let ck = self.checkpoint(
            outcome.params,
            &[("stage", "train".into()), ("corpus_hash", corpus_hash.clone())],
        );
        ck.save(&self.path(ORIGINAL))?;
        let log = TrainLog {
            config_hash: self.config_hash.clone(),
            corpus_hash,
            model_hash,
            em_forget: outcome.em_forget,
            em_retain: outcome.em_retain,
            epoch_losses: outcome.epochs.iter().map(|e| e.mean_loss).collect(),
        };
        write(&self.path(TRAIN_LOG), &serde_json::to_vec_pretty(&log)?)?;
        self.record(&[self.file_hash(ORIGINAL)?, self.file_hash(TRAIN_LOG)?])?;
        Ok(ck)
    }

    fn scores_for(&self, split: Split, m: usize) -> Result<AttributionScores> {
        let corpus = self.load_corpus()?;
        let ck = Checkpoint::load(&self.path(ORIGINAL))?;
        let (samples, _) = corpus.samples(split, ck.params.config.max_seq_len);
        let mut scores = attribution_scores(&ck.params, &samples, m)?;
        scores.header.config_hash = self.config_hash.clone();
        Ok(scores)
    }

    fn save_scores(&self, name: &str, scores: &AttributionScores) -> Result<()> {
        scores.save(&self.path(name))?;
        let csv = name.replace(".bin", ".csv");
        write(&self.path(&csv), scores.to_csv().as_bytes())?;
        self.record(&[(name.to_string(), scores.content_hash()), self.file_hash(&csv)?])
    }

    /// Forget-set scores, plus retain-set scores when the mask strategy
    /// needs them.
    pub fn attribute(&self) -> Result<AttributionScores> {
        let m = self.cfg.attribution.m;
        let scores = self.scores_for(Split::Forget, m)?;
        self.save_scores(SCORES_FORGET, &scores)?;
        if self.cfg.mask.strategy == MaskStrategy::ForgetOnly {
            let retain = self.scores_for(Split::Retain, m)?;
            self.save_scores(SCORES_RETAIN, &retain)?;
        }
        Ok(scores)
    }

    fn build_mask(&self, strategy: MaskStrategy, forget: &AttributionScores) -> Result<NeuronMask> {
        let t = self.cfg.mask.threshold;
        let fm = threshold_mask(forget, t)?;
        match strategy {
            MaskStrategy::Dual => Ok(fm),
            MaskStrategy::ForgetOnly => {
                let retain = AttributionScores::load(&self.path(SCORES_RETAIN))?;
                let rm = threshold_mask(&retain, t)?;
                merge_masks(&fm, &rm, MaskStrategy::ForgetOnly)
            }
            other => Err(Error::Config { field: "mask.strategy".into(), reason: format!("unsupported {}", other.as_str()) }),
        }
    }

    pub fn mask(&self) -> Result<(NeuronMask, MaskStats)> {
        let forget = AttributionScores::load(&self.path(SCORES_FORGET))?;
        let mut mask = self.build_mask(self.cfg.mask.strategy, &forget)?;
        mask.meta.config_hash = self.config_hash.clone();
        let stats = mask_stats(&mask);
        mask.save(&self.path(MASK))?;
        write(&self.path("mask.csv"), mask.to_csv().as_bytes())?;
        write(&self.path(MASK_STATS), &serde_json::to_vec_pretty(&stats)?)?;
        self.record(&[self.file_hash(MASK)?, self.file_hash("mask.csv")?, self.file_hash(MASK_STATS)?])?;
        Ok((mask, stats))
    }

    pub fn unlearn(&self, method: Method) -> Result<UnlearnOutcome> {
        let corpus = self.load_corpus()?;
        let original = Checkpoint::load(&self.path(ORIGINAL))?;
        let mask = match method {
            Method::SimuGradDiff => Some(NeuronMask::load(&self.path(MASK))?),
            _ => None,
        };
        if let Some(m) = &mask {
            m.check_dims(original.params.config.n_layers, original.params.config.d_model)
                .map_err(|e| Error::Config { field: "mask".into(), reason: e.to_string() })?;
        }
        let cfg = self.cfg.unlearn_config(method);
        let mut outcome = run_unlearning(&original.params, &corpus, &cfg, mask.as_ref())?;
        let name = checkpoint_name(method);
        let mut meta = vec![
            ("stage", "unlearn".to_string()),
            ("method", method.as_str().to_string()),
            ("parent_hash", params_hash(&original.params)),
            ("corpus_hash", corpus.content_hash()?),
        ];
        if let Some(m) = &mask {
            meta.push(("mask_hash", sha256_hex(&m.to_bytes()?)));
        }
        let mut ck = self.checkpoint(outcome.params.clone(), &meta);
        match &outcome.state {
            crate::unlearn::OptimizerState::Adam(s) => s.store(&mut ck),
            crate::unlearn::OptimizerState::Sophia(s) => s.store(&mut ck),
        }
        ck.save(&self.path(&name))?;
        outcome.record.checkpoint = Some(name.clone());
        let log = run_log_name(method);
        outcome.record.save(&self.path(&log))?;
        self.record(&[self.file_hash(&name)?, (log, outcome.record.content_hash())])?;
        Ok(outcome)
    }

    fn target_checkpoint(&self, target: &str) -> Result<PathBuf> {
        match target {
            "original" => Ok(self.path(ORIGINAL)),
            other => {
                let m: Method = other.parse()?;
                Ok(self.path(&checkpoint_name(m)))
            }
        }
    }

    pub fn evaluate(&self, target: &str) -> Result<EvalArtifact> {
        let corpus = self.load_corpus()?;
        let ck = Checkpoint::load(&self.target_checkpoint(target)?)?;
        let report = evaluate(&ck.params, &corpus)?;
        let art = EvalArtifact {
            target: target.to_string(),
            config_hash: self.config_hash.clone(),
            corpus_hash: corpus.content_hash()?,
            model_hash: params_hash(&ck.params),
            report,
        };
        let json = format!("eval_{target}.json");
        let csv = format!("eval_{target}.csv");
        write(&self.path(&json), &serde_json::to_vec_pretty(&art)?)?;
        write(&self.path(&csv), format!("{}\n{}\n", EvalReport::CSV_HEADER, art.report.csv_row()).as_bytes())?;
        self.record(&[self.file_hash(&json)?, self.file_hash(&csv)?])?;
        Ok(art)
    }

    /// Targets whose checkpoints exist, in report order.
    pub fn available_targets(&self) -> Vec<&'static str> {
        TARGETS
            .iter()
            .copied()
            .filter(|t| self.target_checkpoint(t).map(|p| p.exists()).unwrap_or(false))
            .collect()
    }

    /// Sweeps one mask-construction parameter and writes `ablate_<param>.csv`.
    pub fn ablate(&self, param: AblateParam, values: &[String]) -> Result<String> {
        if values.is_empty() {
            return Err(Error::Config { field: "values".into(), reason: "need at least one value".into() });
        }
        let mut csv = String::new();
        let name = match param {
            AblateParam::Threshold => {
                let forget = AttributionScores::load(&self.path(SCORES_FORGET))?;
                csv.push_str("t,total,density,per_layer\n");
                for v in values {
                    let t: f64 = v.parse().map_err(|_| Error::Config { field: "values".into(), reason: format!("bad t `{v}`") })?;
                    let layers = threshold_layers(&forget.layers, t)?;
                    let mask = NeuronMask::from_layers(layers, Default::default())?;
                    let s = mask_stats(&mask);
                    csv.push_str(&format!("{t},{},{},{}\n", s.total, s.density, join(&s.per_layer)));
                }
                "ablate_t.csv"
            }
            AblateParam::Steps => {
                let t = self.cfg.mask.threshold;
                csv.push_str("m,total,density,per_layer,jaccard_vs_first\n");
                let mut first: Option<NeuronMask> = None;
                for v in values {
                    let m: usize = v.parse().map_err(|_| Error::Config { field: "values".into(), reason: format!("bad m `{v}`") })?;
                    let scores = self.scores_for(Split::Forget, m)?;
                    let mask = threshold_mask(&scores, t)?;
                    let s = mask_stats(&mask);
                    let j = first.as_ref().map_or(1.0, |f| jaccard(f, &mask));
                    csv.push_str(&format!("{m},{},{},{},{j}\n", s.total, s.density, join(&s.per_layer)));
                    first.get_or_insert(mask);
                }
                "ablate_m.csv"
            }
            AblateParam::Strategy => {
                let corpus = self.load_corpus()?;
                let original = Checkpoint::load(&self.path(ORIGINAL))?;
                let forget = AttributionScores::load(&self.path(SCORES_FORGET))?;
                if !self.path(SCORES_RETAIN).exists() {
                    let retain = self.scores_for(Split::Retain, self.cfg.attribution.m)?;
                    self.save_scores(SCORES_RETAIN, &retain)?;
                }
                csv.push_str(&format!("strategy,total,density,{}\n", EvalReport::CSV_HEADER));
                for v in values {
                    let strategy: MaskStrategy = v.parse()?;
                    let mask = self.build_mask(strategy, &forget)?;
                    let cfg = self.cfg.unlearn_config(Method::SimuGradDiff);
                    let out = run_unlearning(&original.params, &corpus, &cfg, Some(&mask))?;
                    let report = evaluate(&out.params, &corpus)?;
                    let s = mask_stats(&mask);
                    csv.push_str(&format!("{},{},{},{}\n", strategy.as_str(), s.total, s.density, report.csv_row()));
                }
                "ablate_strategy.csv"
            }
        };
        write(&self.path(name), csv.as_bytes())?;
        self.record(&[self.file_hash(name)?])?;
        Ok(csv)
    }

    /// Markdown and CSV comparison of every evaluated target, plus neuron
    /// counts over a threshold grid when forget scores exist.
    pub fn report(&self) -> Result<String> {
        let mut arts = Vec::new();
        for t in TARGETS {
            let p = self.path(&format!("eval_{t}.json"));
            if p.exists() {
                let a: EvalArtifact = serde_json::from_slice(&std::fs::read(&p)?).map_err(|e| Error::format(&p, e.to_string()))?;
                arts.push(a);
            }
        }
        if arts.is_empty() {
            return Err(Error::MissingArtifact(self.path("eval_original.json")));
        }
        if let Some(bad) = arts.iter().find(|a| a.corpus_hash != arts[0].corpus_hash) {
            return Err(Error::Invariant(format!(
                "eval_{} was computed on a different corpus than eval_{}",
                bad.target, arts[0].target
            )));
        }
        let mut md = String::from(
            "| Method | EM forget | ROUGE-L forget | MIA | EM retain | ROUGE-L retain | Aggregate |\n|---|---|---|---|---|---|---|\n",
        );
        let mut csv = format!("method,{}\n", EvalReport::CSV_HEADER);
        for a in &arts {
            let r = &a.report;
            md.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                display_name(&a.target),
                r.em_forget,
                r.rouge_forget,
                r.mia,
                r.em_retain,
                r.rouge_retain,
                r.aggregate
            ));
            csv.push_str(&format!("{},{}\n", a.target, r.csv_row()));
        }
        let mut written = vec![];
        write(&self.path("report.csv"), csv.as_bytes())?;
        written.push(self.file_hash("report.csv")?);
        if self.path(SCORES_FORGET).exists() {
            let forget = AttributionScores::load(&self.path(SCORES_FORGET))?;
            let mut counts = String::from("t,total\n");
            md.push_str("\n| t | critical neurons |\n|---|---|\n");
            for i in 1..=9 {
                let t = i as f64 / 10.0;
                let layers = threshold_layers(&forget.layers, t)?;
                let total: usize = layers.iter().flatten().filter(|&&b| b).count();
                counts.push_str(&format!("{t},{total}\n"));
                md.push_str(&format!("| {t:.1} | {total} |\n"));
            }
            write(&self.path("threshold_counts.csv"), counts.as_bytes())?;
            written.push(self.file_hash("threshold_counts.csv")?);
        }
        write(&self.path("report.md"), md.as_bytes())?;
        written.push(self.file_hash("report.md")?);
        self.record(&written)?;
        Ok(md)
    }
}

fn display_name(target: &str) -> &str {
    match target {
        "original" => "Original",
        "fo" => "FO-GradDiff",
        "so" => "SO-GradDiff",
        "simu" => "SIMU-GradDiff",
        other => other,
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn jaccard(a: &NeuronMask, b: &NeuronMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.layers().iter().flatten().zip(b.layers().iter().flatten()) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
