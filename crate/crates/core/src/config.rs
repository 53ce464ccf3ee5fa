//! Experiment configuration: one TOML file with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::masking::MaskStrategy;
use crate::model::TransformerConfig;
use crate::optim::{AdamConfig, SophiaConfig};
use crate::unlearn::{Method, TrainConfig, UnlearnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub n_entities: usize,
    pub facts_per_entity: usize,
    pub forget_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { seed: 0, n_entities: 40, facts_per_entity: 10, forget_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub seed: u64,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = TransformerConfig::desk(VOCAB_SIZE);
        ModelSection {
            seed: 0,
            n_layers: d.n_layers,
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
            init_std: 0.05,
        }
    }
}

impl ModelSection {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: VOCAB_SIZE,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub em_bar: f64,
    pub check_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            seed: t.seed,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.adam.lr,
            em_bar: t.em_bar,
            check_every: t.check_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub seed: u64,
    /// Attribution steps.
    pub m: usize,
    /// Samples per progress unit; has no effect on the scores.
    pub batch_size: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection { seed: 0, m: 3, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub seed: u64,
    /// Relative threshold `t`.
    pub threshold: f64,
    pub strategy: MaskStrategy,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection { seed: 0, threshold: 0.3, strategy: MaskStrategy::Dual }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SophiaSection {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for SophiaSection {
    fn default() -> Self {
        let s = SophiaConfig::default();
        SophiaSection { beta1: s.beta1, beta2: s.beta2, gamma: s.gamma, eps: s.eps, weight_decay: s.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        AdamSection { beta1: a.beta1, beta2: a.beta2, eps: a.eps, weight_decay: a.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawUnlearnSection")]
pub struct UnlearnSection {
    pub seed: u64,
    pub batch_size: usize,
    /// Epochs between evaluation snapshots; 0 disables them.
    pub eval_every: usize,
    pub divergence_guard: bool,
    pub forget_ceiling: f64,
    pub sophia: SophiaSection,
    pub adam: AdamSection,
    pub fo: MethodSection,
    pub so: MethodSection,
    pub simu: MethodSection,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        let fo = UnlearnConfig::desk(Method::FoGradDiff);
        let so = UnlearnConfig::desk(Method::SoGradDiff);
        UnlearnSection {
            seed: so.seed,
            batch_size: so.batch_size,
            eval_every: so.eval_every,
            divergence_guard: so.forget_ceiling.is_some(),
            forget_ceiling: so.forget_ceiling.unwrap_or(20.0),
            sophia: SophiaSection::default(),
            adam: AdamSection::default(),
            fo: MethodSection { learning_rate: fo.adam.lr, epochs: fo.epochs, lambda: fo.lambda },
            so: MethodSection { learning_rate: so.sophia.lr, epochs: so.epochs, lambda: so.lambda },
            simu: MethodSection { learning_rate: so.sophia.lr, epochs: so.epochs, lambda: so.lambda },
        }
    }
}

/// Method sections may set any subset of their fields; the rest keep the
/// method's own defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PartialMethod {
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    lambda: Option<f64>,
}

impl PartialMethod {
    fn over(self, base: MethodSection) -> MethodSection {
        MethodSection {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            epochs: self.epochs.unwrap_or(base.epochs),
            lambda: self.lambda.unwrap_or(base.lambda),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawUnlearnSection {
    seed: u64,
    batch_size: usize,
    eval_every: usize,
    divergence_guard: bool,
    forget_ceiling: f64,
    sophia: SophiaSection,
    adam: AdamSection,
    fo: PartialMethod,
    so: PartialMethod,
    simu: PartialMethod,
}

impl Default for RawUnlearnSection {
    fn default() -> Self {
        let d = UnlearnSection::default();
        RawUnlearnSection {
            seed: d.seed,
            batch_size: d.batch_size,
            eval_every: d.eval_every,
            divergence_guard: d.divergence_guard,
            forget_ceiling: d.forget_ceiling,
            sophia: d.sophia,
            adam: d.adam,
            fo: PartialMethod::default(),
            so: PartialMethod::default(),
            simu: PartialMethod::default(),
        }
    }
}

impl From<RawUnlearnSection> for UnlearnSection {
    fn from(r: RawUnlearnSection) -> Self {
        let d = UnlearnSection::default();
        UnlearnSection {
            seed: r.seed,
            batch_size: r.batch_size,
            eval_every: r.eval_every,
            divergence_guard: r.divergence_guard,
            forget_ceiling: r.forget_ceiling,
            sophia: r.sophia,
            adam: r.adam,
            fo: r.fo.over(d.fo),
            so: r.so.over(d.so),
            simu: r.simu.over(d.simu),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Extra decode budget beyond the longest reference answer.
    pub extra_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { extra_tokens: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Output directory; the `--out` flag and `SIMU_OUT` take precedence.
    pub out_dir: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { out_dir: "runs/desk".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attribution: AttributionSection,
    pub mask: MaskSection,
    pub unlearn: UnlearnSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

fn cfg_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_else(|| "root".into());
            cfg_err(&field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialization; stable under key reordering and
    /// comments in the source file.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_entities < 2 {
            return Err(cfg_err("data.n_entities", "must be >= 2"));
        }
        if !(d.forget_fraction > 0.0 && d.forget_fraction < 1.0) {
            return Err(cfg_err("data.forget_fraction", "must lie in (0,1)"));
        }
        if d.facts_per_entity == 0 || d.facts_per_entity > 10 {
            return Err(cfg_err("data.facts_per_entity", "must lie in 1..=10"));
        }
        self.model
            .transformer()
            .validate()
            .map_err(|e| cfg_err("model", e.to_string()))?;
        if !(self.model.init_std.is_finite() && self.model.init_std > 0.0) {
            return Err(cfg_err("model.init_std", "must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(cfg_err("train.batch_size", "must be >= 1"));
        }
        if !(self.train.em_bar > 0.0 && self.train.em_bar <= 1.0) {
            return Err(cfg_err("train.em_bar", "must lie in (0,1]"));
        }
        if self.attribution.m == 0 {
            return Err(cfg_err("attribution.m", "must be >= 1"));
        }
        if !(self.mask.threshold > 0.0 && self.mask.threshold <= 1.0) {
            return Err(cfg_err("mask.threshold", "must lie in (0,1]"));
        }
        if !matches!(self.mask.strategy, MaskStrategy::Dual | MaskStrategy::ForgetOnly) {
            return Err(cfg_err("mask.strategy", "must be dual or forget_only"));
        }
        if self.unlearn.batch_size == 0 {
            return Err(cfg_err("unlearn.batch_size", "must be >= 1"));
        }
        for (name, m) in [("fo", &self.unlearn.fo), ("so", &self.unlearn.so), ("simu", &self.unlearn.simu)] {
            if !(m.learning_rate.is_finite() && m.learning_rate > 0.0) {
                return Err(cfg_err(&format!("unlearn.{name}.learning_rate"), "must be positive"));
            }
            if !(m.lambda.is_finite() && m.lambda >= 0.0) {
                return Err(cfg_err(&format!("unlearn.{name}.lambda"), "must be finite and >= 0"));
            }
        }
        self.train_config().adam.validate()?;
        for m in [Method::FoGradDiff, Method::SoGradDiff, Method::SimuGradDiff] {
            let u = self.unlearn_config(m);
            u.sophia.validate()?;
            u.adam.validate()?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.train.max_epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig { lr: self.train.learning_rate, ..AdamConfig::default() },
            seed: self.train.seed,
            init_std: self.model.init_std,
            em_bar: self.train.em_bar,
            check_every: self.train.check_every,
        }
    }

    pub fn unlearn_config(&self, method: Method) -> UnlearnConfig {
        let u = &self.unlearn;
        let ms = match method {
            Method::FoGradDiff => &u.fo,
            Method::SoGradDiff => &u.so,
            Method::SimuGradDiff => &u.simu,
        };
        UnlearnConfig {
            method,
            lambda: ms.lambda,
            epochs: ms.epochs,
            batch_size: u.batch_size,
            sophia: SophiaConfig {
                lr: ms.learning_rate,
                beta1: u.sophia.beta1,
                beta2: u.sophia.beta2,
                gamma: u.sophia.gamma,
                eps: u.sophia.eps,
                weight_decay: u.sophia.weight_decay,
            },
            adam: AdamConfig {
                lr: ms.learning_rate,
                beta1: u.adam.beta1,
                beta2: u.adam.beta2,
                eps: u.adam.eps,
                weight_decay: u.adam.weight_decay,
            },
            seed: u.seed,
            eval_every: u.eval_every,
            forget_ceiling: u.divergence_guard.then_some(u.forget_ceiling),
        }
    }

    /// Applies `--seed`: every section seed is offset by the same value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.attribution.seed = seed;
        self.mask.seed = seed;
        self.unlearn.seed = seed;
        self
    }
}

/// Default desk-scale configuration file.
pub const DESK_TOML: &str = include_str!("../configs/desk.toml");
/// Mask and unlearning hyperparameters used for 7B-parameter models.
pub const REFERENCE_TOML: &str = include_str!("../configs/reference.toml");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_desk_config_equals_default() {
        assert_eq!(ExperimentConfig::from_toml(DESK_TOML).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn reference_config_parses() {
        let c = ExperimentConfig::from_toml(REFERENCE_TOML).unwrap();
        assert_eq!(c.unlearn.fo.lambda, 0.3);
        assert_eq!(c.unlearn.simu.lambda, 2.0);
        assert_eq!(c.unlearn.batch_size, 16);
    }

    #[test]
    fn partial_method_section_keeps_other_defaults() {
        let c = ExperimentConfig::from_toml("[unlearn.fo]\nepochs = 3\n").unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(c.unlearn.fo.epochs, 3);
        assert_eq!(c.unlearn.fo.lambda, d.unlearn.fo.lambda);
        assert_eq!(c.unlearn.so, d.unlearn.so);
        assert!(ExperimentConfig::from_toml("[unlearn.so]\nlr = 1\n").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_toml("[mask]\nthreshold = 0.3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn out_of_range_reports_field() {
        match ExperimentConfig::from_toml("[mask]\nthreshold = 1.5\n").unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "mask.threshold"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = ExperimentConfig::from_toml("[mask]\nthreshold = 0.3\n").unwrap();
        let b = ExperimentConfig::from_toml("# comment\n[mask]\n threshold   = 0.30\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml("[mask]\nthreshold = 0.5\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn guard_toggle() {
        let c = ExperimentConfig::from_toml("[unlearn]\ndivergence_guard = false\n").unwrap();
        assert_eq!(c.unlearn_config(Method::SoGradDiff).forget_ceiling, None);
    }
}
