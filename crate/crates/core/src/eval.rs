//! Forgetting and utility metrics: exact match, ROUGE-L, a loss-AUC
//! membership proxy, and the five-term aggregate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, Corpus, QaPair, Split, EOS};
use crate::error::{Error, Result};
use crate::model::{InferenceModel, ModelParams};
use crate::numerics::kernels;

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whitespace-normalized, case-folded equality.
pub fn exact_match(generated: &str, reference: &str) -> bool {
    normalize(generated) == normalize(reference)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-score over whitespace tokens.
pub fn rouge_l(generated: &str, reference: &str) -> f64 {
    let g: Vec<&str> = generated.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if g.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&g, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / g.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// Probability that a random member has lower loss than a random
/// non-member, ties counting one half.
pub fn mia_auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::contract("membership score needs nonempty member and non-member sets"));
    }
    if members.iter().chain(nonmembers).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("membership losses".into()));
    }
    let mut non = nonmembers.to_vec();
    non.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &x in members {
        let below = non.partition_point(|&v| v < x);
        let not_above = non.partition_point(|&v| v <= x);
        let greater = non.len() - not_above;
        wins += greater as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(wins / (members.len() as f64 * non.len() as f64))
}

/// `((1−em_f) + (1−rouge_f) + (1−mia) + em_r + rouge_r) / 5`.
pub fn aggregate_score(em_f: f64, rouge_f: f64, mia: f64, em_r: f64, rouge_r: f64) -> Result<f64> {
    for (name, v) in [("em_forget", em_f), ("rouge_forget", rouge_f), ("mia", mia), ("em_retain", em_r), ("rouge_retain", rouge_r)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("{name} = {v} outside [0,1]")));
        }
    }
    Ok(((1.0 - em_f) + (1.0 - rouge_f) + (1.0 - mia) + em_r + rouge_r) / 5.0)
}

/// Mean per-token NLL of the answer and closing EOS given the prompt.
pub fn answer_nll(model: &InferenceModel<'_>, pair: &QaPair) -> Result<f64> {
    let seq = data::training_sequence(pair, model.params().config.max_seq_len)?;
    let logits = model.logits(&seq.tokens, None)?;
    let mut total = 0.0;
    for &(p, t) in &seq.targets {
        let row = logits.row(p);
        total += kernels::log_sum_exp(row) - row[t];
    }
    Ok(total / seq.targets.len() as f64)
}

pub fn greedy_answer(model: &InferenceModel<'_>, pair: &QaPair, max_new_tokens: usize) -> Result<String> {
    let prompt = data::prompt_tokens(pair);
    let out = model.generate_greedy(&prompt, max_new_tokens, EOS)?;
    Ok(data::render(&out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub pair_id: usize,
    pub split: Split,
    pub prompt: String,
    pub reference: String,
    pub generation: Option<String>,
    pub em: Option<bool>,
    pub rouge: Option<f64>,
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub greedy: bool,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub em_forget: f64,
    pub rouge_forget: f64,
    pub mia: f64,
    pub em_retain: f64,
    pub rouge_retain: f64,
    pub aggregate: f64,
    pub generation: GenerationSettings,
    pub examples: Vec<ExampleResult>,
}

/// Exact-match rate and mean ROUGE-L of greedy answers over `pairs`.
pub fn generation_scores(model: &InferenceModel<'_>, pairs: &[&QaPair], max_new_tokens: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to evaluate"));
    }
    let (mut em, mut rouge) = (0.0, 0.0);
    for p in pairs {
        let g = greedy_answer(model, p, max_new_tokens)?;
        em += f64::from(u8::from(exact_match(&g, &p.answer)));
        rouge += rouge_l(&g, &p.answer);
    }
    Ok((em / pairs.len() as f64, rouge / pairs.len() as f64))
}

/// Answer-length budget for greedy decoding.
pub fn max_new_tokens(corpus: &Corpus) -> usize {
    corpus.pairs.iter().map(|p| data::tokenize(&p.answer).len()).max().unwrap_or(0) + 8
}

pub fn evaluate(params: &ModelParams, corpus: &Corpus) -> Result<EvalReport> {
    let model = InferenceModel::new(params);
    let max_new = max_new_tokens(corpus);
    let mut examples = Vec::new();
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 2];
    let mut members = Vec::new();
    let mut nonmembers = Vec::new();
    for (id, pair) in corpus.pairs.iter().enumerate() {
        let mut ex = ExampleResult {
            pair_id: id,
            split: pair.split,
            prompt: data::prompt_text(&pair.question),
            reference: pair.answer.clone(),
            generation: None,
            em: None,
            rouge: None,
            nll: None,
        };
        let slot = match pair.split {
            Split::Forget => Some(0),
            Split::Retain => Some(1),
            Split::Holdout => None,
        };
        if let Some(s) = slot {
            let g = greedy_answer(&model, pair, max_new)?;
            let em = exact_match(&g, &pair.answer);
            let r = rouge_l(&g, &pair.answer);
            sums[2 * s] += f64::from(u8::from(em));
            sums[2 * s + 1] += r;
            counts[s] += 1;
            ex.generation = Some(g);
            ex.em = Some(em);
            ex.rouge = Some(r);
        }
        if pair.split != Split::Retain {
            let nll = answer_nll(&model, pair)?;
            if pair.split == Split::Forget {
                members.push(nll);
            } else {
                nonmembers.push(nll);
            }
            ex.nll = Some(nll);
        }
        examples.push(ex);
    }
    if counts[0] == 0 || counts[1] == 0 || nonmembers.is_empty() {
        return Err(Error::contract("evaluation needs forget, retain and holdout pairs"));
    }
    let em_forget = sums[0] / counts[0] as f64;
    let rouge_forget = sums[1] / counts[0] as f64;
    let em_retain = sums[2] / counts[1] as f64;
    let rouge_retain = sums[3] / counts[1] as f64;
    let mia = mia_auc(&members, &nonmembers)?;
    Ok(EvalReport {
        aggregate: aggregate_score(em_forget, rouge_forget, mia, em_retain, rouge_retain)?,
        em_forget,
        rouge_forget,
        mia,
        em_retain,
        rouge_retain,
        generation: GenerationSettings { greedy: true, max_new_tokens: max_new },
        examples,
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "em_forget,rouge_forget,mia,em_retain,rouge_retain,aggregate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.em_forget, self.rouge_forget, self.mia, self.em_retain, self.rouge_retain, self.aggregate
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Published benchmark rows: (em_f, rouge_f, mia, em_r, rouge_r, printed aggregate).
    const TABLE_ROWS: [(f64, f64, f64, f64, f64, f64); 2] = [
        (0.265, 0.0214, 0.1957, 0.63, 0.3814, 0.7059),
        (0.1025, 0.0221, 0.2156, 0.7225, 0.5960, 0.7957),
    ];

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("Paris", "Paris"));
        assert!(!exact_match("Paris", "London"));
        assert!(exact_match("  paris ", "Paris"));
        assert!(exact_match("a  b\tc", "A B C"));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cello", "the cello"), 1.0);
        assert!((rouge_l("a c", "a b c") - 0.8).abs() < 1e-15);
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
        assert_eq!(rouge_l("a b c", "a c"), rouge_l("a c", "a b c"));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(mia_auc(&[1.0; 4], &[2.0; 3]).unwrap(), 1.0);
        assert_eq!(mia_auc(&[2.0; 4], &[1.0; 3]).unwrap(), 0.0);
        let x = [0.3, 1.2, 1.2, 5.0];
        assert_eq!(mia_auc(&x, &x).unwrap(), 0.5);
        assert!(mia_auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn aggregate_rows() {
        for (a, b, c, d, e, printed) in TABLE_ROWS {
            assert!((aggregate_score(a, b, c, d, e).unwrap() - printed).abs() < 5e-4);
        }
        assert_eq!(aggregate_score(0.0, 0.0, 0.0, 1.0, 1.0).unwrap(), 1.0);
        assert!(aggregate_score(1.2, 0.0, 0.0, 1.0, 1.0).is_err());
    }
}
