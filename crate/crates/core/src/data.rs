//! Synthetic fictitious-entity QA corpus, byte tokenizer and next-token
//! sample conversion.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::model::TargetedSequence;

/// End-of-answer marker; the only non-byte token.
pub const EOS: usize = 256;
pub const VOCAB_SIZE: usize = 257;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Holdout => "holdout",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forget" => Ok(Split::Forget),
            "retain" => Ok(Split::Retain),
            "holdout" => Ok(Split::Holdout),
            other => Err(Error::Config {
                field: "split".into(),
                reason: format!("unknown split `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
    pub split: Split,
    #[serde(rename = "entity")]
    pub entity_id: usize,
}

/// Next-token prediction sample cut from one QA pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NtpSample {
    pub prefix: Vec<usize>,
    pub target: usize,
    /// Index of the originating pair in its corpus.
    pub pair_id: usize,
    /// Index of `target` within the answer tokens.
    pub answer_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<QaPair>,
}

struct Relation {
    question: &'static str,
    values: &'static [&'static str],
}

const RELATIONS: [Relation; 10] = [
    Relation {
        question: "Where was {} born?",
        values: &["Varna", "Oslo", "Lima", "Quito", "Perth", "Tunis", "Hanoi", "Dakar", "Riga", "Porto", "Kyoto", "Cusco"],
    },
    Relation {
        question: "What is the job of {}?",
        values: &["baker", "pilot", "sculptor", "nurse", "chemist", "tailor", "judge", "farmer", "potter", "diver", "miner", "poet"],
    },
    Relation {
        question: "What color does {} like?",
        values: &["teal", "amber", "crimson", "ivory", "olive", "violet", "coral", "indigo", "maroon", "cyan", "ochre", "jade"],
    },
    Relation {
        question: "What food does {} love?",
        values: &["figs", "ramen", "tacos", "dumplings", "paella", "curry", "pierogi", "falafel", "sushi", "gnocchi", "kimchi", "bagels"],
    },
    Relation {
        question: "What pet does {} keep?",
        values: &["a parrot", "a ferret", "a tortoise", "a gecko", "a poodle", "a hamster", "an iguana", "a rabbit", "a goldfish", "a cockatoo", "a pony", "a newt"],
    },
    Relation {
        question: "What does {} play?",
        values: &["the cello", "the oboe", "the harp", "the banjo", "the flute", "the tuba", "the sitar", "the viola", "the lute", "the drums", "the piano", "the kazoo"],
    },
    Relation {
        question: "Which sport does {} do?",
        values: &["rowing", "fencing", "curling", "judo", "archery", "polo", "squash", "cricket", "rugby", "karate", "skiing", "surfing"],
    },
    Relation {
        question: "What does {} collect?",
        values: &["stamps", "coins", "maps", "shells", "fossils", "buttons", "kites", "clocks", "teacups", "postcards", "marbles", "keys"],
    },
    Relation {
        question: "What language does {} speak?",
        values: &["Basque", "Tamil", "Czech", "Zulu", "Welsh", "Khmer", "Greek", "Malay", "Farsi", "Irish", "Thai", "Latvian"],
    },
    Relation {
        question: "What genre does {} write?",
        values: &["sonnets", "mysteries", "fables", "satire", "westerns", "thrillers", "memoirs", "haiku", "romance", "horror", "essays", "epics"],
    },
];

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "y"];
const CODAS: [&str; 6] = ["", "n", "r", "l", "x", "m"];

fn syllable(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}{}{}",
        ONSETS[rng.gen_range(0..ONSETS.len())],
        VOWELS[rng.gen_range(0..VOWELS.len())],
        CODAS[rng.gen_range(0..CODAS.len())]
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn entity_name(rng: &mut ChaCha8Rng) -> String {
    let first = capitalize(&format!("{}{}", syllable(rng), syllable(rng)));
    let last = capitalize(&format!("{}{}", syllable(rng), syllable(rng)));
    format!("{first} {last}")
}

/// Number of forget and holdout entities for a corpus of `n_entities`.
pub fn split_sizes(n_entities: usize, forget_fraction: f64) -> Result<(usize, usize, usize)> {
    if n_entities < 2 {
        return Err(Error::contract(format!("need at least 2 entities, got {n_entities}")));
    }
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(Error::contract(format!("forget_fraction {forget_fraction} outside (0,1)")));
    }
    let forget = ((n_entities as f64 * forget_fraction).round() as usize).clamp(1, n_entities - 1);
    let holdout = forget.min(n_entities - forget - 1);
    Ok((forget, holdout, n_entities - forget - holdout))
}

/// Templated facts about randomly named entities, split by entity into
/// forget, holdout and retain sets. Output is a pure function of the inputs.
pub fn generate_corpus(seed: u64, n_entities: usize, facts_per_entity: usize, forget_fraction: f64) -> Result<Corpus> {
    let (n_forget, n_holdout, _) = split_sizes(n_entities, forget_fraction)?;
    if facts_per_entity == 0 || facts_per_entity > RELATIONS.len() {
        return Err(Error::contract(format!(
            "facts_per_entity must be in 1..={}, got {facts_per_entity}",
            RELATIONS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(n_entities);
    let mut seen = BTreeSet::new();
    while names.len() < n_entities {
        let name = entity_name(&mut rng);
        // Reject names that contain, or are contained in, an earlier one.
        if seen.iter().any(|n: &String| n.contains(name.as_str()) || name.contains(n.as_str())) {
            continue;
        }
        seen.insert(name.clone());
        names.push(name);
    }
    let mut order: Vec<usize> = (0..n_entities).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Retain; n_entities];
    for &e in &order[..n_forget] {
        splits[e] = Split::Forget;
    }
    for &e in &order[n_forget..n_forget + n_holdout] {
        splits[e] = Split::Holdout;
    }
    let mut pairs = Vec::with_capacity(n_entities * facts_per_entity);
    for (e, name) in names.iter().enumerate() {
        for rel in &RELATIONS[..facts_per_entity] {
            let value = rel.values[rng.gen_range(0..rel.values.len())];
            pairs.push(QaPair {
                question: rel.question.replace("{}", name),
                answer: value.to_string(),
                split: splits[e],
                entity_id: e,
            });
        }
    }
    Ok(Corpus { pairs })
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn detokenize_bytes(ids: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            EOS => {}
            other => return Err(Error::Decode(format!("unknown token id {other}"))),
        }
    }
    Ok(out)
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    String::from_utf8(detokenize_bytes(ids)?).map_err(|e| Error::Decode(e.to_string()))
}

/// Lossy text rendering for model output.
pub fn render(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn prompt_text(question: &str) -> String {
    format!("Q: {question} A: ")
}

pub fn prompt_tokens(pair: &QaPair) -> Vec<usize> {
    tokenize(&prompt_text(&pair.question))
}

/// A pair whose tokenized form does not fit the model context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub pair_id: usize,
    pub length: usize,
    pub max_seq_len: usize,
}

/// One sample per answer token: the prefix is the prompt plus the answer
/// tokens before it. Returns `Err(SkipRecord)` for overlength pairs.
pub fn qa_to_samples(pair: &QaPair, pair_id: usize, max_seq_len: usize) -> std::result::Result<Vec<NtpSample>, SkipRecord> {
    let prompt = prompt_tokens(pair);
    let answer = tokenize(&pair.answer);
    let length = prompt.len() + answer.len();
    if length > max_seq_len {
        return Err(SkipRecord { pair_id, length, max_seq_len });
    }
    Ok(answer
        .iter()
        .enumerate()
        .map(|(j, &target)| {
            let mut prefix = prompt.clone();
            prefix.extend_from_slice(&answer[..j]);
            NtpSample { prefix, target, pair_id, answer_pos: j }
        })
        .collect())
}

/// Teacher-forced sequence for a pair: every answer token and the closing
/// EOS are targets.
pub fn training_sequence(pair: &QaPair, max_seq_len: usize) -> Result<TargetedSequence> {
    let prompt = prompt_tokens(pair);
    let answer = tokenize(&pair.answer);
    let mut tokens = prompt.clone();
    tokens.extend_from_slice(&answer);
    if tokens.len() > max_seq_len {
        return Err(Error::contract(format!("pair of {} tokens exceeds max_seq_len {max_seq_len}", tokens.len())));
    }
    let mut targets: Vec<(usize, usize)> = answer
        .iter()
        .enumerate()
        .map(|(j, &t)| (prompt.len() - 1 + j, t))
        .collect();
    targets.push((tokens.len() - 1, EOS));
    Ok(TargetedSequence { tokens, targets })
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&QaPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    /// `(pair_id, pair)` for every pair of the split.
    pub fn indexed(&self, split: Split) -> Vec<(usize, &QaPair)> {
        self.pairs.iter().enumerate().filter(|(_, p)| p.split == split).collect()
    }

    /// Next-token samples of one split plus skip records for overlength pairs.
    pub fn samples(&self, split: Split, max_seq_len: usize) -> (Vec<NtpSample>, Vec<SkipRecord>) {
        let mut samples = Vec::new();
        let mut skipped = Vec::new();
        for (id, pair) in self.indexed(split) {
            match qa_to_samples(pair, id, max_seq_len) {
                Ok(s) => samples.extend(s),
                Err(skip) => skipped.push(skip),
            }
        }
        (samples, skipped)
    }

    pub fn max_pair_len(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| prompt_tokens(p).len() + tokenize(&p.answer).len())
            .max()
            .unwrap_or(0)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_jsonl()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut pairs = Vec::new();
        for (n, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let pair: QaPair = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if pair.answer.is_empty() {
                return Err(Error::format(path, format!("line {}: empty answer", n + 1)));
            }
            pairs.push(pair);
        }
        Ok(Corpus { pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn pair(q: &str, a: &str) -> QaPair {
        QaPair {
            question: q.into(),
            answer: a.into(),
            split: Split::Forget,
            entity_id: 0,
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(7, 40, 10, 0.1).unwrap();
        let b = generate_corpus(7, 40, 10, 0.1).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let c = generate_corpus(8, 40, 10, 0.1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn desk_split_sizes() {
        let c = generate_corpus(1, 40, 10, 0.1).unwrap();
        assert_eq!(c.pairs.len(), 400);
        assert_eq!(c.split(Split::Forget).len(), 40);
        assert_eq!(c.split(Split::Holdout).len(), 40);
        assert_eq!(c.split(Split::Retain).len(), 320);
    }

    #[test]
    fn splits_are_entity_disjoint() {
        for seed in 0..5 {
            let c = generate_corpus(seed, 40, 10, 0.1).unwrap();
            let mut owner: BTreeMap<usize, Split> = BTreeMap::new();
            for p in &c.pairs {
                let prev = owner.insert(p.entity_id, p.split);
                assert!(prev.is_none() || prev == Some(p.split));
            }
        }
    }

    #[test]
    fn entity_names_do_not_leak_across_splits() {
        let c = generate_corpus(3, 40, 10, 0.1).unwrap();
        let mut names: BTreeMap<usize, (String, Split)> = BTreeMap::new();
        for p in &c.pairs {
            // The first relation template embeds the bare name.
            if let Some(name) = p.question.strip_prefix("Where was ").and_then(|s| s.strip_suffix(" born?")) {
                names.insert(p.entity_id, (name.to_string(), p.split));
            }
        }
        for (e, (name, split)) in &names {
            for p in c.pairs.iter().filter(|p| p.split != *split) {
                assert!(!p.question.contains(name.as_str()), "entity {e} leaks into {:?}", p.split);
            }
        }
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(generate_corpus(0, 1, 10, 0.1).is_err());
        assert!(generate_corpus(0, 10, 10, 0.0).is_err());
        assert!(generate_corpus(0, 10, 10, 1.0).is_err());
        assert!(generate_corpus(0, 10, 11, 0.1).is_err());
    }

    #[test]
    fn tokenizer_basics() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[]).unwrap(), "");
        assert_eq!(tokenize("AB"), vec![65, 66]);
        assert!(matches!(detokenize(&[300]), Err(Error::Decode(_))));
        assert_eq!(detokenize(&[72, 105, EOS]).unwrap(), "Hi");
    }

    #[test]
    fn random_string_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s: String = (0..1000).map(|_| char::from_u32(rng.gen_range(0x20..0x2FF)).unwrap_or('x')).collect();
        assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
    }

    #[test]
    fn one_token_answer_gives_one_sample() {
        let s = qa_to_samples(&pair("q", "x"), 0, 128).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].prefix, tokenize("Q: q A: "));
    }

    #[test]
    fn samples_grow_by_answer_token() {
        let s = qa_to_samples(&pair("hi", "abc"), 4, 128).unwrap();
        assert_eq!(s.len(), 3);
        let full = tokenize("Q: hi A: abc");
        for (j, sample) in s.iter().enumerate() {
            assert_eq!(sample.answer_pos, j);
            assert_eq!(sample.pair_id, 4);
            let mut joined = sample.prefix.clone();
            joined.push(sample.target);
            assert_eq!(&full[..joined.len()], joined.as_slice());
        }
        assert_eq!(s[2].prefix.len(), s[0].prefix.len() + 2);
    }

    #[test]
    fn sample_count_equals_answer_tokens() {
        let c = generate_corpus(5, 12, 6, 0.25).unwrap();
        for split in [Split::Forget, Split::Retain, Split::Holdout] {
            let expected: usize = c.split(split).iter().map(|p| tokenize(&p.answer).len()).sum();
            let (samples, skipped) = c.samples(split, 128);
            assert!(skipped.is_empty());
            assert_eq!(samples.len(), expected);
        }
    }

    #[test]
    fn overlength_pairs_are_skipped() {
        let err = qa_to_samples(&pair("a long question", "answer"), 2, 10).unwrap_err();
        assert_eq!(err.pair_id, 2);
        assert!(err.length > 10);
    }

    #[test]
    fn training_sequence_ends_in_eos() {
        let seq = training_sequence(&pair("q", "ab"), 64).unwrap();
        let prompt_len = tokenize("Q: q A: ").len();
        assert_eq!(seq.targets, vec![(prompt_len - 1, 97), (prompt_len, 98), (prompt_len + 1, EOS)]);
    }

    #[test]
    fn jsonl_roundtrip() {
        let c = generate_corpus(9, 6, 3, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        c.save(&path).unwrap();
        assert_eq!(Corpus::load(&path).unwrap(), c);
        let line = String::from_utf8(c.to_jsonl().unwrap()).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["q", "a", "split", "entity"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn desk_corpus_fits_context() {
        let c = generate_corpus(0, 40, 10, 0.1).unwrap();
        assert!(c.max_pair_len() <= 128);
    }
}
