//! Whitespace tokenizer, vocabulary files, corpus I/O and synthetic corpora.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
/// Number of reserved ids at the front of every vocabulary.
pub const RESERVED: usize = 3;

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const UNK: &str = "[UNK]";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `tokens` in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut all: Vec<String> = vec![PAD.into(), MASK.into(), UNK.into()];
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// JSON object `{token: id}` (keys sorted, so output is canonical).
    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: HashMap<String, usize> = serde_json::from_str(s)?;
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::Input(format!("vocabulary ids must be dense and unique (id {id})"))),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense ids")).collect();
        if tokens.len() < RESERVED || tokens[PAD_ID] != PAD || tokens[MASK_ID] != MASK || tokens[UNK_ID] != UNK {
            return Err(Error::Input(format!("vocabulary must reserve ids 0..3 for {PAD}, {MASK}, {UNK}")));
        }
        Vocab::from_tokens(tokens.into_iter().skip(RESERVED))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&s)
    }
}

/// Frequency-ranked vocabulary of at most `max_size` ids (reserved included);
/// ties broken lexicographically.
pub fn build_vocab_from_text(text: &str, max_size: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in text.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Input("corpus contains no tokens".into()));
    }
    if max_size <= RESERVED {
        return Err(Error::Config(format!("max_size must exceed the {RESERVED} reserved ids, got {max_size}")));
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, _)| ![PAD, MASK, UNK].contains(w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED);
    Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w.to_string()))
}

pub fn build_vocab(corpus: &Path, max_size: usize) -> Result<Vocab> {
    let text = std::fs::read_to_string(corpus).map_err(|e| Error::io(corpus, e))?;
    build_vocab_from_text(&text, max_size)
}

/// Whitespace split, unknown words to `[UNK]`, then truncated or padded to `max_seq`.
pub fn encode(text: &str, vocab: &Vocab, max_seq: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = text.split_whitespace().take(max_seq).map(|w| vocab.id(w)).collect();
    ids.resize(max_seq, PAD_ID);
    ids
}

/// Inverse of [`encode`] with padding dropped.
pub fn decode(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i != PAD_ID)
        .map(|&i| vocab.token(i).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One document per non-empty line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

pub fn encode_corpus(docs: &[String], vocab: &Vocab, max_seq: usize) -> Vec<Vec<usize>> {
    docs.iter().map(|d| encode(d, vocab, max_seq)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TwoSublanguage,
    CopyPattern,
}

fn d_branching() -> usize {
    3
}
fn d_pattern() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: TaskKind,
    /// Distinct tokens per source (two_sublanguage) or in total (copy_pattern).
    pub tokens_per_source: usize,
    pub seq_len: usize,
    /// Probability that a two_sublanguage document comes from source A.
    #[serde(default = "half")]
    pub mixture: f64,
    /// Successors per token in each source's bigram chain.
    #[serde(default = "d_branching")]
    pub branching: usize,
    /// Repeated unit length for copy_pattern.
    #[serde(default = "d_pattern")]
    pub pattern_len: usize,
    pub seed: u64,
}

fn half() -> f64 {
    0.5
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_source < 2 || self.seq_len == 0 {
            return Err(Error::Config("tokens_per_source must be >= 2 and seq_len >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mixture) {
            return Err(Error::Config(format!("mixture must be in [0, 1], got {}", self.mixture)));
        }
        if self.branching == 0 || self.branching > self.tokens_per_source {
            return Err(Error::Config(format!(
                "branching must be in 1..={}, got {}",
                self.tokens_per_source, self.branching
            )));
        }
        if self.pattern_len == 0 {
            return Err(Error::Config("pattern_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// A first-order Markov source over its own token names.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSource {
    pub tokens: Vec<String>,
    /// `transitions[i]` lists `(successor, probability)`.
    pub transitions: Vec<Vec<(usize, f64)>>,
}

impl MarkovSource {
    fn random<R: Rng + ?Sized>(prefix: &str, n: usize, branching: usize, rng: &mut R) -> Self {
        let tokens = (0..n).map(|i| format!("{prefix}{i}")).collect();
        let transitions = (0..n)
            .map(|_| {
                let succ = rand::seq::index::sample(rng, n, branching).into_vec();
                let raw: Vec<f64> = (0..branching).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                succ.into_iter().zip(raw).map(|(s, w)| (s, w / total)).collect()
            })
            .collect();
        MarkovSource { tokens, transitions }
    }

    fn sample_doc<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut cur = rng.random_range(0..self.tokens.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(cur);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let row = &self.transitions[cur];
            cur = row[row.len() - 1].0;
            for &(s, p) in row {
                acc += p;
                if u < acc {
                    cur = s;
                    break;
                }
            }
        }
        out
    }

    /// Transition probability `i → j`.
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.transitions[i].iter().find(|(s, _)| *s == j).map_or(0.0, |(_, p)| *p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub docs: Vec<String>,
    /// Source index of each document (always 0 for copy_pattern).
    pub sources: Vec<usize>,
    pub markov: Vec<MarkovSource>,
}

/// Generates `n_samples` documents. Fully determined by `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec, n_samples: usize) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        TaskKind::TwoSublanguage => {
            let markov = vec![
                MarkovSource::random("a", spec.tokens_per_source, spec.branching, &mut rng),
                MarkovSource::random("b", spec.tokens_per_source, spec.branching, &mut rng),
            ];
            let mut docs = Vec::with_capacity(n_samples);
            let mut sources = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let s = usize::from(rng.random::<f64>() >= spec.mixture);
                let ids = markov[s].sample_doc(spec.seq_len, &mut rng);
                docs.push(ids.iter().map(|&i| markov[s].tokens[i].as_str()).collect::<Vec<_>>().join(" "));
                sources.push(s);
            }
            Ok(SyntheticCorpus { docs, sources, markov })
        }
        TaskKind::CopyPattern => {
            let docs = (0..n_samples)
                .map(|_| {
                    let pattern: Vec<usize> = (0..spec.pattern_len)
                        .map(|_| rng.random_range(0..spec.tokens_per_source))
                        .collect();
                    (0..spec.seq_len)
                        .map(|i| format!("c{}", pattern[i % spec.pattern_len]))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            Ok(SyntheticCorpus {
                docs,
                sources: vec![0; n_samples],
                markov: Vec::new(),
            })
        }
    }
}

/// Vocabulary holding every token a spec can emit, in a fixed order.
pub fn synthetic_vocab(spec: &SyntheticSpec) -> Result<Vocab> {
    let names: Vec<String> = match spec.kind {
        TaskKind::TwoSublanguage => ["a", "b"]
            .iter()
            .flat_map(|p| (0..spec.tokens_per_source).map(move |i| format!("{p}{i}")))
            .collect(),
        TaskKind::CopyPattern => (0..spec.tokens_per_source).map(|i| format!("c{i}")).collect(),
    };
    Vocab::from_tokens(names)
}
