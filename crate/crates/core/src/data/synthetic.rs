//! Synthetic cross-modal corpora whose targets are closed-form functions of
//! their sources.
//!
//! For every example, with `map` the configured mapping:
//!
//! * `answer  = map(question)`
//! * `caption = map(visual source)`; the visual features are the source's
//!   tokens (and its `<eos>`) as one-hot rows of width `vocab_size` plus
//!   Gaussian noise
//! * `summary = map(last word of each history turn)`
//! * audio rows are pure noise
//!
//! Question sources never repeat within or across splits.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::corpus::{write_corpus, CorpusRecord, FeatureMap, Modality};
use crate::data::vocab::{Vocabulary, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::seq2seq::{Source, TranslationPair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingKind {
    Permutation,
    Reversal,
    PermutationReversal,
}

impl FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permutation" => Ok(MappingKind::Permutation),
            "reversal" => Ok(MappingKind::Reversal),
            "permutation-reversal" => Ok(MappingKind::PermutationReversal),
            other => Err(Error::Config(format!(
                "unknown mapping `{other}` (expected permutation, reversal or permutation-reversal)"
            ))),
        }
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingKind::Permutation => "permutation",
            MappingKind::Reversal => "reversal",
            MappingKind::PermutationReversal => "permutation-reversal",
        })
    }
}

/// A bijection on content-token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mapping {
    kind: MappingKind,
    /// `table[id]` is the image of token `id`; reserved ids map to themselves.
    table: Vec<usize>,
}

impl Mapping {
    pub fn new(kind: MappingKind, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut table: Vec<usize> = (0..vocab_size).collect();
        if kind != MappingKind::Reversal {
            table[RESERVED.len()..].shuffle(rng);
        }
        Mapping { kind, table }
    }

    /// Mapping with an explicit token table.
    pub fn from_table(kind: MappingKind, table: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; table.len()];
        for (i, &t) in table.iter().enumerate() {
            if t >= table.len() || seen[t] || (i < RESERVED.len() && t != i) {
                return Err(Error::Config("mapping table is not a bijection fixing reserved ids".into()));
            }
            seen[t] = true;
        }
        Ok(Mapping { kind, table })
    }

    pub fn kind(&self) -> MappingKind {
        self.kind
    }

    pub fn table(&self) -> &[usize] {
        &self.table
    }

    /// Image of a content sequence (no `<eos>`).
    pub fn apply(&self, source: &[usize]) -> Vec<usize> {
        let permuted = source.iter().map(|&t| self.table[t]);
        match self.kind {
            MappingKind::Permutation => permuted.collect(),
            MappingKind::Reversal | MappingKind::PermutationReversal => {
                let mut v: Vec<usize> = permuted.collect();
                v.reverse();
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub mapping: MappingKind,
    /// Standard deviation of the noise added to one-hot visual rows.
    pub noise: f64,
    pub max_history: usize,
    /// Width of the audio noise rows; 0 omits audio.
    pub audio_dim: usize,
    pub audio_frames: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 50,
            min_len: 4,
            max_len: 10,
            mapping: MappingKind::PermutationReversal,
            noise: 0.1,
            max_history: 3,
            audio_dim: 8,
            audio_frames: 4,
            train: 5000,
            valid: 200,
            test: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let content = self.vocab_size.saturating_sub(RESERVED.len());
        if content < 2 {
            return Err(Error::Config(format!("vocab_size {} leaves too few content tokens", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "source length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.audio_dim > 0 && self.audio_frames == 0 {
            return Err(Error::Config("audio_frames must be at least 1 when audio is enabled".into()));
        }
        let distinct: f64 = (self.min_len..=self.max_len).map(|l| (content as f64).powi(l as i32)).sum();
        let wanted = (self.train + self.valid + self.test) as f64;
        if wanted > distinct / 2.0 {
            return Err(Error::Config(format!(
                "{wanted} unique sources requested but only {distinct} exist"
            )));
        }
        Ok(())
    }

    pub fn mapping(&self) -> Mapping {
        Mapping::new(self.mapping, self.vocab_size, &mut keyed_rng(self.seed, "synthetic.mapping"))
    }
}

pub fn spell(tokens: &[usize]) -> String {
    tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ")
}

/// `[len + 1, vocab]` one-hot rows of `tokens` and a final `<eos>` row,
/// plus noise.
pub fn render_one_hot(tokens: &[usize], vocab_size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, noise).expect("noise validated");
    let rows = tokens.len() + 1;
    let mut data = vec![0.0; rows * vocab_size];
    for (r, &t) in tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
        data[r * vocab_size + t] = 1.0;
    }
    if noise > 0.0 {
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    Tensor::new(&[rows, vocab_size], data).expect("sized above")
}

struct Sampler<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    used: HashSet<Vec<usize>>,
}

impl Sampler<'_> {
    fn sequence(&mut self, min: usize, max: usize) -> Vec<usize> {
        let len = self.rng.random_range(min..=max);
        (0..len)
            .map(|_| self.rng.random_range(RESERVED.len()..self.spec.vocab_size))
            .collect()
    }

    fn unique_source(&mut self) -> Vec<usize> {
        loop {
            let s = self.sequence(self.spec.min_len, self.spec.max_len);
            if self.used.insert(s.clone()) {
                return s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub records: Vec<CorpusRecord>,
    pub features: FeatureMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub mapping: Mapping,
    pub vocab: Vocabulary,
    pub train: SyntheticSplit,
    pub valid: SyntheticSplit,
    pub test: SyntheticSplit,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mapping = spec.mapping();
    let mut sampler = Sampler {
        spec,
        rng: keyed_rng(spec.seed, "synthetic.examples"),
        used: HashSet::new(),
    };
    let audio_noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut split = |name: &str, count: usize| -> SyntheticSplit {
        let mut records = Vec::with_capacity(count);
        let mut features = FeatureMap::new();
        for i in 0..count {
            let id = format!("{name}-{i}");
            let question = sampler.unique_source();
            let visual = sampler.sequence(spec.min_len, spec.max_len);
            let turns = sampler.rng.random_range(0..=spec.max_history);
            let history: Vec<Vec<usize>> = (0..turns).map(|_| sampler.sequence(2, 5)).collect();
            let last_words: Vec<usize> = history.iter().map(|h| *h.last().expect("turns are non-empty")).collect();
            let rendered = render_one_hot(&visual, spec.vocab_size, spec.noise, &mut sampler.rng);
            features.insert((id.clone(), Modality::Visual), rendered);
            if spec.audio_dim > 0 {
                let n = spec.audio_frames * spec.audio_dim;
                let data = (0..n).map(|_| audio_noise.sample(&mut sampler.rng)).collect();
                let audio = Tensor::new(&[spec.audio_frames, spec.audio_dim], data).expect("sized above");
                features.insert((id.clone(), Modality::Audio), audio);
            }
            records.push(CorpusRecord {
                id,
                history: history.iter().map(|h| spell(h)).collect(),
                question: spell(&question),
                caption: spell(&mapping.apply(&visual)),
                summary: spell(&mapping.apply(&last_words)),
                answer: spell(&mapping.apply(&question)),
                references: Vec::new(),
                visual: None,
                audio: None,
            });
        }
        SyntheticSplit { records, features }
    };
    let train = split("train", spec.train);
    let valid = split("valid", spec.valid);
    let test = split("test", spec.test);
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        mapping,
        vocab: Vocabulary::synthetic(spec.vocab_size)?,
        train,
        valid,
        test,
    })
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Writes `vocab.txt`, `mapping.txt` (`source image` per line) and
/// `{train,valid,test}.jsonl` with their feature sidecars into `dir`.
pub fn write_synthetic(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    let mapping: String = corpus
        .mapping
        .table()
        .iter()
        .enumerate()
        .skip(RESERVED.len())
        .map(|(i, t)| format!("w{i} w{t}\n"))
        .collect();
    let path = dir.join("mapping.txt");
    fs::write(&path, format!("kind {}\n{mapping}", corpus.mapping.kind())).map_err(|e| Error::io(&path, e))?;
    for (name, split) in SPLITS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        write_corpus(&dir.join(format!("{name}.jsonl")), &split.records, &split.features)?;
    }
    Ok(())
}

/// Source/target pairs for a single translator: source is the question
/// (tokens, or one-hot rows plus noise when `dense`), target its image.
/// Returns the train, validation and test splits.
pub fn translation_pairs(spec: &SyntheticSpec, dense: bool) -> Result<[Vec<TranslationPair>; 3]> {
    spec.validate()?;
    let mapping = spec.mapping();
    let mut sampler = Sampler {
        spec,
        rng: keyed_rng(spec.seed, "synthetic.pairs"),
        used: HashSet::new(),
    };
    let mut split = |name: &str, count: usize| -> Vec<TranslationPair> {
        (0..count)
            .map(|i| {
                let content = sampler.unique_source();
                let mut target = mapping.apply(&content);
                target.push(EOS);
                let source = if dense {
                    Source::Dense(render_one_hot(&content, spec.vocab_size, spec.noise, &mut sampler.rng))
                } else {
                    let mut s = content;
                    s.push(EOS);
                    Source::Tokens(s)
                };
                TranslationPair {
                    id: format!("{name}-{i}"),
                    source,
                    target,
                }
            })
            .collect()
    };
    Ok([split("train", spec.train), split("valid", spec.valid), split("test", spec.test)])
}
