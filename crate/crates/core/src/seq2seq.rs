//! A single-source translator: encoded source, one translator stack over a
//! teacher-forced target, vocabulary projection.

use crate::attention::{add_positions, AttentionMask};
use crate::autodiff::{Graph, Var};
use crate::data::vocab::{EOS, PAD};
use crate::error::{Error, Result};
use crate::generate::{generate, DecodeMode, Generated, NextToken};
use crate::layers::{Ctx, EncoderLayer, Linear};
use crate::model::{combine_losses, LossParts, LossWeights};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tct::{teacher_forcing, TctMasks, TranslatorStack};
use crate::tensor::Tensor;
use crate::train::Trainable;

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Tokens(Vec<usize>),
    /// `[N, source_dim]` feature rows.
    Dense(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationPair {
    pub id: String,
    pub source: Source,
    /// Gold output, ending in `<eos>`.
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslatorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Self-attention layers over the source before the translator stack.
    pub encoder_layers: usize,
    pub blocks: usize,
    /// Width of dense sources; 0 for token sources.
    pub source_dim: usize,
}

impl TranslatorConfig {
    /// d=32, 4 heads, one source encoder layer, one translator block.
    pub fn desk(vocab_size: usize) -> Self {
        TranslatorConfig {
            vocab_size,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            encoder_layers: 1,
            blocks: 1,
            source_dim: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqTranslator {
    config: TranslatorConfig,
    store: ParamStore,
    pub embedding: ParamId,
    pub source_proj: Option<Linear>,
    pub encoder: Vec<EncoderLayer>,
    pub stack: TranslatorStack,
    pub output: Linear,
    /// Replace the encoded source by zeros, cutting the translator path.
    pub zero_source: bool,
}

impl Seq2SeqTranslator {
    pub fn new(config: TranslatorConfig, seed: u64) -> Result<Self> {
        let TranslatorConfig {
            vocab_size: v,
            d_model: d,
            heads: h,
            d_ff,
            encoder_layers,
            blocks,
            source_dim,
        } = config;
        if v <= EOS + 1 {
            return Err(Error::Config(format!("vocab_size {v} is too small")));
        }
        let mut store = ParamStore::new(seed);
        let embedding = store.xavier("embedding", v, d);
        let source_proj = (source_dim > 0).then(|| Linear::new(&mut store, "source_proj", source_dim, d));
        let encoder = (0..encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("encoder.{i}"), d, h, d_ff))
            .collect::<Result<_>>()?;
        let stack = TranslatorStack::new(&mut store, "translator", blocks, d, h, d_ff)?;
        let output = Linear::new(&mut store, "output", d, v);
        Ok(Seq2SeqTranslator {
            config,
            store,
            embedding,
            source_proj,
            encoder,
            stack,
            output,
            zero_source: false,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    fn embed(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Result<Var> {
        let x = g.embedding_lookup(b[self.embedding], ids)?;
        add_positions(g, x)
    }

    /// `[N, d]` source representation fed to every translator block.
    pub fn encode_source(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, source: &Source) -> Result<Var> {
        let x = match (source, &self.source_proj) {
            (Source::Tokens(ids), None) => self.embed(g, b, ids)?,
            (Source::Dense(f), Some(proj)) => {
                let f = g.constant(f.clone());
                let x = proj.forward(g, b, f)?;
                add_positions(g, x)?
            }
            _ => {
                return Err(Error::Config(
                    "source kind does not match the translator's source_dim".into(),
                ))
            }
        };
        let mut x = x;
        for layer in &self.encoder {
            x = layer.forward(g, b, ctx, x, &AttentionMask::none())?;
        }
        if self.zero_source {
            let shape = g.shape(x).to_vec();
            return Ok(g.constant(Tensor::zeros(&shape)));
        }
        Ok(x)
    }

    /// Logits `[T, V]` for every position of the `<sos>`-led `input`.
    pub fn decode(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, source: Var, input: &[usize]) -> Result<Var> {
        let target = self.embed(g, b, input)?;
        let out = self.stack.forward(g, b, ctx, target, source, &TctMasks::default())?;
        self.output.forward(g, b, out)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, pair: &TranslationPair) -> Result<Var> {
        if pair.target.last() != Some(&EOS) {
            return Err(Error::Corpus(format!("pair `{}`: target does not end with <eos>", pair.id)));
        }
        let source = self.encode_source(g, b, ctx, &pair.source)?;
        let (input, _) = teacher_forcing(&pair.target);
        self.decode(g, b, ctx, source, &input)
    }

    /// Teacher-forced argmax predictions, one per target position.
    pub fn predict(&self, pair: &TranslationPair) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let logits = self.forward(&mut g, &b, &mut Ctx::eval(), pair)?;
        let v = g.value(logits);
        Ok((0..pair.target.len())
            .map(|t| {
                let row = v.row(t);
                (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect())
    }

    pub fn generate(&self, source: &Source, mode: DecodeMode, max_len: usize) -> Result<Generated> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let encoded = self.encode_source(&mut g, &b, &mut Ctx::eval(), source)?;
        let decoder = SourceDecoder {
            model: self,
            source: g.value(encoded).clone(),
        };
        generate(&decoder, mode, max_len)
    }
}

/// Fraction of target positions whose teacher-forced argmax equals the gold
/// token.
pub fn token_accuracy(model: &Seq2SeqTranslator, pairs: &[TranslationPair]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for pair in pairs {
        let pred = model.predict(pair)?;
        hit += pred.iter().zip(&pair.target).filter(|(p, t)| p == t).count();
        total += pair.target.len();
    }
    if total == 0 {
        return Err(Error::Contract("no target tokens to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

struct SourceDecoder<'m> {
    model: &'m Seq2SeqTranslator,
    source: Tensor,
}

impl NextToken for SourceDecoder<'_> {
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.model.store.bind(&mut g);
        let source = g.constant(self.source.clone());
        let logits = self.model.decode(&mut g, &b, &mut Ctx::eval(), source, prefix)?;
        Ok(g.value(logits).row(prefix.len() - 1).to_vec())
    }
}

impl Trainable for Seq2SeqTranslator {
    type Example = TranslationPair;

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        batch: &[&TranslationPair],
        weights: LossWeights,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut gold = Vec::new();
        for pair in batch {
            logits.push(self.forward(g, b, ctx, pair)?);
            gold.extend_from_slice(&pair.target);
        }
        let all = if logits.len() == 1 { logits[0] } else { g.concat(&logits, 0)? };
        let answer = g.cross_entropy(all, &gold, PAD)?;
        let zero = g.constant(Tensor::scalar(0.0));
        combine_losses(g, answer, zero, zero, weights)
    }

    fn answer_nll(&self, pair: &TranslationPair) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let logits = self.forward(&mut g, &b, &mut Ctx::eval(), pair)?;
        let ce = g.cross_entropy(logits, &pair.target, PAD)?;
        Ok((g.value(ce).item() * pair.target.len() as f64, pair.target.len()))
    }
}
