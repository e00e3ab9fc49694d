//! The multimodal dialogue model: encoder, video-caption translator,
//! dialogue-summary translator, query-aware auto-encoder and answer decoder.
//!
//! Decoder memory is one fused sequence, concatenated along the sequence
//! axis in this fixed order and then position-encoded as a whole:
//!
//! ```text
//! [ z (question) | g_v | g_a | f_v_cap | z_his_sum ]
//! ```
//!
//! Disabled modalities simply drop their segments.

use std::path::Path;

use crate::attention::{add_positions, AttentionMask, MultiHeadAttention};
use crate::autodiff::{Graph, Var};
use crate::data::vocab::EOS;
use crate::error::{Error, Result};
use crate::generate::{generate, DecodeMode, Generated, NextToken};
use crate::layers::{sublayer, Ctx, EncoderLayer, FeedForward, LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tct::{teacher_forcing, HierarchicalTct, TctMasks, TranslatorStack, Utterance};
use crate::tensor::Tensor;

/// One tokenized, featurized dialogue turn to answer.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueExample {
    pub id: String,
    pub history: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    /// `[N_v, visual_dim]`
    pub visual: Option<Tensor>,
    /// `[N_a, audio_dim]`
    pub audio: Option<Tensor>,
    pub caption: Vec<usize>,
    pub summary: Vec<usize>,
    pub answer: Vec<usize>,
}

impl DialogueExample {
    /// Every token sequence ends in `<eos>` and features are present and
    /// correctly sized for every enabled modality.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let check = |field: &str, tokens: &[usize]| -> Result<()> {
            if tokens.last() != Some(&EOS) {
                return Err(Error::Corpus(format!("example `{}`: {field} does not end with <eos>", self.id)));
            }
            if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::Vocabulary {
                    id: bad,
                    size: config.vocab_size,
                });
            }
            Ok(())
        };
        for (i, utt) in self.history.iter().enumerate() {
            check(&format!("history[{i}]"), utt)?;
        }
        check("question", &self.question)?;
        check("caption", &self.caption)?;
        check("summary", &self.summary)?;
        check("answer", &self.answer)?;
        let features = |field: &str, t: &Option<Tensor>, dim: usize| -> Result<()> {
            if dim == 0 {
                return Ok(());
            }
            match t {
                Some(t) if t.rank() == 2 && t.shape()[0] > 0 && t.shape()[1] == dim => Ok(()),
                Some(t) if t.rank() == 2 && t.shape()[0] > 0 => Err(Error::Config(format!(
                    "example `{}`: {field} features have dimension {}, model expects {dim}",
                    self.id,
                    t.shape()[1]
                ))),
                _ => Err(Error::Corpus(format!(
                    "example `{}`: {field} features missing or empty",
                    self.id
                ))),
            }
        };
        features("visual", &self.visual, config.visual_dim)?;
        features("audio", &self.audio, config.audio_dim)
    }
}

/// Model dimensions. A zero `visual_dim`/`audio_dim` disables that modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Blocks per translator stack.
    pub tct_blocks: usize,
    pub decoder_layers: usize,
    pub autoencoder_layers: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
}

impl ModelConfig {
    /// d=32, 4 heads, 2 decoder and auto-encoder layers, one block per translator.
    pub fn desk(vocab_size: usize, visual_dim: usize, audio_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            heads: 4,
            d_ff: 128,
            tct_blocks: 1,
            decoder_layers: 2,
            autoencoder_layers: 2,
            visual_dim,
            audio_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS + 1 {
            return Err(Error::Config(format!("vocab_size {} is too small", self.vocab_size)));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.tct_blocks == 0 || self.decoder_layers == 0 {
            return Err(Error::Config(
                "d_ff, tct_blocks and decoder_layers must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Loss weights: `L = L_Ans + alpha * L_C + beta * L_S`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Scalar loss nodes. `caption`/`summary` are zero constants when a model
/// has no such objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub answer: Var,
    pub caption: Var,
    pub summary: Var,
}

/// `L = answer + alpha * caption + beta * summary`, built on the tape.
pub fn combine_losses(g: &mut Graph, answer: Var, caption: Var, summary: Var, w: LossWeights) -> Result<LossParts> {
    w.validate()?;
    let c = g.scale(caption, w.alpha)?;
    let s = g.scale(summary, w.beta)?;
    let t = g.add(answer, c)?;
    let total = g.add(t, s)?;
    Ok(LossParts {
        total,
        answer,
        caption,
        summary,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutputs {
    pub z: Var,
    pub f_v: Option<Var>,
    pub f_a: Option<Var>,
}

/// Question representations attend into a feature sequence, then a
/// feed-forward sublayer. Output has the question's length.
#[derive(Clone, Debug)]
pub struct QueryAwareLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl QueryAwareLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(QueryAwareLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, query: Var, features: Var) -> Result<Var> {
        let none = AttentionMask::none();
        let h = sublayer(g, b, &self.attn_norm, ctx, query, |g, q| {
            self.attn.forward(g, b, q, features, features, &none)
        })?;
        sublayer(g, b, &self.ffn_norm, ctx, h, |g, x| self.ffn.forward(g, b, x))
    }
}

/// Causal self-attention, cross-attention into memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, x: Var, memory: Var) -> Result<Var> {
        let causal = AttentionMask::causal();
        let none = AttentionMask::none();
        let h = sublayer(g, b, &self.self_norm, ctx, x, |g, x| {
            self.self_attn.forward(g, b, x, x, x, &causal)
        })?;
        let h = sublayer(g, b, &self.cross_norm, ctx, h, |g, x| {
            self.cross_attn.forward(g, b, x, memory, memory, &none)
        })?;
        sublayer(g, b, &self.ffn_norm, ctx, h, |g, x| self.ffn.forward(g, b, x))
    }
}

/// Switches that alter the forward pass without touching parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Cut the gradient path from the decoder memory back into both
    /// translators (`f_v_cap`, `z_his_sum` enter memory detached).
    pub detach_translators: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub answer_logits: Var,
    pub caption_logits: Option<Var>,
    pub summary_logits: Var,
    pub memory: Var,
}

#[derive(Clone, Debug)]
pub struct MtnTct {
    config: ModelConfig,
    store: ParamStore,
    pub embedding: ParamId,
    pub question_encoder: EncoderLayer,
    pub visual_proj: Option<Linear>,
    pub audio_proj: Option<Linear>,
    pub caption_translator: Option<TranslatorStack>,
    pub summary_translator: HierarchicalTct,
    pub visual_autoencoder: Vec<QueryAwareLayer>,
    pub audio_autoencoder: Vec<QueryAwareLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub output: Linear,
}

impl MtnTct {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab_size: v,
            d_model: d,
            heads: h,
            d_ff,
            tct_blocks,
            decoder_layers,
            autoencoder_layers,
            visual_dim,
            audio_dim,
        } = config;
        let mut store = ParamStore::new(seed);
        let embedding = store.xavier("embedding", v, d);
        let question_encoder = EncoderLayer::new(&mut store, "encoder.question", d, h, d_ff)?;
        let visual_proj = (visual_dim > 0).then(|| Linear::new(&mut store, "encoder.visual", visual_dim, d));
        let audio_proj = (audio_dim > 0).then(|| Linear::new(&mut store, "encoder.audio", audio_dim, d));
        let caption_translator = if visual_dim > 0 {
            Some(TranslatorStack::new(&mut store, "caption_translator", tct_blocks, d, h, d_ff)?)
        } else {
            None
        };
        let summary_translator = HierarchicalTct::new(&mut store, "summary_translator", tct_blocks, d, h, d_ff)?;
        let stack = |store: &mut ParamStore, name: &str, on: bool| -> Result<Vec<QueryAwareLayer>> {
            if !on {
                return Ok(Vec::new());
            }
            (0..autoencoder_layers)
                .map(|i| QueryAwareLayer::new(store, &format!("auto_encoder.{name}.{i}"), d, h, d_ff))
                .collect()
        };
        let visual_autoencoder = stack(&mut store, "visual", visual_dim > 0)?;
        let audio_autoencoder = stack(&mut store, "audio", audio_dim > 0)?;
        let decoder = (0..decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("decoder.{i}"), d, h, d_ff))
            .collect::<Result<_>>()?;
        let output = Linear::new(&mut store, "output", d, v);
        Ok(MtnTct {
            config,
            store,
            embedding,
            question_encoder,
            visual_proj,
            audio_proj,
            caption_translator,
            summary_translator,
            visual_autoencoder,
            audio_autoencoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.store.load(path)
    }

    /// Token embeddings plus positions, `[len, d]`.
    pub fn embed(&self, g: &mut Graph, b: &Bound, ids: &[usize]) -> Result<Var> {
        let x = g.embedding_lookup(b[self.embedding], ids)?;
        add_positions(g, x)
    }

    fn project(&self, g: &mut Graph, b: &Bound, proj: &Linear, features: &Tensor) -> Result<Var> {
        let x = g.constant(features.clone());
        let x = proj.forward(g, b, x)?;
        add_positions(g, x)
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, ex: &DialogueExample) -> Result<EncoderOutputs> {
        ex.validate(&self.config)?;
        let q = self.embed(g, b, &ex.question)?;
        let z = self.question_encoder.forward(g, b, ctx, q, &AttentionMask::none())?;
        let f_v = match (&self.visual_proj, &ex.visual) {
            (Some(p), Some(v)) => Some(self.project(g, b, p, v)?),
            _ => None,
        };
        let f_a = match (&self.audio_proj, &ex.audio) {
            (Some(p), Some(a)) => Some(self.project(g, b, p, a)?),
            _ => None,
        };
        Ok(EncoderOutputs { z, f_v, f_a })
    }

    /// `(f_v_cap [T_c, d], caption_logits [T_c, V])` with the caption as
    /// the teacher-forced target and `f_v` as the source.
    pub fn video_caption_translate(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        f_v: Var,
        caption: &[usize],
    ) -> Result<(Var, Var)> {
        let stack = self
            .caption_translator
            .as_ref()
            .ok_or_else(|| Error::Config("video-caption translator needs visual features enabled".into()))?;
        let (input, _) = teacher_forcing(caption);
        let target = self.embed(g, b, &input)?;
        let f_v_cap = stack.forward(g, b, ctx, target, f_v, &TctMasks::default())?;
        let logits = self.output.forward(g, b, f_v_cap)?;
        Ok((f_v_cap, logits))
    }

    /// `(z_his_sum [T_s, d], summary_logits [T_s, V])`.
    pub fn dialogue_summary_translate(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        history: &[Vec<usize>],
        summary: &[usize],
    ) -> Result<(Var, Var)> {
        let mut utterances = Vec::with_capacity(history.len());
        for tokens in history {
            utterances.push(Utterance {
                embedded: self.embed(g, b, tokens)?,
                tokens,
            });
        }
        let (input, _) = teacher_forcing(summary);
        let target = self.embed(g, b, &input)?;
        let out = self.summary_translator.forward(g, b, ctx, target, &utterances)?;
        let logits = self.output.forward(g, b, out.output)?;
        Ok((out.output, logits))
    }

    /// `(g_v, g_a)`, each of the question's length.
    pub fn auto_encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        z: Var,
        f_v: Option<Var>,
        f_a: Option<Var>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let run = |g: &mut Graph, ctx: &mut Ctx, layers: &[QueryAwareLayer], f: Option<Var>| -> Result<Option<Var>> {
            let Some(f) = f else { return Ok(None) };
            let mut q = z;
            for layer in layers {
                q = layer.forward(g, b, ctx, q, f)?;
            }
            Ok(Some(q))
        };
        let g_v = run(g, ctx, &self.visual_autoencoder, f_v)?;
        let g_a = run(g, ctx, &self.audio_autoencoder, f_a)?;
        Ok((g_v, g_a))
    }

    /// Concatenates memory segments in the given order and adds positions.
    pub fn fuse_memory(&self, g: &mut Graph, segments: &[Var]) -> Result<Var> {
        let m = if segments.len() == 1 {
            segments[0]
        } else {
            g.concat(segments, 0)?
        };
        add_positions(g, m)
    }

    /// Vocabulary logits for every position of the `<sos>`-led `input`.
    pub fn decode(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, memory: Var, input: &[usize]) -> Result<Var> {
        let mut x = self.embed(g, b, input)?;
        for layer in &self.decoder {
            x = layer.forward(g, b, ctx, x, memory)?;
        }
        self.output.forward(g, b, x)
    }

    /// Everything up to the decoder memory. Returns the memory and the two
    /// translator logit sequences.
    fn memory(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        ex: &DialogueExample,
        opts: ForwardOptions,
    ) -> Result<(Var, Option<Var>, Var)> {
        let enc = self.encode(g, b, ctx, ex)?;
        let (g_v, g_a) = self.auto_encode(g, b, ctx, enc.z, enc.f_v, enc.f_a)?;
        let caption = match enc.f_v {
            Some(f_v) => Some(self.video_caption_translate(g, b, ctx, f_v, &ex.caption)?),
            None => None,
        };
        let (z_his_sum, summary_logits) = self.dialogue_summary_translate(g, b, ctx, &ex.history, &ex.summary)?;
        let cut = |g: &mut Graph, v: Var| if opts.detach_translators { g.detach(v) } else { v };
        let mut segments = vec![enc.z];
        segments.extend(g_v);
        segments.extend(g_a);
        if let Some((f_v_cap, _)) = caption {
            segments.push(cut(g, f_v_cap));
        }
        segments.push(cut(g, z_his_sum));
        let memory = self.fuse_memory(g, &segments)?;
        Ok((memory, caption.map(|c| c.1), summary_logits))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        ex: &DialogueExample,
        opts: ForwardOptions,
    ) -> Result<ForwardOutputs> {
        let (memory, caption_logits, summary_logits) = self.memory(g, b, ctx, ex, opts)?;
        let (input, _) = teacher_forcing(&ex.answer);
        let answer_logits = self.decode(g, b, ctx, memory, &input)?;
        Ok(ForwardOutputs {
            answer_logits,
            caption_logits,
            summary_logits,
            memory,
        })
    }

    /// Token-mean losses over a batch: every answer (caption, summary) token
    /// of the batch counts once.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        batch: &[&DialogueExample],
        weights: LossWeights,
        opts: ForwardOptions,
    ) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut answer = (Vec::new(), Vec::new());
        let mut caption = (Vec::new(), Vec::new());
        let mut summary = (Vec::new(), Vec::new());
        for ex in batch {
            let out = self.forward(g, b, ctx, ex, opts)?;
            answer.0.push(out.answer_logits);
            answer.1.extend_from_slice(&ex.answer);
            if let Some(c) = out.caption_logits {
                caption.0.push(c);
                caption.1.extend_from_slice(&ex.caption);
            }
            summary.0.push(out.summary_logits);
            summary.1.extend_from_slice(&ex.summary);
        }
        let ce = |g: &mut Graph, (logits, gold): (Vec<Var>, Vec<usize>)| -> Result<Var> {
            if logits.is_empty() {
                return Ok(g.constant(Tensor::scalar(0.0)));
            }
            let all = if logits.len() == 1 { logits[0] } else { g.concat(&logits, 0)? };
            g.cross_entropy(all, &gold, crate::data::vocab::PAD)
        };
        let l_ans = ce(g, answer)?;
        let l_c = ce(g, caption)?;
        let l_s = ce(g, summary)?;
        combine_losses(g, l_ans, l_c, l_s, weights)
    }

    /// `(L, L_Ans, L_C, L_S)` for one example.
    pub fn composite_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        ex: &DialogueExample,
        weights: LossWeights,
    ) -> Result<LossParts> {
        self.batch_loss(g, b, ctx, &[ex], weights, ForwardOptions::default())
    }

    /// Summed answer negative log-likelihood and answer token count, with
    /// dropout off.
    pub fn answer_nll(&self, ex: &DialogueExample) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let out = self.forward(&mut g, &b, &mut Ctx::eval(), ex, ForwardOptions::default())?;
        let ce = g.cross_entropy(out.answer_logits, &ex.answer, crate::data::vocab::PAD)?;
        Ok((g.value(ce).item() * ex.answer.len() as f64, ex.answer.len()))
    }

    /// Decoder memory for `ex` as a plain tensor, dropout off.
    pub fn memory_tensor(&self, ex: &DialogueExample) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g);
        let (memory, _, _) = self.memory(&mut g, &b, &mut Ctx::eval(), ex, ForwardOptions::default())?;
        Ok(g.value(memory).clone())
    }

    pub fn generate(&self, ex: &DialogueExample, mode: DecodeMode, max_len: usize) -> Result<Generated> {
        let decoder = AnswerDecoder {
            model: self,
            memory: self.memory_tensor(ex)?,
        };
        generate(&decoder, mode, max_len)
    }
}

/// Scores answer prefixes against a fixed decoder memory.
pub struct AnswerDecoder<'m> {
    pub model: &'m MtnTct,
    pub memory: Tensor,
}

impl NextToken for AnswerDecoder<'_> {
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.model.store.bind(&mut g);
        let memory = g.constant(self.memory.clone());
        let logits = self.model.decode(&mut g, &b, &mut Ctx::eval(), memory, prefix)?;
        Ok(g.value(logits).row(prefix.len() - 1).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_store, prefix_group, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
        let mut t: Vec<usize> = (0..len - 1).map(|_| rng.random_range(4..vocab)).collect();
        t.push(EOS);
        t
    }

    fn features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn example(seed: u64, cfg: &ModelConfig) -> DialogueExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = cfg.vocab_size;
        DialogueExample {
            id: format!("ex{seed}"),
            history: vec![tokens(&mut rng, 4, v), tokens(&mut rng, 3, v), tokens(&mut rng, 5, v)],
            question: tokens(&mut rng, 7, v),
            visual: (cfg.visual_dim > 0).then(|| features(&mut rng, 10, cfg.visual_dim)),
            audio: (cfg.audio_dim > 0).then(|| features(&mut rng, 6, cfg.audio_dim)),
            caption: tokens(&mut rng, 12, v),
            summary: tokens(&mut rng, 9, v),
            answer: tokens(&mut rng, 6, v),
        }
    }

    fn desk() -> ModelConfig {
        ModelConfig::desk(64, 24, 16)
    }

    #[test]
    fn output_shapes() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 1).unwrap();
        let ex = example(3, &cfg);
        let mut g = Graph::new();
        let b = model.store().bind(&mut g);
        let ctx = &mut Ctx::eval();
        let enc = model.encode(&mut g, &b, ctx, &ex).unwrap();
        assert_eq!(g.shape(enc.z), &[7, 32]);
        assert_eq!(g.shape(enc.f_v.unwrap()), &[10, 32]);
        assert_eq!(g.shape(enc.f_a.unwrap()), &[6, 32]);
        let (cap, cap_logits) = model
            .video_caption_translate(&mut g, &b, ctx, enc.f_v.unwrap(), &ex.caption)
            .unwrap();
        assert_eq!(g.shape(cap), &[12, 32]);
        assert_eq!(g.shape(cap_logits), &[12, 64]);
        let (sum, _) = model
            .dialogue_summary_translate(&mut g, &b, ctx, &ex.history, &ex.summary)
            .unwrap();
        assert_eq!(g.shape(sum), &[9, 32]);
        let (g_v, g_a) = model.auto_encode(&mut g, &b, ctx, enc.z, enc.f_v, enc.f_a).unwrap();
        assert_eq!(g.shape(g_v.unwrap()), &[7, 32]);
        assert_eq!(g.shape(g_a.unwrap()), &[7, 32]);
        let out = model.forward(&mut g, &b, ctx, &ex, ForwardOptions::default()).unwrap();
        assert_eq!(g.shape(out.answer_logits), &[6, 64]);
        // z + g_v + g_a + f_v_cap + z_his_sum
        assert_eq!(g.shape(out.memory), &[7 + 7 + 7 + 12 + 9, 32]);
    }

    #[test]
    fn disabled_audio_is_dropped_from_memory() {
        let cfg = ModelConfig::desk(64, 24, 0);
        let model = MtnTct::new(cfg.clone(), 1).unwrap();
        let ex = example(3, &cfg);
        assert!(model.store().iter().all(|p| !p.name.contains("audio")));
        let memory = model.memory_tensor(&ex).unwrap();
        assert_eq!(memory.shape(), &[7 + 7 + 12 + 9, 32]);
    }

    #[test]
    fn caption_translator_consults_visual_source() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 2).unwrap();
        let ex = example(4, &cfg);
        let logits = |visual: Tensor| {
            let mut g = Graph::new();
            let b = model.store().bind(&mut g);
            let proj = model.visual_proj.as_ref().unwrap();
            let f_v = model.project(&mut g, &b, proj, &visual).unwrap();
            let (_, l) = model
                .video_caption_translate(&mut g, &b, &mut Ctx::eval(), f_v, &ex.caption)
                .unwrap();
            g.value(l).clone()
        };
        let real = logits(ex.visual.clone().unwrap());
        let zeroed = logits(Tensor::zeros(&[10, 24]));
        assert!(real.max_abs_diff(&zeroed) > 1e-6);
    }

    #[test]
    fn turn_order_changes_summary_representation() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 5).unwrap();
        let ex = example(6, &cfg);
        let run = |history: &[Vec<usize>]| {
            let mut g = Graph::new();
            let b = model.store().bind(&mut g);
            let (z, _) = model
                .dialogue_summary_translate(&mut g, &b, &mut Ctx::eval(), history, &ex.summary)
                .unwrap();
            g.value(z).clone()
        };
        let mut shuffled = ex.history.clone();
        shuffled.rotate_left(1);
        assert!(run(&ex.history).max_abs_diff(&run(&shuffled)) > 1e-6);
    }

    #[test]
    fn constant_features_give_query_independent_attention() {
        let mut store = ParamStore::new(3);
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = Tensor::from_rows(&vec![row.clone(); 5]).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let q = g.constant(features(&mut rng, 3, 8));
        let fv = g.constant(f);
        let out = attn.forward(&mut g, &b, q, fv, fv, &AttentionMask::none()).unwrap();
        // every output row is the constant row pushed through W_v and W_o
        let single = g.constant(Tensor::from_rows(&[row]).unwrap());
        let vproj = g.matmul(single, b[attn.wv]).unwrap();
        let expect = g.matmul(vproj, b[attn.wo]).unwrap();
        for r in 0..3 {
            for (a, e) in g.value(out).row(r).iter().zip(g.value(expect).row(0)) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_history_uses_sentinel() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 1).unwrap();
        let mut ex = example(8, &cfg);
        ex.history.clear();
        let memory = model.memory_tensor(&ex).unwrap();
        assert_eq!(memory.shape()[0], 7 + 7 + 7 + 12 + 9);
    }

    #[test]
    fn answer_logits_are_causal() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 9).unwrap();
        let ex = example(10, &cfg);
        let mut other = ex.clone();
        other.answer[4] = if ex.answer[4] == 5 { 6 } else { 5 };
        let logits = |e: &DialogueExample| {
            let mut g = Graph::new();
            let b = model.store().bind(&mut g);
            let out = model.forward(&mut g, &b, &mut Ctx::eval(), e, ForwardOptions::default()).unwrap();
            g.value(out.answer_logits).clone()
        };
        let (a, c) = (logits(&ex), logits(&other));
        // input position 5 holds gold token 4
        for t in 0..5 {
            assert_eq!(a.row(t), c.row(t));
        }
        assert_ne!(a.row(5), c.row(5));
    }

    #[test]
    fn memory_segment_order_matters() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 11).unwrap();
        let ex = example(12, &cfg);
        let mut g = Graph::new();
        let b = model.store().bind(&mut g);
        let ctx = &mut Ctx::eval();
        let enc = model.encode(&mut g, &b, ctx, &ex).unwrap();
        let (g_v, g_a) = model.auto_encode(&mut g, &b, ctx, enc.z, enc.f_v, enc.f_a).unwrap();
        let (cap, _) = model
            .video_caption_translate(&mut g, &b, ctx, enc.f_v.unwrap(), &ex.caption)
            .unwrap();
        let (sum, _) = model
            .dialogue_summary_translate(&mut g, &b, ctx, &ex.history, &ex.summary)
            .unwrap();
        let segments = [enc.z, g_v.unwrap(), g_a.unwrap(), cap, sum];
        let (input, _) = teacher_forcing(&ex.answer);
        let m1 = model.fuse_memory(&mut g, &segments).unwrap();
        let l1 = model.decode(&mut g, &b, ctx, m1, &input).unwrap();
        let reversed: Vec<Var> = segments.iter().rev().copied().collect();
        let m2 = model.fuse_memory(&mut g, &reversed).unwrap();
        let l2 = model.decode(&mut g, &b, ctx, m2, &input).unwrap();
        assert!(g.value(l1).max_abs_diff(g.value(l2)) > 1e-9);
    }

    #[test]
    fn composite_loss_is_exact_linear_combination() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 13).unwrap();
        let ex = example(14, &cfg);
        for (alpha, beta) in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)] {
            let mut g = Graph::new();
            let b = model.store().bind(&mut g);
            let l = model
                .composite_loss(&mut g, &b, &mut Ctx::eval(), &ex, LossWeights { alpha, beta })
                .unwrap();
            let (t, a, c, s) = (
                g.value(l.total).item(),
                g.value(l.answer).item(),
                g.value(l.caption).item(),
                g.value(l.summary).item(),
            );
            if alpha == 0.0 && beta == 0.0 {
                assert_eq!(t.to_bits(), a.to_bits());
            }
            assert!((t - (a + alpha * c + beta * s)).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let b = model.store().bind(&mut g);
        let bad = model.composite_loss(&mut g, &b, &mut Ctx::eval(), &ex, LossWeights { alpha: -1.0, beta: 0.0 });
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    fn translator_grads(model: &mut MtnTct, ex: &DialogueExample, w: LossWeights, opts: ForwardOptions) -> f64 {
        let mut g = Graph::new();
        let b = model.store().bind(&mut g);
        let l = model
            .batch_loss(&mut g, &b, &mut Ctx::eval(), &[ex], w, opts)
            .unwrap();
        g.backward(l.total).unwrap();
        model.store_mut().zero_grads();
        model.store_mut().accumulate_grads(&g, &b);
        model
            .store()
            .iter()
            .filter(|p| p.name.starts_with("caption_translator") || p.name.starts_with("summary_translator"))
            .flat_map(|p| p.grad.iter())
            .map(|v| v.abs())
            .sum()
    }

    #[test]
    fn translator_gradients_flow_only_through_memory_when_unweighted() {
        let cfg = desk();
        let mut model = MtnTct::new(cfg.clone(), 15).unwrap();
        let ex = example(16, &cfg);
        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        let cut = ForwardOptions { detach_translators: true };
        assert!(translator_grads(&mut model, &ex, LossWeights::default(), ForwardOptions::default()) > 0.0);
        assert!(translator_grads(&mut model, &ex, zero, ForwardOptions::default()) > 0.0);
        assert_eq!(translator_grads(&mut model, &ex, zero, cut), 0.0);
        assert!(translator_grads(&mut model, &ex, LossWeights::default(), cut) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 17).unwrap();
        let ex = example(18, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let mut fresh = MtnTct::new(cfg.clone(), 99).unwrap();
        fresh.load(&path).unwrap();
        assert_eq!(model.memory_tensor(&ex).unwrap(), fresh.memory_tensor(&ex).unwrap());
        assert_eq!(model.answer_nll(&ex).unwrap().0.to_bits(), fresh.answer_nll(&ex).unwrap().0.to_bits());

        let mut wider = MtnTct::new(ModelConfig { d_model: 16, d_ff: 64, ..cfg }, 1).unwrap();
        match wider.load(&path) {
            Err(Error::Config(msg)) => assert!(msg.contains("16") && msg.contains("32"), "{msg}"),
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }

    #[test]
    fn step_decoding_matches_full_forward() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 19).unwrap();
        let ex = example(20, &cfg);
        let generated = model.generate(&ex, DecodeMode::Greedy, 8).unwrap();
        let decoder = AnswerDecoder {
            model: &model,
            memory: model.memory_tensor(&ex).unwrap(),
        };
        let mut prefix = vec![crate::data::vocab::SOS];
        prefix.extend_from_slice(&generated.tokens[..generated.tokens.len() - 1]);
        let mut g = Graph::new();
        let b = model.store().bind(&mut g);
        let memory = g.constant(decoder.memory.clone());
        let full = model.decode(&mut g, &b, &mut Ctx::eval(), memory, &prefix).unwrap();
        for t in 0..prefix.len() {
            let step = decoder.next_logits(&prefix[..=t]).unwrap();
            assert_eq!(g.value(full).row(t), step.as_slice());
        }
        assert_eq!(model.generate(&ex, DecodeMode::Beam(1), 8).unwrap(), generated);
        let one = model.generate(&ex, DecodeMode::Greedy, 1).unwrap();
        assert_eq!(one.tokens.len(), 1);
        assert_eq!(one.truncated, one.tokens[0] != EOS);
    }

    #[test]
    fn missing_eos_or_features_is_rejected() {
        let cfg = desk();
        let model = MtnTct::new(cfg.clone(), 1).unwrap();
        let mut ex = example(1, &cfg);
        ex.answer.pop();
        assert!(matches!(model.answer_nll(&ex), Err(Error::Corpus(_))));
        let mut ex = example(1, &cfg);
        ex.visual = None;
        assert!(matches!(model.answer_nll(&ex), Err(Error::Corpus(_))));
        let mut ex = example(1, &cfg);
        ex.visual = Some(Tensor::zeros(&[3, 5]));
        assert!(matches!(model.answer_nll(&ex), Err(Error::Config(_))));
    }

    #[test]
    fn two_autoencoder_layers_gradcheck() {
        let mut store = ParamStore::new(21);
        let layers: Vec<QueryAwareLayer> = (0..2)
            .map(|i| QueryAwareLayer::new(&mut store, &format!("ae.{i}"), 8, 2, 32).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let z = features(&mut rng, 4, 8);
        let f = features(&mut rng, 5, 8);
        let w = features(&mut rng, 4, 8);
        let report = check_store(&store, &GradCheckConfig::default(), |n| prefix_group(n, 2), |g, b| {
            let mut q = g.constant(z.clone());
            let fv = g.constant(f.clone());
            for layer in &layers {
                q = layer.forward(g, b, &mut Ctx::eval(), q, fv)?;
            }
            let wv = g.constant(w.clone());
            let p = g.mul(q, wv)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
