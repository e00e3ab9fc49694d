//! Cross-modal translator blocks.
//!
//! A [`TctBlock`] reads a target sequence through causal self-attention and a
//! source sequence through unmasked self-attention, then lets the target
//! attend into the source (the translator attention) and finishes with two
//! feed-forward sublayers:
//!
//! ```text
//! c_X     = sublayer(target, causal self-attention)
//! c_src   = sublayer(source, self-attention)
//! X_trans = sublayer(c_X, attention(query = c_X, key = value = c_src))
//! X_out   = sublayer(sublayer(X_trans, ffn_target), ffn_out)
//! ```
//!
//! Every sublayer is post-norm: `layer_norm(x + dropout(f(x)))`. The output
//! always has the target's length, whatever the source length.

use crate::attention::{add_positions, AttentionMask, MultiHeadAttention};
use crate::autodiff::{Graph, Var};
use crate::data::vocab::{EOS, PAD, SOS};
use crate::error::{Error, Result};
use crate::layers::{sublayer, Ctx, EncoderLayer, FeedForward, LayerNorm};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Key-padding flags for both sides of a block. Empty means "no padding".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TctMasks {
    pub target_padding: Vec<bool>,
    pub source_padding: Vec<bool>,
}

impl TctMasks {
    pub fn target(&self) -> AttentionMask {
        if self.target_padding.is_empty() {
            AttentionMask::causal()
        } else {
            AttentionMask::causal_padding(self.target_padding.clone())
        }
    }

    pub fn source(&self) -> AttentionMask {
        if self.source_padding.is_empty() {
            AttentionMask::none()
        } else {
            AttentionMask::padding(self.source_padding.clone())
        }
    }
}

#[derive(Clone, Debug)]
pub struct TctOutputs {
    /// Target after masked self-attention, `[T, d]`.
    pub c_target: Var,
    /// Source after self-attention, `[N, d]`.
    pub c_source: Var,
    /// Target after attending into the source, `[T, d]`.
    pub translated: Var,
    /// Block output, `[T, d]`.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct TctBlock {
    d_model: usize,
    pub target_self_attn: MultiHeadAttention,
    pub target_norm: LayerNorm,
    pub source_self_attn: MultiHeadAttention,
    pub source_norm: LayerNorm,
    pub translator_attn: MultiHeadAttention,
    pub translator_norm: LayerNorm,
    pub ffn_target: FeedForward,
    pub ffn_target_norm: LayerNorm,
    pub ffn_out: FeedForward,
    pub ffn_out_norm: LayerNorm,
}

impl TctBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        let n = |part: &str| format!("{name}.{part}");
        Ok(TctBlock {
            d_model: d,
            target_self_attn: MultiHeadAttention::new(store, &n("target_attn"), d, heads)?,
            target_norm: LayerNorm::new(store, &n("target_norm"), d),
            source_self_attn: MultiHeadAttention::new(store, &n("source_attn"), d, heads)?,
            source_norm: LayerNorm::new(store, &n("source_norm"), d),
            translator_attn: MultiHeadAttention::new(store, &n("translator_attn"), d, heads)?,
            translator_norm: LayerNorm::new(store, &n("translator_norm"), d),
            ffn_target: FeedForward::new(store, &n("ffn_target"), d, d_ff),
            ffn_target_norm: LayerNorm::new(store, &n("ffn_target_norm"), d),
            ffn_out: FeedForward::new(store, &n("ffn_out"), d, d_ff),
            ffn_out_norm: LayerNorm::new(store, &n("ffn_out_norm"), d),
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        target: Var,
        source: Var,
        masks: &TctMasks,
    ) -> Result<TctOutputs> {
        let (st, ss) = (g.shape(target), g.shape(source));
        if st.len() != 2 || ss.len() != 2 || st[1] != self.d_model || ss[1] != self.d_model {
            return Err(Error::Config(format!(
                "translator block expects dimension {}; target is {st:?}, source is {ss:?}",
                self.d_model
            )));
        }
        let target_mask = masks.target();
        let source_mask = masks.source();

        let c_target = sublayer(g, b, &self.target_norm, ctx, target, |g, x| {
            self.target_self_attn.forward(g, b, x, x, x, &target_mask)
        })?;
        let c_source = sublayer(g, b, &self.source_norm, ctx, source, |g, x| {
            self.source_self_attn.forward(g, b, x, x, x, &source_mask)
        })?;
        let translated = sublayer(g, b, &self.translator_norm, ctx, c_target, |g, x| {
            self.translator_attn.forward(g, b, x, c_source, c_source, &source_mask)
        })?;
        let hidden = sublayer(g, b, &self.ffn_target_norm, ctx, translated, |g, x| {
            self.ffn_target.forward(g, b, x)
        })?;
        let output = sublayer(g, b, &self.ffn_out_norm, ctx, hidden, |g, x| self.ffn_out.forward(g, b, x))?;
        Ok(TctOutputs {
            c_target,
            c_source,
            translated,
            output,
        })
    }
}

/// `M` blocks applied in sequence. Each block's output is the next block's
/// target; every block reads the same encoded source.
#[derive(Clone, Debug)]
pub struct TranslatorStack {
    pub blocks: Vec<TctBlock>,
}

impl TranslatorStack {
    pub fn new(store: &mut ParamStore, name: &str, blocks: usize, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config(format!("translator `{name}` needs at least one block")));
        }
        let blocks = (0..blocks)
            .map(|i| TctBlock::new(store, &format!("{name}.{i}"), d, heads, d_ff))
            .collect::<Result<_>>()?;
        Ok(TranslatorStack { blocks })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        target: Var,
        source: Var,
        masks: &TctMasks,
    ) -> Result<Var> {
        if self.blocks.is_empty() {
            return Err(Error::Config("empty translator stack".into()));
        }
        let mut x = target;
        for block in &self.blocks {
            x = block.forward(g, b, ctx, x, source, masks)?.output;
        }
        Ok(x)
    }
}

/// One embedded utterance of a dialogue history. `embedded` is `[len, d]`
/// with positions already added; `tokens` must end in `<eos>`.
#[derive(Clone, Copy, Debug)]
pub struct Utterance<'a> {
    pub embedded: Var,
    pub tokens: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct HierarchicalOutputs {
    /// Summary-related history representation, `[T_s, d]`.
    pub output: Var,
    /// One vector per utterance, taken at its `<eos>`, `[#utterances, d]`.
    pub sentences: Var,
}

/// A translator whose source is read at two levels: a word-level encoder
/// layer runs over each utterance (attention stays inside the utterance),
/// the vector at each utterance's `<eos>` is gathered, and the resulting
/// sentence sequence (plus sentence positions) is the translator's source.
#[derive(Clone, Debug)]
pub struct HierarchicalTct {
    pub word_encoder: EncoderLayer,
    pub stack: TranslatorStack,
    /// Stand-in sentence vector for an empty history, `[1, d]`.
    pub empty_history: ParamId,
}

impl HierarchicalTct {
    pub fn new(store: &mut ParamStore, name: &str, blocks: usize, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(HierarchicalTct {
            word_encoder: EncoderLayer::new(store, &format!("{name}.word_encoder"), d, heads, d_ff)?,
            stack: TranslatorStack::new(store, &format!("{name}.tct"), blocks, d, heads, d_ff)?,
            empty_history: store.xavier(&format!("{name}.empty_history"), 1, d),
        })
    }

    /// Sentence-level sequence: the word-encoded `<eos>` vector of every
    /// utterance, in order.
    pub fn sentences(&self, g: &mut Graph, b: &Bound, ctx: &mut Ctx, history: &[Utterance<'_>]) -> Result<Var> {
        if history.is_empty() {
            return Ok(b[self.empty_history]);
        }
        let mut rows = Vec::with_capacity(history.len());
        for (i, utt) in history.iter().enumerate() {
            let eos_at = match utt.tokens.last() {
                Some(&EOS) => utt.tokens.len() - 1,
                _ => return Err(Error::Corpus(format!("history utterance {i} does not end with <eos>"))),
            };
            if g.shape(utt.embedded).first() != Some(&utt.tokens.len()) {
                return Err(Error::shape("hierarchical_forward", g.shape(utt.embedded), &[utt.tokens.len()]));
            }
            let words = self.word_encoder.forward(g, b, ctx, utt.embedded, &AttentionMask::none())?;
            rows.push(g.gather_rows(words, &[eos_at])?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat(&rows, 0)
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        summary_target: Var,
        history: &[Utterance<'_>],
    ) -> Result<HierarchicalOutputs> {
        let sentences = self.sentences(g, b, ctx, history)?;
        let source = add_positions(g, sentences)?;
        let output = self
            .stack
            .forward(g, b, ctx, summary_target, source, &TctMasks::default())?;
        Ok(HierarchicalOutputs { output, sentences })
    }
}

/// A sequence of one modality: token ids or dense feature rows, with
/// per-position padding flags.
#[derive(Clone, Debug, PartialEq)]
pub enum ModalitySequence {
    Textual { tokens: Vec<usize>, padding: Vec<bool> },
    Dense { features: Tensor, padding: Vec<bool> },
}

impl ModalitySequence {
    /// Unpadded token sequence; must end with `<eos>`.
    pub fn textual(tokens: Vec<usize>) -> Result<Self> {
        if tokens.last() != Some(&EOS) {
            return Err(Error::Corpus("textual sequence does not end with <eos>".into()));
        }
        let padding = vec![false; tokens.len()];
        Ok(ModalitySequence::Textual { tokens, padding })
    }

    /// Unpadded `[N, d_raw]` feature rows.
    pub fn dense(features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Contract(format!("dense sequence must be [N, d], got {:?}", features.shape())));
        }
        let padding = vec![false; features.shape()[0]];
        Ok(ModalitySequence::Dense { features, padding })
    }

    pub fn len(&self) -> usize {
        self.padding().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn padding(&self) -> &[bool] {
        match self {
            ModalitySequence::Textual { padding, .. } | ModalitySequence::Dense { padding, .. } => padding,
        }
    }

    pub fn is_textual(&self) -> bool {
        matches!(self, ModalitySequence::Textual { .. })
    }
}

/// `(input, gold)` for teacher forcing: the gold sequence shifted right with
/// `<sos>` in front, and the gold sequence itself.
pub fn teacher_forcing(tokens: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tokens.len());
    input.push(SOS);
    input.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    (input, tokens.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Textual,
    DenseL1,
    DenseCosine,
}

#[derive(Clone, Copy, Debug)]
pub enum TranslationTarget<'a> {
    Tokens(&'a [usize]),
    Features(Var),
}

/// Supervision for a translated sequence. `mask[t] == true` marks position
/// `t` as scored.
///
/// * `Textual`: mean cross-entropy of `predicted` logits `[T, V]` against
///   gold ids over scored positions.
/// * `DenseL1`: mean absolute error over scored rows.
/// * `DenseCosine`: mean of `1 - cos` over scored rows.
pub fn translation_loss(
    g: &mut Graph,
    kind: LossKind,
    predicted: Var,
    target: TranslationTarget<'_>,
    mask: &[bool],
) -> Result<Var> {
    match (kind, target) {
        (LossKind::Textual, TranslationTarget::Tokens(ids)) => {
            if ids.len() != mask.len() {
                return Err(Error::shape("translation_loss", &[ids.len()], &[mask.len()]));
            }
            let gold: Vec<usize> = ids
                .iter()
                .zip(mask)
                .map(|(&id, &keep)| if keep { id } else { PAD })
                .collect();
            g.cross_entropy(predicted, &gold, PAD)
        }
        (LossKind::DenseL1, TranslationTarget::Features(t)) => g.l1_loss(predicted, t, mask),
        (LossKind::DenseCosine, TranslationTarget::Features(t)) => g.cosine_similarity_loss(predicted, t, mask),
        (kind, _) => Err(Error::Contract(format!("{kind:?} loss does not match the target sequence kind"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_store, prefix_group, GradCheckConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block(d: usize, heads: usize) -> (ParamStore, TctBlock) {
        let mut store = ParamStore::new(21);
        let block = TctBlock::new(&mut store, "tct", d, heads, 4 * d).unwrap();
        (store, block)
    }

    #[test]
    fn block_shape_contract() {
        let (store, block) = block(16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let t = g.constant(random(&mut rng, &[4, 16]));
        let s = g.constant(random(&mut rng, &[9, 16]));
        let out = block.forward(&mut g, &b, &mut Ctx::eval(), t, s, &TctMasks::default()).unwrap();
        assert_eq!(g.shape(out.c_target), &[4, 16]);
        assert_eq!(g.shape(out.c_source), &[9, 16]);
        assert_eq!(g.shape(out.translated), &[4, 16]);
        assert_eq!(g.shape(out.output), &[4, 16]);
    }

    #[test]
    fn source_enters_only_through_translator_attention() {
        let (store, block) = block(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = random(&mut rng, &[3, 8]);
        let source = random(&mut rng, &[5, 8]);
        let run = |src: Tensor| {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let t = g.constant(target.clone());
            let s = g.constant(src);
            let out = block.forward(&mut g, &b, &mut Ctx::eval(), t, s, &TctMasks::default()).unwrap();
            (g.value(out.c_target).clone(), g.value(out.translated).clone())
        };
        let (c1, x1) = run(source.clone());
        let (c2, x2) = run(Tensor::zeros(&[5, 8]));
        assert_eq!(c1, c2);
        assert_ne!(x1, x2);
    }

    #[test]
    fn mismatched_dimension_is_configuration_error() {
        let (store, block) = block(8, 2);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let t = g.constant(Tensor::zeros(&[3, 8]));
        let s = g.constant(Tensor::zeros(&[5, 6]));
        assert!(matches!(
            block.forward(&mut g, &b, &mut Ctx::eval(), t, s, &TctMasks::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn block_gradcheck_all_parameter_groups() {
        let (mut store, block) = block(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // perturb norms and biases away from their 1/0 init
        let names: Vec<String> = store
            .iter()
            .filter(|p| p.value.rank() == 1)
            .map(|p| p.name.clone())
            .collect();
        for n in names {
            let id = store.id(&n).unwrap();
            let shape = store.get(id).value.shape().to_vec();
            let base = if n.ends_with("gain") { 1.0 } else { 0.0 };
            let t = random(&mut rng, &shape).map(|v| base + 0.3 * v);
            store.set(id, t).unwrap();
        }
        let target = random(&mut rng, &[4, 8]);
        let source = random(&mut rng, &[6, 8]);
        let weights = random(&mut rng, &[4, 8]);
        let report = check_store(&store, &GradCheckConfig::default(), |n| prefix_group(n, 2), |g, b| {
            let t = g.constant(target.clone());
            let s = g.constant(source.clone());
            let out = block.forward(g, b, &mut Ctx::eval(), t, s, &TctMasks::default())?;
            let w = g.constant(weights.clone());
            let p = g.mul(out.output, w)?;
            g.sum(p)
        })
        .unwrap();
        let groups: Vec<&str> = report.groups.iter().map(|r| r.group.as_str()).collect();
        for expected in ["tct.target_attn", "tct.source_attn", "tct.translator_attn", "tct.ffn_target", "tct.ffn_out"] {
            assert!(groups.contains(&expected), "{groups:?}");
        }
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn single_block_stack_equals_block() {
        let mut store = ParamStore::new(4);
        let stack = TranslatorStack::new(&mut store, "tr", 1, 8, 2, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let t = g.constant(random(&mut rng, &[3, 8]));
        let s = g.constant(random(&mut rng, &[4, 8]));
        let via_stack = stack.forward(&mut g, &b, &mut Ctx::eval(), t, s, &TctMasks::default()).unwrap();
        let via_block = stack.blocks[0]
            .forward(&mut g, &b, &mut Ctx::eval(), t, s, &TctMasks::default())
            .unwrap();
        assert_eq!(g.value(via_stack), g.value(via_block.output));
    }

    #[test]
    fn empty_stack_rejected() {
        let mut store = ParamStore::new(4);
        assert!(matches!(
            TranslatorStack::new(&mut store, "tr", 0, 8, 2, 32),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn two_block_stack_is_causal() {
        let mut store = ParamStore::new(6);
        let stack = TranslatorStack::new(&mut store, "tr", 2, 8, 2, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let target = random(&mut rng, &[6, 8]);
        let source = random(&mut rng, &[5, 8]);
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let (tv, sv) = (g.constant(t.clone()), g.constant(source.clone()));
            let out = stack.forward(&mut g, &b, &mut Ctx::eval(), tv, sv, &TctMasks::default()).unwrap();
            g.value(out).clone()
        };
        let base = run(&target);
        assert_eq!(base.shape(), &[6, 8]);
        for t in 0..6 {
            let mut perturbed = target.clone();
            for j in (t + 1) * 8..48 {
                perturbed.data_mut()[j] += 0.7;
            }
            let out = run(&perturbed);
            // prefix rows 0..=t are bit-identical
            assert_eq!(&out.data()[..(t + 1) * 8], &base.data()[..(t + 1) * 8]);
        }
    }

    fn hierarchical() -> (ParamStore, HierarchicalTct) {
        let mut store = ParamStore::new(8);
        let h = HierarchicalTct::new(&mut store, "ds", 1, 16, 4, 64).unwrap();
        (store, h)
    }

    #[test]
    fn hierarchical_shapes() {
        let (store, h) = hierarchical();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let turns = [vec![5, 6, EOS], vec![7, EOS], vec![8, 9, 10, EOS]];
        let utts: Vec<Utterance> = turns
            .iter()
            .map(|t| Utterance {
                embedded: g.constant(random(&mut rng, &[t.len(), 16])),
                tokens: t,
            })
            .collect();
        let target = g.constant(random(&mut rng, &[5, 16]));
        let out = h.forward(&mut g, &b, &mut Ctx::eval(), target, &utts).unwrap();
        assert_eq!(g.shape(out.output), &[5, 16]);
        assert_eq!(g.shape(out.sentences), &[3, 16]);
    }

    #[test]
    fn utterance_without_eos_is_corpus_error() {
        let (store, h) = hierarchical();
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let tokens = [5, 6];
        let utt = Utterance {
            embedded: g.constant(Tensor::zeros(&[2, 16])),
            tokens: &tokens,
        };
        let target = g.constant(Tensor::zeros(&[2, 16]));
        assert!(matches!(
            h.forward(&mut g, &b, &mut Ctx::eval(), target, &[utt]),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn single_utterance_source_broadcasts_one_vector() {
        // with one key, cross-attention returns that key's value projection on every row
        let (store, h) = hierarchical();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let tokens = [4, 5, EOS];
        let utt = Utterance {
            embedded: g.constant(random(&mut rng, &[3, 16])),
            tokens: &tokens,
        };
        let sentences = h.sentences(&mut g, &b, &mut Ctx::eval(), &[utt]).unwrap();
        assert_eq!(g.shape(sentences), &[1, 16]);
        let block = &h.stack.blocks[0];
        let target = g.constant(random(&mut rng, &[4, 16]));
        let src = add_positions(&mut g, sentences).unwrap();
        let out = block.forward(&mut g, &b, &mut Ctx::eval(), target, src, &TctMasks::default()).unwrap();
        let c_src = out.c_source;
        let cross = block
            .translator_attn
            .forward(&mut g, &b, out.c_target, c_src, c_src, &AttentionMask::none())
            .unwrap();
        let v = g.value(cross);
        for r in 1..4 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn permuting_inside_one_utterance_changes_only_its_sentence_vector() {
        let (store, h) = hierarchical();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[1, 16])).collect();
        let pe = crate::attention::positional_encoding(4, 16);
        // embedded utterance = word vectors + fixed per-position encoding
        let embed = |order: &[usize]| {
            let mut data = Vec::new();
            for (pos, &w) in order.iter().enumerate() {
                data.extend(words[w].data().iter().zip(pe.row(pos)).map(|(a, b)| a + b));
            }
            Tensor::new(&[order.len(), 16], data).unwrap()
        };
        let run = |second: &[usize]| {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let t1 = [4, 5, EOS];
            let t2 = [6, 7, 8, EOS];
            let t3 = [9, EOS];
            let utts = [
                Utterance { embedded: g.constant(embed(&[0, 1, 3])), tokens: &t1 },
                Utterance { embedded: g.constant(embed(second)), tokens: &t2 },
                Utterance { embedded: g.constant(embed(&[2, 3])), tokens: &t3 },
            ];
            let s = h.sentences(&mut g, &b, &mut Ctx::eval(), &utts).unwrap();
            g.value(s).clone()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[2, 0, 1, 3]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(2), b.row(2));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn teacher_forcing_shifts_right() {
        let (input, gold) = teacher_forcing(&[7, 8, EOS]);
        assert_eq!(input, vec![SOS, 7, 8]);
        assert_eq!(gold, vec![7, 8, EOS]);
    }

    #[test]
    fn translation_loss_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]).unwrap());
        let l1 = translation_loss(&mut g, LossKind::DenseL1, p, TranslationTarget::Features(p), &[true, true]).unwrap();
        assert_eq!(g.value(l1).item(), 0.0);

        let neg = g.scale(p, -1.0).unwrap();
        let cos = translation_loss(&mut g, LossKind::DenseCosine, p, TranslationTarget::Features(neg), &[true, true])
            .unwrap();
        assert!((g.value(cos).item() - 2.0).abs() < 1e-12);

        let logits = g.constant(Tensor::zeros(&[4, 32]));
        let ce = translation_loss(&mut g, LossKind::Textual, logits, TranslationTarget::Tokens(&[5, 9, 12, EOS]), &[true; 4])
            .unwrap();
        assert!((g.value(ce).item() - 32f64.ln()).abs() < 1e-12);
        assert!((g.value(ce).item() - 3.4657).abs() < 1e-4);

        assert!(matches!(
            translation_loss(&mut g, LossKind::Textual, p, TranslationTarget::Features(p), &[true, true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn modality_sequences() {
        assert!(ModalitySequence::textual(vec![4, 5]).is_err());
        let t = ModalitySequence::textual(vec![4, 5, EOS]).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.is_textual());
        let d = ModalitySequence::dense(Tensor::zeros(&[6, 3])).unwrap();
        assert_eq!(d.len(), 6);
        assert!(!d.is_textual());
    }
}
