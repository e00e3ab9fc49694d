//! Caption-style evaluation metrics: BLEU-1..4, ROUGE-L, CIDEr and a
//! simplified METEOR, plus a question-type breakdown.
//!
//! `meteor_simplified` uses exact unigram matches only (no stemming, no
//! synonyms), so its values are not comparable with official METEOR.
//!
//! Text is tokenized by lowercasing and splitting punctuation into separate
//! tokens before scoring.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::{BuildHasherDefault, Hash};

use crate::data::corpus::Corpus;
use crate::data::vocab::split_words;
use crate::error::{Error, Result};

/// Hash map with a fixed hasher, so iteration (and float summation) order
/// is the same in every process.
pub type StableMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> StableMap<&[T], usize> {
    let mut counts = StableMap::default();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Reference length closest to `hyp_len`; ties go to the shorter one.
fn closest_ref_len<T>(hyp_len: usize, refs: &[&[T]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

/// `(clipped matches, hypothesis n-grams)` for order `n`; clipping uses the
/// largest count of each n-gram over the references.
fn clipped_counts<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let mut max_ref: StableMap<&[T], usize> = StableMap::default();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h.iter().map(|(g, &c)| c.min(*max_ref.get(g).unwrap_or(&0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn bleu_from_counts(matched: &[usize], total: &[usize], hyp_len: usize, ref_len: usize) -> Vec<f64> {
    if hyp_len == 0 {
        return vec![0.0; matched.len()];
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(matched.len());
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..matched.len() {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero { 0.0 } else { bp * (log_sum / (n + 1) as f64).exp() });
    }
    out
}

/// Modified n-gram precision of order `n` (clipped matches / hypothesis n-grams).
pub fn modified_precision<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> f64 {
    let (m, t) = clipped_counts(hyp, refs, n);
    if t == 0 {
        0.0
    } else {
        m as f64 / t as f64
    }
}

/// Sentence BLEU-1..`max_n` with closest-length brevity penalty and no
/// smoothing. Entry `k` is BLEU-(k+1).
pub fn bleu<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], max_n: usize) -> Result<Vec<f64>> {
    if refs.is_empty() {
        return Err(Error::Contract("BLEU needs at least one reference".into()));
    }
    let (matched, total): (Vec<usize>, Vec<usize>) = (1..=max_n).map(|n| clipped_counts(hyp, refs, n)).unzip();
    Ok(bleu_from_counts(&matched, &total, hyp.len(), closest_ref_len(hyp.len(), refs)))
}

/// Corpus BLEU: counts and lengths are summed over all pairs before the
/// precisions and brevity penalty are formed.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[(&[T], Vec<&[T]>)], max_n: usize) -> Result<Vec<f64>> {
    let mut matched = vec![0; max_n];
    let mut total = vec![0; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, refs) in pairs {
        if refs.is_empty() {
            return Err(Error::Contract("BLEU needs at least one reference".into()));
        }
        for n in 1..=max_n {
            let (m, t) = clipped_counts(hyp, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        hyp_len += hyp.len();
        ref_len += closest_ref_len(hyp.len(), refs);
    }
    Ok(bleu_from_counts(&matched, &total, hyp_len, ref_len))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_single<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// LCS F-measure with beta = 1.2; the best reference wins.
pub fn rouge_l<T: Eq>(hyp: &[T], refs: &[&[T]]) -> f64 {
    refs.iter().map(|r| rouge_l_single(hyp, r)).fold(0.0, f64::max)
}

/// `(matches, chunks)` of a left-to-right exact-match alignment that
/// extends the current chunk whenever it can.
fn align<T: Eq>(hyp: &[T], reference: &[T]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut matches, mut chunks) = (0, 0);
    for h in hyp {
        let next = prev
            .map(|p| p + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *h)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *h));
        match next {
            Some(j) => {
                if prev.map(|p| p + 1) != Some(j) {
                    chunks += 1;
                }
                used[j] = true;
                matches += 1;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

fn meteor_single<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Exact-match METEOR: `F_mean * (1 - 0.5 (chunks/m)^3)` with
/// `F_mean = 10PR / (R + 9P)`; the best reference wins.
pub fn meteor_simplified<T: Eq>(hyp: &[T], refs: &[&[T]]) -> f64 {
    refs.iter().map(|r| meteor_single(hyp, r)).fold(0.0, f64::max)
}

/// Cosine of two sparse vectors; `None` when either has zero norm.
pub fn sparse_cosine<K: Eq + Hash>(a: &StableMap<K, f64>, b: &StableMap<K, f64>) -> Option<f64> {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().filter_map(|(k, va)| b.get(k).map(|vb| va * vb)).sum();
    Some(dot / (na * nb))
}

type SparseVec<'a, T> = StableMap<&'a [T], f64>;

/// Raw and IDF-weighted n-gram count vectors.
fn tf_vectors<'a, T: Eq + Hash>(
    tokens: &'a [T],
    n: usize,
    idf: &dyn Fn(&[T]) -> f64,
) -> (SparseVec<'a, T>, SparseVec<'a, T>) {
    let tf = ngram_counts(tokens, n);
    let raw = tf.iter().map(|(g, &c)| (*g, c as f64)).collect();
    let weighted = tf.iter().map(|(g, &c)| (*g, c as f64 * idf(g))).collect();
    (raw, weighted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub per_example: Vec<f64>,
    pub corpus: f64,
}

/// CIDEr over a whole corpus: TF-IDF n-gram vectors (n = 1..4, IDF =
/// ln(N / document frequency) over the reference sets), cosine against each
/// reference times `exp(-(|hyp| - |ref|)^2 / (2 sigma^2))`, averaged over
/// references and orders, times 10. When both IDF-weighted vectors vanish
/// (every shared n-gram occurs in every reference set), plain TF cosine is
/// used for that pair.
pub fn cider<T: Eq + Hash>(hyps: &[&[T]], reference_sets: &[Vec<&[T]>]) -> Result<CiderScores> {
    if hyps.len() != reference_sets.len() {
        return Err(Error::Contract(format!(
            "CIDEr got {} hypotheses and {} reference sets",
            hyps.len(),
            reference_sets.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Contract("CIDEr needs a corpus of at least one example".into()));
    }
    if reference_sets.iter().any(Vec::is_empty) {
        return Err(Error::Contract("CIDEr needs at least one reference per example".into()));
    }
    let n_docs = hyps.len() as f64;
    let mut per_example = vec![0.0; hyps.len()];
    for n in 1..=4 {
        let mut df: StableMap<&[T], usize> = StableMap::default();
        for refs in reference_sets {
            let distinct: HashSet<&[T]> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in distinct {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[T]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (i, (hyp, refs)) in hyps.iter().zip(reference_sets).enumerate() {
            let (h_raw, h_w) = tf_vectors(hyp, n, &idf);
            let mut sum = 0.0;
            for r in refs {
                let (r_raw, r_w) = tf_vectors(r, n, &idf);
                let h_zero = h_w.values().all(|v| *v == 0.0);
                let r_zero = r_w.values().all(|v| *v == 0.0);
                let cos = if h_zero && r_zero {
                    sparse_cosine(&h_raw, &r_raw).unwrap_or(0.0)
                } else {
                    sparse_cosine(&h_w, &r_w).unwrap_or(0.0)
                };
                let gap = hyp.len() as f64 - r.len() as f64;
                sum += cos * (-(gap * gap) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            per_example[i] += 10.0 * sum / refs.len() as f64 / 4.0;
        }
    }
    let corpus = per_example.iter().sum::<f64>() / per_example.len() as f64;
    Ok(CiderScores { per_example, corpus })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuestionType {
    What,
    Who,
    Where,
    Which,
    How,
    When,
    Why,
    Others,
}

impl QuestionType {
    pub const ALL: [QuestionType; 8] = [
        QuestionType::What,
        QuestionType::Who,
        QuestionType::Where,
        QuestionType::Which,
        QuestionType::How,
        QuestionType::When,
        QuestionType::Why,
        QuestionType::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::What => "what",
            QuestionType::Who => "who",
            QuestionType::Where => "where",
            QuestionType::Which => "which",
            QuestionType::How => "how",
            QuestionType::When => "when",
            QuestionType::Why => "why",
            QuestionType::Others => "others",
        }
    }
}

/// The highest-priority interrogative word found anywhere in the question
/// (what > who > where > which > how > when > why), else `Others`.
pub fn classify_question(question: &str) -> QuestionType {
    let words = split_words(question);
    QuestionType::ALL[..7]
        .iter()
        .copied()
        .find(|t| words.iter().any(|w| w == t.name()))
        .unwrap_or(QuestionType::Others)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScores {
    pub id: String,
    pub question_type: QuestionType,
    pub bleu: Vec<f64>,
    pub meteor_simplified: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeRow {
    pub question_type: QuestionType,
    pub count: usize,
    /// Mean simplified METEOR; `None` when no question has this type.
    pub meteor_simplified: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub examples: Vec<ExampleScores>,
    pub references: usize,
    /// Corpus BLEU-1..4.
    pub bleu: Vec<f64>,
    pub meteor_simplified: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub question_types: Vec<TypeRow>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples {}", self.examples.len())?;
        writeln!(f, "references {}", self.references)?;
        for (n, b) in self.bleu.iter().enumerate() {
            writeln!(f, "bleu_{} {b:.6}", n + 1)?;
        }
        writeln!(f, "meteor_simplified {:.6}", self.meteor_simplified)?;
        writeln!(f, "rouge_l {:.6}", self.rouge_l)?;
        writeln!(f, "cider {:.6}", self.cider)?;
        for row in &self.question_types {
            let score = row
                .meteor_simplified
                .map_or_else(|| "null".to_string(), |m| format!("{m:.6}"));
            writeln!(
                f,
                "question_type {} count {} meteor_simplified {score}",
                row.question_type.name(),
                row.count
            )?;
        }
        Ok(())
    }
}

/// One example to score: hypothesis, question and references as text.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub id: String,
    pub question: String,
    pub hypothesis: String,
    pub references: Vec<String>,
}

/// Scores every pair. Examples are sorted by id first, so the report does
/// not depend on input order.
pub fn evaluate_pairs(pairs: &[ScoredPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let mut sorted: Vec<&ScoredPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let hyps: Vec<Vec<String>> = sorted.iter().map(|p| split_words(&p.hypothesis)).collect();
    let refs: Vec<Vec<Vec<String>>> = sorted
        .iter()
        .map(|p| p.references.iter().map(|r| split_words(r)).collect())
        .collect();
    if let Some(p) = sorted.iter().zip(&refs).find(|(_, r)| r.is_empty()) {
        return Err(Error::Contract(format!("example `{}` has no reference", p.0.id)));
    }
    let ref_slices: Vec<Vec<&[String]>> = refs.iter().map(|rs| rs.iter().map(Vec::as_slice).collect()).collect();
    let hyp_slices: Vec<&[String]> = hyps.iter().map(Vec::as_slice).collect();
    let cider_scores = cider(&hyp_slices, &ref_slices)?;
    let pairs_for_bleu: Vec<(&[String], Vec<&[String]>)> =
        hyp_slices.iter().copied().zip(ref_slices.iter().cloned()).collect();
    let corpus_bleu_scores = corpus_bleu(&pairs_for_bleu, 4)?;
    let mut examples = Vec::with_capacity(sorted.len());
    for (i, p) in sorted.iter().enumerate() {
        examples.push(ExampleScores {
            id: p.id.clone(),
            question_type: classify_question(&p.question),
            bleu: bleu(hyp_slices[i], &ref_slices[i], 4)?,
            meteor_simplified: meteor_simplified(hyp_slices[i], &ref_slices[i]),
            rouge_l: rouge_l(hyp_slices[i], &ref_slices[i]),
            cider: cider_scores.per_example[i],
        });
    }
    let n = examples.len() as f64;
    let mut by_type: BTreeMap<QuestionType, (usize, f64)> = BTreeMap::new();
    for e in &examples {
        let entry = by_type.entry(e.question_type).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += e.meteor_simplified;
    }
    let question_types = QuestionType::ALL
        .iter()
        .map(|&t| {
            let (count, sum) = by_type.get(&t).copied().unwrap_or((0, 0.0));
            TypeRow {
                question_type: t,
                count,
                meteor_simplified: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect();
    Ok(MetricReport {
        references: sorted.iter().map(|p| p.references.len()).max().unwrap_or(0),
        bleu: corpus_bleu_scores,
        meteor_simplified: examples.iter().map(|e| e.meteor_simplified).sum::<f64>() / n,
        rouge_l: examples.iter().map(|e| e.rouge_l).sum::<f64>() / n,
        cider: cider_scores.corpus,
        question_types,
        examples,
    })
}

/// Pairs hypotheses (the `answer` field of `hypotheses`) with references.
/// References of an example are, in order, every reference file's `answer`
/// then its `references` entries; `max_refs` keeps only the first ones.
/// Ids must match exactly between the hypothesis file and every reference
/// file.
pub fn align_corpora(hypotheses: &Corpus, references: &[Corpus], max_refs: Option<usize>) -> Result<Vec<ScoredPair>> {
    if references.is_empty() {
        return Err(Error::Contract("at least one reference file is needed".into()));
    }
    if max_refs == Some(0) {
        return Err(Error::Config("--refs must be at least 1".into()));
    }
    let hyp_ids: BTreeMap<&str, usize> = hypotheses
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut problems = Vec::new();
    let mut ref_maps = Vec::with_capacity(references.len());
    for (f, refs) in references.iter().enumerate() {
        let map: BTreeMap<&str, usize> = refs.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
        for id in hyp_ids.keys().filter(|id| !map.contains_key(*id)) {
            problems.push(format!("`{id}` missing from reference file {f}"));
        }
        for id in map.keys().filter(|id| !hyp_ids.contains_key(*id)) {
            problems.push(format!("`{id}` missing from hypotheses"));
        }
        ref_maps.push(map);
    }
    if !problems.is_empty() {
        return Err(Error::Alignment(problems));
    }
    Ok(hypotheses
        .records
        .iter()
        .map(|h| {
            let mut texts: Vec<String> = Vec::new();
            for (refs, map) in references.iter().zip(&ref_maps) {
                let r = &refs.records[map[h.id.as_str()]];
                texts.extend(r.all_references().into_iter().map(str::to_string));
            }
            if let Some(k) = max_refs {
                texts.truncate(k);
            }
            let question = if h.question.is_empty() {
                references[0].records[ref_maps[0][h.id.as_str()]].question.clone()
            } else {
                h.question.clone()
            };
            ScoredPair {
                id: h.id.clone(),
                question,
                hypothesis: h.answer.clone(),
                references: texts,
            }
        })
        .collect())
}

pub fn evaluate_corpus(hypotheses: &Corpus, references: &[Corpus], max_refs: Option<usize>) -> Result<MetricReport> {
    evaluate_pairs(&align_corpora(hypotheses, references, max_refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        split_words(s)
    }

    #[test]
    fn bleu_examples() {
        let r = w("the cat");
        assert_eq!(modified_precision(&w("the the the the"), &[&r], 1), 0.25);
        let r = w("the cat sat on the mat");
        let b = bleu(&w("the cat sat"), &[&r], 3).unwrap();
        assert!((b[2] - (-1f64).exp()).abs() < 1e-6, "{b:?}");
        let same = bleu(&r, &[&r], 4).unwrap();
        assert_eq!(same[3], 1.0);
        assert_eq!(bleu(&Vec::<String>::new(), &[&r], 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn closest_reference_length_breaks_ties_short() {
        let a = [1, 2, 3];
        let b = [1, 2, 3, 4, 5];
        assert_eq!(closest_ref_len(4, &[&a[..], &b[..]]), 3);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&w("a b c d"), &[&w("a c b d")]), 0.75);
        assert_eq!(rouge_l(&w("x y"), &[&w("x y")]), 1.0);
        assert_eq!(rouge_l(&w("x y"), &[&w("p q")]), 0.0);
        assert_eq!(rouge_l(&Vec::<String>::new(), &[&w("p q")]), 0.0);
    }

    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        // longest subsequence of `a` (by subset enumeration) that is a
        // subsequence of `b`
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            if sub.len() > best {
                let mut it = b.iter();
                if sub.iter().all(|c| it.any(|d| d == c)) {
                    best = sub.len();
                }
            }
        }
        best
    }

    #[test]
    fn lcs_matches_brute_force_on_small_strings() {
        let seqs: Vec<Vec<u8>> = (0..=4usize)
            .flat_map(|len| {
                (0..3usize.pow(len as u32)).map(move |mut k| {
                    (0..len)
                        .map(|_| {
                            let c = (k % 3) as u8;
                            k /= 3;
                            c
                        })
                        .collect()
                })
            })
            .collect();
        for a in &seqs {
            for b in &seqs {
                assert_eq!(lcs_len(a, b), lcs_brute(a, b), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn cider_examples() {
        let r = w("a man is cooking in the kitchen");
        let s = cider(&[&r[..]], &[vec![&r[..]]]).unwrap();
        assert!((s.corpus - 10.0).abs() < 1e-9, "{s:?}");
        let h = w("zebra zebra");
        let corpus = cider(&[&h[..], &r[..]], &[vec![&r[..]], vec![&w("another reference here")[..]]]).unwrap();
        assert_eq!(corpus.per_example[0], 0.0);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a: StableMap<&str, f64> = [("x", 1.0), ("y", 2.0)].into_iter().collect();
        let b: StableMap<&str, f64> = [("x", 3.0), ("z", 1.0)].into_iter().collect();
        let a2: StableMap<&str, f64> = a.iter().map(|(k, v)| (*k, 2.0 * v)).collect();
        let b2: StableMap<&str, f64> = b.iter().map(|(k, v)| (*k, 2.0 * v)).collect();
        let c1 = sparse_cosine(&a, &b).unwrap();
        assert!((c1 - sparse_cosine(&a2, &b2).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn meteor_examples() {
        let ten = w("a b c d e f g h i j");
        assert!((meteor_simplified(&ten, &[&ten]) - 0.9995).abs() < 1e-12);
        let one = w("yes");
        assert_eq!(meteor_simplified(&one, &[&one]), 0.5);
        assert_eq!(meteor_simplified(&w("no"), &[&one]), 0.0);
    }

    #[test]
    fn meteor_alignment_prefers_continuing_chunks() {
        // greedy leftmost would jump to the first "a"; continuing the chunk
        // keeps a single run
        let (m, chunks) = align(&w("x a"), &w("a x a"));
        assert_eq!((m, chunks), (2, 1));
    }

    #[test]
    fn question_types() {
        assert_eq!(classify_question("what is the woman holding ?"), QuestionType::What);
        assert_eq!(classify_question("can you hear any noise ?"), QuestionType::Others);
        assert_eq!(classify_question("how does the video end ?"), QuestionType::How);
        assert_eq!(classify_question("how and why , and what ?"), QuestionType::What);
        assert_eq!(classify_question("Who's there"), QuestionType::Who);
        assert_eq!(classify_question("somewhat odd"), QuestionType::Others);
    }

    fn pair(id: &str, q: &str, h: &str, refs: &[&str]) -> ScoredPair {
        ScoredPair {
            id: id.into(),
            question: q.into(),
            hypothesis: h.into(),
            references: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn report_is_order_invariant_and_total() {
        let pairs = vec![
            pair("b", "what is it ?", "a box of clothes", &["a box of clothes"]),
            pair("a", "how many ?", "two people are there", &["there are two people"]),
            pair("c", "is it dark ?", "yes it is", &["no it is not"]),
        ];
        let report = evaluate_pairs(&pairs).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.reverse();
        assert_eq!(report, evaluate_pairs(&shuffled).unwrap());
        assert_eq!(report.question_types.len(), 8);
        let text = report.to_string();
        assert!(text.contains("question_type who count 0 meteor_simplified null"), "{text}");
        assert!(text.contains("question_type what count 1"));
    }

    #[test]
    fn identical_hypotheses_score_one() {
        let pairs = vec![
            pair("1", "what ?", "a man walks in the door", &["a man walks in the door"]),
            pair("2", "who ?", "the woman is cooking dinner now", &["the woman is cooking dinner now"]),
        ];
        let r = evaluate_pairs(&pairs).unwrap();
        assert_eq!(r.bleu, vec![1.0; 4]);
        assert_eq!(r.rouge_l, 1.0);
    }

    #[test]
    fn bleu_can_rise_with_order() {
        // clipped unigram precision 2/3, bigram precision 1
        let b = bleu(&[2, 1, 2], &[&[1, 2, 1][..]], 2).unwrap();
        assert!((b[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((b[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(b[1] > b[0]);
    }

    fn arb_sentence() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..6, 0..12)
    }

    proptest! {
        #[test]
        fn clipped_matches_are_non_increasing_in_n(h in arb_sentence(), r in arb_sentence()) {
            prop_assume!(!r.is_empty());
            // every clipped (n+1)-gram match is bounded by its prefix n-gram's
            let matches = |n: usize| modified_precision(&h, &[&r[..]], n) * (h.len() + 1 - n) as f64;
            for n in 1..h.len().min(4) {
                prop_assert!(matches(n + 1) <= matches(n) + 1e-9, "n {n}");
            }
            let b = bleu(&h, &[&r[..]], 4).unwrap();
            for v in b {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn multi_reference_is_at_least_single(h in arb_sentence(), r1 in arb_sentence(), r2 in arb_sentence()) {
            prop_assume!(!r1.is_empty() && !r2.is_empty());
            let both = [&r1[..], &r2[..]];
            for single in [&r1[..], &r2[..]] {
                prop_assert!(rouge_l(&h, &both) >= rouge_l(&h, &[single]));
                prop_assert!(meteor_simplified(&h, &both) >= meteor_simplified(&h, &[single]));
            }
            let m = meteor_simplified(&h, &both);
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
