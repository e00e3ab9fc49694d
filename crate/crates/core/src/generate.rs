//! Autoregressive decoding: greedy and length-normalized beam search.

use std::cmp::Ordering;

use crate::data::vocab::{EOS, SOS};
use crate::error::{Error, Result};

/// Anything that can score the next token given a `<sos>`-led prefix.
pub trait NextToken {
    /// Vocabulary logits for the position after `prefix`.
    fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    /// Output tokens without `<sos>`; ends in `<eos>` unless truncated.
    pub tokens: Vec<usize>,
    /// True when `max_len` was reached before `<eos>`.
    pub truncated: bool,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Index of the first maximum.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn generate<D: NextToken + ?Sized>(decoder: &D, mode: DecodeMode, max_len: usize) -> Result<Generated> {
    match mode {
        DecodeMode::Greedy => greedy(decoder, max_len),
        DecodeMode::Beam(width) => beam(decoder, width, max_len),
    }
}

pub fn greedy<D: NextToken + ?Sized>(decoder: &D, max_len: usize) -> Result<Generated> {
    let mut prefix = vec![SOS];
    for _ in 0..max_len {
        let next = argmax(&log_softmax(&decoder.next_logits(&prefix)?));
        prefix.push(next);
        if next == EOS {
            return Ok(Generated {
                tokens: prefix[1..].to_vec(),
                truncated: false,
            });
        }
    }
    Ok(Generated {
        tokens: prefix[1..].to_vec(),
        truncated: true,
    })
}

struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Keeps the `width` best partial hypotheses by summed log-probability and
/// picks the finished hypothesis with the best per-token log-probability.
/// With `width == 1` this makes the same choices as [`greedy`].
pub fn beam<D: NextToken + ?Sized>(decoder: &D, width: usize, max_len: usize) -> Result<Generated> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        // (total, step log-prob, hypothesis, token)
        let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (h, hyp) in active.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(SOS);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = log_softmax(&decoder.next_logits(&prefix)?);
            candidates.extend(lp.iter().enumerate().map(|(tok, &l)| (hyp.log_prob + l, l, h, tok)));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::with_capacity(width);
        for &(total, _, h, tok) in candidates.iter().take(width) {
            let mut tokens = active[h].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis { tokens, log_prob: total };
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        active = next;
        if active.is_empty() || finished.len() >= width {
            break;
        }
    }
    let pick = |pool: &[Hypothesis]| {
        let mut best = 0;
        for (i, h) in pool.iter().enumerate() {
            if h.score() > pool[best].score() {
                best = i;
            }
        }
        best
    };
    if !finished.is_empty() {
        let i = pick(&finished);
        return Ok(Generated {
            tokens: finished.swap_remove(i).tokens,
            truncated: false,
        });
    }
    let i = pick(&active);
    Ok(Generated {
        tokens: active.swap_remove(i).tokens,
        truncated: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scores follow a fixed table keyed by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl NextToken for Table {
        fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0[(prefix.len() - 1).min(self.0.len() - 1)].clone())
        }
    }

    #[test]
    fn greedy_stops_at_eos() {
        let t = Table(vec![vec![0.0, 0.0, 0.0, 0.0, 5.0], vec![0.0, 0.0, 9.0, 0.0, 1.0]]);
        let out = greedy(&t, 10).unwrap();
        assert_eq!(out.tokens, vec![4, EOS]);
        assert!(!out.truncated);
    }

    #[test]
    fn max_len_one_truncates() {
        let t = Table(vec![vec![0.0, 0.0, 0.0, 0.0, 5.0]]);
        let out = greedy(&t, 1).unwrap();
        assert_eq!(out.tokens, vec![4]);
        assert!(out.truncated);
        let out = beam(&t, 3, 1).unwrap();
        assert_eq!(out.tokens.len(), 1);
        assert!(out.truncated);
    }

    #[test]
    fn beam_one_matches_greedy() {
        let t = Table(vec![
            vec![0.1, 0.0, 0.3, 2.0, 2.0],
            vec![0.0, 0.0, 1.0, 1.5, 0.2],
            vec![0.0, 0.0, 3.0, 0.0, 0.0],
        ]);
        assert_eq!(greedy(&t, 8).unwrap(), beam(&t, 1, 8).unwrap());
    }

    #[test]
    fn wider_beam_can_beat_greedy() {
        // greedy takes token 4 (p≈0.5) then faces a flat distribution;
        // token 3 (p≈0.45) leads to a confident <eos>.
        struct Fork;
        impl NextToken for Fork {
            fn next_logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
                Ok(match prefix {
                    [SOS] => vec![-9.0, -9.0, -9.0, 0.0, 0.1],
                    [SOS, 3] => vec![-9.0, -9.0, 9.0, -9.0, -9.0],
                    _ => vec![0.0, 0.0, 0.0, 0.0, 0.0],
                })
            }
        }
        assert_eq!(greedy(&Fork, 2).unwrap().tokens[0], 4);
        assert_eq!(beam(&Fork, 2, 4).unwrap().tokens, vec![3, EOS]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
