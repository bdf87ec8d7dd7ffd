//! Edit-distance alignment, CER, WER and unigram BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::CharVocabulary;
use crate::error::{Error, Result};

/// Counts of one minimal alignment of a hypothesis against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl EditAlignment {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; may exceed 1.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn accumulate(&mut self, other: &EditAlignment) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_len += other.reference_len;
    }
}

/// Unit-cost DP alignment. Backtracking prefers substitution (or match),
/// then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<EditAlignment> {
    if reference.is_empty() {
        return Err(Error::InvalidInput("reference must be nonempty".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut out = EditAlignment {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[(i - 1) * w + j - 1] + diff == here {
                out.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    Ok(out)
}

/// Uppercases and trims, the same normalization applied to transcripts.
pub fn normalize(text: &str) -> String {
    CharVocabulary::normalize(text)
}

pub fn words(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

pub fn chars(text: &str) -> Vec<char> {
    normalize(text).chars().collect()
}

pub fn word_alignment(reference: &str, hypothesis: &str) -> Result<EditAlignment> {
    align(&words(reference), &words(hypothesis))
}

pub fn char_alignment(reference: &str, hypothesis: &str) -> Result<EditAlignment> {
    align(&chars(reference), &chars(hypothesis))
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    Ok(word_alignment(reference, hypothesis)?.rate())
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    Ok(char_alignment(reference, hypothesis)?.rate())
}

/// Clipped unigram matches, hypothesis length, reference length.
fn unigram_counts(reference: &[String], hypothesis: &[String]) -> (usize, usize, usize) {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w).or_default() += 1;
    }
    let mut hyp_counts: HashMap<&str, usize> = HashMap::new();
    for w in hypothesis {
        *hyp_counts.entry(w).or_default() += 1;
    }
    let matched = hyp_counts
        .iter()
        .map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    (matched, hypothesis.len(), reference.len())
}

fn bleu_from_counts(matched: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let precision = matched as f64 / hyp_len as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    precision * bp
}

/// Clipped unigram precision times `exp(min(0, 1 − |ref|/|hyp|))`.
pub fn unigram_bleu(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::InvalidInput("reference must be nonempty".into()));
    }
    let (m, h, n) = unigram_counts(&r, &words(hypothesis));
    Ok(bleu_from_counts(m, h, n))
}

/// Micro-averaged scores over a set of (reference, hypothesis) pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub utterances: usize,
    pub chars: EditAlignment,
    pub words: EditAlignment,
    pub cer: f64,
    pub wer: f64,
    /// Corpus-level BLEU from pooled clipped counts and lengths.
    pub bleu: f64,
    /// Mean of per-sentence BLEU.
    pub sentence_bleu: f64,
    pub per_utterance: Vec<UtteranceScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub cer: f64,
    pub wer: f64,
    pub bleu: f64,
}

pub fn score_corpus<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<CorpusScores> {
    let mut out = CorpusScores::default();
    let (mut matched, mut hyp_len, mut ref_len) = (0, 0, 0);
    let mut bleu_sum = 0.0;
    for (r, h) in pairs {
        let c = char_alignment(r, h)?;
        let w = word_alignment(r, h)?;
        let (m, hl, rl) = unigram_counts(&words(r), &words(h));
        let b = bleu_from_counts(m, hl, rl);
        matched += m;
        hyp_len += hl;
        ref_len += rl;
        bleu_sum += b;
        out.chars.accumulate(&c);
        out.words.accumulate(&w);
        out.per_utterance.push(UtteranceScore {
            cer: c.rate(),
            wer: w.rate(),
            bleu: b,
        });
        out.utterances += 1;
    }
    if out.utterances == 0 {
        return Err(Error::InvalidInput("no utterances to score".into()));
    }
    out.cer = out.chars.rate();
    out.wer = out.words.rate();
    out.bleu = bleu_from_counts(matched, hyp_len, ref_len);
    out.sentence_bleu = bleu_sum / out.utterances as f64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_has_no_errors() {
        let a = word_alignment("PUT BLUE AT A 1 NOW", "PUT BLUE AT A 1 NOW").unwrap();
        assert_eq!(a.errors(), 0);
        assert_eq!(a.reference_len, 6);
    }

    #[test]
    fn two_deletions() {
        let a = word_alignment("THE CAT SAT ON THE MAT", "THE CAT SAT MAT").unwrap();
        assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 2, 0));
        assert!((a.rate() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn rate_can_exceed_one() {
        let a = word_alignment("A", "B C").unwrap();
        assert_eq!((a.substitutions, a.deletions, a.insertions), (1, 0, 1));
        assert_eq!(a.rate(), 2.0);
    }

    #[test]
    fn tie_break_prefers_substitution() {
        // "AB" -> "BA": two substitutions and one deletion + insertion both cost 2.
        let a = align(&['A', 'B'], &['B', 'A']).unwrap();
        assert_eq!((a.substitutions, a.deletions, a.insertions), (2, 0, 0));
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("ABCDEFGHIJ", "ABCDEFGHIX").unwrap(), 0.1);
        assert_eq!(cer("ABC", "").unwrap(), 1.0);
        assert_eq!(wer("bin blue", "BIN BLUE").unwrap(), 0.0);
        assert!(cer("", "A").is_err());
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(unigram_bleu("A B C", "A B C").unwrap(), 1.0);
        assert!((unigram_bleu("A B C", "A B").unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        assert!((unigram_bleu("X A B C D", "X X X X X").unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(unigram_bleu("A", "").unwrap(), 0.0);
    }

    #[test]
    fn corpus_scores_are_micro_averaged() {
        let s = score_corpus([("A B", "A B"), ("A B C D", "")]).unwrap();
        assert_eq!(s.words.errors(), 4);
        assert!((s.wer - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.per_utterance.len(), 2);
    }
}
