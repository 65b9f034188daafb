//! Character and word error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, in O(min(n, m)) memory.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, x) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[short.len()]
}

/// Edit distance divided by the reference length.
pub fn error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

fn strip_markers(s: &str) -> String {
    s.replace("<sos>", "").replace("<eos>", "")
}

fn chars(s: &str) -> Vec<char> {
    strip_markers(s).chars().collect()
}

fn words(s: &str) -> Vec<String> {
    strip_markers(s).split_whitespace().map(str::to_owned).collect()
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    error_rate(&chars(reference), &chars(hypothesis))
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    error_rate(&words(reference), &words(hypothesis))
}

/// One scored utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub cer: f64,
    pub wer: f64,
}

/// Corpus-level rates: total edits over total reference length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub utterances: usize,
    pub cer: f64,
    pub wer: f64,
    pub char_errors: usize,
    pub ref_chars: usize,
    pub word_errors: usize,
    pub ref_words: usize,
}

/// Scores `(id, reference, hypothesis)` triples.
pub fn score(pairs: &[(String, String, String)]) -> Result<(Vec<UtteranceScore>, ScoreSummary)> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut sum = ScoreSummary::default();
    for (id, r, h) in pairs {
        let (rc, hc) = (chars(r), chars(h));
        let (rw, hw) = (words(r), words(h));
        if rc.is_empty() || rw.is_empty() {
            return Err(Error::Utterance {
                id: id.clone(),
                source: Box::new(Error::invalid("empty reference")),
            });
        }
        let ce = edit_distance(&rc, &hc);
        let we = edit_distance(&rw, &hw);
        sum.utterances += 1;
        sum.char_errors += ce;
        sum.ref_chars += rc.len();
        sum.word_errors += we;
        sum.ref_words += rw.len();
        rows.push(UtteranceScore {
            utterance_id: id.clone(),
            reference: r.clone(),
            hyp: h.clone(),
            cer: ce as f64 / rc.len() as f64,
            wer: we as f64 / rw.len() as f64,
        });
    }
    if sum.utterances > 0 {
        sum.cer = sum.char_errors as f64 / sum.ref_chars as f64;
        sum.wer = sum.word_errors as f64 / sum.ref_words as f64;
    }
    Ok((rows, sum))
}

/// Fraction of reference occurrences of `targets` that the hypothesis also
/// contains (per utterance, counted with multiplicity). `None` when no
/// reference contains any of them.
pub fn word_recall(pairs: &[(String, String)], targets: &[String]) -> Option<f64> {
    recall_counts(pairs, targets).map(|(h, t)| h as f64 / t as f64)
}

fn recall_counts(pairs: &[(String, String)], targets: &[String]) -> Option<(usize, usize)> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, h) in pairs {
        let (rw, hw) = (words(r), words(h));
        for t in targets {
            let in_ref = rw.iter().filter(|x| *x == t).count();
            if in_ref == 0 {
                continue;
            }
            let in_hyp = hw.iter().filter(|x| *x == t).count();
            total += in_ref;
            hits += in_ref.min(in_hyp);
        }
    }
    (total > 0).then_some((hits, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full-table Wagner–Fischer.
    fn oracle(a: &[char], b: &[char]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn fixed_cases() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert_eq!(cer("abc", "").unwrap(), 1.0);
        assert_eq!(edit_distance(&['k', 'i', 't', 't', 'e', 'n'], &['s', 'i', 't', 't', 'i', 'n', 'g']), 3);
        assert_eq!(wer("the cat sat", "the bat sat down").unwrap(), 2.0 / 3.0);
        assert!(cer("", "x").is_err());
        assert!(wer("   ", "x").is_err());
    }

    #[test]
    fn markers_are_ignored() {
        assert_eq!(cer("ab c", "ab c<eos>").unwrap(), 0.0);
        assert_eq!(wer("ab c", "<sos>ab c<eos>").unwrap(), 0.0);
    }

    #[test]
    fn recall_counts_occurrences() {
        let targets = vec!["rigid".to_string(), "vast".to_string()];
        let pairs = vec![
            ("a rigid rigid b".to_string(), "a rigid b".to_string()),
            ("vast c".to_string(), "fast c".to_string()),
        ];
        assert_eq!(word_recall(&pairs, &targets), Some(1.0 / 3.0));
        assert_eq!(word_recall(&[("x".into(), "x".into())], &targets), None);
    }

    #[test]
    fn summary_is_corpus_level() {
        let pairs = vec![
            ("u1".to_string(), "ab".to_string(), "a".to_string()),
            ("u2".to_string(), "cdef".to_string(), "cdef".to_string()),
        ];
        let (rows, sum) = score(&pairs).unwrap();
        assert_eq!(rows[0].cer, 0.5);
        assert_eq!(sum.cer, 1.0 / 6.0);
        assert_eq!(sum.wer, 0.5);
    }

    proptest! {
        #[test]
        fn matches_quadratic_oracle(a in "[abc ]{0,12}", b in "[abc ]{0,12}") {
            let (x, y): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
            prop_assert_eq!(edit_distance(&x, &y), oracle(&x, &y));
            prop_assert_eq!(edit_distance(&x, &y), edit_distance(&y, &x));
        }
    }
}
