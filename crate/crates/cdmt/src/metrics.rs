//! Translation quality metrics: corpus BLEU, smoothed sentence BLEU,
//! TER with greedy block shifts, and chrF.
//!
//! Word tokenization is whitespace splitting after trimming. Desk-scale
//! text is machine-generated cipher text, so punctuation handling never
//! comes up; scores on natural text can differ slightly from
//! punctuation-splitting tokenizers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_BLEU_ORDER: usize = 4;
const CHRF_MAX_N: usize = 6;
const CHRF_BETA: f64 = 2.0;
/// Longest word span considered by the TER shift search.
const MAX_SHIFT_LEN: usize = 10;
/// Shift search is skipped for hypotheses longer than this.
const MAX_SHIFT_WORDS: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_bleu: Option<Vec<f64>>,
    pub ter: f64,
    pub chrf: f64,
    pub n_sentences: usize,
}

fn words(text: &str) -> Vec<&str> {
    text.trim().split_whitespace().collect()
}

fn ngram_counts(tokens: &[&str], n: usize) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1}")).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram total for one pair.
pub(crate) fn modified_precision_stats(hyp: &str, reference: &str, n: usize) -> (u64, u64) {
    let hyp_words = words(hyp);
    let ref_words = words(reference);
    let hyp_counts = ngram_counts(&hyp_words, n);
    let ref_counts = ngram_counts(&ref_words, n);
    let total: u64 = hyp_counts.values().sum();
    let matched: u64 = hyp_counts
        .iter()
        .map(|(gram, &count)| count.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

fn brevity_penalty(hyp_len: u64, ref_len: u64) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU: geometric mean of modified n-gram precisions (n = 1..4)
/// over the whole corpus, times the brevity penalty, scaled to [0, 100].
/// No smoothing: any empty precision zeroes the score.
pub fn corpus_bleu(hyps: &[&str], refs: &[&str]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let mut matched = [0u64; MAX_BLEU_ORDER];
    let mut total = [0u64; MAX_BLEU_ORDER];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hyps.iter().zip(refs) {
        hyp_len += words(hyp).len() as u64;
        ref_len += words(reference).len() as u64;
        for n in 1..=MAX_BLEU_ORDER {
            let (m, t) = modified_precision_stats(hyp, reference, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_BLEU_ORDER {
        if matched[n] == 0 || total[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * (log_sum / MAX_BLEU_ORDER as f64).exp())
}

/// Sentence BLEU with exponential smoothing: the k-th n-gram order with a
/// zero match count scores `1 / (2^k * total)`. Orders beyond the
/// hypothesis length are dropped (effective order).
pub fn sentence_bleu(hyp: &str, reference: &str) -> Result<f64> {
    if words(reference).is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    let hyp_len = words(hyp).len() as u64;
    let ref_len = words(reference).len() as u64;
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=MAX_BLEU_ORDER {
        let (m, t) = modified_precision_stats(hyp, reference, n);
        if t == 0 {
            break;
        }
        orders += 1;
        let p = if m == 0 {
            smooth *= 2.0;
            1.0 / (smooth * t as f64)
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    if orders == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * (log_sum / orders as f64).exp())
}

fn levenshtein(a: &[String], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, wa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, wb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(wa != wb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn contains_span(reference: &[&str], span: &[String]) -> bool {
    reference
        .windows(span.len())
        .any(|w| w.iter().zip(span).all(|(a, b)| *a == b))
}

fn apply_shift(current: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(current.len());
    rest.extend_from_slice(&current[..start]);
    rest.extend_from_slice(&current[start + len..]);
    let mut out = Vec::with_capacity(current.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&current[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Translation Edit Rate: `(edits / reference length) * 100`, edits being
/// insertions, deletions, substitutions and block shifts. Shifts follow the
/// greedy heuristic — repeatedly apply the shift that most reduces the
/// remaining edit distance (a shifted span must literally occur in the
/// reference, and a shift counts as one edit, so it must buy at least two).
pub fn ter(hyp: &str, reference: &str) -> Result<f64> {
    let ref_words = words(reference);
    if ref_words.is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    let mut current: Vec<String> = words(hyp).iter().map(|w| w.to_string()).collect();
    let mut shifts = 0usize;
    loop {
        let base = levenshtein(&current, &ref_words);
        if base == 0 || current.is_empty() || current.len() > MAX_SHIFT_WORDS {
            break;
        }
        let mut best: Option<(usize, Vec<String>)> = None;
        for start in 0..current.len() {
            for len in 1..=MAX_SHIFT_LEN.min(current.len() - start) {
                let span = &current[start..start + len];
                if !contains_span(&ref_words, span) {
                    continue;
                }
                for dest in 0..=(current.len() - len) {
                    if dest == start {
                        continue;
                    }
                    let shifted = apply_shift(&current, start, len, dest);
                    let d = levenshtein(&shifted, &ref_words);
                    // net improvement: the shift itself costs one edit
                    if d + 1 < base && best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                        best = Some((d, shifted));
                    }
                }
            }
        }
        match best {
            Some((_, shifted)) => {
                current = shifted;
                shifts += 1;
            }
            None => break,
        }
    }
    let edits = shifts + levenshtein(&current, &ref_words);
    Ok(edits as f64 / ref_words.len() as f64 * 100.0)
}

fn char_ngram_stats(hyp: &str, reference: &str, n: usize) -> (u64, u64, u64) {
    let strip = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    let count = |chars: &[char]| -> HashMap<String, u64> {
        let mut m = HashMap::new();
        if chars.len() >= n {
            for w in chars.windows(n) {
                *m.entry(w.iter().collect::<String>()).or_insert(0) += 1;
            }
        }
        m
    };
    let hyp_counts = count(&strip(hyp));
    let ref_counts = count(&strip(reference));
    let total_hyp: u64 = hyp_counts.values().sum();
    let total_ref: u64 = ref_counts.values().sum();
    let matched: u64 = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, total_hyp, total_ref)
}

fn chrf_from_stats(stats: &[(u64, u64, u64)], beta: f64) -> f64 {
    let beta2 = beta * beta;
    let mut score = 0.0;
    let mut orders = 0;
    for &(matched, total_hyp, total_ref) in stats {
        if total_hyp == 0 && total_ref == 0 {
            continue;
        }
        orders += 1;
        let prec = if total_hyp > 0 {
            matched as f64 / total_hyp as f64
        } else {
            0.0
        };
        let rec = if total_ref > 0 {
            matched as f64 / total_ref as f64
        } else {
            0.0
        };
        let denom = beta2 * prec + rec;
        if denom > 0.0 {
            score += (1.0 + beta2) * prec * rec / denom;
        }
    }
    if orders == 0 {
        0.0
    } else {
        100.0 * score / orders as f64
    }
}

/// chrF with explicit order and beta (whitespace excluded from n-grams).
pub fn chrf_with(hyp: &str, reference: &str, max_n: usize, beta: f64) -> Result<f64> {
    if reference.trim().is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    let stats: Vec<_> = (1..=max_n)
        .map(|n| char_ngram_stats(hyp, reference, n))
        .collect();
    Ok(chrf_from_stats(&stats, beta))
}

/// Sentence chrF: character n-gram F2 averaged over n = 1..6.
pub fn chrf(hyp: &str, reference: &str) -> Result<f64> {
    chrf_with(hyp, reference, CHRF_MAX_N, CHRF_BETA)
}

/// Corpus chrF: n-gram statistics pooled over all pairs before the F-score.
pub fn corpus_chrf(hyps: &[&str], refs: &[&str]) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::Metric("corpus chrF needs matched non-empty lists".into()));
    }
    let mut stats = vec![(0u64, 0u64, 0u64); CHRF_MAX_N];
    for (hyp, reference) in hyps.iter().zip(refs) {
        for (n, slot) in stats.iter_mut().enumerate() {
            let (m, th, tr) = char_ngram_stats(hyp, reference, n + 1);
            slot.0 += m;
            slot.1 += th;
            slot.2 += tr;
        }
    }
    Ok(chrf_from_stats(&stats, CHRF_BETA))
}

/// Corpus TER: total edits over total reference length.
pub fn corpus_ter(hyps: &[&str], refs: &[&str]) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::Metric("corpus TER needs matched non-empty lists".into()));
    }
    let mut edits = 0.0;
    let mut ref_total = 0u64;
    for (hyp, reference) in hyps.iter().zip(refs) {
        let ref_len = words(reference).len() as u64;
        if ref_len == 0 {
            return Err(Error::Metric("empty reference".into()));
        }
        edits += ter(hyp, reference)? / 100.0 * ref_len as f64;
        ref_total += ref_len;
    }
    Ok(edits / ref_total as f64 * 100.0)
}

/// Full corpus report. `with_sentence_bleu` adds per-sentence smoothed BLEU.
pub fn evaluate(hyps: &[&str], refs: &[&str], with_sentence_bleu: bool) -> Result<EvalReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let sentence_bleu_scores = if with_sentence_bleu {
        Some(
            hyps.iter()
                .zip(refs)
                .map(|(h, r)| sentence_bleu(h, r))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(EvalReport {
        corpus_bleu: corpus_bleu(hyps, refs)?,
        sentence_bleu: sentence_bleu_scores,
        ter: corpus_ter(hyps, refs)?,
        chrf: corpus_chrf(hyps, refs)?,
        n_sentences: hyps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_corpora_score_perfectly() {
        let text = vec!["the quick brown fox jumps", "over the lazy dog today"];
        assert_eq!(corpus_bleu(&text, &text).unwrap(), 100.0);
        assert_eq!(corpus_ter(&text, &text).unwrap(), 0.0);
        assert_eq!(corpus_chrf(&text, &text).unwrap(), 100.0);
        let report = evaluate(&text, &text, true).unwrap();
        assert_eq!(report.corpus_bleu, 100.0);
        assert_eq!(report.ter, 0.0);
        assert_eq!(report.chrf, 100.0);
        assert_eq!(report.n_sentences, 2);
        assert!(report
            .sentence_bleu
            .unwrap()
            .iter()
            .all(|&s| (s - 100.0).abs() < 1e-12));
    }

    #[test]
    fn disjoint_unigrams_score_zero() {
        assert_eq!(corpus_bleu(&["x y z"], &["a b c"]).unwrap(), 0.0);
        assert_eq!(chrf("xyz", "abc").unwrap(), 0.0);
    }

    #[test]
    fn unigram_clipping_caps_repeated_words() {
        // "the" appears once in the reference, so only one of four copies
        // counts; higher orders are empty, so BLEU collapses to zero.
        let (matched, total) = modified_precision_stats("the the the the", "the cat", 1);
        assert_eq!((matched, total), (1, 4));
        assert_eq!(corpus_bleu(&["the the the the"], &["the cat"]).unwrap(), 0.0);
    }

    #[test]
    fn corpus_bleu_rejects_mismatched_or_empty_input() {
        assert!(corpus_bleu(&["a"], &[]).is_err());
        let empty: [&str; 0] = [];
        assert!(corpus_bleu(&empty, &empty).is_err());
    }

    #[test]
    fn sentence_bleu_perfect_match() {
        assert!((sentence_bleu("a b c d", "a b c d").unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_bleu_reported_sample() {
        let hyp = "i know he need a guarantee for four years.";
        let reference = "i know he would like a four - year guarantee.";
        let score = sentence_bleu(hyp, reference).unwrap();
        assert!(
            (score - 17.47).abs() <= 1.0,
            "smoothed sentence BLEU {score} outside 17.47 +/- 1.0"
        );
    }

    #[test]
    fn sentence_bleu_smoothing_by_hand() {
        // hyp "a b c", ref "a b d": p1 = 2/3, p2 = 1/2, p3 smoothed to
        // 1/(2*1); the 4-gram order is dropped (no 4-grams in a 3-word hyp)
        let score = sentence_bleu("a b c", "a b d").unwrap();
        let expect = 100.0 * ((2.0f64 / 3.0) * 0.5 * 0.5).powf(1.0 / 3.0);
        assert!((score - expect).abs() < 1e-9, "{score} vs {expect}");
    }

    #[test]
    fn full_ngram_match_aligns_sentence_and_corpus_scores() {
        let hyp = "a b c d e";
        let reference = "a b c d e f";
        let s = sentence_bleu(hyp, reference).unwrap();
        let c = corpus_bleu(&[hyp], &[reference]).unwrap();
        assert!((s - c).abs() < 1e-12, "sentence {s} vs corpus {c}");
    }

    #[test]
    fn ter_hand_cases() {
        assert_eq!(ter("a b c", "a b c").unwrap(), 0.0);
        let one_insertion = ter("a b c d", "a b c").unwrap();
        assert!((one_insertion - 100.0 / 3.0).abs() < 1e-6);
        let one_shift = ter("c d a b", "a b c d").unwrap();
        assert!((one_shift - 25.0).abs() < 1e-6);
    }

    #[test]
    fn ter_rejects_empty_reference() {
        assert!(ter("a", "").is_err());
        assert!(ter("a", "   ").is_err());
    }

    #[test]
    fn ter_shift_must_pay_for_itself() {
        // one shift saving two substitutions is worth it
        let score = ter("b a", "a b").unwrap();
        assert!((score - 50.0).abs() < 1e-6, "{score}");
        // here any single-word shift saves only one edit, so plain edits win
        let score = ter("b a", "a b c").unwrap();
        assert!((score - 200.0 / 3.0).abs() < 1e-6, "{score}");
    }

    #[test]
    fn chrf_brute_force_oracle_small_case() {
        // "abc" vs "abd", n up to 2, beta = 2, by exhaustive enumeration:
        // n=1: matched {a, b} = 2 of 3 -> p = r = 2/3, F = 2/3
        // n=2: matched {ab} = 1 of 2 -> p = r = 1/2, F = 1/2
        let score = chrf_with("abd", "abc", 2, 2.0).unwrap();
        let expect = 100.0 * (2.0 / 3.0 + 0.5) / 2.0;
        assert!((score - expect).abs() < 1e-9, "{score} vs {expect}");
    }

    #[test]
    fn chrf_ignores_whitespace_placement() {
        let a = chrf("ab cd", "abcd").unwrap();
        assert_eq!(a, 100.0);
    }

    #[test]
    fn metrics_ignore_trailing_whitespace_and_space_runs() {
        let hyp = "a b  c ";
        let clean = "a b c";
        assert_eq!(
            corpus_bleu(&[hyp], &["a b c"]).unwrap(),
            corpus_bleu(&[clean], &["a b c"]).unwrap()
        );
        assert_eq!(ter(hyp, "a b c").unwrap(), ter(clean, "a b c").unwrap());
        assert_eq!(chrf(hyp, "a b c").unwrap(), chrf(clean, "a b c").unwrap());
        assert_eq!(
            sentence_bleu(hyp, "a b c").unwrap(),
            sentence_bleu(clean, "a b c").unwrap()
        );
    }

    #[test]
    fn evaluate_checks_lengths() {
        assert!(evaluate(&["a"], &["a", "b"], false).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scores_stay_in_range(
            hyp in "[abc ]{0,24}",
            reference in "[abc]{1,8}( [abc]{1,8}){0,3}",
        ) {
            let b = sentence_bleu(&hyp, &reference).unwrap();
            prop_assert!((0.0..=100.0).contains(&b));
            let c = chrf(&hyp, &reference).unwrap();
            prop_assert!((0.0..=100.0).contains(&c));
            let t = ter(&hyp, &reference).unwrap();
            prop_assert!(t >= 0.0);
        }

        #[test]
        fn shifts_never_increase_ter(
            hyp in "[ab]{1,2}( [ab]{1,2}){0,5}",
            reference in "[ab]{1,2}( [ab]{1,2}){0,5}",
        ) {
            let with_shifts = ter(&hyp, &reference).unwrap();
            let hyp_words: Vec<String> = hyp.split_whitespace().map(String::from).collect();
            let ref_words: Vec<&str> = reference.split_whitespace().collect();
            let plain = levenshtein(&hyp_words, &ref_words) as f64
                / ref_words.len() as f64 * 100.0;
            prop_assert!(with_shifts <= plain + 1e-9);
        }
    }
}
