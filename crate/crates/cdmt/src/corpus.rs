//! Synthetic parallel corpora and external corpus ingestion.
//!
//! A cipher language is a character bijection over a shared base alphabet
//! plus a word-order rule. With a shared alphabet the composition of two
//! ciphers is itself a cipher, so a pair never seen during training is
//! still learnable in principle — the desk-scale analogue of zero-shot
//! translation through a pivot language.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive;

/// One sentence pair. The JSONL wire form is
/// `{"src": ..., "tgt": ..., "src_lang": ..., "tgt_lang": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    #[serde(rename = "src")]
    pub src_text: String,
    #[serde(rename = "tgt")]
    pub tgt_text: String,
    #[serde(default)]
    pub src_lang: String,
    #[serde(default)]
    pub tgt_lang: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordOrder {
    Identity,
    Reverse,
}

/// A synthetic language: a bijective character substitution over the base
/// alphabet plus a word-order rule.
#[derive(Debug, Clone)]
pub struct CipherLanguageSpec {
    pub tag: String,
    alphabet: Vec<char>,
    /// alphabet[i] maps to image[i]
    image: Vec<char>,
    pub order: WordOrder,
}

impl CipherLanguageSpec {
    pub fn identity(tag: &str, alphabet: &[char]) -> CipherLanguageSpec {
        CipherLanguageSpec {
            tag: tag.to_string(),
            alphabet: alphabet.to_vec(),
            image: alphabet.to_vec(),
            order: WordOrder::Identity,
        }
    }

    /// Permutation derived deterministically from (seed, tag).
    pub fn from_seed(tag: &str, alphabet: &[char], order: WordOrder, seed: u64) -> CipherLanguageSpec {
        let mut image = alphabet.to_vec();
        let mut rng = derive(seed, &format!("cipher-perm:{tag}"), 0, 0);
        image.shuffle(&mut rng);
        CipherLanguageSpec {
            tag: tag.to_string(),
            alphabet: alphabet.to_vec(),
            image,
            order,
        }
    }

    pub fn from_parts(
        tag: &str,
        alphabet: &[char],
        image: &[char],
        order: WordOrder,
    ) -> Result<CipherLanguageSpec> {
        if alphabet.len() != image.len() {
            return Err(Error::Corpus("cipher image length mismatch".into()));
        }
        let mut sorted_a = alphabet.to_vec();
        let mut sorted_i = image.to_vec();
        sorted_a.sort_unstable();
        sorted_i.sort_unstable();
        sorted_a.dedup();
        if sorted_a.len() != alphabet.len() || sorted_a != sorted_i {
            return Err(Error::Corpus(
                "cipher must be a bijection over the alphabet".into(),
            ));
        }
        Ok(CipherLanguageSpec {
            tag: tag.to_string(),
            alphabet: alphabet.to_vec(),
            image: image.to_vec(),
            order,
        })
    }

    fn map(&self, c: char, inverse: bool) -> char {
        let (from, to) = if inverse {
            (&self.image, &self.alphabet)
        } else {
            (&self.alphabet, &self.image)
        };
        match from.iter().position(|&a| a == c) {
            Some(i) => to[i],
            None => c,
        }
    }

    /// Base sentence -> surface form of this language.
    pub fn apply(&self, base: &str) -> String {
        let mut words: Vec<String> = base
            .split(' ')
            .map(|w| w.chars().map(|c| self.map(c, false)).collect())
            .collect();
        if self.order == WordOrder::Reverse {
            words.reverse();
        }
        words.join(" ")
    }

    /// Surface form -> base sentence. Inverse of [`apply`](Self::apply).
    pub fn invert(&self, surface: &str) -> String {
        let mut words: Vec<String> = surface
            .split(' ')
            .map(|w| w.chars().map(|c| self.map(c, true)).collect())
            .collect();
        if self.order == WordOrder::Reverse {
            words.reverse();
        }
        words.join(" ")
    }
}

fn random_sentence(
    alphabet: &[char],
    sentence_len: (usize, usize),
    word_len: (usize, usize),
    rng: &mut impl Rng,
) -> String {
    let n_words = rng.random_range(sentence_len.0..=sentence_len.1);
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let n_chars = rng.random_range(word_len.0..=word_len.1);
        let word: String = (0..n_chars)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect();
        words.push(word);
    }
    words.join(" ")
}

/// Generate parallel data for each listed pair, emitting both directions of
/// every pair (the two directions of the same base sentence). Deterministic
/// given the seed.
pub fn gen_cipher_corpus(
    specs: &[CipherLanguageSpec],
    pairs: &[(String, String)],
    n_per_pair: usize,
    sentence_len: (usize, usize),
    word_len: (usize, usize),
    seed: u64,
) -> Result<Vec<ParallelExample>> {
    if n_per_pair == 0 {
        return Err(Error::Corpus("n_per_pair must be >= 1".into()));
    }
    if sentence_len.0 == 0 || word_len.0 == 0 || sentence_len.0 > sentence_len.1 || word_len.0 > word_len.1
    {
        return Err(Error::Corpus("invalid length ranges".into()));
    }
    let by_tag: HashMap<&str, &CipherLanguageSpec> =
        specs.iter().map(|s| (s.tag.as_str(), s)).collect();
    let mut out = Vec::with_capacity(pairs.len() * n_per_pair * 2);
    for (pair_idx, (a, b)) in pairs.iter().enumerate() {
        if a == b {
            return Err(Error::Corpus(format!("pair {a}-{b} repeats a language")));
        }
        let spec_a = by_tag
            .get(a.as_str())
            .ok_or_else(|| Error::UnknownLanguage(a.clone()))?;
        let spec_b = by_tag
            .get(b.as_str())
            .ok_or_else(|| Error::UnknownLanguage(b.clone()))?;
        let alphabet = &spec_a.alphabet;
        let mut rng = derive(seed, "gen-cipher-corpus", pair_idx as u64, 0);
        for _ in 0..n_per_pair {
            let base = random_sentence(alphabet, sentence_len, word_len, &mut rng);
            let surf_a = spec_a.apply(&base);
            let surf_b = spec_b.apply(&base);
            out.push(ParallelExample {
                src_text: surf_a.clone(),
                tgt_text: surf_b.clone(),
                src_lang: a.clone(),
                tgt_lang: b.clone(),
            });
            out.push(ParallelExample {
                src_text: surf_b,
                tgt_text: surf_a,
                src_lang: b.clone(),
                tgt_lang: a.clone(),
            });
        }
    }
    Ok(out)
}

/// Outcome of loading an external JSONL corpus: parsed examples plus one
/// diagnostic per malformed line.
#[derive(Debug)]
pub struct LoadOutcome {
    pub examples: Vec<ParallelExample>,
    pub warnings: Vec<String>,
}

/// Load a JSONL parallel corpus. `src_lang`/`tgt_lang` fill in lines that
/// omit the language fields. Malformed lines are collected as diagnostics
/// with their line numbers; the load only fails if every line is bad.
pub fn load_parallel_file(path: &Path, src_lang: &str, tgt_lang: &str) -> Result<LoadOutcome> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut warnings = Vec::new();
    let mut n_lines = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        n_lines += 1;
        let lineno = idx + 1;
        match serde_json::from_str::<ParallelExample>(&line) {
            Ok(mut ex) => {
                if ex.src_lang.is_empty() {
                    ex.src_lang = src_lang.to_string();
                }
                if ex.tgt_lang.is_empty() {
                    ex.tgt_lang = tgt_lang.to_string();
                }
                if ex.src_text.is_empty() || ex.tgt_text.is_empty() {
                    warnings.push(format!("line {lineno}: empty src or tgt text"));
                } else if ex.src_lang == ex.tgt_lang {
                    warnings.push(format!("line {lineno}: src_lang equals tgt_lang"));
                } else {
                    examples.push(ex);
                }
            }
            Err(e) => warnings.push(format!("line {lineno}: {e}")),
        }
    }
    if n_lines == 0 {
        warnings.push(format!("{}: empty corpus file", path.display()));
    } else if examples.is_empty() {
        return Err(Error::Corpus(format!(
            "{}: no usable lines ({})",
            path.display(),
            warnings.join("; ")
        )));
    }
    Ok(LoadOutcome { examples, warnings })
}

pub fn save_jsonl(path: &Path, examples: &[ParallelExample]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("ParallelExample serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// One epoch's worth of training examples. With `balance` on, every dataset
/// is independently downsampled to the size of the smallest non-empty one,
/// resampled fresh per epoch; the merged stream is shuffled. Deterministic
/// per (seed, epoch).
pub fn make_epoch(
    datasets: &[Vec<ParallelExample>],
    balance: bool,
    seed: u64,
    epoch: u64,
) -> Result<Vec<ParallelExample>> {
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(Error::Corpus("all datasets empty".into()));
    }
    let mut merged = Vec::new();
    if balance {
        let target = datasets
            .iter()
            .filter(|d| !d.is_empty())
            .map(|d| d.len())
            .min()
            .unwrap();
        for (di, data) in datasets.iter().enumerate() {
            if data.is_empty() {
                continue;
            }
            let mut idx: Vec<usize> = (0..data.len()).collect();
            let mut rng = derive(seed, "epoch-subsample", epoch, di as u64);
            idx.shuffle(&mut rng);
            idx.truncate(target);
            merged.extend(idx.into_iter().map(|i| data[i].clone()));
        }
    } else {
        for data in datasets {
            merged.extend(data.iter().cloned());
        }
    }
    let mut rng = derive(seed, "epoch-shuffle", epoch, 0);
    merged.shuffle(&mut rng);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALPHA: [char; 6] = ['a', 'b', 'c', 'd', 'e', 'f'];

    fn tags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn identity_ciphers_copy_text() {
        let specs = vec![
            CipherLanguageSpec::identity("X", &ALPHA),
            CipherLanguageSpec::identity("Y", &ALPHA),
        ];
        let out =
            gen_cipher_corpus(&specs, &tags(&[("X", "Y")]), 5, (2, 3), (1, 3), 11).unwrap();
        assert_eq!(out.len(), 10);
        for ex in &out {
            assert_eq!(ex.src_text, ex.tgt_text);
            assert_ne!(ex.src_lang, ex.tgt_lang);
        }
    }

    #[test]
    fn single_swap_cipher_by_hand() {
        let spec =
            CipherLanguageSpec::from_parts("S", &['a', 'b'], &['b', 'a'], WordOrder::Identity)
                .unwrap();
        assert_eq!(spec.apply("ab"), "ba");
        assert_eq!(spec.invert("ba"), "ab");
    }

    #[test]
    fn reverse_order_applies_to_words() {
        let spec = CipherLanguageSpec::from_parts("R", &['a', 'b'], &['b', 'a'], WordOrder::Reverse)
            .unwrap();
        assert_eq!(spec.apply("aa b"), "a bb");
        assert_eq!(spec.invert("a bb"), "aa b");
    }

    #[test]
    fn generation_is_deterministic() {
        let specs = vec![
            CipherLanguageSpec::from_seed("A", &ALPHA, WordOrder::Identity, 3),
            CipherLanguageSpec::from_seed("B", &ALPHA, WordOrder::Identity, 3),
        ];
        let pairs = tags(&[("A", "B")]);
        let one = gen_cipher_corpus(&specs, &pairs, 20, (2, 4), (2, 4), 99).unwrap();
        let two = gen_cipher_corpus(&specs, &pairs, 20, (2, 4), (2, 4), 99).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn cipher_translation_is_invertible() {
        let specs = vec![
            CipherLanguageSpec::from_seed("A", &ALPHA, WordOrder::Identity, 5),
            CipherLanguageSpec::from_seed("B", &ALPHA, WordOrder::Reverse, 5),
        ];
        let out = gen_cipher_corpus(&specs, &tags(&[("A", "B")]), 10, (2, 4), (1, 4), 7).unwrap();
        for ex in out {
            let src_spec = if ex.src_lang == "A" { &specs[0] } else { &specs[1] };
            let tgt_spec = if ex.tgt_lang == "A" { &specs[0] } else { &specs[1] };
            assert_eq!(src_spec.invert(&ex.src_text), tgt_spec.invert(&ex.tgt_text));
        }
    }

    #[test]
    fn unknown_pair_language_errors() {
        let specs = vec![CipherLanguageSpec::identity("A", &ALPHA)];
        assert!(matches!(
            gen_cipher_corpus(&specs, &tags(&[("A", "Z")]), 1, (1, 2), (1, 2), 0),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn from_parts_rejects_non_bijections() {
        assert!(
            CipherLanguageSpec::from_parts("X", &['a', 'b'], &['a', 'a'], WordOrder::Identity)
                .is_err()
        );
        assert!(
            CipherLanguageSpec::from_parts("X", &['a', 'b'], &['a', 'c'], WordOrder::Identity)
                .is_err()
        );
    }

    fn ex(n: usize, lang: &str) -> ParallelExample {
        ParallelExample {
            src_text: format!("s{n}"),
            tgt_text: format!("t{n}"),
            src_lang: lang.to_string(),
            tgt_lang: "Z".to_string(),
        }
    }

    #[test]
    fn epoch_of_single_dataset_is_a_permutation() {
        let data: Vec<_> = (0..10).map(|i| ex(i, "A")).collect();
        let epoch = make_epoch(&[data.clone()], false, 1, 0).unwrap();
        assert_eq!(epoch.len(), 10);
        let mut sorted = epoch.clone();
        sorted.sort_by(|a, b| a.src_text.cmp(&b.src_text));
        let mut orig = data;
        orig.sort_by(|a, b| a.src_text.cmp(&b.src_text));
        assert_eq!(sorted, orig);
    }

    #[test]
    fn balanced_epochs_downsample_to_smallest() {
        let big: Vec<_> = (0..10).map(|i| ex(i, "A")).collect();
        let small: Vec<_> = (100..104).map(|i| ex(i, "B")).collect();
        let epoch = make_epoch(&[big, small], true, 1, 0).unwrap();
        assert_eq!(epoch.len(), 8);
        let from_a = epoch.iter().filter(|e| e.src_lang == "A").count();
        let from_b = epoch.iter().filter(|e| e.src_lang == "B").count();
        assert_eq!((from_a, from_b), (4, 4));
    }

    #[test]
    fn epochs_are_deterministic_but_resample_majority_sets() {
        let big: Vec<_> = (0..30).map(|i| ex(i, "A")).collect();
        let small: Vec<_> = (100..103).map(|i| ex(i, "B")).collect();
        let datasets = [big, small];
        let e0 = make_epoch(&datasets, true, 5, 0).unwrap();
        let e0_again = make_epoch(&datasets, true, 5, 0).unwrap();
        assert_eq!(e0, e0_again);

        let e1 = make_epoch(&datasets, true, 5, 1).unwrap();
        let picks = |e: &[ParallelExample]| {
            let mut v: Vec<String> = e
                .iter()
                .filter(|x| x.src_lang == "A")
                .map(|x| x.src_text.clone())
                .collect();
            v.sort();
            v
        };
        assert_ne!(picks(&e0), picks(&e1));
    }

    #[test]
    fn make_epoch_rejects_all_empty() {
        assert!(make_epoch(&[vec![], vec![]], true, 1, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");

        let examples = vec![ex(1, "A"), ex(2, "B")];
        save_jsonl(&path, &examples).unwrap();
        let loaded = load_parallel_file(&path, "A", "B").unwrap();
        assert_eq!(loaded.examples, examples);
        assert!(loaded.warnings.is_empty());

        std::fs::write(
            &path,
            "{\"src\":\"good\",\"tgt\":\"fine\"}\nnot json at all\n",
        )
        .unwrap();
        let loaded = load_parallel_file(&path, "A", "B").unwrap();
        assert_eq!(loaded.examples.len(), 1);
        assert_eq!(loaded.examples[0].src_lang, "A");
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].starts_with("line 2:"));

        std::fs::write(&path, "").unwrap();
        let loaded = load_parallel_file(&path, "A", "B").unwrap();
        assert!(loaded.examples.is_empty());
        assert_eq!(loaded.warnings.len(), 1);

        std::fs::write(&path, "garbage\nmore garbage\n").unwrap();
        assert!(load_parallel_file(&path, "A", "B").is_err());
    }
}
