//! Case-insensitive corpus-level BLEU, and a seeded synthetic benchmark
//! where the correct rendering of ambiguous source tokens is decidable only
//! from trigger words in the preceding sentences.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::RawDocument;
use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Corpus-level BLEU-4 with clipped counts and a brevity penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0–100.
    pub score: f64,
    /// Modified n-gram precisions for n = 1..=4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2} {:.2}/{:.2}/{:.2}/{:.2} BP = {:.2}",
            self.score,
             100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
        )
    }
}

fn fold_tokens(line: &str) -> Vec<String> {
    line.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut out: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Score candidate lines against aligned reference lines. Matching is
/// case-folded; counts are clipped; no smoothing (any zero precision gives
/// a zero score).
pub fn bleu(candidates: &[String], references: &[String]) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "line count mismatch: {} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0u64; MAX_ORDER];
    let mut total = [0u64; MAX_ORDER];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        let c = fold_tokens(cand);
        let r = fold_tokens(reference);
        candidate_len += c.len();
        reference_len += r.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&c, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
            total[n - 1] += c.len().saturating_sub(n - 1) as u64;
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) || candidate_len == 0 {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        candidate_len,
        reference_len,
    })
}

/// Generator settings for the context-disambiguation benchmark.
///
/// Documents interleave *trigger* sentences (containing one of two mode
/// words) and *payload* sentences (containing one ambiguous token). An
/// ambiguous token's correct target rendering is dictated solely by the
/// most recent trigger, which always sits within the two preceding
/// sentences — the payload sentence itself carries no signal.
#[derive(Debug, Clone)]
pub struct SyntheticDocTask {
    pub seed: u64,
    pub ambiguous_types: usize,
    pub filler_types: usize,
    pub sentences_per_doc: (usize, usize),
    pub fillers_per_sentence: (usize, usize),
}

impl Default for SyntheticDocTask {
    fn default() -> Self {
        SyntheticDocTask {
            seed: 1,
            ambiguous_types: 4,
            filler_types: 12,
            sentences_per_doc: (4, 7),
            fillers_per_sentence: (2, 4),
        }
    }
}

/// One of the two renderings each ambiguous token can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    A,
    B,
}

impl SyntheticDocTask {
    pub fn filler(&self, i: usize) -> (String, String) {
        (format!("f{i}"), format!("F{i}"))
    }

    pub fn ambiguous_source(&self, i: usize) -> String {
        format!("amb{i}")
    }

    pub fn rendering(&self, i: usize, sense: Sense) -> String {
        match sense {
            Sense::A => format!("amb{i}_x"),
            Sense::B => format!("amb{i}_y"),
        }
    }

    pub fn trigger(&self, sense: Sense) -> (String, String) {
        match sense {
            Sense::A => ("tx".into(), "TX".into()),
            Sense::B => ("ty".into(), "TY".into()),
        }
    }

    /// Which sense a reference rendering encodes, if it is one.
    fn sense_of_rendering(&self, token: &str) -> Option<(usize, Sense)> {
        for i in 0..self.ambiguous_types {
            if token == self.rendering(i, Sense::A) {
                return Some((i, Sense::A));
            }
            if token == self.rendering(i, Sense::B) {
                return Some((i, Sense::B));
            }
        }
        None
    }

    fn fill_sentence(
        &self,
        rng: &mut ChaCha8Rng,
        special: (String, String),
    ) -> (Vec<String>, Vec<String>) {
        let n_fill = rng.gen_range(self.fillers_per_sentence.0..=self.fillers_per_sentence.1);
        let mut src = Vec::with_capacity(n_fill + 1);
        let mut tgt = Vec::with_capacity(n_fill + 1);
        let insert_at = rng.gen_range(0..=n_fill);
        for slot in 0..=n_fill {
            if slot == insert_at {
                src.push(special.0.clone());
                tgt.push(special.1.clone());
            } else {
                let (fs, ft) = self.filler(rng.gen_range(0..self.filler_types));
                src.push(fs);
                tgt.push(ft);
            }
        }
        (src, tgt)
    }

    /// Generate a seed-deterministic corpus of `documents` documents.
    pub fn generate(&self, documents: usize) -> Vec<RawDocument> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut docs = Vec::with_capacity(documents);
        for _ in 0..documents {
            let k = rng.gen_range(self.sentences_per_doc.0..=self.sentences_per_doc.1);
            let mut sentences = Vec::with_capacity(k);
            let mut mode = Sense::A;
            let mut payloads_since_trigger = usize::MAX; // force a trigger first
            for _ in 0..k {
                let need_trigger = payloads_since_trigger >= 2;
                if need_trigger || rng.gen_bool(0.35) {
                    mode = if rng.gen_bool(0.5) { Sense::A } else { Sense::B };
                    sentences.push(self.fill_sentence(&mut rng, self.trigger(mode)));
                    payloads_since_trigger = 0;
                } else {
                    let amb = rng.gen_range(0..self.ambiguous_types);
                    let pair = (self.ambiguous_source(amb), self.rendering(amb, mode));
                    sentences.push(self.fill_sentence(&mut rng, pair));
                    payloads_since_trigger += 1;
                }
            }
            docs.push(RawDocument { sentences });
        }
        docs
    }

    /// Fraction of ambiguous source tokens whose candidate translation
    /// contains the context-correct rendering and not the wrong one.
    /// `candidates` are one line per sentence, documents in corpus order.
    pub fn disambiguation_accuracy(
        &self,
        candidates: &[String],
        corpus: &[RawDocument],
    ) -> Result<f64> {
        let total_sentences: usize = corpus.iter().map(|d| d.sentences.len()).sum();
        if candidates.len() != total_sentences {
            return Err(Error::Contract(format!(
                "{} candidate lines for {} corpus sentences",
                candidates.len(),
                total_sentences
            )));
        }
        let mut line = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for doc in corpus {
            for (src, tgt) in &doc.sentences {
                let cand_tokens: Vec<String> =
                    candidates[line].split_whitespace().map(str::to_string).collect();
                line += 1;
                for token in src {
                    let Some(i) = (0..self.ambiguous_types)
                        .find(|&i| *token == self.ambiguous_source(i))
                    else {
                        continue;
                    };
                    // The reference line fixes the expected sense.
                    let Some((_, sense)) = tgt
                        .iter()
                        .find_map(|t| self.sense_of_rendering(t))
                        .filter(|(j, _)| *j == i)
                    else {
                        continue;
                    };
                    total += 1;
                    let want = self.rendering(i, sense);
                    let other = self.rendering(
                        i,
                        match sense {
                            Sense::A => Sense::B,
                            Sense::B => Sense::A,
                        },
                    );
                    let has_want = cand_tokens.iter().any(|t| *t == want);
                    let has_other = cand_tokens.iter().any(|t| *t == other);
                    if has_want && !has_other {
                        correct += 1;
                    }
                }
            }
        }
        if total == 0 {
            return Err(Error::Contract(
                "corpus contains no ambiguous occurrences".into(),
            ));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// Reference target lines of a corpus, one sentence per line.
pub fn reference_lines(corpus: &[RawDocument]) -> Vec<String> {
    corpus
        .iter()
        .flat_map(|d| d.sentences.iter().map(|(_, t)| t.join(" ")))
        .collect()
}

/// Source lines of a corpus, one sentence per line.
pub fn source_lines(corpus: &[RawDocument]) -> Vec<String> {
    corpus
        .iter()
        .flat_map(|d| d.sentences.iter().map(|(s, _)| s.join(" ")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn perfect_match_is_100() {
        let c = lines(&["the cat sat on the mat", "a b c d"]);
        let r = c.clone();
        let report = bleu(&c, &r).unwrap();
        assert!((report.score - 100.0).abs() < 1e-9);
        assert!((report.brevity_penalty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_is_zero() {
        let c = lines(&["x y z w"]);
        let r = lines(&["a b c d"]);
        let report = bleu(&c, &r).unwrap();
        assert_eq!(report.score, 0.0);
    }

    #[test]
    fn hand_computed_example() {
        // candidate "a b c d e" vs reference "a b c d f":
        // precisions 4/5, 3/4, 2/3, 1/2 and BP = 1.
        let c = lines(&["a b c d e"]);
        let r = lines(&["a b c d f"]);
        let report = bleu(&c, &r).unwrap();
        assert!((report.precisions[0] - 4.0 / 5.0).abs() < 1e-12);
        assert!((report.precisions[1] - 3.0 / 4.0).abs() < 1e-12);
        assert!((report.precisions[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.precisions[3] - 1.0 / 2.0).abs() < 1e-12);
        assert!((report.brevity_penalty - 1.0).abs() < 1e-12);
        let expect = 100.0 * (4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0f64).powf(0.25);
        assert!((report.score - expect).abs() < 1e-9);
    }

    #[test]
    fn case_folding_applies() {
        let c = lines(&["The CAT sat on THE mat today ok"]);
        let r = lines(&["the cat sat on the mat today ok"]);
        assert!((bleu(&c, &r).unwrap().score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn clipping_limits_repeats() {
        // "the the the the" vs "the cat": unigram matches clip at 1.
        let c = lines(&["the the the the"]);
        let r = lines(&["the cat"]);
        let report = bleu(&c, &r).unwrap();
        assert!((report.precisions[0] - 0.25).abs() < 1e-12);
        assert_eq!(report.score, 0.0); // higher orders empty
    }

    #[test]
    fn brevity_penalty_for_short_candidates() {
        let c = lines(&["a b"]);
        let r = lines(&["a b c d"]);
        let report = bleu(&c, &r).unwrap();
        assert!((report.brevity_penalty - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn line_count_mismatch_is_contract_error() {
        let c = lines(&["a"]);
        let r = lines(&["a", "b"]);
        assert!(matches!(bleu(&c, &r), Err(Error::Contract(_))));
    }

    #[test]
    fn joint_reordering_leaves_corpus_score_unchanged() {
        let c = lines(&["a b c d e", "x y z w q", "m n o p r"]);
        let r = lines(&["a b c d f", "x y z w w", "m n o p r"]);
        let before = bleu(&c, &r).unwrap();
        let perm = [2usize, 0, 1];
        let cp: Vec<String> = perm.iter().map(|&i| c[i].clone()).collect();
        let rp: Vec<String> = perm.iter().map(|&i| r[i].clone()).collect();
        let after = bleu(&cp, &rp).unwrap();
        assert!((before.score - after.score).abs() < 1e-12);
    }

    #[test]
    fn report_line_format() {
        let c = lines(&["a b c d e"]);
        let r = lines(&["a b c d f"]);
        let report = bleu(&c, &r).unwrap();
        let line = report.to_string();
        assert_eq!(line, "BLEU = 66.87 80.00/75.00/66.67/50.00 BP = 1.00");
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let task = SyntheticDocTask::default();
        let a = task.generate(10);
        let b = task.generate(10);
        assert_eq!(a, b);
        let other = SyntheticDocTask {
            seed: 2,
            ..SyntheticDocTask::default()
        };
        assert_ne!(a, other.generate(10));
    }

    #[test]
    fn first_sentence_never_ambiguous_and_triggers_nearby() {
        let task = SyntheticDocTask::default();
        let docs = task.generate(50);
        let is_amb = |tok: &str| (0..task.ambiguous_types).any(|i| tok == task.ambiguous_source(i));
        let is_trig =
            |tok: &str| tok == task.trigger(Sense::A).0 || tok == task.trigger(Sense::B).0;
        let mut payloads = 0;
        for doc in &docs {
            assert!(!doc.sentences[0].0.iter().any(|t| is_amb(t)));
            for (k, (src, _)) in doc.sentences.iter().enumerate() {
                if src.iter().any(|t| is_amb(t)) {
                    payloads += 1;
                    let near = doc.sentences[k.saturating_sub(2)..k]
                        .iter()
                        .any(|(s, _)| s.iter().any(|t| is_trig(t)));
                    assert!(near, "payload sentence {k} lacks a trigger within 2");
                }
            }
        }
        assert!(payloads > 50, "generator produced too few payloads");
    }

    #[test]
    fn oracle_translation_scores_one() {
        let task = SyntheticDocTask::default();
        let docs = task.generate(20);
        let refs = reference_lines(&docs);
        let acc = task.disambiguation_accuracy(&refs, &docs).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn constant_sense_translation_sits_at_chance() {
        let task = SyntheticDocTask {
            seed: 9,
            ..SyntheticDocTask::default()
        };
        let docs = task.generate(300);
        // Rewrite every reference rendering to sense A.
        let forced: Vec<String> = reference_lines(&docs)
            .iter()
            .map(|line| {
                line.split_whitespace()
                    .map(|t| match task.sense_of_rendering(t) {
                        Some((i, _)) => task.rendering(i, Sense::A),
                        None => t.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let acc = task.disambiguation_accuracy(&forced, &docs).unwrap();
        assert!(
            (0.35..=0.65).contains(&acc),
            "forced-sense accuracy {acc} is off chance level"
        );
    }

    #[test]
    fn sense_is_independent_of_payload_content() {
        // Across many payloads, each ambiguous type renders either sense at
        // near-even rates: the sentence itself cannot reveal the answer.
        let task = SyntheticDocTask {
            seed: 11,
            ..SyntheticDocTask::default()
        };
        let docs = task.generate(400);
        let mut counts = vec![(0usize, 0usize); task.ambiguous_types];
        for doc in &docs {
            for (_, tgt) in &doc.sentences {
                for tok in tgt {
                    if let Some((i, sense)) = task.sense_of_rendering(tok) {
                        match sense {
                            Sense::A => counts[i].0 += 1,
                            Sense::B => counts[i].1 += 1,
                        }
                    }
                }
            }
        }
        for (i, (a, b)) in counts.iter().enumerate() {
            let total = a + b;
            assert!(total > 30, "type {i} undersampled");
            let frac = *a as f64 / total as f64;
            assert!((0.35..=0.65).contains(&frac), "type {i} skewed: {frac}");
        }
    }

    #[test]
    fn wrong_sense_rendering_counts_as_incorrect() {
        let task = SyntheticDocTask::default();
        let docs = task.generate(5);
        let flipped: Vec<String> = reference_lines(&docs)
            .iter()
            .map(|line| {
                line.split_whitespace()
                    .map(|t| match task.sense_of_rendering(t) {
                        Some((i, Sense::A)) => task.rendering(i, Sense::B),
                        Some((i, Sense::B)) => task.rendering(i, Sense::A),
                        None => t.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let acc = task.disambiguation_accuracy(&flipped, &docs).unwrap();
        assert_eq!(acc, 0.0);
    }
}
