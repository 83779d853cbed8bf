//! Keyword and fuzzy relevance scoring, and chunk filtering.

use crate::ingest::Chunk;
use crate::par::{self, Strategy};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RelevanceError {
    #[error("empty keyword")]
    EmptyKeyword,
    #[error("duplicate keyword `{0}`")]
    DuplicateKeyword(String),
    #[error("fuzzy threshold {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("cutoff {0} outside [0, 1]")]
    BadCutoff(f64),
    #[error("fuzzy scoring takes its cutoff from `fuzzy_threshold`; drop `cutoff`")]
    CutoffWithFuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    ExactToken,
    Substring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordSet {
    keywords: Vec<String>,
    pub mode: MatchMode,
    pub fuzzy_threshold: Option<f64>,
}

impl KeywordSet {
    /// Keywords are trimmed and lowercased; order is kept.
    pub fn new<S: AsRef<str>>(
        keywords: &[S],
        mode: MatchMode,
        fuzzy_threshold: Option<f64>,
    ) -> Result<Self, RelevanceError> {
        if let Some(t) = fuzzy_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(RelevanceError::BadThreshold(t));
            }
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(keywords.len());
        for k in keywords {
            let k = k.as_ref().trim().to_lowercase();
            if k.is_empty() {
                return Err(RelevanceError::EmptyKeyword);
            }
            if !seen.insert(k.clone()) {
                return Err(RelevanceError::DuplicateKeyword(k));
            }
            out.push(k);
        }
        Ok(Self {
            keywords: out,
            mode,
            fuzzy_threshold,
        })
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }
}

/// Case-folded tokens split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 1 when any keyword matches the case-folded text, else 0.
pub fn score_keyword(text: &str, ks: &KeywordSet) -> f64 {
    if ks.keywords.is_empty() {
        return 0.0;
    }
    let hit = match ks.mode {
        MatchMode::Substring => {
            let folded = text.to_lowercase();
            ks.keywords.iter().any(|k| folded.contains(k.as_str()))
        }
        MatchMode::ExactToken => {
            let tokens = tokenize(text);
            ks.keywords.iter().any(|k| {
                let needle = tokenize(k);
                !needle.is_empty() && tokens.windows(needle.len()).any(|w| w == needle.as_slice())
            })
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max(len)`; two empty strings are identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Best similarity between any keyword and any run of chunk tokens with the
/// keyword's token count (single tokens for one-word keywords).
pub fn score_fuzzy(text: &str, ks: &KeywordSet) -> f64 {
    let tokens = tokenize(text);
    let mut best: f64 = 0.0;
    for k in &ks.keywords {
        let needle = tokenize(k);
        if needle.is_empty() || tokens.len() < needle.len() {
            continue;
        }
        let needle = needle.join(" ");
        for window in tokens.windows(needle.split(' ').count()) {
            best = best.max(similarity(&needle, &window.join(" ")));
            if best == 1.0 {
                return 1.0;
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Keyword,
    Fuzzy,
}

impl Scorer {
    pub fn score(self, text: &str, ks: &KeywordSet) -> f64 {
        match self {
            Scorer::Keyword => score_keyword(text, ks),
            Scorer::Fuzzy => score_fuzzy(text, ks),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub kept: Vec<Chunk>,
    pub dropped_count: usize,
}

/// Keeps chunks scoring at least `cutoff`, in their original order, each
/// annotated with its score.
pub fn filter_chunks(chunks: &[Chunk], ks: &KeywordSet, scorer: Scorer, cutoff: f64) -> Filtered {
    filter_chunks_with(chunks, ks, scorer, cutoff, Strategy::default())
}

pub fn filter_chunks_with(
    chunks: &[Chunk],
    ks: &KeywordSet,
    scorer: Scorer,
    cutoff: f64,
    strategy: Strategy,
) -> Filtered {
    let scores = par::map_ordered(chunks, strategy, |c| scorer.score(&c.text, ks));
    let mut kept = Vec::new();
    for (chunk, score) in chunks.iter().zip(scores) {
        if score >= cutoff {
            let mut c = chunk.clone();
            c.relevance_score = Some(score);
            kept.push(c);
        }
    }
    Filtered {
        dropped_count: chunks.len() - kept.len(),
        kept,
    }
}

/// `relevance:` section of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevanceConfig {
    pub keywords: Vec<String>,
    #[serde(default)]
    pub mode: MatchMode,
    /// Keyword scoring cutoff; defaults to 1 (keep chunks with a hit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
    /// Enables fuzzy scoring; also serves as its cutoff.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuzzy_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceFilter {
    pub keywords: KeywordSet,
    pub scorer: Scorer,
    pub cutoff: f64,
}

impl RelevanceFilter {
    pub fn apply(&self, chunks: &[Chunk]) -> Filtered {
        filter_chunks(chunks, &self.keywords, self.scorer, self.cutoff)
    }

    /// Same scorer and cutoff over a different keyword list.
    pub fn with_keywords<S: AsRef<str>>(&self, keywords: &[S]) -> Result<Self, RelevanceError> {
        Ok(Self {
            keywords: KeywordSet::new(keywords, self.keywords.mode, self.keywords.fuzzy_threshold)?,
            scorer: self.scorer,
            cutoff: self.cutoff,
        })
    }
}

impl RelevanceConfig {
    pub fn build(&self) -> Result<RelevanceFilter, RelevanceError> {
        let keywords = KeywordSet::new(&self.keywords, self.mode, self.fuzzy_threshold)?;
        let (scorer, cutoff) = match (self.fuzzy_threshold, self.cutoff) {
            (Some(_), Some(_)) => return Err(RelevanceError::CutoffWithFuzzy),
            (Some(t), None) => (Scorer::Fuzzy, t),
            (None, c) => (Scorer::Keyword, c.unwrap_or(1.0)),
        };
        if !(0.0..=1.0).contains(&cutoff) {
            return Err(RelevanceError::BadCutoff(cutoff));
        }
        Ok(RelevanceFilter {
            keywords,
            scorer,
            cutoff,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ks(words: &[&str], mode: MatchMode) -> KeywordSet {
        KeywordSet::new(words, mode, None).unwrap()
    }

    fn chunk(i: usize, text: &str) -> Chunk {
        Chunk {
            chunk_id: format!("d:{i:05}"),
            doc_id: "d".into(),
            ordinal: i,
            text: text.into(),
            relevance_score: None,
        }
    }

    #[test]
    fn keyword_examples() {
        assert_eq!(score_keyword("Crude oil rallied", &ks(&["oil"], MatchMode::ExactToken)), 1.0);
        assert_eq!(score_keyword("boiler room", &ks(&["oil"], MatchMode::ExactToken)), 0.0);
        assert_eq!(score_keyword("boiler room", &ks(&["oil"], MatchMode::Substring)), 1.0);
        assert_eq!(score_keyword("oil", &ks(&[], MatchMode::ExactToken)), 0.0);
        assert_eq!(score_keyword("CRUDE-OIL prices", &ks(&["crude oil"], MatchMode::ExactToken)), 1.0);
    }

    /// Textbook recursive definition, exponential but fine for short strings.
    fn levenshtein_reference(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ha, ta)), Some((hb, tb))) => {
                let sub = levenshtein_reference(ta, tb) + usize::from(ha != hb);
                sub.min(levenshtein_reference(ta, b) + 1).min(levenshtein_reference(a, tb) + 1)
            }
        }
    }

    #[test]
    fn fuzzy_examples() {
        let k = KeywordSet::new(&["copper"], MatchMode::ExactToken, Some(0.8)).unwrap();
        assert!((score_fuzzy("the coper price", &k) - (1.0 - 1.0 / 6.0)).abs() < 1e-12);
        assert_eq!(score_fuzzy("Copper fell", &k), 1.0);
        let k = KeywordSet::new(&["abc"], MatchMode::ExactToken, Some(0.5)).unwrap();
        assert_eq!(score_fuzzy("xyz", &k), 0.0);
    }

    #[test]
    fn keyword_set_validation() {
        assert_eq!(KeywordSet::new(&[" "], MatchMode::ExactToken, None), Err(RelevanceError::EmptyKeyword));
        assert!(matches!(
            KeywordSet::new(&["Oil", "oil"], MatchMode::ExactToken, None),
            Err(RelevanceError::DuplicateKeyword(_))
        ));
        assert!(KeywordSet::new(&["oil"], MatchMode::ExactToken, Some(0.0)).is_err());
    }

    #[test]
    fn filter_examples() {
        let chunks = vec![chunk(0, "oil up"), chunk(1, "nothing"), chunk(2, "more oil")];
        let k = ks(&["oil"], MatchMode::ExactToken);
        let f = filter_chunks(&chunks, &k, Scorer::Keyword, 0.5);
        assert_eq!(f.kept.iter().map(|c| c.ordinal).collect::<Vec<_>>(), [0, 2]);
        assert_eq!(f.dropped_count, 1);
        assert_eq!(f.kept[0].relevance_score, Some(1.0));
        assert_eq!(filter_chunks(&chunks, &k, Scorer::Keyword, 0.0).kept.len(), 3);
    }

    #[test]
    fn planted_corpus_keeps_exactly_the_planted() {
        let planted: HashSet<usize> = (0..100).filter(|i| (i * 37) % 100 < 37).collect();
        assert_eq!(planted.len(), 37);
        let chunks: Vec<Chunk> = (0..100)
            .map(|i| {
                let text = if planted.contains(&i) {
                    format!("paragraph {i} mentions nickel output")
                } else {
                    format!("paragraph {i} is about nickelodeon shows")
                };
                chunk(i, &text)
            })
            .collect();
        let f = filter_chunks(&chunks, &ks(&["nickel"], MatchMode::ExactToken), Scorer::Keyword, 0.5);
        assert_eq!(f.kept.len(), 37);
        assert!(f.kept.iter().all(|c| planted.contains(&c.ordinal)));
    }

    #[test]
    fn config_build() {
        let c = RelevanceConfig { keywords: vec!["oil".into()], mode: MatchMode::ExactToken, cutoff: None, fuzzy_threshold: Some(0.8) };
        let f = c.build().unwrap();
        assert_eq!((f.scorer, f.cutoff), (Scorer::Fuzzy, 0.8));
        let c = RelevanceConfig { cutoff: Some(0.5), ..c };
        assert_eq!(c.build(), Err(RelevanceError::CutoffWithFuzzy));
    }

    proptest! {
        #[test]
        fn levenshtein_matches_reference(a in "[abc]{0,6}", b in "[abc]{0,6}") {
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            prop_assert_eq!(levenshtein(&a, &b), levenshtein_reference(&ac, &bc));
        }

        #[test]
        fn kept_set_monotone_in_keywords(
            texts in proptest::collection::vec("[a-d ]{0,20}", 1..20),
            base in proptest::collection::btree_set("[a-d]{1,2}", 0..4),
            extra in proptest::collection::btree_set("[a-d]{1,2}", 0..4),
            substring in any::<bool>(),
        ) {
            let mode = if substring { MatchMode::Substring } else { MatchMode::ExactToken };
            let chunks: Vec<Chunk> = texts.iter().enumerate().map(|(i, t)| chunk(i, t)).collect();
            let small: Vec<&String> = base.iter().collect();
            let big: Vec<&String> = base.union(&extra).collect();
            let ks_small = KeywordSet::new(&small, mode, None).unwrap();
            let ks_big = KeywordSet::new(&big, mode, None).unwrap();
            let kept_small: HashSet<String> = filter_chunks(&chunks, &ks_small, Scorer::Keyword, 1.0).kept.into_iter().map(|c| c.chunk_id).collect();
            let kept_big: HashSet<String> = filter_chunks(&chunks, &ks_big, Scorer::Keyword, 1.0).kept.into_iter().map(|c| c.chunk_id).collect();
            prop_assert!(kept_small.is_subset(&kept_big));
        }

        #[test]
        fn fuzzy_at_one_agrees_with_exact_token(
            text in "[a-c ]{0,24}",
            words in proptest::collection::btree_set("[a-c]{1,3}", 0..4),
        ) {
            let words: Vec<&String> = words.iter().collect();
            let exact = KeywordSet::new(&words, MatchMode::ExactToken, None).unwrap();
            let fuzzy = KeywordSet::new(&words, MatchMode::ExactToken, Some(1.0)).unwrap();
            prop_assert_eq!(score_keyword(&text, &exact) >= 1.0, score_fuzzy(&text, &fuzzy) >= 1.0);
        }

        #[test]
        fn filter_preserves_order_without_duplicates(texts in proptest::collection::vec("[a-c ]{0,12}", 0..30)) {
            let chunks: Vec<Chunk> = texts.iter().enumerate().map(|(i, t)| chunk(i, t)).collect();
            let f = filter_chunks(&chunks, &ks(&["a", "bc"], MatchMode::ExactToken), Scorer::Keyword, 1.0);
            let ords: Vec<usize> = f.kept.iter().map(|c| c.ordinal).collect();
            prop_assert!(ords.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(f.kept.len() + f.dropped_count, chunks.len());
        }
    }
}
