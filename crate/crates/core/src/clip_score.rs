//! Sentence-averaged image-text alignment score and candidate ranking.
//!
//! A caption is split into sentences; each sentence and the image are
//! embedded and unit-normalized, and the score is the mean cosine over
//! sentences. `display_score` is the same value times 100.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backends::{EncoderBackend, ImageInput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Mean cosine over sentences.
    #[default]
    SentenceAvg,
    /// The whole caption embedded as one text (truncated to the encoder window).
    FullCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCaption {
    pub caption: String,
    pub sentences: Vec<String>,
    pub per_sentence_cosine: Vec<f64>,
    pub score: f64,
    pub display_score: f64,
    pub truncated_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub image_id: String,
    pub candidates: Vec<ScoredCaption>,
    pub best_index: usize,
    /// Empty captions dropped before scoring.
    #[serde(default)]
    pub dropped_empty: usize,
}

impl CandidateSet {
    pub fn best(&self) -> &ScoredCaption {
        &self.candidates[self.best_index]
    }
}

/// Split on `.`, `!` or `?` when followed by whitespace or end of text.
/// Segments are trimmed and empty ones dropped; text without terminal
/// punctuation is a single sentence. Abbreviations are not special-cased.
pub fn sentence_tokenize(caption: &str) -> Result<Vec<String>> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = caption.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = chars.peek().is_none_or(|&(_, n)| n.is_whitespace());
            if boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut sentences, &caption[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut sentences, &caption[start..]);
    if sentences.is_empty() {
        return Err(Error::EmptyCaption);
    }
    Ok(sentences)
}

fn push_trimmed(out: &mut Vec<String>, segment: &str) {
    let s = segment.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

/// Index of the largest value, lowest index on ties. `None` for empty input.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn unit(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate(format!("{what} embedding is not finite")));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate(format!("{what} embedding has zero norm")));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Scores captions against one image, reusing the image embedding.
pub struct Scorer<'a> {
    encoder: &'a dyn EncoderBackend,
    image_id: String,
    image_unit: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(encoder: &'a dyn EncoderBackend, image: &ImageInput) -> Result<Self> {
        let image_unit = unit(encoder.encode_image(image)?, "image")?;
        Ok(Self {
            encoder,
            image_id: image.id.clone(),
            image_unit,
        })
    }

    pub fn image_embedding(&self) -> &[f64] {
        &self.image_unit
    }

    fn cosine(&self, text: &str) -> Result<(f64, bool)> {
        let (clipped, truncated) = self.encoder.truncate_text(text);
        let t = unit(self.encoder.encode_text(&clipped)?, "text")?;
        if t.len() != self.image_unit.len() {
            return Err(Error::Degenerate(format!(
                "text embedding dimension {} differs from image dimension {}",
                t.len(),
                self.image_unit.len()
            )));
        }
        let dot = t.iter().zip(&self.image_unit).map(|(a, b)| a * b).sum::<f64>();
        Ok((dot, truncated))
    }

    pub fn score(&self, caption: &str, mode: ScoringMode) -> Result<ScoredCaption> {
        let sentences = match mode {
            ScoringMode::SentenceAvg => sentence_tokenize(caption)?,
            ScoringMode::FullCaption => {
                let trimmed = caption.trim();
                if trimmed.is_empty() {
                    return Err(Error::EmptyCaption);
                }
                vec![trimmed.to_string()]
            }
        };
        let mut per_sentence_cosine = Vec::with_capacity(sentences.len());
        let mut truncated_flags = Vec::with_capacity(sentences.len());
        for s in &sentences {
            let (c, t) = self.cosine(s)?;
            per_sentence_cosine.push(c);
            truncated_flags.push(t);
        }
        let score = per_sentence_cosine.iter().sum::<f64>() / per_sentence_cosine.len() as f64;
        Ok(ScoredCaption {
            caption: caption.to_string(),
            sentences,
            per_sentence_cosine,
            score,
            display_score: score * 100.0,
            truncated_flags,
        })
    }

    /// Score every non-empty caption and pick the best (lowest index on ties).
    pub fn rank(&self, captions: &[String], mode: ScoringMode) -> Result<CandidateSet> {
        let mut candidates = Vec::with_capacity(captions.len());
        let mut dropped_empty = 0;
        for c in captions {
            if c.trim().is_empty() {
                dropped_empty += 1;
                continue;
            }
            candidates.push(self.score(c, mode)?);
        }
        let best_index =
            argmax_lowest(candidates.iter().map(|c| c.score)).ok_or(Error::EmptyCandidates)?;
        Ok(CandidateSet {
            image_id: self.image_id.clone(),
            candidates,
            best_index,
            dropped_empty,
        })
    }
}

/// Sentence-averaged score of one caption.
pub fn clip_score(image: &ImageInput, caption: &str, encoder: &dyn EncoderBackend) -> Result<ScoredCaption> {
    Scorer::new(encoder, image)?.score(caption, ScoringMode::SentenceAvg)
}

pub fn rank_candidates(
    image: &ImageInput,
    captions: &[String],
    encoder: &dyn EncoderBackend,
) -> Result<CandidateSet> {
    if captions.iter().all(|c| c.trim().is_empty()) {
        return Err(Error::EmptyCandidates);
    }
    Scorer::new(encoder, image)?.rank(captions, ScoringMode::SentenceAvg)
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    image_id: &'a str,
    #[serde(flatten)]
    scored: &'a ScoredCaption,
}

/// One JSON object per candidate:
/// `{image_id, caption, sentences, per_sentence_cosine, score, display_score, truncated_flags}`.
pub fn write_scores_jsonl(out: &mut impl Write, set: &CandidateSet) -> Result<()> {
    for c in &set.candidates {
        let line = serde_json::to_string(&ScoreLine {
            image_id: &set.image_id,
            scored: c,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io("<scores>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{SceneSpec, ToyEncoder, ToyWorld, ToyWorldConfig};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn world() -> Arc<ToyWorld> {
        let mut cfg = ToyWorldConfig::standard();
        cfg.orthonormal = true;
        cfg.corpus = None;
        cfg.text_token_limit = 6;
        cfg.scenes.insert(
            "dog".into(),
            SceneSpec {
                objects: vec!["dog".into()],
                visibility: None,
            },
        );
        cfg.scenes.insert(
            "dogboat".into(),
            SceneSpec {
                objects: vec!["dog".into(), "boat".into()],
                visibility: None,
            },
        );
        Arc::new(ToyWorld::new(cfg).unwrap())
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(sentence_tokenize("A dog. A cat.").unwrap(), ["A dog.", "A cat."]);
        assert_eq!(sentence_tokenize("hello world").unwrap(), ["hello world"]);
        assert_eq!(sentence_tokenize("Mr. Smith sits.").unwrap(), ["Mr.", "Smith sits."]);
        assert_eq!(sentence_tokenize("3.5 apples? Yes!").unwrap(), ["3.5 apples?", "Yes!"]);
        assert_eq!(sentence_tokenize("Wow!!  Ok").unwrap(), ["Wow!!", "Ok"]);
        assert!(matches!(sentence_tokenize("  \n "), Err(Error::EmptyCaption)));
        assert!(matches!(sentence_tokenize(""), Err(Error::EmptyCaption)));
        assert_eq!(sentence_tokenize(" . ").unwrap(), ["."]);
    }

    #[test]
    fn score_examples() {
        let w = world();
        let enc = ToyEncoder::new(w.clone());
        let img = w.render("dog").unwrap();
        let s = clip_score(&img, "dog", &enc).unwrap();
        assert!((s.score - 1.0).abs() < 1e-12);
        let s = clip_score(&img, "dog. boat.", &enc).unwrap();
        assert!((s.score - 0.5).abs() < 1e-12);
        assert!((s.display_score - 50.0).abs() < 1e-9);
        assert_eq!(s.per_sentence_cosine.len(), 2);
    }

    #[test]
    fn zero_norm_text_is_degenerate() {
        let w = world();
        let enc = ToyEncoder::new(w.clone());
        let img = w.render("dog").unwrap();
        assert!(matches!(clip_score(&img, "grass.", &enc), Err(Error::Degenerate(_))));
    }

    #[test]
    fn long_sentences_are_truncated_and_flagged() {
        let w = world();
        let enc = ToyEncoder::new(w.clone());
        let img = w.render("dog").unwrap();
        // limit is 6 words: "boat" falls outside the window
        let s = clip_score(&img, "There is a big brown dog and a boat.", &enc).unwrap();
        assert_eq!(s.truncated_flags, [true]);
        assert!((s.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_caption_and_sentence_average_can_disagree() {
        let w = world();
        let enc = ToyEncoder::new(w.clone());
        let img = w.render("dogboat").unwrap();
        let scorer = Scorer::new(&enc, &img).unwrap();
        let captions = vec!["dog.".to_string(), "dog. boat. car.".to_string()];
        let sent = scorer.rank(&captions, ScoringMode::SentenceAvg).unwrap();
        let full = scorer.rank(&captions, ScoringMode::FullCaption).unwrap();
        assert_eq!(sent.best_index, 0);
        assert_eq!(full.best_index, 1);
    }

    #[test]
    fn rank_examples() {
        let w = world();
        let enc = ToyEncoder::new(w.clone());
        let img = w.render("dogboat").unwrap();
        let one = rank_candidates(&img, &["dog.".to_string()], &enc).unwrap();
        assert_eq!(one.best_index, 0);
        // scores [0.0, 0.707, 0.707]: tie resolved to index 1
        let caps = ["car.", "dog.", "boat."].map(String::from);
        assert_eq!(rank_candidates(&img, &caps, &enc).unwrap().best_index, 1);
        assert!(matches!(
            rank_candidates(&img, &["".to_string(), " ".to_string()], &enc),
            Err(Error::EmptyCandidates)
        ));
        let with_empty = ["", "dog."].map(String::from);
        let set = rank_candidates(&img, &with_empty, &enc).unwrap();
        assert_eq!((set.best_index, set.dropped_empty), (0, 1));
    }

    #[test]
    fn jsonl_has_expected_keys() {
        let w = world();
        let enc = ToyEncoder::new(w.clone());
        let img = w.render("dog").unwrap();
        let set = rank_candidates(&img, &["dog. boat.".to_string()], &enc).unwrap();
        let mut buf = Vec::new();
        write_scores_jsonl(&mut buf, &set).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        for key in [
            "image_id",
            "caption",
            "sentences",
            "per_sentence_cosine",
            "score",
            "display_score",
            "truncated_flags",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn tokenizer_preserves_text(s in "[a-z .!?]{0,40}") {
            match sentence_tokenize(&s) {
                Ok(parts) => {
                    let joined: String = parts.concat().chars().filter(|c| !c.is_whitespace()).collect();
                    let orig: String = s.chars().filter(|c| !c.is_whitespace()).collect();
                    prop_assert_eq!(joined, orig);
                    prop_assert!(parts.iter().all(|p| !p.is_empty() && p.trim() == p));
                }
                Err(_) => prop_assert!(s.trim().is_empty()),
            }
        }

        #[test]
        fn argmax_invariant_under_monotone_maps(v in proptest::collection::vec(-5i32..5, 1..20)) {
            let xs: Vec<f64> = v.iter().map(|&x| f64::from(x) / 2.0).collect();
            let a = argmax_lowest(xs.iter().copied());
            let b = argmax_lowest(xs.iter().map(|x| x.exp() * 3.0 + 1.0));
            prop_assert_eq!(a, b);
        }
    }
}
