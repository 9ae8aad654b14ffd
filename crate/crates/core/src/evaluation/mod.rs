//! Object hallucination metrics, score-distribution reports and judge
//! prompt export.

mod coco;
mod judge;
mod report;

pub use coco::{coco_synonyms, load_coco_instances, load_synonyms};
pub use judge::{export_judge_prompts, parse_judge_prompt, render_judge_prompt, JudgeExport, JudgeItem, N_ASSISTANTS};
pub use report::{
    score_distribution_report, write_score_report, BinImprovement, HistogramBin, ScoreReport, ScoreSummary,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surface term (lowercase, possibly multi-word) to category name.
pub type SynonymMap = BTreeMap<String, String>;

/// Ground-truth object categories per image plus the term table used to
/// spot mentions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub objects: BTreeMap<String, BTreeSet<String>>,
    pub synonyms: SynonymMap,
}

impl Annotations {
    pub fn new(objects: BTreeMap<String, BTreeSet<String>>, synonyms: SynonymMap) -> Self {
        let norm = |s: &str| s.trim().to_lowercase();
        Self {
            objects: objects
                .into_iter()
                .map(|(k, v)| (k, v.iter().map(|c| norm(c)).collect()))
                .collect(),
            synonyms: synonyms.iter().map(|(k, v)| (norm(k), norm(v))).collect(),
        }
    }
}

fn words_lower(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Mentioned objects in caption order as `(matched term, category)`.
///
/// Matching is case-insensitive over whole words; at each position the
/// longest term wins and consumes its words.
pub fn extract_objects(caption: &str, synonyms: &SynonymMap) -> Vec<(String, String)> {
    let mut terms: Vec<(Vec<String>, &String)> = synonyms
        .iter()
        .map(|(t, c)| (words_lower(t), c))
        .filter(|(w, _)| !w.is_empty())
        .collect();
    terms.sort_by_key(|t| std::cmp::Reverse(t.0.len()));
    let words = words_lower(caption);
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        match terms
            .iter()
            .find(|(t, _)| words.len() - i >= t.len() && words[i..i + t.len()] == t[..])
        {
            Some((t, c)) => {
                out.push((t.join(" "), (*c).clone()));
                i += t.len();
            }
            None => i += 1,
        }
    }
    out
}

pub fn mentioned_categories(caption: &str, synonyms: &SynonymMap) -> BTreeSet<String> {
    extract_objects(caption, synonyms).into_iter().map(|(_, c)| c).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageObjects {
    pub image_id: String,
    pub mentioned: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
    pub missed: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_captions: usize,
    pub n_mentions: usize,
    pub n_hallucinated: usize,
    pub n_ground_truth: usize,
    /// Names of metrics whose denominator was zero and were reported as 0.
    pub zero_denominator: Vec<String>,
    /// Caption ids with no annotation; excluded from every metric.
    pub missing_annotations: Vec<String>,
    pub per_image: Vec<ImageObjects>,
}

impl HallucinationReport {
    pub fn chair_s_percent(&self) -> f64 {
        self.chair_s * 100.0
    }

    pub fn chair_i_percent(&self) -> f64 {
        self.chair_i * 100.0
    }
}

fn ratio(num: usize, den: usize, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// CHAIR_S, CHAIR_I and micro-averaged object F1 over `(image_id, caption)` pairs.
pub fn chair_metrics(captions: &[(String, String)], annotations: &Annotations) -> HallucinationReport {
    let mut per_image = Vec::with_capacity(captions.len());
    let mut missing = Vec::new();
    let (mut with_h, mut mentions, mut halluc, mut gt_total, mut covered) = (0, 0, 0, 0, 0);
    for (id, caption) in captions {
        let Some(gt) = annotations.objects.get(id) else {
            missing.push(id.clone());
            continue;
        };
        let mentioned = mentioned_categories(caption, &annotations.synonyms);
        let hallucinated: BTreeSet<String> = mentioned.difference(gt).cloned().collect();
        let missed: BTreeSet<String> = gt.difference(&mentioned).cloned().collect();
        with_h += usize::from(!hallucinated.is_empty());
        mentions += mentioned.len();
        halluc += hallucinated.len();
        gt_total += gt.len();
        covered += gt.len() - missed.len();
        per_image.push(ImageObjects {
            image_id: id.clone(),
            mentioned,
            hallucinated,
            missed,
        });
    }
    let mut flags = Vec::new();
    let chair_s = ratio(with_h, per_image.len(), "chair_s", &mut flags);
    let chair_i = ratio(halluc, mentions, "chair_i", &mut flags);
    let precision = ratio(mentions - halluc, mentions, "precision", &mut flags);
    let recall = ratio(covered, gt_total, "recall", &mut flags);
    // 2PR / (P + R) written over counts
    let f1 = if covered > 0 {
        (2 * covered) as f64 / (mentions + gt_total) as f64
    } else {
        flags.push("f1".into());
        0.0
    };
    HallucinationReport {
        chair_s,
        chair_i,
        precision,
        recall,
        f1,
        n_captions: per_image.len(),
        n_mentions: mentions,
        n_hallucinated: halluc,
        n_ground_truth: gt_total,
        zero_denominator: flags,
        missing_annotations: missing,
        per_image,
    }
}

pub fn f1_metric(captions: &[(String, String)], annotations: &Annotations) -> f64 {
    chair_metrics(captions, annotations).f1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

/// Read `{"image_id": ..., "caption": ...}` lines. Numeric ids are accepted
/// and converted to strings.
pub fn read_captions_jsonl(path: &Path) -> Result<Vec<(String, String)>> {
    #[derive(Deserialize)]
    struct Raw {
        image_id: serde_json::Value,
        caption: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let raw: Raw = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        let id = match raw.image_id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        out.push((id, raw.caption));
    }
    Ok(out)
}

pub fn write_captions_jsonl(path: &Path, captions: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (id, c) in captions {
        s.push_str(&serde_json::to_string(&CaptionRecord {
            image_id: id.clone(),
            caption: c.clone(),
        })?);
        s.push('\n');
    }
    crate::pipeline::io::write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syn(pairs: &[(&str, &str)]) -> SynonymMap {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn ann(items: &[(&str, &[&str])], s: SynonymMap) -> Annotations {
        Annotations::new(
            items
                .iter()
                .map(|(id, objs)| (id.to_string(), objs.iter().map(|o| o.to_string()).collect()))
                .collect(),
            s,
        )
    }

    #[test]
    fn extraction_examples() {
        let s = syn(&[("dog", "dog"), ("puppy", "dog")]);
        let cats = mentioned_categories("A dog and a puppy.", &s);
        assert_eq!(cats.into_iter().collect::<Vec<_>>(), ["dog"]);
        assert!(extract_objects("hotdog stand", &s).is_empty());
        assert!(extract_objects("", &s).is_empty());
        assert_eq!(extract_objects("DOG!", &s), [("dog".to_string(), "dog".to_string())]);
    }

    #[test]
    fn longest_term_wins() {
        let s = syn(&[("hot dog", "hot dog"), ("dog", "dog"), ("traffic light", "traffic light")]);
        let got: Vec<String> = extract_objects("a hot dog near a dog by the traffic light", &s)
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        assert_eq!(got, ["hot dog", "dog", "traffic light"]);
    }

    #[test]
    fn chair_example() {
        let s = syn(&[("dog", "dog"), ("cat", "cat")]);
        let a = ann(&[("1", &["dog"])], s);
        let r = chair_metrics(&[("1".into(), "a dog and a cat".into())], &a);
        assert_eq!((r.chair_s, r.chair_i), (1.0, 0.5));
    }

    #[test]
    fn empty_captions_flag_zero_denominators() {
        let a = ann(&[("1", &["dog"]), ("2", &["cat"])], syn(&[("dog", "dog"), ("cat", "cat")]));
        let r = chair_metrics(&[("1".into(), "".into()), ("2".into(), "".into())], &a);
        assert_eq!((r.chair_s, r.chair_i, r.f1), (0.0, 0.0, 0.0));
        assert!(r.zero_denominator.contains(&"chair_i".to_string()));
        assert!(!r.zero_denominator.contains(&"chair_s".to_string()));
    }

    #[test]
    fn f1_examples() {
        let s = syn(&[("dog", "dog"), ("cat", "cat"), ("horse", "horse")]);
        let a = ann(&[("1", &["dog", "cat"]), ("2", &["dog"])], s);
        assert!((f1_metric(&[("1".into(), "a dog".into())], &a) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_metric(&[("2".into(), "a horse".into())], &a), 0.0);
        assert_eq!(f1_metric(&[("1".into(), "a cat and a dog".into()), ("2".into(), "dog".into())], &a), 1.0);
    }

    #[test]
    fn missing_annotation_is_excluded() {
        let a = ann(&[("1", &["dog"])], syn(&[("dog", "dog")]));
        let r = chair_metrics(&[("1".into(), "dog".into()), ("9".into(), "dog".into())], &a);
        assert_eq!(r.n_captions, 1);
        assert_eq!(r.missing_annotations, ["9"]);
    }
}
