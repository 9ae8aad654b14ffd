//! Four-way judge prompt files for an external LLM grader. Nothing is sent
//! anywhere; the files are meant to be submitted by hand or by another tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_ASSISTANTS: usize = 4;

const PREAMBLE: &str = "You are required to score the performance of four AI assistants in describing a given image. You should pay extra attention to the hallucination, which refers to the part of descriptions that are inconsistent with the image content, such as claiming the existence of something not present in the image or describing incorrectly in terms of the counts, positions, or colors of objects in the image. Please rate the responses of the assistants on a scale of 1 to 10, where a higher score indicates better performance, according to the following criteria:
1: Accuracy: whether the response is accurate with respect to the image content. Responses with fewer hallucinations should be given higher scores.
2: Detailedness: whether the response is rich in necessary details. Note that hallucinated descriptions should not count as necessary details.
Please output the scores for each criterion, containing only four values indicating the scores for Assistant 1, 2, 3 and 4, respectively. The four scores are separated by a space. Following the scores, please provide an explanation of your evaluation, avoiding any potential bias and ensuring that the order in which the responses were presented does not affect your judgment.
";

const FOOTER: &str = "Output format:
Accuracy: <Scores of the four answers>
Reason:

Detailedness: <Scores of the four answers>
Reason:
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub image_id: String,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeExport {
    pub image_id: String,
    pub path: PathBuf,
    /// 1-based assistant slots that received an empty response.
    pub empty_slots: Vec<usize>,
}

pub fn render_judge_prompt(responses: &[String]) -> Result<String> {
    if responses.len() != N_ASSISTANTS {
        return Err(Error::Arity {
            expected: N_ASSISTANTS,
            got: responses.len(),
        });
    }
    let mut s = String::from(PREAMBLE);
    for (i, r) in responses.iter().enumerate() {
        let k = i + 1;
        s.push('\n');
        if k == 3 {
            s.push('\n');
        }
        s.push_str(&format!("[Assistant {k}]\n{r}\n[End of Assistant {k}]\n"));
    }
    s.push('\n');
    s.push_str(FOOTER);
    Ok(s)
}

/// Recover the four responses from a rendered prompt.
pub fn parse_judge_prompt(text: &str) -> Result<Vec<String>> {
    (1..=N_ASSISTANTS)
        .map(|k| {
            let open = format!("[Assistant {k}]\n");
            let close = format!("\n[End of Assistant {k}]");
            let start = text
                .find(&open)
                .map(|i| i + open.len())
                .ok_or_else(|| Error::Lookup(format!("assistant {k} block not found")))?;
            let end = text[start..]
                .find(&close)
                .map(|i| start + i)
                .ok_or_else(|| Error::Lookup(format!("end of assistant {k} not found")))?;
            Ok(text[start..end].to_string())
        })
        .collect()
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Write one prompt file per image under `out_dir`. Every item is checked
/// for arity before anything is written.
pub fn export_judge_prompts(items: &[JudgeItem], out_dir: &Path) -> Result<Vec<JudgeExport>> {
    for it in items {
        if it.responses.len() != N_ASSISTANTS {
            return Err(Error::Arity {
                expected: N_ASSISTANTS,
                got: it.responses.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(items.len());
    for it in items {
        let text = render_judge_prompt(&it.responses)?;
        let path = out_dir.join(format!("{}.txt", file_stem(&it.image_id)));
        crate::pipeline::io::write_atomic(&path, text.as_bytes())?;
        let empty_slots: Vec<usize> = it
            .responses
            .iter()
            .enumerate()
            .filter(|(_, r)| r.trim().is_empty())
            .map(|(i, _)| i + 1)
            .collect();
        if !empty_slots.is_empty() {
            log::warn!("{}: empty responses in slots {empty_slots:?}", it.image_id);
        }
        out.push(JudgeExport {
            image_id: it.image_id.clone(),
            path,
            empty_slots,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four() -> Vec<String> {
        ["A dog.", "Two cats\non a mat.", "", "A bus. It is red."]
            .map(String::from)
            .to_vec()
    }

    #[test]
    fn prompt_layout() {
        let p = render_judge_prompt(&four()).unwrap();
        assert!(p.starts_with("You are required to score the performance of four AI assistants"));
        assert!(p.contains("Accuracy: <Scores of the four answers>"));
        assert!(p.contains("Detailedness: <Scores of the four answers>"));
        assert!(p.contains("[End of Assistant 2]\n\n\n[Assistant 3]"));
        assert!(p.contains("[End of Assistant 1]\n\n[Assistant 2]"));
        assert!(p.ends_with("Reason:\n"));
    }

    #[test]
    fn round_trip() {
        let p = render_judge_prompt(&four()).unwrap();
        assert_eq!(parse_judge_prompt(&p).unwrap(), four());
    }

    #[test]
    fn arity_and_empty_flags() {
        assert!(matches!(
            render_judge_prompt(&four()[..3]),
            Err(Error::Arity { expected: 4, got: 3 })
        ));
        let dir = tempfile::tempdir().unwrap();
        let ex = export_judge_prompts(
            &[JudgeItem {
                image_id: "img/1".into(),
                responses: four(),
            }],
            dir.path(),
        )
        .unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].empty_slots, [3]);
        let text = std::fs::read_to_string(&ex[0].path).unwrap();
        assert!(text.contains("Accuracy:") && text.contains("Detailedness:"));
    }
}
