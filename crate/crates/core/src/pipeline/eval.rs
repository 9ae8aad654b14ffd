use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{write_atomic, write_json};
use crate::adaptation::AdaptationTrace;
use crate::error::{Error, Result};
use crate::evaluation::{
    chair_metrics, score_distribution_report, write_captions_jsonl, write_score_report, Annotations,
    HallucinationReport, ScoreReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Also evaluate the first round's best sampled caption, before any training.
    ClipWithoutTtt,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "clip-without-ttt" => Ok(Self::ClipWithoutTtt),
            other => Err(Error::config(format!("unknown ablation `{other}`"))),
        }
    }
}

pub struct TraceSet {
    pub traces: Vec<(PathBuf, AdaptationTrace)>,
    /// Files that failed to parse, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Read every `*.json` trace in `dir`, sorted by file name. Unparseable
/// files are skipped with a warning.
pub fn load_traces(dir: &Path) -> Result<TraceSet> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut set = TraceSet {
        traces: Vec::new(),
        skipped: Vec::new(),
    };
    for p in paths {
        match super::io::read_json::<AdaptationTrace>(&p) {
            Ok(t) => set.traces.push((p, t)),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                set.skipped.push((p, e.to_string()));
            }
        }
    }
    Ok(set)
}

/// Mean CLIP score of each caption source, in display units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub greedy: f64,
    pub clip_without_ttt: Option<f64>,
    pub clipttt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub baseline_chair_s: f64,
    pub final_chair_s: f64,
    pub baseline_chair_i: f64,
    pub final_chair_i: f64,
    pub baseline_score: f64,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_traces: usize,
    pub skipped_files: Vec<String>,
    pub fallbacks: usize,
    pub baseline: HallucinationReport,
    #[serde(rename = "final")]
    pub final_: HallucinationReport,
    pub clip_without_ttt: Option<HallucinationReport>,
    pub scores: ArmScores,
    /// Per corruption column (`clean` for uncorrupted samples).
    pub by_corruption: Vec<GroupSummary>,
    pub score_report: ScoreReport,
}

fn key(t: &AdaptationTrace) -> String {
    t.source_id.clone().unwrap_or_else(|| t.image_id.clone())
}

fn group_of(t: &AdaptationTrace) -> String {
    t.corruption
        .map(|c| format!("{}{}", c.kind.abbrev(), c.severity))
        .unwrap_or_else(|| "clean".into())
}

type Captions = Vec<(String, String)>;

fn arms(traces: &[&AdaptationTrace]) -> (Captions, Captions, Option<Captions>) {
    let base = traces.iter().map(|t| (key(t), t.baseline_caption.clone())).collect();
    let fin = traces.iter().map(|t| (key(t), t.final_caption.clone())).collect();
    let pl: Option<Captions> = traces
        .iter()
        .map(|t| t.initial_pseudo_label().map(|(c, _)| (key(t), c.to_string())))
        .collect();
    (base, fin, pl)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate_traces(
    traces: &[AdaptationTrace],
    annotations: &Annotations,
    bins: &[f64],
    ablation: Ablation,
) -> Result<EvaluationReport> {
    if traces.is_empty() {
        return Err(Error::Arity { expected: 1, got: 0 });
    }
    let all: Vec<&AdaptationTrace> = traces.iter().collect();
    let (base, fin, pl) = arms(&all);
    let want_pl = ablation == Ablation::ClipWithoutTtt;
    let clip_without_ttt = if want_pl {
        Some(chair_metrics(
            pl.as_ref()
                .ok_or_else(|| Error::config("some traces have no candidate round to evaluate"))?,
            annotations,
        ))
    } else {
        None
    };
    let scores = ArmScores {
        greedy: mean(traces.iter().map(|t| t.baseline_score * 100.0)),
        clip_without_ttt: want_pl
            .then(|| mean(traces.iter().filter_map(|t| t.initial_pseudo_label()).map(|(_, s)| s * 100.0))),
        clipttt: mean(traces.iter().map(|t| t.final_score * 100.0)),
    };

    let mut groups: BTreeMap<String, Vec<&AdaptationTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(group_of(t)).or_default().push(t);
    }
    let by_corruption = groups
        .into_iter()
        .map(|(group, ts)| {
            let (b, f, _) = arms(&ts);
            let (rb, rf) = (chair_metrics(&b, annotations), chair_metrics(&f, annotations));
            GroupSummary {
                group,
                n: ts.len(),
                baseline_chair_s: rb.chair_s,
                final_chair_s: rf.chair_s,
                baseline_chair_i: rb.chair_i,
                final_chair_i: rf.chair_i,
                baseline_score: mean(ts.iter().map(|t| t.baseline_score * 100.0)),
                final_score: mean(ts.iter().map(|t| t.final_score * 100.0)),
            }
        })
        .collect();

    Ok(EvaluationReport {
        n_traces: traces.len(),
        skipped_files: Vec::new(),
        fallbacks: traces.iter().filter(|t| t.fallback.is_some()).count(),
        baseline: chair_metrics(&base, annotations),
        final_: chair_metrics(&fin, annotations),
        clip_without_ttt,
        scores,
        by_corruption,
        score_report: score_distribution_report(traces, bins)?,
    })
}

/// Evaluate all traces in `traces_dir` and write reports to `out_dir`.
pub fn run_evaluate(
    traces_dir: &Path,
    annotations: &Annotations,
    bins: &[f64],
    ablation: Ablation,
    out_dir: &Path,
) -> Result<EvaluationReport> {
    let set = load_traces(traces_dir)?;
    let traces: Vec<AdaptationTrace> = set.traces.into_iter().map(|(_, t)| t).collect();
    let mut report = evaluate_traces(&traces, annotations, bins, ablation)?;
    report.skipped_files = set
        .skipped
        .iter()
        .map(|(p, _)| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();

    write_json(&out_dir.join("evaluation.json"), &report)?;
    let all: Vec<&AdaptationTrace> = traces.iter().collect();
    let (base, fin, pl) = arms(&all);
    write_captions_jsonl(&out_dir.join("captions_baseline.jsonl"), &base)?;
    write_captions_jsonl(&out_dir.join("captions_final.jsonl"), &fin)?;
    if let (Ablation::ClipWithoutTtt, Some(pl)) = (ablation, pl) {
        write_captions_jsonl(&out_dir.join("captions_clip_without_ttt.jsonl"), &pl)?;
    }
    let mut csv = String::from(
        "group,n,baseline_chair_s,final_chair_s,baseline_chair_i,final_chair_i,baseline_score,final_score\n",
    );
    for g in &report.by_corruption {
        let _ = writeln!(
            csv,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            g.group,
            g.n,
            g.baseline_chair_s * 100.0,
            g.final_chair_s * 100.0,
            g.baseline_chair_i * 100.0,
            g.final_chair_i * 100.0,
            g.baseline_score,
            g.final_score
        );
    }
    write_atomic(&out_dir.join("by_corruption.csv"), csv.as_bytes())?;
    write_score_report(out_dir, &report.score_report)?;
    Ok(report)
}
