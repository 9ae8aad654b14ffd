use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ttt_core::backends::toy::ToyWorld;
use ttt_core::corruptions::{corrupt_dataset, CorruptionKind};
use ttt_core::evaluation::{
    chair_metrics, coco_synonyms, export_judge_prompts, load_coco_instances, load_synonyms, read_captions_jsonl,
    score_distribution_report, write_score_report, Annotations, JudgeItem, N_ASSISTANTS,
};
use ttt_core::pipeline::{
    self, io::write_json, load_dataset, load_traces, Ablation, BackendKind, CorruptionChoice, RunConfig,
    BACKEND_ENV, TRACES_DIR,
};
use ttt_core::ImageInput;

#[derive(Parser)]
#[command(name = "ttt", version, about = "Test-time training for image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt every configured image and write one trace per sample.
    Adapt(AdaptArgs),
    /// Compute hallucination metrics and score reports.
    Evaluate(EvaluateArgs),
    /// Write corrupted copies of a set of images.
    Corrupt(CorruptArgs),
    /// Meta-learn an adapter initialization on clean images.
    MetaTrain(RunArgs),
    /// Write four-way judge prompt files from caption files.
    ExportJudgePrompts(JudgeArgs),
    /// Rebuild the score-distribution report from a traces directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML (or .json) run configuration; toy defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = BACKEND_ENV)]
    backend: Option<BackendKind>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    images_dir: Option<PathBuf>,
    #[arg(long)]
    toy_world: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    meta_init: Option<PathBuf>,
    /// `kind:severity`, repeatable; kinds by name or table abbreviation.
    #[arg(long = "corruption", value_name = "KIND:SEV")]
    corruptions: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of trace files (a run directory also works).
    #[arg(long, conflicts_with = "captions")]
    traces: Option<PathBuf>,
    /// JSONL of `{image_id, caption}`.
    #[arg(long)]
    captions: Option<PathBuf>,
    /// COCO instances JSON; the toy world's scenes are used when omitted.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// JSON term table `{term: category}`; COCO table with --annotations, toy table otherwise.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long)]
    toy_world: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "none")]
    ablation: Ablation,
    /// Comma-separated score bin edges in display units.
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<f64>>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Directory of PNG/JPEG images.
    #[arg(long = "in", conflicts_with = "toy")]
    input: Option<PathBuf>,
    /// Use the built-in toy world's images.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated kinds or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    kinds: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "5")]
    severities: Vec<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct JudgeArgs {
    /// Exactly four caption JSONL files, one per assistant.
    #[arg(long, num_args = 4, required = true)]
    captions: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    bins: Option<Vec<f64>>,
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(b) = args.backend {
        cfg.backend = b;
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = &args.run_name {
        cfg.run_name = Some(n.clone());
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(s) = args.seed {
        cfg.global_seed = s;
    }
    if let Some(i) = args.iterations {
        cfg.ttt.iterations = i;
        cfg.ttt.regen_interval = cfg.ttt.regen_interval.min(i.max(1));
    }
    if let Some(l) = args.limit {
        cfg.dataset.limit = Some(l);
    }
    if let Some(d) = &args.images_dir {
        cfg.dataset.images_dir = Some(d.clone());
    }
    if let Some(w) = &args.toy_world {
        cfg.dataset.toy_world_path = Some(w.clone());
    }
    if cfg.run_name.is_none() {
        cfg.run_name = Some(format!("run-{}", pipeline::unix_now()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_corruption(s: &str) -> Result<CorruptionChoice> {
    let (k, sev) = s
        .split_once(':')
        .with_context(|| format!("expected KIND:SEVERITY, got `{s}`"))?;
    Ok(CorruptionChoice {
        kind: k.parse()?,
        severity: sev.parse().with_context(|| format!("bad severity in `{s}`"))?,
    })
}

fn adapt(args: AdaptArgs) -> Result<ExitCode> {
    let mut cfg = build_config(&args.run)?;
    if let Some(p) = args.meta_init {
        cfg.meta_init_path = Some(p);
    }
    if !args.corruptions.is_empty() {
        cfg.corruptions = args.corruptions.iter().map(|s| parse_corruption(s)).collect::<Result<_>>()?;
    }
    cfg.validate()?;
    log::info!("adapt run {:?} config {}", cfg.run_name, cfg.content_hash()?);
    let out = pipeline::run_adapt(&cfg)?;
    let failures = out.manifest.failures();
    println!("{}", out.run_dir.display());
    eprintln!(
        "{} samples, {} failed",
        out.manifest.samples.len(),
        failures
    );
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn annotations_for(args: &EvaluateArgs) -> Result<Annotations> {
    let synonyms = |default: fn() -> Result<_>| match &args.synonyms {
        Some(p) => Ok(load_synonyms(p)?),
        None => default(),
    };
    match &args.annotations {
        Some(p) => Ok(Annotations::new(load_coco_instances(p)?, synonyms(|| Ok(coco_synonyms()))?)),
        None => {
            let world = match &args.toy_world {
                Some(p) => ToyWorld::new(ttt_core::backends::toy::ToyWorldConfig::load(p)?)?,
                None => ToyWorld::standard(),
            };
            let objects = world
                .image_ids()
                .into_iter()
                .map(|id| world.scene_objects(&id).map(|o| (id, o)))
                .collect::<ttt_core::Result<_>>()?;
            let syn = match &args.synonyms {
                Some(p) => load_synonyms(p)?,
                None => world.synonym_map(),
            };
            Ok(Annotations::new(objects, syn))
        }
    }
}

fn traces_dir(p: &Path) -> PathBuf {
    if p.join(TRACES_DIR).is_dir() {
        p.join(TRACES_DIR)
    } else {
        p.to_path_buf()
    }
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let ann = annotations_for(&args)?;
    let bins = args.bins.clone().unwrap_or_else(|| RunConfig::default().score_bins);
    if let Some(t) = &args.traces {
        let r = pipeline::run_evaluate(&traces_dir(t), &ann, &bins, args.ablation, &args.report)?;
        println!(
            "CHAIR_S {:.1} -> {:.1}  CHAIR_I {:.1} -> {:.1}  F1 {:.3} -> {:.3}  ({} traces)",
            r.baseline.chair_s_percent(),
            r.final_.chair_s_percent(),
            r.baseline.chair_i_percent(),
            r.final_.chair_i_percent(),
            r.baseline.f1,
            r.final_.f1,
            r.n_traces
        );
        if let Some(pl) = &r.clip_without_ttt {
            println!("CLIP w/o TTT: CHAIR_S {:.1}  CHAIR_I {:.1}", pl.chair_s_percent(), pl.chair_i_percent());
        }
        return Ok(ExitCode::SUCCESS);
    }
    let Some(c) = &args.captions else {
        bail!("pass --traces DIR or --captions FILE");
    };
    let caps = read_captions_jsonl(c)?;
    let r = chair_metrics(&caps, &ann);
    write_json(&args.report.join("hallucination.json"), &r)?;
    println!(
        "CHAIR_S {:.1}  CHAIR_I {:.1}  F1 {:.3}  ({} captions, {} unannotated)",
        r.chair_s_percent(),
        r.chair_i_percent(),
        r.f1,
        r.n_captions,
        r.missing_annotations.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn corrupt(args: CorruptArgs) -> Result<ExitCode> {
    let images: Vec<ImageInput> = match (&args.input, args.toy) {
        (Some(dir), false) => {
            let cfg = RunConfig {
                dataset: ttt_core::pipeline::DatasetConfig {
                    images_dir: Some(dir.clone()),
                    ..Default::default()
                },
                ..RunConfig::toy()
            };
            load_dataset(&cfg)?.images
        }
        (None, true) => ToyWorld::standard().images()?,
        _ => bail!("pass exactly one of --in DIR or --toy"),
    };
    let kinds: Vec<CorruptionKind> = if args.kinds.iter().any(|k| k == "all") {
        CorruptionKind::ALL.to_vec()
    } else {
        args.kinds.iter().map(|k| k.parse()).collect::<ttt_core::Result<_>>()?
    };
    let m = corrupt_dataset(&images, &kinds, &args.severities, args.seed, &args.out)?;
    println!("{} images written to {}", m.entries.len(), args.out.display());
    for (id, kind, sev, err) in &m.failures {
        eprintln!("failed: {id} {kind} s{sev}: {err}");
    }
    Ok(if m.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn meta_train(args: RunArgs) -> Result<ExitCode> {
    let cfg = build_config(&args)?;
    let out = pipeline::run_meta(&cfg)?;
    let failed = out.log.iter().filter(|e| e.error.is_some()).count();
    println!("{}", out.checkpoint_path.display());
    eprintln!("{} tasks, {} skipped", out.log.len(), failed);
    Ok(ExitCode::SUCCESS)
}

fn export_judge(args: JudgeArgs) -> Result<ExitCode> {
    let sets = args
        .captions
        .iter()
        .map(|p| read_captions_jsonl(p))
        .collect::<ttt_core::Result<Vec<_>>>()?;
    let lookups: Vec<std::collections::BTreeMap<&str, &str>> = sets
        .iter()
        .map(|s| s.iter().map(|(i, c)| (i.as_str(), c.as_str())).collect())
        .collect();
    let items: Vec<JudgeItem> = sets[0]
        .iter()
        .map(|(id, _)| JudgeItem {
            image_id: id.clone(),
            responses: lookups
                .iter()
                .map(|m| m.get(id.as_str()).copied().unwrap_or("").to_string())
                .collect(),
        })
        .collect();
    debug_assert!(items.iter().all(|i| i.responses.len() == N_ASSISTANTS));
    let out = export_judge_prompts(&items, &args.out)?;
    let flagged = out.iter().filter(|e| !e.empty_slots.is_empty()).count();
    println!("{} prompt files written to {}", out.len(), args.out.display());
    if flagged > 0 {
        eprintln!("{flagged} prompts have empty responses");
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode> {
    let set = load_traces(&traces_dir(&args.traces))?;
    let traces: Vec<_> = set.traces.into_iter().map(|(_, t)| t).collect();
    let bins = args.bins.unwrap_or_else(|| RunConfig::default().score_bins);
    let r = score_distribution_report(&traces, &bins)?;
    write_score_report(&args.out, &r)?;
    println!(
        "mean score {:.2} -> {:.2} over {} traces",
        r.baseline.mean, r.final_.mean, r.n
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Adapt(a) => adapt(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Corrupt(a) => corrupt(a),
        Command::MetaTrain(a) => meta_train(a),
        Command::ExportJudgePrompts(a) => export_judge(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
