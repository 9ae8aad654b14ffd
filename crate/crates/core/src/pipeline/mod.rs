//! Run orchestration: dataset loading, the corrupt-adapt-evaluate flow,
//! persistence under a run directory, and reports.
//!
//! Layout of a run directory:
//!
//! ```text
//! <output_dir>/<run_name>/
//!   manifest.json          rewritten after every sample; `complete` flips at the end
//!   traces/<sample>.json   one adaptation trace per sample
//!   eval/                  written by `run_evaluate`
//!   meta/                  written by `run_meta`
//! ```

mod config;
mod eval;
pub mod io;

pub use config::{BackendKind, CorruptionChoice, DatasetConfig, RunConfig, BACKEND_ENV};
pub use eval::{
    evaluate_traces, load_traces, run_evaluate, Ablation, ArmScores, EvaluationReport, GroupSummary, TraceSet,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{adapt_sample, AdaptationTrace, Fallback};
use crate::backends::toy::{ToyBackends, ToyWorld, ToyWorldConfig};
use crate::backends::{Backends, ImageInput};
use crate::corruptions::{corrupt, dataset_seed, CorruptionSpec};
use crate::error::{Error, Result};
use crate::evaluation::{load_coco_instances, Annotations};
use crate::lora::{AdapterCheckpoint, AdapterState};
use crate::meta::{meta_train, MetaLogEntry};
use crate::rng::{derive_seed, hash_str};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACES_DIR: &str = "traces";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Loaded images plus everything needed to score them.
pub struct Dataset {
    pub images: Vec<ImageInput>,
    pub annotations: Option<Annotations>,
    pub toy: ToyBackends,
    pub hash: String,
}

impl Dataset {
    pub fn backends(&self) -> Backends<'_> {
        self.toy.backends()
    }
}

fn toy_annotations(world: &ToyWorld) -> Result<Annotations> {
    let objects = world
        .image_ids()
        .into_iter()
        .map(|id| world.scene_objects(&id).map(|o| (id, o)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Annotations::new(objects, world.synonym_map()))
}

fn load_images_dir(dir: &Path) -> Result<Vec<ImageInput>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let img = image::open(p)
                .map_err(|e| Error::Parse {
                    path: p.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            ImageInput::from_rgb_image(id, &img)
        })
        .collect()
}

fn dataset_hash(images: &[ImageInput]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.id.as_bytes());
        h.update([0]);
        h.update((img.height() as u64).to_le_bytes());
        h.update((img.width() as u64).to_le_bytes());
        h.update(img.pixels());
    }
    hex::encode(h.finalize())
}

/// Resolve the configured dataset. The toy backend is always built from the
/// configured (or built-in) toy world; an images directory supplies pixels
/// whose file stems must be toy scene ids.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let world = match &config.dataset.toy_world_path {
        Some(p) => ToyWorld::new(ToyWorldConfig::load(p)?)?,
        None => ToyWorld::standard(),
    };
    let toy = ToyBackends::new(world)?;
    let mut images = match &config.dataset.images_dir {
        Some(dir) => load_images_dir(dir)?,
        None => toy.world.images()?,
    };
    if let Some(ids) = &config.dataset.ids {
        let by_id: BTreeMap<String, ImageInput> = images.into_iter().map(|i| (i.id.clone(), i)).collect();
        images = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Lookup(format!("image id {id:?} not in dataset")))
            })
            .collect::<Result<_>>()?;
    }
    images = images.into_iter().skip(config.dataset.offset).collect();
    if let Some(n) = config.dataset.limit {
        images.truncate(n);
    }
    let annotations = match &config.dataset.annotations_path {
        Some(p) => Some(Annotations::new(load_coco_instances(p)?, crate::evaluation::coco_synonyms())),
        None => Some(toy_annotations(&toy.world)?),
    };
    let hash = dataset_hash(&images);
    Ok(Dataset {
        images,
        annotations,
        toy,
        hash,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleState {
    Pending,
    Done,
    /// Trace found from an earlier invocation and reused.
    Resumed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStatus {
    pub sample_id: String,
    pub source_id: String,
    pub corruption: Option<CorruptionSpec>,
    pub state: SampleState,
    pub trace_path: Option<String>,
    pub trace_sha256: Option<String>,
    pub fallback: Option<Fallback>,
    pub error: Option<String>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub meta_init_hash: Option<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub complete: bool,
    pub samples: Vec<SampleStatus>,
}

impl RunManifest {
    pub fn failures(&self) -> usize {
        self.samples.iter().filter(|s| s.state == SampleState::Failed).count()
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        io::read_json(&run_dir.join(MANIFEST_FILE))
    }
}

pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
}

pub fn run_dir(config: &RunConfig) -> PathBuf {
    let name = config
        .run_name
        .clone()
        .unwrap_or_else(|| format!("run-{}", unix_now()));
    config.output_dir.join(name)
}

struct Sample {
    id: String,
    image: usize,
    corruption: Option<CorruptionSpec>,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn plan_samples(config: &RunConfig, images: &[ImageInput]) -> Vec<Sample> {
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        if config.corruptions.is_empty() {
            out.push(Sample {
                id: sanitize(&img.id),
                image: i,
                corruption: None,
            });
        }
        for c in &config.corruptions {
            out.push(Sample {
                id: sanitize(&format!("{}__{}{}", img.id, c.kind.abbrev(), c.severity)),
                image: i,
                corruption: Some(CorruptionSpec {
                    kind: c.kind,
                    severity: c.severity,
                    seed: dataset_seed(config.global_seed, &img.id, c.kind, c.severity),
                }),
            });
        }
    }
    out
}

fn trace_bytes(trace: &AdaptationTrace) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(trace)?;
    v.push(b'\n');
    Ok(v)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Load and check a meta-learned initialization against the backend.
pub fn load_meta_init(path: &Path, backends: Backends<'_>, config: &RunConfig) -> Result<AdapterState> {
    let state = AdapterCheckpoint::load(path)?.to_state()?;
    let fresh = crate::lora::init_adapter(backends.generator.model_dims(), &config.ttt.lora, 0)?;
    if !state.is_structurally_equal(&fresh) {
        return Err(Error::config(format!(
            "meta initialization {} does not match the adapter layout of this configuration",
            path.display()
        )));
    }
    Ok(state)
}

fn adapt_one(
    sample: &Sample,
    data: &Dataset,
    config: &RunConfig,
    init: Option<&AdapterState>,
) -> Result<AdaptationTrace> {
    let source = &data.images[sample.image];
    let image = match &sample.corruption {
        Some(spec) => corrupt(source, spec)?,
        None => source.clone(),
    };
    let mut ttt = config.ttt.clone();
    ttt.seed = derive_seed(config.global_seed, &[hash_str(&sample.id)]);
    let mut trace = adapt_sample(&image, &ttt, data.backends(), init)?;
    trace.source_id = Some(source.id.clone());
    trace.corruption = sample.corruption;
    Ok(trace)
}

/// Adapt every (image, corruption) sample, persisting one trace each.
///
/// Rerunning with the same `run_name` reuses every trace that already
/// parses and only computes the rest. The manifest is rewritten after each
/// sample so an interrupted run still lists what finished.
pub fn run_adapt(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let data = load_dataset(config)?;
    let init = match &config.meta_init_path {
        Some(p) => Some(load_meta_init(p, data.backends(), config)?),
        None => None,
    };
    let dir = run_dir(config);
    let traces_dir = dir.join(TRACES_DIR);
    std::fs::create_dir_all(&traces_dir).map_err(|e| Error::io(&traces_dir, e))?;

    let samples = plan_samples(config, &data.images);
    let unique: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    if unique.len() != samples.len() {
        return Err(Error::config("sample ids collide after sanitizing image ids"));
    }
    let mut manifest = RunManifest {
        version: VERSION.to_string(),
        config: config.clone(),
        config_hash: config.content_hash()?,
        dataset_hash: data.hash.clone(),
        meta_init_hash: init.as_ref().map(crate::adaptation::adapter_hash),
        started_unix: unix_now(),
        finished_unix: None,
        complete: false,
        samples: samples
            .iter()
            .map(|s| SampleStatus {
                sample_id: s.id.clone(),
                source_id: data.images[s.image].id.clone(),
                corruption: s.corruption,
                state: SampleState::Pending,
                trace_path: None,
                trace_sha256: None,
                fallback: None,
                error: None,
                seconds: None,
            })
            .collect(),
    };

    let rel_path = |id: &str| format!("{TRACES_DIR}/{id}.json");
    let mut pending = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let path = dir.join(rel_path(&s.id));
        let existing = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<AdaptationTrace>(&b).ok().map(|t| (b, t)));
        match existing {
            Some((bytes, trace)) => {
                let st = &mut manifest.samples[i];
                st.state = SampleState::Resumed;
                st.trace_path = Some(rel_path(&s.id));
                st.trace_sha256 = Some(sha_hex(&bytes));
                st.fallback = trace.fallback;
            }
            None => {
                if path.exists() {
                    log::warn!("{}: unreadable trace, recomputing", path.display());
                }
                pending.push(i);
            }
        }
    }
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    log::info!(
        "{} samples, {} to compute, {} reused",
        samples.len(),
        pending.len(),
        samples.len() - pending.len()
    );

    let next = AtomicUsize::new(0);
    let workers = config.workers.min(pending.len()).max(1);
    let (tx, rx) = mpsc::sync_channel::<(usize, Result<AdaptationTrace>, f64)>(workers * 2);
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, samples, data, init) = (&next, &pending, &samples, &data, init.as_ref());
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&i) = pending.get(k) else { break };
                let t0 = Instant::now();
                let result = adapt_one(&samples[i], data, config, init);
                if tx.send((i, result, t0.elapsed().as_secs_f64())).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result, secs) in rx {
            let st = &mut manifest.samples[i];
            st.seconds = Some(secs);
            match result.and_then(|t| trace_bytes(&t).map(|b| (t, b))) {
                Ok((trace, bytes)) => {
                    let rel = rel_path(&samples[i].id);
                    io::write_atomic(&dir.join(&rel), &bytes)?;
                    st.state = SampleState::Done;
                    st.trace_path = Some(rel);
                    st.trace_sha256 = Some(sha_hex(&bytes));
                    st.fallback = trace.fallback;
                    if let Some(fb) = &st.fallback {
                        log::warn!("{}: fell back to baseline ({fb:?})", st.sample_id);
                    }
                }
                Err(e) => {
                    log::error!("{}: {e}", st.sample_id);
                    st.state = SampleState::Failed;
                    st.error = Some(e.to_string());
                }
            }
            io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        }
        Ok(())
    })?;

    manifest.finished_unix = Some(unix_now());
    manifest.complete = true;
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome { run_dir: dir, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaProvenance {
    pub kind: String,
    pub dataset_hash: String,
    pub n_images: usize,
    pub meta: crate::meta::MetaConfig,
    pub version: String,
}

pub struct MetaRunOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub phi: AdapterState,
    pub log: Vec<MetaLogEntry>,
}

pub const META_DIR: &str = "meta";
pub const META_CHECKPOINT: &str = "meta_init.json";

/// Meta-train on the configured clean images and write the initialization
/// plus a per-task JSONL log under `<run_dir>/meta/`.
pub fn run_meta(config: &RunConfig) -> Result<MetaRunOutcome> {
    config.validate()?;
    let data = load_dataset(config)?;
    let out = meta_train(&data.images, &config.meta, data.backends())?;
    let dir = run_dir(config).join(META_DIR);
    let provenance = MetaProvenance {
        kind: "meta_init".into(),
        dataset_hash: data.hash.clone(),
        n_images: data.images.len(),
        meta: config.meta.clone(),
        version: VERSION.into(),
    };
    let ckpt = AdapterCheckpoint::from_state(&out.phi, Some(serde_json::to_value(&provenance)?))?;
    let checkpoint_path = dir.join(META_CHECKPOINT);
    ckpt.save(&checkpoint_path)?;
    let mut lines = String::new();
    for e in &out.log {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    let log_path = dir.join("meta_log.jsonl");
    io::write_atomic(&log_path, lines.as_bytes())?;
    Ok(MetaRunOutcome {
        checkpoint_path,
        log_path,
        phi: out.phi,
        log: out.log,
    })
}
