//! Per-sample test-time adaptation loop.
//!
//! For one image: record the greedy baseline, then for each iteration
//! optionally resample candidates from the teacher and pick the
//! best-scoring one as pseudo-label, take one optimizer step on the student
//! adapter toward it, and move the teacher (EMA, copy, or frozen). Student
//! greedy captions are scored at a fixed cadence and the returned caption
//! comes from the checkpoint picked by [`CheckpointStrategy`].

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{select_checkpoint, CheckpointStrategy};
pub use optim::{AdamWParams, OptimizerKind, OptimizerState};
pub use schedule::{lr_at, LrSchedule};

use serde::{Deserialize, Serialize};

use crate::backends::{Backends, DecodingMode, DecodingParams, ImageInput};
use crate::clip_score::{CandidateSet, ScoredCaption, Scorer, ScoringMode};
use crate::corruptions::CorruptionSpec;
use crate::error::{Error, Result};
use crate::lora::{adapter_axpy, init_adapter, AdapterState, LoraConfig};
use crate::rng::{derive_seed, hash_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Exponential moving average of the student.
    #[default]
    Ema,
    /// Never updated; the pseudo-label is chosen once.
    Fixed,
    /// Copy of the student after every step.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    pub iterations: usize,
    pub regen_interval: usize,
    pub n_candidates: usize,
    pub decoding: DecodingParams,
    pub lr0: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub adamw: AdamWParams,
    pub ema_decay: f64,
    pub teacher_mode: TeacherMode,
    pub checkpoint_strategy: CheckpointStrategy,
    /// Empty string is the null prompt.
    pub prompt: String,
    pub scoring_mode: ScoringMode,
    /// Score the student every this many iterations (plus the last one).
    /// `None` follows `regen_interval`.
    pub eval_interval: Option<usize>,
    pub seed: u64,
    pub lora: LoraConfig,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            iterations: 70,
            regen_interval: 20,
            n_candidates: 16,
            decoding: DecodingParams::default(),
            lr0: 5e-5,
            lr_schedule: LrSchedule::Cosine,
            optimizer: OptimizerKind::AdamW,
            adamw: AdamWParams::default(),
            ema_decay: 0.999,
            teacher_mode: TeacherMode::Ema,
            checkpoint_strategy: CheckpointStrategy::MaxClipScore,
            prompt: String::new(),
            scoring_mode: ScoringMode::SentenceAvg,
            eval_interval: None,
            seed: 0,
            lora: LoraConfig::default(),
        }
    }
}

impl TttConfig {
    /// Settings for the toy backend. The toy model has a few hundred adapter
    /// parameters, so it needs a far larger step size than a billion-parameter
    /// model to move its outputs within the same iteration budget.
    pub fn toy() -> Self {
        Self {
            lr0: 0.05,
            ..Self::default()
        }
    }

    pub fn eval_every(&self) -> usize {
        self.eval_interval.unwrap_or(self.regen_interval).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && !(1..=self.iterations).contains(&self.regen_interval) {
            return Err(Error::config("regen_interval must lie in [1, iterations]"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("n_candidates must be at least 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        if self.eval_interval == Some(0) {
            return Err(Error::config("eval_interval must be at least 1"));
        }
        self.decoding.validate()
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        lr_at(self.lr_schedule, self.lr0, self.iterations, iteration)
    }

    /// Per-sample seed root; all randomness for `image_id` derives from it.
    pub fn sample_seed(&self, image_id: &str) -> u64 {
        derive_seed(self.seed, &[hash_str(image_id)])
    }
}

/// State of the student at one point of the run. Record `i` describes the
/// adapter after `i` optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Loss of this state on the active pseudo-label.
    pub loss: Option<f64>,
    pub pseudo_label: Option<String>,
    pub pseudo_label_score: Option<f64>,
    /// Greedy caption; present only on evaluated iterations.
    pub student_caption: Option<String>,
    pub student_score: Option<f64>,
    pub lr: f64,
    pub candidates_refreshed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRound {
    pub iteration: usize,
    pub captions: Vec<String>,
    pub scores: Vec<f64>,
    pub best_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Fallback {
    /// Training hit a non-finite loss or gradient.
    NonFinite { iteration: usize, detail: String },
    /// A non-zero initialization never beat the unadapted caption.
    BaselineRetained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionSpec>,
    pub config: TttConfig,
    /// Hash of the initial adapter when it was not a fresh zero-delta init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_hash: Option<String>,
    pub baseline_caption: String,
    pub baseline_score: f64,
    pub records: Vec<IterationRecord>,
    pub candidate_rounds: Vec<CandidateRound>,
    /// `None` when the baseline caption is returned.
    pub selected_iteration: Option<usize>,
    pub final_caption: String,
    pub final_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<Fallback>,
}

impl AdaptationTrace {
    pub fn improvement(&self) -> f64 {
        self.final_score - self.baseline_score
    }

    /// Best candidate of the first round: the pseudo-label picked before any training.
    pub fn initial_pseudo_label(&self) -> Option<(&str, f64)> {
        self.candidate_rounds
            .first()
            .map(|r| (r.captions[r.best_index].as_str(), r.scores[r.best_index]))
    }
}

fn candidate_params(config: &TttConfig, sample_seed: u64, iteration: usize, j: usize) -> DecodingParams {
    DecodingParams {
        mode: DecodingMode::Stochastic,
        seed: derive_seed(sample_seed, &[iteration as u64, j as u64]),
        ..config.decoding.clone()
    }
}

fn greedy_params(config: &TttConfig) -> DecodingParams {
    DecodingParams::greedy(config.decoding.max_tokens)
}

fn sample_candidates(
    backends: Backends<'_>,
    scorer: &Scorer<'_>,
    teacher: &AdapterState,
    image: &ImageInput,
    config: &TttConfig,
    sample_seed: u64,
    iteration: usize,
) -> Result<CandidateSet> {
    let mut captions = Vec::with_capacity(config.n_candidates);
    for j in 0..config.n_candidates {
        let params = candidate_params(config, sample_seed, iteration, j);
        match backends.generator.generate(image, &config.prompt, &params, teacher) {
            Ok(c) => captions.push(c),
            Err(e) => {
                return Err(Error::CandidateGeneration {
                    produced: captions.len(),
                    partial: captions,
                    reason: e.to_string(),
                })
            }
        }
    }
    scorer.rank(&captions, config.scoring_mode)
}

/// Sample `n_candidates` captions from the teacher and rank them.
pub fn generate_candidates(
    backends: Backends<'_>,
    teacher: &AdapterState,
    image: &ImageInput,
    config: &TttConfig,
    iteration: usize,
) -> Result<CandidateSet> {
    let scorer = Scorer::new(backends.encoder, image)?;
    sample_candidates(
        backends,
        &scorer,
        teacher,
        image,
        config,
        config.sample_seed(&image.id),
        iteration,
    )
}

/// One optimizer step of the student toward `pseudo_label`. Returns the
/// updated adapter and the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn student_step(
    backends: Backends<'_>,
    student: &AdapterState,
    image: &ImageInput,
    prompt: &str,
    pseudo_label: &str,
    optimizer: &mut OptimizerState,
    lr: f64,
    iteration: usize,
) -> Result<(AdapterState, f64)> {
    if pseudo_label.trim().is_empty() {
        return Err(Error::EmptyCaption);
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("learning rate must be finite and non-negative"));
    }
    let (loss, grad) = backends.generator.loss_and_grad(image, prompt, pseudo_label, student)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            what: format!("loss = {loss}"),
        });
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            iteration,
            what: "gradient".into(),
        });
    }
    let updated = optimizer.step(student, &grad, lr)?;
    if !updated.all_finite() {
        return Err(Error::NonFinite {
            iteration,
            what: "updated adapter".into(),
        });
    }
    Ok((updated, loss))
}

/// `decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &AdapterState, student: &AdapterState, decay: f64) -> Result<AdapterState> {
    adapter_axpy(teacher, student, decay, 1.0 - decay)
}

/// Short content hash of an adapter's parameters.
pub fn adapter_hash(adapter: &AdapterState) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for name in adapter.layers.keys() {
        h.update(name.as_bytes());
    }
    for v in adapter.flat_params() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

struct Evaluated {
    caption: String,
    score: Option<f64>,
}

fn evaluate(
    backends: Backends<'_>,
    scorer: &Scorer<'_>,
    image: &ImageInput,
    config: &TttConfig,
    adapter: &AdapterState,
) -> Result<Evaluated> {
    let caption = backends
        .generator
        .generate(image, &config.prompt, &greedy_params(config), adapter)?;
    let score = if caption.trim().is_empty() {
        None
    } else {
        Some(scorer.score(&caption, config.scoring_mode)?.score)
    };
    Ok(Evaluated { caption, score })
}

fn round_of(iteration: usize, set: &CandidateSet) -> CandidateRound {
    CandidateRound {
        iteration,
        captions: set.candidates.iter().map(|c| c.caption.clone()).collect(),
        scores: set.candidates.iter().map(|c| c.score).collect(),
        best_index: set.best_index,
    }
}

/// Run test-time adaptation on one image.
///
/// `init` seeds both student and teacher (e.g. a meta-learned
/// initialization); otherwise a fresh adapter with zero delta is used.
/// Numerical failures end the run early and return the baseline caption
/// with [`Fallback::NonFinite`]; backend failures are returned as errors.
pub fn adapt_sample(
    image: &ImageInput,
    config: &TttConfig,
    backends: Backends<'_>,
    init: Option<&AdapterState>,
) -> Result<AdaptationTrace> {
    config.validate()?;
    let sample_seed = config.sample_seed(&image.id);
    let scorer = Scorer::new(backends.encoder, image)?;
    let dims = backends.generator.model_dims();
    let zero = init_adapter(dims, &config.lora, derive_seed(sample_seed, &[0x11_0A]))?;
    let initial = match init {
        Some(a) => a.clone(),
        None => zero.clone(),
    };
    let init_hash = init.map(adapter_hash);

    let baseline_caption = backends
        .generator
        .generate(image, &config.prompt, &greedy_params(config), &zero)?;
    let baseline_score = scorer.score(&baseline_caption, config.scoring_mode)?.score;

    let mut trace = AdaptationTrace {
        image_id: image.id.clone(),
        source_id: None,
        corruption: None,
        config: config.clone(),
        init_hash,
        baseline_caption: baseline_caption.clone(),
        baseline_score,
        records: Vec::with_capacity(config.iterations + 1),
        candidate_rounds: Vec::new(),
        selected_iteration: None,
        final_caption: baseline_caption.clone(),
        final_score: baseline_score,
        fallback: None,
    };

    let mut student = initial.clone();
    let mut teacher = initial;
    let mut optimizer = OptimizerState::new(config.optimizer, config.adamw, student.num_params());
    let mut pseudo: Option<ScoredCaption> = None;
    let mut best_loss: Option<(usize, f64, AdapterState)> = None;
    let eval_every = config.eval_every();

    for i in 0..=config.iterations {
        let training = i < config.iterations;
        let refresh = training
            && (i == 0 || (i % config.regen_interval == 0 && config.teacher_mode != TeacherMode::Fixed));
        if refresh {
            let set = sample_candidates(backends, &scorer, &teacher, image, config, sample_seed, i)?;
            trace.candidate_rounds.push(round_of(i, &set));
            pseudo = Some(set.best().clone());
        }

        let mut step_grad = None;
        let loss = match &pseudo {
            None => None,
            Some(label) if training => {
                match backends.generator.loss_and_grad(image, &config.prompt, &label.caption, &student) {
                    Ok((l, g)) => {
                        step_grad = Some(g);
                        Some(l)
                    }
                    Err(e) => return Err(e),
                }
            }
            Some(label) => Some(backends.generator.loss(image, &config.prompt, &label.caption, &student)?),
        };
        if let Some(l) = loss {
            let grad_ok = step_grad.as_ref().is_none_or(|g| g.all_finite());
            if !l.is_finite() || !grad_ok {
                let detail = if l.is_finite() { "gradient".to_string() } else { format!("loss = {l}") };
                trace.fallback = Some(Fallback::NonFinite { iteration: i, detail });
                return Ok(trace);
            }
            if best_loss.as_ref().is_none_or(|b| l < b.1) {
                best_loss = Some((i, l, student.clone()));
            }
        }

        let evaluated = if i % eval_every == 0 || i == config.iterations {
            Some(evaluate(backends, &scorer, image, config, &student)?)
        } else {
            None
        };
        let lr = if training { config.lr_at(i) } else { 0.0 };
        trace.records.push(IterationRecord {
            iteration: i,
            loss,
            pseudo_label: pseudo.as_ref().map(|p| p.caption.clone()),
            pseudo_label_score: pseudo.as_ref().map(|p| p.score),
            student_caption: evaluated.as_ref().map(|e| e.caption.clone()),
            student_score: evaluated.and_then(|e| e.score),
            lr,
            candidates_refreshed: refresh,
        });

        if let Some(grad) = step_grad {
            let next = optimizer.step(&student, &grad, lr)?;
            if !next.all_finite() {
                trace.fallback = Some(Fallback::NonFinite {
                    iteration: i,
                    detail: "updated adapter".into(),
                });
                return Ok(trace);
            }
            student = next;
            teacher = match config.teacher_mode {
                TeacherMode::Ema => ema_update(&teacher, &student, config.ema_decay)?,
                TeacherMode::Dynamic => student.clone(),
                TeacherMode::Fixed => teacher,
            };
        }
    }

    let Some(mut selected) = select_checkpoint(&trace.records, config.checkpoint_strategy) else {
        return Ok(trace);
    };
    if trace.records[selected].student_caption.is_none() {
        // Only best-loss can land on an unevaluated iteration.
        if let Some((idx, _, snapshot)) = best_loss.filter(|b| b.0 == selected) {
            let e = evaluate(backends, &scorer, image, config, &snapshot)?;
            trace.records[idx].student_caption = Some(e.caption);
            trace.records[idx].student_score = e.score;
        }
    }
    let record = &trace.records[selected];
    let (Some(caption), Some(score)) = (record.student_caption.clone(), record.student_score) else {
        return Ok(trace);
    };
    if config.checkpoint_strategy == CheckpointStrategy::MaxClipScore && baseline_score > score {
        trace.fallback = Some(Fallback::BaselineRetained);
        return Ok(trace);
    }
    selected = record.iteration;
    trace.selected_iteration = Some(selected);
    trace.final_caption = caption;
    trace.final_score = score;
    Ok(trace)
}
