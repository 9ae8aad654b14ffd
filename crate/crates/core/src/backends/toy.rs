//! Deterministic toy world: a small object vocabulary, rendered scenes, a
//! single-layer caption generator with planted co-occurrence hallucinations,
//! and a bag-of-words dual encoder.
//!
//! The generator reads per-object evidence from image pixels and produces
//! captions of the form "There is a dog. There is a frisbee." by repeatedly
//! picking an unmentioned object (or end-of-caption) from
//!
//! ```text
//! h      = W_vis u
//! logits = W_out (W_v h) + W_key (W_q h) + prompt bias
//! ```
//!
//! where `u` is the evidence vector plus a constant feature. `W_vis`, `W_q`
//! and `W_v` are the adapter targets (`vision.v_proj`, `llm.q_proj`,
//! `llm.v_proj`). Base weights are built so that `W_out W_v W_vis` equals a
//! readable logit table: each object gets its own evidence, and each
//! "trigger" object also raises the logit of its planted distractor.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sampling::{argmax_masked, masked_softmax, sample_masked};
use super::{DecodingMode, DecodingParams, EncoderBackend, GeneratorBackend, ImageInput};
use crate::error::{Error, Result};
use crate::lora::{AdapterState, LoraLayer, ModelDims, ProjectionGroup, ProjectionSpec};
use crate::rng::{derive_seed, hash_str, rng_from};

pub const VISION_PROJ: &str = "vision.v_proj";
pub const LLM_Q_PROJ: &str = "llm.q_proj";
pub const LLM_V_PROJ: &str = "llm.v_proj";

const BACKGROUND: f64 = 128.0;
const WORDS_PER_SENTENCE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorSpec {
    pub trigger: String,
    pub distractor: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<String>,
    /// Per-object rendering strength in (0, 1]; defaults to 1.
    #[serde(default)]
    pub visibility: Option<Vec<f64>>,
}

/// Procedurally generated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_visibility: f64,
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 50,
            seed: 2024,
            min_objects: 1,
            max_objects: 3,
            min_visibility: 0.75,
            id_prefix: "toy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyGeneratorConfig {
    pub hidden_dim: usize,
    pub weight_seed: u64,
    pub evidence_weight: f64,
    pub object_bias: f64,
    pub eos_bias: f64,
    /// Scale of the query/key path's contribution to the base logits.
    pub key_scale: f64,
    /// How much a non-empty prompt lowers the end-of-caption logit.
    pub prompt_verbosity: f64,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            weight_seed: 17,
            evidence_weight: 3.0,
            object_bias: -1.5,
            eos_bias: 0.5,
            key_scale: 0.3,
            prompt_verbosity: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub name: String,
    pub image_size: usize,
    pub objects: Vec<String>,
    pub filler_words: Vec<String>,
    /// Extra surface forms mapped to an object, e.g. `puppy -> dog`.
    pub synonyms: BTreeMap<String, String>,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    /// Use standard basis vectors instead of random unit vectors.
    pub orthonormal: bool,
    pub text_token_limit: usize,
    pub distractors: Vec<DistractorSpec>,
    pub scenes: BTreeMap<String, SceneSpec>,
    pub corpus: Option<CorpusSpec>,
    pub generator: ToyGeneratorConfig,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ToyWorldConfig {
    /// The built-in world used by the test and acceptance suites: twelve
    /// objects, six of which trigger a planted distractor, and a 50-image
    /// procedural corpus.
    pub fn standard() -> Self {
        let objects = [
            "dog", "frisbee", "table", "fork", "bed", "pillow", "car", "truck", "person",
            "umbrella", "boat", "bird",
        ];
        let pairs = [
            ("dog", "frisbee", 2.7),
            ("table", "fork", 2.9),
            ("bed", "pillow", 2.6),
            ("car", "truck", 2.8),
            ("person", "umbrella", 2.5),
            ("boat", "bird", 3.0),
        ];
        let mut synonyms = BTreeMap::new();
        for o in objects {
            synonyms.insert(format!("{o}s"), o.to_string());
        }
        synonyms.insert("puppy".into(), "dog".into());
        synonyms.insert("man".into(), "person".into());
        synonyms.insert("woman".into(), "person".into());
        Self {
            name: "standard".into(),
            image_size: 32,
            objects: objects.iter().map(|s| s.to_string()).collect(),
            filler_words: ["there", "is", "a", "an"].iter().map(|s| s.to_string()).collect(),
            synonyms,
            embedding_dim: 48,
            embedding_seed: 11,
            orthonormal: false,
            text_token_limit: 77,
            distractors: pairs
                .iter()
                .map(|&(t, d, s)| DistractorSpec {
                    trigger: t.into(),
                    distractor: d.into(),
                    strength: s,
                })
                .collect(),
            scenes: BTreeMap::new(),
            corpus: Some(CorpusSpec::default()),
            generator: ToyGeneratorConfig::default(),
        }
    }

    /// Parse TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string())),
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Object indices in ascending order.
    pub objects: Vec<usize>,
    pub visibility: Vec<f64>,
}

/// A fully constructed toy world. Cheap to share behind an [`Arc`].
#[derive(Debug, Clone)]
pub struct ToyWorld {
    config: ToyWorldConfig,
    vocabulary: Vec<String>,
    object_index: BTreeMap<String, usize>,
    /// Surface form (object names and synonyms) to object index.
    lexicon: BTreeMap<String, usize>,
    embeddings: Vec<DVector<f64>>,
    scenes: BTreeMap<String, Scene>,
    palette: Vec<[f64; 3]>,
}

impl ToyWorld {
    pub fn new(config: ToyWorldConfig) -> Result<Self> {
        let n = config.objects.len();
        if n == 0 {
            return Err(Error::config("toy world needs at least one object"));
        }
        if config.image_size < 4 {
            return Err(Error::config("toy image_size must be at least 4"));
        }
        if config.text_token_limit == 0 {
            return Err(Error::config("text_token_limit must be positive"));
        }
        let mut object_index = BTreeMap::new();
        for (i, o) in config.objects.iter().enumerate() {
            let key = o.to_lowercase();
            if key.split_whitespace().count() != 1 || !key.chars().all(|c| c.is_alphanumeric()) {
                return Err(Error::config(format!("object name {o:?} must be a single word")));
            }
            if object_index.insert(key, i).is_some() {
                return Err(Error::config(format!("duplicate object {o}")));
            }
        }
        let mut lexicon = object_index.clone();
        for (term, target) in &config.synonyms {
            let idx = *object_index
                .get(&target.to_lowercase())
                .ok_or_else(|| Error::config(format!("synonym {term} maps to unknown object {target}")))?;
            lexicon.insert(term.to_lowercase(), idx);
        }
        for d in &config.distractors {
            for name in [&d.trigger, &d.distractor] {
                if !object_index.contains_key(&name.to_lowercase()) {
                    return Err(Error::config(format!("distractor pair names unknown object {name}")));
                }
            }
        }
        let embeddings = if config.orthonormal {
            if config.embedding_dim < n {
                return Err(Error::config("orthonormal embeddings need embedding_dim >= #objects"));
            }
            (0..n)
                .map(|i| {
                    let mut v = DVector::zeros(config.embedding_dim);
                    v[i] = 1.0;
                    v
                })
                .collect()
        } else {
            if config.embedding_dim == 0 {
                return Err(Error::config("embedding_dim must be positive"));
            }
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..n)
                .map(|i| {
                    let mut rng = rng_from(derive_seed(config.embedding_seed, &[i as u64]));
                    let v = DVector::from_fn(config.embedding_dim, |_, _| normal.sample(&mut rng));
                    let norm = v.norm();
                    v / norm
                })
                .collect()
        };

        let mut scenes = BTreeMap::new();
        for (id, spec) in &config.scenes {
            scenes.insert(id.clone(), build_scene(spec, &object_index)?);
        }
        if let Some(corpus) = &config.corpus {
            for (id, scene) in generate_corpus(corpus, n)? {
                if scenes.insert(id.clone(), scene).is_some() {
                    return Err(Error::config(format!("scene id {id} defined twice")));
                }
            }
        }

        let mut vocabulary: Vec<String> = config.objects.iter().map(|o| o.to_lowercase()).collect();
        vocabulary.extend(config.filler_words.iter().map(|w| w.to_lowercase()));
        let palette = (0..n).map(|i| palette_color(i, n)).collect();

        Ok(Self {
            config,
            vocabulary,
            object_index,
            lexicon,
            embeddings,
            scenes,
            palette,
        })
    }

    pub fn standard() -> Self {
        Self::new(ToyWorldConfig::standard()).expect("standard toy world is valid")
    }

    pub fn config(&self) -> &ToyWorldConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn objects(&self) -> &[String] {
        &self.config.objects
    }

    pub fn object_lexicon(&self) -> Vec<&str> {
        self.object_index.keys().map(String::as_str).collect()
    }

    pub fn n_objects(&self) -> usize {
        self.config.objects.len()
    }

    pub fn embedding(&self, word: &str) -> Option<&DVector<f64>> {
        self.lexicon.get(&word.to_lowercase()).map(|&i| &self.embeddings[i])
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.scenes.keys().cloned().collect()
    }

    pub fn scene(&self, id: &str) -> Result<&Scene> {
        self.scenes
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("image id {id:?} is not registered in the toy world")))
    }

    /// Object names present in the scene.
    pub fn scene_objects(&self, id: &str) -> Result<BTreeSet<String>> {
        Ok(self
            .scene(id)?
            .objects
            .iter()
            .map(|&i| self.config.objects[i].to_lowercase())
            .collect())
    }

    /// Term-to-category table covering object names and synonyms.
    pub fn synonym_map(&self) -> BTreeMap<String, String> {
        self.lexicon
            .iter()
            .map(|(term, &i)| (term.clone(), self.config.objects[i].to_lowercase()))
            .collect()
    }

    /// Object indices mentioned in `text`, in order of first mention.
    pub fn parse_objects(&self, text: &str) -> Vec<usize> {
        let mut seen = Vec::new();
        for word in words(text) {
            if let Some(&i) = self.lexicon.get(&word) {
                if !seen.contains(&i) {
                    seen.push(i);
                }
            }
        }
        seen
    }

    fn cell_grid(&self) -> usize {
        (self.n_objects() as f64).sqrt().ceil() as usize
    }

    /// Pixel rectangle `(y0, y1, x0, x1)` holding object `k` for an image of the
    /// given size; the one-pixel inset keeps neighbouring cells apart.
    fn cell_rect(&self, k: usize, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let g = self.cell_grid();
        let (row, col) = (k / g, k % g);
        let y0 = row * height / g;
        let y1 = (row + 1) * height / g;
        let x0 = col * width / g;
        let x1 = (col + 1) * width / g;
        let inset = |a: usize, b: usize| if b - a > 2 { (a + 1, b - 1) } else { (a, b) };
        let (y0, y1) = inset(y0, y1.max(y0 + 1));
        let (x0, x1) = inset(x0, x1.max(x0 + 1));
        (y0, y1.min(height), x0, x1.min(width))
    }

    /// Render the registered scene `id` at the configured size.
    pub fn render(&self, id: &str) -> Result<ImageInput> {
        let scene = self.scene(id)?;
        let s = self.config.image_size;
        let mut rng = rng_from(derive_seed(hash_str(id), &[0x7265_6e64]));
        let mut buf: Vec<f64> = (0..s * s * 3)
            .map(|_| BACKGROUND + rng.random_range(-6.0..=6.0))
            .collect();
        for (&k, &vis) in scene.objects.iter().zip(&scene.visibility) {
            let (y0, y1, x0, x1) = self.cell_rect(k, s, s);
            let color = self.palette[k];
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..3 {
                        let i = (y * s + x) * 3 + c;
                        buf[i] = BACKGROUND + vis * (color[c] - BACKGROUND) + (buf[i] - BACKGROUND) * 0.5;
                    }
                }
            }
        }
        let pixels = buf.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        ImageInput::new(id, s, s, pixels)
    }

    pub fn images(&self) -> Result<Vec<ImageInput>> {
        self.scenes.keys().map(|id| self.render(id)).collect()
    }

    /// Per-object evidence read from pixels: projection of each cell's mean
    /// colour offset onto the object's palette direction, clamped to [0, 1.5].
    pub fn evidence(&self, image: &ImageInput) -> Vec<f64> {
        let (h, w) = (image.height(), image.width());
        (0..self.n_objects())
            .map(|k| {
                let (y0, y1, x0, x1) = self.cell_rect(k, h, w);
                let mut mean = [0.0; 3];
                let mut count = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (c, m) in mean.iter_mut().enumerate() {
                            *m += f64::from(image.at(y, x, c));
                        }
                        count += 1.0;
                    }
                }
                if count == 0.0 {
                    return 0.0;
                }
                let dir = self.palette[k].map(|v| v - BACKGROUND);
                let num: f64 = (0..3).map(|c| (mean[c] / count - BACKGROUND) * dir[c]).sum();
                let den: f64 = dir.iter().map(|d| d * d).sum();
                (num / den).clamp(0.0, 1.5)
            })
            .collect()
    }

    pub fn render_caption(&self, objects: &[usize]) -> String {
        objects
            .iter()
            .map(|&k| {
                let name = &self.config.objects[k];
                let article = if name.starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
                format!("There is {article} {name}.")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn build_scene(spec: &SceneSpec, index: &BTreeMap<String, usize>) -> Result<Scene> {
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for (j, name) in spec.objects.iter().enumerate() {
        let k = *index
            .get(&name.to_lowercase())
            .ok_or_else(|| Error::config(format!("scene names unknown object {name}")))?;
        let vis = spec.visibility.as_ref().map_or(1.0, |v| v.get(j).copied().unwrap_or(1.0));
        if !(vis > 0.0 && vis <= 1.0) {
            return Err(Error::config("visibility must lie in (0, 1]"));
        }
        if !pairs.iter().any(|p| p.0 == k) {
            pairs.push((k, vis));
        }
    }
    pairs.sort_by_key(|p| p.0);
    Ok(Scene {
        objects: pairs.iter().map(|p| p.0).collect(),
        visibility: pairs.iter().map(|p| p.1).collect(),
    })
}

fn generate_corpus(spec: &CorpusSpec, n_objects: usize) -> Result<Vec<(String, Scene)>> {
    if spec.min_objects == 0 || spec.min_objects > spec.max_objects || spec.max_objects > n_objects {
        return Err(Error::config("corpus object counts must satisfy 1 <= min <= max <= #objects"));
    }
    if !(spec.min_visibility > 0.0 && spec.min_visibility <= 1.0) {
        return Err(Error::config("corpus min_visibility must lie in (0, 1]"));
    }
    let mut rng = rng_from(spec.seed);
    let mut out = Vec::with_capacity(spec.n_images);
    let mut all: Vec<usize> = (0..n_objects).collect();
    for i in 0..spec.n_images {
        let k = rng.random_range(spec.min_objects..=spec.max_objects);
        all.shuffle(&mut rng);
        let mut objects: Vec<usize> = all[..k].to_vec();
        objects.sort_unstable();
        let visibility = objects
            .iter()
            .map(|_| rng.random_range(spec.min_visibility..=1.0))
            .collect();
        out.push((
            format!("{}-{i:03}", spec.id_prefix),
            Scene { objects, visibility },
        ));
    }
    Ok(out)
}

fn palette_color(i: usize, n: usize) -> [f64; 3] {
    // Evenly spaced hues at full saturation, alternating brightness so that
    // neighbouring hues stay distinguishable after blurring.
    let hue = i as f64 / n as f64 * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    let value = if i.is_multiple_of(2) { 240.0 } else { 170.0 };
    [r * value + 10.0, g * value + 10.0, b * value + 10.0]
}

/// Lowercase alphanumeric words.
pub(crate) fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = DMatrix::from_fn(n, n, |_, _| normal.sample(rng));
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the factorization is unique.
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Debug, Clone)]
struct BaseWeights {
    w_vis: DMatrix<f64>,
    w_q: DMatrix<f64>,
    w_v: DMatrix<f64>,
    w_key: DMatrix<f64>,
    w_out: DMatrix<f64>,
}

/// Toy caption generator. Token `k < n_objects` mentions object `k`; token
/// `n_objects` ends the caption.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    world: Arc<ToyWorld>,
    base: BaseWeights,
    dims: ModelDims,
}

struct Forward {
    u: DVector<f64>,
    h: DVector<f64>,
    logits: DVector<f64>,
    w_q: DMatrix<f64>,
    w_v: DMatrix<f64>,
}

impl ToyGenerator {
    pub fn new(world: Arc<ToyWorld>) -> Result<Self> {
        let n = world.n_objects();
        let d_img = n + 1;
        let gcfg = &world.config.generator;
        let d_h = gcfg.hidden_dim;
        if d_h < d_img {
            return Err(Error::config(format!(
                "generator hidden_dim {d_h} must be at least #objects + 1 = {d_img}"
            )));
        }
        let vocab = n + 1;

        // Target logit table P (vocab x d_img).
        let mut p = DMatrix::zeros(vocab, d_img);
        for k in 0..n {
            p[(k, k)] = gcfg.evidence_weight;
            p[(k, n)] = gcfg.object_bias;
        }
        p[(n, n)] = gcfg.eos_bias;
        for d in &world.config.distractors {
            let t = world.object_index[&d.trigger.to_lowercase()];
            let x = world.object_index[&d.distractor.to_lowercase()];
            p[(x, t)] += d.strength;
        }

        let mut rng = rng_from(gcfg.weight_seed);
        let q_vis = random_orthogonal(d_h, &mut rng);
        let w_vis = q_vis.columns(0, d_img).into_owned();
        let w_v = random_orthogonal(d_h, &mut rng);
        let w_q = random_orthogonal(d_h, &mut rng);
        let w_out = &p * w_vis.transpose() * w_v.transpose();
        let key = Normal::new(0.0, gcfg.key_scale / (d_h as f64).sqrt()).expect("finite std");
        let w_key = DMatrix::from_fn(vocab, d_h, |_, _| key.sample(&mut rng));

        let dims = ModelDims {
            projections: vec![
                ProjectionSpec {
                    name: VISION_PROJ.into(),
                    group: ProjectionGroup::Vision,
                    d_in: d_img,
                    d_out: d_h,
                },
                ProjectionSpec {
                    name: LLM_Q_PROJ.into(),
                    group: ProjectionGroup::Llm,
                    d_in: d_h,
                    d_out: d_h,
                },
                ProjectionSpec {
                    name: LLM_V_PROJ.into(),
                    group: ProjectionGroup::Llm,
                    d_in: d_h,
                    d_out: d_h,
                },
            ],
        };
        Ok(Self {
            world,
            base: BaseWeights {
                w_vis,
                w_q,
                w_v,
                w_key,
                w_out,
            },
            dims,
        })
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    fn eos(&self) -> usize {
        self.world.n_objects()
    }

    fn check_adapter(&self, adapter: &AdapterState) -> Result<()> {
        for (name, layer) in &adapter.layers {
            let spec = self
                .dims
                .projections
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::config(format!("adapter targets unknown projection {name}")))?;
            if layer.d_in() != spec.d_in || layer.d_out() != spec.d_out || layer.a.nrows() != layer.rank
                || layer.b.ncols() != layer.rank
            {
                return Err(Error::config(format!(
                    "adapter layer {name} has shape ({}x{}, {}x{}), model expects d_in={} d_out={}",
                    layer.a.nrows(),
                    layer.a.ncols(),
                    layer.b.nrows(),
                    layer.b.ncols(),
                    spec.d_in,
                    spec.d_out
                )));
            }
        }
        Ok(())
    }

    fn effective(&self, base: &DMatrix<f64>, adapter: &AdapterState, name: &str) -> DMatrix<f64> {
        match adapter.layer(name) {
            Some(layer) => base + layer.delta(),
            None => base.clone(),
        }
    }

    fn forward(&self, image: &ImageInput, prompt: &str, adapter: &AdapterState) -> Result<Forward> {
        self.check_adapter(adapter)?;
        let mut feats = self.world.evidence(image);
        feats.push(1.0);
        let u = DVector::from_vec(feats);
        let w_vis = self.effective(&self.base.w_vis, adapter, VISION_PROJ);
        let w_q = self.effective(&self.base.w_q, adapter, LLM_Q_PROJ);
        let w_v = self.effective(&self.base.w_v, adapter, LLM_V_PROJ);
        let h = &w_vis * &u;
        let mut logits = &self.base.w_out * (&w_v * &h) + &self.base.w_key * (&w_q * &h);
        if !prompt.trim().is_empty() {
            let eos = self.eos();
            logits[eos] -= self.world.config.generator.prompt_verbosity;
        }
        Ok(Forward {
            u,
            h,
            logits,
            w_q,
            w_v,
        })
    }

    /// Base-model logits for an image (zero adapter), exposed for diagnostics.
    pub fn logits(&self, image: &ImageInput, prompt: &str, adapter: &AdapterState) -> Result<Vec<f64>> {
        Ok(self.forward(image, prompt, adapter)?.logits.iter().copied().collect())
    }

    fn max_mentions(&self, max_tokens: usize) -> usize {
        (max_tokens / WORDS_PER_SENTENCE).clamp(1, self.world.n_objects())
    }

    /// Target token sequence for a caption: its objects in order, then
    /// end-of-caption unless every object is already mentioned.
    fn target_tokens(&self, target: &str) -> Result<Vec<usize>> {
        let mut tokens = self.world.parse_objects(target);
        if tokens.is_empty() {
            return Err(Error::config(format!(
                "target caption {target:?} mentions no object the toy model can emit"
            )));
        }
        if tokens.len() < self.world.n_objects() {
            tokens.push(self.eos());
        }
        Ok(tokens)
    }
}

fn lora_grads(layer: &LoraLayer, grad_w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = layer.scaling();
    let grad_b = grad_w * layer.a.transpose() * s;
    let grad_a = layer.b.transpose() * grad_w * s;
    (grad_a, grad_b)
}

impl GeneratorBackend for ToyGenerator {
    fn model_dims(&self) -> &ModelDims {
        &self.dims
    }

    fn generate(
        &self,
        image: &ImageInput,
        prompt: &str,
        params: &DecodingParams,
        adapter: &AdapterState,
    ) -> Result<String> {
        params.validate()?;
        let fwd = self.forward(image, prompt, adapter)?;
        let logits: Vec<f64> = fwd.logits.iter().copied().collect();
        let n = self.world.n_objects();
        let eos = self.eos();
        let mut allowed = vec![true; n + 1];
        allowed[eos] = false;
        let mut rng = rng_from(params.seed);
        let mut chosen = Vec::new();
        for _ in 0..self.max_mentions(params.max_tokens) {
            let next = match params.mode {
                DecodingMode::Greedy => argmax_masked(&logits, &allowed),
                DecodingMode::Stochastic => {
                    sample_masked(&logits, &allowed, params.temperature, params.top_p, &mut rng)
                }
            };
            match next {
                Some(t) if t != eos => {
                    chosen.push(t);
                    allowed[t] = false;
                    allowed[eos] = true;
                }
                _ => break,
            }
        }
        Ok(self.world.render_caption(&chosen))
    }

    fn loss_and_grad(
        &self,
        image: &ImageInput,
        prompt: &str,
        target: &str,
        adapter: &AdapterState,
    ) -> Result<(f64, AdapterState)> {
        let tokens = self.target_tokens(target)?;
        let fwd = self.forward(image, prompt, adapter)?;
        let logits: Vec<f64> = fwd.logits.iter().copied().collect();
        let n = self.world.n_objects();
        let eos = self.eos();
        let steps = tokens.len() as f64;

        let mut allowed = vec![true; n + 1];
        allowed[eos] = false;
        let mut loss = 0.0;
        let mut g_logits = DVector::zeros(n + 1);
        for &t in &tokens {
            let probs = masked_softmax(&logits, &allowed, 1.0);
            let m = logits
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(&l, _)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits
                .iter()
                .zip(&allowed)
                .filter(|(_, &a)| a)
                .map(|(&l, _)| (l - m).exp())
                .sum::<f64>()
                .ln();
            loss += lse - logits[t];
            for (i, p) in probs.iter().enumerate() {
                g_logits[i] += p / steps;
            }
            g_logits[t] -= 1.0 / steps;
            allowed[t] = false;
            allowed[eos] = true;
        }
        loss /= steps;

        let g_vout = self.base.w_out.transpose() * &g_logits;
        let g_qout = self.base.w_key.transpose() * &g_logits;
        let grad_wv = &g_vout * fwd.h.transpose();
        let grad_wq = &g_qout * fwd.h.transpose();
        let g_h = fwd.w_v.transpose() * &g_vout + fwd.w_q.transpose() * &g_qout;
        let grad_wvis = &g_h * fwd.u.transpose();

        let mut grad = adapter.zeros_like();
        for (name, layer) in grad.layers.iter_mut() {
            let grad_w = match name.as_str() {
                VISION_PROJ => &grad_wvis,
                LLM_Q_PROJ => &grad_wq,
                LLM_V_PROJ => &grad_wv,
                _ => unreachable!("checked in forward"),
            };
            let (ga, gb) = lora_grads(&adapter.layers[name], grad_w);
            layer.a = ga;
            layer.b = gb;
        }
        Ok((loss, grad))
    }

    fn base_fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in [
            &self.base.w_vis,
            &self.base.w_q,
            &self.base.w_v,
            &self.base.w_key,
            &self.base.w_out,
        ] {
            out.extend((m.nrows() as u64).to_le_bytes());
            out.extend((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Encoder

/// Bag-of-words dual encoder: an image embeds as the normalized sum of its
/// scene objects' word vectors, a sentence as the normalized sum of the
/// vectors of its known words.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    world: Arc<ToyWorld>,
}

impl ToyEncoder {
    pub fn new(world: Arc<ToyWorld>) -> Self {
        Self { world }
    }
}

fn normalized(v: DVector<f64>) -> Vec<f64> {
    let norm = v.norm();
    if norm > 0.0 {
        (v / norm).iter().copied().collect()
    } else {
        v.iter().copied().collect()
    }
}

impl EncoderBackend for ToyEncoder {
    fn encode_image(&self, image: &ImageInput) -> Result<Vec<f64>> {
        let scene = self.world.scene(&image.id)?;
        let mut v = DVector::zeros(self.world.config.embedding_dim);
        for &k in &scene.objects {
            v += &self.world.embeddings[k];
        }
        Ok(normalized(v))
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = DVector::zeros(self.world.config.embedding_dim);
        for w in words(text) {
            if let Some(&k) = self.world.lexicon.get(&w) {
                v += &self.world.embeddings[k];
            }
        }
        Ok(normalized(v))
    }

    fn text_token_limit(&self) -> usize {
        self.world.config.text_token_limit
    }
}

/// Generator and encoder over one shared world.
#[derive(Debug, Clone)]
pub struct ToyBackends {
    pub world: Arc<ToyWorld>,
    pub generator: ToyGenerator,
    pub encoder: ToyEncoder,
}

impl ToyBackends {
    pub fn new(world: ToyWorld) -> Result<Self> {
        let world = Arc::new(world);
        Ok(Self {
            generator: ToyGenerator::new(world.clone())?,
            encoder: ToyEncoder::new(world.clone()),
            world,
        })
    }

    pub fn standard() -> Self {
        Self::new(ToyWorld::standard()).expect("standard toy backends")
    }

    pub fn backends(&self) -> super::Backends<'_> {
        super::Backends {
            generator: &self.generator,
            encoder: &self.encoder,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_adapter, LoraConfig, Placement};

    fn small_world(orthonormal: bool) -> ToyWorld {
        let mut cfg = ToyWorldConfig::standard();
        cfg.orthonormal = orthonormal;
        cfg.corpus = None;
        cfg.scenes.insert(
            "img0".into(),
            SceneSpec {
                objects: vec!["dog".into()],
                visibility: None,
            },
        );
        cfg.scenes.insert(
            "img1".into(),
            SceneSpec {
                objects: vec!["dog".into(), "boat".into()],
                visibility: None,
            },
        );
        cfg.scenes.insert(
            "cat-free".into(),
            SceneSpec {
                objects: vec!["car".into()],
                visibility: None,
            },
        );
        ToyWorld::new(cfg).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let w = ToyWorld::standard();
        for o in w.objects() {
            assert!((w.embedding(o).unwrap().norm() - 1.0).abs() < 1e-12);
        }
        assert!(w.embedding("there").is_none());
    }

    #[test]
    fn scenes_are_subsets_of_lexicon() {
        let w = ToyWorld::standard();
        assert_eq!(w.image_ids().len(), 50);
        for id in w.image_ids() {
            let objs = w.scene_objects(&id).unwrap();
            assert!(!objs.is_empty());
            for o in objs {
                assert!(w.object_lexicon().contains(&o.as_str()));
            }
        }
    }

    #[test]
    fn encoder_examples() {
        let world = Arc::new(small_world(true));
        let enc = ToyEncoder::new(world.clone());
        let dog = enc.encode_text("dog").unwrap();
        assert_eq!(dog, world.embedding("dog").unwrap().iter().copied().collect::<Vec<_>>());

        let img0 = world.render("img0").unwrap();
        assert!((cos(&enc.encode_image(&img0).unwrap(), &dog) - 1.0).abs() < 1e-12);
        let img1 = world.render("img1").unwrap();
        let c = cos(&enc.encode_image(&img1).unwrap(), &dog);
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);

        // unknown words contribute nothing
        assert_eq!(enc.encode_text("There is a dog.").unwrap(), dog);
        assert!(enc.encode_text("nothing here").unwrap().iter().all(|&v| v == 0.0));

        let ghost = ImageInput::new("ghost", 4, 4, vec![0; 48]).unwrap();
        assert!(matches!(enc.encode_image(&ghost), Err(Error::Lookup(_))));
    }

    #[test]
    fn evidence_reads_rendered_objects() {
        let world = ToyWorld::standard();
        for id in world.image_ids().iter().take(10) {
            let scene = world.scene(id).unwrap().clone();
            let ev = world.evidence(&world.render(id).unwrap());
            for k in 0..world.n_objects() {
                match scene.objects.iter().position(|&o| o == k) {
                    Some(j) => assert!((ev[k] - scene.visibility[j]).abs() < 0.05, "{id} {k}"),
                    None => assert!(ev[k] < 0.05, "{id} {k} {}", ev[k]),
                }
            }
        }
    }

    #[test]
    fn greedy_is_deterministic_and_adapter_free_at_init() {
        let tb = ToyBackends::new(small_world(false)).unwrap();
        let img = tb.world.render("img0").unwrap();
        let adapter = init_adapter(tb.generator.model_dims(), &LoraConfig::default(), 0).unwrap();
        let g = DecodingParams::greedy(512);
        let a = tb.generator.generate(&img, "", &g, &adapter).unwrap();
        let b = tb.generator.generate(&img, "", &g, &adapter).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("dog"));
        // planted distractor
        assert!(a.contains("frisbee"), "{a}");

        let other = init_adapter(tb.generator.model_dims(), &LoraConfig::default(), 99).unwrap();
        assert_eq!(
            tb.generator.logits(&img, "", &adapter).unwrap(),
            tb.generator.logits(&img, "", &other).unwrap()
        );
    }

    #[test]
    fn stochastic_draws_vary_with_seed() {
        let tb = ToyBackends::standard();
        let id = tb.world.image_ids()[0].clone();
        let img = tb.world.render(&id).unwrap();
        let adapter = init_adapter(tb.generator.model_dims(), &LoraConfig::default(), 0).unwrap();
        let captions: BTreeSet<String> = (0..16)
            .map(|s| {
                let p = DecodingParams {
                    seed: s,
                    ..DecodingParams::default()
                };
                tb.generator.generate(&img, "", &p, &adapter).unwrap()
            })
            .collect();
        assert!(captions.len() >= 2);
        let p = DecodingParams {
            seed: 3,
            ..DecodingParams::default()
        };
        assert_eq!(
            tb.generator.generate(&img, "", &p, &adapter).unwrap(),
            tb.generator.generate(&img, "", &p, &adapter).unwrap()
        );
    }

    #[test]
    fn prompt_makes_captions_longer() {
        let tb = ToyBackends::standard();
        let adapter = init_adapter(tb.generator.model_dims(), &LoraConfig::default(), 0).unwrap();
        let id = tb.world.image_ids()[0].clone();
        let img = tb.world.render(&id).unwrap();
        let plain = tb.generator.logits(&img, "", &adapter).unwrap();
        let prompted = tb.generator.logits(&img, "Describe the image.", &adapter).unwrap();
        let eos = tb.world.n_objects();
        assert!(prompted[eos] < plain[eos]);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let tb = ToyBackends::standard();
        let mut adapter = init_adapter(tb.generator.model_dims(), &LoraConfig::default(), 0).unwrap();
        let layer = adapter.layers.get_mut(LLM_Q_PROJ).unwrap();
        layer.a = DMatrix::zeros(8, 5);
        let img = tb.world.render(&tb.world.image_ids()[0]).unwrap();
        assert!(matches!(
            tb.generator.generate(&img, "", &DecodingParams::greedy(8), &adapter),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_toward_target_installs_its_object() {
        // Image without a dog; twenty plain gradient steps on "a dog on grass".
        let tb = ToyBackends::new(small_world(false)).unwrap();
        let img = tb.world.render("cat-free").unwrap();
        let mut adapter = init_adapter(
            tb.generator.model_dims(),
            &LoraConfig {
                placement: Placement::LlmOnly,
                ..LoraConfig::default()
            },
            1,
        )
        .unwrap();
        let greedy = DecodingParams::greedy(512);
        assert!(!tb.generator.generate(&img, "", &greedy, &adapter).unwrap().contains("dog"));
        let first = tb.generator.loss(&img, "", "a dog on grass", &adapter).unwrap();
        for _ in 0..20 {
            let (_, g) = tb.generator.loss_and_grad(&img, "", "a dog on grass", &adapter).unwrap();
            adapter = crate::lora::adapter_axpy(&adapter, &g, 1.0, -0.1).unwrap();
        }
        let last = tb.generator.loss(&img, "", "a dog on grass", &adapter).unwrap();
        assert!(last < first);
        assert!(tb.generator.generate(&img, "", &greedy, &adapter).unwrap().contains("dog"));
    }

    #[test]
    fn target_without_objects_is_rejected() {
        let tb = ToyBackends::standard();
        let adapter = init_adapter(tb.generator.model_dims(), &LoraConfig::default(), 0).unwrap();
        let img = tb.world.render(&tb.world.image_ids()[0]).unwrap();
        assert!(tb.generator.loss_and_grad(&img, "", "grass and sky", &adapter).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ToyWorldConfig::standard();
        let text = toml::to_string(&cfg).unwrap();
        let back: ToyWorldConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.content_hash(), back.content_hash());
    }
}
