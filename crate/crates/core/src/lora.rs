//! Low-rank adapters layered over frozen base projections.
//!
//! Each targeted projection `W (d_out x d_in)` gets a pair `A (r x d_in)`,
//! `B (d_out x r)` and is used as `W + (alpha / r) * B * A`. `B` starts at
//! zero, so a freshly initialized adapter reproduces the base model exactly.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, hash_str, rng_from};

/// Which part of the model receives adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    LlmOnly,
    VisionOnly,
    VisionAndLlm,
}

impl Placement {
    pub fn includes(self, group: ProjectionGroup) -> bool {
        matches!(
            (self, group),
            (Placement::LlmOnly, ProjectionGroup::Llm)
                | (Placement::VisionOnly, ProjectionGroup::Vision)
                | (Placement::VisionAndLlm, _)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionGroup {
    Vision,
    Llm,
}

/// A base projection that may be wrapped by an adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub name: String,
    pub group: ProjectionGroup,
    pub d_in: usize,
    pub d_out: usize,
}

/// Declared projection shapes of a backend model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModelDims {
    pub projections: Vec<ProjectionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub placement: Placement,
    /// Projection name suffixes (matched on the last dotted segment).
    pub target_modules: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            placement: Placement::LlmOnly,
            target_modules: vec!["q_proj".into(), "v_proj".into()],
        }
    }
}

impl LoraConfig {
    fn targets<'a>(&'a self, dims: &'a ModelDims) -> impl Iterator<Item = &'a ProjectionSpec> + 'a {
        dims.projections.iter().filter(move |p| {
            self.placement.includes(p.group)
                && self.target_modules.iter().any(|pat| {
                    p.name == *pat
                        || p.name
                            .rsplit('.')
                            .next()
                            .is_some_and(|last| last == pat.as_str())
                })
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rank: usize,
    pub alpha: f64,
    pub target: String,
}

impl LoraLayer {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    /// `(alpha / r) * B * A`.
    pub fn delta(&self) -> DMatrix<f64> {
        (&self.b * &self.a) * self.scaling()
    }

    fn same_shape(&self, other: &LoraLayer) -> bool {
        self.target == other.target
            && self.rank == other.rank
            && self.a.shape() == other.a.shape()
            && self.b.shape() == other.b.shape()
    }
}

/// Trainable adapter weights for one model copy (student, teacher, or a
/// meta-initialization). Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub layers: BTreeMap<String, LoraLayer>,
    pub placement: Placement,
    pub seed: u64,
}

impl AdapterState {
    pub fn rank(&self) -> Option<usize> {
        self.layers.values().next().map(|l| l.rank)
    }

    pub fn alpha(&self) -> Option<f64> {
        self.layers.values().next().map(|l| l.alpha)
    }

    pub fn layer(&self, target: &str) -> Option<&LoraLayer> {
        self.layers.get(target)
    }

    pub fn num_params(&self) -> usize {
        self.layers.values().map(|l| l.a.len() + l.b.len()).sum()
    }

    /// Same structure with every parameter set to zero.
    pub fn zeros_like(&self) -> AdapterState {
        let mut out = self.clone();
        for layer in out.layers.values_mut() {
            layer.a.fill(0.0);
            layer.b.fill(0.0);
        }
        out
    }

    pub fn is_structurally_equal(&self, other: &AdapterState) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(other.layers.iter())
                .all(|((ka, la), (kb, lb))| ka == kb && la.same_shape(lb))
    }

    fn check_structure(&self, other: &AdapterState) -> Result<()> {
        if self.is_structurally_equal(other) {
            Ok(())
        } else {
            Err(Error::config(
                "adapter states differ in targets, ranks or shapes",
            ))
        }
    }

    /// All parameters in a fixed order (layers by name, then A, then B, row-major).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers.values() {
            push_row_major(&layer.a, &mut out);
            push_row_major(&layer.b, &mut out);
        }
        out
    }

    /// Inverse of [`AdapterState::flat_params`].
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Arity {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for layer in self.layers.values_mut() {
            for m in [&mut layer.a, &mut layer.b] {
                let (rows, cols) = m.shape();
                for r in 0..rows {
                    for c in 0..cols {
                        m[(r, c)] = params[offset];
                        offset += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .values()
            .all(|l| l.a.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Largest absolute elementwise difference; `None` on structural mismatch.
    pub fn max_abs_diff(&self, other: &AdapterState) -> Option<f64> {
        if !self.is_structurally_equal(other) {
            return None;
        }
        Some(
            self.flat_params()
                .iter()
                .zip(other.flat_params())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn l2_norm(&self) -> f64 {
        self.flat_params().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn push_row_major(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

/// Build a fresh adapter: `A ~ N(0, 1/d_in)` per entry (seeded per target), `B = 0`.
pub fn init_adapter(dims: &ModelDims, config: &LoraConfig, seed: u64) -> Result<AdapterState> {
    if config.rank == 0 {
        return Err(Error::config("LoRA rank must be at least 1"));
    }
    if !(config.alpha.is_finite() && config.alpha > 0.0) {
        return Err(Error::config("LoRA alpha must be positive"));
    }
    let mut layers = BTreeMap::new();
    for proj in config.targets(dims) {
        if config.rank > proj.d_in.min(proj.d_out) {
            return Err(Error::config(format!(
                "rank {} exceeds min(d_in, d_out) = {} for {}",
                config.rank,
                proj.d_in.min(proj.d_out),
                proj.name
            )));
        }
        let std = 1.0 / (proj.d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = rng_from(derive_seed(seed, &[hash_str(&proj.name)]));
        let a = DMatrix::from_fn(config.rank, proj.d_in, |_, _| normal.sample(&mut rng));
        let b = DMatrix::zeros(proj.d_out, config.rank);
        layers.insert(
            proj.name.clone(),
            LoraLayer {
                a,
                b,
                rank: config.rank,
                alpha: config.alpha,
                target: proj.name.clone(),
            },
        );
    }
    if layers.is_empty() {
        return Err(Error::config(format!(
            "placement {:?} with targets {:?} selects no projections",
            config.placement, config.target_modules
        )));
    }
    Ok(AdapterState {
        layers,
        placement: config.placement,
        seed,
    })
}

/// `base + (alpha / r) * B * A`; `base` is left untouched.
pub fn effective_weight(base: &DMatrix<f64>, layer: &LoraLayer) -> Result<DMatrix<f64>> {
    if base.nrows() != layer.d_out() || base.ncols() != layer.d_in() {
        return Err(Error::config(format!(
            "base {:?} does not match adapter {} ({} x {})",
            base.shape(),
            layer.target,
            layer.d_out(),
            layer.d_in()
        )));
    }
    Ok(base + layer.delta())
}

/// Elementwise `a * dst + b * src` over every adapter matrix.
pub fn adapter_axpy(dst: &AdapterState, src: &AdapterState, a: f64, b: f64) -> Result<AdapterState> {
    dst.check_structure(src)?;
    let mut out = dst.clone();
    for (layer, other) in out.layers.values_mut().zip(src.layers.values()) {
        layer.a.zip_apply(&other.a, |x, y| *x = a * *x + b * y);
        layer.b.zip_apply(&other.b, |x, y| *x = a * *x + b * y);
    }
    Ok(out)
}

/// Singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

// ---------------------------------------------------------------------------
// Checkpoint container

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub rank: usize,
    pub alpha: f64,
    pub placement: Placement,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Self-describing JSON form of an [`AdapterState`]. Tensors are named
/// `<target>.lora_a` / `<target>.lora_b` and stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub metadata: CheckpointMetadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl AdapterCheckpoint {
    pub fn from_state(state: &AdapterState, provenance: Option<serde_json::Value>) -> Result<Self> {
        let (rank, alpha) = match (state.rank(), state.alpha()) {
            (Some(r), Some(a)) => (r, a),
            _ => return Err(Error::config("cannot checkpoint an adapter without layers")),
        };
        let mut tensors = Vec::with_capacity(state.layers.len() * 2);
        for (name, layer) in &state.layers {
            for (suffix, m) in [("lora_a", &layer.a), ("lora_b", &layer.b)] {
                let mut data = Vec::with_capacity(m.len());
                push_row_major(m, &mut data);
                tensors.push(NamedTensor {
                    name: format!("{name}.{suffix}"),
                    shape: [m.nrows(), m.ncols()],
                    data,
                });
            }
        }
        Ok(Self {
            metadata: CheckpointMetadata {
                rank,
                alpha,
                placement: state.placement,
                seed: state.seed,
            },
            provenance,
            tensors,
        })
    }

    pub fn to_state(&self) -> Result<AdapterState> {
        let mut a_parts: BTreeMap<&str, DMatrix<f64>> = BTreeMap::new();
        let mut b_parts: BTreeMap<&str, DMatrix<f64>> = BTreeMap::new();
        for t in &self.tensors {
            let [rows, cols] = t.shape;
            if rows * cols != t.data.len() {
                return Err(Error::config(format!(
                    "tensor {} declares {rows}x{cols} but holds {} values",
                    t.name,
                    t.data.len()
                )));
            }
            let m = DMatrix::from_row_slice(rows, cols, &t.data);
            if let Some(target) = t.name.strip_suffix(".lora_a") {
                a_parts.insert(target, m);
            } else if let Some(target) = t.name.strip_suffix(".lora_b") {
                b_parts.insert(target, m);
            } else {
                return Err(Error::config(format!("unexpected tensor name {}", t.name)));
            }
        }
        let rank = self.metadata.rank;
        let mut layers = BTreeMap::new();
        for (target, a) in a_parts {
            let b = b_parts
                .remove(target)
                .ok_or_else(|| Error::config(format!("missing {target}.lora_b")))?;
            if a.nrows() != rank || b.ncols() != rank {
                return Err(Error::config(format!("rank mismatch in {target}")));
            }
            layers.insert(
                target.to_string(),
                LoraLayer {
                    a,
                    b,
                    rank,
                    alpha: self.metadata.alpha,
                    target: target.to_string(),
                },
            );
        }
        if let Some(target) = b_parts.keys().next() {
            return Err(Error::config(format!("missing {target}.lora_a")));
        }
        Ok(AdapterState {
            layers,
            placement: self.metadata.placement,
            seed: self.metadata.seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims() -> ModelDims {
        ModelDims {
            projections: vec![
                ProjectionSpec {
                    name: "vision.v_proj".into(),
                    group: ProjectionGroup::Vision,
                    d_in: 10,
                    d_out: 12,
                },
                ProjectionSpec {
                    name: "llm.q_proj".into(),
                    group: ProjectionGroup::Llm,
                    d_in: 12,
                    d_out: 12,
                },
                ProjectionSpec {
                    name: "llm.k_proj".into(),
                    group: ProjectionGroup::Llm,
                    d_in: 12,
                    d_out: 12,
                },
                ProjectionSpec {
                    name: "llm.v_proj".into(),
                    group: ProjectionGroup::Llm,
                    d_in: 12,
                    d_out: 12,
                },
            ],
        }
    }

    fn scalar_state(a: f64, b: f64) -> AdapterState {
        let mut layers = BTreeMap::new();
        layers.insert(
            "x".to_string(),
            LoraLayer {
                a: DMatrix::from_element(1, 1, a),
                b: DMatrix::from_element(1, 1, b),
                rank: 1,
                alpha: 1.0,
                target: "x".into(),
            },
        );
        AdapterState {
            layers,
            placement: Placement::LlmOnly,
            seed: 0,
        }
    }

    #[test]
    fn placement_selects_targets() {
        let cfg = LoraConfig::default();
        let s = init_adapter(&dims(), &cfg, 1).unwrap();
        assert_eq!(s.layers.keys().collect::<Vec<_>>(), ["llm.q_proj", "llm.v_proj"]);

        let cfg = LoraConfig {
            placement: Placement::VisionAndLlm,
            ..LoraConfig::default()
        };
        let s = init_adapter(&dims(), &cfg, 1).unwrap();
        assert_eq!(s.layers.len(), 3);

        let cfg = LoraConfig {
            placement: Placement::VisionOnly,
            ..LoraConfig::default()
        };
        let s = init_adapter(&dims(), &cfg, 1).unwrap();
        assert_eq!(s.layers.keys().collect::<Vec<_>>(), ["vision.v_proj"]);
    }

    #[test]
    fn init_has_zero_delta_and_paper_scaling() {
        let s = init_adapter(&dims(), &LoraConfig::default(), 3).unwrap();
        for layer in s.layers.values() {
            assert_eq!(layer.scaling(), 2.0);
            assert!(layer.delta().iter().all(|&v| v == 0.0));
            assert!(layer.a.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn init_a_std_scales_with_fan_in() {
        let dims = ModelDims {
            projections: vec![ProjectionSpec {
                name: "llm.q_proj".into(),
                group: ProjectionGroup::Llm,
                d_in: 400,
                d_out: 400,
            }],
        };
        let s = init_adapter(&dims, &LoraConfig::default(), 9).unwrap();
        let a = &s.layers["llm.q_proj"].a;
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005);
        assert!((var.sqrt() - 0.05).abs() < 0.003, "std {}", var.sqrt());
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let cfg = LoraConfig {
            rank: 13,
            ..LoraConfig::default()
        };
        assert!(matches!(init_adapter(&dims(), &cfg, 0), Err(Error::Config(_))));
        let cfg = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        assert!(init_adapter(&dims(), &cfg, 0).is_err());
    }

    #[test]
    fn rank_one_outer_product() {
        let layer = LoraLayer {
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            rank: 1,
            alpha: 1.0,
            target: "t".into(),
        };
        let base = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, -1.0, 2.0]);
        let eff = effective_weight(&base, &layer).unwrap();
        assert_eq!(eff, DMatrix::from_row_slice(2, 2, &[1.5, 0.25, -1.0, 2.0]));
        assert_eq!(base[(0, 0)], 0.5);

        let wrong = DMatrix::zeros(3, 2);
        assert!(effective_weight(&wrong, &layer).is_err());
    }

    #[test]
    fn axpy_examples() {
        let t = scalar_state(2.0, 2.0);
        let s = scalar_state(4.0, 4.0);
        assert_eq!(adapter_axpy(&t, &s, 1.0, 0.0).unwrap(), t);
        assert_eq!(
            adapter_axpy(&t, &s, 0.0, 1.0).unwrap().flat_params(),
            s.flat_params()
        );
        let mixed = adapter_axpy(&t, &s, 0.999, 0.001).unwrap();
        for v in mixed.flat_params() {
            assert!((v - 2.002).abs() < 1e-12);
        }
        let mut other = scalar_state(1.0, 1.0);
        other.layers.get_mut("x").unwrap().target = "y".into();
        assert!(adapter_axpy(&t, &other, 1.0, 1.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut s = init_adapter(&dims(), &LoraConfig::default(), 5).unwrap();
        for layer in s.layers.values_mut() {
            layer.b = DMatrix::from_fn(layer.b.nrows(), layer.b.ncols(), |r, c| {
                ((r * 7 + c) as f64).sin() / 3.0
            });
        }
        let ckpt = AdapterCheckpoint::from_state(&s, None).unwrap();
        let text = ckpt.to_json().unwrap();
        let back = AdapterCheckpoint::from_json(&text).unwrap().to_state().unwrap();
        let bits = |st: &AdapterState| st.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&back));
        assert_eq!(s, back);
    }

    proptest! {
        #[test]
        fn axpy_is_linear(x in -10.0f64..10.0, y in -10.0f64..10.0, a in -2.0f64..2.0,
                          b in -2.0f64..2.0, c in -2.0f64..2.0) {
            let sx = scalar_state(x, -x);
            let sy = scalar_state(y, 0.5 * y);
            let step = adapter_axpy(&sx, &sy, a, b).unwrap();
            let two = adapter_axpy(&step, &sy, 1.0, c).unwrap();
            let one = adapter_axpy(&sx, &sy, a, b + c).unwrap();
            prop_assert!(two.max_abs_diff(&one).unwrap() < 1e-9);
        }

        #[test]
        fn flat_params_round_trip(seed in 0u64..1000) {
            let s = init_adapter(&dims(), &LoraConfig::default(), seed).unwrap();
            let mut t = s.zeros_like();
            t.set_flat_params(&s.flat_params()).unwrap();
            prop_assert_eq!(s, t);
        }
    }
}
