//! Reptile meta-learning of the adapter initialization.
//!
//! Each task is one unlabeled image. Starting from the shared
//! initialization `phi`, an inner loop of `K` student steps fits the
//! image's best-scoring sampled caption; `phi` then moves a fraction `eps`
//! of the way toward the adapted weights.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    generate_candidates, student_step, ema_update, OptimizerKind, OptimizerState, TeacherMode, TttConfig,
};
use crate::backends::{Backends, ImageInput};
use crate::error::{Error, Result};
use crate::lora::{adapter_axpy, init_adapter, AdapterState};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_steps: usize,
    /// Outer step size; 1 replaces `phi` with the adapted weights.
    pub meta_step: f64,
    pub meta_epochs: usize,
    pub task_sampler_seed: u64,
    /// Run the EMA teacher and candidate refresh inside the inner loop
    /// instead of holding the first pseudo-label fixed.
    pub full_loop: bool,
    /// Inner-loop settings. `lr0` is the inner step size; plain gradient
    /// descent with a constant step unless `optimizer` says otherwise.
    pub inner: TttConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 12,
            meta_step: 0.1,
            meta_epochs: 3,
            task_sampler_seed: 0,
            full_loop: false,
            inner: TttConfig {
                iterations: 12,
                regen_interval: 12,
                optimizer: OptimizerKind::Sgd,
                teacher_mode: TeacherMode::Fixed,
                ..TttConfig::default()
            },
        }
    }
}

impl MetaConfig {
    /// Defaults with the inner step sized for the toy backend.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.inner.lr0 = 0.05;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::config("inner_steps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.meta_step) {
            return Err(Error::config("meta_step must lie in [0, 1]"));
        }
        if self.inner.n_candidates == 0 {
            return Err(Error::config("n_candidates must be at least 1"));
        }
        if !(self.inner.lr0.is_finite() && self.inner.lr0 > 0.0) {
            return Err(Error::config("inner lr0 must be positive"));
        }
        self.inner.decoding.validate()
    }

    fn inner_lr(&self, k: usize) -> f64 {
        match self.inner.optimizer {
            OptimizerKind::Sgd => self.inner.lr0,
            OptimizerKind::AdamW => {
                crate::adaptation::lr_at(self.inner.lr_schedule, self.inner.lr0, self.inner_steps, k)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOutcome {
    pub adapted: AdapterState,
    pub pseudo_label: String,
    /// Loss of the starting weights on the first pseudo-label.
    pub initial_loss: f64,
    /// Loss of the adapted weights on the last pseudo-label.
    pub final_loss: f64,
}

/// Run `config.inner_steps` student steps from a copy of `phi` on one image.
pub fn inner_loop(
    phi: &AdapterState,
    image: &ImageInput,
    config: &MetaConfig,
    backends: Backends<'_>,
) -> Result<InnerOutcome> {
    let inner = &config.inner;
    let set = generate_candidates(backends, phi, image, inner, 0)?;
    let mut label = set.best().caption.clone();
    let initial_loss = backends.generator.loss(image, &inner.prompt, &label, phi)?;
    let mut student = phi.clone();
    let mut teacher = phi.clone();
    let mut opt = OptimizerState::new(inner.optimizer, inner.adamw, phi.num_params());
    for k in 0..config.inner_steps {
        if config.full_loop && k > 0 && k % inner.regen_interval.max(1) == 0 && inner.teacher_mode != TeacherMode::Fixed {
            label = generate_candidates(backends, &teacher, image, inner, k)?.best().caption.clone();
        }
        student = student_step(backends, &student, image, &inner.prompt, &label, &mut opt, config.inner_lr(k), k)?.0;
        if config.full_loop {
            teacher = match inner.teacher_mode {
                TeacherMode::Ema => ema_update(&teacher, &student, inner.ema_decay)?,
                TeacherMode::Dynamic => student.clone(),
                TeacherMode::Fixed => teacher,
            };
        }
    }
    let final_loss = backends.generator.loss(image, &inner.prompt, &label, &student)?;
    Ok(InnerOutcome {
        adapted: student,
        pseudo_label: label,
        initial_loss,
        final_loss,
    })
}

/// `phi + eps * (phi_k - phi)`.
pub fn meta_update(phi: &AdapterState, phi_k: &AdapterState, eps: f64) -> Result<AdapterState> {
    adapter_axpy(phi, phi_k, 1.0 - eps, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLogEntry {
    pub epoch: usize,
    pub task: usize,
    pub image_id: String,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub phi: AdapterState,
    pub log: Vec<MetaLogEntry>,
}

/// Starting point of meta-training: the standard fresh adapter.
pub fn initial_phi(config: &MetaConfig, backends: Backends<'_>) -> Result<AdapterState> {
    init_adapter(
        backends.generator.model_dims(),
        &config.inner.lora,
        derive_seed(config.task_sampler_seed, &[0x0E7A]),
    )
}

/// Sequential Reptile over `dataset` for `meta_epochs`, visiting tasks in a
/// seeded shuffled order each epoch. Failed tasks are logged and skipped.
pub fn meta_train(dataset: &[ImageInput], config: &MetaConfig, backends: Backends<'_>) -> Result<MetaOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Arity { expected: 1, got: 0 });
    }
    let mut phi = initial_phi(config, backends)?;
    let mut log = Vec::with_capacity(dataset.len() * config.meta_epochs);
    for epoch in 0..config.meta_epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(config.task_sampler_seed, &[epoch as u64])));
        let mut epoch_cfg = config.clone();
        epoch_cfg.inner.seed = derive_seed(config.inner.seed, &[epoch as u64]);
        for (task, &i) in order.iter().enumerate() {
            let image = &dataset[i];
            let mut entry = MetaLogEntry {
                epoch,
                task,
                image_id: image.id.clone(),
                initial_loss: None,
                final_loss: None,
                error: None,
            };
            match inner_loop(&phi, image, &epoch_cfg, backends) {
                Ok(out) => {
                    phi = meta_update(&phi, &out.adapted, config.meta_step)?;
                    entry.initial_loss = Some(out.initial_loss);
                    entry.final_loss = Some(out.final_loss);
                }
                Err(e) => {
                    log::warn!("meta task {} ({}) skipped: {e}", task, image.id);
                    entry.error = Some(e.to_string());
                }
            }
            log.push(entry);
        }
    }
    Ok(MetaOutcome { phi, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::ToyBackends;
    use crate::backends::GeneratorBackend;
    use crate::lora::LoraConfig;

    fn small() -> MetaConfig {
        let mut c = MetaConfig::toy();
        c.inner.n_candidates = 4;
        c
    }

    #[test]
    fn update_examples() {
        let tb = ToyBackends::standard();
        let dims = tb.generator.model_dims();
        let a = init_adapter(dims, &LoraConfig::default(), 1).unwrap();
        let mut b = a.clone();
        b.set_flat_params(&a.flat_params().iter().map(|v| v + 1.0).collect::<Vec<_>>()).unwrap();
        assert_eq!(meta_update(&a, &b, 1.0).unwrap().flat_params(), b.flat_params());
        assert_eq!(meta_update(&a, &b, 0.0).unwrap().flat_params(), a.flat_params());
        let mut two = a.clone();
        two.set_flat_params(&vec![2.0; a.num_params()]).unwrap();
        let mut four = a.clone();
        four.set_flat_params(&vec![4.0; a.num_params()]).unwrap();
        assert!(meta_update(&two, &four, 0.5).unwrap().flat_params().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn inner_loop_leaves_phi_alone_and_descends() {
        let tb = ToyBackends::standard();
        let img = tb.world.render(&tb.world.image_ids()[0]).unwrap();
        let cfg = small();
        let phi = initial_phi(&cfg, tb.backends()).unwrap();
        let before = phi.clone();
        let out = inner_loop(&phi, &img, &cfg, tb.backends()).unwrap();
        assert_eq!(phi, before);
        assert!(out.final_loss < out.initial_loss);
    }

    #[test]
    fn zero_steps_is_identity() {
        let tb = ToyBackends::standard();
        let img = tb.world.render(&tb.world.image_ids()[0]).unwrap();
        let cfg = MetaConfig { inner_steps: 0, ..small() };
        let phi = initial_phi(&cfg, tb.backends()).unwrap();
        assert_eq!(inner_loop(&phi, &img, &cfg, tb.backends()).unwrap().adapted, phi);
    }

    #[test]
    fn meta_train_is_reproducible_and_logs_every_task() {
        let tb = ToyBackends::standard();
        let imgs: Vec<_> = tb.world.images().unwrap().into_iter().take(3).collect();
        let cfg = MetaConfig { meta_epochs: 2, ..small() };
        let a = meta_train(&imgs, &cfg, tb.backends()).unwrap();
        let b = meta_train(&imgs, &cfg, tb.backends()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 6);
        assert!(a.log.iter().all(|e| e.error.is_none()));
        assert!(meta_train(&[], &cfg, tb.backends()).is_err());
    }
}
