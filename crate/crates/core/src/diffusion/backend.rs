use std::collections::HashMap;
use std::sync::Mutex;

use crate::diversity::build_reference_set;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::{embed_prompt, PromptBundle};
use crate::rng::derive_seed;

use super::denoiser::Denoiser;
use super::loss::LossConfig;
use super::sampler::sample;
use super::schedule::NoiseSchedule;
use super::train::{fine_tune, FineTuneConfig};

/// Opaque reference to a fine-tuned model held by a backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BackendHandle(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct BackendTuneConfig {
    pub fine_tune: FineTuneConfig,
    pub loss: LossConfig,
    pub reference_set_size: usize,
    pub reference_seed: u64,
    pub sample_steps: usize,
}

impl Default for BackendTuneConfig {
    fn default() -> Self {
        Self {
            fine_tune: FineTuneConfig::default(),
            loss: LossConfig::default(),
            reference_set_size: crate::diversity::DEFAULT_REFERENCE_SET_SIZE,
            reference_seed: 0,
            sample_steps: 25,
        }
    }
}

/// Contract every generation backend implements, toy or full-scale.
pub trait GenerationBackend: Send + Sync {
    fn name(&self) -> &str;

    fn fine_tune(
        &self,
        images: &[Image],
        prompts: &PromptBundle,
        config: &BackendTuneConfig,
    ) -> Result<BackendHandle>;

    /// `n` images for `prompt`, image `i` drawn with a seed derived from `(seed, i)`.
    fn sample(&self, handle: &BackendHandle, prompt: &str, seed: u64, n: usize) -> Result<Vec<Image>>;
}

/// The in-process toy engine behind the backend contract.
pub struct ToyBackend {
    base: Denoiser,
    schedule: NoiseSchedule,
    sample_steps: usize,
    tuned: Mutex<HashMap<BackendHandle, Denoiser>>,
}

impl ToyBackend {
    pub fn new(base: Denoiser, schedule: NoiseSchedule, sample_steps: usize) -> Self {
        Self {
            base,
            schedule,
            sample_steps,
            tuned: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self, handle: &BackendHandle) -> Option<Denoiser> {
        self.tuned.lock().unwrap().get(handle).cloned()
    }
}

impl GenerationBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn fine_tune(
        &self,
        images: &[Image],
        prompts: &PromptBundle,
        config: &BackendTuneConfig,
    ) -> Result<BackendHandle> {
        let refs = if config.loss.lambda > 0.0 {
            build_reference_set(
                &self.base,
                prompts,
                config.reference_set_size,
                config.reference_seed,
                config.sample_steps,
                &self.schedule,
            )?
        } else {
            crate::diversity::ReferenceSet::empty(prompts, &self.base)
        };
        let out = fine_tune(
            self.base.clone(),
            images,
            prompts,
            &refs,
            &config.fine_tune,
            &config.loss,
            &self.schedule,
        )?;
        let handle = BackendHandle(out.model.model_id());
        self.tuned.lock().unwrap().insert(handle.clone(), out.model);
        Ok(handle)
    }

    fn sample(&self, handle: &BackendHandle, prompt: &str, seed: u64, n: usize) -> Result<Vec<Image>> {
        let model = self
            .model(handle)
            .ok_or_else(|| Error::NotFound(format!("no fine-tuned model `{}`", handle.0)))?;
        let cond = embed_prompt(prompt, model.config().cond_dim);
        (0..n)
            .map(|i| sample(&model, &cond, derive_seed(seed, i as u64), self.sample_steps, &self.schedule))
            .collect()
    }
}
