use rand::Rng as _;

use crate::diversity::ReferenceSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Adam;
use crate::prompt::{embed_prompt, PromptBundle};
use crate::rng::{normal_vec, rng};

use super::denoiser::Denoiser;
use super::loss::{prior_preservation_loss_and_grad, LossConfig, LossItem};
use super::schedule::NoiseSchedule;

/// Learning rate used by full-scale identity fine-tuning.
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-6;
pub const DEFAULT_FINE_TUNE_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Identity items per step; the prior term draws the same number.
    pub batch_size: usize,
}

impl Default for FineTuneConfig {
    /// Toy-scale defaults: the full-scale step count with a learning rate
    /// sized for the toy denoiser.
    fn default() -> Self {
        Self {
            steps: DEFAULT_FINE_TUNE_STEPS,
            learning_rate: 1e-2,
            seed: 0,
            batch_size: 4,
        }
    }
}

impl FineTuneConfig {
    pub fn full_scale() -> Self {
        Self {
            learning_rate: FULL_SCALE_LEARNING_RATE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("fine-tune steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("fine-tune learning rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("fine-tune batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: Denoiser,
    /// Loss at each step, evaluated before that step's update.
    pub trace: Vec<f64>,
}

/// Fine-tunes `model` on one identity: identity images under the enhanced
/// prompt, reference images under the token-free prompt. Timesteps for the
/// two terms are drawn independently and uniformly.
pub fn fine_tune(
    mut model: Denoiser,
    id_images: &[Image],
    prompts: &PromptBundle,
    ref_set: &ReferenceSet,
    cfg: &FineTuneConfig,
    loss_cfg: &LossConfig,
    schedule: &NoiseSchedule,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    loss_cfg.validate(schedule)?;
    if id_images.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one identity image"));
    }
    let use_prior = loss_cfg.lambda > 0.0;
    if use_prior && ref_set.images.is_empty() {
        return Err(Error::invalid("lambda > 0 requires a non-empty reference set"));
    }
    let dim = model.config().cond_dim;
    let id_cond = embed_prompt(&prompts.enhanced_prompt, dim);
    let ref_cond = embed_prompt(&prompts.lpe_prompt, dim);
    let pixels = model.shape().len();
    let timesteps = schedule.timesteps();

    let mut r = rng(cfg.seed);
    let mut opt = Adam::new(model.params().len());
    let mut trace = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let draw = |r: &mut crate::rng::Rng, pool: &[Image]| {
            (0..cfg.batch_size)
                .map(|_| {
                    let i = r.random_range(0..pool.len());
                    let t = r.random_range(1..=timesteps);
                    (i, t, normal_vec(r, pixels))
                })
                .collect::<Vec<_>>()
        };
        let id_draws = draw(&mut r, id_images);
        let ref_draws = if use_prior {
            draw(&mut r, &ref_set.images)
        } else {
            Vec::new()
        };
        let batch: Vec<LossItem<'_>> = id_draws
            .iter()
            .map(|(i, t, n)| LossItem {
                image: &id_images[*i],
                condition: &id_cond,
                t: *t,
                noise: n,
            })
            .collect();
        let ref_batch: Vec<LossItem<'_>> = ref_draws
            .iter()
            .map(|(i, t, n)| LossItem {
                image: &ref_set.images[*i],
                condition: &ref_cond,
                t: *t,
                noise: n,
            })
            .collect();
        let (loss, grad) =
            prior_preservation_loss_and_grad(&model, &batch, &ref_batch, loss_cfg, schedule)?;
        trace.push(loss.total);
        opt.step(model.params_mut(), &grad, cfg.learning_rate);
    }
    Ok(FineTuneOutcome { model, trace })
}
