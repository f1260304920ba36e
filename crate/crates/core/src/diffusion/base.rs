use rand::Rng as _;

use crate::error::Result;
use crate::image::Image;
use crate::nn::Adam;
use crate::prompt::{caption_sequence, embed_prompt, CaptionerHandle, PromptTemplate, CLASS_NOUN};
use crate::rng::{derive_seed, normal_vec, rng};
use crate::sprite::SpriteWorld;

use super::denoiser::{Denoiser, DenoiserConfig};
use super::loss::{prior_preservation_loss_and_grad, LossConfig, LossItem};
use super::schedule::NoiseSchedule;

/// How the generic "pre-trained" toy model is produced: a text-conditioned
/// denoiser fitted on a corpus of generic captioned sprites that shares no
/// seed with any identity later fine-tuned.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModelConfig {
    pub denoiser: DenoiserConfig,
    pub corpus_identities: usize,
    pub images_per_identity: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            corpus_identities: 64,
            images_per_identity: 2,
            steps: 600,
            learning_rate: 1e-2,
            batch_size: 8,
            seed: 0x5EED_BA5E,
        }
    }
}

pub fn train_base_model(
    cfg: &BaseModelConfig,
    schedule: &NoiseSchedule,
    template: &PromptTemplate,
) -> Result<Denoiser> {
    let world = SpriteWorld::new(derive_seed(cfg.seed, 1)).with_shape(cfg.denoiser.shape);
    let captioner = CaptionerHandle::stub();
    let mut corpus: Vec<(Image, Vec<f64>)> = Vec::new();
    for i in 0..cfg.corpus_identities {
        let id = world.identity(i);
        for j in 0..cfg.images_per_identity {
            let img = world.render(&id, i + j, j);
            let caption = caption_sequence(std::slice::from_ref(&img), &captioner)?;
            let prompt = template.fill(CLASS_NOUN, &caption);
            let cond = embed_prompt(&prompt, cfg.denoiser.cond_dim);
            corpus.push((img, cond));
        }
    }

    let mut model = Denoiser::new(cfg.denoiser, derive_seed(cfg.seed, 2))?;
    let mut opt = Adam::new(model.params().len());
    let mut r = rng(derive_seed(cfg.seed, 3));
    let loss_cfg = LossConfig::with_lambda(0.0);
    let pixels = cfg.denoiser.shape.len();
    for _ in 0..cfg.steps {
        let draws: Vec<(usize, usize, Vec<f64>)> = (0..cfg.batch_size)
            .map(|_| {
                (
                    r.random_range(0..corpus.len()),
                    r.random_range(1..=schedule.timesteps()),
                    normal_vec(&mut r, pixels),
                )
            })
            .collect();
        let batch: Vec<LossItem<'_>> = draws
            .iter()
            .map(|(i, t, n)| LossItem {
                image: &corpus[*i].0,
                condition: &corpus[*i].1,
                t: *t,
                noise: n,
            })
            .collect();
        let (_, grad) = prior_preservation_loss_and_grad(&model, &batch, &[], &loss_cfg, schedule)?;
        opt.step(model.params_mut(), &grad, cfg.learning_rate);
    }
    Ok(model)
}
