//! Backbone pre-training on an assembled manifest, fine-tune/evaluate on a
//! target dataset, and the few-shot (Fs) / small-scale-identity (Ss)
//! subsampling protocols.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use crate::checkpoint::{content_id, Checkpoint};
use crate::dataset::{record_path, DatasetManifest, Split};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::metrics::{evaluate_embeddings, RetrievalEntry, RetrievalResult, DEFAULT_MAX_RANK};
use crate::nn::{affine, affine_backward, init_weights, one_hot, softmax, softmax_cross_entropy, Adam};
use crate::rng::{derive_seed, derive_seed_str, rng, Rng};

pub const BACKBONE_KIND: &str = "toy-backbone";

/// Small conv net: area-pool to `input`, 3x3 conv + ReLU, average pool by
/// `pool`, linear embedding. A linear identity head sits on the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub channels: usize,
    pub input: (usize, usize),
    pub conv_channels: usize,
    pub pool: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            input: (16, 8),
            conv_channels: 8,
            pool: 4,
            embed_dim: 32,
        }
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        let (h, w) = self.input;
        if self.channels == 0 || self.conv_channels == 0 || self.embed_dim == 0 || self.pool == 0 {
            return Err(Error::invalid("backbone sizes must be positive"));
        }
        if h == 0 || w == 0 || h % self.pool != 0 || w % self.pool != 0 {
            return Err(Error::invalid("backbone input must be a positive multiple of the pool size"));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.input.0 * self.input.1
    }

    fn pooled_len(&self) -> usize {
        self.conv_channels * (self.input.0 / self.pool) * (self.input.1 / self.pool)
    }

    fn conv_w_len(&self) -> usize {
        self.conv_channels * self.channels * 9
    }

    fn embed_w_len(&self) -> usize {
        self.embed_dim * self.pooled_len()
    }

    /// Parameters before the head.
    pub fn backbone_len(&self) -> usize {
        self.conv_w_len() + self.conv_channels + self.embed_w_len() + self.embed_dim
    }

    pub fn param_count(&self, classes: usize) -> usize {
        self.backbone_len() + classes * self.embed_dim + classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub classes: usize,
    /// `[conv_w | conv_b | embed_w | embed_b | head_w | head_b]`.
    pub params: Vec<f64>,
}

struct Forward {
    conv: Vec<f64>,
    pooled: Vec<f64>,
    embedding: Vec<f64>,
    logits: Vec<f64>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let mut params = init_weights(&mut r, config.conv_w_len(), config.channels * 9, 2f64.sqrt());
        params.extend(vec![0.0; config.conv_channels]);
        params.extend(init_weights(&mut r, config.embed_w_len(), config.pooled_len(), 1.0));
        params.extend(vec![0.0; config.embed_dim]);
        let mut b = Self {
            config,
            classes: 0,
            params,
        };
        b.reset_head(classes, &mut r);
        Ok(b)
    }

    /// Replaces the identity head with a freshly initialised one.
    pub fn reset_head(&mut self, classes: usize, r: &mut Rng) {
        let n = self.config.backbone_len();
        self.params.truncate(n);
        self.params
            .extend(init_weights(r, classes * self.config.embed_dim, self.config.embed_dim, 1.0));
        self.params.extend(vec![0.0; classes]);
        self.classes = classes;
    }

    fn slices(&self) -> [std::ops::Range<usize>; 6] {
        let c = &self.config;
        let mut at = 0;
        let mut next = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        [
            next(c.conv_w_len()),
            next(c.conv_channels),
            next(c.embed_w_len()),
            next(c.embed_dim),
            next(self.classes * c.embed_dim),
            next(self.classes),
        ]
    }

    /// Resizes an image to the backbone input and flattens it.
    pub fn prepare(&self, image: &Image) -> Result<Vec<f64>> {
        let c = &self.config;
        if image.shape().channels != c.channels {
            return Err(Error::invalid(format!(
                "backbone expects {} channels, image has {}",
                c.channels,
                image.shape().channels
            )));
        }
        Ok(image.resize(c.input.0, c.input.1)?.to_f64())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let c = &self.config;
        let [cw, cb, ew, eb, hw, hb] = self.slices();
        let (h, w) = c.input;
        let (ph, pw) = (h / c.pool, w / c.pool);
        let mut conv = vec![0.0; c.conv_channels * h * w];
        let mut pooled = vec![0.0; c.pooled_len()];
        let wts = &self.params[cw];
        let bias = &self.params[cb];
        let area = (c.pool * c.pool) as f64;
        for oc in 0..c.conv_channels {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c.channels {
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wts[((oc * c.channels + ic) * 3 + ky) * 3 + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    let a = acc.max(0.0);
                    conv[(oc * h + y) * w + xx] = a;
                    pooled[(oc * ph + y / c.pool) * pw + xx / c.pool] += a / area;
                }
            }
        }
        let mut embedding = vec![0.0; c.embed_dim];
        affine(&self.params[ew], &self.params[eb], &pooled, &mut embedding);
        let mut logits = vec![0.0; self.classes];
        affine(&self.params[hw], &self.params[hb], &embedding, &mut logits);
        Forward {
            conv,
            pooled,
            embedding,
            logits,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).embedding
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.forward(x).logits)
    }

    /// Loss and gradient of one example, accumulated into `grad`.
    fn backward(&self, x: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        let c = &self.config;
        let [_, cb, ew, eb, hw, hb] = self.slices();
        let f = self.forward(x);
        let (loss, dlogits) = softmax_cross_entropy(&f.logits, target);

        let (gcw, rest) = grad.split_at_mut(cb.start);
        let (gcb, rest) = rest.split_at_mut(ew.start - cb.start);
        let (gew, rest) = rest.split_at_mut(eb.start - ew.start);
        let (geb, rest) = rest.split_at_mut(hw.start - eb.start);
        let (ghw, ghb) = rest.split_at_mut(hb.start - hw.start);

        let demb = affine_backward(&self.params[hw], &f.embedding, &dlogits, ghw, ghb);
        let dpooled = affine_backward(&self.params[ew], &f.pooled, &demb, gew, geb);

        let (h, w) = c.input;
        let (ph, pw) = (h / c.pool, w / c.pool);
        let area = (c.pool * c.pool) as f64;
        for oc in 0..c.conv_channels {
            for y in 0..h {
                for xx in 0..w {
                    if f.conv[(oc * h + y) * w + xx] <= 0.0 {
                        continue;
                    }
                    let d = dpooled[(oc * ph + y / c.pool) * pw + xx / c.pool] / area;
                    gcb[oc] += d;
                    for ic in 0..c.channels {
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gcw[((oc * c.channels + ic) * 3 + ky) * 3 + kx] +=
                                    d * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        loss
    }

    /// Mean loss and gradient over a batch. Per-example gradients are
    /// computed in parallel and summed in input order.
    pub fn loss_and_grad(&self, xs: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<f64>) {
        let per: Vec<(f64, Vec<f64>)> = xs
            .par_iter()
            .zip(targets)
            .map(|(x, t)| {
                let mut g = vec![0.0; self.params.len()];
                let l = self.backward(x, t, &mut g);
                (l, g)
            })
            .collect();
        let n = xs.len().max(1) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in per {
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|v| *v /= n);
        (loss / n, grad)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new(BACKBONE_KIND)
            .with("channels", c.channels)
            .with("input_h", c.input.0)
            .with("input_w", c.input.1)
            .with("conv_channels", c.conv_channels)
            .with("pool", c.pool)
            .with("embed_dim", c.embed_dim)
            .with("classes", self.classes)
            .with_params(self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(BACKBONE_KIND)?;
        let config = BackboneConfig {
            channels: ck.get("channels")?,
            input: (ck.get("input_h")?, ck.get("input_w")?),
            conv_channels: ck.get("conv_channels")?,
            pool: ck.get("pool")?,
            embed_dim: ck.get("embed_dim")?,
        };
        config.validate()?;
        let classes: usize = ck.get("classes")?;
        if ck.params.len() != config.param_count(classes) {
            return Err(Error::Integrity(format!(
                "backbone checkpoint has {} parameters, expected {}",
                ck.params.len(),
                config.param_count(classes)
            )));
        }
        Ok(Self {
            config,
            classes,
            params: ck.params.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Configuration and schedule

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentations {
    pub mixup: bool,
    pub cutmix: bool,
    pub random_erasing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentations: Augmentations,
    pub backbone: BackboneConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 4e-3,
            weight_decay: 0.05,
            warmup_epochs: 2.0,
            batch_size: 64,
            seed: 0,
            augmentations: Augmentations {
                random_erasing: true,
                ..Augmentations::default()
            },
            backbone: BackboneConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// Full-scale protocol values.
    pub fn full_scale() -> Self {
        Self {
            epochs: 300,
            warmup_epochs: 20.0,
            batch_size: 512,
            augmentations: Augmentations {
                mixup: true,
                cutmix: true,
                random_erasing: true,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            bad.push(format!(
                "warmup_epochs {} must be in [0, epochs={})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0) {
            bad.push("learning_rate must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if bad.is_empty() {
            self.backbone.validate()
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Learning rate at optimiser step `step` of `total`: linear warm-up over
/// the first `warmup` steps, then half-cosine decay towards 0.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        let span = total.saturating_sub(warmup).max(1) as f64;
        peak * 0.5 * (1.0 + (PI * (step - warmup) as f64 / span).cos())
    }
}

pub fn warmup_steps(warmup_epochs: f64, steps_per_epoch: usize) -> usize {
    (warmup_epochs * steps_per_epoch as f64).round() as usize
}

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Image,
    pub identity: String,
    pub camera: Option<u32>,
    pub split: Split,
}

/// Loads every manifest image relative to `dir`.
pub fn load_examples(manifest: &DatasetManifest, dir: &Path) -> Result<Vec<Example>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            Ok(Example {
                image: Image::load(&record_path(dir, r))?,
                identity: r.identity.clone(),
                camera: r.camera,
                split: r.split,
            })
        })
        .collect()
}

fn label_index(examples: &[&Example]) -> BTreeMap<String, usize> {
    let mut ids: Vec<&str> = examples.iter().map(|e| e.identity.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

/// Erases a random rectangle of 2% to 33% of the area, aspect 0.3 to 3.3,
/// with probability 0.5, filling it with uniform noise in `[-1, 1]`.
pub fn random_erasing(x: &mut [f64], channels: usize, h: usize, w: usize, r: &mut Rng) {
    if r.random::<f64>() >= 0.5 {
        return;
    }
    for _ in 0..10 {
        let area = r.random_range(0.02..0.33) * (h * w) as f64;
        let aspect = r.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = r.random_range(0..=h - eh);
        let x0 = r.random_range(0..=w - ew);
        for c in 0..channels {
            for y in y0..y0 + eh {
                for xx in x0..x0 + ew {
                    x[(c * h + y) * w + xx] = r.random_range(-1.0..=1.0);
                }
            }
        }
        return;
    }
}

fn mix_batch(
    xs: &mut [Vec<f64>],
    ts: &mut [Vec<f64>],
    aug: &Augmentations,
    cfg: &BackboneConfig,
    r: &mut Rng,
) {
    let use_cutmix = match (aug.mixup, aug.cutmix) {
        (false, false) => return,
        (true, false) => false,
        (false, true) => true,
        (true, true) => r.random::<bool>(),
    };
    if xs.len() < 2 {
        return;
    }
    let beta = Beta::new(if use_cutmix { 1.0 } else { 0.8 }, if use_cutmix { 1.0 } else { 0.8 })
        .expect("valid beta parameters");
    let lam: f64 = beta.sample(r);
    let partner: Vec<usize> = (0..xs.len()).rev().collect();
    let (src_x, src_t) = (xs.to_vec(), ts.to_vec());
    let (h, w) = cfg.input;
    for i in 0..xs.len() {
        let j = partner[i];
        let lam_i = if use_cutmix {
            let ch = ((1.0 - lam).sqrt() * h as f64) as usize;
            let cw = ((1.0 - lam).sqrt() * w as f64) as usize;
            let cy = r.random_range(0..h);
            let cx = r.random_range(0..w);
            let (y0, y1) = (cy.saturating_sub(ch / 2), (cy + ch / 2).min(h));
            let (x0, x1) = (cx.saturating_sub(cw / 2), (cx + cw / 2).min(w));
            for c in 0..cfg.channels {
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let k = (c * h + y) * w + xx;
                        xs[i][k] = src_x[j][k];
                    }
                }
            }
            1.0 - ((y1 - y0) * (x1 - x0)) as f64 / (h * w) as f64
        } else {
            for k in 0..xs[i].len() {
                xs[i][k] = lam * src_x[i][k] + (1.0 - lam) * src_x[j][k];
            }
            lam
        };
        for k in 0..ts[i].len() {
            ts[i][k] = lam_i * src_t[i][k] + (1.0 - lam_i) * src_t[j][k];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Optim {
    lr: f64,
    weight_decay: f64,
    warmup_epochs: f64,
    batch_size: usize,
}

/// Runs `epochs` of classification training, returning per-epoch mean
/// loss and the per-step learning rates. `after_epoch` sees the model.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut Backbone,
    inputs: &[Vec<f64>],
    labels: &[usize],
    epochs: usize,
    opt_cfg: Optim,
    aug: &Augmentations,
    r: &mut Rng,
    mut after_epoch: impl FnMut(&Backbone) -> Result<()>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = inputs.len();
    let steps_per_epoch = n.div_ceil(opt_cfg.batch_size).max(1);
    let total = steps_per_epoch * epochs;
    let warmup = warmup_steps(opt_cfg.warmup_epochs, steps_per_epoch);
    let mut opt = Adam::new(model.params.len()).with_weight_decay(opt_cfg.weight_decay);
    let (h, w) = model.config.input;
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut lrs = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(r);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt_cfg.batch_size) {
            let mut xs: Vec<Vec<f64>> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let mut ts: Vec<Vec<f64>> = batch.iter().map(|&i| one_hot(model.classes, labels[i])).collect();
            if aug.random_erasing {
                for x in xs.iter_mut() {
                    random_erasing(x, model.config.channels, h, w, r);
                }
            }
            mix_batch(&mut xs, &mut ts, aug, &model.config, r);
            let (loss, grad) = model.loss_and_grad(&xs, &ts);
            let lr = lr_at(step, total, warmup, opt_cfg.lr);
            opt.step(&mut model.params, &grad, lr);
            lrs.push(lr);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        losses.push(epoch_loss / n as f64);
        after_epoch(model)?;
    }
    Ok((losses, lrs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub lr_trace: Vec<f64>,
    /// Accuracy on the (unaugmented) training images after the last epoch.
    pub train_accuracy: f64,
}

pub fn pretrain(manifest: &DatasetManifest, dir: &Path, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if manifest.identity_count() < 2 {
        return Err(Error::invalid("pre-training needs at least 2 identities"));
    }
    pretrain_examples(&load_examples(manifest, dir)?, cfg)
}

/// Identity-classification pre-training on every example regardless of split.
pub fn pretrain_examples(examples: &[Example], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let labels_of = label_index(&refs);
    if labels_of.len() < 2 {
        return Err(Error::invalid("pre-training needs at least 2 identities"));
    }
    let mut model = Backbone::new(cfg.backbone, labels_of.len(), cfg.seed)?;
    let inputs = examples
        .iter()
        .map(|e| model.prepare(&e.image))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| labels_of[&e.identity]).collect();
    let mut r = rng(derive_seed(cfg.seed, 1));
    let (losses, lrs) = train_loop(
        &mut model,
        &inputs,
        &labels,
        cfg.epochs,
        Optim {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            warmup_epochs: cfg.warmup_epochs,
            batch_size: cfg.batch_size,
        },
        &cfg.augmentations,
        &mut r,
        |_| Ok(()),
    )?;
    let correct = inputs
        .par_iter()
        .zip(&labels)
        .filter(|(x, &l)| argmax(&model.forward(x).logits) == l)
        .count();
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let checkpoint = model
        .to_checkpoint()
        .with("epochs", cfg.epochs)
        .with("learning_rate", cfg.learning_rate)
        .with("weight_decay", cfg.weight_decay)
        .with("warmup_epochs", cfg.warmup_epochs)
        .with("batch_size", cfg.batch_size)
        .with("seed", cfg.seed)
        .with("final_loss", losses.last().copied().unwrap_or(f64::NAN))
        .with("epoch_losses", join(&losses));
    Ok(PretrainOutcome {
        checkpoint,
        epoch_losses: losses,
        lr_trace: lrs,
        train_accuracy: correct as f64 / inputs.len() as f64,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

// ---------------------------------------------------------------------------
// Fine-tune and evaluate

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub cross_camera: bool,
    pub max_rank: usize,
    /// Architecture for random initialisation when no checkpoint is given.
    pub backbone: BackboneConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 4e-3,
            weight_decay: 0.05,
            batch_size: 32,
            seed: 0,
            cross_camera: true,
            max_rank: DEFAULT_MAX_RANK,
            backbone: BackboneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub result: RetrievalResult,
    /// mAP after each fine-tune epoch.
    pub map_trace: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

pub fn finetune_eval(
    checkpoint: Option<&Checkpoint>,
    target: &DatasetManifest,
    dir: &Path,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    finetune_eval_examples(checkpoint, &load_examples(target, dir)?, cfg)
}

pub fn finetune_eval_examples(
    checkpoint: Option<&Checkpoint>,
    examples: &[Example],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let by = |s: Split| examples.iter().filter(move |e| e.split == s).collect::<Vec<_>>();
    let (train, query, gallery) = (by(Split::Train), by(Split::Query), by(Split::Gallery));
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("target needs query and gallery splits"));
    }
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::invalid("fine-tuning needs a train split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let labels_of = label_index(&train);
    let mut init = rng(cfg.seed);
    let mut model = match checkpoint {
        Some(ck) => Backbone::from_checkpoint(ck)?,
        None => Backbone::new(cfg.backbone, 0, cfg.seed)?,
    };
    if cfg.epochs > 0 {
        model.reset_head(labels_of.len(), &mut init);
    }

    let prep = |set: &[&Example], m: &Backbone| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|e| m.prepare(&e.image)).collect()
    };
    let q_in = prep(&query, &model)?;
    let g_in = prep(&gallery, &model)?;
    let entries = |set: &[&Example]| -> Vec<RetrievalEntry> {
        set.iter().map(|e| RetrievalEntry::new(e.identity.clone(), e.camera)).collect()
    };
    let (q_ids, g_ids) = (entries(&query), entries(&gallery));
    let evaluate = |m: &Backbone| -> Result<RetrievalResult> {
        let qe: Vec<Vec<f64>> = q_in.par_iter().map(|x| m.embed(x)).collect();
        let ge: Vec<Vec<f64>> = g_in.par_iter().map(|x| m.embed(x)).collect();
        evaluate_embeddings(&qe, &ge, q_ids.clone(), g_ids.clone(), cfg.cross_camera, cfg.max_rank)
    };

    let mut trace = Vec::new();
    let mut last = None;
    let mut losses = Vec::new();
    if cfg.epochs > 0 {
        let inputs = prep(&train, &model)?;
        let labels: Vec<usize> = train.iter().map(|e| labels_of[&e.identity]).collect();
        let mut r = rng(derive_seed(cfg.seed, 1));
        let (l, _) = train_loop(
            &mut model,
            &inputs,
            &labels,
            cfg.epochs,
            Optim {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                warmup_epochs: 0.0,
                batch_size: cfg.batch_size,
            },
            &Augmentations::default(),
            &mut r,
            |m| {
                let res = evaluate(m)?;
                trace.push(res.map_score);
                last = Some(res);
                Ok(())
            },
        )?;
        losses = l;
    }
    let result = match last {
        Some(r) => r,
        None => evaluate(&model)?,
    };
    Ok(FinetuneOutcome {
        result,
        map_trace: trace,
        epoch_losses: losses,
    })
}

// ---------------------------------------------------------------------------
// Config file

const TRAINING_SECTIONS: [&str; 2] = ["pretrain", "finetune"];

/// `[pretrain]` and `[finetune]` sections of a training config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingConfig {
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

struct Section<'a> {
    name: &'static str,
    table: Option<&'a toml::Table>,
    seen: Vec<&'static str>,
    errors: Vec<String>,
}

impl Section<'_> {
    fn get(&mut self, key: &'static str) -> Option<&toml::Value> {
        self.seen.push(key);
        self.table?.get(key)
    }

    fn num(&mut self, key: &'static str, default: f64) -> f64 {
        let name = self.name;
        match self.get(key).cloned() {
            None => default,
            Some(toml::Value::Float(f)) => f,
            Some(toml::Value::Integer(i)) => i as f64,
            Some(v) => {
                self.errors.push(format!("{name}.{key}: expected a number, found `{v}`"));
                default
            }
        }
    }

    fn count(&mut self, key: &'static str, default: usize) -> usize {
        let name = self.name;
        match self.get(key).cloned() {
            None => default,
            Some(toml::Value::Integer(i)) if i >= 0 => i as usize,
            Some(v) => {
                self.errors.push(format!("{name}.{key}: expected a non-negative integer, found `{v}`"));
                default
            }
        }
    }

    fn flag(&mut self, key: &'static str, default: bool) -> bool {
        let name = self.name;
        match self.get(key).cloned() {
            None => default,
            Some(toml::Value::Boolean(b)) => b,
            Some(v) => {
                self.errors.push(format!("{name}.{key}: expected true or false, found `{v}`"));
                default
            }
        }
    }

    fn finish(mut self) -> Vec<String> {
        for key in self.table.into_iter().flat_map(|t| t.keys()) {
            if !self.seen.contains(&key.as_str()) {
                self.errors.push(format!("{}.{key}: unknown key", self.name));
            }
        }
        self.errors
    }
}

impl TrainingConfig {
    pub fn parse_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Validation(vec![format!("syntax: {}", e.message())]))?;
        crate::pipeline::apply_overrides(&mut table, &TRAINING_SECTIONS, env);
        let mut errors = Vec::new();
        for (k, v) in &table {
            if !TRAINING_SECTIONS.contains(&k.as_str()) || !v.is_table() {
                errors.push(format!("{k}: unknown section"));
            }
        }
        let d = TrainingConfig::default();
        let sec = |name: &'static str| Section {
            name,
            table: table.get(name).and_then(|v| v.as_table()),
            seen: Vec::new(),
            errors: Vec::new(),
        };

        let mut p = sec("pretrain");
        let pretrain = PretrainConfig {
            epochs: p.count("epochs", d.pretrain.epochs),
            learning_rate: p.num("learning_rate", d.pretrain.learning_rate),
            weight_decay: p.num("weight_decay", d.pretrain.weight_decay),
            warmup_epochs: p.num("warmup_epochs", d.pretrain.warmup_epochs),
            batch_size: p.count("batch_size", d.pretrain.batch_size),
            seed: p.count("seed", d.pretrain.seed as usize) as u64,
            augmentations: Augmentations {
                mixup: p.flag("mixup", d.pretrain.augmentations.mixup),
                cutmix: p.flag("cutmix", d.pretrain.augmentations.cutmix),
                random_erasing: p.flag("random_erasing", d.pretrain.augmentations.random_erasing),
            },
            backbone: d.pretrain.backbone,
        };
        errors.extend(p.finish());

        let mut f = sec("finetune");
        let finetune = FinetuneConfig {
            epochs: f.count("epochs", d.finetune.epochs),
            learning_rate: f.num("learning_rate", d.finetune.learning_rate),
            weight_decay: f.num("weight_decay", d.finetune.weight_decay),
            batch_size: f.count("batch_size", d.finetune.batch_size),
            seed: f.count("seed", d.finetune.seed as usize) as u64,
            cross_camera: f.flag("cross_camera", d.finetune.cross_camera),
            max_rank: f.count("max_rank", d.finetune.max_rank),
            backbone: d.finetune.backbone,
        };
        errors.extend(f.finish());

        if let Err(Error::Validation(v)) = pretrain.validate() {
            errors.extend(v.into_iter().map(|e| format!("pretrain: {e}")));
        }
        if finetune.batch_size == 0 || finetune.max_rank == 0 || !(finetune.learning_rate > 0.0) {
            errors.push("finetune: batch_size and max_rank must be >= 1, learning_rate > 0".into());
        }
        if errors.is_empty() {
            Ok(Self { pretrain, finetune })
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse_with_env(&text, std::env::vars())
    }
}

/// Appends `run_id  config_hash  mAP  rank1` to a tab-separated ledger.
pub fn append_run_ledger(path: &Path, run_id: &str, config_text: &str, result: &RetrievalResult) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    writeln!(
        f,
        "{run_id}\t{}\t{:.6}\t{:.6}",
        content_id(config_text.as_bytes()),
        result.map_score,
        result.rank1()
    )
    .at(path)
}

// ---------------------------------------------------------------------------
// Subsampling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetMode {
    /// Few-shot images: a fraction of each identity's images.
    Fs,
    /// Small-scale identities: a fraction of the identities.
    Ss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSpec {
    pub mode: SubsetMode,
    pub fraction: f64,
    pub seed: u64,
}

// Guards against `0.7 * 10 = 7.000000000000001` style rounding.
const ROUND_EPS: f64 = 1e-9;

/// Images kept per identity under Fs: `max(1, ceil(fraction * count))`.
pub fn fs_keep(fraction: f64, count: usize) -> usize {
    ((fraction * count as f64 - ROUND_EPS).ceil() as usize).clamp(1, count.max(1))
}

/// Identities kept under Ss: `max(1, floor(fraction * n))`.
pub fn ss_keep(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + ROUND_EPS).floor() as usize).clamp(1, n.max(1))
}

pub fn subsample(manifest: &DatasetManifest, spec: &SubsetSpec) -> Result<DatasetManifest> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {} outside (0, 1]", spec.fraction)));
    }
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_id.entry(&r.identity).or_default().push(i);
    }
    let mut keep = vec![false; manifest.len()];
    match spec.mode {
        SubsetMode::Fs => {
            for (id, idx) in &by_id {
                let k = fs_keep(spec.fraction, idx.len());
                let mut r = rng(derive_seed_str(spec.seed, id));
                for &i in idx.choose_multiple(&mut r, k) {
                    keep[i] = true;
                }
            }
        }
        SubsetMode::Ss => {
            let ids: Vec<&str> = by_id.keys().copied().collect();
            let k = ss_keep(spec.fraction, ids.len());
            for id in ids.choose_multiple(&mut rng(spec.seed), k) {
                for &i in &by_id[id] {
                    keep[i] = true;
                }
            }
        }
    }
    Ok(DatasetManifest {
        records: manifest
            .records
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(r, _)| r.clone())
            .collect(),
        ..manifest.clone()
    })
}
