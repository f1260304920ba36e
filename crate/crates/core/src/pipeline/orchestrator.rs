use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use crate::checkpoint::{content_id, Checkpoint};
use crate::dataset::{
    assemble, compute_identity_cdf, stats_report, DatasetManifest, DistributionCurve, Split, StatsOptions,
    StatsReport,
};
use crate::diffusion::{
    fine_tune, make_schedule, sample, train_base_model, BaseModelConfig, Denoiser, FineTuneConfig, LossConfig,
    NoiseSchedule,
};
use crate::diversity::{build_reference_set, cache_reference_set, load_reference_set, ReferenceSet};
use crate::error::{Error, IoContext, Result};
use crate::filter::{
    apply_threshold, calibrate_threshold, make_clip_scorer, score_samples, train_id_classifier,
    train_reid_embedder, FilterKind, FilterModel, FilterReport, GeneratedSample, LabeledImage, LabeledSet,
    ScoredSample, ToyJointEmbedder, TrainConfig,
};
use crate::image::{Image, ImageShape};
use crate::prompt::{
    build_prompts, caption_sequence, default_iir_candidates, default_vocabulary, embed_prompt,
    load_iir_candidates, CaptionerHandle, IirRegistry, PromptBundle, PromptTemplate, CLASS_NOUN,
};
use crate::rng::{derive_seed, derive_seed_str};
use crate::sprite::SpriteWorld;

use super::config::{PipelineConfig, TOY_BACKEND};
use super::ledger::{RunLedger, Stage, StageRecord, StageStatus};

pub const SYNTHETIC_SOURCE: &str = "sprite";
const DONE_SUFFIX: &str = ".done";

/// One identity's real images.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityInput {
    pub name: String,
    pub source: String,
    /// Fine-tuning sequence.
    pub sequence: Vec<Image>,
    pub cameras: Vec<Option<u32>>,
    /// Real images never used for fine-tuning, used for calibration.
    pub holdout: Vec<Image>,
}

/// Counts how often each stage actually executed (cache hits excluded).
#[derive(Debug, Default)]
pub struct StageCounters {
    counts: [AtomicUsize; 6],
    base_model: AtomicUsize,
}

impl StageCounters {
    pub fn get(&self, stage: Stage) -> usize {
        self.counts[stage as usize].load(Ordering::SeqCst)
    }

    pub fn base_model(&self) -> usize {
        self.base_model.load(Ordering::SeqCst)
    }

    fn bump(&self, stage: Stage) {
        self.counts[stage as usize].fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> BTreeMap<Stage, usize> {
        Stage::ALL.into_iter().map(|s| (s, self.get(s))).collect()
    }
}

// ---------------------------------------------------------------------------
// Inputs

/// Sprite identities of the configured world plus every identity of the
/// configured source manifests, in a stable order.
const SPRITE_CAMERAS: usize = 4;

pub fn gather_identities(cfg: &PipelineConfig, shape: ImageShape) -> Result<Vec<IdentityInput>> {
    let s = &cfg.sources;
    let mut out = Vec::new();
    let world = SpriteWorld::new(s.world_seed).with_shape(shape);
    for i in 0..s.synthetic_identities {
        let id = world.identity(i);
        // One camera per sequence; holdout frames come from the others.
        let cam = i % SPRITE_CAMERAS;
        let sequence: Vec<Image> = (0..s.sequence_length).map(|j| world.render(&id, cam, j)).collect();
        let holdout = (0..s.holdout_per_identity)
            .map(|j| {
                let other = (cam + 1 + j % (SPRITE_CAMERAS - 1)) % SPRITE_CAMERAS;
                world.render(&id, other, s.sequence_length + j)
            })
            .collect();
        out.push(IdentityInput {
            name: id.name.clone(),
            source: SYNTHETIC_SOURCE.into(),
            cameras: vec![Some(cam as u32); s.sequence_length],
            sequence,
            holdout,
        });
    }
    for path in &s.manifests {
        let manifest = DatasetManifest::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut groups: BTreeMap<(String, String), Vec<&crate::dataset::ManifestRecord>> = BTreeMap::new();
        for r in manifest.records.iter().filter(|r| r.split == Split::Train) {
            groups.entry((r.source.clone(), r.identity.clone())).or_default().push(r);
        }
        for ((source, name), recs) in groups {
            let mut input = IdentityInput {
                name,
                source,
                sequence: Vec::new(),
                cameras: Vec::new(),
                holdout: Vec::new(),
            };
            for (j, r) in recs.iter().enumerate() {
                let img = Image::load(&dir.join(&r.path))?.resize(shape.height, shape.width)?;
                if img.shape() != shape {
                    return Err(Error::invalid(format!(
                        "`{}` has {} channels, the generator needs {}",
                        r.path,
                        img.shape().channels,
                        shape.channels
                    )));
                }
                if j < s.sequence_length {
                    input.sequence.push(img);
                    input.cameras.push(r.camera);
                } else if input.holdout.len() < s.holdout_per_identity {
                    input.holdout.push(img);
                }
            }
            out.push(input);
        }
    }
    let mut names: Vec<&str> = out.iter().map(|i| i.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("identity `{}` appears in more than one source", w[0])));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Filters

/// A fitted filter for one source with its threshold.
pub struct SourceFilter {
    pub model: FilterModel,
    pub tau: f64,
    /// Changes whenever the model or threshold would change.
    pub id: String,
}

fn labeled_set(source: &str, inputs: &[&IdentityInput]) -> LabeledSet {
    LabeledSet {
        source: source.to_string(),
        items: inputs
            .iter()
            .flat_map(|i| {
                i.sequence.iter().zip(&i.cameras).map(|(img, cam)| LabeledImage {
                    image: img.clone(),
                    identity: i.name.clone(),
                    camera: *cam,
                })
            })
            .collect(),
    }
}

pub fn build_source_filter(
    cfg: &PipelineConfig,
    source: &str,
    inputs: &[&IdentityInput],
) -> Result<SourceFilter> {
    let set = labeled_set(source, inputs);
    let seed = derive_seed_str(cfg.run.seed, source);
    let train = TrainConfig {
        epochs: cfg.filter.train_epochs,
        seed,
        ..TrainConfig::default()
    };
    let model = match cfg.filter.kind {
        FilterKind::ReidCtf => train_reid_embedder(&set, &train)?.0,
        FilterKind::Cctf => train_id_classifier(&set, &train)?,
        FilterKind::Clip => {
            let text = PromptTemplate::parse(&cfg.caption.template)?.fill(CLASS_NOUN, "");
            make_clip_scorer(&text, Arc::new(ToyJointEmbedder::new(32, set_channels(&set), seed)))?
        }
    };
    let tau = match cfg.fixed_tau(source) {
        Some(t) => t,
        None => {
            // Identities without source images have no gallery entry and
            // fail on their own later.
            let held: Vec<GeneratedSample> = inputs
                .iter()
                .filter(|i| !i.sequence.is_empty())
                .flat_map(|i| {
                    let imgs = if i.holdout.is_empty() { &i.sequence } else { &i.holdout };
                    imgs.iter().enumerate().map(|(j, img)| {
                        GeneratedSample::new(&i.name, source, "", j as u64, img.clone())
                    })
                })
                .collect();
            let out = score_samples(&model, held);
            if let Some(e) = out.errors.into_iter().next() {
                return Err(e.error);
            }
            let scores: Vec<f64> = out.scored.iter().map(|s| s.score).collect();
            calibrate_threshold(&scores, cfg.filter.keep_fraction)?
        }
    };
    let images: Vec<Image> = set.items.iter().map(|i| i.image.clone()).collect();
    let id = content_id(
        format!(
            "{}|{}|{}|{}|{}|{}",
            cfg.filter.kind,
            source,
            tau,
            cfg.filter.train_epochs,
            seed,
            images_id(&images)?
        )
        .as_bytes(),
    );
    Ok(SourceFilter { model, tau, id })
}

fn set_channels(set: &LabeledSet) -> usize {
    set.items.first().map_or(3, |i| i.image.shape().channels)
}

// ---------------------------------------------------------------------------
// Per-identity execution

/// Everything an identity job reads; shared across parallel jobs.
pub struct RunContext<'a> {
    pub cfg: &'a PipelineConfig,
    pub run_dir: PathBuf,
    pub base: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub template: &'a PromptTemplate,
    pub captioner: &'a CaptionerHandle,
    pub registry: &'a IirRegistry,
    pub filters: &'a BTreeMap<String, std::result::Result<SourceFilter, String>>,
    pub counters: &'a StageCounters,
}

pub struct IdentityOutcome {
    pub records: Vec<StageRecord>,
    pub report: Option<FilterReport>,
}

fn read_done(dir: &Path, stage: Stage) -> Option<(String, String)> {
    let text = fs::read_to_string(dir.join(format!("{stage}{DONE_SUFFIX}"))).ok()?;
    let mut input = None;
    let mut output = None;
    for line in text.lines() {
        match line.split_once('\t') {
            Some(("input", v)) => input = Some(v.to_string()),
            Some(("output", v)) => output = Some(v.to_string()),
            _ => {}
        }
    }
    Some((input?, output?))
}

fn write_done(dir: &Path, stage: Stage, input: &str, output: &str) -> Result<()> {
    let p = dir.join(format!("{stage}{DONE_SUFFIX}"));
    fs::write(&p, format!("input\t{input}\noutput\t{output}\n")).at(&p)
}

struct StageRunner<'a> {
    identity: &'a str,
    dir: PathBuf,
    counters: &'a StageCounters,
    records: Vec<StageRecord>,
}

impl StageRunner<'_> {
    /// Restores a stage from the cache when its completion marker matches
    /// `input`, otherwise executes it. Returns the value and its output id.
    fn run<T>(
        &mut self,
        stage: Stage,
        input: &str,
        load: impl FnOnce(&Path, &str) -> Result<T>,
        exec: impl FnOnce(&Path) -> Result<(T, String)>,
    ) -> Option<(T, String)> {
        let start = Instant::now();
        let cached = read_done(&self.dir, stage)
            .filter(|(i, _)| i == input)
            .and_then(|(_, out)| load(&self.dir, &out).ok().map(|v| (v, out)));
        let hit = cached.is_some();
        let result = match cached {
            Some(v) => Ok(v),
            None => {
                self.counters.bump(stage);
                let _ = fs::remove_file(self.dir.join(format!("{stage}{DONE_SUFFIX}")));
                exec(&self.dir).and_then(|(v, out)| {
                    write_done(&self.dir, stage, input, &out)?;
                    Ok((v, out))
                })
            }
        };
        let (status, output_id, error) = match &result {
            Ok((_, out)) => (StageStatus::Succeeded, Some(out.clone()), None),
            Err(e) => (StageStatus::Failed, None, Some(e.to_string())),
        };
        self.records.push(StageRecord {
            identity: self.identity.to_string(),
            stage,
            status,
            cached: hit,
            duration: start.elapsed(),
            output_id,
            error,
        });
        result.ok()
    }
}

fn images_id(images: &[Image]) -> Result<String> {
    let mut bytes = Vec::new();
    for img in images {
        bytes.extend(img.encode_pfm()?);
    }
    Ok(content_id(&bytes))
}

fn key(parts: &[&dyn std::fmt::Display]) -> String {
    let s: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
    content_id(s.join("|").as_bytes())
}

/// Runs caption → iir → reference → finetune → sample → filter for one
/// identity, caching each stage under `run_dir/<identity>/`.
pub fn run_identity(input: &IdentityInput, index: usize, ctx: &RunContext<'_>) -> IdentityOutcome {
    let cfg = ctx.cfg;
    let seed = derive_seed(cfg.run.seed, index as u64);
    let dir = ctx.run_dir.join(&input.name);
    let mut runner = StageRunner {
        identity: &input.name,
        dir: dir.clone(),
        counters: ctx.counters,
        records: Vec::new(),
    };
    if let Err(e) = fs::create_dir_all(&dir).at(&dir) {
        runner.records.push(StageRecord {
            identity: input.name.clone(),
            stage: Stage::Caption,
            status: StageStatus::Failed,
            cached: false,
            duration: Default::default(),
            output_id: None,
            error: Some(e.to_string()),
        });
        return IdentityOutcome {
            records: runner.records,
            report: None,
        };
    }
    let report = identity_stages(input, seed, ctx, &mut runner);
    IdentityOutcome {
        records: runner.records,
        report,
    }
}

fn identity_stages(
    input: &IdentityInput,
    seed: u64,
    ctx: &RunContext<'_>,
    runner: &mut StageRunner<'_>,
) -> Option<FilterReport> {
    let cfg = ctx.cfg;
    let x = &cfg.diffusion;

    // caption
    let seq_id = images_id(&input.sequence).unwrap_or_default();
    let caption_in = key(&[&seq_id, &ctx.captioner.name, &format!("{:?}", ctx.captioner.attribute_focus)]);
    let (caption, caption_id) = runner.run(
        Stage::Caption,
        &caption_in,
        |d, out| {
            let c = fs::read_to_string(d.join("caption.txt")).at(d)?;
            (content_id(c.as_bytes()) == out)
                .then_some(c)
                .ok_or_else(|| Error::Integrity("caption changed".into()))
        },
        |d| {
            let c = caption_sequence(&input.sequence, ctx.captioner)?;
            let p = d.join("caption.txt");
            fs::write(&p, &c).at(&p)?;
            let id = content_id(c.as_bytes());
            Ok((c, id))
        },
    )?;

    // iir
    let iir_seed = derive_seed(seed, 0);
    let (bundle, iir_id) = runner.run(
        Stage::Iir,
        &key(&[&caption_id, &iir_seed]),
        |d, out| -> Result<PromptBundle> {
            let tok = fs::read_to_string(d.join("iir.txt")).at(d)?;
            if content_id(tok.as_bytes()) != out {
                return Err(Error::Integrity("token changed".into()));
            }
            ctx.registry.restore(&input.name, &tok)?;
            build_prompts(&caption, &tok, ctx.template)
        },
        |d| {
            let tok = ctx.registry.allocate(&input.name, iir_seed)?;
            let bundle = build_prompts(&caption, &tok, ctx.template)?;
            let p = d.join("iir.txt");
            fs::write(&p, &tok).at(&p)?;
            Ok((bundle, content_id(tok.as_bytes())))
        },
    )?;

    // reference
    let ref_seed = derive_seed(seed, 1);
    let ref_in = key(&[
        &iir_id,
        &ctx.base.model_id(),
        &x.reference_set_size,
        &ref_seed,
        &x.sample_steps,
        &x.lambda,
    ]);
    let (refs, ref_id) = runner.run(
        Stage::Reference,
        &ref_in,
        |d, out| {
            if out == "empty" {
                Ok(ReferenceSet::empty(&bundle, ctx.base))
            } else {
                load_reference_set(&d.join("reference"), out)
            }
        },
        |d| {
            if x.backend != TOY_BACKEND {
                return Err(Error::Backend {
                    name: x.backend.clone(),
                    message: "no adapter registered for this backend".into(),
                });
            }
            if x.lambda == 0.0 {
                return Ok((ReferenceSet::empty(&bundle, ctx.base), "empty".to_string()));
            }
            let set = build_reference_set(ctx.base, &bundle, x.reference_set_size, ref_seed, x.sample_steps, ctx.schedule)?;
            let id = cache_reference_set(&set, &d.join("reference"))?;
            Ok((set, id))
        },
    )?;

    // finetune
    let ft = FineTuneConfig {
        steps: x.fine_tune_steps,
        learning_rate: x.learning_rate,
        seed: derive_seed(seed, 2),
        batch_size: x.batch_size,
    };
    let ft_in = key(&[&ref_id, &iir_id, &seq_id, &ft.steps, &ft.learning_rate, &ft.seed, &ft.batch_size]);
    let (model, model_id) = runner.run(
        Stage::Finetune,
        &ft_in,
        |d, out| {
            let m = Denoiser::from_checkpoint(&Checkpoint::load(&d.join("finetune.ck"))?)?;
            (m.model_id() == out)
                .then_some(m)
                .ok_or_else(|| Error::Integrity("fine-tuned model changed".into()))
        },
        |d| {
            let out = fine_tune(
                ctx.base.clone(),
                &input.sequence,
                &bundle,
                &refs,
                &ft,
                &LossConfig::with_lambda(x.lambda),
                ctx.schedule,
            )?;
            out.model.to_checkpoint().save(&d.join("finetune.ck"))?;
            let id = out.model.model_id();
            Ok((out.model, id))
        },
    )?;

    // sample
    let n = cfg.generation.samples_per_identity;
    let sample_seed = derive_seed(seed, 3);
    let (samples, samples_id) = runner.run(
        Stage::Sample,
        &key(&[&model_id, &n, &sample_seed, &x.sample_steps]),
        |d, out| {
            let imgs = (0..n)
                .map(|i| Image::load(&d.join("samples").join(format!("s{i:05}.pfm"))))
                .collect::<Result<Vec<_>>>()?;
            (images_id(&imgs)? == out)
                .then_some(imgs)
                .ok_or_else(|| Error::Integrity("samples changed".into()))
        },
        |d| {
            let cond = embed_prompt(&bundle.enhanced_prompt, model.config().cond_dim);
            let imgs = (0..n)
                .into_par_iter()
                .map(|i| sample(&model, &cond, derive_seed(sample_seed, i as u64), x.sample_steps, ctx.schedule))
                .collect::<Result<Vec<_>>>()?;
            let sd = d.join("samples");
            fs::create_dir_all(&sd).at(&sd)?;
            for (i, img) in imgs.iter().enumerate() {
                let p = sd.join(format!("s{i:05}.pfm"));
                fs::write(&p, img.encode_pfm()?).at(&p)?;
            }
            let id = images_id(&imgs)?;
            Ok((imgs, id))
        },
    )?;
    let generated: Vec<GeneratedSample> = samples
        .into_iter()
        .enumerate()
        .map(|(i, image)| {
            let mut s = GeneratedSample::new(
                &input.name,
                &input.source,
                &bundle.enhanced_prompt,
                derive_seed(sample_seed, i as u64),
                image,
            );
            s.sample_id = format!("{}_{i:05}", input.name);
            s
        })
        .collect();

    // filter
    let filter = ctx.filters.get(&input.source);
    let filter_id = match filter {
        Some(Ok(f)) => f.id.clone(),
        _ => "unavailable".into(),
    };
    let (report, _) = runner.run(
        Stage::Filter,
        &key(&[&samples_id, &filter_id]),
        |d, out| {
            let text = fs::read_to_string(d.join("filter.txt")).at(d)?;
            if content_id(text.as_bytes()) != out {
                return Err(Error::Integrity("filter output changed".into()));
            }
            parse_filter_output(&text, generated.clone())
        },
        |d| {
            let f = match filter {
                Some(Ok(f)) => f,
                Some(Err(e)) => return Err(Error::invalid(format!("filter for `{}`: {e}", input.source))),
                None => return Err(Error::NotFound(format!("no filter for source `{}`", input.source))),
            };
            let out = score_samples(&f.model, generated.clone());
            if !out.errors.is_empty() {
                let msgs: Vec<String> = out.errors.iter().map(|e| format!("{}: {}", e.sample_id, e.error)).collect();
                return Err(Error::invalid(msgs.join("; ")));
            }
            let text = format_filter_output(f.model.kind, f.tau, &out.scored);
            let p = d.join("filter.txt");
            fs::write(&p, &text).at(&p)?;
            let report = apply_threshold(out.scored, f.tau)?;
            Ok((report, content_id(text.as_bytes())))
        },
    )?;
    Some(report)
}

fn format_filter_output(kind: FilterKind, tau: f64, scored: &[ScoredSample]) -> String {
    let mut s = format!("kind\t{kind}\ntau\t{tau}\n");
    for x in scored {
        s.push_str(&format!("{}\t{}\n", x.sample.sample_id, x.score));
    }
    s
}

fn parse_filter_output(text: &str, samples: Vec<GeneratedSample>) -> Result<FilterReport> {
    let bad = || Error::Integrity("malformed filter output".into());
    let mut lines = text.lines();
    let kind: FilterKind = lines
        .next()
        .and_then(|l| l.strip_prefix("kind\t"))
        .ok_or_else(bad)?
        .parse()?;
    let tau: f64 = lines
        .next()
        .and_then(|l| l.strip_prefix("tau\t"))
        .and_then(|v| v.parse().ok())
        .ok_or_else(bad)?;
    let mut scores = BTreeMap::new();
    for l in lines {
        let (id, v) = l.split_once('\t').ok_or_else(bad)?;
        scores.insert(id.to_string(), v.parse::<f64>().map_err(|_| bad())?);
    }
    if scores.len() != samples.len() {
        return Err(bad());
    }
    let scored = samples
        .into_iter()
        .map(|s| {
            let score = *scores.get(&s.sample_id).ok_or_else(bad)?;
            Ok(ScoredSample { sample: s, kind, score })
        })
        .collect::<Result<Vec<_>>>()?;
    apply_threshold(scored, tau)
}

// ---------------------------------------------------------------------------
// Whole run

pub struct PipelineOutcome {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub stats: StatsReport,
    pub cdf: Option<DistributionCurve>,
    pub ledger: RunLedger,
    pub executions: BTreeMap<Stage, usize>,
    pub base_model_trainings: usize,
    pub iir_tokens: BTreeMap<String, String>,
    pub thresholds: BTreeMap<String, f64>,
    /// Identities that failed, with the failing stage's error.
    pub failed: Vec<(String, String)>,
}

impl PipelineOutcome {
    pub fn success(&self) -> bool {
        self.failed.is_empty()
    }
}

pub fn base_model_config(cfg: &PipelineConfig) -> BaseModelConfig {
    BaseModelConfig {
        steps: cfg.diffusion.base_steps,
        corpus_identities: cfg.diffusion.base_identities,
        ..BaseModelConfig::default()
    }
}

/// Trains the base model or restores it from `cache_dir/base/`.
pub fn load_or_train_base(
    cfg: &PipelineConfig,
    schedule: &NoiseSchedule,
    template: &PromptTemplate,
    counters: &StageCounters,
) -> Result<Denoiser> {
    let bcfg = base_model_config(cfg);
    let focus = format!("{:?}", CaptionerHandle::stub().attribute_focus);
    let id = key(&[&format!("{bcfg:?}"), &focus, &schedule.kind(), &schedule.timesteps(), &template.as_str()]);
    let path = cfg.output.cache_dir.join("base").join(format!("{id}.ck"));
    if let Ok(m) = Checkpoint::load(&path).and_then(|c| Denoiser::from_checkpoint(&c)) {
        return Ok(m);
    }
    counters.base_model.fetch_add(1, Ordering::SeqCst);
    let model = train_base_model(&bcfg, schedule, template)?;
    model.to_checkpoint().save(&path)?;
    Ok(model)
}

pub fn make_captioner(cfg: &PipelineConfig) -> CaptionerHandle {
    if cfg.caption.captioner == crate::prompt::STUB_CAPTIONER {
        CaptionerHandle::stub()
    } else {
        CaptionerHandle::external(cfg.caption.captioner.clone(), None)
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let inputs = gather_identities(cfg, crate::diffusion::DenoiserConfig::default().shape)?;
    run_pipeline_with(cfg, &inputs, &make_captioner(cfg), &StageCounters::default())
}

/// Runs every identity in parallel, then assembles, reports and writes
/// `dataset/manifest.tsv`, `stats.txt`, `cdf.txt` and `ledger.tsv` under
/// the output directory. Identity failures are recorded, not propagated.
pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    inputs: &[IdentityInput],
    captioner: &CaptionerHandle,
    counters: &StageCounters,
) -> Result<PipelineOutcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg, inputs, captioner, counters))
}

fn run_inner(
    cfg: &PipelineConfig,
    inputs: &[IdentityInput],
    captioner: &CaptionerHandle,
    counters: &StageCounters,
) -> Result<PipelineOutcome> {
    let template = PromptTemplate::parse(&cfg.caption.template)?;
    let schedule = make_schedule(cfg.diffusion.timesteps, cfg.diffusion.schedule)?;
    let candidates = match &cfg.caption.iir_candidates {
        Some(p) => load_iir_candidates(p)?,
        None => default_iir_candidates(),
    };
    let registry = IirRegistry::new(default_vocabulary(), candidates);
    let base = load_or_train_base(cfg, &schedule, &template, counters)?;
    let run_dir = cfg.output.cache_dir.join(cfg.content_hash());

    // Tokens are handed out in identity order so parallel scheduling
    // cannot change who gets which token.
    for (i, input) in inputs.iter().enumerate() {
        registry.allocate(&input.name, derive_seed(derive_seed(cfg.run.seed, i as u64), 0))?;
    }

    let mut by_source: BTreeMap<&str, Vec<&IdentityInput>> = BTreeMap::new();
    for i in inputs {
        by_source.entry(&i.source).or_default().push(i);
    }
    let filters: BTreeMap<String, std::result::Result<SourceFilter, String>> = by_source
        .par_iter()
        .map(|(src, ids)| {
            (
                src.to_string(),
                build_source_filter(cfg, src, ids).map_err(|e| e.to_string()),
            )
        })
        .collect();

    let ctx = RunContext {
        cfg,
        run_dir,
        base: &base,
        schedule: &schedule,
        template: &template,
        captioner,
        registry: &registry,
        filters: &filters,
        counters,
    };
    let outcomes: Vec<IdentityOutcome> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| run_identity(input, i, &ctx))
        .collect();

    let mut ledger = RunLedger::default();
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for (input, o) in inputs.iter().zip(outcomes) {
        if let Some(r) = o.records.iter().find(|r| r.status == StageStatus::Failed) {
            failed.push((input.name.clone(), format!("{}: {}", r.stage, r.error.clone().unwrap_or_default())));
        }
        ledger.records.extend(o.records);
        reports.extend(o.report);
    }

    let out = &cfg.output.dir;
    let dataset_dir = out.join("dataset");
    let manifest = assemble(&reports, &dataset_dir, cfg.output.crop)?;
    let stats = stats_report(&manifest, &StatsOptions::default())?;
    let cdf = if manifest.is_empty() {
        None
    } else {
        let max = manifest.identity_counts().values().copied().max().unwrap_or(0) as u64;
        let xs: Vec<u64> = (1..=max + 1).collect();
        Some(compute_identity_cdf(&manifest, &xs)?)
    };
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).at(&p)
    };
    write("stats.txt", stats.to_text())?;
    write("cdf.txt", cdf.as_ref().map(|c| c.to_text()).unwrap_or_default())?;
    write("ledger.tsv", ledger.to_text())?;
    write("config.toml", cfg.to_toml())?;

    Ok(PipelineOutcome {
        manifest_path: dataset_dir.join(crate::dataset::MANIFEST_FILE),
        manifest,
        stats,
        cdf,
        ledger,
        executions: counters.snapshot(),
        base_model_trainings: counters.base_model(),
        iir_tokens: registry.assignments(),
        thresholds: filters
            .iter()
            .filter_map(|(k, v)| v.as_ref().ok().map(|f| (k.clone(), f.tau)))
            .collect(),
        failed,
    })
}
