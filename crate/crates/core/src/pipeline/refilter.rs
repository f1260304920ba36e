//! Re-scoring and thresholding an existing manifest.

use std::path::Path;
use std::sync::Arc;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::filter::{
    apply_threshold, calibrate_threshold, make_clip_scorer, score_samples, train_id_classifier,
    train_reid_embedder, FilterKind, FilterModel, GeneratedSample, LabeledImage, LabeledSet, ToyJointEmbedder,
    TrainConfig,
};
use crate::pretrain::{load_examples, Example};
use crate::prompt::{PromptTemplate, CLASS_NOUN, DEFAULT_TEMPLATE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    /// Keep this share of the reference images.
    Calibrate(f64),
}

#[derive(Debug)]
pub struct RefilterOutcome {
    pub manifest: DatasetManifest,
    pub threshold: f64,
    pub kept: usize,
    pub discarded: usize,
    /// Records that could not be scored, with the reason.
    pub errors: Vec<(String, String)>,
}

fn samples(examples: &[Example], manifest: &DatasetManifest) -> Vec<GeneratedSample> {
    examples
        .iter()
        .zip(&manifest.records)
        .map(|(e, r)| {
            let mut s = GeneratedSample::new(&e.identity, &r.source, "", 0, e.image.clone());
            s.sample_id = r.path.clone();
            s.camera = r.camera;
            s
        })
        .collect()
}

fn fit(kind: FilterKind, reference: &[Example], cfg: &TrainConfig) -> Result<FilterModel> {
    let set = LabeledSet {
        source: "reference".into(),
        items: reference
            .iter()
            .map(|e| LabeledImage {
                image: e.image.clone(),
                identity: e.identity.clone(),
                camera: e.camera,
            })
            .collect(),
    };
    match kind {
        FilterKind::ReidCtf => Ok(train_reid_embedder(&set, cfg)?.0),
        FilterKind::Cctf => train_id_classifier(&set, cfg),
        FilterKind::Clip => {
            let channels = reference.first().map_or(3, |e| e.image.shape().channels);
            let text = PromptTemplate::parse(DEFAULT_TEMPLATE)?.fill(CLASS_NOUN, "");
            make_clip_scorer(&text, Arc::new(ToyJointEmbedder::new(32, channels, cfg.seed)))
        }
    }
}

/// Scores every record of `manifest` with a `kind` filter fitted on the
/// train split of `reference` (the manifest itself when absent) and keeps
/// the records at or above the threshold. Kept records carry the new kind
/// and score; paths stay relative to `dir`.
pub fn refilter_manifest(
    manifest: &DatasetManifest,
    dir: &Path,
    kind: FilterKind,
    reference: Option<(&DatasetManifest, &Path)>,
    threshold: Threshold,
    cfg: &TrainConfig,
) -> Result<RefilterOutcome> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    match threshold {
        Threshold::Fixed(t) if !(0.0..=1.0).contains(&t) => {
            return Err(Error::invalid(format!("threshold {t} outside [0, 1]")))
        }
        Threshold::Calibrate(k) if !(k > 0.0 && k <= 1.0) => {
            return Err(Error::invalid(format!("keep fraction {k} outside (0, 1]")))
        }
        _ => {}
    }
    let examples = load_examples(manifest, dir)?;
    let reference: Vec<Example> = match reference {
        Some((m, d)) => load_examples(m, d)?,
        None => examples.clone(),
    }
    .into_iter()
    .filter(|e| e.split == Split::Train)
    .collect();
    if reference.is_empty() {
        return Err(Error::invalid("reference has no train-split images"));
    }
    let model = fit(kind, &reference, cfg)?;

    let tau = match threshold {
        Threshold::Fixed(t) => t,
        Threshold::Calibrate(keep) => {
            let held = reference
                .iter()
                .map(|e| GeneratedSample::new(&e.identity, "reference", "", 0, e.image.clone()))
                .collect();
            let out = score_samples(&model, held);
            let scores: Vec<f64> = out.scored.iter().map(|s| s.score).collect();
            calibrate_threshold(&scores, keep)?
        }
    };

    let scored = score_samples(&model, samples(&examples, manifest));
    let errors = scored
        .errors
        .iter()
        .map(|e| (e.sample_id.clone(), e.error.to_string()))
        .collect();
    let report = apply_threshold(scored.scored, tau)?;
    let keep: std::collections::HashMap<&str, f64> =
        report.kept.iter().map(|s| (s.sample.sample_id.as_str(), s.score)).collect();
    let mut out = DatasetManifest::new(manifest.crop_size);
    for r in &manifest.records {
        if let Some(&score) = keep.get(r.path.as_str()) {
            let mut r = r.clone();
            r.filter_kind = Some(kind);
            r.score = score;
            out.records.push(r);
        }
    }
    out.sort_canonical();
    Ok(RefilterOutcome {
        manifest: out,
        threshold: tau,
        kept: report.kept.len(),
        discarded: report.discarded.len(),
        errors,
    })
}
