//! Confidence filtering of generated samples. Three scorers map a sample to
//! a confidence in `[0, 1]`:
//!
//! * `clip`: text-image agreement `(1 + cos) / 2` under a joint embedder;
//! * `cctf`: an identity classifier's probability on the claimed identity;
//! * `reid_ctf`: `(1 + cos) / 2` between the sample's re-identification
//!   embedding and its identity's centroid in the source gallery.
//!
//! Scored samples are then split at a threshold `tau`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{Image, ImageShape};
use crate::nn::{cosine, init_weights, l2_normalize, one_hot, Adam, Mlp};
use crate::prompt::embed_prompt;
use crate::rng::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FilterKind {
    Clip,
    Cctf,
    ReidCtf,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::Clip => "clip",
            FilterKind::Cctf => "cctf",
            FilterKind::ReidCtf => "reid_ctf",
        })
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(FilterKind::Clip),
            "cctf" => Ok(FilterKind::Cctf),
            "reid_ctf" => Ok(FilterKind::ReidCtf),
            other => Err(Error::invalid(format!("unknown filter kind `{other}`"))),
        }
    }
}

/// A synthesized image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample_id: String,
    pub identity: String,
    pub source: String,
    pub camera: Option<u32>,
    pub prompt: String,
    pub seed: u64,
    pub image: Image,
    /// Pre-computed re-identification embedding; bypasses the embedder.
    pub embedding: Option<Vec<f64>>,
}

impl GeneratedSample {
    pub fn new(identity: &str, source: &str, prompt: &str, seed: u64, image: Image) -> Self {
        Self {
            sample_id: format!("{identity}_{seed:016x}"),
            identity: identity.to_string(),
            source: source.to_string(),
            camera: None,
            prompt: prompt.to_string(),
            seed,
            image,
            embedding: None,
        }
    }

    /// A payload-free sample carrying only an injected embedding.
    pub fn injected(sample_id: &str, identity: &str, embedding: Vec<f64>) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            identity: identity.to_string(),
            source: String::new(),
            camera: None,
            prompt: String::new(),
            seed: 0,
            image: Image::zeros(ImageShape::new(1, 1, 1)),
            embedding: Some(embedding),
        }
    }
}

/// A real source image with its identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub identity: String,
    pub camera: Option<u32>,
}

/// Labelled source images from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub source: String,
    pub items: Vec<LabeledImage>,
}

impl LabeledSet {
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.items.iter().map(|i| i.identity.clone()).collect();
        l.sort();
        l.dedup();
        l
    }
}

/// Spatial grid the toy feature map pools every image to.
pub const FEATURE_GRID: (usize, usize) = (8, 4);

/// Fixed toy feature map: area-pool to a coarse colour grid.
pub fn image_features(image: &Image) -> Vec<f64> {
    let s = image.shape();
    let (h, w) = (FEATURE_GRID.0.min(s.height), FEATURE_GRID.1.min(s.width));
    image.resize(h, w).map(|i| i.to_f64()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Joint text-image embedding (toy CLIP stand-in)

pub trait JointEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn embed_image(&self, image: &Image) -> Vec<f64>;
}

/// Text through the prompt hash, images through a fixed random projection
/// of pooled features. Both land in the same `dim`-wide space.
pub struct ToyJointEmbedder {
    dim: usize,
    projection: Vec<f64>,
    input: usize,
}

impl ToyJointEmbedder {
    pub fn new(dim: usize, channels: usize, seed: u64) -> Self {
        let input = channels * FEATURE_GRID.0 * FEATURE_GRID.1;
        Self {
            dim,
            projection: init_weights(&mut rng(seed), dim * input, input, 1.0),
            input,
        }
    }
}

impl JointEmbedder for ToyJointEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        embed_prompt(text, self.dim)
    }

    fn embed_image(&self, image: &Image) -> Vec<f64> {
        let f = image_features(image);
        let mut f = f;
        f.resize(self.input, 0.0);
        let mut out = vec![0.0; self.dim];
        crate::nn::affine(&self.projection, &vec![0.0; self.dim], &f, &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Trained scorers

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.03,
            hidden: 32,
            seed: 0,
        }
    }
}

/// Identity classifier over the toy feature map.
#[derive(Debug, Clone)]
pub struct IdClassifier {
    labels: Vec<String>,
    net: Mlp,
}

impl IdClassifier {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn label_index(&self, identity: &str) -> Result<usize> {
        self.labels
            .binary_search_by(|l| l.as_str().cmp(identity))
            .map_err(|_| Error::UnknownLabel(identity.to_string()))
    }

    /// Probability over all known identities, in `labels()` order.
    pub fn probabilities(&self, image: &Image) -> Vec<f64> {
        self.net.probabilities(&image_features(image))
    }

    pub fn confidence(&self, image: &Image, identity: &str) -> Result<f64> {
        let k = self.label_index(identity)?;
        Ok(self.probabilities(image)[k])
    }

    pub fn embed(&self, image: &Image) -> Vec<f64> {
        self.net.features(&image_features(image))
    }
}

fn fit(source: &LabeledSet, hidden: usize, cfg: &TrainConfig) -> Result<IdClassifier> {
    let labels = source.labels();
    if labels.len() < 2 {
        return Err(Error::invalid(format!(
            "identity models need at least 2 identities, `{}` has {}",
            source.source,
            labels.len()
        )));
    }
    if cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("training needs epochs >= 1 and a positive learning rate"));
    }
    let xs: Vec<Vec<f64>> = source.items.iter().map(|i| image_features(&i.image)).collect();
    let width = xs[0].len();
    if xs.iter().any(|x| x.len() != width) {
        return Err(Error::invalid("source images have mixed shapes"));
    }
    let ts: Vec<Vec<f64>> = source
        .items
        .iter()
        .map(|i| one_hot(labels.len(), labels.binary_search(&i.identity).unwrap()))
        .collect();
    let mut net = Mlp::new(width, hidden, labels.len(), &mut rng(cfg.seed));
    let mut opt = Adam::new(net.params.len());
    for _ in 0..cfg.epochs {
        let (_, g) = net.loss_and_grad(&xs, &ts);
        opt.step(&mut net.params, &g, cfg.learning_rate);
    }
    Ok(IdClassifier { labels, net })
}

/// Embedding gallery: one unit-norm centroid per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGallery {
    pub centroids: BTreeMap<String, Vec<f64>>,
    pub dim: usize,
    pub source: String,
}

impl EmbeddingGallery {
    /// Centroid of an identity = normalised mean of its embeddings.
    pub fn from_embeddings<'a>(
        source: &str,
        records: impl IntoIterator<Item = (&'a str, &'a [f64])>,
    ) -> Result<Self> {
        let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut dim = None;
        for (id, emb) in records {
            if *dim.get_or_insert(emb.len()) != emb.len() {
                return Err(Error::invalid("gallery embeddings have mixed widths"));
            }
            let acc = sums.entry(id.to_string()).or_insert_with(|| vec![0.0; emb.len()]);
            acc.iter_mut().zip(emb).for_each(|(a, e)| *a += e);
        }
        let dim = dim.ok_or_else(|| Error::invalid("gallery needs at least one embedding"))?;
        for (id, c) in sums.iter_mut() {
            if l2_normalize(c) == 0.0 {
                return Err(Error::invalid(format!("identity `{id}` has a zero centroid")));
            }
        }
        Ok(Self {
            centroids: sums,
            dim,
            source: source.to_string(),
        })
    }

    pub fn score(&self, identity: &str, embedding: &[f64]) -> Result<f64> {
        let c = self
            .centroids
            .get(identity)
            .ok_or_else(|| Error::UnknownLabel(identity.to_string()))?;
        if embedding.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding width {} does not match gallery width {}",
                embedding.len(),
                self.dim
            )));
        }
        Ok(unit_score(cosine(embedding, c)))
    }
}

/// `(1 + cos) / 2`, clamped into `[0, 1]`.
pub fn unit_score(cos: f64) -> f64 {
    ((1.0 + cos) / 2.0).clamp(0.0, 1.0)
}

enum Scorer {
    Clip {
        text: Vec<f64>,
        embedder: Arc<dyn JointEmbedder>,
    },
    Cctf(IdClassifier),
    Reid {
        embedder: Option<IdClassifier>,
        gallery: EmbeddingGallery,
    },
}

pub struct FilterModel {
    pub kind: FilterKind,
    /// Source datasets the scorer was fitted on (empty for `clip`).
    pub provenance: Vec<String>,
    scorer: Scorer,
}

impl fmt::Debug for FilterModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterModel")
            .field("kind", &self.kind)
            .field("provenance", &self.provenance)
            .finish_non_exhaustive()
    }
}

impl FilterModel {
    pub fn score(&self, sample: &GeneratedSample) -> Result<f64> {
        match &self.scorer {
            Scorer::Clip { text, embedder } => {
                Ok(unit_score(cosine(text, &embedder.embed_image(&sample.image))))
            }
            Scorer::Cctf(c) => c.confidence(&sample.image, &sample.identity),
            Scorer::Reid { embedder, gallery } => {
                let emb = match (&sample.embedding, embedder) {
                    (Some(e), _) => e.clone(),
                    (None, Some(m)) => m.embed(&sample.image),
                    (None, None) => {
                        return Err(Error::invalid(format!(
                            "sample `{}` has no embedding and the filter has no embedder",
                            sample.sample_id
                        )))
                    }
                };
                gallery.score(&sample.identity, &emb)
            }
        }
    }

    /// The trained re-identification embedding of an image, if any.
    pub fn embed(&self, image: &Image) -> Option<Vec<f64>> {
        match &self.scorer {
            Scorer::Reid {
                embedder: Some(m), ..
            } => Some(m.embed(image)),
            _ => None,
        }
    }

    pub fn gallery(&self) -> Option<&EmbeddingGallery> {
        match &self.scorer {
            Scorer::Reid { gallery, .. } => Some(gallery),
            _ => None,
        }
    }

    /// Re-ID CTF over a given gallery, for samples with injected embeddings.
    pub fn reid_from_gallery(gallery: EmbeddingGallery) -> Self {
        Self {
            kind: FilterKind::ReidCtf,
            provenance: vec![gallery.source.clone()],
            scorer: Scorer::Reid {
                embedder: None,
                gallery,
            },
        }
    }
}

pub fn make_clip_scorer(class_text: &str, embedder: Arc<dyn JointEmbedder>) -> Result<FilterModel> {
    if class_text.trim().is_empty() {
        return Err(Error::invalid("class text is empty"));
    }
    Ok(FilterModel {
        kind: FilterKind::Clip,
        provenance: Vec::new(),
        scorer: Scorer::Clip {
            text: embedder.embed_text(class_text),
            embedder,
        },
    })
}

/// Multinomial logistic regression on the toy feature map.
pub fn train_id_classifier(source: &LabeledSet, cfg: &TrainConfig) -> Result<FilterModel> {
    let clf = fit(source, 0, cfg)?;
    Ok(FilterModel {
        kind: FilterKind::Cctf,
        provenance: vec![source.source.clone()],
        scorer: Scorer::Cctf(clf),
    })
}

/// Classification-trained shallow network; its hidden layer is the
/// embedding and the gallery holds per-identity centroids of source images.
pub fn train_reid_embedder(source: &LabeledSet, cfg: &TrainConfig) -> Result<(FilterModel, EmbeddingGallery)> {
    let net = fit(source, cfg.hidden.max(1), cfg)?;
    let embs: Vec<Vec<f64>> = source.items.iter().map(|i| net.embed(&i.image)).collect();
    let gallery = EmbeddingGallery::from_embeddings(
        &source.source,
        source
            .items
            .iter()
            .zip(&embs)
            .map(|(i, e)| (i.identity.as_str(), e.as_slice())),
    )?;
    let model = FilterModel {
        kind: FilterKind::ReidCtf,
        provenance: vec![source.source.clone()],
        scorer: Scorer::Reid {
            embedder: Some(net),
            gallery: gallery.clone(),
        },
    };
    Ok((model, gallery))
}

// ---------------------------------------------------------------------------
// Scoring and thresholds

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample: GeneratedSample,
    pub kind: FilterKind,
    pub score: f64,
}

#[derive(Debug)]
pub struct SampleError {
    pub index: usize,
    pub sample_id: String,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct ScoreOutcome {
    /// Successfully scored samples in input order.
    pub scored: Vec<ScoredSample>,
    pub errors: Vec<SampleError>,
}

pub fn score_samples(model: &FilterModel, samples: Vec<GeneratedSample>) -> ScoreOutcome {
    let results: Vec<Result<f64>> = samples.par_iter().map(|s| model.score(s)).collect();
    let mut out = ScoreOutcome::default();
    for (index, (sample, res)) in samples.into_iter().zip(results).enumerate() {
        match res {
            Ok(score) => out.scored.push(ScoredSample {
                sample,
                kind: model.kind,
                score,
            }),
            Err(error) => out.errors.push(SampleError {
                index,
                sample_id: sample.sample_id,
                error,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    pub threshold: f64,
    pub filter_kind: Option<FilterKind>,
    /// Samples with `score >= threshold`, in input order.
    pub kept: Vec<ScoredSample>,
    /// Samples with `score < threshold`, in input order.
    pub discarded: Vec<ScoredSample>,
}

pub fn apply_threshold(scored: Vec<ScoredSample>, tau: f64) -> Result<FilterReport> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0, 1]")));
    }
    let kind = scored.first().map(|s| s.kind);
    if scored.iter().any(|s| Some(s.kind) != kind) {
        return Err(Error::invalid("cannot threshold scores from different filter kinds"));
    }
    let (kept, discarded) = scored.into_iter().partition(|s| s.score >= tau);
    Ok(FilterReport {
        threshold: tau,
        filter_kind: kind,
        kept,
        discarded,
    })
}

/// The empirical `(1 - keep)` quantile of real-image scores, using the
/// inverse empirical CDF: the smallest score `s` with `F(s) >= 1 - keep`.
pub fn calibrate_threshold(scores: &[f64], target_keep_fraction: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("calibration needs at least one score"));
    }
    if !(target_keep_fraction > 0.0 && target_keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep fraction {target_keep_fraction} outside (0, 1]"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = 1.0 - target_keep_fraction;
    let rank = (q * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

// ---------------------------------------------------------------------------
// Embedding injection format

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub identity: String,
    pub embedding: Vec<f64>,
}

/// One record per line: `sample_id identity v1 v2 ... vd`, whitespace
/// separated. Blank lines and `#` comments are skipped.
pub fn parse_embedding_records(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(sample_id), Some(identity)) = (it.next(), it.next()) else {
            return Err(Error::invalid(format!("line {}: missing id columns", n + 1)));
        };
        let embedding = it
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid(format!("line {}: non-numeric embedding", n + 1)))?;
        if embedding.is_empty() {
            return Err(Error::invalid(format!("line {}: empty embedding", n + 1)));
        }
        if let Some(first) = out.first() {
            if first.embedding.len() != embedding.len() {
                return Err(Error::invalid(format!("line {}: embedding width differs", n + 1)));
            }
        }
        out.push(EmbeddingRecord {
            sample_id: sample_id.to_string(),
            identity: identity.to_string(),
            embedding,
        });
    }
    Ok(out)
}

pub fn format_embedding_records(records: &[EmbeddingRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.sample_id);
        s.push(' ');
        s.push_str(&r.identity);
        for v in &r.embedding {
            s.push(' ');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}
