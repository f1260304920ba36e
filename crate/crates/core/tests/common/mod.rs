//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls the library code it checks.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffid_core::dataset::{DatasetManifest, ManifestRecord, Split};
use diffid_core::filter::FilterKind;
use diffid_core::pipeline::PipelineConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Retrieval

/// Brute-force mAP and CMC. Each gallery item's rank is counted directly:
/// items with a strictly higher similarity, plus equal ones at a lower
/// gallery index, come before it.
pub fn brute_retrieval(
    q_ids: &[(String, Option<u32>)],
    g_ids: &[(String, Option<u32>)],
    sim: &[Vec<f64>],
    cross_camera: bool,
    max_rank: usize,
) -> Option<(f64, Vec<f64>)> {
    let mut aps = Vec::new();
    let mut firsts = Vec::new();
    for (qi, (qid, qcam)) in q_ids.iter().enumerate() {
        let keep: Vec<usize> = (0..g_ids.len())
            .filter(|&g| {
                let (gid, gcam) = &g_ids[g];
                !(cross_camera && gid == qid && qcam.is_some() && qcam == gcam)
            })
            .collect();
        let row = &sim[qi];
        let rank_of = |g: usize| {
            1 + keep
                .iter()
                .filter(|&&o| row[o] > row[g] || (row[o] == row[g] && o < g))
                .count()
        };
        let mut pos: Vec<usize> = keep
            .iter()
            .filter(|&&g| g_ids[g].0 == *qid)
            .map(|&g| rank_of(g))
            .collect();
        if pos.is_empty() {
            continue;
        }
        pos.sort_unstable();
        let mut sum = 0.0;
        for (k, r) in pos.iter().enumerate() {
            sum += (k + 1) as f64 / *r as f64;
        }
        aps.push(sum / pos.len() as f64);
        firsts.push(pos[0]);
    }
    if aps.is_empty() {
        return None;
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let n = firsts.len() as f64;
    let cmc = (1..=max_rank)
        .map(|r| firsts.iter().filter(|&&f| f <= r).count() as f64 / n)
        .collect();
    Some((map, cmc))
}

pub struct RandomRetrieval {
    pub queries: Vec<(String, Option<u32>)>,
    pub gallery: Vec<(String, Option<u32>)>,
    pub sim: Vec<Vec<f64>>,
}

/// Coarse similarity levels so ties are common.
pub fn random_retrieval(seed: u64) -> RandomRetrieval {
    let mut r = rng(seed);
    let ids = r.random_range(2..=6);
    let cams = r.random_range(1..=3u32);
    let entry = |r: &mut ChaCha8Rng| {
        let cam = if r.random_bool(0.1) { None } else { Some(r.random_range(0..cams)) };
        (format!("p{}", r.random_range(0..ids)), cam)
    };
    let nq = r.random_range(1..=20);
    let ng = r.random_range(1..=50);
    let queries: Vec<_> = (0..nq).map(|_| entry(&mut r)).collect();
    let gallery: Vec<_> = (0..ng).map(|_| entry(&mut r)).collect();
    let sim = (0..nq)
        .map(|_| (0..ng).map(|_| r.random_range(0..8) as f64 / 4.0 - 1.0).collect())
        .collect();
    RandomRetrieval { queries, gallery, sim }
}

// ---------------------------------------------------------------------------
// Filtering

pub fn norm(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Kept sample ids under a centroid gallery, recomputed from scratch.
pub fn brute_reid_kept(
    sources: &[(String, Vec<f64>)],
    samples: &[(String, String, Vec<f64>)],
    tau: f64,
) -> BTreeSet<String> {
    let mut sums: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, e) in sources {
        let s = sums.entry(id).or_insert_with(|| vec![0.0; e.len()]);
        for (a, b) in s.iter_mut().zip(e) {
            *a += b;
        }
    }
    let centroids: BTreeMap<&str, Vec<f64>> = sums.into_iter().map(|(k, v)| (k, norm(&v))).collect();
    samples
        .iter()
        .filter(|(_, id, e)| {
            let c = &centroids[id.as_str()];
            let cos = norm(e).iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            ((1.0 + cos) / 2.0).clamp(0.0, 1.0) >= tau
        })
        .map(|(sid, _, _)| sid.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// Manifests

pub fn record(identity: &str, source: &str, camera: Option<u32>, n: usize) -> ManifestRecord {
    ManifestRecord {
        path: format!("{source}/{identity}/{identity}_{n:06}.ppm"),
        identity: identity.to_string(),
        source: source.to_string(),
        camera,
        filter_kind: Some(FilterKind::ReidCtf),
        score: 0.9,
        split: Split::Train,
    }
}

/// A manifest from explicit per-identity image counts.
pub fn manifest_from_counts(counts: &[usize]) -> DatasetManifest {
    let mut m = DatasetManifest::new((256, 128));
    for (i, &c) in counts.iter().enumerate() {
        let id = format!("id{i:05}");
        let src = ["market", "msmt", "cuhk", "airport"][i % 4];
        for n in 0..c {
            m.records.push(record(&id, src, Some((n % 6) as u32), n));
        }
    }
    m
}

pub fn random_manifest(seed: u64) -> DatasetManifest {
    let mut r = rng(seed);
    let ids = r.random_range(1..=40);
    let counts: Vec<usize> = (0..ids).map(|_| r.random_range(1..=60)).collect();
    let mut m = manifest_from_counts(&counts);
    m.records.shuffle(&mut r);
    m
}

/// Group-by recomputation of (images, identities, in range, above, per source).
pub struct BruteStats {
    pub images: usize,
    pub identities: usize,
    pub in_range: usize,
    pub above: usize,
    pub per_source: BTreeMap<String, (usize, usize)>,
    pub counts: Vec<usize>,
}

pub fn brute_stats(m: &DatasetManifest, range: (usize, usize), above: usize) -> BruteStats {
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    let mut src_imgs: BTreeMap<String, usize> = BTreeMap::new();
    let mut src_ids: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    for r in &m.records {
        *by_id.entry(&r.identity).or_default() += 1;
        *src_imgs.entry(r.source.clone()).or_default() += 1;
        src_ids.entry(r.source.clone()).or_default().insert(&r.identity);
    }
    let counts: Vec<usize> = by_id.values().copied().collect();
    BruteStats {
        images: m.records.len(),
        identities: by_id.len(),
        in_range: counts.iter().filter(|&&c| c >= range.0 && c <= range.1).count(),
        above: counts.iter().filter(|&&c| c > above).count(),
        per_source: src_imgs
            .into_iter()
            .map(|(k, v)| {
                let n = src_ids[&k].len();
                (k, (v, n))
            })
            .collect(),
        counts,
    }
}

/// Percentage of identities with fewer than `x` images.
pub fn brute_cdf_point(counts: &[usize], x: u64) -> f64 {
    100.0 * counts.iter().filter(|&&c| (c as u64) < x).count() as f64 / counts.len() as f64
}

pub const DIFF_PERSON_IMAGES: usize = 777_130;
pub const DIFF_PERSON_IDENTITIES: usize = 5_183;

/// Per-identity counts shaped like the published distribution: about 80% of
/// identities in [70, 210] and about 70% above 130, totalling exactly the
/// published image count.
pub fn long_tail_counts(seed: u64) -> Vec<usize> {
    let n = DIFF_PERSON_IDENTITIES;
    let low = n / 10;
    let high = n / 10;
    let over_130 = (0.70 * n as f64).round() as usize;
    let mid_high = over_130 - high;
    let mid_low = n - low - high - mid_high;
    let bands = [
        (low, 20usize, 69usize),
        (mid_low, 70, 130),
        (mid_high, 131, 210),
        (high, 211, 300),
    ];
    let mut r = rng(seed);
    let mut counts = Vec::with_capacity(n);
    let mut band_of = Vec::with_capacity(n);
    for (b, &(k, lo, hi)) in bands.iter().enumerate() {
        for _ in 0..k {
            counts.push(r.random_range(lo..=hi));
            band_of.push(b);
        }
    }
    let mut total: usize = counts.iter().sum();
    while total != DIFF_PERSON_IMAGES {
        let i = r.random_range(0..n);
        let (_, lo, hi) = bands[band_of[i]];
        if total > DIFF_PERSON_IMAGES && counts[i] > lo {
            counts[i] -= 1;
            total -= 1;
        } else if total < DIFF_PERSON_IMAGES && counts[i] < hi {
            counts[i] += 1;
            total += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Pipeline

/// A small toy run rooted at `dir`.
pub fn toy_config(dir: &Path, identities: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.run.seed = 11;
    cfg.sources.synthetic_identities = identities;
    cfg.diffusion.fine_tune_steps = 200;
    cfg.diffusion.reference_set_size = 24;
    cfg.generation.samples_per_identity = 24;
    cfg.output.dir = dir.join("out");
    cfg.output.cache_dir = dir.join("cache");
    cfg.output.crop = (32, 16);
    cfg
}

// ---------------------------------------------------------------------------
// Diffusion

use diffid_core::diffusion::{
    prior_preservation_loss, prior_preservation_loss_and_grad, Denoiser, DenoiserConfig, LossConfig, LossItem,
    NoiseSchedule,
};
use diffid_core::image::{Image, ImageShape};

/// A 41-parameter denoiser with two covariance modes.
pub fn grad_check_config() -> DenoiserConfig {
    DenoiserConfig {
        shape: ImageShape::new(1, 2, 3),
        cond_dim: 4,
        latent_dim: 2,
        modes: 2,
    }
}

pub struct LossFixture {
    pub images: Vec<Image>,
    pub conds: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub ts: Vec<usize>,
}

impl LossFixture {
    pub fn new(shape: ImageShape, cond_dim: usize, n: usize, timesteps: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let gauss = |r: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
            (0..k).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let images = (0..n)
            .map(|_| {
                let v: Vec<f32> = gauss(&mut r, shape.len()).into_iter().map(|x| x as f32).collect();
                Image::new(shape, v).unwrap()
            })
            .collect();
        let conds = (0..n).map(|_| gauss(&mut r, cond_dim)).collect();
        let noises = (0..n).map(|_| gauss(&mut r, shape.len())).collect();
        let ts = (0..n).map(|_| r.random_range(1..=timesteps)).collect();
        Self { images, conds, noises, ts }
    }

    pub fn items(&self) -> Vec<LossItem<'_>> {
        (0..self.images.len())
            .map(|i| LossItem {
                image: &self.images[i],
                condition: &self.conds[i],
                t: self.ts[i],
                noise: &self.noises[i],
            })
            .collect()
    }
}

/// Max relative error between the analytic gradient and central finite
/// differences, over every parameter.
pub fn gradient_check(
    model: &Denoiser,
    id: &LossFixture,
    reference: &LossFixture,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> f64 {
    let cfg = LossConfig::with_lambda(lambda);
    let (_, grad) =
        prior_preservation_loss_and_grad(model, &id.items(), &reference.items(), &cfg, schedule).unwrap();
    let loss_at = |p: Vec<f64>| {
        let m = Denoiser::from_params(model.config(), p).unwrap();
        prior_preservation_loss(&m, &id.items(), &reference.items(), &cfg, schedule)
            .unwrap()
            .total
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let mut up = model.params().to_vec();
        let mut down = up.clone();
        up[i] += h;
        down[i] -= h;
        let fd = (loss_at(up) - loss_at(down)) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

// ---------------------------------------------------------------------------
// Injected filter worlds

use diffid_core::filter::{GeneratedSample, ScoredSample};

pub struct InjectedWorld {
    pub sources: Vec<(String, Vec<f64>)>,
    /// (sample id, identity, embedding)
    pub samples: Vec<(String, String, Vec<f64>)>,
}

/// Source embeddings clustered per identity, samples scattered around them.
pub fn injected_world(seed: u64, max_samples: usize, max_ids: usize) -> InjectedWorld {
    let mut r = rng(seed);
    let dim = r.random_range(2..=8);
    let ids = r.random_range(1..=max_ids);
    let v = |r: &mut ChaCha8Rng, s: f64| -> Vec<f64> { (0..dim).map(|_| r.random_range(-s..s)).collect() };
    let centres: Vec<Vec<f64>> = (0..ids).map(|_| v(&mut r, 1.0)).collect();
    let mut sources = Vec::new();
    for (i, c) in centres.iter().enumerate() {
        for _ in 0..r.random_range(1..=4) {
            let e: Vec<f64> = c.iter().zip(v(&mut r, 0.3)).map(|(a, b)| a + b).collect();
            sources.push((format!("id{i}"), e));
        }
    }
    let n = r.random_range(1..=max_samples);
    let samples = (0..n)
        .map(|k| {
            let i = r.random_range(0..ids);
            let e: Vec<f64> = centres[i].iter().zip(v(&mut r, 1.0)).map(|(a, b)| a + b).collect();
            (format!("s{k:04}"), format!("id{i}"), e)
        })
        .collect();
    InjectedWorld { sources, samples }
}

pub fn scored_set(seed: u64) -> Vec<ScoredSample> {
    let mut r = rng(seed);
    let n = r.random_range(0..60);
    (0..n)
        .map(|k| ScoredSample {
            sample: GeneratedSample::injected(&format!("s{k}"), "id0", vec![1.0]),
            kind: FilterKind::Cctf,
            // Quantised so equal scores and exact-threshold hits occur.
            score: r.random_range(0..=20) as f64 / 20.0,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prompts

/// Occurrences of `token` as a whole lower-cased alphanumeric word.
pub fn word_count(text: &str, token: &str) -> usize {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| *w == token.to_lowercase())
        .count()
}

pub fn random_caption(r: &mut ChaCha8Rng, words: &[String]) -> String {
    let n = r.random_range(0..8);
    (0..n)
        .map(|_| words[r.random_range(0..words.len())].clone())
        .collect::<Vec<_>>()
        .join(if r.random_bool(0.5) { " " } else { ", " })
}
