//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::time::Instant;

use common::*;
use diffid_core::dataset::{compute_identity_cdf, mean_images_per_identity, stats_report, Split, StatsOptions};
use diffid_core::diffusion::{make_schedule, prior_preservation_loss, Denoiser, DenoiserConfig, LossConfig, LossItem, ScheduleKind};
use diffid_core::filter::{apply_threshold, score_samples, EmbeddingGallery, FilterModel, GeneratedSample};
use diffid_core::image::{Image, ImageShape};
use diffid_core::metrics::{average_precision, evaluate, RetrievalEntry, RetrievalInstance};
use diffid_core::pipeline::run_pipeline;
use diffid_core::pretrain::{
    finetune_eval_examples, pretrain, subsample, Example, FinetuneConfig, PretrainConfig, SubsetMode, SubsetSpec,
};
use diffid_core::prompt::{allocate_iir, build_prompts, default_iir_candidates, default_vocabulary, PromptTemplate};
use diffid_core::sprite::SpriteWorld;
use rand::seq::IndexedRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_loss() -> Outcome {
    let cfg = grad_check_config();
    let s = make_schedule(100, ScheduleKind::Cosine).map_err(|e| e.to_string())?;
    let model = Denoiser::new(cfg, 1).map_err(|e| e.to_string())?;
    let id = LossFixture::new(cfg.shape, cfg.cond_dim, 4, 100, 2);
    let reference = LossFixture::new(cfg.shape, cfg.cond_dim, 4, 100, 3);
    let at = |l: f64| {
        prior_preservation_loss(&model, &id.items(), &reference.items(), &LossConfig::with_lambda(l), &s).unwrap()
    };
    let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
    let recon_gap = (l0.total - l0.reconstruction).abs();
    let collinear = ((l2.total - l1.total) - (l1.total - l0.total)).abs();
    ensure(recon_gap < 1e-12, format!("lambda=0 gap {recon_gap:e}"))?;
    ensure(collinear < 1e-9, format!("collinearity {collinear:e}"))?;

    // All-zero denoiser with vanishing variance predicts 0: loss = ||x||^2 / dim.
    let zcfg = DenoiserConfig {
        shape: ImageShape::new(1, 1, 2),
        cond_dim: 2,
        latent_dim: 1,
        modes: 0,
    };
    let mut p = vec![0.0; zcfg.param_count()];
    *p.last_mut().unwrap() = -1e6;
    let zero = Denoiser::from_params(zcfg, p).map_err(|e| e.to_string())?;
    let x = Image::new(zcfg.shape, vec![1.0, 0.0]).unwrap();
    let item = LossItem {
        image: &x,
        condition: &[0.0, 0.0],
        t: 5,
        noise: &[0.7, -0.3],
    };
    let hand = prior_preservation_loss(&zero, &[item], &[], &LossConfig::with_lambda(0.0), &s)
        .map_err(|e| e.to_string())?
        .total;
    ensure((hand - 0.5).abs() < 1e-12, format!("hand case {hand}"))?;
    Ok(format!("lambda=0 gap {recon_gap:.1e}, collinearity {collinear:.1e}, hand case {hand}"))
}

fn c2_gradient() -> Outcome {
    let cfg = grad_check_config();
    ensure(cfg.param_count() <= 100, "model too large")?;
    let mut worst: f64 = 0.0;
    for (seed, kind) in [(1, ScheduleKind::Cosine), (2, ScheduleKind::Linear)] {
        let s = make_schedule(50, kind).unwrap();
        let mut model = Denoiser::new(cfg, seed).unwrap();
        let mut r = rng(seed + 10);
        for p in model.params_mut() {
            *p += r.random_range(-0.3..0.3);
        }
        let id = LossFixture::new(cfg.shape, cfg.cond_dim, 3, 50, seed);
        let reference = LossFixture::new(cfg.shape, cfg.cond_dim, 3, 50, seed + 100);
        for lambda in [0.0, 1.0] {
            worst = worst.max(gradient_check(&model, &id, &reference, lambda, &s));
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:e}"))?;
    Ok(format!("{} parameters, max relative error {worst:.2e}", cfg.param_count()))
}

fn c3_schedule() -> Outcome {
    let mut worst: f64 = 0.0;
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for t_max in [1, 4, 1000] {
            let s = make_schedule(t_max, kind).map_err(|e| e.to_string())?;
            for t in 1..=t_max {
                let (a, g) = s.coefficients(t).map_err(|e| e.to_string())?;
                worst = worst.max((a * a + g * g - 1.0).abs());
            }
        }
    }
    ensure(worst < 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("max |alpha^2 + sigma^2 - 1| = {worst:.1e}"))
}

fn c4_filter() -> Outcome {
    let taus = [0.0, 0.3, 0.5, 0.75, 0.9, 0.99, 1.0];
    for seed in 0..100 {
        let w = injected_world(seed, 200, 10);
        let gallery =
            EmbeddingGallery::from_embeddings("src", w.sources.iter().map(|(i, e)| (i.as_str(), e.as_slice())))
                .map_err(|e| e.to_string())?;
        let model = FilterModel::reid_from_gallery(gallery);
        let samples = w.samples.iter().map(|(s, i, e)| GeneratedSample::injected(s, i, e.clone())).collect();
        let scored = score_samples(&model, samples);
        ensure(scored.errors.is_empty(), "scoring errors")?;
        for tau in taus {
            let kept: BTreeSet<String> = apply_threshold(scored.scored.clone(), tau)
                .map_err(|e| e.to_string())?
                .kept
                .into_iter()
                .map(|s| s.sample.sample_id)
                .collect();
            ensure(kept == brute_reid_kept(&w.sources, &w.samples, tau), format!("world {seed}, tau {tau}"))?;
        }
    }
    for seed in 0..1_000 {
        let set = scored_set(seed);
        let mut prev: Option<BTreeSet<String>> = None;
        for k in 0..=20 {
            let tau = k as f64 / 20.0;
            let kept: BTreeSet<String> = apply_threshold(set.clone(), tau)
                .unwrap()
                .kept
                .into_iter()
                .map(|s| s.sample.sample_id)
                .collect();
            if let Some(p) = &prev {
                ensure(kept.is_subset(p), format!("score set {seed}: tau {tau} added samples"))?;
            }
            prev = Some(kept);
        }
    }
    Ok("100 injected worlds match brute force; monotone over 1000 score sets".into())
}

fn c5_metrics() -> Outcome {
    let entries =
        |v: &[(String, Option<u32>)]| v.iter().map(|(i, c)| RetrievalEntry::new(i.clone(), *c)).collect::<Vec<_>>();
    let mut n = 0;
    let mut seed = 0;
    while n < 100 {
        let w = random_retrieval(seed);
        seed += 1;
        let Some((map, cmc)) = brute_retrieval(&w.queries, &w.gallery, &w.sim, true, 10) else {
            continue;
        };
        let inst = RetrievalInstance::new(entries(&w.queries), entries(&w.gallery), w.sim.clone())
            .map_err(|e| e.to_string())?;
        let got = evaluate(&inst, 10).map_err(|e| e.to_string())?;
        ensure(got.map_score == map && got.cmc == cmc, format!("instance {seed}"))?;
        n += 1;
    }
    // Relevant at ranks 1 and 3.
    let ap = average_precision(&[true, false, true]);
    let hand = (1.0 / 1.0 + 2.0 / 3.0) / 2.0;
    ensure(ap == hand, format!("AP {ap} vs {hand}"))?;
    ensure((ap - 5.0 / 6.0).abs() <= f64::EPSILON, format!("AP {ap} vs 5/6"))?;
    Ok(format!("100 instances exact; hand AP {ap}"))
}

fn c6_stats() -> Outcome {
    for seed in 0..50 {
        let m = random_manifest(seed);
        let opts = StatsOptions {
            range: (10, 40),
            above: 25,
        };
        let got = stats_report(&m, &opts).map_err(|e| e.to_string())?;
        let want = brute_stats(&m, opts.range, opts.above);
        ensure(
            got.images == want.images
                && got.identities == want.identities
                && got.in_range == want.in_range
                && got.above_count == want.above,
            format!("stats mismatch on manifest {seed}"),
        )?;
        let xs: Vec<u64> = (0..=65).collect();
        let curve = compute_identity_cdf(&m, &xs).map_err(|e| e.to_string())?;
        for (x, y) in &curve.points {
            ensure(*y == brute_cdf_point(&want.counts, *x), format!("cdf mismatch on manifest {seed} at {x}"))?;
        }
    }
    let counts = long_tail_counts(2024);
    let m = manifest_from_counts(&counts);
    let r = stats_report(&m, &StatsOptions::default()).map_err(|e| e.to_string())?;
    ensure(r.identities == DIFF_PERSON_IDENTITIES && r.images == DIFF_PERSON_IMAGES, "synthetic totals")?;
    ensure((r.range_share - 0.80).abs() <= 0.02, format!("share in [70,210] = {}", r.range_share))?;
    ensure((r.above_share - 0.70).abs() <= 0.02, format!("share above 130 = {}", r.above_share))?;
    let mean = mean_images_per_identity(DIFF_PERSON_IMAGES, DIFF_PERSON_IDENTITIES);
    ensure((mean - 149.9).abs() <= 0.05, format!("mean {mean}"))?;
    Ok(format!(
        "group-by exact; in [70,210] {:.1}%, above 130 {:.1}%, mean {mean:.2}",
        100.0 * r.range_share,
        100.0 * r.above_share
    ))
}

fn c7_pipeline() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = run_pipeline(&toy_config(a.path(), 3)).map_err(|e| e.to_string())?;
    let rb = run_pipeline(&toy_config(b.path(), 3)).map_err(|e| e.to_string())?;
    ensure(ra.success(), format!("failures: {:?}", ra.failed))?;
    ra.manifest.validate().map_err(|e| e.to_string())?;
    ensure(ra.manifest.identity_count() == 3, format!("{} identities", ra.manifest.identity_count()))?;
    ra.ledger.check_order().map_err(|e| e.to_string())?;
    let same = fs::read(&ra.manifest_path).map_err(|e| e.to_string())?
        == fs::read(&rb.manifest_path).map_err(|e| e.to_string())?;
    ensure(same, "manifests differ between seeded runs")?;
    Ok(format!("{} images over 3 identities, manifests byte-identical", ra.manifest.len()))
}

/// Target world: 30 identities under 4 cameras; the first half trains, the
/// rest is split into camera-0 queries and a camera-1..3 gallery.
fn target_examples() -> Vec<Example> {
    let w = SpriteWorld::new(9001);
    let mut ex = Vec::new();
    for i in 0..30 {
        let id = w.identity(100 + i);
        for cam in 0..4u32 {
            for k in 0..2 {
                let split = if i < 15 {
                    Split::Train
                } else if cam == 0 && k == 0 {
                    Split::Query
                } else if cam == 0 {
                    continue;
                } else {
                    Split::Gallery
                };
                ex.push(Example {
                    image: w.render(&id, cam as usize, k),
                    identity: id.name.clone(),
                    camera: Some(cam),
                    split,
                });
            }
        }
    }
    ex
}

fn c8_pretraining() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = toy_config(dir.path(), 48);
    cfg.generation.samples_per_identity = 40;
    cfg.diffusion.reference_set_size = 40;
    let run = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let pc = PretrainConfig {
        batch_size: 32,
        ..PretrainConfig::default()
    };
    let pre = pretrain(&run.manifest, run.manifest_path.parent().unwrap(), &pc).map_err(|e| e.to_string())?;
    let target = target_examples();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let fc = FinetuneConfig {
            seed,
            epochs: 1,
            ..FinetuneConfig::default()
        };
        let with = finetune_eval_examples(Some(&pre.checkpoint), &target, &fc).map_err(|e| e.to_string())?;
        let without = finetune_eval_examples(None, &target, &fc).map_err(|e| e.to_string())?;
        let (a, b) = (with.map_trace[0], without.map_trace[0]);
        if a >= b {
            wins += 1;
        }
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    let detail = format!("{wins}/5 seeds (pretrained/random mAP: {})", pairs.join(" "));
    ensure(wins >= 4, detail.clone())?;
    Ok(detail)
}

fn c9_subsampling() -> Outcome {
    for seed in 0..100 {
        let m = random_manifest(seed);
        let f = rng(seed + 7).random_range(1..=9) as f64 / 10.0;
        let before = brute_stats(&m, (0, 0), 0);
        let fs = subsample(&m, &SubsetSpec { mode: SubsetMode::Fs, fraction: f, seed }).map_err(|e| e.to_string())?;
        let after = brute_stats(&fs, (0, 0), 0);
        for (b, a) in before.counts.iter().zip(&after.counts) {
            let want = ((f * *b as f64 - 1e-9).ceil() as usize).max(1);
            ensure(*a == want, format!("Fs manifest {seed}: {a} vs {want}"))?;
        }
        let ss = subsample(&m, &SubsetSpec { mode: SubsetMode::Ss, fraction: f, seed }).map_err(|e| e.to_string())?;
        let want = ((f * before.identities as f64 + 1e-9).floor() as usize).max(1);
        ensure(ss.identity_count() == want, format!("Ss manifest {seed}"))?;
    }
    let m = manifest_from_counts(&vec![2; 1501]);
    let s = subsample(&m, &SubsetSpec { mode: SubsetMode::Ss, fraction: 0.1, seed: 1 }).map_err(|e| e.to_string())?;
    ensure(s.identity_count() == 150, format!("1501 x 10% -> {}", s.identity_count()))?;
    Ok("100 manifests exact; 1501 identities at 10% keep 150".into())
}

fn c10_prompts() -> Outcome {
    let candidates = default_iir_candidates();
    let base = default_vocabulary();
    let mut words: Vec<String> = base.iter().cloned().collect();
    words.sort();
    let template = PromptTemplate::default();
    let mut r = rng(10);
    let mut bundles = 0;
    for trial in 0..10_000u64 {
        let mut vocab = base.clone();
        let share = r.random_range(0.0..0.99);
        vocab.extend(candidates.iter().filter(|_| r.random_bool(share)).cloned());
        let pool: Vec<String> = candidates.choose_multiple(&mut r, 50).cloned().collect();
        let Ok(tok) = allocate_iir(&vocab, &pool, trial) else {
            ensure(pool.iter().all(|c| vocab.contains(c)), format!("trial {trial}: spurious exhaustion"))?;
            continue;
        };
        ensure(!vocab.contains(&tok), format!("trial {trial}: `{tok}` is in the vocabulary"))?;
        let caption = random_caption(&mut r, &words);
        let b = build_prompts(&caption, &tok, &template).map_err(|e| format!("trial {trial}: {e}"))?;
        b.check_invariants().map_err(|e| e.to_string())?;
        ensure(
            word_count(&b.enhanced_prompt, &tok) == 1 && word_count(&b.lpe_prompt, &tok) == 0,
            format!("trial {trial}: token count"),
        )?;
        bundles += 1;
    }
    Ok(format!("10000 allocations, {bundles} bundles checked"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("loss correctness", c1_loss),
        ("gradient check", c2_gradient),
        ("schedule invariant", c3_schedule),
        ("filter oracle", c4_filter),
        ("metric oracle", c5_metrics),
        ("statistics fidelity", c6_stats),
        ("end-to-end toy pipeline", c7_pipeline),
        ("pre-training benefit", c8_pretraining),
        ("few-shot protocol", c9_subsampling),
        ("prompt invariants", c10_prompts),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
