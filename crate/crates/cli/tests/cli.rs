use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffid_core::dataset::{DatasetManifest, ManifestRecord, Split};
use diffid_core::pipeline::PipelineConfig;
use diffid_core::sprite::SpriteWorld;

fn diffid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffid"))
        .args(args)
        .env_remove("DIFFID_RUN_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
        .to_string()
}

fn write_config(dir: &Path, identities: usize) -> PathBuf {
    let mut cfg = PipelineConfig::default();
    cfg.run.seed = 5;
    cfg.sources.synthetic_identities = identities;
    cfg.diffusion.fine_tune_steps = 100;
    cfg.diffusion.reference_set_size = 16;
    cfg.generation.samples_per_identity = 16;
    cfg.output.dir = dir.join("out");
    cfg.output.cache_dir = dir.join("cache");
    cfg.output.crop = (32, 16);
    let path = dir.join("pipeline.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Four cameras, two frames each; the first half of the identities train.
fn write_target(dir: &Path) -> PathBuf {
    let w = SpriteWorld::new(77);
    let mut m = DatasetManifest::new((32, 16));
    fs::create_dir_all(dir.join("img")).unwrap();
    for i in 0..8 {
        let id = w.identity(i);
        for cam in 0..4u32 {
            for k in 0..2 {
                let split = match (i < 4, cam, k) {
                    (true, ..) => Split::Train,
                    (false, 0, 0) => Split::Query,
                    (false, 0, _) => continue,
                    _ => Split::Gallery,
                };
                let path = format!("img/{}_{cam}_{k}.ppm", id.name);
                fs::write(dir.join(&path), w.render(&id, cam as usize, k).encode_pnm().unwrap()).unwrap();
                m.records.push(ManifestRecord {
                    path,
                    identity: id.name.clone(),
                    source: "target".into(),
                    camera: Some(cam),
                    filter_kind: None,
                    score: 0.0,
                    split,
                });
            }
        }
    }
    m.sort_canonical();
    let path = dir.join("target.tsv");
    m.save(&path).unwrap();
    path
}

#[test]
fn validate_reports_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), 2);
    let o = diffid(&["validate", good.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "ok");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[diffusion]\ntimesteps = 0\nlambda = -1.0\n[bogus]\nx = 1\n").unwrap();
    let o = diffid(&["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    for key in ["diffusion.timesteps", "diffusion.lambda", "bogus"] {
        assert!(out.contains(key), "{key} missing from:\n{out}");
    }
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 3);
    let o = diffid(&["run", config.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = stdout(&o);
    assert_eq!(value(&run, "identities"), "3");
    let manifest = PathBuf::from(value(&run, "manifest"));
    let m = DatasetManifest::load(&manifest).unwrap();
    let ms = manifest.to_str().unwrap();

    let o = diffid(&["stats", ms]);
    assert!(o.status.success());
    let stats = stdout(&o);
    assert_eq!(value(&stats, "images"), m.len().to_string());
    assert_eq!(value(&stats, "person_ids"), "3");
    assert_eq!(value(&stats, "crop_size"), "32x16");

    let o = diffid(&["cdf", ms, "--thresholds", "1,1000"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "1 0\n1000 100\n");

    let o = diffid(&["filter", ms, "--kind", "cctf", "--calibrate", "0.5", "--epochs", "40"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = stdout(&o);
    let kept: usize = value(&f, "kept").parse().unwrap();
    let filtered = DatasetManifest::load(Path::new(&value(&f, "manifest"))).unwrap();
    assert_eq!(filtered.len(), kept);
    assert!(kept > 0 && kept < m.len());
    let o = diffid(&["filter", ms, "--kind", "clip", "--tau", "0.5", "--calibrate", "0.5"]);
    assert!(!o.status.success());

    let training = dir.path().join("training.toml");
    fs::write(&training, "[pretrain]\nepochs = 3\nbatch_size = 16\n[finetune]\nepochs = 2\nbatch_size = 8\n").unwrap();
    let ts = training.to_str().unwrap();
    let ck = dir.path().join("backbone.ck");
    let o = diffid(&["pretrain", ms, "--config", ts, "-o", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("epoch ").count(), 3);
    assert!(ck.is_file());

    let target = write_target(&dir.path().join("target"));
    let ledger = dir.path().join("runs.tsv");
    for (run_id, init) in [("pre", ck.to_str().unwrap()), ("rand", "random")] {
        let o = diffid(&[
            "eval",
            init,
            target.to_str().unwrap(),
            "--config",
            ts,
            "--ledger",
            ledger.to_str().unwrap(),
            "--run-id",
            run_id,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let e = stdout(&o);
        let map: f64 = value(&e, "mAP").parse().unwrap();
        assert!((0.0..=1.0).contains(&map));
        assert_eq!(e.matches("epoch ").count(), 2);
    }
    let rows = fs::read_to_string(&ledger).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.starts_with("pre\t"));
}

#[test]
fn run_exits_nonzero_when_an_identity_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), 2);
    let text = fs::read_to_string(&config).unwrap().replace("captioner = \"stub\"", "captioner = \"http://nowhere\"");
    fs::write(&config, text).unwrap();
    let o = diffid(&["run", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&o.stderr).matches("failed ").count(), 2);
}

#[test]
fn missing_manifest_is_an_error() {
    let o = diffid(&["stats", "/nonexistent/manifest.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}
