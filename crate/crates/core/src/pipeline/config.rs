//! Pipeline configuration: TOML with section headers, every violation
//! collected, `DIFFID_<SECTION>_<KEY>` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::checkpoint::content_id;
use crate::dataset::{parse_crop, DEFAULT_CROP};
use crate::diffusion::ScheduleKind;
use crate::diversity::DEFAULT_REFERENCE_SET_SIZE;
use crate::error::{Error, IoContext, Result};
use crate::filter::FilterKind;
use crate::prompt::{PromptTemplate, DEFAULT_TEMPLATE, STUB_CAPTIONER};

pub const ENV_PREFIX: &str = "DIFFID_";
pub const TOY_BACKEND: &str = "toy";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// 0 = one worker per core.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcesSection {
    pub manifests: Vec<PathBuf>,
    /// Sprite identities generated in-process; 0 disables the sprite source.
    pub synthetic_identities: usize,
    pub world_seed: u64,
    /// Images per identity used for fine-tuning.
    pub sequence_length: usize,
    /// Further real images per identity, used only for threshold calibration.
    pub holdout_per_identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSection {
    pub captioner: String,
    pub template: String,
    pub iir_candidates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSection {
    /// `toy`, or the id of an external adapter.
    pub backend: String,
    pub schedule: ScheduleKind,
    pub timesteps: usize,
    pub lambda: f64,
    pub fine_tune_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub reference_set_size: usize,
    pub sample_steps: usize,
    pub base_steps: usize,
    pub base_identities: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSection {
    pub samples_per_identity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSection {
    pub kind: FilterKind,
    /// Fixed threshold; when absent the threshold is calibrated.
    pub tau: Option<f64>,
    /// Share of held-out real images that should pass a calibrated threshold.
    pub keep_fraction: f64,
    /// Per-source fixed thresholds, overriding `tau`.
    pub source_tau: BTreeMap<String, f64>,
    pub train_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub cache_dir: PathBuf,
    pub crop: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub sources: SourcesSection,
    pub caption: CaptionSection,
    pub diffusion: DiffusionSection,
    pub generation: GenerationSection,
    pub filter: FilterSection,
    pub output: OutputSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunSection { seed: 0, workers: 0 },
            sources: SourcesSection {
                manifests: Vec::new(),
                synthetic_identities: 3,
                world_seed: 7,
                sequence_length: 6,
                holdout_per_identity: 4,
            },
            caption: CaptionSection {
                captioner: STUB_CAPTIONER.into(),
                template: DEFAULT_TEMPLATE.into(),
                iir_candidates: None,
            },
            diffusion: DiffusionSection {
                backend: TOY_BACKEND.into(),
                schedule: ScheduleKind::Cosine,
                timesteps: 1000,
                lambda: 1.0,
                fine_tune_steps: crate::diffusion::DEFAULT_FINE_TUNE_STEPS,
                learning_rate: 1e-2,
                batch_size: 4,
                reference_set_size: DEFAULT_REFERENCE_SET_SIZE,
                sample_steps: 25,
                base_steps: 600,
                base_identities: 64,
            },
            generation: GenerationSection {
                samples_per_identity: 200,
            },
            filter: FilterSection {
                kind: FilterKind::ReidCtf,
                tau: None,
                keep_fraction: 0.75,
                source_tau: BTreeMap::new(),
                train_epochs: 300,
            },
            output: OutputSection {
                dir: PathBuf::from("out"),
                cache_dir: PathBuf::from("cache"),
                crop: DEFAULT_CROP,
            },
        }
    }
}

const SECTIONS: [&str; 7] = ["run", "sources", "caption", "diffusion", "generation", "filter", "output"];

/// Pulls typed values out of a table, recording every problem.
struct Reader<'a> {
    root: &'a Table,
    base: Option<&'a Path>,
    errors: Vec<String>,
    seen: BTreeMap<String, Vec<String>>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, section: &str, key: &str) -> Option<&'a Value> {
        self.seen.entry(section.into()).or_default().push(key.into());
        self.root.get(section)?.as_table()?.get(key)
    }

    fn fail(&mut self, section: &str, key: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{section}.{key}: {msg}"));
    }

    fn int(&mut self, section: &str, key: &str, default: u64) -> u64 {
        match self.raw(section, key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(v) => {
                self.fail(section, key, format!("expected a non-negative integer, found `{v}`"));
                default
            }
        }
    }

    fn usize(&mut self, section: &str, key: &str, default: usize) -> usize {
        self.int(section, key, default as u64) as usize
    }

    fn float(&mut self, section: &str, key: &str, default: f64) -> f64 {
        self.opt_float(section, key).unwrap_or(default)
    }

    fn opt_float(&mut self, section: &str, key: &str) -> Option<f64> {
        match self.raw(section, key) {
            None => None,
            Some(Value::Float(f)) => Some(*f),
            Some(Value::Integer(i)) => Some(*i as f64),
            Some(v) => {
                self.fail(section, key, format!("expected a number, found `{v}`"));
                None
            }
        }
    }

    fn string(&mut self, section: &str, key: &str, default: &str) -> String {
        self.opt_string(section, key).unwrap_or_else(|| default.to_string())
    }

    fn opt_string(&mut self, section: &str, key: &str) -> Option<String> {
        match self.raw(section, key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                self.fail(section, key, format!("expected a string, found `{v}`"));
                None
            }
        }
    }

    fn parsed<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        match self.opt_string(section, key) {
            None => default,
            Some(s) => s.parse().unwrap_or_else(|e| {
                self.fail(section, key, e);
                default
            }),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        let p = PathBuf::from(p);
        match self.base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p,
        }
    }

    fn unknown_keys(&mut self) {
        for (section, v) in self.root {
            let Some(table) = v.as_table() else {
                self.errors.push(format!("{section}: expected a section"));
                continue;
            };
            if !SECTIONS.contains(&section.as_str()) {
                self.errors.push(format!("{section}: unknown section"));
                continue;
            }
            let seen = self.seen.get(section).cloned().unwrap_or_default();
            for key in table.keys() {
                if !seen.contains(key) {
                    self.errors.push(format!("{section}.{key}: unknown key"));
                }
            }
        }
    }
}

/// Applies `DIFFID_<SECTION>_<KEY>=value` overrides to a raw table. Values
/// are read as TOML literals, falling back to plain strings.
pub fn apply_env_overrides(table: &mut Table, env: impl IntoIterator<Item = (String, String)>) {
    apply_overrides(table, &SECTIONS, env)
}

pub(crate) fn apply_overrides(
    table: &mut Table,
    sections: &[&str],
    env: impl IntoIterator<Item = (String, String)>,
) {
    for (name, raw) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
        let Some((section, key)) = sections.iter().find_map(|s| {
            rest.strip_prefix(&format!("{}_", s.to_uppercase()))
                .map(|k| (*s, k.to_lowercase()))
        }) else {
            continue;
        };
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(Value::String(raw));
        table
            .entry(section)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .map(|t| t.insert(key, value));
    }
}

impl PipelineConfig {
    /// Parses and validates config text. Relative paths resolve against
    /// `base` when given. Environment overrides are applied first.
    pub fn parse_with_env(
        text: &str,
        base: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Validation(vec![format!("syntax: {}", e.message())]))?;
        apply_env_overrides(&mut table, env);
        Self::from_table(&table, base)
    }

    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        Self::parse_with_env(text, base, std::iter::empty())
    }

    /// Reads a config file, resolving paths against its directory and
    /// applying overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        Self::parse_with_env(&text, base, std::env::vars())
    }

    fn from_table(table: &Table, base: Option<&Path>) -> Result<Self> {
        let d = PipelineConfig::default();
        let mut r = Reader {
            root: table,
            base,
            errors: Vec::new(),
            seen: BTreeMap::new(),
        };

        let run = RunSection {
            seed: r.int("run", "seed", d.run.seed),
            workers: r.usize("run", "workers", d.run.workers),
        };

        let manifests = match r.raw("sources", "manifests") {
            None => Vec::new(),
            Some(Value::Array(items)) => {
                let mut out = Vec::new();
                for v in items {
                    match v.as_str() {
                        Some(s) => out.push(r.path(s)),
                        None => r.fail("sources", "manifests", format!("`{v}` is not a path string")),
                    }
                }
                out
            }
            Some(v) => {
                r.fail("sources", "manifests", format!("expected a list of paths, found `{v}`"));
                Vec::new()
            }
        };
        let s = &d.sources;
        let sources = SourcesSection {
            manifests,
            synthetic_identities: r.usize("sources", "synthetic_identities", s.synthetic_identities),
            world_seed: r.int("sources", "world_seed", s.world_seed),
            sequence_length: r.usize("sources", "sequence_length", s.sequence_length),
            holdout_per_identity: r.usize("sources", "holdout_per_identity", s.holdout_per_identity),
        };

        let caption = CaptionSection {
            captioner: r.string("caption", "captioner", &d.caption.captioner),
            template: r.string("caption", "template", &d.caption.template),
            iir_candidates: r.opt_string("caption", "iir_candidates").map(|p| r.path(&p)),
        };

        let x = &d.diffusion;
        let diffusion = DiffusionSection {
            backend: r.string("diffusion", "backend", &x.backend),
            schedule: r.parsed("diffusion", "schedule", x.schedule),
            timesteps: r.usize("diffusion", "timesteps", x.timesteps),
            lambda: r.float("diffusion", "lambda", x.lambda),
            fine_tune_steps: r.usize("diffusion", "fine_tune_steps", x.fine_tune_steps),
            learning_rate: r.float("diffusion", "learning_rate", x.learning_rate),
            batch_size: r.usize("diffusion", "batch_size", x.batch_size),
            reference_set_size: r.usize("diffusion", "reference_set_size", x.reference_set_size),
            sample_steps: r.usize("diffusion", "sample_steps", x.sample_steps),
            base_steps: r.usize("diffusion", "base_steps", x.base_steps),
            base_identities: r.usize("diffusion", "base_identities", x.base_identities),
        };

        let generation = GenerationSection {
            samples_per_identity: r.usize(
                "generation",
                "samples_per_identity",
                d.generation.samples_per_identity,
            ),
        };

        let mut source_tau = BTreeMap::new();
        match r.raw("filter", "source_tau") {
            None => {}
            Some(Value::Table(t)) => {
                for (k, v) in t {
                    match v.as_float().or_else(|| v.as_integer().map(|i| i as f64)) {
                        Some(f) => {
                            source_tau.insert(k.clone(), f);
                        }
                        None => r.fail("filter", "source_tau", format!("`{k}` is not a number")),
                    }
                }
            }
            Some(v) => r.fail("filter", "source_tau", format!("expected a table, found `{v}`")),
        }
        let filter = FilterSection {
            kind: r.parsed("filter", "kind", d.filter.kind),
            tau: r.opt_float("filter", "tau"),
            keep_fraction: r.float("filter", "keep_fraction", d.filter.keep_fraction),
            source_tau,
            train_epochs: r.usize("filter", "train_epochs", d.filter.train_epochs),
        };

        let crop = match r.opt_string("output", "crop") {
            None => d.output.crop,
            Some(c) => parse_crop(&c).unwrap_or_else(|e| {
                r.fail("output", "crop", e);
                d.output.crop
            }),
        };
        let output = OutputSection {
            dir: r
                .opt_string("output", "dir")
                .map_or_else(|| r.path("out"), |p| r.path(&p)),
            cache_dir: r
                .opt_string("output", "cache_dir")
                .map_or_else(|| r.path("cache"), |p| r.path(&p)),
            crop,
        };

        r.unknown_keys();
        let cfg = PipelineConfig {
            run,
            sources,
            caption,
            diffusion,
            generation,
            filter,
            output,
        };
        let mut errors = r.errors;
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Semantic checks over an already typed config.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                v.push(format!("{key}: {msg}"));
            }
        };
        let s = &self.sources;
        check(
            !s.manifests.is_empty() || s.synthetic_identities > 0,
            "sources",
            "no identities: give manifests or synthetic_identities > 0",
        );
        check(s.sequence_length > 0, "sources.sequence_length", "must be >= 1");
        for m in &s.manifests {
            check(m.is_file(), "sources.manifests", &format!("`{}` does not exist", m.display()));
        }
        if let Some(p) = &self.caption.iir_candidates {
            check(p.is_file(), "caption.iir_candidates", &format!("`{}` does not exist", p.display()));
        }
        check(
            PromptTemplate::parse(&self.caption.template).is_ok(),
            "caption.template",
            "must contain `{id}` and `{caption}` once each",
        );
        check(!self.caption.captioner.trim().is_empty(), "caption.captioner", "must not be empty");
        let x = &self.diffusion;
        check(!x.backend.trim().is_empty(), "diffusion.backend", "must not be empty");
        check(x.timesteps > 0, "diffusion.timesteps", "must be >= 1");
        check(x.lambda.is_finite() && x.lambda >= 0.0, "diffusion.lambda", "must be >= 0");
        check(x.fine_tune_steps > 0, "diffusion.fine_tune_steps", "must be >= 1");
        check(x.learning_rate > 0.0, "diffusion.learning_rate", "must be > 0");
        check(x.batch_size > 0, "diffusion.batch_size", "must be >= 1");
        check(x.reference_set_size > 0, "diffusion.reference_set_size", "must be >= 1");
        check(x.sample_steps > 0, "diffusion.sample_steps", "must be >= 1");
        check(x.base_identities >= 1, "diffusion.base_identities", "must be >= 1");
        check(
            self.generation.samples_per_identity > 0,
            "generation.samples_per_identity",
            "must be >= 1",
        );
        let f = &self.filter;
        if let Some(t) = f.tau {
            check((0.0..=1.0).contains(&t), "filter.tau", "must be in [0, 1]");
        }
        for (src, t) in &f.source_tau {
            check(
                (0.0..=1.0).contains(t),
                &format!("filter.source_tau.{src}"),
                "must be in [0, 1]",
            );
        }
        check(
            f.keep_fraction > 0.0 && f.keep_fraction <= 1.0,
            "filter.keep_fraction",
            "must be in (0, 1]",
        );
        check(f.train_epochs > 0, "filter.train_epochs", "must be >= 1");
        check(
            self.output.crop.0 > 0 && self.output.crop.1 > 0,
            "output.crop",
            "must be positive",
        );
        v
    }

    /// Full TOML rendering; re-parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        fn sec(pairs: Vec<(&str, Value)>) -> Value {
            Value::Table(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
        }
        let path = |p: &Path| Value::String(p.display().to_string());
        let int = |n: u64| Value::Integer(n as i64);
        let s = &self.sources;
        let x = &self.diffusion;
        let f = &self.filter;
        let mut root = Table::new();
        root.insert(
            "run".into(),
            sec(vec![
                ("seed", int(self.run.seed)),
                ("workers", int(self.run.workers as u64)),
            ]),
        );
        root.insert(
            "sources".into(),
            sec(vec![
                ("manifests", Value::Array(s.manifests.iter().map(|m| path(m)).collect())),
                ("synthetic_identities", int(s.synthetic_identities as u64)),
                ("world_seed", int(s.world_seed)),
                ("sequence_length", int(s.sequence_length as u64)),
                ("holdout_per_identity", int(s.holdout_per_identity as u64)),
            ]),
        );
        let mut caption = vec![
            ("captioner", Value::String(self.caption.captioner.clone())),
            ("template", Value::String(self.caption.template.clone())),
        ];
        if let Some(p) = &self.caption.iir_candidates {
            caption.push(("iir_candidates", path(p)));
        }
        root.insert("caption".into(), sec(caption));
        root.insert(
            "diffusion".into(),
            sec(vec![
                ("backend", Value::String(x.backend.clone())),
                ("schedule", Value::String(x.schedule.to_string())),
                ("timesteps", int(x.timesteps as u64)),
                ("lambda", Value::Float(x.lambda)),
                ("fine_tune_steps", int(x.fine_tune_steps as u64)),
                ("learning_rate", Value::Float(x.learning_rate)),
                ("batch_size", int(x.batch_size as u64)),
                ("reference_set_size", int(x.reference_set_size as u64)),
                ("sample_steps", int(x.sample_steps as u64)),
                ("base_steps", int(x.base_steps as u64)),
                ("base_identities", int(x.base_identities as u64)),
            ]),
        );
        root.insert(
            "generation".into(),
            sec(vec![(
                "samples_per_identity",
                int(self.generation.samples_per_identity as u64),
            )]),
        );
        let mut filter = vec![
            ("kind", Value::String(f.kind.to_string())),
            ("keep_fraction", Value::Float(f.keep_fraction)),
            ("train_epochs", int(f.train_epochs as u64)),
        ];
        if let Some(t) = f.tau {
            filter.push(("tau", Value::Float(t)));
        }
        if !f.source_tau.is_empty() {
            filter.push((
                "source_tau",
                Value::Table(
                    f.source_tau
                        .iter()
                        .map(|(k, v)| (k.clone(), Value::Float(*v)))
                        .collect(),
                ),
            ));
        }
        root.insert("filter".into(), sec(filter));
        root.insert(
            "output".into(),
            sec(vec![
                ("dir", path(&self.output.dir)),
                ("cache_dir", path(&self.output.cache_dir)),
                (
                    "crop",
                    Value::String(format!("{}x{}", self.output.crop.0, self.output.crop.1)),
                ),
            ]),
        );
        toml::to_string(&root).expect("config tables always serialise")
    }

    /// Hash of everything that affects generated content. Output locations
    /// and the worker count are excluded so caches survive moving outputs.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        c.output.cache_dir = PathBuf::new();
        c.run.workers = 0;
        content_id(c.to_toml().as_bytes())
    }

    /// Threshold for one source: per-source override, then global `tau`.
    pub fn fixed_tau(&self, source: &str) -> Option<f64> {
        self.filter.source_tau.get(source).copied().or(self.filter.tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = PipelineConfig::parse("", None).unwrap();
        let d = PipelineConfig::default();
        assert_eq!(c, d);
        assert_eq!(c.diffusion.backend, "toy");
        assert_eq!(c.diffusion.lambda, 1.0);
        assert_eq!(c.diffusion.reference_set_size, 200);
        assert_eq!(c.filter.kind, FilterKind::ReidCtf);
    }

    #[test]
    fn every_violation_is_reported() {
        let text = "[diffusion]\nreference_set_size = 0\n[filter]\ntau = 1.5\n";
        let Err(Error::Validation(v)) = PipelineConfig::parse(text, None) else {
            panic!("expected validation error")
        };
        assert!(v.iter().any(|m| m.starts_with("diffusion.reference_set_size")));
        assert!(v.iter().any(|m| m.starts_with("filter.tau")));
    }

    #[test]
    fn type_errors_and_unknown_keys() {
        let text = "[run]\nseed = \"x\"\nbogus = 1\n[nope]\na = 1\n[filter]\nkind = \"sharpness\"\n";
        let Err(Error::Validation(v)) = PipelineConfig::parse(text, None) else {
            panic!("expected validation error")
        };
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn round_trip() {
        let text = "[filter]\ntau = 0.4\n[filter.source_tau]\nmarket = 0.6\n[output]\ncrop = \"64x32\"\n";
        let c = PipelineConfig::parse(text, None).unwrap();
        let again = PipelineConfig::parse(&c.to_toml(), None).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.fixed_tau("market"), Some(0.6));
        assert_eq!(c.fixed_tau("other"), Some(0.4));
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("DIFFID_DIFFUSION_LAMBDA".to_string(), "0.5".to_string()),
            ("DIFFID_FILTER_KIND".to_string(), "cctf".to_string()),
            ("DIFFID_GENERATION_SAMPLES_PER_IDENTITY".to_string(), "12".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let c = PipelineConfig::parse_with_env("[diffusion]\nlambda = 2.0\n", None, env).unwrap();
        assert_eq!(c.diffusion.lambda, 0.5);
        assert_eq!(c.filter.kind, FilterKind::Cctf);
        assert_eq!(c.generation.samples_per_identity, 12);
    }

    #[test]
    fn missing_paths_are_violations() {
        let text = "[sources]\nmanifests = [\"/definitely/missing.tsv\"]\n";
        assert!(matches!(PipelineConfig::parse(text, None), Err(Error::Validation(_))));
    }
}
