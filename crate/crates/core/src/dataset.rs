//! Dataset manifests: assembly of filtered samples, identity-count CDF,
//! summary statistics and rebalancing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, IoContext, Result};
use crate::filter::{FilterKind, FilterReport};
use crate::image::Image;
use crate::rng::{derive_seed_str, rng};

pub const MANIFEST_HEADER: &str = "diffid-manifest v1";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DEFAULT_CROP: (usize, usize) = (256, 128);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub identity: String,
    pub source: String,
    pub camera: Option<u32>,
    /// `None` for real images that never went through a filter.
    pub filter_kind: Option<FilterKind>,
    pub score: f64,
    pub split: Split,
}

impl ManifestRecord {
    fn to_line(&self) -> String {
        let camera = self.camera.map_or("-".to_string(), |c| c.to_string());
        let kind = self.filter_kind.map_or("-".to_string(), |k| k.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.path, self.identity, self.source, camera, kind, self.score, self.split
        )
    }

    fn from_line(line: &str) -> Result<Self> {
        fn opt(s: &str) -> Option<&str> {
            (s != "-").then_some(s)
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::invalid(format!("expected 7 fields, found {}", f.len())));
        }
        Ok(Self {
            path: f[0].to_string(),
            identity: f[1].to_string(),
            source: f[2].to_string(),
            camera: opt(f[3])
                .map(|c| c.parse().map_err(|_| Error::invalid(format!("bad camera `{c}`"))))
                .transpose()?,
            filter_kind: opt(f[4]).map(FilterKind::from_str).transpose()?,
            score: f[5]
                .parse()
                .map_err(|_| Error::invalid(format!("bad score `{}`", f[5])))?,
            split: f[6].parse()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// `(height, width)`.
    pub crop_size: (usize, usize),
    pub version: u32,
}

impl DatasetManifest {
    pub fn new(crop_size: (usize, usize)) -> Self {
        Self {
            records: Vec::new(),
            crop_size,
            version: MANIFEST_VERSION,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::invalid("crop size must be positive"));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if r.identity.is_empty() {
                return Err(Error::invalid(format!("`{}` has an empty identity", r.path)));
            }
            if !(0.0..=1.0).contains(&r.score) {
                return Err(Error::invalid(format!("`{}` has score {} outside [0, 1]", r.path, r.score)));
            }
            for field in [&r.path, &r.identity, &r.source] {
                if field.contains(['\t', '\n']) {
                    return Err(Error::invalid(format!("field `{field}` contains a tab or newline")));
                }
            }
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Integrity(format!("duplicate path `{}`", r.path)));
            }
        }
        Ok(())
    }

    pub fn sort_canonical(&mut self) {
        self.records.sort_by(|a, b| a.path.cmp(&b.path));
    }

    /// Image count per identity.
    pub fn identity_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.identity.as_str()).or_insert(0) += 1;
        }
        m
    }

    pub fn identity_count(&self) -> usize {
        self.identity_counts().len()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER}\n#crop_size={}x{}\n",
            self.crop_size.0, self.crop_size.1
        );
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            other => {
                return Err(Error::invalid(format!(
                    "not a manifest: header `{}`",
                    other.unwrap_or("")
                )))
            }
        }
        let mut m = DatasetManifest::new(DEFAULT_CROP);
        for (n, line) in lines.enumerate() {
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.strip_prefix("crop_size=") {
                    m.crop_size = parse_crop(v)?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let rec = ManifestRecord::from_line(line)
                .map_err(|e| Error::invalid(format!("manifest line {}: {e}", n + 2)))?;
            m.records.push(rec);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        fs::write(path, self.to_text()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text)
    }
}

/// Parses `HxW`.
pub fn parse_crop(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("bad crop size `{s}`, expected HxW"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let crop = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if crop.0 == 0 || crop.1 == 0 {
        return Err(bad());
    }
    Ok(crop)
}

fn check_component(kind: &str, s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s != "."
        && s != ".."
        && !s.contains(['/', '\\', '\t', '\n', '\0']);
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("{kind} `{s}` is not usable as a path component")))
    }
}

/// Writes every kept sample under `out_dir/<source>/<identity>/` resized to
/// `crop`, then writes `out_dir/manifest.tsv`.
pub fn assemble(reports: &[FilterReport], out_dir: &Path, crop: (usize, usize)) -> Result<DatasetManifest> {
    if crop.0 == 0 || crop.1 == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let mut manifest = DatasetManifest::new(crop);
    let mut jobs: Vec<(String, &Image)> = Vec::new();
    let mut paths = BTreeSet::new();
    for report in reports {
        for s in &report.kept {
            let sample = &s.sample;
            check_component("identity", &sample.identity)?;
            check_component("source", &sample.source)?;
            check_component("sample id", &sample.sample_id)?;
            let path = format!("{}/{}/{}.ppm", sample.source, sample.identity, sample.sample_id);
            if !paths.insert(path.clone()) {
                return Err(Error::Integrity(format!("two samples map to `{path}`")));
            }
            manifest.records.push(ManifestRecord {
                path: path.clone(),
                identity: sample.identity.clone(),
                source: sample.source.clone(),
                camera: sample.camera,
                filter_kind: Some(s.kind),
                score: s.score,
                split: Split::Train,
            });
            jobs.push((path, &sample.image));
        }
    }
    manifest.validate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    jobs.par_iter().try_for_each(|(rel, image)| -> Result<()> {
        let path = out_dir.join(rel);
        let dir = path.parent().expect("relative path has a parent");
        fs::create_dir_all(dir).at(dir)?;
        let bytes = image.resize(crop.0, crop.1)?.encode_pnm()?;
        fs::write(&path, bytes).at(&path)
    })?;
    manifest.sort_canonical();
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Resolves a record's path against the directory holding the manifest.
pub fn record_path(manifest_dir: &Path, record: &ManifestRecord) -> PathBuf {
    manifest_dir.join(&record.path)
}

// ---------------------------------------------------------------------------
// Distribution statistics

/// Points `(X, Y)`: `Y`% of identities have fewer than `X` images.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionCurve {
    pub points: Vec<(u64, f64)>,
}

impl DistributionCurve {
    /// Two-column numeric text.
    pub fn to_text(&self) -> String {
        self.points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }
}

pub fn compute_identity_cdf(manifest: &DatasetManifest, thresholds: &[u64]) -> Result<DistributionCurve> {
    if manifest.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let mut counts: Vec<u64> = manifest.identity_counts().values().map(|&c| c as u64).collect();
    counts.sort_unstable();
    let n = counts.len() as f64;
    let mut xs = thresholds.to_vec();
    xs.sort_unstable();
    xs.dedup();
    let points = xs
        .into_iter()
        .map(|x| {
            let below = counts.partition_point(|&c| c < x);
            (x, 100.0 * below as f64 / n)
        })
        .collect();
    Ok(DistributionCurve { points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub images: usize,
    pub identities: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsOptions {
    /// Inclusive count range `[lo, hi]`.
    pub range: (usize, usize),
    /// Identities with strictly more images than this.
    pub above: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            range: (70, 210),
            above: 130,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub images: usize,
    pub identities: usize,
    pub mean_per_identity: f64,
    pub cameras: usize,
    pub crop_size: (usize, usize),
    pub per_source: BTreeMap<String, SourceStats>,
    pub range: (usize, usize),
    pub in_range: usize,
    pub range_share: f64,
    pub above: usize,
    pub above_count: usize,
    pub above_share: f64,
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}: {v}\n"));
        kv("images", self.images.to_string());
        kv("scene", if self.cameras == 0 { "vary".into() } else { self.cameras.to_string() });
        kv("person_ids", self.identities.to_string());
        kv("labeled", "yes".into());
        kv("environment", "vary".into());
        kv("crop_size", format!("{}x{}", self.crop_size.0, self.crop_size.1));
        kv("mean_images_per_id", format!("{:.4}", self.mean_per_identity));
        kv(
            &format!("share_ids_in_[{},{}]", self.range.0, self.range.1),
            format!("{:.4}", self.range_share),
        );
        kv(&format!("share_ids_above_{}", self.above), format!("{:.4}", self.above_share));
        for (src, st) in &self.per_source {
            kv(&format!("source.{src}.images"), st.images.to_string());
            kv(&format!("source.{src}.person_ids"), st.identities.to_string());
        }
        s
    }
}

pub fn stats_report(manifest: &DatasetManifest, opts: &StatsOptions) -> Result<StatsReport> {
    manifest.validate()?;
    let counts = manifest.identity_counts();
    let identities = counts.len();
    let share = |k: usize| if identities == 0 { 0.0 } else { k as f64 / identities as f64 };
    let in_range = counts
        .values()
        .filter(|&&c| opts.range.0 <= c && c <= opts.range.1)
        .count();
    let above_count = counts.values().filter(|&&c| c > opts.above).count();

    let mut per_source: BTreeMap<String, (usize, BTreeSet<&str>)> = BTreeMap::new();
    let mut cameras = BTreeSet::new();
    for r in &manifest.records {
        let e = per_source.entry(r.source.clone()).or_default();
        e.0 += 1;
        e.1.insert(&r.identity);
        if let Some(c) = r.camera {
            cameras.insert((r.source.as_str(), c));
        }
    }
    Ok(StatsReport {
        images: manifest.len(),
        identities,
        mean_per_identity: mean_images_per_identity(manifest.len(), identities),
        cameras: cameras.len(),
        crop_size: manifest.crop_size,
        per_source: per_source
            .into_iter()
            .map(|(k, (images, ids))| {
                (
                    k,
                    SourceStats {
                        images,
                        identities: ids.len(),
                    },
                )
            })
            .collect(),
        range: opts.range,
        in_range,
        range_share: share(in_range),
        above: opts.above,
        above_count,
        above_share: share(above_count),
    })
}

pub fn mean_images_per_identity(images: usize, identities: usize) -> f64 {
    if identities == 0 {
        0.0
    } else {
        images as f64 / identities as f64
    }
}

// ---------------------------------------------------------------------------
// Rebalancing

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeficiencyReport {
    /// Identities below the minimum with their counts.
    pub below_min: Vec<(String, usize)>,
}

/// Caps each identity at `max_per_id` images, keeping the highest scores
/// (ties resolved by a seeded shuffle). Identities under `min_per_id` are
/// reported, never padded.
pub fn rebalance(
    manifest: &DatasetManifest,
    max_per_id: usize,
    min_per_id: usize,
    seed: u64,
) -> Result<(DatasetManifest, DeficiencyReport)> {
    if max_per_id < min_per_id {
        return Err(Error::invalid(format!(
            "max_per_id {max_per_id} is below min_per_id {min_per_id}"
        )));
    }
    let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_id.entry(&r.identity).or_default().push(i);
    }
    let mut keep = vec![false; manifest.len()];
    let mut report = DeficiencyReport::default();
    for (id, mut idx) in by_id {
        if idx.len() < min_per_id {
            report.below_min.push((id.to_string(), idx.len()));
        }
        if idx.len() > max_per_id {
            idx.shuffle(&mut rng(derive_seed_str(seed, id)));
            idx.sort_by(|&a, &b| manifest.records[b].score.total_cmp(&manifest.records[a].score));
            idx.truncate(max_per_id);
        }
        for i in idx {
            keep[i] = true;
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Ok((
        DatasetManifest {
            records,
            ..manifest.clone()
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{apply_threshold, GeneratedSample, ScoredSample};
    use crate::image::ImageShape;

    fn rec(path: &str, id: &str, score: f64) -> ManifestRecord {
        ManifestRecord {
            path: path.into(),
            identity: id.into(),
            source: "src".into(),
            camera: None,
            filter_kind: Some(FilterKind::ReidCtf),
            score,
            split: Split::Train,
        }
    }

    fn manifest(counts: &[(&str, usize)]) -> DatasetManifest {
        let mut m = DatasetManifest::new(DEFAULT_CROP);
        for (id, n) in counts {
            for i in 0..*n {
                m.records.push(rec(&format!("{id}/{i}"), id, 0.5));
            }
        }
        m
    }

    fn report(samples: &[(&str, &str)]) -> FilterReport {
        let scored = samples
            .iter()
            .enumerate()
            .map(|(i, (id, sid))| {
                let mut s = GeneratedSample::new(
                    id,
                    "toy",
                    "p",
                    i as u64,
                    Image::filled(ImageShape::new(3, 8, 4), i as f32 / 10.0),
                );
                s.sample_id = sid.to_string();
                ScoredSample {
                    sample: s,
                    kind: FilterKind::ReidCtf,
                    score: 0.9,
                }
            })
            .collect();
        apply_threshold(scored, 0.5).unwrap()
    }

    #[test]
    fn empty_assembly_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let m = assemble(&[], dir.path(), DEFAULT_CROP).unwrap();
        assert!(m.is_empty());
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.starts_with(MANIFEST_HEADER));
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn assembly_writes_files_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let reports = [report(&[("a", "s0"), ("b", "s1")]), report(&[("a", "s2")])];
        let m = assemble(&reports, dir.path(), (16, 8)).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.identity_count(), 2);
        for r in &m.records {
            let img = Image::load(&dir.path().join(&r.path)).unwrap();
            assert_eq!(img.shape(), ImageShape::new(3, 16, 8));
        }
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        let reordered = [reports[1].clone(), reports[0].clone()];
        assemble(&reordered, dir.path(), (16, 8)).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first);
    }

    #[test]
    fn path_collision_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(&[("a", "s0"), ("a", "s0")]);
        assert!(matches!(assemble(&[r], dir.path(), DEFAULT_CROP), Err(Error::Integrity(_))));
    }

    #[test]
    fn manifest_round_trip_with_cameras_and_real_rows() {
        let mut m = manifest(&[("a", 2)]);
        m.records[0].camera = Some(3);
        m.records[1].filter_kind = None;
        m.records[1].split = Split::Query;
        m.crop_size = (64, 32);
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        assert!(DatasetManifest::parse("nope\n").is_err());
    }

    #[test]
    fn cdf_hand_cases() {
        let m = manifest(&[("a", 1), ("b", 2), ("c", 3)]);
        let c = compute_identity_cdf(&m, &[1, 2, 4]).unwrap();
        assert_eq!(c.points[0], (1, 0.0));
        assert!((c.points[1].1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.points[2], (4, 100.0));
        assert!(compute_identity_cdf(&DatasetManifest::new(DEFAULT_CROP), &[1]).is_err());
    }

    #[test]
    fn stats_range_is_inclusive() {
        let m = manifest(&[("a", 2), ("b", 2)]);
        let s = stats_report(
            &m,
            &StatsOptions {
                range: (1, 2),
                above: 1,
            },
        )
        .unwrap();
        assert_eq!(s.range_share, 1.0);
        assert_eq!(s.above_share, 1.0);
        assert_eq!(s.images, 4);
        assert!(s.to_text().contains("person_ids: 2"));
    }

    #[test]
    fn rebalance_keeps_top_scores() {
        let mut m = manifest(&[("a", 5)]);
        for (r, s) in m.records.iter_mut().zip([0.3, 0.9, 0.1, 0.7, 0.5]) {
            r.score = s;
        }
        let (out, rep) = rebalance(&m, 3, 0, 1).unwrap();
        let mut kept: Vec<f64> = out.records.iter().map(|r| r.score).collect();
        kept.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(kept, vec![0.9, 0.7, 0.5]);
        assert!(rep.below_min.is_empty());

        let (same, _) = rebalance(&m, usize::MAX, 0, 1).unwrap();
        assert_eq!(same, m);
        let (_, rep) = rebalance(&m, 10, 6, 1).unwrap();
        assert_eq!(rep.below_min, vec![("a".to_string(), 5)]);
        assert!(rebalance(&m, 1, 2, 1).is_err());
    }
}
