//! Exact retrieval metrics: mean average precision and the cumulative match
//! characteristic, with the usual cross-camera exclusion.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::cosine;

/// Identity and (optional) camera of a query or gallery item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalEntry {
    pub identity: String,
    pub camera: Option<u32>,
}

impl RetrievalEntry {
    pub fn new(identity: impl Into<String>, camera: Option<u32>) -> Self {
        Self {
            identity: identity.into(),
            camera,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalInstance {
    pub queries: Vec<RetrievalEntry>,
    pub gallery: Vec<RetrievalEntry>,
    /// Row-major `queries x gallery` similarities.
    pub similarity: Vec<Vec<f64>>,
    /// Drop same-identity gallery items seen by the query's own camera.
    pub cross_camera: bool,
}

impl RetrievalInstance {
    pub fn new(
        queries: Vec<RetrievalEntry>,
        gallery: Vec<RetrievalEntry>,
        similarity: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if similarity.len() != queries.len() || similarity.iter().any(|r| r.len() != gallery.len())
        {
            return Err(Error::invalid(format!(
                "similarity matrix does not match {} queries x {} gallery items",
                queries.len(),
                gallery.len()
            )));
        }
        Ok(Self {
            queries,
            gallery,
            similarity,
            cross_camera: true,
        })
    }

    pub fn with_cross_camera(mut self, on: bool) -> Self {
        self.cross_camera = on;
        self
    }

    fn excluded(&self, q: usize, g: usize) -> bool {
        let (qe, ge) = (&self.queries[q], &self.gallery[g]);
        self.cross_camera
            && qe.identity == ge.identity
            && matches!((qe.camera, ge.camera), (Some(a), Some(b)) if a == b)
    }

    /// Relevance flags down the ranking of query `q`, or `None` when the
    /// query has no relevant gallery item left after exclusion.
    pub fn relevance(&self, q: usize) -> Option<Vec<bool>> {
        let row = &self.similarity[q];
        let mut order: Vec<usize> = (0..self.gallery.len())
            .filter(|&g| !self.excluded(q, g))
            .collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let rel: Vec<bool> = order
            .iter()
            .map(|&g| self.gallery[g].identity == self.queries[q].identity)
            .collect();
        rel.contains(&true).then_some(rel)
    }

    fn valid_relevance(&self) -> Result<Vec<Vec<bool>>> {
        let per: Vec<Option<Vec<bool>>> = (0..self.queries.len())
            .into_par_iter()
            .map(|q| self.relevance(q))
            .collect();
        let valid: Vec<Vec<bool>> = per.into_iter().flatten().collect();
        if valid.is_empty() {
            return Err(Error::invalid("no query has a relevant gallery item"));
        }
        Ok(valid)
    }
}

/// Average precision of one ranked relevance list.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn compute_map(inst: &RetrievalInstance) -> Result<f64> {
    let valid = inst.valid_relevance()?;
    let aps: Vec<f64> = valid.par_iter().map(|r| average_precision(r)).collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `cmc[r - 1]` is the fraction of valid queries whose first relevant item
/// sits at rank `<= r`.
pub fn compute_cmc(inst: &RetrievalInstance, max_rank: usize) -> Result<Vec<f64>> {
    if max_rank == 0 {
        return Err(Error::invalid("max_rank must be >= 1"));
    }
    let valid = inst.valid_relevance()?;
    let mut counts = vec![0usize; max_rank];
    for rel in &valid {
        let first = rel.iter().position(|&r| r).unwrap();
        if first < max_rank {
            counts[first] += 1;
        }
    }
    let n = valid.len() as f64;
    let mut acc = 0usize;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub map_score: f64,
    pub cmc: Vec<f64>,
}

impl RetrievalResult {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc
            .get(r.saturating_sub(1))
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    /// Key-value report: map, rank1, rank5, rank10.
    pub fn report(&self) -> String {
        let mut s = String::new();
        writeln!(s, "map\t{:.6}", self.map_score).unwrap();
        for r in [1, 5, 10] {
            writeln!(s, "rank{r}\t{:.6}", self.rank(r)).unwrap();
        }
        s
    }
}

pub const DEFAULT_MAX_RANK: usize = 10;

pub fn evaluate(inst: &RetrievalInstance, max_rank: usize) -> Result<RetrievalResult> {
    Ok(RetrievalResult {
        map_score: compute_map(inst)?,
        cmc: compute_cmc(inst, max_rank)?,
    })
}

pub fn cosine_similarity_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let width = queries
        .first()
        .or(gallery.first())
        .map(Vec::len)
        .unwrap_or(0);
    if queries.iter().chain(gallery).any(|v| v.len() != width) {
        return Err(Error::invalid("embedding widths differ"));
    }
    Ok(queries
        .par_iter()
        .map(|q| gallery.iter().map(|g| cosine(q, g)).collect())
        .collect())
}

/// Cosine-similarity retrieval over embeddings.
pub fn evaluate_embeddings(
    query_embs: &[Vec<f64>],
    gallery_embs: &[Vec<f64>],
    queries: Vec<RetrievalEntry>,
    gallery: Vec<RetrievalEntry>,
    cross_camera: bool,
    max_rank: usize,
) -> Result<RetrievalResult> {
    if query_embs.len() != queries.len() || gallery_embs.len() != gallery.len() {
        return Err(Error::invalid("embedding counts do not match entry counts"));
    }
    let sim = cosine_similarity_matrix(query_embs, gallery_embs)?;
    let inst = RetrievalInstance::new(queries, gallery, sim)?.with_cross_camera(cross_camera);
    evaluate(&inst, max_rank)
}

/// Retrieval over two embedding-injection files (no camera information).
pub fn evaluate_injected(query_text: &str, gallery_text: &str, max_rank: usize) -> Result<RetrievalResult> {
    let q = crate::filter::parse_embedding_records(query_text)?;
    let g = crate::filter::parse_embedding_records(gallery_text)?;
    let entries = |v: &[crate::filter::EmbeddingRecord]| {
        v.iter()
            .map(|r| RetrievalEntry::new(r.identity.clone(), None))
            .collect::<Vec<_>>()
    };
    let (qe, ge) = (entries(&q), entries(&g));
    let qv: Vec<Vec<f64>> = q.into_iter().map(|r| r.embedding).collect();
    let gv: Vec<Vec<f64>> = g.into_iter().map(|r| r.embedding).collect();
    evaluate_embeddings(&qv, &gv, qe, ge, false, max_rank)
}
