use std::collections::BTreeMap;
use std::path::Path;

use diffid_core::dataset::{compute_identity_cdf, stats_report, DatasetManifest, StatsOptions};
use diffid_core::diffusion::{make_schedule, ScheduleKind};
use diffid_core::metrics::{evaluate, RetrievalEntry, RetrievalInstance};
use diffid_core::pipeline::PipelineConfig;
use diffid_core::pretrain::{fs_keep, ss_keep};
use diffid_core::prompt::{build_prompts as build, PromptTemplate};
use diffid_core::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NotFound(_) => PyOSError::new_err(e.to_string()),
        Error::Backend { .. } | Error::Exhausted(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Problems found in a pipeline config; empty when it is valid.
#[pyfunction]
fn validate_config(path: &str) -> PyResult<Vec<String>> {
    match PipelineConfig::load(Path::new(path)) {
        Ok(_) => Ok(Vec::new()),
        Err(Error::Validation(v)) => Ok(v),
        Err(e) => Err(to_py(e)),
    }
}

/// Runs the pipeline; returns the manifest path, counts and failures.
#[pyfunction]
fn run_pipeline(py: Python<'_>, path: &str) -> PyResult<BTreeMap<String, Py<PyAny>>> {
    let cfg = PipelineConfig::load(Path::new(path)).map_err(to_py)?;
    let out = py.detach(|| diffid_core::pipeline::run_pipeline(&cfg)).map_err(to_py)?;
    let mut d = BTreeMap::new();
    d.insert("manifest".into(), out.manifest_path.display().to_string().into_pyobject(py)?.into_any().unbind());
    d.insert("images".into(), out.manifest.len().into_pyobject(py)?.into_any().unbind());
    d.insert("identities".into(), out.manifest.identity_count().into_pyobject(py)?.into_any().unbind());
    d.insert("failed".into(), out.failed.into_pyobject(py)?.into_any().unbind());
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (manifest, range = (70, 210), above = 130))]
fn stats(manifest: &str, range: (usize, usize), above: usize) -> PyResult<BTreeMap<String, String>> {
    let m = DatasetManifest::load(Path::new(manifest)).map_err(to_py)?;
    let report = stats_report(&m, &StatsOptions { range, above }).map_err(to_py)?;
    Ok(report
        .to_text()
        .lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

/// `(x, y)` pairs: `y` percent of identities have fewer than `x` images.
#[pyfunction]
fn identity_cdf(manifest: &str, thresholds: Vec<u64>) -> PyResult<Vec<(u64, f64)>> {
    let m = DatasetManifest::load(Path::new(manifest)).map_err(to_py)?;
    Ok(compute_identity_cdf(&m, &thresholds).map_err(to_py)?.points)
}

/// mAP and CMC for a `queries x gallery` similarity matrix.
#[pyfunction]
#[pyo3(signature = (similarity, query_ids, gallery_ids, query_cams = None, gallery_cams = None, cross_camera = true, max_rank = 50))]
fn evaluate_retrieval(
    similarity: Vec<Vec<f64>>,
    query_ids: Vec<String>,
    gallery_ids: Vec<String>,
    query_cams: Option<Vec<u32>>,
    gallery_cams: Option<Vec<u32>>,
    cross_camera: bool,
    max_rank: usize,
) -> PyResult<(f64, Vec<f64>)> {
    let entries = |ids: Vec<String>, cams: Option<Vec<u32>>| -> PyResult<Vec<RetrievalEntry>> {
        match cams {
            Some(c) if c.len() != ids.len() => Err(PyValueError::new_err("camera and identity lists differ in length")),
            Some(c) => Ok(ids.into_iter().zip(c).map(|(i, c)| RetrievalEntry::new(i, Some(c))).collect()),
            None => Ok(ids.into_iter().map(|i| RetrievalEntry::new(i, None)).collect()),
        }
    };
    let inst = RetrievalInstance::new(entries(query_ids, query_cams)?, entries(gallery_ids, gallery_cams)?, similarity)
        .map_err(to_py)?
        .with_cross_camera(cross_camera);
    let r = evaluate(&inst, max_rank).map_err(to_py)?;
    Ok((r.map_score, r.cmc))
}

/// `(alphas, sigmas)` for `t = 1..=timesteps`.
#[pyfunction]
#[pyo3(signature = (timesteps, kind = "cosine"))]
fn noise_schedule(timesteps: usize, kind: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let kind: ScheduleKind = kind.parse().map_err(to_py)?;
    let s = make_schedule(timesteps, kind).map_err(to_py)?;
    Ok((s.alphas().to_vec(), s.sigmas().to_vec()))
}

/// `(enhanced_prompt, lpe_prompt)` for a caption and identity token.
#[pyfunction]
fn build_prompts(caption: &str, token: &str) -> PyResult<(String, String)> {
    let b = build(caption, token, &PromptTemplate::default()).map_err(to_py)?;
    b.check_invariants().map_err(to_py)?;
    Ok((b.enhanced_prompt, b.lpe_prompt))
}

#[pyfunction]
#[pyo3(name = "fs_keep")]
fn py_fs_keep(fraction: f64, count: usize) -> usize {
    fs_keep(fraction, count)
}

#[pyfunction]
#[pyo3(name = "ss_keep")]
fn py_ss_keep(fraction: f64, identities: usize) -> usize {
    ss_keep(fraction, identities)
}

#[pymodule]
fn diffid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(stats, m)?)?;
    m.add_function(wrap_pyfunction!(identity_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(noise_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(py_fs_keep, m)?)?;
    m.add_function(wrap_pyfunction!(py_ss_keep, m)?)?;
    Ok(())
}
