//! Attribute reference sets: images the base model draws under the
//! identity-free prompt, used as targets of the prior-preservation term,
//! plus a checksummed on-disk cache for them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::checkpoint::content_id;
use crate::diffusion::{sample, Denoiser, NoiseSchedule};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::prompt::{embed_prompt, PromptBundle};

pub const DEFAULT_REFERENCE_SET_SIZE: usize = 200;
const META_FILE: &str = "meta.txt";
const META_HEADER: &str = "diffid-refset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub images: Vec<Image>,
    /// The identity-free prompt the images were drawn under.
    pub prompt: String,
    pub seeds: Vec<u64>,
    /// Model id of the base checkpoint that produced the images.
    pub source_model_id: String,
}

impl ReferenceSet {
    pub fn empty(bundle: &PromptBundle, base: &Denoiser) -> Self {
        Self {
            images: Vec::new(),
            prompt: bundle.lpe_prompt.clone(),
            seeds: Vec::new(),
            source_model_id: base.model_id(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Draws `n` images from the (not yet fine-tuned) base model under
/// `bundle.lpe_prompt`; image `i` uses seed `seed + i`.
pub fn build_reference_set(
    base_model: &Denoiser,
    bundle: &PromptBundle,
    n: usize,
    seed: u64,
    sample_steps: usize,
    schedule: &NoiseSchedule,
) -> Result<ReferenceSet> {
    if n == 0 {
        return Err(Error::invalid("reference set size must be >= 1"));
    }
    bundle.check_invariants()?;
    let cond = embed_prompt(&bundle.lpe_prompt, base_model.config().cond_dim);
    let seeds: Vec<u64> = (0..n as u64).map(|i| seed.wrapping_add(i)).collect();
    let images = seeds
        .iter()
        .map(|&s| sample(base_model, &cond, s, sample_steps, schedule))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceSet {
        images,
        prompt: bundle.lpe_prompt.clone(),
        seeds,
        source_model_id: base_model.model_id(),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn image_file(i: usize) -> String {
    format!("img_{i:05}.pfm")
}

/// Stores the set under `store/<id>/` (PFM images plus a metadata record
/// with per-file SHA-256 checksums) and returns the id. Identical sets map
/// to the same id; a set already present is left untouched.
pub fn cache_reference_set(set: &ReferenceSet, store: &Path) -> Result<String> {
    if set.images.len() != set.seeds.len() {
        return Err(Error::invalid("reference set has mismatched image and seed counts"));
    }
    if set.prompt.contains(['\n', '\t']) || set.source_model_id.contains(['\n', '\t']) {
        return Err(Error::invalid("reference set metadata may not contain tabs or newlines"));
    }
    let encoded = set
        .images
        .iter()
        .map(Image::encode_pfm)
        .collect::<Result<Vec<_>>>()?;
    let mut meta = format!(
        "{META_HEADER}\nprompt\t{}\nsource_model_id\t{}\ncount\t{}\n",
        set.prompt,
        set.source_model_id,
        set.images.len()
    );
    for (i, (bytes, seed)) in encoded.iter().zip(&set.seeds).enumerate() {
        meta.push_str(&format!(
            "image\t{i}\t{seed}\t{}\t{}\n",
            image_file(i),
            hex(&Sha256::digest(bytes))
        ));
    }
    let id = content_id(meta.as_bytes());
    let target = store.join(&id);
    if target.join(META_FILE).exists() {
        return Ok(id);
    }
    std::fs::create_dir_all(store).at(store)?;

    // Write into a private directory, then rename into place so readers
    // never observe a partial set.
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let tmp = store.join(format!(
        ".tmp-{id}-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&tmp).at(&tmp)?;
    for (i, bytes) in encoded.iter().enumerate() {
        let p = tmp.join(image_file(i));
        std::fs::write(&p, bytes).at(&p)?;
    }
    let mp = tmp.join(META_FILE);
    std::fs::write(&mp, &meta).at(&mp)?;
    match std::fs::rename(&tmp, &target) {
        Ok(()) => Ok(id),
        Err(_) if target.join(META_FILE).exists() => {
            // Another writer stored the same content first.
            let _ = std::fs::remove_dir_all(&tmp);
            Ok(id)
        }
        Err(e) => Err(Error::io(target, e)),
    }
}

pub fn load_reference_set(store: &Path, id: &str) -> Result<ReferenceSet> {
    let dir: PathBuf = store.join(id);
    let mp = dir.join(META_FILE);
    if !mp.exists() {
        return Err(Error::NotFound(format!("reference set `{id}` in {}", store.display())));
    }
    let meta_bytes = std::fs::read(&mp).at(&mp)?;
    if content_id(&meta_bytes) != id {
        return Err(Error::Integrity(format!("metadata of reference set `{id}` was modified")));
    }
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Integrity("reference metadata is not UTF-8".into()))?;
    let bad = |what: &str| Error::Integrity(format!("reference set `{id}`: {what}"));
    let mut lines = meta.lines();
    if lines.next() != Some(META_HEADER) {
        return Err(bad("bad header"));
    }
    let mut field = |key: &str| -> Result<String> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(key))
            .and_then(|l| l.strip_prefix('\t'))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("missing `{key}`")))
    };
    let prompt = field("prompt")?;
    let source_model_id = field("source_model_id")?;
    let count: usize = field("count")?.parse().map_err(|_| bad("bad count"))?;
    let mut images = Vec::with_capacity(count);
    let mut seeds = Vec::with_capacity(count);
    for (expect, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 || cols[0] != "image" || cols[1] != expect.to_string() {
            return Err(bad("malformed image record"));
        }
        let seed: u64 = cols[2].parse().map_err(|_| bad("bad seed"))?;
        let path = dir.join(cols[3]);
        let bytes = std::fs::read(&path).map_err(|_| bad(&format!("missing {}", cols[3])))?;
        if hex(&Sha256::digest(&bytes)) != cols[4] {
            return Err(bad(&format!("checksum mismatch in {}", cols[3])));
        }
        images.push(Image::decode_pfm(&bytes)?);
        seeds.push(seed);
    }
    if images.len() != count {
        return Err(bad("image count does not match header"));
    }
    Ok(ReferenceSet {
        images,
        prompt,
        seeds,
        source_model_id,
    })
}
