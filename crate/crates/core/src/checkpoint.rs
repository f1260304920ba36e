//! Versioned checkpoint container shared by the diffusion engine and the
//! pre-training harness: a kind tag, a key=value config block and a flat
//! little-endian f64 parameter vector, sealed with a SHA-256 trailer.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"DIFFIDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: BTreeMap<String, String>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            config: BTreeMap::new(),
            params: Vec::new(),
        }
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Self {
        self.params = params;
        self
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .config
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint is missing `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Integrity(format!("checkpoint key `{key}` has bad value `{raw}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config: String = self
            .config
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let mut out = Vec::with_capacity(64 + config.len() + self.params.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Integrity(format!("checkpoint {what}"));
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("has a bad header"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut cur = Cursor { buf: body, pos: 8 };
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("version {version} is unsupported")));
        }
        let kind_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let kind = String::from_utf8(cur.take(kind_len)?.to_vec())
            .map_err(|_| corrupt("kind is not UTF-8"))?;
        let cfg_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let cfg_text = std::str::from_utf8(cur.take(cfg_len)?)
            .map_err(|_| corrupt("config is not UTF-8"))?;
        let mut config = BTreeMap::new();
        for line in cfg_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt("config line lacks `=`"))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| corrupt("is too large"))?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.pos != body.len() {
            return Err(corrupt("has trailing bytes"));
        }
        Ok(Self {
            kind,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Short content hash used as a model / artifact identifier.
pub fn content_id(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
