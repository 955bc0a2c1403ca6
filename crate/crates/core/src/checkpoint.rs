//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HIDECKPT"                 8 bytes magic
//! version                    u32
//! manifest_len               u64
//! manifest                   manifest_len bytes of UTF-8 text
//! payload                    raw arrays and blobs, offsets relative to here
//! sha256                     32 bytes over everything above
//! ```
//!
//! The manifest is `key=value` lines. `tensor=` lines read
//! `name rows cols offset`; each tensor occupies `rows*cols*width` bytes in
//! row-major order, with `width` given by `dtype`. `blob=` lines read
//! `name offset len` and hold UTF-8 text (the taxonomy file and the
//! vocabulary, one token per line).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::encoder::{Tokenizer, Vocabulary, DEFAULT_STOPWORDS};
use crate::error::{Error, Result};
use crate::model::HiDec;
use crate::params::ParameterStore;
use crate::taxonomy::Taxonomy;
use crate::tensor::Element;
use crate::training::{ModelBundle, Precision, TrainConfig};

pub const MAGIC: &[u8; 8] = b"HIDECKPT";
pub const VERSION: u32 = 1;
const HASH_LEN: usize = 32;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Serializes a bundle to bytes.
pub fn to_bytes<F: Element>(bundle: &ModelBundle<F>) -> Vec<u8> {
    let mut manifest = String::new();
    let mut payload: Vec<u8> = Vec::new();
    manifest.push_str(&format!("dtype={}\n", F::DTYPE));
    manifest.push_str(&format!("taxonomy_hash={}\n", bundle.taxonomy.content_hash()));
    manifest.push_str(&format!("vocab_min_count={}\n", bundle.vocab.min_count));
    for line in bundle.config.to_kv().lines() {
        let (k, v) = line.split_once(" = ").expect("kv line");
        manifest.push_str(&format!("config.{k}={v}\n"));
    }
    let mut blob = |name: &str, text: &str, manifest: &mut String| {
        manifest.push_str(&format!("blob={name} {} {}\n", payload.len(), text.len()));
        payload.extend_from_slice(text.as_bytes());
    };
    blob("taxonomy", &bundle.taxonomy.to_tsv(), &mut manifest);
    let vocab: String = bundle.vocab.tokens().iter().map(|t| format!("{t}\n")).collect();
    blob("vocab", &vocab, &mut manifest);
    let stopwords: String = bundle.tokenizer.stopwords().iter().map(|t| format!("{t}\n")).collect();
    blob("stopwords", &stopwords, &mut manifest);
    for (_, p) in bundle.store.iter() {
        let (r, c) = p.value.dim();
        manifest.push_str(&format!("tensor={} {r} {c} {}\n", p.name, payload.len()));
        for &x in p.value.iter() {
            x.put_le(&mut payload);
        }
    }

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len() + HASH_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint<F: Element>(bundle: &ModelBundle<F>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(bundle))?;
    Ok(())
}

/// Parsed manifest and payload of a verified checkpoint.
#[derive(Clone, Debug)]
pub struct RawCheckpoint {
    pub dtype: String,
    pub taxonomy_hash: String,
    entries: Vec<(String, String)>,
    payload: Vec<u8>,
}

impl RawCheckpoint {
    fn first(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("manifest lacks {key}")))
    }

    fn all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn blob(&self, name: &str) -> Result<&str> {
        for v in self.all("blob") {
            let f: Vec<&str> = v.split(' ').collect();
            if f.len() == 3 && f[0] == name {
                let (off, len) = (parse_num(f[1])?, parse_num(f[2])?);
                let bytes = self
                    .payload
                    .get(off..off + len)
                    .ok_or_else(|| Error::IncompatibleCheckpoint(format!("blob {name} out of range")))?;
                return std::str::from_utf8(bytes)
                    .map_err(|_| Error::IncompatibleCheckpoint(format!("blob {name} is not UTF-8")));
            }
        }
        Err(Error::IncompatibleCheckpoint(format!("missing blob {name}")))
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.entries {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
            }
        }
        Ok(cfg)
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let t = Taxonomy::parse(self.blob("taxonomy")?)?;
        if t.content_hash() != self.taxonomy_hash {
            return Err(Error::ChecksumError("embedded taxonomy does not match its hash".into()));
        }
        Ok(t)
    }

    fn store<F: Element>(&self) -> Result<ParameterStore<F>> {
        let width = match self.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            d => return Err(Error::IncompatibleCheckpoint(format!("unknown dtype {d}"))),
        };
        let mut store = ParameterStore::default();
        for v in self.all("tensor") {
            let f: Vec<&str> = v.split(' ').collect();
            if f.len() != 4 {
                return Err(Error::IncompatibleCheckpoint(format!("bad tensor entry {v:?}")));
            }
            let (r, c, off) = (parse_num(f[1])?, parse_num(f[2])?, parse_num(f[3])?);
            let bytes = self
                .payload
                .get(off..off + r * c * width)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("tensor {} out of range", f[0])))?;
            let values: Vec<F> = bytes
                .chunks_exact(width)
                .map(|b| if width == 4 { F::c(f32::get_le(b) as f64) } else { F::c(f64::get_le(b)) })
                .collect();
            let arr = Array2::from_shape_vec((r, c), values).map_err(|e| Error::ShapeError(e.to_string()))?;
            store.add(f[0], arr)?;
        }
        Ok(store)
    }
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::IncompatibleCheckpoint(format!("bad number {s:?}")))
}

/// Verifies the checksum and version, then parses the manifest.
pub fn read_raw(bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < HEADER_LEN + HASH_LEN {
        return Err(Error::ChecksumError("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumError("SHA-256 mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::IncompatibleCheckpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!("format version {version}, expected {VERSION}")));
    }
    let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let manifest = body
        .get(HEADER_LEN..HEADER_LEN + mlen)
        .and_then(|m| std::str::from_utf8(m).ok())
        .ok_or_else(|| Error::IncompatibleCheckpoint("unreadable manifest".into()))?;
    let entries: Vec<(String, String)> = manifest
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut raw = RawCheckpoint {
        dtype: String::new(),
        taxonomy_hash: String::new(),
        entries,
        payload: body[HEADER_LEN + mlen..].to_vec(),
    };
    raw.dtype = raw.first("dtype")?.to_string();
    raw.taxonomy_hash = raw.first("taxonomy_hash")?.to_string();
    Ok(raw)
}

/// Element type a checkpoint was written with.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<Precision> {
    read_raw(&fs::read(path)?)?.dtype.parse()
}

/// Rebuilds a bundle from bytes. With `expected` given, its content hash must
/// match the one the model was trained on.
pub fn from_bytes<F: Element>(bytes: &[u8], expected: Option<&Taxonomy>) -> Result<ModelBundle<F>> {
    let raw = read_raw(bytes)?;
    if let Some(t) = expected {
        if t.content_hash() != raw.taxonomy_hash {
            return Err(Error::TaxonomyMismatch);
        }
    }
    let taxonomy = raw.taxonomy()?;
    let config = raw.config()?;
    let min_count = parse_num(raw.first("vocab_min_count")?)?;
    let vocab = Vocabulary::from_tokens(raw.blob("vocab")?.lines().map(str::to_string).collect(), min_count);
    let stopwords = raw.blob("stopwords").map(str::to_string).unwrap_or_else(|_| DEFAULT_STOPWORDS.into());
    let tokenizer = Tokenizer::new(&stopwords, config.max_len);
    let store = raw.store::<F>()?;
    let model = HiDec::bind(config.model_config(), &store, &taxonomy)?;
    Ok(ModelBundle { config, taxonomy, vocab, tokenizer, store, model })
}

pub fn load_checkpoint<F: Element>(path: impl AsRef<Path>, expected: Option<&Taxonomy>) -> Result<ModelBundle<F>> {
    from_bytes(&fs::read(path)?, expected)
}
