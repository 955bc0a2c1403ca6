//! Text cleaning, vocabulary and the document encoders.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use rand::Rng;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Element, Graph, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Default English stopword list, one token per line.
pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    stopwords: HashSet<String>,
    pub max_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(DEFAULT_STOPWORDS, 256)
    }
}

impl Tokenizer {
    pub fn new(stopwords: &str, max_len: usize) -> Self {
        let stopwords = stopwords
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Tokenizer { stopwords, max_len }
    }

    pub fn stopwords(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.stopwords.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    /// NFC-normalizes, lowercases, turns every non-alphanumeric character into
    /// a separator, splits, and drops stopwords.
    pub fn clean(&self, text: &str) -> Vec<String> {
        let normalized: String = text
            .nfc()
            .flat_map(char::to_lowercase)
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect();
        normalized
            .split_whitespace()
            .filter(|w| !self.stopwords.contains(*w))
            .map(str::to_string)
            .collect()
    }

    /// Token ids for `text`, truncated to `max_len`. Never empty: a document
    /// with no surviving tokens becomes a single UNK.
    pub fn encode(&self, vocab: &Vocabulary, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> =
            self.clean(text).iter().take(self.max_len).map(|w| vocab.id(w)).collect();
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from already-cleaned documents. Tokens seen fewer
    /// than `min_count` times are left out (they map to UNK). Ids follow
    /// descending count, ties broken lexicographically.
    pub fn build<'a, I, D>(docs: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut n_docs = 0;
        for doc in docs {
            n_docs += 1;
            for w in doc {
                *counts.entry(w).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = [PAD_TOKEN, UNK_TOKEN]
            .into_iter()
            .chain(kept.into_iter().map(|(w, _)| w))
            .map(str::to_string)
            .collect();
        Ok(Self::from_tokens(tokens, min_count))
    }

    /// Rebuilds from a stored id-ordered token list (PAD and UNK first).
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { tokens, index, min_count }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Anything that maps a batch of token-id sequences to one feature matrix per
/// document (rows × [`TextEncoder::output_dim`]).
pub trait TextEncoder {
    fn output_dim(&self) -> usize;

    fn encode_batch<F: Element>(&self, g: &mut Graph<'_, F>, docs: &[&[usize]]) -> Result<Vec<Var>>;

    fn encode<F: Element>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        Ok(self.encode_batch(g, &[ids])?.remove(0))
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub hidden: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruCell {
    /// Registers a cell's weights. Gates are packed as reset, update, candidate
    /// along the columns.
    pub fn register<F: Element>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(GruCell {
            hidden,
            w_ih: store.add_uniform(&format!("{prefix}.w_ih"), (input, 3 * hidden), bound, rng)?,
            w_hh: store.add_uniform(&format!("{prefix}.w_hh"), (hidden, 3 * hidden), bound, rng)?,
            b_ih: store.add_uniform(&format!("{prefix}.b_ih"), (1, 3 * hidden), bound, rng)?,
            b_hh: store.add_uniform(&format!("{prefix}.b_hh"), (1, 3 * hidden), bound, rng)?,
        })
    }

    pub fn lookup<F: Element>(store: &ParameterStore<F>, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing {prefix}.{n}")))
        };
        let w_hh = get("w_hh")?;
        Ok(GruCell {
            hidden: store.value(w_hh).nrows(),
            w_ih: get("w_ih")?,
            w_hh,
            b_ih: get("b_ih")?,
            b_hh: get("b_hh")?,
        })
    }

    /// Input projection for every timestep at once: `X W_ih + b_ih`.
    pub fn project_inputs<F: Element>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w_ih), g.param(self.b_ih));
        let xp = g.matmul(x, w)?;
        g.add_row(xp, b)
    }

    /// One recurrence step given the projected input `xp` (rows × 3h).
    ///
    /// ```text
    /// r  = σ(xp_r + h W_hr + b_hr)
    /// z  = σ(xp_z + h W_hz + b_hz)
    /// n  = tanh(xp_n + r ∘ (h W_hn + b_hn))
    /// h' = (1 - z) ∘ n + z ∘ h
    /// ```
    pub fn step<F: Element>(&self, g: &mut Graph<'_, F>, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let (w, b) = (g.param(self.w_hh), g.param(self.b_hh));
        let hp = g.matmul(h, w)?;
        let hp = g.add_row(hp, b)?;
        let xr = g.slice_cols(xp, 0, hd)?;
        let xz = g.slice_cols(xp, hd, 2 * hd)?;
        let xn = g.slice_cols(xp, 2 * hd, 3 * hd)?;
        let hr = g.slice_cols(hp, 0, hd)?;
        let hz = g.slice_cols(hp, hd, 2 * hd)?;
        let hn = g.slice_cols(hp, 2 * hd, 3 * hd)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }
}

/// Single-layer bidirectional GRU over word embeddings. Row `n` of the output
/// is the forward state after token `n` next to the backward state after
/// reading from the end down to token `n`.
#[derive(Clone, Debug)]
pub struct GruEncoder {
    embed: ParamId,
    forward: GruCell,
    backward: GruCell,
}

impl GruEncoder {
    pub fn register<F: Element>(
        store: &mut ParameterStore<F>,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.add_normal(
            "encoder.embed",
            (vocab_size, embed_dim),
            (embed_dim as f64).powf(-0.5),
            rng,
        )?;
        let forward = GruCell::register(store, "encoder.fwd", embed_dim, hidden, rng)?;
        let backward = GruCell::register(store, "encoder.bwd", embed_dim, hidden, rng)?;
        Ok(GruEncoder { embed, forward, backward })
    }

    pub fn lookup<F: Element>(store: &ParameterStore<F>) -> Result<Self> {
        Ok(GruEncoder {
            embed: store
                .id("encoder.embed")
                .ok_or_else(|| Error::IncompatibleCheckpoint("missing encoder.embed".into()))?,
            forward: GruCell::lookup(store, "encoder.fwd")?,
            backward: GruCell::lookup(store, "encoder.bwd")?,
        })
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    fn run_direction<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        cell: &GruCell,
        xp: Var,
        valid: &[Vec<bool>],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let steps = valid.len();
        let b = valid.first().map_or(0, Vec::len);
        let mut h = g.constant(Array2::zeros((b, cell.hidden)));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = g.slice_rows(xp, t * b, (t + 1) * b)?;
            let next = cell.step(g, xt, h)?;
            // padded rows keep their previous state
            h = if valid[t].iter().all(|&v| v) { next } else { g.select_rows(&valid[t], next, h)? };
            out[t] = h;
        }
        Ok(out)
    }
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(&bad) => Err(Error::UnknownToken(bad)),
        None => Ok(()),
    }
}

impl TextEncoder for GruEncoder {
    fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    fn encode_batch<F: Element>(&self, g: &mut Graph<'_, F>, docs: &[&[usize]]) -> Result<Vec<Var>> {
        let vocab = g.store().value(self.embed).nrows();
        for d in docs {
            if d.is_empty() {
                return Err(Error::ShapeError("empty document".into()));
            }
            check_ids(d, vocab)?;
        }
        let b = docs.len();
        let steps = docs.iter().map(|d| d.len()).max().unwrap_or(0);
        // time-major: row t*b + i holds token t of document i
        let mut idx = Vec::with_capacity(steps * b);
        let mut valid = Vec::with_capacity(steps);
        for t in 0..steps {
            valid.push(docs.iter().map(|d| t < d.len()).collect::<Vec<_>>());
            idx.extend(docs.iter().map(|d| d.get(t).copied().unwrap_or(PAD)));
        }
        let table = g.param(self.embed);
        let x = g.gather_rows(table, &idx)?;
        let xf = self.forward.project_inputs(g, x)?;
        let xb = self.backward.project_inputs(g, x)?;
        let fwd = self.run_direction(g, &self.forward, xf, &valid, false)?;
        let bwd = self.run_direction(g, &self.backward, xb, &valid, true)?;
        let fwd = g.concat_rows(&fwd)?;
        let bwd = g.concat_rows(&bwd)?;
        let all = g.concat_cols(&[fwd, bwd])?;
        docs.iter()
            .enumerate()
            .map(|(i, d)| {
                let rows: Vec<usize> = (0..d.len()).map(|t| t * b + i).collect();
                g.gather_rows(all, &rows)
            })
            .collect()
    }
}

/// Mean of the word embeddings, as a single feature row. Cheap stand-in for
/// the GRU in tests.
#[derive(Clone, Debug)]
pub struct MeanPoolEncoder {
    embed: ParamId,
    dim: usize,
}

impl MeanPoolEncoder {
    pub fn register<F: Element>(
        store: &mut ParameterStore<F>,
        vocab_size: usize,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.add_normal(
            "encoder.embed",
            (vocab_size, embed_dim),
            (embed_dim as f64).powf(-0.5),
            rng,
        )?;
        Ok(MeanPoolEncoder { embed, dim: embed_dim })
    }

    pub fn lookup<F: Element>(store: &ParameterStore<F>) -> Result<Self> {
        let embed = store
            .id("encoder.embed")
            .ok_or_else(|| Error::IncompatibleCheckpoint("missing encoder.embed".into()))?;
        Ok(MeanPoolEncoder { embed, dim: store.value(embed).ncols() })
    }
}

impl TextEncoder for MeanPoolEncoder {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode_batch<F: Element>(&self, g: &mut Graph<'_, F>, docs: &[&[usize]]) -> Result<Vec<Var>> {
        let vocab = g.store().value(self.embed).nrows();
        let table = g.param(self.embed);
        docs.iter()
            .map(|d| {
                if d.is_empty() {
                    return Err(Error::ShapeError("empty document".into()));
                }
                check_ids(d, vocab)?;
                let rows = g.gather_rows(table, d)?;
                let avg = g.constant(Array2::from_elem((1, d.len()), F::c(1.0 / d.len() as f64)));
                g.matmul(avg, rows)
            })
            .collect()
    }
}
