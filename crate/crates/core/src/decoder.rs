//! The hierarchy decoder: token and level embeddings, a stack of attentive
//! layers (masked self-attention, text cross-attention, feed-forward) and
//! child scoring against the tied token embedding table.

use ndarray::Array2;
use rand::Rng;

use crate::codec::{build_mask_with_mode, MaskMode, SubHierSequence, Token};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::taxonomy::{Candidate, Taxonomy};
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub embed_dropout: f64,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    /// Adds the sub-layer input back to each sub-layer output. Off by default.
    pub residual: bool,
    pub level_embedding: bool,
    pub mask_mode: MaskMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            heads: 2,
            layers: 2,
            ffn_dim: 128,
            embed_dropout: 0.5,
            attn_dropout: 0.1,
            ffn_dropout: 0.1,
            residual: false,
            level_embedding: true,
            mask_mode: MaskMode::Ancestors,
        }
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn register<F: Element>(
        store: &mut ParameterStore<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Ok(Linear {
            w: store.add_uniform(&format!("{name}.w"), (input, output), bound, rng)?,
            b: store.add_zeros(&format!("{name}.b"), (1, output))?,
        })
    }

    fn lookup<F: Element>(store: &ParameterStore<F>, name: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .id(&format!("{name}.{s}"))
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing {name}.{s}")))
        };
        Ok(Linear { w: get("w")?, b: get("b")? })
    }

    fn apply<F: Element>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct MultiHead {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHead {
    fn register<F: Element>(
        store: &mut ParameterStore<F>,
        name: &str,
        d: usize,
        key_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(MultiHead {
            q: Linear::register(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::register(store, &format!("{name}.k"), key_dim, d, rng)?,
            v: Linear::register(store, &format!("{name}.v"), key_dim, d, rng)?,
            out: Linear::register(store, &format!("{name}.out"), d, d, rng)?,
        })
    }

    fn lookup<F: Element>(store: &ParameterStore<F>, name: &str) -> Result<Self> {
        Ok(MultiHead {
            q: Linear::lookup(store, &format!("{name}.q"))?,
            k: Linear::lookup(store, &format!("{name}.k"))?,
            v: Linear::lookup(store, &format!("{name}.v"))?,
            out: Linear::lookup(store, &format!("{name}.out"))?,
        })
    }

    /// Scaled dot-product attention split over `heads`, followed by the
    /// output projection. Returns the output and each head's weight matrix.
    fn apply<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        queries: Var,
        keys: Var,
        heads: usize,
        mask: Option<&Array2<F>>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.apply(g, queries)?;
        let k = self.k.apply(g, keys)?;
        let v = self.v.apply(g, keys)?;
        let d = g.shape(q).1;
        let dh = d / heads;
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let a = g.masked_softmax(scores, mask)?;
            weights.push(a);
            outs.push(g.matmul(a, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.out.apply(g, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
struct AttentiveLayer {
    self_attn: MultiHead,
    cross_attn: MultiHead,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

/// Attention weights of one head in one layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub kind: AttentionKind,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Final hidden matrix, one row per sequence position.
    pub hidden: Var,
    pub attention: Vec<AttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    num_labels: usize,
    max_level: usize,
    token_embed: ParamId,
    level_embed: Option<ParamId>,
    layers: Vec<AttentiveLayer>,
}

/// Row of the token table for a sequence token.
fn token_row(num_labels: usize, tok: Token) -> usize {
    match tok {
        Token::Label(v) => v.index(),
        Token::Open => num_labels,
        Token::Close => num_labels + 1,
        Token::End => num_labels + 2,
    }
}

impl Decoder {
    /// Registers all decoder parameters. `text_dim` is the width of the
    /// encoder's feature rows.
    pub fn register<F: Element>(
        store: &mut ParameterStore<F>,
        config: DecoderConfig,
        taxonomy: &Taxonomy,
        text_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = config.d_model;
        if config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} is not divisible by {} heads",
                config.heads
            )));
        }
        let c = taxonomy.len();
        // levels 1..=P+1 for labels, P+2 for a terminator under a deepest
        // label, 0 unused
        let max_level = taxonomy.max_depth() + 2;
        let std = (d as f64).powf(-0.5);
        let token_embed = store.add_normal("decoder.token_embed", (c + 3, d), std, rng)?;
        let level_embed = if config.level_embedding {
            Some(store.add_normal("decoder.level_embed", (max_level + 1, d), std, rng)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for r in 0..config.layers {
            let p = format!("decoder.layer{r}");
            layers.push(AttentiveLayer {
                self_attn: MultiHead::register(store, &format!("{p}.self"), d, d, rng)?,
                cross_attn: MultiHead::register(store, &format!("{p}.cross"), d, text_dim, rng)?,
                ffn_in: Linear::register(store, &format!("{p}.ffn_in"), d, config.ffn_dim, rng)?,
                ffn_out: Linear::register(store, &format!("{p}.ffn_out"), config.ffn_dim, d, rng)?,
            });
        }
        Ok(Decoder { config, num_labels: c, max_level, token_embed, level_embed, layers })
    }

    pub fn lookup<F: Element>(
        store: &ParameterStore<F>,
        config: DecoderConfig,
        taxonomy: &Taxonomy,
    ) -> Result<Self> {
        let missing = |n: &str| Error::IncompatibleCheckpoint(format!("missing {n}"));
        let token_embed = store.id("decoder.token_embed").ok_or_else(|| missing("decoder.token_embed"))?;
        if store.value(token_embed).dim() != (taxonomy.len() + 3, config.d_model) {
            return Err(Error::IncompatibleCheckpoint("token table does not match taxonomy".into()));
        }
        let level_embed = if config.level_embedding {
            Some(store.id("decoder.level_embed").ok_or_else(|| missing("decoder.level_embed"))?)
        } else {
            None
        };
        let layers = (0..config.layers)
            .map(|r| {
                let p = format!("decoder.layer{r}");
                Ok(AttentiveLayer {
                    self_attn: MultiHead::lookup(store, &format!("{p}.self"))?,
                    cross_attn: MultiHead::lookup(store, &format!("{p}.cross"))?,
                    ffn_in: Linear::lookup(store, &format!("{p}.ffn_in"))?,
                    ffn_out: Linear::lookup(store, &format!("{p}.ffn_out"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decoder {
            config,
            num_labels: taxonomy.len(),
            max_level: taxonomy.max_depth() + 2,
            token_embed,
            level_embed,
            layers,
        })
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embed
    }

    pub fn level_embedding(&self) -> Option<ParamId> {
        self.level_embed
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn token_row(&self, tok: Token) -> usize {
        token_row(self.num_labels, tok)
    }

    pub fn candidate_row(&self, c: Candidate) -> usize {
        match c {
            Candidate::Child(v) => v.index(),
            Candidate::End => self.num_labels + 2,
        }
    }

    /// Token embedding plus level embedding per position, then embedding
    /// dropout.
    pub fn embed<F: Element>(&self, g: &mut Graph<'_, F>, tokens: &[Token], levels: &[usize]) -> Result<Var> {
        if tokens.len() != levels.len() || tokens.is_empty() {
            return Err(Error::ShapeError("tokens and levels must be non-empty and aligned".into()));
        }
        if let Some(&level) = levels.iter().find(|&&l| l > self.max_level) {
            return Err(Error::LevelOverflow { level, max: self.max_level });
        }
        let rows: Vec<usize> = tokens.iter().map(|&t| self.token_row(t)).collect();
        let table = g.param(self.token_embed);
        let mut u = g.gather_rows(table, &rows)?;
        if let Some(level_embed) = self.level_embed {
            let lt = g.param(level_embed);
            let l = g.gather_rows(lt, levels)?;
            u = g.add(u, l)?;
        }
        Ok(g.dropout(u, self.config.embed_dropout))
    }

    pub fn embed_sequence<F: Element>(&self, g: &mut Graph<'_, F>, seq: &SubHierSequence) -> Result<Var> {
        self.embed(g, &seq.tokens, &seq.levels)
    }

    fn sublayer_out<F: Element>(&self, g: &mut Graph<'_, F>, out: Var, input: Var, p: f64) -> Result<Var> {
        let out = g.dropout(out, p);
        if self.config.residual && g.shape(out) == g.shape(input) {
            g.add(out, input)
        } else {
            Ok(out)
        }
    }

    /// One attentive layer: masked self-attention over `u`, cross-attention
    /// from the result into `text` (with `text_mask` hiding padded keys), then
    /// the position-wise feed-forward network.
    #[allow(clippy::too_many_arguments)]
    pub fn attentive_layer<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        layer: usize,
        u: Var,
        text: Var,
        self_mask: Option<&Array2<F>>,
        text_mask: Option<&Array2<F>>,
        trace: &mut Vec<AttentionTrace>,
    ) -> Result<Var> {
        let params = &self.layers[layer];
        let heads = self.config.heads;
        let (s, w) = params.self_attn.apply(g, u, u, heads, self_mask)?;
        trace.extend(w.into_iter().enumerate().map(|(head, weights)| AttentionTrace {
            layer,
            head,
            kind: AttentionKind::SelfAttention,
            weights,
        }));
        let s = self.sublayer_out(g, s, u, self.config.attn_dropout)?;
        let (c, w) = params.cross_attn.apply(g, s, text, heads, text_mask)?;
        trace.extend(w.into_iter().enumerate().map(|(head, weights)| AttentionTrace {
            layer,
            head,
            kind: AttentionKind::CrossAttention,
            weights,
        }));
        let c = self.sublayer_out(g, c, s, self.config.attn_dropout)?;
        let f = params.ffn_in.apply(g, c)?;
        let f = g.relu(f);
        let f = params.ffn_out.apply(g, f)?;
        self.sublayer_out(g, f, c, self.config.ffn_dropout)
    }

    /// Runs the stack from explicit tokens, levels and masks.
    pub fn forward_raw<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[Token],
        levels: &[usize],
        self_mask: Option<&Array2<F>>,
        text: Var,
        text_mask: Option<&Array2<F>>,
    ) -> Result<DecoderOutput> {
        let mut u = self.embed(g, tokens, levels)?;
        let mut attention = Vec::new();
        for r in 0..self.layers.len() {
            u = self.attentive_layer(g, r, u, text, self_mask, text_mask, &mut attention)?;
        }
        Ok(DecoderOutput { hidden: u, attention })
    }

    /// Runs the stack over a sub-hierarchy sequence with the configured
    /// hierarchy mask.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        taxonomy: &Taxonomy,
        seq: &SubHierSequence,
        text: Var,
    ) -> Result<DecoderOutput> {
        let mask = build_mask_with_mode(taxonomy, &seq.tokens, self.config.mask_mode);
        let additive = mask.to_additive::<F>();
        self.forward_raw(g, &seq.tokens, &seq.levels, Some(&additive), text, None)
    }

    /// Logits `U_i · W^S[candidate]` for a list of (position, candidate) pairs,
    /// as a column.
    pub fn score_pairs<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        hidden: Var,
        pairs: &[(usize, Candidate)],
    ) -> Result<Var> {
        let positions: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let rows: Vec<usize> = pairs.iter().map(|p| self.candidate_row(p.1)).collect();
        let u = g.gather_rows(hidden, &positions)?;
        let table = g.param(self.token_embed);
        let w = g.gather_rows(table, &rows)?;
        g.row_dot(u, w)
    }

    /// Sigmoid probabilities of each candidate child under the label at
    /// position `i`.
    pub fn score_children<F: Element>(
        &self,
        g: &mut Graph<'_, F>,
        hidden: Var,
        seq: &SubHierSequence,
        i: usize,
        candidates: &[Candidate],
    ) -> Result<Vec<F>> {
        match seq.tokens.get(i) {
            Some(Token::Label(_)) => {}
            _ => return Err(Error::NotALabelPosition(i)),
        }
        let pairs: Vec<(usize, Candidate)> = candidates.iter().map(|&c| (i, c)).collect();
        let logits = self.score_pairs(g, hidden, &pairs)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).iter().copied().collect())
    }

    /// Scalar parameter count of the decoder, from its configuration alone.
    pub fn param_count(config: &DecoderConfig, num_labels: usize, max_depth: usize, text_dim: usize) -> usize {
        let d = config.d_model;
        let f = config.ffn_dim;
        let embeddings = (num_labels + 3) * d + if config.level_embedding { (max_depth + 3) * d } else { 0 };
        let self_attn = 4 * (d * d + d);
        let cross_attn = 2 * (d * d + d) + 2 * (text_dim * d + d);
        let ffn = d * f + f + f * d + d;
        embeddings + config.layers * (self_attn + cross_attn + ffn)
    }
}
