//! Teacher-forced training: configuration, batching, loss, learning-rate
//! schedule and the epoch loop with dev-set model selection.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{build_mask_with_mode, build_subhierarchy, serialize, HierarchyMask, MaskMode, SubHierSequence};
use crate::corpus::Document;
use crate::decoder::DecoderConfig;
use crate::encoder::{TextEncoder, Tokenizer, Vocabulary, DEFAULT_STOPWORDS, PAD};
use crate::error::{Error, Result};
use crate::inference::predict_batch;
use crate::metrics::evaluate;
use crate::model::{EncoderKind, HiDec, ModelConfig};
use crate::params::{AdamConfig, ParameterStore};
use crate::taxonomy::{Candidate, LabelId, Taxonomy};
use crate::tensor::{Element, Graph, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::InvalidConfig(format!("unknown precision {s:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything that determines a training run. Serialized as `key = value`
/// lines, one per field, by [`TrainConfig::to_kv`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub embed_dropout: f64,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
    pub threshold: f64,
    pub seed: u64,
    pub precision: Precision,
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub residual: bool,
    pub level_embedding: bool,
    pub mask_mode: MaskMode,
    pub min_count: usize,
    pub max_len: usize,
    pub ancestor_closure: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 20,
            warmup_ratio: 0.1,
            clip_norm: 1.0,
            embed_dropout: 0.5,
            attn_dropout: 0.1,
            ffn_dropout: 0.1,
            threshold: 0.5,
            seed: 42,
            precision: Precision::F32,
            encoder: EncoderKind::Gru,
            embed_dim: 64,
            hidden: 64,
            d_model: 64,
            heads: 2,
            layers: 2,
            ffn_dim: 128,
            residual: false,
            level_embedding: true,
            mask_mode: MaskMode::Ancestors,
            min_count: 1,
            max_len: 256,
            ancestor_closure: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 27] = [
        "lr",
        "beta1",
        "beta2",
        "eps",
        "batch_size",
        "epochs",
        "warmup_ratio",
        "clip_norm",
        "embed_dropout",
        "attn_dropout",
        "ffn_dropout",
        "threshold",
        "seed",
        "precision",
        "encoder",
        "embed_dim",
        "hidden",
        "d_model",
        "heads",
        "layers",
        "ffn_dim",
        "residual",
        "level_embedding",
        "mask_mode",
        "min_count",
        "max_len",
        "ancestor_closure",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "lr" => self.lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "warmup_ratio" => self.warmup_ratio = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "embed_dropout" => self.embed_dropout = parse_value(key, v)?,
            "attn_dropout" => self.attn_dropout = parse_value(key, v)?,
            "ffn_dropout" => self.ffn_dropout = parse_value(key, v)?,
            "threshold" => self.threshold = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "precision" => self.precision = v.parse()?,
            "encoder" => self.encoder = v.parse()?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "d_model" => self.d_model = parse_value(key, v)?,
            "heads" => self.heads = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "ffn_dim" => self.ffn_dim = parse_value(key, v)?,
            "residual" => self.residual = parse_value(key, v)?,
            "level_embedding" => self.level_embedding = parse_value(key, v)?,
            "mask_mode" => self.mask_mode = v.parse()?,
            "min_count" => self.min_count = parse_value(key, v)?,
            "max_len" => self.max_len = parse_value(key, v)?,
            "ancestor_closure" => self.ancestor_closure = parse_value(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_ratio" => self.warmup_ratio.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "embed_dropout" => self.embed_dropout.to_string(),
            "attn_dropout" => self.attn_dropout.to_string(),
            "ffn_dropout" => self.ffn_dropout.to_string(),
            "threshold" => self.threshold.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "encoder" => self.encoder.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "layers" => self.layers.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "residual" => self.residual.to_string(),
            "level_embedding" => self.level_embedding.to_string(),
            "mask_mode" => self.mask_mode.to_string(),
            "min_count" => self.min_count.to_string(),
            "max_len" => self.max_len.to_string(),
            "ancestor_closure" => self.ancestor_closure.to_string(),
            _ => return None,
        })
    }

    /// Parses a config file: `key = value` per line, `#` starts a comment.
    /// Unset keys keep their defaults.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        let positive = [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{k} must be positive"));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        for (k, v) in counts {
            if v == 0 {
                return bad(&format!("{k} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        for p in [self.embed_dropout, self.attn_dropout, self.ffn_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            decoder: DecoderConfig {
                d_model: self.d_model,
                heads: self.heads,
                layers: self.layers,
                ffn_dim: self.ffn_dim,
                embed_dropout: self.embed_dropout,
                attn_dropout: self.attn_dropout,
                ffn_dropout: self.ffn_dropout,
                residual: self.residual,
                level_embedding: self.level_embedding,
                mask_mode: self.mask_mode,
            },
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(DEFAULT_STOPWORDS, self.max_len)
    }
}

/// Scored pairs of one label position: its augmented children and their
/// binary targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionTargets {
    pub position: usize,
    pub label: LabelId,
    pub candidates: Vec<Candidate>,
    pub targets: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetLabels {
    pub positions: Vec<PositionTargets>,
}

impl TargetLabels {
    /// A child is a positive iff it is a node of the sub-hierarchy; the
    /// terminator is a positive iff the label is assigned.
    pub fn build(t: &Taxonomy, nodes: &BTreeSet<LabelId>, assigned: &BTreeSet<LabelId>, seq: &SubHierSequence) -> Result<Self> {
        let mut positions = Vec::new();
        for (position, label) in seq.label_positions() {
            let candidates = t.augmented_children(label)?;
            let targets = candidates
                .iter()
                .map(|c| match c {
                    Candidate::Child(v) => nodes.contains(v),
                    Candidate::End => assigned.contains(&label),
                })
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect();
            positions.push(PositionTargets { position, label, candidates, targets });
        }
        Ok(TargetLabels { positions })
    }

    pub fn pairs(&self) -> Vec<(usize, Candidate)> {
        self.positions
            .iter()
            .flat_map(|p| p.candidates.iter().map(move |&c| (p.position, c)))
            .collect()
    }

    pub fn flat_targets(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| p.targets.iter().copied()).collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.positions.iter().map(|p| p.candidates.len()).sum()
    }
}

/// A tokenized, labeled training document with its target sequence.
#[derive(Clone, Debug)]
pub struct Example {
    pub ids: Vec<usize>,
    pub labels: BTreeSet<LabelId>,
    pub sequence: SubHierSequence,
    pub mask: HierarchyMask,
    pub targets: TargetLabels,
}

impl Example {
    pub fn new(t: &Taxonomy, ids: Vec<usize>, labels: BTreeSet<LabelId>, mode: MaskMode, index: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::MissingLabels(index));
        }
        let sh = build_subhierarchy(t, labels.iter().copied())?;
        let sequence = serialize(t, &sh)?;
        let mask = build_mask_with_mode(t, &sequence.tokens, mode);
        let targets = TargetLabels::build(t, &sh.nodes, &sh.assigned, &sequence)?;
        Ok(Example { ids, labels, sequence, mask, targets })
    }

    pub fn from_document(
        t: &Taxonomy,
        tokenizer: &Tokenizer,
        vocab: &Vocabulary,
        doc: &Document,
        mode: MaskMode,
        index: usize,
    ) -> Result<Self> {
        let labels = doc.label_ids(t)?;
        Example::new(t, tokenizer.encode(vocab, &doc.text), labels, mode, index)
    }
}

/// Documents grouped for one optimizer step. Text is padded with PAD to the
/// longest document; `text_valid` marks real tokens. Each document keeps its
/// own unpadded target sequence and mask.
#[derive(Clone, Debug)]
pub struct Batch {
    pub token_ids: Array2<usize>,
    pub text_valid: Array2<bool>,
    pub sequences: Vec<SubHierSequence>,
    pub masks: Vec<HierarchyMask>,
    pub targets: Vec<TargetLabels>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        let b = examples.len();
        let mut token_ids = Array2::from_elem((b, n), PAD);
        let mut text_valid = Array2::from_elem((b, n), false);
        for (i, e) in examples.iter().enumerate() {
            for (t, &id) in e.ids.iter().enumerate() {
                token_ids[[i, t]] = id;
                text_valid[[i, t]] = true;
            }
        }
        Ok(Batch {
            token_ids,
            text_valid,
            sequences: examples.iter().map(|e| e.sequence.clone()).collect(),
            masks: examples.iter().map(|e| e.mask.clone()).collect(),
            targets: examples.iter().map(|e| e.targets.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Unpadded token ids of document `i`.
    pub fn document(&self, i: usize) -> Vec<usize> {
        self.token_ids
            .row(i)
            .iter()
            .zip(self.text_valid.row(i))
            .filter(|(_, &v)| v)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn num_pairs(&self) -> usize {
        self.targets.iter().map(TargetLabels::num_pairs).sum()
    }
}

/// Tokenizes a slice of the corpus and assembles one batch. `offset` is the
/// corpus index of `docs[0]`, used in error reports.
pub fn build_batch(
    docs: &[Document],
    offset: usize,
    t: &Taxonomy,
    tokenizer: &Tokenizer,
    vocab: &Vocabulary,
    mode: MaskMode,
) -> Result<Batch> {
    let examples = docs
        .iter()
        .enumerate()
        .map(|(i, d)| Example::from_document(t, tokenizer, vocab, d, mode, offset + i))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::from_examples(&refs)
}

/// Mean binary cross-entropy over every scored (position, candidate) pair of
/// the batch. Returns the loss node and the number of pairs.
pub fn batch_loss<F: Element>(g: &mut Graph<'_, F>, model: &HiDec, batch: &Batch) -> Result<(Var, usize)> {
    let docs: Vec<Vec<usize>> = (0..batch.len()).map(|i| batch.document(i)).collect();
    let doc_refs: Vec<&[usize]> = docs.iter().map(Vec::as_slice).collect();
    let text = model.encoder.encode_batch(g, &doc_refs)?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut ys = Vec::with_capacity(batch.num_pairs());
    for (i, h) in text.into_iter().enumerate() {
        let seq = &batch.sequences[i];
        let mask = batch.masks[i].to_additive::<F>();
        let out = model.decoder.forward_raw(g, &seq.tokens, &seq.levels, Some(&mask), h, None)?;
        let pairs = batch.targets[i].pairs();
        logits.push(model.decoder.score_pairs(g, out.hidden, &pairs)?);
        ys.extend(batch.targets[i].flat_targets().into_iter().map(F::c));
    }
    let all = g.concat_rows(&logits)?;
    let loss = g.bce_with_logits(all, &ys)?;
    Ok((loss, ys.len()))
}

/// Binary cross-entropy of already computed probabilities; see
/// [`crate::tensor::binary_cross_entropy`].
pub fn compute_loss(probs: &[f64], targets: &[f64]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::ShapeError(format!(
            "{} probabilities for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    Ok(crate::tensor::binary_cross_entropy(probs, targets))
}

/// Linear warmup to `peak` over the first `warmup_ratio` of `total` steps,
/// then linear decay to zero.
pub fn lr_at(step: usize, total: usize, warmup_ratio: f64, peak: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).floor() as usize;
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total > warmup {
        peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Pair-weighted mean training loss over the epoch.
    pub loss: f64,
    pub dev_micro_f1: Option<f64>,
    pub dev_macro_f1: Option<f64>,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
}

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,loss,dev_micro_f1,dev_macro_f1,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.loss, fmt(e.dev_micro_f1), fmt(e.dev_macro_f1), e.lr);
    }
    out
}

/// Everything needed to run a trained model.
#[derive(Clone, Debug)]
pub struct ModelBundle<F: Element> {
    pub config: TrainConfig,
    pub taxonomy: Taxonomy,
    pub vocab: Vocabulary,
    pub tokenizer: Tokenizer,
    pub store: ParameterStore<F>,
    pub model: HiDec,
}

impl<F: Element> ModelBundle<F> {
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.tokenizer.encode(&self.vocab, text)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<F: Element> {
    /// Parameters of the selected epoch.
    pub best: ModelBundle<F>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64 + 1)
}

/// Trains on `train`, selecting the epoch with the best dev micro-F1 under
/// full recursive decoding. With an empty dev set the last epoch wins.
pub fn fit<F: Element>(
    taxonomy: &Taxonomy,
    train: &[Document],
    dev: &[Document],
    cfg: &TrainConfig,
) -> Result<FitOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tokenizer = cfg.tokenizer();
    let cleaned: Vec<Vec<String>> = train.iter().map(|d| tokenizer.clean(&d.text)).collect();
    let vocab = Vocabulary::build(cleaned.iter().map(|d| d.iter().map(String::as_str)), cfg.min_count)?;
    let examples = train
        .iter()
        .enumerate()
        .map(|(i, d)| Example::from_document(taxonomy, &tokenizer, &vocab, d, cfg.mask_mode, i))
        .collect::<Result<Vec<_>>>()?;
    let dev_ids: Vec<Vec<usize>> = dev.iter().map(|d| tokenizer.encode(&vocab, &d.text)).collect();
    let dev_gold = crate::corpus::gold_sets(dev, taxonomy)?;

    let (model, mut store) = HiDec::init::<F>(cfg.model_config(), vocab.len(), taxonomy, cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore<F>)> = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut pair_sum) = (0.0, 0usize);
        let mut lr = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::from_examples(&refs)?;
            lr = lr_at(step, total, cfg.warmup_ratio, cfg.lr);
            let (loss, pairs, grads) = {
                let mut g = Graph::new(&store, true, step_seed(cfg.seed, step));
                let (loss, pairs) = batch_loss(&mut g, &model, &batch)?;
                let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(Error::NumericalDivergence { epoch, batch: bi });
                }
                (value, pairs, g.backward(loss)?)
            };
            store.accumulate(&grads);
            if !store.global_grad_norm().is_finite() {
                return Err(Error::NumericalDivergence { epoch, batch: bi });
            }
            store.clip_global_norm(cfg.clip_norm);
            store.adam_step(&cfg.adam(lr));
            store.zero_grad();
            step += 1;
            loss_sum += loss * pairs as f64;
            pair_sum += pairs;
        }

        let (micro, macro_) = if dev.is_empty() {
            (None, None)
        } else {
            let preds = predict_batch(&store, &model, taxonomy, &dev_ids, cfg.threshold)?;
            let pred_sets: Vec<_> = preds.into_iter().map(|p| p.labels).collect();
            let report = evaluate(&dev_gold, &pred_sets, taxonomy, cfg.ancestor_closure)?;
            (Some(report.micro_f1), Some(report.macro_f1))
        };
        log.push(EpochLog {
            epoch,
            loss: loss_sum / pair_sum.max(1) as f64,
            dev_micro_f1: micro,
            dev_macro_f1: macro_,
            lr,
        });
        let score = micro.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((s, _, _)) => dev.is_empty() || score > *s,
        };
        if improved {
            best = Some((score, epoch, store.clone()));
        }
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(FitOutcome {
        best: ModelBundle {
            config: cfg.clone(),
            taxonomy: taxonomy.clone(),
            vocab,
            tokenizer,
            store: best_store,
            model,
        },
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const SAMPLE: &str = "Root\tA\tB\tC\nA\tD\nD\tI\nB\tF\n";

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = TrainConfig {
            lr: 3e-3,
            precision: Precision::F64,
            mask_mode: MaskMode::Open,
            encoder: EncoderKind::MeanPool,
            residual: true,
            ..TrainConfig::default()
        };
        let text = cfg.to_kv();
        assert_eq!(text.lines().count(), TrainConfig::KEYS.len());
        assert_eq!(TrainConfig::parse_kv(&text).unwrap(), cfg);
    }

    #[test]
    fn config_comments_and_unknown_keys() {
        let cfg = TrainConfig::parse_kv("# comment\n\nepochs = 3 # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(TrainConfig::parse_kv("nope = 1").is_err());
        assert!(TrainConfig::parse_kv("epochs").is_err());
        assert!(TrainConfig::parse_kv("epochs = x").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for (k, v) in [("lr", "0"), ("warmup_ratio", "1"), ("threshold", "1"), ("batch_size", "0"), ("heads", "3")] {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k} = {v}");
        }
    }

    #[test]
    fn targets_for_sample_tree() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let labels = ["C", "F", "I"].iter().map(|n| t.id(n).unwrap()).collect();
        let ex = Example::new(&t, vec![1], labels, MaskMode::Ancestors, 0).unwrap();
        let root = &ex.targets.positions[0];
        assert_eq!(root.label, t.root());
        // children A, B, C all present, root not assigned
        assert_eq!(root.targets, vec![1.0, 1.0, 1.0, 0.0]);
        let i = ex.targets.positions.iter().find(|p| p.label == t.id("I").unwrap()).unwrap();
        assert_eq!(i.candidates, vec![Candidate::End]);
        assert_eq!(i.targets, vec![1.0]);
        // Root 4, A 2, D 2, I 1, B 2, F 1, C 1
        assert_eq!(ex.targets.positions.len(), 7);
        assert_eq!(ex.targets.num_pairs(), 13);
    }

    #[test]
    fn root_only_document() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let ex = Example::new(&t, vec![1], [t.root()].into(), MaskMode::Ancestors, 0).unwrap();
        assert_eq!(ex.targets.positions.len(), 1);
        assert_eq!(ex.targets.positions[0].targets, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn unlabeled_document_is_rejected() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let vocab = Vocabulary::from_tokens(vec!["<pad>".into(), "<unk>".into()], 1);
        let docs = vec![
            Document { text: "x".into(), labels: vec!["A".into()] },
            Document { text: "y".into(), labels: vec![] },
        ];
        let err = build_batch(&docs, 10, &t, &Tokenizer::default(), &vocab, MaskMode::Ancestors).unwrap_err();
        assert!(matches!(err, Error::MissingLabels(11)));
    }

    #[test]
    fn loss_arithmetic() {
        assert_abs_diff_eq!(compute_loss(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert_abs_diff_eq!(compute_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.1643, epsilon = 1e-4);
        assert!(compute_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        assert!(compute_loss(&[0.5], &[]).is_err());
    }

    #[test]
    fn schedule_shape() {
        let (total, peak) = (100, 1e-3);
        assert_eq!(lr_at(0, total, 0.1, peak), 0.0);
        assert_abs_diff_eq!(lr_at(5, total, 0.1, peak), 5e-4, epsilon = 1e-15);
        assert_eq!(lr_at(10, total, 0.1, peak), peak);
        assert_abs_diff_eq!(lr_at(55, total, 0.1, peak), 5e-4, epsilon = 1e-15);
        assert_eq!(lr_at(100, total, 0.1, peak), 0.0);
        assert_eq!(lr_at(0, total, 0.0, peak), peak);
    }

    #[test]
    fn log_csv_format() {
        let log = vec![
            EpochLog { epoch: 1, loss: 0.5, dev_micro_f1: Some(0.25), dev_macro_f1: Some(0.125), lr: 1e-3 },
            EpochLog { epoch: 2, loss: 0.25, dev_micro_f1: None, dev_macro_f1: None, lr: 0.0 },
        ];
        assert_eq!(
            log_to_csv(&log),
            "epoch,loss,dev_micro_f1,dev_macro_f1,lr\n1,0.5,0.25,0.125,0.001\n2,0.25,,,0\n"
        );
    }
}
