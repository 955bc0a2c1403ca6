//! Seeded synthetic taxonomies and keyword corpora.
//!
//! Every non-root label owns a disjoint set of keywords. A document's text is
//! a sample of the keywords of its labels and their ancestors, mixed with
//! noise words and shuffled, so its labels are recoverable from the text.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub depth: usize,
    pub branching_min: usize,
    pub branching_max: usize,
    pub keywords_per_label: usize,
    /// Keywords drawn (without replacement) per sub-hierarchy label of a
    /// document; capped at `keywords_per_label`.
    pub words_per_label: usize,
    pub noise_vocab: usize,
    /// Fraction of each document's tokens that are noise, in `[0, 1)`.
    pub noise_ratio: f64,
    /// Mean label-set size; sizes are `1 + Poisson(avg_labels - 1)`.
    pub avg_labels: f64,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            depth: 4,
            branching_min: 2,
            branching_max: 3,
            keywords_per_label: 3,
            words_per_label: 2,
            noise_vocab: 200,
            noise_ratio: 0.0,
            avg_labels: 2.0,
            train_docs: 800,
            dev_docs: 100,
            test_docs: 100,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.branching_max < 1 {
            return bad("branching max must be at least 1");
        }
        if self.branching_min > self.branching_max {
            return bad("branching min exceeds max");
        }
        if self.keywords_per_label == 0 || self.words_per_label == 0 {
            return bad("labels need at least one keyword");
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return bad("noise_ratio must lie in [0, 1)");
        }
        if self.noise_ratio > 0.0 && self.noise_vocab == 0 {
            return bad("noise requires a non-empty noise vocabulary");
        }
        if !(self.avg_labels >= 1.0 && self.avg_labels.is_finite()) {
            return bad("avg_labels must be at least 1");
        }
        Ok(())
    }

    pub fn total_docs(&self) -> usize {
        self.train_docs + self.dev_docs + self.test_docs
    }
}

/// The `j`-th keyword of label `v`.
pub fn keyword(v: LabelId, j: usize) -> String {
    format!("k{}x{}", v.0, j)
}

pub fn noise_word(i: usize) -> String {
    format!("n{i}")
}

/// Random tree grown level by level: every node above `depth` gets between
/// `branching_min` and `branching_max` children. Names are `L{depth}_{nn}`,
/// numbered within each level.
pub fn generate_taxonomy(spec: &SynthSpec) -> Result<Taxonomy> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut names = vec!["Root".to_string()];
    let mut parent: Vec<Option<LabelId>> = vec![None];
    let mut level = vec![LabelId(0)];
    for d in 1..=spec.depth {
        let mut next = Vec::new();
        for &p in &level {
            let k = rng.random_range(spec.branching_min..=spec.branching_max);
            for _ in 0..k {
                let id = LabelId(names.len() as u32);
                names.push(format!("L{d}_{:02}", next.len()));
                parent.push(Some(p));
                next.push(id);
            }
        }
        if next.is_empty() {
            break;
        }
        level = next;
    }
    Taxonomy::from_parents(names, parent)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthCorpus {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

/// Draws an antichain (no member is an ancestor of another) of up to `k`
/// non-root labels. Keeping ancestors out of the set makes the text
/// determine the labels exactly.
fn sample_label_set(t: &Taxonomy, k: usize, rng: &mut impl Rng) -> BTreeSet<LabelId> {
    let pool: Vec<LabelId> = t.labels().filter(|&v| v != t.root()).collect();
    let mut out = BTreeSet::new();
    let mut tries = 0;
    while out.len() < k && tries < 20 * k {
        tries += 1;
        let &v = pool.choose(rng).expect("non-empty pool");
        if out.iter().all(|&u| u != v && !t.is_ancestor(u, v) && !t.is_ancestor(v, u)) {
            out.insert(v);
        }
    }
    out
}

fn make_document(
    t: &Taxonomy,
    spec: &SynthSpec,
    poisson: Option<&Poisson<f64>>,
    rng: &mut impl Rng,
) -> Document {
    let k = 1 + poisson.map_or(0, |p| p.sample(rng) as usize);
    let labels = sample_label_set(t, k, rng);
    let mut nodes = BTreeSet::new();
    for &v in &labels {
        let mut cur = Some(v);
        while let Some(u) = cur {
            if u == t.root() || !nodes.insert(u) {
                break;
            }
            cur = t.parent(u);
        }
    }
    let take = spec.words_per_label.min(spec.keywords_per_label);
    let all: Vec<usize> = (0..spec.keywords_per_label).collect();
    let mut words = Vec::new();
    for &v in &nodes {
        for &j in all.choose_multiple(rng, take) {
            words.push(keyword(v, j));
        }
    }
    let noise = (spec.noise_ratio / (1.0 - spec.noise_ratio) * words.len() as f64).round() as usize;
    for _ in 0..noise {
        words.push(noise_word(rng.random_range(0..spec.noise_vocab)));
    }
    words.shuffle(rng);
    Document { text: words.join(" "), labels: labels.iter().map(|&v| t.name(v).to_string()).collect() }
}

/// Generates `spec.total_docs()` documents and splits them, in order, into
/// train, dev and test.
pub fn generate_corpus(spec: &SynthSpec, t: &Taxonomy) -> Result<SynthCorpus> {
    spec.validate()?;
    if t.len() < 2 {
        return Err(Error::InvalidSpec("taxonomy has no labels below the root".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
    let poisson = if spec.avg_labels > 1.0 {
        Some(Poisson::new(spec.avg_labels - 1.0).map_err(|e| Error::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let mut docs: Vec<Document> =
        (0..spec.total_docs()).map(|_| make_document(t, spec, poisson.as_ref(), &mut rng)).collect();
    let test = docs.split_off(spec.train_docs + spec.dev_docs);
    let dev = docs.split_off(spec.train_docs);
    Ok(SynthCorpus { train: docs, dev, test })
}
