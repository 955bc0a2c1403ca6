//! Recursive hierarchy decoding.
//!
//! Starting from the root, every frontier label is expanded one taxonomy
//! level per iteration: the partial graph is serialized, the decoder scores
//! each frontier label's children and terminator, and every candidate at or
//! above the threshold is taken. When nothing clears the threshold the single
//! best candidate is taken instead, so decoding always makes progress.

use std::collections::BTreeSet;

use crate::codec::{serialize_tree, SubHierSequence};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::model::HiDec;
use crate::params::ParameterStore;
use crate::taxonomy::{Candidate, LabelId, Taxonomy};
use crate::tensor::{Element, Graph, Var};

/// Supplies candidate probabilities for label positions of a sequence.
pub trait ChildScorer {
    /// For each `(position, candidates)` query, one probability per candidate.
    fn score(&mut self, seq: &SubHierSequence, queries: &[(usize, Vec<Candidate>)]) -> Result<Vec<Vec<f64>>>;
}

/// Scores with a trained model. The document is encoded once; every call
/// reruns the decoder over the given sequence.
pub struct ModelScorer<'s, F: Element> {
    graph: Graph<'s, F>,
    model: &'s HiDec,
    taxonomy: &'s Taxonomy,
    text: Var,
}

impl<'s, F: Element> ModelScorer<'s, F> {
    pub fn new(store: &'s ParameterStore<F>, model: &'s HiDec, taxonomy: &'s Taxonomy, ids: &[usize]) -> Result<Self> {
        let mut graph = Graph::eval(store);
        let text = model.encoder.encode(&mut graph, ids)?;
        Ok(ModelScorer { graph, model, taxonomy, text })
    }
}

impl<F: Element> ChildScorer for ModelScorer<'_, F> {
    fn score(&mut self, seq: &SubHierSequence, queries: &[(usize, Vec<Candidate>)]) -> Result<Vec<Vec<f64>>> {
        let out = self.model.decoder.forward(&mut self.graph, self.taxonomy, seq, self.text)?;
        queries
            .iter()
            .map(|(i, cands)| {
                let p = self.model.decoder.score_children(&mut self.graph, out.hidden, seq, *i, cands)?;
                p.into_iter()
                    .map(|x| {
                        let x = x.to_f64().unwrap_or(f64::NAN);
                        if x.is_finite() {
                            Ok(x)
                        } else {
                            Err(Error::NumericalError(format!("candidate probability {x}")))
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// A partially decoded sub-hierarchy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeState {
    pub nodes: BTreeSet<LabelId>,
    pub edges: BTreeSet<(LabelId, LabelId)>,
    /// Labels whose terminator was selected.
    pub terminated: BTreeSet<LabelId>,
    /// Labels added in the latest iteration; still to be expanded.
    pub frontier: BTreeSet<LabelId>,
    pub iteration: usize,
    /// Number of (label, iteration) expansions that fell back to the argmax.
    pub fallback_steps: usize,
}

impl DecodeState {
    pub fn initial(t: &Taxonomy) -> Self {
        DecodeState {
            nodes: [t.root()].into(),
            edges: BTreeSet::new(),
            terminated: BTreeSet::new(),
            frontier: [t.root()].into(),
            iteration: 0,
            fallback_steps: 0,
        }
    }

    /// The current graph as a sequence; terminated labels carry their
    /// terminator pair.
    pub fn sequence(&self, t: &Taxonomy) -> SubHierSequence {
        serialize_tree(t, &self.nodes, &self.terminated)
    }
}

/// One decoding iteration over the whole frontier.
pub fn expand_frontier(
    scorer: &mut impl ChildScorer,
    t: &Taxonomy,
    state: &DecodeState,
    threshold: f64,
) -> Result<DecodeState> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside (0, 1)")));
    }
    let seq = state.sequence(t);
    let queries = state
        .frontier
        .iter()
        .map(|&v| {
            let i = seq.position_of(v).ok_or_else(|| Error::UnknownLabel(t.name(v).into()))?;
            Ok((i, t.augmented_children(v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let probs = scorer.score(&seq, &queries)?;
    if probs.len() != queries.len() {
        return Err(Error::ShapeError(format!("{} score rows for {} queries", probs.len(), queries.len())));
    }

    let mut next = state.clone();
    next.frontier.clear();
    next.iteration += 1;
    for ((&v, (_, cands)), p) in state.frontier.iter().zip(&queries).zip(&probs) {
        if p.len() != cands.len() {
            return Err(Error::ShapeError(format!("{} scores for {} candidates", p.len(), cands.len())));
        }
        let mut picked: Vec<Candidate> =
            cands.iter().zip(p).filter(|(_, &x)| x >= threshold).map(|(&c, _)| c).collect();
        if picked.is_empty() {
            // first maximum in candidate order
            let best = p
                .iter()
                .enumerate()
                .fold(0, |b, (j, &x)| if x > p[b] { j } else { b });
            picked.push(cands[best]);
            next.fallback_steps += 1;
        }
        for c in picked {
            match c {
                Candidate::Child(c) => {
                    next.nodes.insert(c);
                    next.edges.insert((v, c));
                    next.frontier.insert(c);
                }
                Candidate::End => {
                    next.terminated.insert(v);
                }
            }
        }
    }
    Ok(next)
}

/// Terminated labels plus frontier labels that are leaves of the predicted
/// graph.
pub fn assign_labels(t: &Taxonomy, state: &DecodeState) -> BTreeSet<LabelId> {
    let mut out = state.terminated.clone();
    for &v in &state.frontier {
        if !t.children(v).iter().any(|c| state.nodes.contains(c)) {
            out.insert(v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub labels: BTreeSet<LabelId>,
    pub iterations: usize,
    pub fallback_steps: usize,
    pub state: DecodeState,
}

/// Expands until the frontier is empty or the taxonomy depth is reached.
pub fn recursive_decode(scorer: &mut impl ChildScorer, t: &Taxonomy, threshold: f64) -> Result<Decoded> {
    let mut state = DecodeState::initial(t);
    while !state.frontier.is_empty() && state.iteration < t.max_depth() {
        state = expand_frontier(scorer, t, &state, threshold)?;
    }
    let labels = assign_labels(t, &state);
    debug_assert!(!labels.is_empty());
    for &v in &labels {
        debug_assert!(t.ancestors(v).map(|a| a.iter().all(|x| state.nodes.contains(x))).unwrap_or(false));
    }
    Ok(Decoded { labels, iterations: state.iteration, fallback_steps: state.fallback_steps, state })
}

/// Decodes one tokenized document with a trained model.
pub fn predict<F: Element>(
    store: &ParameterStore<F>,
    model: &HiDec,
    t: &Taxonomy,
    ids: &[usize],
    threshold: f64,
) -> Result<Decoded> {
    let mut scorer = ModelScorer::new(store, model, t, ids)?;
    recursive_decode(&mut scorer, t, threshold)
}

/// Decodes each document independently; results equal one-at-a-time calls.
pub fn predict_batch<F: Element>(
    store: &ParameterStore<F>,
    model: &HiDec,
    t: &Taxonomy,
    docs: &[Vec<usize>],
    threshold: f64,
) -> Result<Vec<Decoded>> {
    docs.iter().map(|ids| predict(store, model, t, ids, threshold)).collect()
}

/// A scorer backed by a closure `(label, candidates) -> probabilities`.
/// Handy for driving the decoder by hand.
pub struct FnScorer<G>(pub G);

impl<G> ChildScorer for FnScorer<G>
where
    G: FnMut(LabelId, &[Candidate]) -> Vec<f64>,
{
    fn score(&mut self, seq: &SubHierSequence, queries: &[(usize, Vec<Candidate>)]) -> Result<Vec<Vec<f64>>> {
        queries
            .iter()
            .map(|(i, c)| {
                let v = seq.tokens[*i].label().ok_or(Error::NotALabelPosition(*i))?;
                Ok((self.0)(v, c))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "Root\tA\tB\tC\nA\tD\nD\tI\nB\tF\n";

    fn ids(t: &Taxonomy, names: &[&str]) -> BTreeSet<LabelId> {
        names.iter().map(|n| t.id(n).unwrap()).collect()
    }

    #[test]
    fn threshold_rule_on_first_step() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let mut s = FnScorer(|_: LabelId, _: &[Candidate]| vec![0.9, 0.2, 0.7, 0.1]);
        let next = expand_frontier(&mut s, &t, &DecodeState::initial(&t), 0.5).unwrap();
        assert_eq!(next.nodes, ids(&t, &["Root", "A", "C"]));
        assert_eq!(next.frontier, ids(&t, &["A", "C"]));
        assert_eq!(next.fallback_steps, 0);
    }

    #[test]
    fn fallback_to_terminator() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let mut s = FnScorer(|_: LabelId, _: &[Candidate]| vec![0.1, 0.2, 0.3, 0.4]);
        let next = expand_frontier(&mut s, &t, &DecodeState::initial(&t), 0.5).unwrap();
        assert!(next.frontier.is_empty());
        assert_eq!(next.terminated, ids(&t, &["Root"]));
        assert_eq!(next.fallback_steps, 1);
    }

    #[test]
    fn taxonomy_leaf_always_terminates() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let mut state = DecodeState::initial(&t);
        let c = t.id("C").unwrap();
        state.nodes.insert(c);
        state.edges.insert((t.root(), c));
        state.frontier = [c].into();
        let mut s = FnScorer(|_: LabelId, cands: &[Candidate]| vec![0.01; cands.len()]);
        let next = expand_frontier(&mut s, &t, &state, 0.5).unwrap();
        assert_eq!(next.terminated, [c].into());
    }

    #[test]
    fn perfect_scorer_recovers_sample_tree() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let gold = ids(&t, &["C", "F", "I"]);
        let sh = crate::codec::build_subhierarchy(&t, gold.iter().copied()).unwrap();
        let mut s = FnScorer(|v: LabelId, cands: &[Candidate]| {
            cands
                .iter()
                .map(|c| match c {
                    Candidate::Child(c) => f64::from(u8::from(sh.nodes.contains(c))),
                    Candidate::End => f64::from(u8::from(sh.assigned.contains(&v))),
                })
                .collect()
        });
        let d = recursive_decode(&mut s, &t, 0.5).unwrap();
        assert_eq!(d.labels, gold);
        assert_eq!(d.iterations, 3);
        assert_eq!(d.state.nodes, sh.nodes);
    }

    #[test]
    fn single_node_taxonomy() {
        let t = Taxonomy::parse("R\n").unwrap();
        let mut s = FnScorer(|_: LabelId, _: &[Candidate]| -> Vec<f64> { unreachable!() });
        let d = recursive_decode(&mut s, &t, 0.5).unwrap();
        assert_eq!(d.labels, [t.root()].into());
        assert_eq!(d.iterations, 0);
    }

    #[test]
    fn chain_is_capped_and_assigned_by_leaf_rule() {
        let t = Taxonomy::parse("R\tA\nA\tB\nB\tC\n").unwrap();
        // always the sole child, never the terminator
        let mut s = FnScorer(|_: LabelId, cands: &[Candidate]| {
            cands.iter().map(|c| if matches!(c, Candidate::Child(_)) { 1.0 } else { 0.0 }).collect()
        });
        let d = recursive_decode(&mut s, &t, 0.5).unwrap();
        assert_eq!(d.iterations, 3);
        assert_eq!(d.labels, ids(&t, &["C"]));
        // C was on the frontier at exit, its terminator never scored
        assert!(d.state.terminated.is_empty());
    }

    #[test]
    fn expanded_but_unterminated_inner_node_is_not_assigned() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let (a, d, root) = (t.id("A").unwrap(), t.id("D").unwrap(), t.root());
        let state = DecodeState {
            nodes: [root, a, d].into(),
            edges: [(root, a), (a, d)].into(),
            terminated: [d].into(),
            frontier: BTreeSet::new(),
            iteration: 2,
            fallback_steps: 0,
        };
        assert_eq!(assign_labels(&t, &state), [d].into());
    }

    #[test]
    fn invalid_threshold() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let mut s = FnScorer(|_: LabelId, c: &[Candidate]| vec![0.5; c.len()]);
        assert!(expand_frontier(&mut s, &t, &DecodeState::initial(&t), 1.0).is_err());
    }
}
