//! Sub-hierarchies and their parse-tree token sequences.
//!
//! Grammar of a serialized sub-hierarchy:
//!
//! ```text
//! node := "(" LABEL node* [ "(" "[END]" ")" ] ")"
//! ```
//!
//! Children follow canonical taxonomy order. The terminator pair comes after
//! all child subtrees and marks the label as assigned.

use std::collections::BTreeSet;

use ndarray::Array2;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

/// Additive bias for blocked attention entries.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Open,
    Close,
    End,
    Label(LabelId),
}

impl Token {
    pub fn is_special(self) -> bool {
        !matches!(self, Token::Label(_))
    }

    pub fn label(self) -> Option<LabelId> {
        match self {
            Token::Label(v) => Some(v),
            _ => None,
        }
    }
}

/// A document's labels together with every ancestor and the connecting edges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubHierarchy {
    pub nodes: BTreeSet<LabelId>,
    pub edges: BTreeSet<(LabelId, LabelId)>,
    pub assigned: BTreeSet<LabelId>,
}

impl SubHierarchy {
    /// Checks the structural invariants against `t`.
    pub fn validate(&self, t: &Taxonomy) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSubHierarchy(m));
        for &v in self.nodes.iter().chain(&self.assigned) {
            t.check(v)?;
        }
        if !self.nodes.contains(&t.root()) {
            return bad("root is missing".into());
        }
        if !self.assigned.is_subset(&self.nodes) {
            return bad("assigned label outside node set".into());
        }
        if self.assigned.is_empty() {
            return bad("no assigned labels".into());
        }
        for &(p, c) in &self.edges {
            if t.parent(c) != Some(p) {
                return Err(Error::InvalidEdge(t.name(p).into(), t.name(c).into()));
            }
            if !self.nodes.contains(&p) || !self.nodes.contains(&c) {
                return bad(format!("edge {} -> {} leaves the node set", t.name(p), t.name(c)));
            }
        }
        for &v in &self.nodes {
            if let Some(p) = t.parent(v) {
                if !self.edges.contains(&(p, v)) {
                    return bad(format!("node {} is not connected to its parent", t.name(v)));
                }
            }
            let has_child = t.children(v).iter().any(|c| self.nodes.contains(c));
            if !has_child && !self.assigned.contains(&v) {
                return bad(format!("leaf {} is not assigned", t.name(v)));
            }
        }
        Ok(())
    }
}

/// Builds the sub-hierarchy induced by `labels` and their ancestors.
pub fn build_subhierarchy(
    t: &Taxonomy,
    labels: impl IntoIterator<Item = LabelId>,
) -> Result<SubHierarchy> {
    let mut sh = SubHierarchy::default();
    sh.nodes.insert(t.root());
    for v in labels {
        t.check(v)?;
        sh.assigned.insert(v);
        let mut cur = v;
        while sh.nodes.insert(cur) {
            match t.parent(cur) {
                Some(p) => {
                    sh.edges.insert((p, cur));
                    cur = p;
                }
                None => break,
            }
        }
    }
    if sh.assigned.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    Ok(sh)
}

/// A linearized sub-hierarchy with per-token level and scope owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubHierSequence {
    pub tokens: Vec<Token>,
    pub levels: Vec<usize>,
    /// Label whose scope each position belongs to. For the terminator and its
    /// brackets this is the label being assigned.
    pub owner: Vec<LabelId>,
}

impl SubHierSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions holding label tokens, with their labels.
    pub fn label_positions(&self) -> impl Iterator<Item = (usize, LabelId)> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(i, tok)| tok.label().map(|v| (i, v)))
    }

    pub fn position_of(&self, v: LabelId) -> Option<usize> {
        self.tokens.iter().position(|&tok| tok == Token::Label(v))
    }
}

/// Serializes a valid sub-hierarchy.
pub fn serialize(t: &Taxonomy, sh: &SubHierarchy) -> Result<SubHierSequence> {
    sh.validate(t)?;
    Ok(serialize_tree(t, &sh.nodes, &sh.assigned))
}

/// Serializes any rooted node set (closed under parents). Leaves need not be
/// assigned; this is the form partially decoded graphs take.
pub(crate) fn serialize_tree(
    t: &Taxonomy,
    nodes: &BTreeSet<LabelId>,
    assigned: &BTreeSet<LabelId>,
) -> SubHierSequence {
    let mut seq = SubHierSequence { tokens: Vec::new(), levels: Vec::new(), owner: Vec::new() };
    // Iterative pre-order walk; `Exit` emits the optional terminator and the
    // closing bracket once every child subtree is done.
    enum Step {
        Enter(LabelId),
        Exit(LabelId),
    }
    let mut stack = vec![Step::Enter(t.root())];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(v) => {
                let level = t.depth(v) + 1;
                seq.push(Token::Open, level, v);
                seq.push(Token::Label(v), level, v);
                stack.push(Step::Exit(v));
                for &c in t.children(v).iter().rev() {
                    if nodes.contains(&c) {
                        stack.push(Step::Enter(c));
                    }
                }
            }
            Step::Exit(v) => {
                let level = t.depth(v) + 1;
                if assigned.contains(&v) {
                    seq.push(Token::Open, level + 1, v);
                    seq.push(Token::End, level + 1, v);
                    seq.push(Token::Close, level + 1, v);
                }
                seq.push(Token::Close, level, v);
            }
        }
    }
    seq
}

impl SubHierSequence {
    fn push(&mut self, tok: Token, level: usize, owner: LabelId) {
        self.tokens.push(tok);
        self.levels.push(level);
        self.owner.push(owner);
    }
}

/// Rebuilds a full sequence (levels and owners) from bare tokens, validating
/// the grammar on the way.
pub fn from_tokens(t: &Taxonomy, tokens: &[Token]) -> Result<SubHierSequence> {
    let sh = deserialize(t, tokens)?;
    let seq = serialize_tree(t, &sh.nodes, &sh.assigned);
    if seq.tokens != tokens {
        // Valid tree but non-canonical child order; keep the caller's order.
        let levels = token_levels(t, tokens)?;
        let owner = token_owners(t, tokens)?;
        return Ok(SubHierSequence { tokens: tokens.to_vec(), levels, owner });
    }
    Ok(seq)
}

/// Parses a token sequence back into the sub-hierarchy it encodes.
pub fn deserialize(t: &Taxonomy, tokens: &[Token]) -> Result<SubHierarchy> {
    let perr = |m: &str, i: usize| Error::ParseError(format!("{m} at position {i}"));
    let mut sh = SubHierarchy::default();
    // Each frame: label, whether its terminator was seen.
    let mut stack: Vec<(LabelId, bool)> = Vec::new();
    let mut i = 0;
    let mut finished = false;
    while i < tokens.len() {
        if finished {
            return Err(perr("trailing tokens", i));
        }
        match tokens[i] {
            Token::Open => match tokens.get(i + 1) {
                Some(Token::Label(v)) => {
                    let v = *v;
                    t.check(v)?;
                    match stack.last() {
                        None => {
                            if v != t.root() {
                                return Err(perr("sequence must start at the root", i + 1));
                            }
                        }
                        Some(&(p, ended)) => {
                            if ended {
                                return Err(perr("child subtree after terminator", i));
                            }
                            if t.parent(v) != Some(p) {
                                return Err(Error::InvalidEdge(t.name(p).into(), t.name(v).into()));
                            }
                            sh.edges.insert((p, v));
                        }
                    }
                    if !sh.nodes.insert(v) {
                        return Err(Error::DuplicateLabel(t.name(v).into()));
                    }
                    stack.push((v, false));
                    i += 2;
                }
                Some(Token::End) => {
                    if tokens.get(i + 2) != Some(&Token::Close) {
                        return Err(perr("unclosed terminator", i + 2));
                    }
                    match stack.last_mut() {
                        Some((v, ended)) if !*ended => {
                            *ended = true;
                            sh.assigned.insert(*v);
                        }
                        Some(_) => return Err(perr("repeated terminator", i + 1)),
                        None => return Err(perr("terminator outside any label", i + 1)),
                    }
                    i += 3;
                }
                _ => return Err(perr("'(' must be followed by a label or [END]", i)),
            },
            Token::Close => {
                if stack.pop().is_none() {
                    return Err(perr("unbalanced ')'", i));
                }
                if stack.is_empty() {
                    finished = true;
                }
                i += 1;
            }
            Token::End | Token::Label(_) => return Err(perr("token outside brackets", i)),
        }
    }
    if !stack.is_empty() || !finished {
        return Err(Error::ParseError("unbalanced '(' at end of sequence".into()));
    }
    sh.validate(t)?;
    Ok(sh)
}

/// Level of every position: `depth + 1` for labels, brackets inherit the level
/// of what they enclose, the terminator sits one level below its label.
pub fn token_levels(t: &Taxonomy, tokens: &[Token]) -> Result<Vec<usize>> {
    let owners = token_owners(t, tokens)?;
    let mut levels = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let base = t.depth(owners[i]) + 1;
        if tokens[i] == Token::Open && tokens.get(i + 1) == Some(&Token::End) {
            levels.extend([base + 1; 3]);
            i += 3;
            continue;
        }
        levels.push(base);
        i += 1;
    }
    Ok(levels)
}

fn token_owners(t: &Taxonomy, tokens: &[Token]) -> Result<Vec<LabelId>> {
    let mut owners = Vec::with_capacity(tokens.len());
    let mut stack: Vec<LabelId> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match tokens[i] {
            Token::Open => match tokens.get(i + 1) {
                Some(&Token::Label(v)) => {
                    t.check(v)?;
                    stack.push(v);
                    owners.extend([v, v]);
                    i += 2;
                }
                Some(&Token::End) => {
                    let v = *stack.last().ok_or_else(|| Error::ParseError("stray [END]".into()))?;
                    owners.extend([v; 3]);
                    i += 3;
                }
                _ => return Err(Error::ParseError(format!("bad token after '(' at {i}"))),
            },
            Token::Close => {
                let v = stack.pop().ok_or_else(|| Error::ParseError("unbalanced ')'".into()))?;
                owners.push(v);
                i += 1;
            }
            _ => return Err(Error::ParseError(format!("token outside brackets at {i}"))),
        }
    }
    if owners.len() != tokens.len() {
        return Err(Error::ParseError("truncated terminator".into()));
    }
    Ok(owners)
}

/// Which label pairs may attend to each other in decoder self-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// A label query sees itself and its ancestors.
    #[default]
    Ancestors,
    /// Reverse direction: a label query sees itself and its descendants.
    /// Kept for ablation only.
    Descendants,
    /// No hierarchy masking.
    Open,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestors" => Ok(MaskMode::Ancestors),
            "descendants" => Ok(MaskMode::Descendants),
            "open" => Ok(MaskMode::Open),
            _ => Err(Error::InvalidConfig(format!("unknown mask mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Ancestors => "ancestors",
            MaskMode::Descendants => "descendants",
            MaskMode::Open => "open",
        })
    }
}

/// Square attention mask over a sequence. Entry `(q, k)` is 0 when query `q`
/// may attend key `k` and [`MASKED`] otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchyMask {
    size: usize,
    open: Vec<bool>,
}

impl HierarchyMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_open(&self, q: usize, k: usize) -> bool {
        self.open[q * self.size + k]
    }

    pub fn get(&self, q: usize, k: usize) -> f64 {
        if self.is_open(q, k) {
            0.0
        } else {
            MASKED
        }
    }

    pub fn to_additive<F: Float>(&self) -> Array2<F> {
        let masked = F::from(MASKED).unwrap();
        Array2::from_shape_fn((self.size, self.size), |(q, k)| {
            if self.is_open(q, k) {
                F::zero()
            } else {
                masked
            }
        })
    }
}

pub fn build_hierarchy_mask(t: &Taxonomy, seq: &SubHierSequence) -> HierarchyMask {
    build_mask_with_mode(t, &seq.tokens, MaskMode::Ancestors)
}

pub fn build_mask_with_mode(t: &Taxonomy, tokens: &[Token], mode: MaskMode) -> HierarchyMask {
    let m = tokens.len();
    let mut open = vec![true; m * m];
    if mode != MaskMode::Open {
        for (q, tq) in tokens.iter().enumerate() {
            let Some(vq) = tq.label() else { continue };
            for (k, tk) in tokens.iter().enumerate() {
                let Some(vk) = tk.label() else { continue };
                let allowed = vq == vk
                    || match mode {
                        MaskMode::Ancestors => t.is_ancestor(vk, vq),
                        MaskMode::Descendants => t.is_ancestor(vq, vk),
                        MaskMode::Open => true,
                    };
                open[q * m + k] = allowed;
            }
        }
    }
    HierarchyMask { size: m, open }
}

/// Renders tokens in bracket notation, e.g. `(R(A([END])))`.
pub fn to_notation(t: &Taxonomy, tokens: &[Token]) -> String {
    let mut out = String::new();
    for tok in tokens {
        match tok {
            Token::Open => out.push('('),
            Token::Close => out.push(')'),
            Token::End => out.push_str("[END]"),
            Token::Label(v) => out.push_str(t.name(*v)),
        }
    }
    out
}

/// Inverse of [`to_notation`]. Label names may not contain brackets.
pub fn parse_notation(t: &Taxonomy, text: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let mut rest = text.trim();
    while let Some(c) = rest.chars().next() {
        match c {
            '(' => {
                tokens.push(Token::Open);
                rest = &rest[1..];
            }
            ')' => {
                tokens.push(Token::Close);
                rest = &rest[1..];
            }
            c if c.is_whitespace() => rest = &rest[c.len_utf8()..],
            _ if rest.starts_with("[END]") => {
                tokens.push(Token::End);
                rest = &rest[5..];
            }
            _ => {
                let end = rest.find(['(', ')']).unwrap_or(rest.len());
                let name = rest[..end].trim();
                tokens.push(Token::Label(t.id(name)?));
                rest = &rest[end..];
            }
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SAMPLE: &str = "Root\tA\tB\tC\nA\tD\nD\tI\nB\tF\n";

    fn sample() -> Taxonomy {
        Taxonomy::parse(SAMPLE).unwrap()
    }

    fn ids(t: &Taxonomy, names: &[&str]) -> Vec<LabelId> {
        names.iter().map(|n| t.id(n).unwrap()).collect()
    }

    fn random_tree(rng: &mut impl Rng, n: usize) -> Taxonomy {
        let names = (0..n).map(|i| format!("n{i}")).collect();
        let parent = (0..n)
            .map(|i| (i > 0).then(|| LabelId(rng.random_range(0..i) as u32)))
            .collect();
        Taxonomy::from_parents(names, parent).unwrap()
    }

    // Independent oracle: union of parent chains, per label.
    fn chain_union(t: &Taxonomy, labels: &[LabelId]) -> BTreeSet<LabelId> {
        let mut out = BTreeSet::from([t.root()]);
        for &v in labels {
            let mut cur = Some(v);
            while let Some(c) = cur {
                out.insert(c);
                cur = t.parent(c);
            }
        }
        out
    }

    #[test]
    fn sample_tree_subhierarchy() {
        let t = sample();
        let sh = build_subhierarchy(&t, ids(&t, &["C", "F", "I"])).unwrap();
        assert_eq!(sh.nodes, ids(&t, &["Root", "A", "B", "C", "D", "F", "I"]).into_iter().collect());
        let e = |a, b| (t.id(a).unwrap(), t.id(b).unwrap());
        let want: BTreeSet<_> =
            [e("Root", "A"), e("A", "D"), e("D", "I"), e("Root", "B"), e("B", "F"), e("Root", "C")]
                .into();
        assert_eq!(sh.edges, want);
    }

    #[test]
    fn root_only_and_empty() {
        let t = sample();
        let sh = build_subhierarchy(&t, [t.root()]).unwrap();
        assert_eq!(sh.nodes.len(), 1);
        assert!(sh.edges.is_empty());
        let seq = serialize(&t, &sh).unwrap();
        assert_eq!(to_notation(&t, &seq.tokens), "(Root([END]))");
        assert!(matches!(build_subhierarchy(&t, []), Err(Error::EmptyLabelSet)));
        assert!(matches!(build_subhierarchy(&t, [LabelId(40)]), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn sample_tree_sequence() {
        let t = sample();
        let sh = build_subhierarchy(&t, ids(&t, &["C", "F", "I"])).unwrap();
        let seq = serialize(&t, &sh).unwrap();
        assert_eq!(
            to_notation(&t, &seq.tokens),
            "(Root(A(D(I([END]))))(B(F([END])))(C([END])))"
        );
        assert_eq!(seq.len(), 30);
        let back = deserialize(&t, &seq.tokens).unwrap();
        assert_eq!(back.assigned, ids(&t, &["C", "F", "I"]).into_iter().collect());
    }

    #[test]
    fn internal_assigned_label() {
        let t = sample();
        let sh = build_subhierarchy(&t, ids(&t, &["A", "I"])).unwrap();
        let seq = serialize(&t, &sh).unwrap();
        assert_eq!(to_notation(&t, &seq.tokens), "(Root(A(D(I([END])))([END])))");
        assert_eq!(deserialize(&t, &seq.tokens).unwrap(), sh);
    }

    #[test]
    fn deserialize_errors() {
        let t = sample();
        let p = |s: &str| parse_notation(&t, s).unwrap();
        assert!(matches!(deserialize(&t, &p("(Root([END])")), Err(Error::ParseError(_))));
        assert!(matches!(deserialize(&t, &p("(Root([END])))")), Err(Error::ParseError(_))));
        assert!(matches!(deserialize(&t, &p("(Root(D([END])))")), Err(Error::InvalidEdge(..))));
        assert!(matches!(
            deserialize(&t, &p("(Root(A([END]))(A([END])))")),
            Err(Error::DuplicateLabel(_))
        ));
        assert!(matches!(deserialize(&t, &p("(A([END]))")), Err(Error::ParseError(_))));
        // a leaf without terminator is grammatical but not a valid sub-hierarchy
        assert!(matches!(deserialize(&t, &p("(Root(A))")), Err(Error::InvalidSubHierarchy(_))));
    }

    #[test]
    fn serialize_rejects_invalid() {
        let t = sample();
        let mut sh = build_subhierarchy(&t, ids(&t, &["I"])).unwrap();
        sh.assigned.clear();
        sh.assigned.insert(t.id("A").unwrap());
        assert!(matches!(serialize(&t, &sh), Err(Error::InvalidSubHierarchy(_))));
    }

    #[test]
    fn levels_on_sample_tree() {
        let t = sample();
        let sh = build_subhierarchy(&t, ids(&t, &["C", "F", "I"])).unwrap();
        let seq = serialize(&t, &sh).unwrap();
        let at = |name: &str| seq.levels[seq.position_of(t.id(name).unwrap()).unwrap()];
        assert_eq!((at("Root"), at("A"), at("D"), at("I")), (1, 2, 3, 4));
        let i_pos = seq.position_of(t.id("I").unwrap()).unwrap();
        assert_eq!(seq.tokens[i_pos + 2], Token::End);
        assert_eq!(seq.levels[i_pos + 2], 5);
        assert_eq!(seq.levels[0], 1);
        assert_eq!(token_levels(&t, &seq.tokens).unwrap(), seq.levels);
    }

    #[test]
    fn mask_small_example() {
        let t = sample();
        let seq = serialize(&t, &build_subhierarchy(&t, ids(&t, &["A"])).unwrap()).unwrap();
        assert_eq!(to_notation(&t, &seq.tokens), "(Root(A([END])))");
        let mask = build_hierarchy_mask(&t, &seq);
        let (r, a) = (1, 3);
        assert_eq!(mask.get(a, r), 0.0);
        assert_eq!(mask.get(a, a), 0.0);
        assert_eq!(mask.get(r, a), MASKED);
        for (i, tok) in seq.tokens.iter().enumerate() {
            if tok.is_special() {
                for j in 0..seq.len() {
                    assert_eq!(mask.get(i, j), 0.0);
                    assert_eq!(mask.get(j, i), 0.0);
                }
            }
            assert!(mask.is_open(i, i));
        }
    }

    #[test]
    fn mask_modes_differ_in_direction() {
        let t = sample();
        let seq = serialize(&t, &build_subhierarchy(&t, ids(&t, &["A"])).unwrap()).unwrap();
        let lit = build_mask_with_mode(&t, &seq.tokens, MaskMode::Descendants);
        assert!(lit.is_open(1, 3));
        assert!(!lit.is_open(3, 1));
        let open = build_mask_with_mode(&t, &seq.tokens, MaskMode::Open);
        assert!((0..seq.len()).all(|q| (0..seq.len()).all(|k| open.is_open(q, k))));
    }

    #[test]
    fn notation_round_trip() {
        let t = sample();
        let s = "(Root(A(D(I([END]))))(B(F([END])))(C([END])))";
        let toks = parse_notation(&t, s).unwrap();
        assert_eq!(to_notation(&t, &toks), s);
        assert!(parse_notation(&t, "(Nope)").is_err());
    }

    #[test]
    fn randomized_subhierarchy_matches_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..120);
            let t = random_tree(&mut rng, n);
            let k = rng.random_range(1..=n.min(10));
            let labels: Vec<LabelId> = (0..k).map(|_| LabelId(rng.random_range(0..n) as u32)).collect();
            let sh = build_subhierarchy(&t, labels.iter().copied()).unwrap();
            assert_eq!(sh.nodes, chain_union(&t, &labels));
            sh.validate(&t).unwrap();
            let seq = serialize(&t, &sh).unwrap();
            assert_eq!(seq.len(), 3 * sh.nodes.len() + 3 * sh.assigned.len());
        }
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), n in 1usize..200, k in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            let labels: Vec<LabelId> = (0..k).map(|_| LabelId(rng.random_range(0..n) as u32)).collect();
            let sh = build_subhierarchy(&t, labels).unwrap();
            let seq = serialize(&t, &sh).unwrap();
            prop_assert_eq!(deserialize(&t, &seq.tokens).unwrap(), sh);
            prop_assert_eq!(from_tokens(&t, &seq.tokens).unwrap(), seq.clone());
            let text = to_notation(&t, &seq.tokens);
            prop_assert_eq!(parse_notation(&t, &text).unwrap(), seq.tokens);
        }

        #[test]
        fn label_rows_open_exactly_self_and_ancestors(seed in any::<u64>(), n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tree(&mut rng, n);
            let labels: Vec<LabelId> = (0..5).map(|_| LabelId(rng.random_range(0..n) as u32)).collect();
            let seq = serialize(&t, &build_subhierarchy(&t, labels).unwrap()).unwrap();
            let mask = build_hierarchy_mask(&t, &seq);
            let specials = seq.tokens.iter().filter(|tok| tok.is_special()).count();
            for (q, v) in seq.label_positions() {
                let open = (0..seq.len()).filter(|&k| mask.is_open(q, k)).count();
                prop_assert_eq!(open, specials + 1 + t.ancestors(v).unwrap().len());
            }
        }
    }
}
