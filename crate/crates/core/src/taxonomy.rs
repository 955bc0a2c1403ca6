//! The label tree.
//!
//! A taxonomy file holds one record per line, `parent<TAB>child<TAB>child...`.
//! Lines starting with `#` and blank lines are ignored. The first parent of the
//! first record is the root. Label ids are dense and assigned in order of first
//! appearance, which also fixes the canonical order of every children list.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense label identifier, `0..C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId(pub u32);

impl LabelId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One entry of a candidate set during child scoring: a real child label or
/// the terminator that assigns the parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Candidate {
    Child(LabelId),
    End,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<String>,
    parent: Vec<Option<LabelId>>,
    children: Vec<Vec<LabelId>>,
    depth: Vec<usize>,
    by_name: HashMap<String, LabelId>,
    root: LabelId,
    max_depth: usize,
}

impl Taxonomy {
    /// Reads and validates a taxonomy file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut by_name: HashMap<String, LabelId> = HashMap::new();
        let mut parent: Vec<Option<LabelId>> = Vec::new();
        let mut root: Option<LabelId> = None;

        let mut intern = |name: &str, names: &mut Vec<String>, parent: &mut Vec<Option<LabelId>>| {
            if let Some(&id) = by_name.get(name) {
                return id;
            }
            let id = LabelId(names.len() as u32);
            names.push(name.to_string());
            parent.push(None);
            by_name.insert(name.to_string(), id);
            id
        };

        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
            if fields.iter().any(|f| f.is_empty()) {
                return Err(Error::MalformedTaxonomy(format!(
                    "line {}: empty label name",
                    lineno + 1
                )));
            }
            let p = intern(fields[0], &mut names, &mut parent);
            if root.is_none() {
                root = Some(p);
            }
            for &child in &fields[1..] {
                let c = intern(child, &mut names, &mut parent);
                if c == p {
                    return Err(Error::CyclicTaxonomy(child.to_string()));
                }
                if parent[c.index()].is_some() {
                    return Err(Error::MultipleParents(child.to_string()));
                }
                parent[c.index()] = Some(p);
            }
        }

        let root = root.ok_or_else(|| Error::MalformedTaxonomy("no records".into()))?;
        if parent[root.index()].is_some() {
            return Err(Error::CyclicTaxonomy(names[root.index()].clone()));
        }
        for (i, p) in parent.iter().enumerate() {
            if p.is_none() && i != root.index() {
                return Err(Error::OrphanLabel(names[i].clone()));
            }
        }
        Self::from_parents(names, parent)
    }

    /// Builds a taxonomy from names and a parent array. Exactly one entry must
    /// have no parent; it becomes the root.
    pub fn from_parents(names: Vec<String>, parent: Vec<Option<LabelId>>) -> Result<Self> {
        if names.is_empty() || names.len() != parent.len() {
            return Err(Error::MalformedTaxonomy(
                "names and parents must be non-empty and aligned".into(),
            ));
        }
        let n = names.len();
        let mut by_name = HashMap::with_capacity(n);
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(['\t', '\n']) {
                return Err(Error::MalformedTaxonomy(format!("invalid label name {name:?}")));
            }
            if by_name.insert(name.clone(), LabelId(i as u32)).is_some() {
                return Err(Error::MalformedTaxonomy(format!("duplicate label name {name:?}")));
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        match roots.len() {
            0 => return Err(Error::CyclicTaxonomy(names[0].clone())),
            1 => {}
            _ => return Err(Error::OrphanLabel(names[roots[1]].clone())),
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                if p.index() >= n {
                    return Err(Error::UnknownLabel(p.to_string()));
                }
                children[p.index()].push(LabelId(i as u32));
            }
        }

        // Breadth-first from the root; anything unreached sits on a cycle.
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for c in &children[v] {
                depth[c.index()] = depth[v] + 1;
                queue.push_back(c.index());
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(Error::CyclicTaxonomy(names[i].clone()));
        }
        let max_depth = depth.iter().copied().max().unwrap_or(0);

        let root = LabelId(root as u32);
        let mut tax = Taxonomy { names, parent, children, depth, by_name, root, max_depth };
        tax.children.iter_mut().for_each(|c| c.sort());
        Ok(tax)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> LabelId {
        self.root
    }

    /// Deepest label depth, P. The root has depth 0.
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.names.len() as u32).map(LabelId)
    }

    pub fn check(&self, v: LabelId) -> Result<()> {
        if v.index() < self.names.len() {
            Ok(())
        } else {
            Err(Error::UnknownLabel(v.to_string()))
        }
    }

    pub fn name(&self, v: LabelId) -> &str {
        &self.names[v.index()]
    }

    pub fn id(&self, name: &str) -> Result<LabelId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn parent(&self, v: LabelId) -> Option<LabelId> {
        self.parent[v.index()]
    }

    pub fn children(&self, v: LabelId) -> &[LabelId] {
        &self.children[v.index()]
    }

    pub fn depth(&self, v: LabelId) -> usize {
        self.depth[v.index()]
    }

    pub fn is_leaf(&self, v: LabelId) -> bool {
        self.children[v.index()].is_empty()
    }

    /// Path from the root down to `parent(v)`, excluding `v`.
    pub fn ancestors(&self, v: LabelId) -> Result<Vec<LabelId>> {
        self.check(v)?;
        let mut out = Vec::with_capacity(self.depth(v));
        let mut cur = self.parent(v);
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent(p);
        }
        out.reverse();
        Ok(out)
    }

    /// True when `a` is a proper ancestor of `b`.
    pub fn is_ancestor(&self, a: LabelId, b: LabelId) -> bool {
        let (da, mut db) = (self.depth(a), self.depth(b));
        let mut cur = b;
        while db > da {
            cur = self.parent[cur.index()].expect("non-root has a parent");
            db -= 1;
        }
        cur == a && a != b
    }

    /// Children in canonical order followed by the terminator.
    pub fn augmented_children(&self, v: LabelId) -> Result<Vec<Candidate>> {
        self.check(v)?;
        let mut out: Vec<Candidate> = self.children(v).iter().map(|&c| Candidate::Child(c)).collect();
        out.push(Candidate::End);
        Ok(out)
    }

    /// File form that reloads to an identical taxonomy (same ids). Records are
    /// ordered by their first child id; when that alone cannot reproduce the
    /// ids, a prelude of bare names in id order is written first.
    pub fn to_tsv(&self) -> String {
        let root = self.root();
        let mut internal: Vec<LabelId> = self.labels().filter(|&v| !self.is_leaf(v)).collect();
        internal.sort_by_key(|&v| self.children(v)[0]);
        let mut records = String::new();
        for v in internal {
            records.push_str(self.name(v));
            for c in self.children(v) {
                records.push('\t');
                records.push_str(self.name(*c));
            }
            records.push('\n');
        }
        if records.is_empty() {
            return format!("{}\n", self.name(root));
        }
        if Taxonomy::parse(&records).ok().as_ref() == Some(self) {
            return records;
        }
        let mut out = String::new();
        out.push_str(self.name(root));
        out.push('\n');
        for v in self.labels().filter(|&v| v != root) {
            out.push_str(self.name(v));
            out.push('\n');
        }
        out + &records
    }

    /// SHA-256 over `id, name, parent` records, hex encoded. Two taxonomies
    /// share a hash iff they agree on every id.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.labels() {
            let p = self.parent(v).map(|p| p.0 as i64).unwrap_or(-1);
            h.update(format!("{}\t{}\t{}\n", v.0, self.name(v), p).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
