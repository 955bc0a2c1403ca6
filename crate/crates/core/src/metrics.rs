//! Micro, macro and level-wise F1 over label sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

/// How macro-F1 chooses its labels; written into every report.
pub const MACRO_CONVENTION: &str =
    "macro-F1 averages per-label F1 over labels that are gold or predicted at least once; root excluded";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2TP / (2TP + FP + FN)`, zero when there is nothing to count.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelScore {
    pub label: String,
    pub depth: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelScore {
    pub depth: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub micro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub convention: String,
    pub ancestor_closure: bool,
    pub documents: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_label: Vec<LabelScore>,
    pub per_level: Vec<LevelScore>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `depth,tp,fp,fn,micro_f1`, one row per taxonomy depth.
    pub fn per_level_csv(&self) -> String {
        let mut out = String::from("depth,tp,fp,fn,micro_f1\n");
        for l in &self.per_level {
            let _ = writeln!(out, "{},{},{},{},{}", l.depth, l.counts.tp, l.counts.fp, l.counts.fn_, l.micro_f1);
        }
        out
    }
}

/// `set` plus every ancestor of its members.
pub fn close_under_ancestors(t: &Taxonomy, set: &BTreeSet<LabelId>) -> BTreeSet<LabelId> {
    let mut out = set.clone();
    for &v in set {
        let mut cur = t.parent(v);
        while let Some(p) = cur {
            if !out.insert(p) {
                break;
            }
            cur = t.parent(p);
        }
    }
    out
}

/// Scores aligned gold and predicted label sets. The root never counts.
pub fn evaluate(
    gold: &[BTreeSet<LabelId>],
    pred: &[BTreeSet<LabelId>],
    t: &Taxonomy,
    ancestor_closure: bool,
) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::AlignmentError { gold: gold.len(), pred: pred.len() });
    }
    let prepare = |s: &BTreeSet<LabelId>| -> Result<BTreeSet<LabelId>> {
        for &v in s {
            t.check(v)?;
        }
        let mut s = if ancestor_closure { close_under_ancestors(t, s) } else { s.clone() };
        s.remove(&t.root());
        Ok(s)
    };
    let mut per_label: BTreeMap<LabelId, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (prepare(g)?, prepare(p)?);
        for &v in g.union(&p) {
            let c = per_label.entry(v).or_default();
            match (g.contains(&v), p.contains(&v)) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => unreachable!(),
            }
        }
    }

    let mut total = Counts::default();
    let mut levels: BTreeMap<usize, Counts> = (1..=t.max_depth()).map(|d| (d, Counts::default())).collect();
    let mut labels = Vec::with_capacity(per_label.len());
    for (&v, &c) in &per_label {
        total.add(c);
        levels.entry(t.depth(v)).or_default().add(c);
        labels.push(LabelScore {
            label: t.name(v).to_string(),
            depth: t.depth(v),
            counts: c,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        });
    }
    let macro_f1 = if labels.is_empty() {
        0.0
    } else {
        labels.iter().map(|l| l.f1).sum::<f64>() / labels.len() as f64
    };
    Ok(EvalReport {
        convention: MACRO_CONVENTION.into(),
        ancestor_closure,
        documents: gold.len(),
        counts: total,
        micro_precision: total.precision(),
        micro_recall: total.recall(),
        micro_f1: total.f1(),
        macro_f1,
        per_label: labels,
        per_level: levels
            .into_iter()
            .map(|(depth, counts)| LevelScore { depth, counts, micro_f1: counts.f1() })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "Root\tA\tB\tC\nA\tD\nD\tI\nB\tF\n";

    fn s(t: &Taxonomy, names: &[&str]) -> BTreeSet<LabelId> {
        names.iter().map(|n| t.id(n).unwrap()).collect()
    }

    #[test]
    fn perfect_prediction() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let gold = vec![s(&t, &["C", "F", "I"]), s(&t, &["A"])];
        let r = evaluate(&gold, &gold, &t, true).unwrap();
        assert_eq!(r.micro_f1, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn one_hit_one_miss() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let r = evaluate(&[s(&t, &["A", "B"])], &[s(&t, &["A", "C"])], &t, false).unwrap();
        assert_eq!(r.counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(r.micro_f1, 0.5);
        // A: 1, B: 0, C: 0
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn closure_adds_ancestors_but_not_root() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let closed = close_under_ancestors(&t, &s(&t, &["I"]));
        assert_eq!(closed, s(&t, &["Root", "A", "D", "I"]));
        assert_eq!(close_under_ancestors(&t, &closed), closed);
        let r = evaluate(&[s(&t, &["I"])], &[s(&t, &["D"])], &t, true).unwrap();
        assert_eq!(r.counts, Counts { tp: 2, fp: 0, fn_: 1 });
        let r = evaluate(&[s(&t, &["Root"])], &[s(&t, &["Root"])], &t, true).unwrap();
        assert_eq!(r.counts, Counts::default());
    }

    #[test]
    fn levels_sum_to_total() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let r = evaluate(&[s(&t, &["I", "C"])], &[s(&t, &["F", "D"])], &t, true).unwrap();
        let mut sum = Counts::default();
        for l in &r.per_level {
            sum.add(l.counts);
        }
        assert_eq!(sum, r.counts);
        assert_eq!(r.per_level.len(), 3);
        assert!(r.per_level_csv().starts_with("depth,tp,fp,fn,micro_f1\n1,"));
    }

    #[test]
    fn misaligned_inputs() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let err = evaluate(&[s(&t, &["A"])], &[], &t, true).unwrap_err();
        assert!(matches!(err, Error::AlignmentError { gold: 1, pred: 0 }));
    }

    #[test]
    fn report_serializes() {
        let t = Taxonomy::parse(SAMPLE).unwrap();
        let r = evaluate(&[s(&t, &["A"])], &[s(&t, &["A"])], &t, true).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["micro_f1"], 1.0);
        assert_eq!(v["fn"], 0);
        assert_eq!(v["per_label"][0]["label"], "A");
    }
}
