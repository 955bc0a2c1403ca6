use std::collections::BTreeSet;

use hidec_core::metrics::{close_under_ancestors, evaluate};
use hidec_core::{LabelId, Taxonomy};
use proptest::prelude::*;

const TAX: &str = "R\tA\tB\tC\nA\tD\tE\nB\tF\nD\tG\tH\nF\tI\n";

fn set_strategy(n: u32) -> impl Strategy<Value = BTreeSet<LabelId>> {
    prop::collection::btree_set((0..n).prop_map(LabelId), 0..5)
}

/// Counts every (document, label) pair directly, no maps shared with the
/// library.
fn brute_micro(t: &Taxonomy, gold: &[BTreeSet<LabelId>], pred: &[BTreeSet<LabelId>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (g, p) in gold.iter().zip(pred) {
        for v in t.labels().filter(|&v| v != t.root()) {
            match (g.contains(&v), p.contains(&v)) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
    }
    if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) }
}

proptest! {
    #[test]
    fn micro_matches_brute_force(
        gold in prop::collection::vec(set_strategy(10), 1..8),
        pred in prop::collection::vec(set_strategy(10), 8),
    ) {
        let t = Taxonomy::parse(TAX).unwrap();
        let pred = &pred[..gold.len()];
        let r = evaluate(&gold, pred, &t, false).unwrap();
        prop_assert!((r.micro_f1 - brute_micro(&t, &gold, pred)).abs() <= 1e-12);
        let closed_g: Vec<_> = gold.iter().map(|s| close_under_ancestors(&t, s)).collect();
        let closed_p: Vec<_> = pred.iter().map(|s| close_under_ancestors(&t, s)).collect();
        let rc = evaluate(&gold, pred, &t, true).unwrap();
        prop_assert!((rc.micro_f1 - brute_micro(&t, &closed_g, &closed_p)).abs() <= 1e-12);
    }

    #[test]
    fn micro_invariant_under_relabeling(
        gold in prop::collection::vec(set_strategy(10), 1..6),
        pred in prop::collection::vec(set_strategy(10), 6),
        seed in any::<u64>(),
    ) {
        // Relabel by shuffling names of a flat taxonomy (every label a root
        // child) so the permutation is structure preserving.
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let names: Vec<String> = (1..10).map(|i| format!("x{i}")).collect();
        let flat = Taxonomy::parse(&format!("R\t{}\n", names.join("\t"))).unwrap();
        let mut perm: Vec<u32> = (1..10).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let map = |s: &BTreeSet<LabelId>| -> BTreeSet<LabelId> {
            s.iter().map(|v| if v.0 == 0 { *v } else { LabelId(perm[v.0 as usize - 1]) }).collect()
        };
        let pred = &pred[..gold.len()];
        let a = evaluate(&gold, pred, &flat, false).unwrap();
        let g2: Vec<_> = gold.iter().map(map).collect();
        let p2: Vec<_> = pred.iter().map(map).collect();
        let b = evaluate(&g2, &p2, &flat, false).unwrap();
        prop_assert_eq!(a.micro_f1, b.micro_f1);
        prop_assert_eq!(a.counts, b.counts);
    }
}
