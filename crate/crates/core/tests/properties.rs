mod common;

use std::path::Path;

use ndarray::{Array2, Axis};
use proptest::prelude::*;

use common::oracles::{oracle_asl, oracle_metrics};
use hiertune::backbone::BackboneRegistry;
use hiertune::loss::{asl, asl_term, AslConfig};
use hiertune::metrics::evaluate;
use hiertune::pipeline::load_workspace;
use hiertune::prompthead::{pair_softmax, PromptState, Scales, TextBank};
use hiertune::zeroshot::map_predictions;
use hiertune::{Hierarchy, LabelSet, Level};

fn demo() -> Hierarchy {
    Hierarchy::load(common::demo_hierarchy()).unwrap()
}

fn fine_subset(h: &Hierarchy, mask: &[bool]) -> LabelSet {
    h.space(Level::Fine)
        .labels()
        .iter()
        .zip(mask.iter().cycle())
        .filter(|(_, &m)| m)
        .map(|(l, _)| l.clone())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn derived_sets_collapse_monotonically(mask in proptest::collection::vec(any::<bool>(), 1..40)) {
        let h = demo();
        let y1 = fine_subset(&h, &mask);
        let (y2, y3) = h.derive_label_sets(&y1).unwrap();
        prop_assert!(y3.len() <= y2.len() && y2.len() <= y1.len());
        for l in &y1 {
            let via_mid = h.map_label(h.map_label(l, Level::Fine, Level::Mid).unwrap(), Level::Mid, Level::Coarse).unwrap();
            prop_assert_eq!(h.map_label(l, Level::Fine, Level::Coarse).unwrap(), via_mid);
        }
    }

    #[test]
    fn row_order_does_not_change_the_hierarchy(seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let text = std::fs::read_to_string(common::demo_hierarchy()).unwrap();
        let mut rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("l1\t")).collect();
        rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled = format!("l1\tl2\tl3\n{}\n", rows.join("\n"));
        let a = demo();
        let b = Hierarchy::from_tsv_str(&shuffled, Path::new("shuffled")).unwrap();
        for lv in Level::ALL {
            prop_assert_eq!(a.space(lv).labels(), b.space(lv).labels());
            prop_assert_eq!(a.space(lv).digest(), b.space(lv).digest());
        }
    }

    #[test]
    fn evaluate_matches_oracle(
        pairs in proptest::collection::vec(
            (proptest::collection::btree_set(0u8..10, 0..=8), proptest::collection::btree_set(0u8..10, 1..=8)),
            1..=10,
        )
    ) {
        let to_set = |s: &std::collections::BTreeSet<u8>| -> LabelSet { s.iter().map(|i| format!("l{i}")).collect() };
        let preds: Vec<LabelSet> = pairs.iter().map(|(p, _)| to_set(p)).collect();
        let gts: Vec<LabelSet> = pairs.iter().map(|(_, g)| to_set(g)).collect();
        let lib = evaluate(&preds, &gts).unwrap();
        let ora = oracle_metrics(&common::to_vecs(&preds), &common::to_vecs(&gts));
        for (a, b) in [lib.precision, lib.recall, lib.iou, lib.f1].iter().zip(&ora.values) {
            prop_assert!((a - b).abs() <= ora.tolerance, "{} vs {}", a, b);
            prop_assert!((0.0..=100.0).contains(a));
        }
    }

    #[test]
    fn perfect_predictions_score_100(
        sets in proptest::collection::vec(proptest::collection::btree_set(0u8..10, 1..=5), 1..=10)
    ) {
        let gts: Vec<LabelSet> = sets.iter().map(|s| s.iter().map(|i| format!("l{i}")).collect()).collect();
        let m = evaluate(&gts, &gts).unwrap();
        prop_assert_eq!((m.precision, m.recall, m.iou, m.f1), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn fine_true_positives_survive_mapping(
        gt_mask in proptest::collection::vec(any::<bool>(), 40),
        pred_mask in proptest::collection::vec(any::<bool>(), 40),
    ) {
        let h = demo();
        let y1 = fine_subset(&h, &gt_mask);
        let p1 = fine_subset(&h, &pred_mask);
        prop_assume!(!y1.is_empty());
        let (y2, y3) = h.derive_label_sets(&y1).unwrap();
        let (p2, p3) = map_predictions(&h, &p1).unwrap();
        let tp1: LabelSet = p1.intersection(&y1).cloned().collect();
        let tp2: LabelSet = p2.intersection(&y2).cloned().collect();
        let tp3: LabelSet = p3.intersection(&y3).cloned().collect();
        prop_assert!(h.map_set(&tp1, Level::Fine, Level::Mid).unwrap().is_subset(&tp2));
        prop_assert!(h.map_set(&tp2, Level::Mid, Level::Coarse).unwrap().is_subset(&tp3));
        let (q2, q3) = map_predictions(&h, &y1).unwrap();
        prop_assert_eq!((q2, q3), (y2, y3));
    }

    #[test]
    fn asl_matches_oracle_and_is_monotone(p in 0.0f64..1.0, dp in 1e-6f64..0.1) {
        let cfg = AslConfig::default();
        for positive in [true, false] {
            let lib = asl_term(p, positive, &cfg).0;
            let ora = oracle_asl(p, positive, cfg.gamma_pos, cfg.gamma_neg, cfg.margin, cfg.eps);
            prop_assert!((lib - ora).abs() <= 1e-12 * ora.abs().max(1.0));
            prop_assert!(lib >= 0.0);
        }
        let q = (p + dp).min(1.0);
        if q > p {
            prop_assert!(asl_term(q, true, &cfg).0 < asl_term(p, true, &cfg).0);
            prop_assert!(asl_term(q, false, &cfg).0 >= asl_term(p, false, &cfg).0);
        }
    }

    // Past a gap of about 37 the sigmoid rounds to exactly 0 or 1 in f64.
    #[test]
    fn pair_softmax_is_a_valid_probability(a in -15.0f64..15.0, b in -15.0f64..15.0) {
        let p = pair_softmax(a, b);
        let q = pair_softmax(b, a);
        prop_assert!(p > 0.0 && p < 1.0);
        prop_assert!((p + q - 1.0).abs() < 1e-12);
        prop_assert!(pair_softmax(a + 1.0, b) > p);
    }
}

#[test]
fn asl_zero_exactly_when_everything_is_right() {
    let cfg = AslConfig::default();
    assert_eq!(asl(&[1.0, 0.04, 0.0], &[true, false, false], &cfg).unwrap(), 0.0);
    assert!(asl(&[0.99, 0.04], &[true, false], &cfg).unwrap() > 0.0);
    assert!(asl(&[1.0, 0.06], &[true, false], &cfg).unwrap() > 0.0);
}

fn permuted(state: &PromptState, perm: &[usize]) -> PromptState {
    let mut out = state.clone();
    out.classes = perm.iter().map(|&i| state.classes[i].clone()).collect();
    out.pos_ctx = state.pos_ctx.select(Axis(0), perm);
    out.neg_ctx = state.neg_ctx.select(Axis(0), perm);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_valid_and_permute_with_classes(seed in 0u64..1000, rot in 1usize..3) {
        let cfg = common::tiny_config();
        let ws = load_workspace(&cfg, &BackboneRegistry::default()).unwrap();
        let ctx = ws.context(&cfg);
        let state = ctx.init_level(Level::Fine, seed).unwrap();
        let n = state.classes.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let scales = Scales::new(ctx.backbone, cfg.head.agg_scale);
        let a = TextBank::build(&state, ctx.backbone).unwrap();
        let b = TextBank::build(&permuted(&state, &perm), ctx.backbone).unwrap();
        for s in &ws.train.samples {
            let regions: Array2<f64> = ctx.backbone.encode_image(&s.image_ref).unwrap();
            let (sa, _) = a.score(&regions, scales).unwrap();
            let (sb, _) = b.score(&regions, scales).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!(sa.probs[i] > 0.0 && sa.probs[i] < 1.0);
                prop_assert_eq!(sa.probs[i], sb.probs[j]);
                prop_assert_eq!(sa.logits_pos[i], sb.logits_pos[j]);
                prop_assert_eq!(sa.logits_neg[i], sb.logits_neg[j]);
            }
        }
    }
}
