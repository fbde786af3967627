mod common;

use std::collections::HashMap;

use codepred::ast::{normalize_ast, validate_ast, NodeKind};
use codepred::eval::{compute_mrr, full_rank, rank_of_target, Rank};
use codepred::model::{LossTargets, ModelKind};
use codepred::seqgen::{
    dfs_sequence, extract_root_path, leaf_sequence, slice_windows, ud_path, RelationClass, RelationSpace,
};
use codepred::vocab::{Vocab, RESERVED, UNK_ID};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tree(seed: u64, max_nodes: usize, dual: f64) -> codepred::ast::Ast {
    common::random_tree(&mut ChaCha8Rng::seed_from_u64(seed), max_nodes, 6, dual)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalization_is_idempotent_and_grows_by_dual_count(seed: u64, max in 1usize..120, dual in 0.0f64..1.0) {
        let raw = tree(seed, max, dual);
        let k = raw.nodes().iter().filter(|n| matches!(n.kind(), NodeKind::Dual { .. })).count();
        let norm = normalize_ast(&raw).unwrap();
        prop_assert_eq!(norm.len(), raw.len() + k);
        prop_assert!(validate_ast(&norm).is_empty());
        prop_assert_eq!(normalize_ast(&norm).unwrap(), norm.clone());
        let count = |t: &codepred::ast::Ast| {
            let mut m: HashMap<(bool, String), usize> = HashMap::new();
            for n in t.nodes() {
                if let Some(ty) = &n.type_name { *m.entry((true, ty.clone())).or_default() += 1; }
                if let Some(v) = &n.value { *m.entry((false, v.clone())).or_default() += 1; }
            }
            m
        };
        prop_assert_eq!(count(&raw), count(&norm));
    }

    #[test]
    fn dual_value_becomes_first_child(seed: u64) {
        let raw = tree(seed, 60, 0.5);
        let norm = normalize_ast(&raw).unwrap();
        // pre-order ids map raw node i to one new id; a dual node's value leaf follows it
        let mut new_id = 0;
        for id in raw.preorder() {
            let node = raw.node(id);
            if let NodeKind::Dual { value, .. } = node.kind() {
                let first = norm.node(new_id).children[0];
                prop_assert_eq!(first, new_id + 1);
                prop_assert_eq!(norm.node(first).value.as_deref(), Some(value));
                new_id += 2;
            } else {
                new_id += 1;
            }
        }
    }

    #[test]
    fn sequences_cover_the_tree_in_preorder(seed: u64) {
        let t = normalize_ast(&tree(seed, 80, 0.6)).unwrap();
        let dfs = dfs_sequence(&t).unwrap();
        prop_assert_eq!(dfs.len(), t.len());
        prop_assert!(dfs.iter().enumerate().all(|(i, tok)| tok.source_node_id == i));
        let leaves = leaf_sequence(&t).unwrap();
        let want: Vec<_> = dfs.iter().filter(|x| x.is_leaf()).cloned().collect();
        prop_assert_eq!(leaves, want);
    }

    #[test]
    fn root_paths_are_capped_ancestor_types(seed: u64, cap in 1usize..16) {
        let t = normalize_ast(&tree(seed, 80, 0.7)).unwrap();
        for id in 0..t.len() {
            if !t.node(id).is_leaf() || t.parent(id).is_none() {
                continue;
            }
            let path = extract_root_path(&t, id, cap).unwrap();
            prop_assert_eq!(path.len(), t.depth(id).min(cap));
            let mut cur = t.parent(id);
            for ty in &path.0 {
                let a = cur.unwrap();
                prop_assert_eq!(t.node(a).type_name.as_deref(), Some(ty.as_str()));
                cur = t.parent(a);
            }
        }
    }

    #[test]
    fn ud_path_matches_oracle_and_reverses(seed: u64) {
        let t = normalize_ast(&tree(seed, 40, 0.5)).unwrap();
        for a in 0..t.len() {
            for b in 0..t.len() {
                let ab = ud_path(&t, a, b).unwrap();
                prop_assert_eq!(ab, common::ud_path_oracle(&t, a, b));
                let ba = ud_path(&t, b, a).unwrap();
                prop_assert_eq!(ab, RelationClass { up: ba.down, down: ba.up });
            }
        }
    }

    #[test]
    fn relation_ids_are_a_bijection_below_none(up_max in 0usize..10, down_max in 0usize..10, up in 0usize..30, down in 0usize..30) {
        let space = RelationSpace::new(up_max, down_max);
        let id = space.id_of(RelationClass { up, down });
        prop_assert!(id < space.none_id());
        prop_assert_eq!(space.none_id() + 1, space.num_classes());
        prop_assert_eq!(space.class_of(id), Some(RelationClass { up, down }.clipped(up_max, down_max)));
        prop_assert_eq!(space.class_of(space.none_id()), None);
    }

    #[test]
    fn windows_partition_positions(n in 0usize..5000, context in 1usize..1500, frac in 0.0f64..1.0) {
        let stride = 1 + ((context - 1) as f64 * frac) as usize;
        let ws = slice_windows(n, context, stride).unwrap();
        let mut next = 0;
        for w in &ws {
            prop_assert_eq!(w.mask_from, next);
            prop_assert!(w.len() <= context && w.start <= w.mask_from && w.mask_from < w.end);
            next = w.end;
        }
        prop_assert_eq!(next, n);
        if let Some(last) = ws.last() {
            prop_assert_eq!(last.end, n);
            prop_assert_eq!(last.len(), n.min(context));
        }
        prop_assert!(slice_windows(n, context, context + 1).is_err());
    }

    #[test]
    fn rank_is_argsort_position_and_monotone_invariant(
        scores in prop::collection::vec(-4i32..4, 1..120),
        target in any::<prop::sample::Index>(),
        scale in 1i32..5,
        shift in -10i32..10,
    ) {
        let t = target.index(scores.len());
        let f: Vec<f32> = scores.iter().map(|&s| s as f32).collect();
        let g: Vec<f32> = scores.iter().map(|&s| (scale * s + shift) as f32).collect();
        let want = common::argsort_rank(&f, t);
        prop_assert_eq!(full_rank(&f, t as u32), Some(want));
        prop_assert_eq!(full_rank(&g, t as u32), Some(want));
        prop_assert_eq!(rank_of_target(&f, t as u32), Rank::from_full(want));
    }

    #[test]
    fn mrr_bounded_and_monotone(ranks in prop::collection::vec(0usize..15, 1..60), which in any::<prop::sample::Index>()) {
        let rs: Vec<Rank> = ranks.iter().map(|&r| if r == 0 { Rank::Miss } else { Rank::from_full(r) }).collect();
        let m = compute_mrr(&rs).unwrap();
        prop_assert!((0.0..=100.0).contains(&m));
        let mut better = rs.clone();
        better[which.index(rs.len())] = Rank::Hit(1);
        prop_assert!(compute_mrr(&better).unwrap() >= m);
    }

    #[test]
    fn vocab_is_capped_and_decodes(keys in prop::collection::vec("[TV]:[a-e]{1,2}", 0..200), cap in 2usize..20) {
        let v = Vocab::build(keys.iter(), cap).unwrap();
        prop_assert!(v.len() <= cap);
        for id in 0..v.len() as u32 {
            let key = v.decode(id).unwrap().to_owned();
            prop_assert_eq!(v.encode(&key), id);
        }
        let kept: Vec<u64> = (RESERVED as u32..v.len() as u32).map(|id| v.count(id)).collect();
        prop_assert!(kept.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(v.encode("T:never-seen"), UNK_ID);
    }

    #[test]
    fn targets_shift_by_one_under_the_mask(
        ids in prop::collection::vec(2u32..50, 1..40),
        seed: u64,
    ) {
        let n = ids.len();
        let bits = |salt: u64| (0..n).map(|i| (seed.rotate_left((i as u32 + salt as u32) % 64) & 1) == 1).collect::<Vec<_>>();
        let (mask, leaf) = (bits(0), bits(7));
        for kind in ModelKind::ALL {
            let t = LossTargets::new(kind, &ids, &mask, &leaf);
            for i in 0..n {
                let scored = i + 1 < n && mask[i + 1] && (kind.predicts_internal() || leaf[i + 1]);
                prop_assert_eq!(t.weights[i], scored);
                if scored {
                    prop_assert_eq!(t.targets[i], ids[i + 1]);
                }
            }
            prop_assert_eq!(t.count(), t.weights.iter().filter(|&&w| w).count());
        }
    }
}
