#![allow(dead_code)]

use std::collections::VecDeque;

use codepred::ast::{Ast, RawNode};
use codepred::seqgen::RelationClass;
use rand::Rng;

/// Random pre-order tree with up to `max_nodes` nodes, py150 style: every
/// node has a type, and roughly `dual_rate` of the nodes also carry a value.
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize, alphabet: usize, dual_rate: f64) -> Ast {
    let n = rng.random_range(1..=max_nodes.max(1));
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    // rightmost path: the only places a new pre-order node may attach
    let mut spine = vec![0usize];
    for id in 1..n {
        let keep = rng.random_range(1..=spine.len());
        spine.truncate(keep);
        let parent = *spine.last().unwrap();
        children[parent].push(id);
        spine.push(id);
    }
    let raw = children
        .into_iter()
        .map(|ch| {
            let leafish = ch.is_empty();
            let dual = rng.random_bool(if leafish { dual_rate } else { dual_rate / 4.0 });
            RawNode {
                type_name: Some(format!("T{}", rng.random_range(0..alphabet))),
                value: dual.then(|| format!("v{}", rng.random_range(0..alphabet))),
                children: ch,
            }
        })
        .collect();
    Ast::from_raw(raw).expect("generated tree is well-formed")
}

/// Parent array rebuilt from child lists only.
pub fn parents_from_children(ast: &Ast) -> Vec<Option<usize>> {
    let mut p = vec![None; ast.len()];
    for (id, node) in ast.nodes().iter().enumerate() {
        for &c in &node.children {
            p[c] = Some(id);
        }
    }
    p
}

/// Path from `a` to `b` via explicit ancestor chains, cross-checked against
/// a breadth-first search over the undirected tree.
pub fn ud_path_oracle(ast: &Ast, a: usize, b: usize) -> RelationClass {
    let parent = parents_from_children(ast);
    let chain = |mut x: usize| {
        let mut out = vec![x];
        while let Some(p) = parent[x] {
            out.push(p);
            x = p;
        }
        out
    };
    let (ca, cb) = (chain(a), chain(b));
    let (up, lca) = ca
        .iter()
        .enumerate()
        .find(|(_, x)| cb.contains(x))
        .map(|(i, &x)| (i, x))
        .expect("common root");
    let down = cb.iter().position(|&x| x == lca).unwrap();

    let mut dist = vec![usize::MAX; ast.len()];
    let mut queue = VecDeque::from([a]);
    dist[a] = 0;
    while let Some(x) = queue.pop_front() {
        let mut next: Vec<usize> = ast.node(x).children.clone();
        next.extend(parent[x]);
        for y in next {
            if dist[y] == usize::MAX {
                dist[y] = dist[x] + 1;
                queue.push_back(y);
            }
        }
    }
    assert_eq!(dist[b], up + down, "BFS distance disagrees with the ancestor chains");
    RelationClass { up, down }
}

/// Rank of `target` under a full argsort: score descending, id ascending.
pub fn argsort_rank(scores: &[f32], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
    idx.iter().position(|&i| i == target).unwrap() + 1
}

/// The example tree from the AttributeLoad fragment: `string.atoi`, with the
/// call context before it, numbered so the fragment spans nodes 22..29.
pub fn attribute_example() -> Ast {
    let mut raw: Vec<RawNode> = Vec::new();
    let ty = |t: &str, ch: Vec<usize>| RawNode { type_name: Some(t.into()), value: None, children: ch };
    let val = |v: &str| RawNode { type_name: None, value: Some(v.into()), children: Vec::new() };
    // 0..=21: a chain of filler statements so the fragment lands on id 22
    raw.push(ty("Module", vec![1, 22]));
    for i in 1..21 {
        raw.push(ty("Expr", vec![i + 1]));
    }
    raw.push(val("pad"));
    raw.push(ty("Call", vec![23, 25]));
    raw.push(ty("NameLoad", vec![24]));
    raw.push(val("map"));
    raw.push(ty("AttributeLoad", vec![26, 28]));
    raw.push(ty("NameLoad", vec![27]));
    raw.push(val("string"));
    raw.push(ty("Attr", vec![29]));
    raw.push(val("atoi"));
    Ast::from_raw(raw).unwrap()
}
