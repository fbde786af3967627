//! Sequence views of normalized trees: DFS tokens, leaf sequences with root
//! paths, up/down relation matrices and sliding-window segmentation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ast::{Ast, NodeId, NodeKind};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PATH_LEN: usize = 13;
pub const DEFAULT_CONTEXT: usize = 1000;
pub const DEFAULT_STRIDE: usize = 500;
pub const DEFAULT_UP_MAX: usize = 8;
pub const DEFAULT_DOWN_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Namespace {
    #[serde(rename = "type")]
    Type,
    #[serde(rename = "value")]
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeToken {
    pub text: String,
    pub namespace: Namespace,
    pub source_node_id: NodeId,
}

impl NodeToken {
    pub fn is_leaf(&self) -> bool {
        self.namespace == Namespace::Value
    }
}

fn token_for(ast: &Ast, id: NodeId) -> Result<NodeToken> {
    match ast.node(id).kind() {
        NodeKind::Internal(t) => Ok(NodeToken {
            text: t.to_owned(),
            namespace: Namespace::Type,
            source_node_id: id,
        }),
        NodeKind::Leaf(v) => Ok(NodeToken {
            text: v.to_owned(),
            namespace: Namespace::Value,
            source_node_id: id,
        }),
        NodeKind::Dual { .. } => Err(Error::invalid(format!(
            "node {id} carries both type and value; normalize the tree first"
        ))),
        NodeKind::Unlabeled => Err(Error::structure(format!(
            "node {id} has neither type nor value"
        ))),
    }
}

/// All nodes in pre-order, internal nodes as TYPE tokens and leaves as VALUE tokens.
pub fn dfs_sequence(ast: &Ast) -> Result<Vec<NodeToken>> {
    ast.preorder().into_iter().map(|id| token_for(ast, id)).collect()
}

/// The leaves of the tree in left-to-right order.
pub fn leaf_sequence(ast: &Ast) -> Result<Vec<NodeToken>> {
    let mut out = Vec::new();
    for id in ast.preorder() {
        let tok = token_for(ast, id)?;
        if tok.is_leaf() {
            out.push(tok);
        }
    }
    Ok(out)
}

/// Ancestor types of a leaf, parent first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootPath(pub Vec<String>);

impl RootPath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Walks from the leaf's parent toward the root, keeping at most
/// `max_path_len` ancestors nearest the leaf.
pub fn extract_root_path(ast: &Ast, leaf_id: NodeId, max_path_len: usize) -> Result<RootPath> {
    let node = ast
        .get(leaf_id)
        .ok_or_else(|| Error::invalid(format!("node {leaf_id} is out of range")))?;
    if !node.is_leaf() {
        return Err(Error::invalid(format!("node {leaf_id} is not a leaf")));
    }
    if max_path_len == 0 {
        return Err(Error::invalid("max_path_len must be at least 1"));
    }
    let mut path = Vec::new();
    let mut cur = node.parent;
    while let Some(id) = cur {
        if path.len() == max_path_len {
            break;
        }
        let t = ast.node(id).type_name.as_deref().ok_or_else(|| {
            Error::invalid(format!("ancestor {id} of leaf {leaf_id} has no type"))
        })?;
        path.push(t.to_owned());
        cur = ast.node(id).parent;
    }
    if path.is_empty() {
        return Err(Error::invalid(format!("leaf {leaf_id} has no parent")));
    }
    Ok(RootPath(path))
}

/// Up/down move counts of a tree path, `U^up D^down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationClass {
    pub up: usize,
    pub down: usize,
}

impl RelationClass {
    pub fn clipped(self, up_max: usize, down_max: usize) -> RelationClass {
        RelationClass {
            up: self.up.min(up_max),
            down: self.down.min(down_max),
        }
    }
}

/// Class-id space for clipped relations. Ids `0..(up_max+1)*(down_max+1)`
/// encode `up * (down_max+1) + down`; the one extra id is the shared bucket
/// for pairs without a relation (keys after the query).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpace {
    pub up_max: usize,
    pub down_max: usize,
}

impl RelationSpace {
    pub fn new(up_max: usize, down_max: usize) -> Self {
        RelationSpace { up_max, down_max }
    }

    pub fn num_classes(&self) -> usize {
        (self.up_max + 1) * (self.down_max + 1) + 1
    }

    pub fn none_id(&self) -> usize {
        (self.up_max + 1) * (self.down_max + 1)
    }

    pub fn id_of(&self, rel: RelationClass) -> usize {
        let c = rel.clipped(self.up_max, self.down_max);
        c.up * (self.down_max + 1) + c.down
    }

    pub fn class_of(&self, id: usize) -> Option<RelationClass> {
        if id >= self.none_id() {
            return None;
        }
        Some(RelationClass {
            up: id / (self.down_max + 1),
            down: id % (self.down_max + 1),
        })
    }
}

impl Default for RelationSpace {
    fn default() -> Self {
        RelationSpace::new(DEFAULT_UP_MAX, DEFAULT_DOWN_MAX)
    }
}

/// The unique path from `a` to `b`: `up` edges to the lowest common ancestor,
/// then `down` edges to `b`. Not clipped.
pub fn ud_path(ast: &Ast, a: NodeId, b: NodeId) -> Result<RelationClass> {
    if a >= ast.len() || b >= ast.len() {
        return Err(Error::invalid(format!(
            "nodes {a} and {b} are not both in a tree of {} nodes",
            ast.len()
        )));
    }
    let (mut x, mut y) = (a, b);
    let (mut dx, mut dy) = (ast.depth(a), ast.depth(b));
    let (mut up, mut down) = (0, 0);
    while dx > dy {
        x = ast.parent(x).expect("depth > 0 implies a parent");
        dx -= 1;
        up += 1;
    }
    while dy > dx {
        y = ast.parent(y).expect("depth > 0 implies a parent");
        dy -= 1;
        down += 1;
    }
    while x != y {
        match (ast.parent(x), ast.parent(y)) {
            (Some(px), Some(py)) => {
                x = px;
                y = py;
                up += 1;
                down += 1;
            }
            _ => {
                return Err(Error::invalid(format!(
                    "nodes {a} and {b} do not share a root"
                )))
            }
        }
    }
    Ok(RelationClass { up, down })
}

/// Lower-triangular relation-class ids for a sequence of tree positions.
///
/// Entry `(i, j)` with `j <= i` holds the clipped path from the key node at
/// position `j` to the query node at position `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationMatrix {
    n: usize,
    ids: Vec<u8>,
}

impl RelationMatrix {
    pub fn from_lower_triangle(n: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != n * (n + 1) / 2 {
            return Err(Error::invalid(format!(
                "relation array has {} entries, expected {} for n = {n}",
                ids.len(),
                n * (n + 1) / 2
            )));
        }
        Ok(RelationMatrix { n, ids })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> Option<u8> {
        if j > i || i >= self.n {
            return None;
        }
        Some(self.ids[i * (i + 1) / 2 + j])
    }

    pub fn lower_triangle(&self) -> &[u8] {
        &self.ids
    }

    /// Leading `len x len` block.
    pub fn prefix(&self, len: usize) -> RelationMatrix {
        let len = len.min(self.n);
        RelationMatrix {
            n: len,
            ids: self.ids[..len * (len + 1) / 2].to_vec(),
        }
    }
}

pub fn build_relation_matrix(
    ast: &Ast,
    positions: &[NodeId],
    space: RelationSpace,
) -> Result<RelationMatrix> {
    if space.num_classes() > 256 {
        return Err(Error::invalid("relation clipping produces more than 256 classes"));
    }
    let n = positions.len();
    let mut ids = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            let rel = ud_path(ast, positions[j], positions[i])?;
            ids.push(space.id_of(rel) as u8);
        }
    }
    Ok(RelationMatrix { n, ids })
}

/// A contiguous window `[start, end)` whose loss covers `[mask_from, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub mask_from: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Sliding windows over `n` positions.
///
/// Windows start at `0, stride, 2*stride, ...` while they end before `n`; the
/// final window is right-aligned to `n`. Each window's loss region starts
/// where the previous window ended, so loss regions partition `0..n`.
pub fn slice_windows(n: usize, context: usize, stride: usize) -> Result<Vec<Window>> {
    if context == 0 || stride == 0 {
        return Err(Error::invalid("context and stride must be positive"));
    }
    if stride > context {
        return Err(Error::invalid(format!(
            "stride {stride} exceeds context {context}"
        )));
    }
    let mut out = Vec::new();
    if n == 0 {
        return Ok(out);
    }
    let mut covered = 0;
    let mut start = 0;
    while start + context < n {
        out.push(Window {
            start,
            end: start + context,
            mask_from: covered,
        });
        covered = start + context;
        start += stride;
    }
    let start = n.saturating_sub(context);
    out.push(Window {
        start,
        end: n,
        mask_from: covered.max(start),
    });
    Ok(out)
}

/// A model-ready slice of a serialized tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub tokens: Vec<NodeToken>,
    pub loss_mask: Vec<bool>,
    pub leaf_flags: Vec<bool>,
    pub relation: Option<RelationMatrix>,
    pub category: Option<Vec<Option<LeafCategory>>>,
    /// Offset of the first token within the full sequence.
    pub start: usize,
}

pub fn slice_into_segments(
    tokens: &[NodeToken],
    context: usize,
    stride: usize,
) -> Result<Vec<Segment>> {
    Ok(slice_windows(tokens.len(), context, stride)?
        .into_iter()
        .map(|w| {
            let toks = tokens[w.start..w.end].to_vec();
            Segment {
                loss_mask: (w.start..w.end).map(|p| p >= w.mask_from).collect(),
                leaf_flags: toks.iter().map(NodeToken::is_leaf).collect(),
                tokens: toks,
                relation: None,
                category: None,
                start: w.start,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LeafCategory {
    AttrAccess,
    NumConst,
    Name,
    FuncParam,
    Other,
}

impl LeafCategory {
    pub const ALL: [LeafCategory; 5] = [
        LeafCategory::AttrAccess,
        LeafCategory::NumConst,
        LeafCategory::Name,
        LeafCategory::FuncParam,
        LeafCategory::Other,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<LeafCategory> {
        LeafCategory::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LeafCategory::AttrAccess => "ATTR_ACCESS",
            LeafCategory::NumConst => "NUM_CONST",
            LeafCategory::Name => "NAME",
            LeafCategory::FuncParam => "FUNC_PARAM",
            LeafCategory::Other => "OTHER",
        }
    }
}

/// Parent-type to category tables for leaf and internal-node breakdowns.
/// Loaded from JSON; any unlisted type maps to OTHER (leaves) or to no
/// category (internal nodes).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryMapping {
    pub version: String,
    pub leaf: BTreeMap<String, LeafCategory>,
    pub internal: BTreeMap<String, String>,
}

impl Default for CategoryMapping {
    fn default() -> Self {
        let leaf = [
            ("attr", LeafCategory::AttrAccess),
            ("Num", LeafCategory::NumConst),
            ("NameLoad", LeafCategory::Name),
            ("NameStore", LeafCategory::Name),
            ("NameParam", LeafCategory::FuncParam),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        let internal = [
            ("Call", "Call"),
            ("Assign", "Assign"),
            ("AugAssign", "Assign"),
            ("Return", "Return"),
            ("ListLoad", "List"),
            ("ListStore", "List"),
            ("Dict", "Dict"),
            ("Raise", "Raise"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect();
        CategoryMapping {
            version: "default-1".to_owned(),
            leaf,
            internal,
        }
    }
}

impl CategoryMapping {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::from_json(e, text))
    }

    pub fn leaf_category_for_parent(&self, parent_type: &str) -> LeafCategory {
        self.leaf
            .get(parent_type)
            .copied()
            .unwrap_or(LeafCategory::Other)
    }

    pub fn internal_category(&self, type_name: &str) -> Option<&str> {
        self.internal.get(type_name).map(String::as_str)
    }
}

/// Category of a leaf, decided by its parent's type.
pub fn categorize_leaf(ast: &Ast, leaf_id: NodeId, mapping: &CategoryMapping) -> Result<LeafCategory> {
    let node = ast
        .get(leaf_id)
        .ok_or_else(|| Error::invalid(format!("node {leaf_id} is out of range")))?;
    if !node.is_leaf() {
        return Err(Error::invalid(format!("node {leaf_id} is not a leaf")));
    }
    Ok(node
        .parent
        .and_then(|p| ast.node(p).type_name.as_deref())
        .map(|t| mapping.leaf_category_for_parent(t))
        .unwrap_or(LeafCategory::Other))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{normalize_ast, parse_ast_json};

    fn chain(depth: usize) -> Ast {
        // T0 -> T1 -> ... -> T{depth-1} -> leaf
        let mut parts: Vec<String> = (0..depth)
            .map(|d| format!(r#"{{"type":"T{d}","children":[{}]}}"#, d + 1))
            .collect();
        parts.push(r#"{"value":"leaf"}"#.to_owned());
        parse_ast_json(&format!("[{}]", parts.join(","))).unwrap()
    }

    #[test]
    fn single_leaf_under_root() {
        let ast = parse_ast_json(r#"[{"type":"Module","children":[1]},{"value":"x"}]"#).unwrap();
        let seq = dfs_sequence(&ast).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq[0].namespace, Namespace::Type);
        assert_eq!(seq[1].namespace, Namespace::Value);
        assert_eq!(seq[1].text, "x");
    }

    #[test]
    fn dfs_rejects_dual_nodes() {
        let ast = parse_ast_json(r#"[{"type":"Num","value":"1"}]"#).unwrap();
        assert!(dfs_sequence(&ast).is_err());
        assert_eq!(dfs_sequence(&normalize_ast(&ast).unwrap()).unwrap().len(), 2);
    }

    #[test]
    fn root_path_short_and_truncated() {
        let ast = chain(3);
        let p = extract_root_path(&ast, 3, 13).unwrap();
        assert_eq!(p.0, vec!["T2", "T1", "T0"]);

        let ast = chain(15);
        let p = extract_root_path(&ast, 15, 13).unwrap();
        assert_eq!(p.len(), 13);
        assert_eq!(p.0[0], "T14");
        assert_eq!(p.0[12], "T2");

        assert!(extract_root_path(&ast, 0, 13).is_err());
    }

    #[test]
    fn ud_path_identity_and_clipping() {
        let ast = chain(12);
        assert_eq!(ud_path(&ast, 5, 5).unwrap(), RelationClass { up: 0, down: 0 });
        let r = ud_path(&ast, 12, 0).unwrap();
        assert_eq!(r, RelationClass { up: 12, down: 0 });
        assert_eq!(r.clipped(8, 8), RelationClass { up: 8, down: 0 });
        assert!(ud_path(&ast, 0, 99).is_err());
    }

    #[test]
    fn relation_space_ids() {
        let s = RelationSpace::default();
        assert_eq!(s.num_classes(), 82);
        for up in 0..=8 {
            for down in 0..=8 {
                let c = RelationClass { up, down };
                assert_eq!(s.class_of(s.id_of(c)), Some(c));
            }
        }
        assert_eq!(s.class_of(s.none_id()), None);
    }

    #[test]
    fn relation_matrix_diagonal_and_descent() {
        let ast = chain(4);
        let positions: Vec<_> = (0..ast.len()).collect();
        let space = RelationSpace::default();
        let m = build_relation_matrix(&ast, &positions, space).unwrap();
        for i in 0..ast.len() {
            assert_eq!(m.get(i, i), Some(space.id_of(RelationClass { up: 0, down: 0 }) as u8));
        }
        // key = parent at j, query = child at j + 1
        assert_eq!(
            m.get(1, 0).map(|c| space.class_of(c as usize).unwrap()),
            Some(RelationClass { up: 0, down: 1 })
        );
        assert_eq!(m.get(0, 1), None);
    }

    #[test]
    fn windows_match_sliding_example() {
        let w = slice_windows(1700, 1000, 500).unwrap();
        let spans: Vec<_> = w.iter().map(|w| (w.start, w.end, w.mask_from)).collect();
        assert_eq!(spans, vec![(0, 1000, 0), (500, 1500, 1000), (700, 1700, 1500)]);

        let w = slice_windows(800, 1000, 500).unwrap();
        assert_eq!(w, vec![Window { start: 0, end: 800, mask_from: 0 }]);
        assert!(slice_windows(0, 1000, 500).unwrap().is_empty());
        assert!(slice_windows(10, 4, 5).is_err());
    }

    #[test]
    fn categories_follow_parent_type() {
        let ast = normalize_ast(
            &parse_ast_json(
                r#"[{"type":"Module","children":[1,2,3]},{"type":"attr","value":"atoi"},{"type":"Num","value":"2"},{"type":"Str","value":"s"}]"#,
            )
            .unwrap(),
        )
        .unwrap();
        let m = CategoryMapping::default();
        assert_eq!(categorize_leaf(&ast, 2, &m).unwrap(), LeafCategory::AttrAccess);
        assert_eq!(categorize_leaf(&ast, 4, &m).unwrap(), LeafCategory::NumConst);
        assert_eq!(categorize_leaf(&ast, 6, &m).unwrap(), LeafCategory::Other);
        assert!(categorize_leaf(&ast, 1, &m).is_err());
    }

    #[test]
    fn mapping_json_round_trip_and_unknown_keys() {
        let m = CategoryMapping::default();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(CategoryMapping::from_json(&text).unwrap(), m);
        assert!(CategoryMapping::from_json(r#"{"version":"x","leaf":{},"internal":{},"extra":1}"#).is_err());
    }
}
