//! py150-style syntax trees: parsing, normalization and structural checks.
//!
//! A tree arrives as one JSON array per line. Each element is an object with
//! an optional `type`, an optional `value` and an optional `children` list of
//! indices into the same array. Normalization splits every node carrying both
//! a type and a value so that internal nodes hold only types and leaves hold
//! only values.

use std::fmt;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// One node as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawNode {
    pub type_name: Option<String>,
    pub value: Option<String>,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub type_name: Option<String>,
    pub value: Option<String>,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// Classification of a node by the labels it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind<'a> {
    Internal(&'a str),
    Leaf(&'a str),
    Dual { type_name: &'a str, value: &'a str },
    Unlabeled,
}

impl Node {
    pub fn kind(&self) -> NodeKind<'_> {
        match (&self.type_name, &self.value) {
            (Some(t), None) => NodeKind::Internal(t),
            (None, Some(v)) => NodeKind::Leaf(v),
            (Some(t), Some(v)) => NodeKind::Dual {
                type_name: t,
                value: v,
            },
            (None, None) => NodeKind::Unlabeled,
        }
    }

    /// A leaf is a value-bearing node without a type.
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind(), NodeKind::Leaf(_))
    }
}

/// Arena of nodes; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ast {
    nodes: Vec<Node>,
}

impl Ast {
    /// Builds an arena from raw nodes, reconstructing parent links.
    ///
    /// Children must reference later entries of the array, which rules out
    /// cycles, and every non-root node must have exactly one parent.
    pub fn from_raw(raw: Vec<RawNode>) -> Result<Ast> {
        if raw.is_empty() {
            return Err(Error::structure("empty tree"));
        }
        let n = raw.len();
        let mut parents: Vec<Option<NodeId>> = vec![None; n];
        for (id, node) in raw.iter().enumerate() {
            if node.type_name.is_none() && node.value.is_none() {
                return Err(Error::structure(format!(
                    "node {id} has neither type nor value"
                )));
            }
            for &child in &node.children {
                if child >= n {
                    return Err(Error::structure(format!(
                        "node {id} references child {child} but the tree has {n} nodes"
                    )));
                }
                if child <= id {
                    return Err(Error::structure(format!(
                        "node {id} references child {child} that does not come after it"
                    )));
                }
                if let Some(prev) = parents[child] {
                    return Err(Error::structure(format!(
                        "node {child} is claimed by both node {prev} and node {id}"
                    )));
                }
                parents[child] = Some(id);
            }
        }
        if let Some(orphan) = (1..n).find(|&id| parents[id].is_none()) {
            return Err(Error::structure(format!(
                "node {orphan} is not reachable from the root"
            )));
        }
        let nodes = raw
            .into_iter()
            .zip(parents)
            .map(|(r, parent)| Node {
                type_name: r.type_name,
                value: r.value,
                parent,
                children: r.children,
            })
            .collect();
        Ok(Ast { nodes })
    }

    /// Wraps nodes without any consistency checking. Use [`validate_ast`]
    /// to inspect the result.
    pub fn from_nodes_unchecked(nodes: Vec<Node>) -> Ast {
        Ast { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    /// Number of edges between `id` and the root.
    pub fn depth(&self, id: NodeId) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            depth += 1;
            cur = p;
        }
        depth
    }

    /// Node ids in pre-order (node, then children left to right).
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        if self.nodes.is_empty() {
            return order;
        }
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            order.push(id);
            stack.extend(self.nodes[id].children.iter().rev());
        }
        order
    }

    /// Number of nodes carrying both a type and a value.
    pub fn dual_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind(), NodeKind::Dual { .. }))
            .count()
    }

    pub fn is_normalized(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| matches!(n.kind(), NodeKind::Internal(_) | NodeKind::Leaf(_)))
    }

    /// Emits the tree in py150 layout, one JSON array without a trailing newline.
    pub fn to_json(&self) -> String {
        let arr: Vec<Value> = self
            .nodes
            .iter()
            .map(|n| {
                let mut obj = Map::new();
                if let Some(t) = &n.type_name {
                    obj.insert("type".into(), Value::String(t.clone()));
                }
                if let Some(v) = &n.value {
                    obj.insert("value".into(), Value::String(v.clone()));
                }
                if !n.children.is_empty() {
                    obj.insert(
                        "children".into(),
                        Value::Array(n.children.iter().map(|&c| Value::from(c)).collect()),
                    );
                }
                Value::Object(obj)
            })
            .collect();
        Value::Array(arr).to_string()
    }
}

/// Parses one py150 line into an unnormalized arena.
///
/// py150 lines end with a bare `0` sentinel after the node objects; any
/// trailing integer entries are ignored. Non-string values are kept verbatim
/// as their JSON text.
pub fn parse_ast_json(line: &str) -> Result<Ast> {
    let parsed: Value = serde_json::from_str(line).map_err(|e| Error::from_json(e, line))?;
    let Value::Array(items) = parsed else {
        return Err(Error::structure("top-level JSON value is not an array"));
    };
    let mut end = items.len();
    while end > 0 && items[end - 1].is_number() {
        end -= 1;
    }
    let mut raw = Vec::with_capacity(end);
    for (id, item) in items[..end].iter().enumerate() {
        let Value::Object(obj) = item else {
            return Err(Error::structure(format!("node {id} is not a JSON object")));
        };
        let type_name = match obj.get("type") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => {
                return Err(Error::structure(format!(
                    "node {id} has a non-string type {other}"
                )))
            }
        };
        let value = match obj.get("value") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => Some(other.to_string()),
        };
        let children = match obj.get("children") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(cs)) => cs
                .iter()
                .map(|c| {
                    c.as_u64().map(|c| c as usize).ok_or_else(|| {
                        Error::structure(format!("node {id} has a non-integer child index {c}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            Some(other) => {
                return Err(Error::structure(format!(
                    "node {id} has a non-array children field {other}"
                )))
            }
        };
        raw.push(RawNode {
            type_name,
            value,
            children,
        });
    }
    Ast::from_raw(raw)
}

/// Splits dual nodes and renumbers the tree in pre-order.
///
/// A node with both a type and a value keeps its type, and a new leaf holding
/// the value becomes its first child.
pub fn normalize_ast(ast: &Ast) -> Result<Ast> {
    if ast.is_empty() {
        return Err(Error::structure("empty tree"));
    }
    let mut out: Vec<Node> = Vec::with_capacity(ast.len() + ast.dual_count());
    // (original id, new parent)
    let mut stack: Vec<(NodeId, Option<NodeId>)> = vec![(0, None)];
    while let Some((orig, parent)) = stack.pop() {
        let node = ast.node(orig);
        let new_id = out.len();
        if let Some(p) = parent {
            out[p].children.push(new_id);
        }
        match node.kind() {
            NodeKind::Unlabeled => {
                return Err(Error::structure(format!(
                    "node {orig} has neither type nor value"
                )))
            }
            NodeKind::Dual { type_name, value } => {
                out.push(Node {
                    type_name: Some(type_name.to_owned()),
                    value: None,
                    parent,
                    children: Vec::with_capacity(node.children.len() + 1),
                });
                out.push(Node {
                    type_name: None,
                    value: Some(value.to_owned()),
                    parent: Some(new_id),
                    children: Vec::new(),
                });
                out[new_id].children.push(new_id + 1);
            }
            _ => out.push(Node {
                type_name: node.type_name.clone(),
                value: node.value.clone(),
                parent,
                children: Vec::with_capacity(node.children.len()),
            }),
        }
        for &child in node.children.iter().rev() {
            stack.push((child, Some(new_id)));
        }
    }
    Ok(Ast { nodes: out })
}

/// A single failed structural invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: NodeId,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyTree,
    RootHasParent,
    MissingParent,
    ChildOutOfRange(NodeId),
    ParentMismatch { child: NodeId },
    Unlabeled,
    DualNode,
    LeafWithChildren,
    NotPreorder { child: NodeId, expected: NodeId },
    Unreachable,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node;
        match &self.kind {
            ViolationKind::EmptyTree => write!(f, "tree is empty"),
            ViolationKind::RootHasParent => write!(f, "root node {n} has a parent"),
            ViolationKind::MissingParent => write!(f, "node {n} has no parent"),
            ViolationKind::ChildOutOfRange(c) => {
                write!(f, "node {n} references missing child {c}")
            }
            ViolationKind::ParentMismatch { child } => {
                write!(f, "node {n} lists child {child} whose parent link disagrees")
            }
            ViolationKind::Unlabeled => write!(f, "node {n} has neither type nor value"),
            ViolationKind::DualNode => write!(f, "node {n} has both type and value"),
            ViolationKind::LeafWithChildren => write!(f, "leaf node {n} has children"),
            ViolationKind::NotPreorder { child, expected } => write!(
                f,
                "edge {n}->{child} breaks pre-order numbering (expected id {expected})"
            ),
            ViolationKind::Unreachable => write!(f, "node {n} is not reachable from the root"),
        }
    }
}

/// Reports every invariant violation of a (normalized) tree. Never mutates.
pub fn validate_ast(ast: &Ast) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = ast.len();
    if n == 0 {
        out.push(Violation {
            node: 0,
            kind: ViolationKind::EmptyTree,
        });
        return out;
    }
    let push = |out: &mut Vec<Violation>, node, kind| out.push(Violation { node, kind });
    if ast.nodes[0].parent.is_some() {
        push(&mut out, 0, ViolationKind::RootHasParent);
    }
    for (id, node) in ast.nodes.iter().enumerate() {
        if id > 0 && node.parent.is_none() {
            push(&mut out, id, ViolationKind::MissingParent);
        }
        match node.kind() {
            NodeKind::Unlabeled => push(&mut out, id, ViolationKind::Unlabeled),
            NodeKind::Dual { .. } => push(&mut out, id, ViolationKind::DualNode),
            NodeKind::Leaf(_) if !node.children.is_empty() => {
                push(&mut out, id, ViolationKind::LeafWithChildren)
            }
            _ => {}
        }
        for &c in &node.children {
            if c >= n {
                push(&mut out, id, ViolationKind::ChildOutOfRange(c));
            } else if ast.nodes[c].parent != Some(id) {
                push(&mut out, id, ViolationKind::ParentMismatch { child: c });
            }
        }
    }

    // Pre-order check: the first child of p must be p + 1 and each later child
    // must start right after the subtree of its previous sibling.
    let mut visited = vec![false; n];
    let mut size = vec![0usize; n];
    // Post-order accumulation of subtree sizes, guarding against cycles.
    let mut stack: Vec<(NodeId, bool)> = vec![(0, false)];
    while let Some((id, expanded)) = stack.pop() {
        if expanded {
            size[id] = 1 + ast.nodes[id]
                .children
                .iter()
                .filter(|&&c| c < n && ast.nodes[c].parent == Some(id))
                .map(|&c| size[c])
                .sum::<usize>();
            continue;
        }
        if visited[id] {
            continue;
        }
        visited[id] = true;
        stack.push((id, true));
        for &c in &ast.nodes[id].children {
            if c < n && !visited[c] && ast.nodes[c].parent == Some(id) {
                stack.push((c, false));
            }
        }
    }
    for (id, seen) in visited.iter().enumerate() {
        if !seen {
            push(&mut out, id, ViolationKind::Unreachable);
        }
    }
    for (id, node) in ast.nodes.iter().enumerate() {
        if !visited[id] {
            continue;
        }
        let mut expected = id + 1;
        for &c in &node.children {
            if c >= n || ast.nodes[c].parent != Some(id) {
                continue;
            }
            if c != expected {
                push(
                    &mut out,
                    id,
                    ViolationKind::NotPreorder { child: c, expected },
                );
            }
            expected += size[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(type_name: Option<&str>, value: Option<&str>, children: &[usize]) -> RawNode {
        RawNode {
            type_name: type_name.map(str::to_owned),
            value: value.map(str::to_owned),
            children: children.to_vec(),
        }
    }

    #[test]
    fn parses_two_node_tree() {
        let ast =
            parse_ast_json(r#"[{"type":"Module","children":[1]},{"type":"Num","value":"2"}]"#)
                .unwrap();
        assert_eq!(ast.len(), 2);
        assert_eq!(ast.node(0).type_name.as_deref(), Some("Module"));
        assert_eq!(ast.node(0).children, vec![1]);
        assert_eq!(ast.node(1).parent, Some(0));
        assert_eq!(
            ast.node(1).kind(),
            NodeKind::Dual {
                type_name: "Num",
                value: "2"
            }
        );
    }

    #[test]
    fn empty_array_is_structural_error() {
        let err = parse_ast_json("[]").unwrap_err();
        assert!(matches!(err, Error::Structure(ref m) if m.contains("empty tree")));
    }

    #[test]
    fn dangling_child_names_node() {
        let err = parse_ast_json(r#"[{"type":"Module","children":[5]},{"value":"x"}]"#)
            .unwrap_err();
        match err {
            Error::Structure(m) => assert!(m.contains("node 0"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_offset() {
        let err = parse_ast_json(r#"[{"type":"Module",}]"#).unwrap_err();
        match err {
            Error::Json { offset, .. } => assert_eq!(offset, 18),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn py150_trailing_sentinel_and_numeric_values() {
        let ast = parse_ast_json(r#"[{"type":"Module","children":[1]},{"type":"Num","value":7},0]"#)
            .unwrap();
        assert_eq!(ast.len(), 2);
        assert_eq!(ast.node(1).value.as_deref(), Some("7"));
    }

    #[test]
    fn empty_string_value_is_kept() {
        let ast = parse_ast_json(r#"[{"type":"Str","value":""}]"#).unwrap();
        let norm = normalize_ast(&ast).unwrap();
        assert_eq!(norm.len(), 2);
        assert_eq!(norm.node(1).value.as_deref(), Some(""));
    }

    #[test]
    fn dual_node_value_becomes_first_child() {
        let ast = Ast::from_raw(vec![
            raw(Some("Call"), None, &[1, 2]),
            raw(Some("NameLoad"), Some("x"), &[]),
            raw(Some("AttributeLoad"), Some("y"), &[3]),
            raw(Some("NameLoad"), None, &[]),
        ])
        .unwrap();
        let norm = normalize_ast(&ast).unwrap();
        assert_eq!(norm.len(), ast.len() + 2);
        assert_eq!(norm.node(1).type_name.as_deref(), Some("NameLoad"));
        assert_eq!(norm.node(1).children, vec![2]);
        assert_eq!(norm.node(2).kind(), NodeKind::Leaf("x"));
        // AttributeLoad keeps its original child after the inserted leaf.
        assert_eq!(norm.node(3).type_name.as_deref(), Some("AttributeLoad"));
        assert_eq!(norm.node(3).children, vec![4, 5]);
        assert_eq!(norm.node(4).kind(), NodeKind::Leaf("y"));
        assert_eq!(norm.node(5).kind(), NodeKind::Internal("NameLoad"));
        assert!(validate_ast(&norm).is_empty());
    }

    #[test]
    fn unlabeled_node_rejected() {
        let ast = Ast::from_nodes_unchecked(vec![Node {
            type_name: None,
            value: None,
            parent: None,
            children: vec![],
        }]);
        assert!(normalize_ast(&ast).is_err());
    }

    #[test]
    fn leaf_with_children_is_one_violation() {
        let ast = Ast::from_raw(vec![
            raw(Some("Module"), None, &[1]),
            raw(None, Some("x"), &[2]),
            raw(None, Some("y"), &[]),
        ])
        .unwrap();
        let v = validate_ast(&ast);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].node, 1);
        assert_eq!(v[0].kind, ViolationKind::LeafWithChildren);
    }

    #[test]
    fn swapped_children_break_preorder() {
        // Root lists its children in reverse id order.
        let ast = Ast::from_raw(vec![
            raw(Some("Module"), None, &[2, 1]),
            raw(None, Some("a"), &[]),
            raw(None, Some("b"), &[]),
        ])
        .unwrap();
        let v = validate_ast(&ast);
        assert_eq!(v.len(), 2, "{v:?}");
        assert!(v
            .iter()
            .all(|x| matches!(x.kind, ViolationKind::NotPreorder { .. })));
    }

    #[test]
    fn json_round_trip() {
        let line = r#"[{"type":"Module","children":[1,2]},{"type":"NameLoad","value":"x"},{"value":"1"}]"#;
        let ast = parse_ast_json(line).unwrap();
        let again = parse_ast_json(&ast.to_json()).unwrap();
        assert_eq!(ast, again);
    }
}
