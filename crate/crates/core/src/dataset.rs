//! Prepared datasets: windowed segments of one model kind, stored as
//! JSON-lines with a settings header on the first line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ast::{normalize_ast, parse_ast_json, Ast, NodeId};
use crate::error::{Error, Result};
use crate::model::{ModelKind, SequenceInput};
use crate::seqgen::{
    build_relation_matrix, categorize_leaf, dfs_sequence, extract_root_path, leaf_sequence,
    slice_windows, CategoryMapping, LeafCategory, Namespace, NodeToken, RelationSpace,
    DEFAULT_CONTEXT, DEFAULT_DOWN_MAX, DEFAULT_MAX_PATH_LEN, DEFAULT_STRIDE, DEFAULT_UP_MAX,
};
use crate::vocab::{token_key, Vocab};

pub const FORMAT: &str = "codepred-dataset/1";
/// Category code for positions without a leaf category.
pub const NO_CATEGORY: u8 = u8::MAX;
/// Parent marker for positions whose parent is outside the segment.
pub const NO_PARENT: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub context: usize,
    pub stride: usize,
    pub max_path_len: usize,
    pub up_max: usize,
    pub down_max: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings {
            context: DEFAULT_CONTEXT,
            stride: DEFAULT_STRIDE,
            max_path_len: DEFAULT_MAX_PATH_LEN,
            up_max: DEFAULT_UP_MAX,
            down_max: DEFAULT_DOWN_MAX,
        }
    }
}

impl PipelineSettings {
    pub fn relation_space(&self) -> RelationSpace {
        RelationSpace::new(self.up_max, self.down_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub kind: ModelKind,
    pub settings: PipelineSettings,
    pub mapping: CategoryMapping,
    pub source: String,
    pub trees: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// One window of one tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub tree: usize,
    pub start: usize,
    pub tokens: Vec<String>,
    /// 0 for TYPE, 1 for VALUE.
    pub ns: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<u32>>,
    pub loss_mask: Vec<bool>,
    pub leaf: Vec<bool>,
    /// Leaf category codes, [`NO_CATEGORY`] elsewhere.
    pub cat: Vec<u8>,
    /// In-segment position of each token's parent node, or [`NO_PARENT`].
    pub parent: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<Vec<Vec<String>>>,
    /// Flattened lower triangle of relation class ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel: Option<Vec<u8>>,
}

impl SegmentRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn namespace(&self, pos: usize) -> Namespace {
        if self.ns[pos] == 0 {
            Namespace::Type
        } else {
            Namespace::Value
        }
    }

    pub fn key(&self, pos: usize) -> String {
        token_key(self.namespace(pos), &self.tokens[pos])
    }

    pub fn category(&self, pos: usize) -> Option<LeafCategory> {
        LeafCategory::from_code(self.cat[pos])
    }

    fn check(&self, kind: ModelKind) -> Result<()> {
        let n = self.tokens.len();
        let lens = [self.ns.len(), self.loss_mask.len(), self.leaf.len(), self.cat.len(), self.parent.len()];
        if n == 0 || lens.iter().any(|&l| l != n) || self.ids.as_ref().is_some_and(|i| i.len() != n) {
            return Err(Error::invalid(format!(
                "segment of tree {} has inconsistent field lengths",
                self.tree
            )));
        }
        if self.paths.is_some() != kind.uses_paths() || self.rel.is_some() != kind.uses_relations() {
            return Err(Error::KindMismatch(format!(
                "segment of tree {} does not carry the inputs a {kind} dataset needs",
                self.tree
            )));
        }
        if self.paths.as_ref().is_some_and(|p| p.len() != n)
            || self.rel.as_ref().is_some_and(|r| r.len() != n * (n + 1) / 2)
        {
            return Err(Error::invalid(format!(
                "segment of tree {} has inconsistent path or relation data",
                self.tree
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<SegmentRecord>,
}

/// A segment with token ids resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSegment {
    pub tree: usize,
    pub start: usize,
    pub input: SequenceInput,
    pub loss_mask: Vec<bool>,
    pub leaf_flags: Vec<bool>,
    pub categories: Vec<Option<LeafCategory>>,
    pub parent: Vec<i32>,
}

fn sequence_for(ast: &Ast, kind: ModelKind) -> Result<Vec<NodeToken>> {
    if kind.predicts_internal() {
        dfs_sequence(ast)
    } else {
        leaf_sequence(ast)
    }
}

/// Segments one raw tree for the given model kind.
pub fn prepare_tree(
    raw: &Ast,
    tree: usize,
    kind: ModelKind,
    settings: &PipelineSettings,
    mapping: &CategoryMapping,
) -> Result<Vec<SegmentRecord>> {
    let ast = normalize_ast(raw)?;
    let seq = sequence_for(&ast, kind)?;
    let nodes: Vec<NodeId> = seq.iter().map(|t| t.source_node_id).collect();
    let mut out = Vec::new();
    for w in slice_windows(seq.len(), settings.context, settings.stride)? {
        let toks = &seq[w.start..w.end];
        let ids = &nodes[w.start..w.end];
        let mut cat = Vec::with_capacity(toks.len());
        let mut parent = Vec::with_capacity(toks.len());
        for (k, t) in toks.iter().enumerate() {
            cat.push(if t.is_leaf() {
                categorize_leaf(&ast, t.source_node_id, mapping)?.code()
            } else {
                NO_CATEGORY
            });
            let p = ast.parent(t.source_node_id);
            parent.push(
                p.and_then(|p| ids[..k].iter().rposition(|&n| n == p))
                    .map_or(NO_PARENT, |x| x as i32),
            );
        }
        let paths = if kind.uses_paths() {
            Some(
                toks.iter()
                    .map(|t| extract_root_path(&ast, t.source_node_id, settings.max_path_len).map(|p| p.0))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let rel = if kind.uses_relations() {
            Some(build_relation_matrix(&ast, ids, settings.relation_space())?.lower_triangle().to_vec())
        } else {
            None
        };
        out.push(SegmentRecord {
            tree,
            start: w.start,
            tokens: toks.iter().map(|t| t.text.clone()).collect(),
            ns: toks.iter().map(|t| u8::from(t.is_leaf())).collect(),
            ids: None,
            loss_mask: (w.start..w.end).map(|p| p >= w.mask_from).collect(),
            leaf: toks.iter().map(NodeToken::is_leaf).collect(),
            cat,
            parent,
            paths,
            rel,
        });
    }
    Ok(out)
}

/// Segments a pre-tokenized source stream (SRCSEQ only).
pub fn prepare_token_stream(tokens: &[String], tree: usize, settings: &PipelineSettings) -> Result<Vec<SegmentRecord>> {
    Ok(slice_windows(tokens.len(), settings.context, settings.stride)?
        .into_iter()
        .map(|w| {
            let n = w.len();
            SegmentRecord {
                tree,
                start: w.start,
                tokens: tokens[w.start..w.end].to_vec(),
                ns: vec![1; n],
                ids: None,
                loss_mask: (w.start..w.end).map(|p| p >= w.mask_from).collect(),
                leaf: vec![true; n],
                cat: vec![NO_CATEGORY; n],
                parent: vec![NO_PARENT; n],
                paths: None,
                rel: None,
            }
        })
        .collect())
}

/// Input lines of a corpus file, blank lines skipped, numbered from 1.
fn corpus_lines(text: &str) -> Vec<(usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect()
}

/// Parses a JSON-lines tree corpus, one AST per line. Errors name the line.
pub fn parse_corpus(text: &str) -> Result<Vec<Ast>> {
    corpus_lines(text)
        .into_par_iter()
        .map(|(no, line)| parse_ast_json(line).map_err(|e| Error::invalid(format!("line {no}: {e}"))))
        .collect()
}

/// Parses a JSON-lines token corpus, one array of strings per line.
pub fn parse_token_corpus(text: &str) -> Result<Vec<Vec<String>>> {
    corpus_lines(text)
        .into_iter()
        .map(|(no, line)| {
            serde_json::from_str::<Vec<String>>(line)
                .map_err(|e| Error::invalid(format!("line {no}: {}", Error::from_json(e, line))))
        })
        .collect()
}

impl Dataset {
    pub fn from_trees(
        trees: &[Ast],
        kind: ModelKind,
        settings: PipelineSettings,
        mapping: CategoryMapping,
        source: impl Into<String>,
    ) -> Result<Dataset> {
        let per_tree: Vec<Vec<SegmentRecord>> = trees
            .par_iter()
            .enumerate()
            .map(|(i, t)| prepare_tree(t, i, kind, &settings, &mapping))
            .collect::<Result<_>>()?;
        let note = (kind == ModelKind::SrcSeq)
            .then(|| "source stream approximated by the leaf values of each tree".to_owned());
        Ok(Dataset {
            header: DatasetHeader {
                format: FORMAT.to_owned(),
                kind,
                settings,
                mapping,
                source: source.into(),
                trees: trees.len(),
                note,
            },
            records: per_tree.into_iter().flatten().collect(),
        })
    }

    pub fn from_token_streams(streams: &[Vec<String>], settings: PipelineSettings, source: impl Into<String>) -> Result<Dataset> {
        let mut records = Vec::new();
        for (i, s) in streams.iter().enumerate() {
            records.extend(prepare_token_stream(s, i, &settings)?);
        }
        Ok(Dataset {
            header: DatasetHeader {
                format: FORMAT.to_owned(),
                kind: ModelKind::SrcSeq,
                settings,
                mapping: CategoryMapping::default(),
                source: source.into(),
                trees: streams.len(),
                note: Some("pre-tokenized source stream".to_owned()),
            },
            records,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.header.kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Vocabulary keys counted once per tree position: loss-mask tokens plus
    /// the root-path types at those positions.
    pub fn vocab_keys(&self) -> Vec<String> {
        let mut keys = Vec::new();
        for r in &self.records {
            for pos in 0..r.len() {
                if !r.loss_mask[pos] {
                    continue;
                }
                keys.push(r.key(pos));
                if let Some(paths) = &r.paths {
                    keys.extend(paths[pos].iter().map(|t| token_key(Namespace::Type, t)));
                }
            }
        }
        keys
    }

    pub fn build_vocab(&self, max_size: usize) -> Result<Vocab> {
        Vocab::build(self.vocab_keys(), max_size)
    }

    /// Stores token ids inline so later loads need not re-encode.
    pub fn attach_ids(&mut self, vocab: &Vocab) {
        for r in &mut self.records {
            r.ids = Some((0..r.len()).map(|p| vocab.encode(&r.key(p))).collect());
        }
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<Vec<EncodedSegment>> {
        let kind = self.kind();
        self.records
            .par_iter()
            .map(|r| {
                r.check(kind)?;
                let ids = match &r.ids {
                    Some(ids) => ids.clone(),
                    None => (0..r.len()).map(|p| vocab.encode(&r.key(p))).collect(),
                };
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab.len()) {
                    return Err(Error::invalid(format!(
                        "stored token id {bad} exceeds the vocabulary; re-run prepare with this vocabulary"
                    )));
                }
                let paths = r.paths.as_ref().map(|ps| {
                    ps.iter()
                        .map(|p| p.iter().map(|t| vocab.encode_token(Namespace::Type, t)).collect())
                        .collect()
                });
                Ok(EncodedSegment {
                    tree: r.tree,
                    start: r.start,
                    input: SequenceInput {
                        ids,
                        paths,
                        relation: r.rel.clone().map(Arc::new),
                    },
                    loss_mask: r.loss_mask.clone(),
                    leaf_flags: r.leaf.clone(),
                    categories: (0..r.len()).map(|p| r.category(p)).collect(),
                    parent: r.parent.clone(),
                })
            })
            .collect()
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let to_io = |e: serde_json::Error| Error::Io(e.into());
        serde_json::to_writer(&mut w, &self.header).map_err(to_io)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(to_io)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_writer(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{} is empty", path.display())))??;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| Error::from_json(e, &first))?;
        if header.format != FORMAT {
            return Err(Error::invalid(format!("unsupported dataset format {}", header.format)));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: SegmentRecord = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("line {}: {}", i + 2, Error::from_json(e, &line))))?;
            r.check(header.kind)?;
            records.push(r);
        }
        Ok(Dataset { header, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TREE: &str = r#"[{"type":"Module","children":[1,4]},{"type":"Assign","children":[2,3]},{"type":"NameStore","value":"x"},{"type":"Num","value":"1"},{"type":"Expr","children":[5]},{"type":"NameLoad","value":"x"}]"#;

    fn small(context: usize, stride: usize) -> PipelineSettings {
        PipelineSettings {
            context,
            stride,
            ..PipelineSettings::default()
        }
    }

    #[test]
    fn trav_segments_carry_parents_and_categories() {
        let ast = parse_ast_json(TREE).unwrap();
        let recs = prepare_tree(&ast, 0, ModelKind::Trav, &small(100, 50), &CategoryMapping::default()).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.tokens, ["Module", "Assign", "NameStore", "x", "Num", "1", "Expr", "NameLoad", "x"]);
        assert_eq!(r.parent, [-1, 0, 1, 2, 1, 4, 0, 6, 7]);
        assert_eq!(r.category(5), Some(LeafCategory::NumConst));
        assert_eq!(r.category(3), Some(LeafCategory::Name));
        assert_eq!(r.category(4), None);
    }

    #[test]
    fn windowed_masks_partition_the_tree() {
        let ast = parse_ast_json(TREE).unwrap();
        let recs = prepare_tree(&ast, 0, ModelKind::TravRel, &small(4, 2), &CategoryMapping::default()).unwrap();
        let mut covered = vec![0; 9];
        for r in &recs {
            assert_eq!(r.rel.as_ref().unwrap().len(), r.len() * (r.len() + 1) / 2);
            for (k, &m) in r.loss_mask.iter().enumerate() {
                covered[r.start + k] += u8::from(m);
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn rootpath_records_paths_and_leaves_only() {
        let ast = parse_ast_json(TREE).unwrap();
        let recs = prepare_tree(&ast, 0, ModelKind::RootPath, &small(100, 50), &CategoryMapping::default()).unwrap();
        let r = &recs[0];
        assert_eq!(r.tokens, ["x", "1", "x"]);
        assert_eq!(r.paths.as_ref().unwrap()[1], ["Num", "Assign", "Module"]);
    }

    #[test]
    fn file_round_trip_and_encoding() {
        let trees = parse_corpus(&format!("{TREE}\n\n{TREE}\n")).unwrap();
        let ds = Dataset::from_trees(&trees, ModelKind::RootPath, small(100, 50), CategoryMapping::default(), "mem").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
        let vocab = back.build_vocab(100).unwrap();
        let enc = back.encode(&vocab).unwrap();
        assert_eq!(enc.len(), 2);
        assert_eq!(enc[0].input.ids[0], vocab.encode("V:x"));
        assert_eq!(enc[0].input.paths.as_ref().unwrap()[0][0], vocab.encode("T:NameStore"));
    }

    #[test]
    fn corpus_errors_name_the_line() {
        let err = parse_corpus(&format!("{TREE}\n[{{\"type\":1}}\n")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
