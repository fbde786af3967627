//! MRR@10 scoring, category breakdowns and joint type+value search.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Scalar, Tensor};
use crate::dataset::{Dataset, DatasetHeader, EncodedSegment};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, SequenceInput};
use crate::train::{check_kinds, targets_for};
use crate::vocab::{hex_digest, Vocab, UNK_ID};

/// Ranks beyond this score zero.
pub const RANK_CUTOFF: u32 = 10;
pub const DEFAULT_BEAM_WIDTH: usize = 10;
pub const OOV_POLICY: &str = "out-of-vocabulary targets count as misses and are included in the totals";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    Hit(u32),
    Miss,
}

impl Rank {
    pub fn from_full(rank: usize) -> Rank {
        if rank >= 1 && rank <= RANK_CUTOFF as usize {
            Rank::Hit(rank as u32)
        } else {
            Rank::Miss
        }
    }

    pub fn reciprocal(self) -> f64 {
        match self {
            Rank::Hit(r) => 1.0 / r as f64,
            Rank::Miss => 0.0,
        }
    }
}

/// 1 + ids scoring strictly higher + lower ids tied with the target.
pub fn full_rank<T: Scalar>(row: &[T], target: u32) -> Option<usize> {
    let t = target as usize;
    let score = *row.get(t)?;
    let mut rank = 1;
    for (i, &x) in row.iter().enumerate() {
        if x > score || (x == score && i < t) {
            rank += 1;
        }
    }
    Some(rank)
}

/// Rank of `target` in a logit row, [`Rank::Miss`] beyond the cutoff or
/// for an id outside the row.
pub fn rank_of_target<T: Scalar>(row: &[T], target: u32) -> Rank {
    full_rank(row, target).map_or(Rank::Miss, Rank::from_full)
}

/// Mean reciprocal rank as a percentage.
pub fn compute_mrr(ranks: &[Rank]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("MRR of an empty result set"));
    }
    let sum: f64 = ranks.iter().map(|r| r.reciprocal()).sum();
    Ok(100.0 * sum / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub tree: usize,
    pub position: usize,
    pub target: u32,
    pub rank: Rank,
    pub is_leaf: bool,
    pub category: Option<String>,
    pub target_was_oov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mrr: f64,
    pub oov_count: usize,
    pub oov_rate: f64,
}

impl Summary {
    fn of<'a>(results: impl IntoIterator<Item = &'a RankResult>) -> Option<Summary> {
        let (mut count, mut sum, mut oov) = (0usize, 0.0f64, 0usize);
        for r in results {
            count += 1;
            sum += r.rank.reciprocal();
            oov += usize::from(r.target_was_oov);
        }
        (count > 0).then(|| Summary {
            count,
            mrr: 100.0 * sum / count as f64,
            oov_count: oov,
            oov_rate: oov as f64 / count as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ModelKind,
    pub dataset_id: String,
    pub model_hash: String,
    pub config_hash: String,
    pub vocab_hash: String,
    pub mapping_version: String,
    pub oov_policy: String,
    pub overall: Summary,
    pub leaf: Option<Summary>,
    pub internal: Option<Summary>,
    pub leaf_categories: BTreeMap<String, Summary>,
    pub internal_categories: BTreeMap<String, Summary>,
    /// Leaf MRR when each value is chosen jointly with its parent type.
    pub joint_leaf: Option<Summary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub breakdown: bool,
    pub joint: bool,
    pub beam_width: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            breakdown: false,
            joint: false,
            beam_width: DEFAULT_BEAM_WIDTH,
        }
    }
}

pub fn model_hash(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    for p in model.params().iter() {
        h.update(p.name.as_bytes());
        h.update([0u8]);
        for x in p.tensor.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(model: &Model<f32>) -> String {
    hex_digest(&serde_json::to_vec(model.config()).expect("config serializes"))
}

struct HashWriter(Sha256);

impl std::io::Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Content hash of a dataset. The `source` label is excluded, so the same
/// corpus prepared from different paths has the same id.
pub fn dataset_id(data: &Dataset) -> Result<String> {
    let mut h = HashWriter(Sha256::new());
    let header = DatasetHeader { source: String::new(), ..data.header.clone() };
    let to_io = |e: serde_json::Error| Error::Io(e.into());
    serde_json::to_writer(&mut h, &header).map_err(to_io)?;
    for r in &data.records {
        h.0.update(b"\n");
        serde_json::to_writer(&mut h, r).map_err(to_io)?;
    }
    Ok(h.0.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Scores every loss-mask position of one segment.
pub fn rank_segment(
    model: &Model<f32>,
    seg: &EncodedSegment,
    internal_category: &dyn Fn(usize) -> Option<String>,
) -> Result<Vec<RankResult>> {
    let kind = model.config().kind;
    let targets = targets_for(kind, seg);
    if targets.count() == 0 {
        return Ok(Vec::new());
    }
    let logits = model.logits(&seg.input)?;
    let mut out = Vec::new();
    for (row, &scored) in targets.weights.iter().enumerate() {
        if !scored {
            continue;
        }
        let pos = row + 1;
        let target = targets.targets[row];
        let oov = target == UNK_ID;
        let is_leaf = seg.leaf_flags[pos];
        let category = if is_leaf {
            seg.categories[pos].map(|c| c.name().to_owned())
        } else {
            internal_category(pos)
        };
        out.push(RankResult {
            tree: seg.tree,
            position: seg.start + pos,
            target,
            rank: if oov { Rank::Miss } else { rank_of_target(logits.row(row), target) },
            is_leaf,
            category,
            target_was_oov: oov,
        });
    }
    Ok(out)
}

pub fn evaluate_corpus(model: &Model<f32>, data: &Dataset, vocab: &Vocab, opts: EvalOptions) -> Result<EvalReport> {
    let kind = model.config().kind;
    check_kinds(data.kind(), kind)?;
    if opts.joint && !kind.predicts_internal() {
        return Err(Error::KindMismatch(format!("joint search needs a DFS model, not {kind}")));
    }
    let encoded = data.encode(vocab)?;
    let mapping = &data.header.mapping;
    let per_segment: Vec<(Vec<RankResult>, Vec<RankResult>)> = encoded
        .par_iter()
        .zip(data.records.par_iter())
        .map(|(seg, rec)| {
            let cat = |pos: usize| mapping.internal_category(&rec.tokens[pos]).map(str::to_owned);
            let ranks = rank_segment(model, seg, &cat)?;
            let joint = if opts.joint {
                joint_segment(model, seg, opts.beam_width)?
            } else {
                Vec::new()
            };
            Ok((ranks, joint))
        })
        .collect::<Result<_>>()?;
    let results: Vec<RankResult> = per_segment.iter().flat_map(|s| s.0.iter().cloned()).collect();
    let joint: Vec<RankResult> = per_segment.iter().flat_map(|s| s.1.iter().cloned()).collect();
    let overall = Summary::of(&results).ok_or_else(|| Error::invalid("dataset has no scored positions"))?;

    let mut leaf_categories = BTreeMap::new();
    let mut internal_categories = BTreeMap::new();
    if opts.breakdown {
        let mut groups: BTreeMap<(bool, String), Vec<&RankResult>> = BTreeMap::new();
        for r in &results {
            if let Some(c) = &r.category {
                groups.entry((r.is_leaf, c.clone())).or_default().push(r);
            }
        }
        for ((leaf, name), rs) in groups {
            let s = Summary::of(rs).expect("non-empty group");
            if leaf {
                leaf_categories.insert(name, s);
            } else {
                internal_categories.insert(name, s);
            }
        }
    }
    Ok(EvalReport {
        kind,
        dataset_id: dataset_id(data)?,
        model_hash: model_hash(model),
        config_hash: config_hash(model),
        vocab_hash: vocab.hash(),
        mapping_version: mapping.version.clone(),
        oov_policy: OOV_POLICY.to_owned(),
        leaf: Summary::of(results.iter().filter(|r| r.is_leaf)),
        internal: kind
            .predicts_internal()
            .then(|| Summary::of(results.iter().filter(|r| !r.is_leaf)))
            .flatten(),
        overall,
        leaf_categories,
        internal_categories,
        joint_leaf: opts.joint.then(|| Summary::of(&joint)).flatten(),
    })
}

/// Probabilities over the vocabulary at the two steps of a type-then-value
/// prediction.
pub trait JointScorer {
    fn type_probs(&self) -> Result<Vec<f64>>;
    fn value_probs(&self, type_id: u32) -> Result<Vec<f64>>;
}

/// Ids of the `k` largest entries, ties by ascending id.
pub fn top_k(probs: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..probs.len() as u32).collect();
    idx.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Values ranked by their best joint probability p(type) * p(value | type)
/// over the expanded type candidates, ties by ascending id.
pub fn joint_leaf_prediction(scorer: &dyn JointScorer, beam_width: usize) -> Result<Vec<(u32, f64)>> {
    let tp = scorer.type_probs()?;
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for t in top_k(&tp, beam_width) {
        let vp = scorer.value_probs(t)?;
        for v in top_k(&vp, beam_width) {
            let s = tp[t as usize] * vp[v as usize];
            let e = best.entry(v).or_insert(s);
            if s > *e {
                *e = s;
            }
        }
    }
    let mut ranked: Vec<(u32, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

fn softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Joint search at a leaf position `pos` whose parent type sits at `pos - 1`.
pub struct ModelJointScorer<'a> {
    pub model: &'a Model<f32>,
    pub input: &'a SequenceInput,
    pub pos: usize,
}

impl JointScorer for ModelJointScorer<'_> {
    fn type_probs(&self) -> Result<Vec<f64>> {
        let prefix = self.input.prefix(self.pos - 1);
        let logits = self.model.logits(&prefix)?;
        Ok(softmax_f64(logits.row(self.pos - 2)))
    }

    fn value_probs(&self, type_id: u32) -> Result<Vec<f64>> {
        let mut prefix = self.input.prefix(self.pos);
        prefix.ids[self.pos - 1] = type_id;
        let logits: Tensor<f32> = self.model.logits(&prefix)?;
        Ok(softmax_f64(logits.row(self.pos - 1)))
    }
}

/// Joint ranks at every scored leaf whose parent immediately precedes it.
pub fn joint_segment(model: &Model<f32>, seg: &EncodedSegment, beam_width: usize) -> Result<Vec<RankResult>> {
    let kind = model.config().kind;
    let targets = targets_for(kind, seg);
    let mut out = Vec::new();
    for pos in 2..seg.input.len() {
        if !targets.weights[pos - 1] || !seg.leaf_flags[pos] || seg.parent[pos] != pos as i32 - 1 {
            continue;
        }
        let target = seg.input.ids[pos];
        let oov = target == UNK_ID;
        let rank = if oov {
            Rank::Miss
        } else {
            let scorer = ModelJointScorer {
                model,
                input: &seg.input,
                pos,
            };
            let ranked = joint_leaf_prediction(&scorer, beam_width)?;
            ranked
                .iter()
                .position(|&(v, _)| v == target)
                .map_or(Rank::Miss, |i| Rank::from_full(i + 1))
        };
        out.push(RankResult {
            tree: seg.tree,
            position: seg.start + pos,
            target,
            rank,
            is_leaf: true,
            category: seg.categories[pos].map(|c| c.name().to_owned()),
            target_was_oov: oov,
        });
    }
    Ok(out)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model kind   {}", self.kind);
        let _ = writeln!(s, "dataset      {}", &self.dataset_id[..12]);
        let _ = writeln!(s, "vocab        {}", &self.vocab_hash[..12]);
        let _ = writeln!(s, "note         {}", self.oov_policy);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>9} {:>8} {:>8}", "group", "count", "MRR", "OOV%");
        let mut line = |name: &str, x: &Summary| {
            let _ = writeln!(s, "{:<24} {:>9} {:>8.2} {:>8.2}", name, x.count, x.mrr, 100.0 * x.oov_rate);
        };
        line("overall", &self.overall);
        if let Some(x) = &self.leaf {
            line("leaf", x);
        }
        if let Some(x) = &self.internal {
            line("internal", x);
        }
        for (k, x) in &self.leaf_categories {
            line(&format!("  leaf {k}"), x);
        }
        for (k, x) in &self.internal_categories {
            line(&format!("  type {k}"), x);
        }
        if let Some(x) = &self.joint_leaf {
            line("leaf (joint search)", x);
        }
        s
    }
}
