//! Causal transformer variants over token, leaf, root-path and DFS inputs.
//!
//! No positional embedding exists in any variant. TRAVREL multiplies raw
//! attention scores by learned per-head factors indexed by up/down relation
//! class, stored as logits and exponentiated so that all factors are
//! positive and equal to 1 at initialization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mask, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::seqgen::{RelationSpace, DEFAULT_DOWN_MAX, DEFAULT_MAX_PATH_LEN, DEFAULT_UP_MAX};
use crate::vocab::PAD_ID;

const INIT_STD: f64 = 0.02;
const PATH_SEED_SALT: u64 = 0x5041_5448;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    SrcSeq,
    LeafSeq,
    RootPath,
    Trav,
    TravRel,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::SrcSeq,
        ModelKind::LeafSeq,
        ModelKind::RootPath,
        ModelKind::Trav,
        ModelKind::TravRel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SrcSeq => "srcseq",
            ModelKind::LeafSeq => "leafseq",
            ModelKind::RootPath => "rootpath",
            ModelKind::Trav => "trav",
            ModelKind::TravRel => "travrel",
        }
    }

    /// DFS models predict every node; the others predict leaves only.
    pub fn predicts_internal(self) -> bool {
        matches!(self, ModelKind::Trav | ModelKind::TravRel)
    }

    pub fn uses_paths(self) -> bool {
        self == ModelKind::RootPath
    }

    pub fn uses_relations(self) -> bool {
        self == ModelKind::TravRel
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_block: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub max_path_len: usize,
    pub up_max: usize,
    pub down_max: usize,
    /// Applied to embeddings, attention weights and sublayer outputs while training.
    pub dropout: f64,
    /// ROOTPATH only: feed the root path of the token being predicted
    /// instead of the current token's path.
    pub path_of_target: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Trav,
            n_block: 6,
            n_head: 6,
            d_model: 300,
            context: 1000,
            vocab_size: crate::vocab::DEFAULT_MAX_SIZE,
            max_path_len: DEFAULT_MAX_PATH_LEN,
            up_max: DEFAULT_UP_MAX,
            down_max: DEFAULT_DOWN_MAX,
            dropout: 0.1,
            path_of_target: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_head == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.n_block == 0 || self.context == 0 || self.vocab_size < 2 || self.max_path_len == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.uses_relation_space() && self.relation_space().num_classes() > 256 {
            return Err(Error::invalid("relation clipping produces more than 256 classes"));
        }
        Ok(())
    }

    fn uses_relation_space(&self) -> bool {
        self.kind.uses_relations()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn relation_space(&self) -> RelationSpace {
        RelationSpace::new(self.up_max, self.down_max)
    }
}

/// One model input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub ids: Vec<u32>,
    /// Root path token ids per position, parent first (ROOTPATH).
    pub paths: Option<Vec<Vec<u32>>>,
    /// Lower-triangular relation-class ids (TRAVREL).
    pub relation: Option<Arc<Vec<u8>>>,
}

impl SequenceInput {
    pub fn tokens(ids: Vec<u32>) -> Self {
        SequenceInput {
            ids,
            paths: None,
            relation: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The first `len` positions.
    pub fn prefix(&self, len: usize) -> SequenceInput {
        let len = len.min(self.ids.len());
        SequenceInput {
            ids: self.ids[..len].to_vec(),
            paths: self.paths.as_ref().map(|p| p[..len].to_vec()),
            relation: self
                .relation
                .as_ref()
                .map(|r| Arc::new(r[..len * (len + 1) / 2].to_vec())),
        }
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    b_k: ParamId,
    w_v: ParamId,
    b_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
struct PathIds {
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    tokens: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
    path: Option<PathIds>,
    relation: Option<ParamId>,
}

/// Parameters plus configuration.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: ParamIds,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Enables dropout with masks drawn from this seed.
    pub dropout_seed: Option<u64>,
    /// ROOTPATH only: drop the path encodings from the input.
    pub zero_paths: bool,
}

/// Nodes of interest produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Input-embedding layer output (token embedding plus path encoding).
    pub embeddings: Var,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. Parameters shared by all kinds are drawn first
    /// from one stream, so two kinds built from the same seed agree on them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let v = config.vocab_size;
        let tokens = store.add("embed.tokens", normal_tensor(&mut rng, v, d))?;
        let mut blocks = Vec::with_capacity(config.n_block);
        for b in 0..config.n_block {
            let p = |s: &str| format!("block{b}.{s}");
            let mut add_w = |store: &mut ParamStore<T>, name: &str, r: usize, c: usize| {
                store.add(p(name), normal_tensor(&mut rng, r, c))
            };
            let w_q = add_w(&mut store, "attn.w_q", d, d)?;
            let w_k = add_w(&mut store, "attn.w_k", d, d)?;
            let w_v = add_w(&mut store, "attn.w_v", d, d)?;
            let w_o = add_w(&mut store, "attn.w_o", d, d)?;
            let ff_w1 = add_w(&mut store, "ff.w1", d, 4 * d)?;
            let ff_w2 = add_w(&mut store, "ff.w2", 4 * d, d)?;
            let zeros = |c| Tensor::zeros(1, c);
            let ones = |c| Tensor::filled(1, c, T::one());
            blocks.push(BlockIds {
                w_q,
                b_q: store.add(p("attn.b_q"), zeros(d))?,
                w_k,
                b_k: store.add(p("attn.b_k"), zeros(d))?,
                w_v,
                b_v: store.add(p("attn.b_v"), zeros(d))?,
                w_o,
                b_o: store.add(p("attn.b_o"), zeros(d))?,
                ln1_gain: store.add(p("ln1.gain"), ones(d))?,
                ln1_bias: store.add(p("ln1.bias"), zeros(d))?,
                ff_w1,
                ff_b1: store.add(p("ff.b1"), zeros(4 * d))?,
                ff_w2,
                ff_b2: store.add(p("ff.b2"), zeros(d))?,
                ln2_gain: store.add(p("ln2.gain"), ones(d))?,
                ln2_bias: store.add(p("ln2.bias"), zeros(d))?,
            });
        }
        let head_w = store.add("head.weight", normal_tensor(&mut rng, d, v))?;
        let head_b = store.add("head.bias", Tensor::zeros(1, v))?;

        let path = if config.kind.uses_paths() {
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ PATH_SEED_SALT);
            Some(PathIds {
                w_input: store.add("path.w_input", normal_tensor(&mut prng, d, 4 * d))?,
                w_hidden: store.add("path.w_hidden", normal_tensor(&mut prng, d, 4 * d))?,
                bias: store.add("path.bias", Tensor::zeros(1, 4 * d))?,
            })
        } else {
            None
        };
        let relation = if config.kind.uses_relations() {
            let classes = config.relation_space().num_classes();
            Some(store.add("relation.logits", Tensor::zeros(classes, config.n_head))?)
        } else {
            None
        };
        Ok(Model {
            config,
            params: store,
            ids: ParamIds {
                tokens,
                blocks,
                head_w,
                head_b,
                path,
                relation,
            },
        })
    }

    /// Rebuilds a model from named tensors, which must match the inventory
    /// of a freshly initialized model exactly.
    pub fn from_named_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for p in model.params.iter_mut() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    pub fn relation_param(&self) -> Option<ParamId> {
        self.ids.relation
    }

    pub fn classifier_params(&self) -> (ParamId, ParamId) {
        (self.ids.head_w, self.ids.head_b)
    }

    fn check_input(&self, input: &SequenceInput) -> Result<()> {
        let n = input.len();
        let kind = self.config.kind;
        if n == 0 {
            return Err(Error::invalid("empty input sequence"));
        }
        if n > self.config.context {
            return Err(Error::invalid(format!(
                "sequence of {n} exceeds context {}",
                self.config.context
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        match (&input.paths, kind.uses_paths()) {
            (Some(p), true) if p.len() != n => {
                return Err(Error::invalid("root path count does not match sequence length"))
            }
            (None, true) => return Err(Error::KindMismatch(format!("{kind} input needs root paths"))),
            (Some(_), false) => {
                return Err(Error::KindMismatch(format!("{kind} input must not carry root paths")))
            }
            _ => {}
        }
        match (&input.relation, kind.uses_relations()) {
            (Some(r), true) => {
                if r.len() != n * (n + 1) / 2 {
                    return Err(Error::invalid("relation triangle does not match sequence length"));
                }
                let classes = self.config.relation_space().num_classes();
                if r.iter().any(|&c| c as usize >= classes) {
                    return Err(Error::invalid("relation class id out of range"));
                }
            }
            (None, true) => {
                return Err(Error::KindMismatch(format!("{kind} input needs a relation matrix")))
            }
            (Some(_), false) => {
                return Err(Error::KindMismatch(format!(
                    "{kind} input must not carry a relation matrix"
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Builds the forward computation on `g`, which must borrow this model's
    /// parameters.
    pub fn forward(&self, g: &mut Graph<'_, T>, input: &SequenceInput, opts: ForwardOptions) -> Result<ForwardOutput> {
        self.check_input(input)?;
        let cfg = &self.config;
        let mut rng = opts.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };

        let table = g.param(self.ids.tokens);
        let mut x = g.gather(table, &input.ids);
        if let (Some(paths), false) = (&input.paths, opts.zero_paths) {
            let shifted;
            let paths = if cfg.path_of_target {
                shifted = shift_to_target(paths);
                &shifted
            } else {
                paths
            };
            let enc = self.encode_root_paths(g, paths)?;
            x = g.add(x, enc);
        }
        let embeddings = x;
        let mut h = dropout(g, x, p_drop, rng.as_mut());
        for b in &self.ids.blocks {
            h = self.block(g, h, b, input, p_drop, rng.as_mut())?;
        }
        let w = g.param(self.ids.head_w);
        let bias = g.param(self.ids.head_b);
        let logits = g.matmul(h, w);
        let logits = g.add_row(logits, bias);
        Ok(ForwardOutput { logits, embeddings })
    }

    fn block(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        ids: &BlockIds,
        input: &SequenceInput,
        p_drop: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = input.len();
        let dk = cfg.d_head();
        let affine = |g: &mut Graph<'_, T>, x: Var, w: ParamId, b: ParamId| {
            let w = g.param(w);
            let b = g.param(b);
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };
        let q = affine(g, h, ids.w_q, ids.b_q);
        let k = affine(g, h, ids.w_k, ids.b_k);
        let v = affine(g, h, ids.w_v, ids.b_v);
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_head);
        for head in 0..cfg.n_head {
            let qh = g.slice_cols(q, head * dk, dk);
            let kh = g.slice_cols(k, head * dk, dk);
            let vh = g.slice_cols(v, head * dk, dk);
            let mut scores = g.matmul_bt(qh, kh);
            if let (Some(rel_id), Some(rel)) = (self.ids.relation, &input.relation) {
                let table = g.param(rel_id);
                let factors = g.relation_factors(table, Arc::clone(rel), n, head);
                scores = g.mul(scores, factors);
            }
            let weights = g.softmax_rows(scores, scale, Mask::Causal)?;
            let weights = dropout(g, weights, p_drop, rng.as_deref_mut());
            heads.push(g.matmul(weights, vh));
        }
        let cat = g.concat_cols(&heads);
        let attn = affine(g, cat, ids.w_o, ids.b_o);
        let attn = dropout(g, attn, p_drop, rng.as_deref_mut());
        let res1 = g.add(attn, h);
        let (g1, b1) = (g.param(ids.ln1_gain), g.param(ids.ln1_bias));
        let a = g.layer_norm(res1, g1, b1);

        let inner = affine(g, a, ids.ff_w1, ids.ff_b1);
        let inner = g.gelu(inner);
        let ff = affine(g, inner, ids.ff_w2, ids.ff_b2);
        let ff = dropout(g, ff, p_drop, rng.as_deref_mut());
        // The second skip connection carries the block input.
        let res2 = g.add(ff, h);
        let (g2, b2) = (g.param(ids.ln2_gain), g.param(ids.ln2_bias));
        Ok(g.layer_norm(res2, g2, b2))
    }

    /// One vector per path: final hidden state of a gated recurrent cell run
    /// from the root end of the path down to the leaf's parent.
    pub fn encode_root_paths(&self, g: &mut Graph<'_, T>, paths: &[Vec<u32>]) -> Result<Var> {
        let ids = self
            .ids
            .path
            .as_ref()
            .ok_or_else(|| Error::KindMismatch(format!("{} has no path encoder", self.config.kind)))?;
        if paths.is_empty() {
            return Err(Error::invalid("no root paths to encode"));
        }
        let mut unique: BTreeMap<&[u32], usize> = BTreeMap::new();
        let mut order: Vec<&[u32]> = Vec::new();
        let mut row_of = Vec::with_capacity(paths.len());
        for p in paths {
            if p.is_empty() {
                return Err(Error::invalid("root path must hold at least one ancestor"));
            }
            if p.len() > self.config.max_path_len {
                return Err(Error::invalid(format!(
                    "root path of length {} exceeds {}",
                    p.len(),
                    self.config.max_path_len
                )));
            }
            let next = unique.len();
            let idx = *unique.entry(p.as_slice()).or_insert_with(|| {
                order.push(p.as_slice());
                next
            });
            row_of.push(idx as u32);
        }
        let d = self.config.d_model;
        let u = order.len();
        let steps = order.iter().map(|p| p.len()).max().unwrap_or(0);
        let table = g.param(self.ids.tokens);
        let w_in = g.param(ids.w_input);
        let w_hid = g.param(ids.w_hidden);
        let bias = g.param(ids.bias);
        let mut h = g.constant(Tensor::zeros(u, d));
        let mut c = g.constant(Tensor::zeros(u, d));
        for s in 0..steps {
            let mut tok = Vec::with_capacity(u);
            let mut active = Vec::with_capacity(u);
            for p in &order {
                let offset = steps - p.len();
                if s >= offset {
                    // root-most ancestor first, parent last
                    tok.push(p[p.len() - 1 - (s - offset)]);
                    active.push(true);
                } else {
                    tok.push(PAD_ID);
                    active.push(false);
                }
            }
            let xs = g.gather(table, &tok);
            let zx = g.matmul(xs, w_in);
            let zh = g.matmul(h, w_hid);
            let z = g.add(zx, zh);
            let z = g.add_row(z, bias);
            let gi = g.slice_cols(z, 0, d);
            let gf = g.slice_cols(z, d, d);
            let gg = g.slice_cols(z, 2 * d, d);
            let go = g.slice_cols(z, 3 * d, d);
            let i = g.sigmoid(gi);
            let f = g.sigmoid(gf);
            let cand = g.tanh(gg);
            let o = g.sigmoid(go);
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            let c_new = g.add(keep, write);
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc);
            if active.iter().all(|&a| a) {
                h = h_new;
                c = c_new;
            } else {
                // Inactive rows only occur before a path starts, where the
                // state is still zero.
                let mut m = Tensor::zeros(u, d);
                for (r, &a) in active.iter().enumerate() {
                    if a {
                        m.row_mut(r).fill(T::one());
                    }
                }
                let m = g.constant(m);
                h = g.mul(h_new, m);
                c = g.mul(c_new, m);
            }
        }
        Ok(g.gather(h, &row_of))
    }

    /// Logits for every position, without dropout.
    pub fn logits(&self, input: &SequenceInput) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, input, ForwardOptions::default())?;
        Ok(g.value(out.logits).clone())
    }

    /// Mean next-token loss over the scored positions, its position count,
    /// and parameter gradients.
    pub fn loss_and_grads(
        &self,
        input: &SequenceInput,
        targets: &LossTargets,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, usize, Vec<Tensor<T>>)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(
            &mut g,
            input,
            ForwardOptions {
                dropout_seed,
                zero_paths: false,
            },
        )?;
        let loss = compute_loss(&mut g, out.logits, targets)?;
        let value = g.value(loss).to_scalar().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let grads = g.backward(loss)?.into_param_grads(&self.params);
        Ok((value, targets.count(), grads))
    }

    pub fn loss(&self, input: &SequenceInput, targets: &LossTargets) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, input, ForwardOptions::default())?;
        let loss = compute_loss(&mut g, out.logits, targets)?;
        Ok(g.value(loss).to_scalar().as_f64())
    }
}

fn shift_to_target(paths: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let n = paths.len();
    (0..n).map(|i| paths[(i + 1).min(n - 1)].clone()).collect()
}

fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = T::lit(1.0 / (1.0 - p));
    let data = (0..r * c)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mask = g.constant(Tensor::from_vec(r, c, data).expect("shape"));
    g.mul(x, mask)
}

/// Shifted next-token targets: row `i` predicts token `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub targets: Vec<u32>,
    pub weights: Vec<bool>,
}

impl LossTargets {
    /// Row `i` is scored when position `i + 1` is in the loss mask and, for
    /// leaf-only kinds, is a leaf. The last row and position 0 are never
    /// scored.
    pub fn new(kind: ModelKind, ids: &[u32], loss_mask: &[bool], leaf_flags: &[bool]) -> Self {
        let n = ids.len();
        let mut targets = vec![PAD_ID; n];
        let mut weights = vec![false; n];
        for i in 0..n.saturating_sub(1) {
            targets[i] = ids[i + 1];
            weights[i] = loss_mask[i + 1] && (kind.predicts_internal() || leaf_flags[i + 1]);
        }
        LossTargets { targets, weights }
    }

    pub fn count(&self) -> usize {
        self.weights.iter().filter(|&&w| w).count()
    }

    /// Targets restricted to the row predicting position `pos`.
    pub fn only_position(&self, pos: usize) -> LossTargets {
        let mut weights = vec![false; self.weights.len()];
        if pos >= 1 && pos - 1 < weights.len() {
            weights[pos - 1] = true;
        }
        LossTargets {
            targets: self.targets.clone(),
            weights,
        }
    }
}

pub fn compute_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &LossTargets) -> Result<Var> {
    let weights: Vec<T> = targets
        .weights
        .iter()
        .map(|&w| if w { T::one() } else { T::zero() })
        .collect();
    g.cross_entropy(logits, &targets.targets, &weights)
        .map_err(|_| Error::invalid("no position is scored in this segment"))
}

/// Single-head causal attention `softmax(QKᵀ/√d_k)V` on plain matrices.
pub fn causal_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    attention_impl(q, k, v, None)
}

/// Single-head relation-weighted attention `softmax((R ⊙ QKᵀ)/√d_k)V`.
/// Every entry of `r` on or below the diagonal must be positive.
pub fn treerel_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    r: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = q.rows();
    if r.shape() != (n, n) {
        return Err(Error::invalid("relation factors must be n x n"));
    }
    for i in 0..n {
        for j in 0..=i {
            if !(r.at(i, j) > T::zero()) {
                return Err(Error::invalid(format!(
                    "relation factor ({i}, {j}) is not positive"
                )));
            }
        }
    }
    attention_impl(q, k, v, Some(r))
}

/// Returns `(output, weights)`.
fn attention_impl<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    r: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.shape() != k.shape() || q.rows() != v.rows() {
        return Err(Error::invalid("attention shapes disagree"));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let mut s = g.matmul_bt(qv, kv);
    if let Some(r) = r {
        let rv = g.constant(r.clone());
        s = g.mul(s, rv);
    }
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let w = g.softmax_rows(s, scale, Mask::Causal)?;
    let out = g.matmul(w, vv);
    Ok((g.value(out).clone(), g.value(w).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            n_block: 2,
            n_head: 2,
            d_model: 8,
            context: 32,
            vocab_size: 20,
            max_path_len: 4,
            up_max: 3,
            down_max: 3,
            dropout: 0.0,
            path_of_target: false,
        }
    }

    fn input_for(kind: ModelKind, n: usize) -> SequenceInput {
        let ids: Vec<u32> = (0..n).map(|i| (i as u32 * 7 + 3) % 20).collect();
        let paths = kind
            .uses_paths()
            .then(|| (0..n).map(|i| vec![2 + (i as u32 % 3), 5, 6][..1 + i % 3].to_vec()).collect());
        let relation = kind.uses_relations().then(|| {
            Arc::new((0..n * (n + 1) / 2).map(|k| (k % 17) as u8).collect::<Vec<u8>>())
        });
        SequenceInput { ids, paths, relation }
    }

    #[test]
    fn no_positional_parameters() {
        for kind in ModelKind::ALL {
            let m = Model::<f32>::new(tiny(kind), 1).unwrap();
            assert!(m.params().iter().all(|p| !p.name.contains("pos")));
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let m = Model::<f32>::new(tiny(ModelKind::Trav), 1).unwrap();
        assert!(matches!(
            m.logits(&input_for(ModelKind::TravRel, 4)),
            Err(Error::KindMismatch(_))
        ));
        let m = Model::<f32>::new(tiny(ModelKind::RootPath), 1).unwrap();
        assert!(matches!(
            m.logits(&SequenceInput::tokens(vec![1, 2])),
            Err(Error::KindMismatch(_))
        ));
    }

    #[test]
    fn single_position_attention_returns_value() {
        let q = Tensor::from_rows(&[vec![0.3f64, -0.2]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.5f64, 2.5]]).unwrap();
        let (out, w) = causal_attention(&q, &q, &v).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out, v);
    }

    #[test]
    fn treerel_requires_positive_factors() {
        let q = Tensor::from_rows(&[vec![0.3f64], vec![0.1]]).unwrap();
        let r = Tensor::from_rows(&[vec![1.0f64, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(treerel_attention(&q, &q, &q, &r).is_err());
    }

    #[test]
    fn identical_paths_encode_identically() {
        let m = Model::<f64>::new(tiny(ModelKind::RootPath), 3).unwrap();
        let mut g = Graph::new(m.params());
        let enc = m
            .encode_root_paths(&mut g, &[vec![2, 5], vec![3], vec![2, 5]])
            .unwrap();
        let t = g.value(enc);
        assert_eq!(t.row(0), t.row(2));
        assert_ne!(t.row(0), t.row(1));
        assert!(m.encode_root_paths(&mut g, &[vec![]]).is_err());
    }

    #[test]
    fn loss_targets_shift_and_mask() {
        let t = LossTargets::new(
            ModelKind::Trav,
            &[5, 6, 7],
            &[true, true, true],
            &[false, false, true],
        );
        assert_eq!(t.targets, vec![6, 7, PAD_ID]);
        assert_eq!(t.weights, vec![true, true, false]);
        let t = LossTargets::new(
            ModelKind::RootPath,
            &[5, 6, 7],
            &[true, true, true],
            &[false, false, true],
        );
        assert_eq!(t.weights, vec![false, true, false]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut m = Model::<f64>::new(tiny(ModelKind::Trav), 1).unwrap();
        let (w, _) = m.classifier_params();
        m.params_mut().tensor_mut(w).data_mut().fill(0.0);
        let input = input_for(ModelKind::Trav, 3);
        let t = LossTargets::new(ModelKind::Trav, &input.ids, &[true; 3], &[true; 3]);
        let loss = m.loss(&input, &t).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_causal_for_every_kind() {
        for kind in ModelKind::ALL {
            let m = Model::<f32>::new(tiny(kind), 9).unwrap();
            let a = input_for(kind, 6);
            let mut b = a.clone();
            b.ids[5] = (b.ids[5] + 1) % 20;
            if let Some(p) = b.paths.as_mut() {
                p[5] = vec![9, 9];
            }
            let (la, lb) = (m.logits(&a).unwrap(), m.logits(&b).unwrap());
            for r in 0..5 {
                assert_eq!(la.row(r), lb.row(r), "{kind} row {r}");
            }
        }
    }
    #[test]
    fn worked_attention_row_for_dot() {
        // Hidden earlier token, then "map", "(", "string", ".".
        let w = [0.1f64, 0.2, 0.1, 0.2, 0.4];
        let q = Tensor::from_vec(5, 1, vec![1.0; 5]).unwrap();
        let k = Tensor::from_vec(5, 1, w.iter().map(|x| x.ln()).collect()).unwrap();
        let v = Tensor::from_vec(5, 2, (0..10).map(|x| x as f64).collect()).unwrap();
        let (out, weights) = causal_attention(&q, &k, &v).unwrap();
        for (j, &wj) in w.iter().enumerate() {
            assert!((weights.at(4, j) - wj).abs() < 1e-12);
        }
        let expect: f64 = (0..5).map(|j| w[j] * v.at(j, 0)).sum();
        assert!((out.at(4, 0) - expect).abs() < 1e-12);
        for r in 0..5 {
            let s: f64 = weights.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn travrel_at_init_matches_trav() {
        let trav = Model::<f64>::new(tiny(ModelKind::Trav), 4).unwrap();
        let rel = Model::<f64>::new(tiny(ModelKind::TravRel), 4).unwrap();
        let with_rel = input_for(ModelKind::TravRel, 7);
        let plain = SequenceInput::tokens(with_rel.ids.clone());
        let (a, b) = (trav.logits(&plain).unwrap(), rel.logits(&with_rel).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn leafseq_is_rootpath_without_paths() {
        let leaf = Model::<f64>::new(tiny(ModelKind::LeafSeq), 4).unwrap();
        let root = Model::<f64>::new(tiny(ModelKind::RootPath), 4).unwrap();
        let input = input_for(ModelKind::RootPath, 5);
        let mut g = Graph::new(root.params());
        let out = root
            .forward(&mut g, &input, ForwardOptions { dropout_seed: None, zero_paths: true })
            .unwrap();
        let plain = SequenceInput::tokens(input.ids.clone());
        assert_eq!(g.value(out.logits), &leaf.logits(&plain).unwrap());
        assert_ne!(g.value(out.logits), &root.logits(&input).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in ModelKind::ALL {
            let mut m = Model::<f64>::new(tiny(kind), 5).unwrap();
            if let Some(r) = m.relation_param() {
                for (i, x) in m.params_mut().tensor_mut(r).data_mut().iter_mut().enumerate() {
                    *x = 0.05 * ((i % 7) as f64 - 3.0);
                }
            }
            let input = input_for(kind, 6);
            let t = LossTargets::new(kind, &input.ids, &[true; 6], &[true; 6]);
            let report = crate::autodiff::grad_check(m.params(), crate::autodiff::GRAD_CHECK_EPS, 6, |p| {
                let mut probe = m.clone();
                *probe.params_mut() = p.clone();
                let (l, _, g) = probe.loss_and_grads(&input, &t, None)?;
                Ok((l, g))
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{kind}: {report:?}");
        }
    }

    #[test]
    fn dropout_changes_training_pass_only() {
        let mut cfg = tiny(ModelKind::Trav);
        cfg.dropout = 0.5;
        let m = Model::<f64>::new(cfg, 2).unwrap();
        let input = input_for(ModelKind::Trav, 5);
        let t = LossTargets::new(ModelKind::Trav, &input.ids, &[true; 5], &[true; 5]);
        let eval = m.loss(&input, &t).unwrap();
        let (a, _, _) = m.loss_and_grads(&input, &t, Some(1)).unwrap();
        let (b, _, _) = m.loss_and_grads(&input, &t, Some(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, eval);
    }
}
