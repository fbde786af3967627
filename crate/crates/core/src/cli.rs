//! Command-line front end: synth, leaves, prepare, vocab, train, eval, inspect.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{parse_corpus, parse_token_corpus, Dataset, PipelineSettings};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalOptions, DEFAULT_BEAM_WIDTH};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::saliency::{export_heatmap, saliency_map};
use crate::seqgen::{leaf_sequence, CategoryMapping};
use crate::synth::{generate, to_jsonl, Successor, SynthConfig};
use crate::train::{check_kinds, targets_for, TrainConfig, Trainer};
use crate::vocab::{Vocab, DEFAULT_MAX_SIZE};

const DATASET_FILE: &str = "dataset.jsonl";
const CHECKPOINT_FILE: &str = "model.ckpt";
const RUN_LOG: &str = "run.log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "codepred", version, about = "Next-token prediction over syntax trees")]
struct Cli {
    /// Seed for initialization, shuffling and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tree corpus.
    Synth(SynthArgs),
    /// Emit the leaf values of each tree as a token stream.
    Leaves(LeavesArgs),
    /// Normalize, serialize and window trees for one model kind.
    Prepare(PrepareArgs),
    /// Build a vocabulary from a prepared dataset.
    Vocab(VocabArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a model with MRR@10.
    Eval(EvalArgs),
    /// Export an input-saliency heatmap for one tree.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    trees: usize,
    #[arg(long, default_value_t = 8)]
    kinds: usize,
    #[arg(long, default_value_t = 4)]
    min_statements: usize,
    #[arg(long, default_value_t = 8)]
    max_statements: usize,
    #[arg(long, value_enum, default_value_t = SuccessorArg::Independent)]
    successor: SuccessorArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SuccessorArg {
    Independent,
    Cycle,
}

#[derive(Args, Debug)]
struct LeavesArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long, value_parser = parse_kind)]
    model_kind: ModelKind,
    /// JSON-lines trees, one per line.
    #[arg(long, required_unless_present = "tokens")]
    input: Option<PathBuf>,
    /// JSON-lines token arrays (srcseq only).
    #[arg(long, conflicts_with = "input")]
    tokens: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    max_path_len: Option<usize>,
    #[arg(long)]
    up_max: Option<usize>,
    #[arg(long)]
    down_max: Option<usize>,
    /// Category mapping JSON.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Store token ids from this vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VocabArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_SIZE)]
    max_size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    model_kind: Option<ModelKind>,
    #[arg(long)]
    n_block: Option<usize>,
    #[arg(long)]
    n_head: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    breakdown: bool,
    #[arg(long)]
    joint: bool,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    beam_width: usize,
    /// Print the JSON report to stdout.
    #[arg(long)]
    json: bool,
    /// Report directory (defaults to the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    tree_index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    max_positions: usize,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Model fields settable from a run config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: Option<ModelKind>,
    pub n_block: Option<usize>,
    pub n_head: Option<usize>,
    pub d_model: Option<usize>,
    pub dropout: Option<f64>,
    pub path_of_target: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct EffectiveConfig<'a> {
    data: &'a Path,
    vocab: &'a Path,
    out: &'a Path,
    vocab_hash: &'a str,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    resumed_from: Option<&'a Path>,
}

struct Ctx {
    quiet: bool,
    seed: Option<u64>,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        // A pool may already exist when called in-process; keep it then.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx {
        quiet: cli.quiet,
        seed: cli.seed,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Leaves(a) => leaves(&ctx, a),
        Command::Prepare(a) => prepare(&ctx, a),
        Command::Vocab(a) => vocab(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Inspect(a) => inspect(&ctx, a),
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        trees: a.trees,
        kinds: a.kinds,
        min_statements: a.min_statements,
        max_statements: a.max_statements,
        successor: match a.successor {
            SuccessorArg::Independent => Successor::Independent,
            SuccessorArg::Cycle => Successor::Cycle,
        },
        seed: ctx.seed.unwrap_or(0),
    };
    let trees = generate(&cfg)?;
    write_file(&a.out, to_jsonl(&trees).as_bytes())?;
    ctx.say(format!("wrote {} trees to {}", trees.len(), a.out.display()));
    Ok(())
}

fn leaves(ctx: &Ctx, a: LeavesArgs) -> Result<()> {
    let trees = parse_corpus(&std::fs::read_to_string(&a.input)?)?;
    let mut out = String::new();
    for t in &trees {
        let toks: Vec<String> = leaf_sequence(&crate::ast::normalize_ast(t)?)?
            .into_iter()
            .map(|t| t.text)
            .collect();
        out.push_str(&serde_json::to_string(&toks).expect("strings serialize"));
        out.push('\n');
    }
    write_file(&a.out, out.as_bytes())?;
    ctx.say(format!("wrote {} leaf streams to {}", trees.len(), a.out.display()));
    Ok(())
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn prepare(ctx: &Ctx, a: PrepareArgs) -> Result<()> {
    let d = PipelineSettings::default();
    let settings = PipelineSettings {
        context: a.context.unwrap_or(d.context),
        stride: a.stride.unwrap_or(d.stride),
        max_path_len: a.max_path_len.unwrap_or(d.max_path_len),
        up_max: a.up_max.unwrap_or(d.up_max),
        down_max: a.down_max.unwrap_or(d.down_max),
    };
    let mapping = match &a.mapping {
        Some(p) => CategoryMapping::from_json(&std::fs::read_to_string(p)?)?,
        None => CategoryMapping::default(),
    };
    let mut ds = match (&a.input, &a.tokens) {
        (_, Some(tokens)) => {
            if a.model_kind != ModelKind::SrcSeq {
                return Err(Error::KindMismatch(format!(
                    "token streams can only feed srcseq, not {}",
                    a.model_kind
                )));
            }
            let streams = parse_token_corpus(&std::fs::read_to_string(tokens)?)?;
            Dataset::from_token_streams(&streams, settings, tokens.display().to_string())?
        }
        (Some(input), None) => {
            let trees = parse_corpus(&std::fs::read_to_string(input)?)?;
            Dataset::from_trees(&trees, a.model_kind, settings, mapping, input.display().to_string())?
        }
        (None, None) => return Err(Error::invalid("--input or --tokens is required")),
    };
    if let Some(v) = &a.vocab {
        ds.attach_ids(&Vocab::load(v)?);
    }
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join(DATASET_FILE);
    ds.save(&path)?;
    ctx.say(format!(
        "prepared {} segments from {} trees ({}) into {}",
        ds.len(),
        ds.header.trees,
        ds.kind(),
        path.display()
    ));
    Ok(())
}

fn vocab(ctx: &Ctx, a: VocabArgs) -> Result<()> {
    let ds = Dataset::load(&dataset_path(&a.data))?;
    let keys = ds.vocab_keys();
    let v = Vocab::build(&keys, a.max_size)?;
    let coverage = v.coverage(&keys);
    write_file(&a.out, v.to_json().as_bytes())?;
    ctx.say(format!(
        "vocabulary of {} entries, coverage {:.4} of {} corpus tokens",
        v.len(),
        coverage,
        keys.len()
    ));
    Ok(())
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::invalid(format!("--{what} is required (flag or config file)")))
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::from_json(e, &text))?
        }
        None => RunConfig::default(),
    };
    // flags > config file > defaults
    rc.data = a.data.or(rc.data);
    rc.vocab = a.vocab.or(rc.vocab);
    rc.out = a.out.or(rc.out);
    rc.seed = ctx.seed.or(rc.seed);
    let m = &mut rc.model;
    m.kind = a.model_kind.or(m.kind);
    m.n_block = a.n_block.or(m.n_block);
    m.n_head = a.n_head.or(m.n_head);
    m.d_model = a.d_model.or(m.d_model);
    m.dropout = a.dropout.or(m.dropout);
    let t = &mut rc.train;
    t.max_epochs = a.epochs.unwrap_or(t.max_epochs);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    if let Some(s) = rc.seed {
        t.seed = s;
    }

    let data_path = dataset_path(&required(rc.data.clone(), "data")?);
    let vocab_path = required(rc.vocab.clone(), "vocab")?;
    let out = required(rc.out.clone(), "out")?;
    let ds = Dataset::load(&data_path)?;
    let vocab = Vocab::load(&vocab_path)?;
    let vocab_hash = vocab.hash();

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if let Some(w) = ck.vocab_warning(&vocab_hash) {
                eprintln!("{w}");
            }
            let mut tc = ck.train.clone();
            tc.max_epochs = rc.train.max_epochs;
            tc.checkpoint_every = rc.train.checkpoint_every;
            Trainer::resume(ck.model, tc, ck.adam, ck.progress)?
        }
        None => {
            let s = ds.header.settings;
            let d = ModelConfig::default();
            let cfg = ModelConfig {
                kind: rc.model.kind.unwrap_or(ds.kind()),
                n_block: rc.model.n_block.unwrap_or(d.n_block),
                n_head: rc.model.n_head.unwrap_or(d.n_head),
                d_model: rc.model.d_model.unwrap_or(d.d_model),
                context: s.context,
                vocab_size: vocab.len(),
                max_path_len: s.max_path_len,
                up_max: s.up_max,
                down_max: s.down_max,
                dropout: rc.model.dropout.unwrap_or(d.dropout),
                path_of_target: rc.model.path_of_target.unwrap_or(false),
            };
            check_kinds(ds.kind(), cfg.kind)?;
            Trainer::new(Model::new(cfg, rc.train.seed)?, rc.train.clone())?
        }
    };
    check_kinds(ds.kind(), trainer.model.config().kind)?;
    let enc = ds.encode(&vocab)?;

    std::fs::create_dir_all(&out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join(RUN_LOG))?);
    let header = EffectiveConfig {
        data: &data_path,
        vocab: &vocab_path,
        out: &out,
        vocab_hash: &vocab_hash,
        model: trainer.model.config(),
        train: &trainer.config,
        resumed_from: a.resume.as_deref(),
    };
    writeln!(log, "{}", serde_json::json!({ "config": header }))?;
    ctx.say(format!(
        "training {} ({} parameters) on {} segments",
        trainer.model.config().kind,
        trainer.model.params().num_scalars(),
        enc.len()
    ));

    let every = trainer.config.checkpoint_every as u64;
    let (mut loss_sum, mut tokens) = (0.0, 0usize);
    while !trainer.finished() {
        let rec = trainer.step(&enc)?;
        writeln!(log, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
        loss_sum += rec.loss * rec.tokens as f64;
        tokens += rec.tokens;
        let step = trainer.progress.step;
        if every > 0 && step % every == 0 {
            snapshot(&trainer, &vocab_hash).save(&out.join(format!("step-{step}.ckpt")))?;
        }
        if trainer.progress.epoch != rec.epoch {
            ctx.say(format!("epoch {:>3}  loss {:.5}", rec.epoch, loss_sum / tokens as f64));
            (loss_sum, tokens) = (0.0, 0);
        }
    }
    log.flush()?;
    let path = out.join(CHECKPOINT_FILE);
    snapshot(&trainer, &vocab_hash).save(&path)?;
    ctx.say(format!("saved {}", path.display()));
    Ok(())
}

fn snapshot(t: &Trainer, vocab_hash: &str) -> Checkpoint {
    Checkpoint {
        model: t.model.clone(),
        train: t.config.clone(),
        adam: t.adam.clone(),
        progress: t.progress,
        vocab_hash: vocab_hash.to_owned(),
    }
}

fn load_for_eval(ckpt: &Path, vocab: &Path) -> Result<(Checkpoint, Vocab)> {
    let ck = Checkpoint::load(&checkpoint_path(ckpt))?;
    let v = Vocab::load(vocab)?;
    if let Some(w) = ck.vocab_warning(&v.hash()) {
        eprintln!("{w}");
    }
    if v.len() != ck.model.config().vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} entries but the model expects {}",
            v.len(),
            ck.model.config().vocab_size
        )));
    }
    Ok((ck, v))
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let (ck, vocab) = load_for_eval(&a.ckpt, &a.vocab)?;
    let ds = Dataset::load(&dataset_path(&a.data))?;
    let report = evaluate_corpus(
        &ck.model,
        &ds,
        &vocab,
        EvalOptions {
            breakdown: a.breakdown,
            joint: a.joint,
            beam_width: a.beam_width,
        },
    )?;
    let out = match a.out {
        Some(o) => o,
        None => {
            let p = checkpoint_path(&a.ckpt);
            p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
        }
    };
    std::fs::create_dir_all(&out)?;
    let json = report.to_json();
    std::fs::write(out.join("report.json"), format!("{json}\n"))?;
    std::fs::write(out.join("report.txt"), report.to_text())?;
    if a.json {
        println!("{json}");
    } else if !ctx.quiet {
        print!("{}", report.to_text());
    }
    ctx.say(format!("wrote report.json and report.txt to {}", out.display()));
    Ok(())
}

fn inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let (ck, vocab) = load_for_eval(&a.ckpt, &a.vocab)?;
    let ds = Dataset::load(&dataset_path(&a.data))?;
    check_kinds(ds.kind(), ck.model.config().kind)?;
    let idx = ds
        .records
        .iter()
        .position(|r| r.tree == a.tree_index)
        .ok_or_else(|| Error::invalid(format!("no segment for tree {}", a.tree_index)))?;
    let rec = &ds.records[idx];
    let single = Dataset {
        header: ds.header.clone(),
        records: vec![rec.clone()],
    };
    let seg = single.encode(&vocab)?.remove(0);
    let targets = targets_for(ck.model.config().kind, &seg);
    let positions: Vec<usize> = (1..seg.input.len())
        .filter(|&p| targets.weights[p - 1])
        .take(a.max_positions)
        .collect();
    if positions.is_empty() {
        return Err(Error::invalid("the selected tree has no scored position"));
    }
    let map = saliency_map(&ck.model, &seg, &positions, &rec.tokens)?;
    let (csv, svg) = export_heatmap(&map, &a.out)?;
    ctx.say(format!("wrote {} and {}", csv.display(), svg.display()));
    Ok(())
}
