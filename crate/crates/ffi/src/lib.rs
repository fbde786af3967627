//! C ABI for codepred.
//!
//! Every function returns a [`CpStatus`]. On failure a message is kept per
//! thread and can be read with [`cp_last_error_message`]. Strings returned
//! through out-parameters are owned by the caller and must be released with
//! [`cp_string_free`]; models with [`cp_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use codepred::ast::{normalize_ast, parse_ast_json};
use codepred::checkpoint::Checkpoint;
use codepred::dataset::{prepare_tree, Dataset, EncodedSegment, DatasetHeader, PipelineSettings, FORMAT};
use codepred::eval::{compute_mrr, top_k, Rank};
use codepred::model::Model;
use codepred::seqgen::CategoryMapping;
use codepred::vocab::{split_key, Vocab};
use codepred::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidInput = 4,
    IoError = 5,
    CheckpointError = 6,
    KindMismatch = 7,
    Panic = 8,
}

/// Opaque handle to a loaded model and its vocabulary.
pub struct CpModel {
    model: Model<f32>,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> CpStatus {
    match e {
        Error::Json { .. } | Error::Structure(_) => CpStatus::ParseError,
        Error::Io(_) => CpStatus::IoError,
        Error::Checkpoint(_) => CpStatus::CheckpointError,
        Error::KindMismatch(_) => CpStatus::KindMismatch,
        Error::Invalid(_) | Error::NonFinite(_) => CpStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), CpStatus>) -> CpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CpStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            CpStatus::Panic
        }
    }
}

fn fail(e: Error) -> CpStatus {
    set_error(e.to_string());
    status_of(&e)
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, CpStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(CpStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        CpStatus::InvalidUtf8
    })
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), CpStatus> {
    let c = CString::new(s).map_err(|_| {
        set_error("result contains a NUL byte");
        CpStatus::InvalidInput
    })?;
    *out = c.into_raw();
    Ok(())
}

fn check_out<T>(out: *mut T) -> Result<(), CpStatus> {
    if out.is_null() {
        set_error("null output pointer");
        return Err(CpStatus::NullPointer);
    }
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn cp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn cp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Normalizes one JSON AST (one line of a py150-style corpus) and writes the
/// normalized tree's JSON to `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_normalize_ast_json(json: *const c_char, out: *mut *mut c_char) -> CpStatus {
    guard(|| {
        check_out(out)?;
        let text = read_str(json)?;
        let ast = parse_ast_json(text).and_then(|a| normalize_ast(&a)).map_err(fail)?;
        write_string(out, ast.to_json())
    })
}

/// MRR@10 percentage of `n` 1-based ranks; ranks outside 1..=10 are misses.
///
/// # Safety
/// `ranks` must point to `n` readable values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cp_compute_mrr(ranks: *const i64, n: usize, out: *mut f64) -> CpStatus {
    guard(|| {
        check_out(out)?;
        if ranks.is_null() {
            set_error("null rank array");
            return Err(CpStatus::NullPointer);
        }
        let rs: Vec<Rank> = std::slice::from_raw_parts(ranks, n)
            .iter()
            .map(|&r| if r >= 1 { Rank::from_full(r as usize) } else { Rank::Miss })
            .collect();
        *out = compute_mrr(&rs).map_err(fail)?;
        Ok(())
    })
}

/// Loads a checkpoint and the vocabulary it was trained with.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cp_model_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    out: *mut *mut CpModel,
) -> CpStatus {
    guard(|| {
        check_out(out)?;
        let ck = Checkpoint::load(Path::new(read_str(checkpoint_path)?)).map_err(fail)?;
        let vocab = Vocab::load(Path::new(read_str(vocab_path)?)).map_err(fail)?;
        if vocab.len() != ck.model.config().vocab_size {
            return Err(fail(Error::Invalid(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                ck.model.config().vocab_size
            ))));
        }
        *out = Box::into_raw(Box::new(CpModel { model: ck.model, vocab }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`cp_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn cp_model_free(model: *mut CpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of vocabulary entries of a loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cp_model_vocab_size(model: *const CpModel, out: *mut usize) -> CpStatus {
    guard(|| {
        check_out(out)?;
        let m = model.as_ref().ok_or(CpStatus::NullPointer)?;
        *out = m.vocab.len();
        Ok(())
    })
}

fn encode_tail(m: &CpModel, tree_json: &str) -> codepred::Result<EncodedSegment> {
    let cfg = m.model.config();
    let ast = parse_ast_json(tree_json)?;
    let settings = PipelineSettings {
        context: cfg.context,
        stride: cfg.context,
        max_path_len: cfg.max_path_len,
        up_max: cfg.up_max,
        down_max: cfg.down_max,
    };
    let recs = prepare_tree(&ast, 0, cfg.kind, &settings, &CategoryMapping::default())?;
    let last = recs.into_iter().last().ok_or_else(|| Error::Invalid("tree yields no tokens".into()))?;
    let ds = Dataset {
        header: DatasetHeader {
            format: FORMAT.to_owned(),
            kind: cfg.kind,
            settings,
            mapping: CategoryMapping::default(),
            source: "ffi".to_owned(),
            trees: 1,
            note: None,
        },
        records: vec![last],
    };
    Ok(ds.encode(&m.vocab)?.remove(0))
}

/// Predicts the token following the serialized tree. Writes a JSON array of
/// the `k` most likely `{"token", "namespace", "prob"}` objects to `*out`.
///
/// # Safety
/// `model` must be a live handle, `tree_json` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cp_model_predict_next(
    model: *const CpModel,
    tree_json: *const c_char,
    k: usize,
    out: *mut *mut c_char,
) -> CpStatus {
    guard(|| {
        check_out(out)?;
        let m = model.as_ref().ok_or_else(|| {
            set_error("null model handle");
            CpStatus::NullPointer
        })?;
        let seg = encode_tail(m, read_str(tree_json)?).map_err(fail)?;
        let logits = m.model.logits(&seg.input).map_err(fail)?;
        let row = logits.row(logits.rows() - 1);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exp: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        let probs: Vec<f64> = exp.iter().map(|e| e / z).collect();
        let items: Vec<serde_json::Value> = top_k(&probs, k)
            .into_iter()
            .map(|id| {
                let key = m.vocab.decode(id).unwrap_or(codepred::vocab::UNK_TOKEN);
                let (ns, text) = match split_key(key) {
                    Some((ns, t)) => (format!("{ns:?}").to_lowercase(), t.to_owned()),
                    None => ("reserved".to_owned(), key.to_owned()),
                };
                serde_json::json!({ "token": text, "namespace": ns, "prob": probs[id as usize] })
            })
            .collect();
        write_string(out, serde_json::Value::Array(items).to_string())
    })
}
