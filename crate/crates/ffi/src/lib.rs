//! C ABI over `pal-core`.
//!
//! Every function returns a [`PalStatus`]. On failure a message is kept per
//! thread and can be read with [`pal_last_error_message`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pal_core::checkpoint::load_checkpoint;
use pal_core::gradcheck::{run_gradcheck, GradcheckConfig};
use pal_core::io::{read_corpus, Corpus};
use pal_core::relrep::forward_pooled;
use pal_core::trainer::TrainState;
use pal_core::{AnchorSet, Error, Matrix, TokenSequence};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PalStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Corruption = 5,
    Data = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Selects one side of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PalModality {
    Vision = 0,
    Language = 1,
}

/// A token corpus loaded from disk.
pub struct PalCorpus(Corpus);

/// Trained anchors and settings loaded from a checkpoint.
pub struct PalModel(TrainState);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> PalStatus {
    match err {
        Error::Format(_) => PalStatus::Format,
        Error::Corruption(_) => PalStatus::Corruption,
        Error::Data(_) => PalStatus::Data,
        Error::Usage(_) => PalStatus::InvalidArgument,
        Error::Numeric { .. } => PalStatus::Numeric,
        Error::Io { .. } => PalStatus::Io,
    }
}

struct Fail(PalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(name: &str) -> Fail {
    Fail(PalStatus::NullArgument, format!("`{name}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PalStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PalStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PalStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_corpus_load(path: *const c_char, out: *mut *mut PalCorpus) -> PalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let corpus = read_corpus(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PalCorpus(corpus)));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from [`pal_corpus_load`] and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pal_corpus_free(corpus: *mut PalCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` must be a live handle; `count` and `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_corpus_info(
    corpus: *const PalCorpus,
    modality: *mut PalModality,
    count: *mut usize,
    dim: *mut usize,
) -> PalStatus {
    guard(|| {
        let c = &corpus.as_ref().ok_or_else(|| null("corpus"))?.0;
        *out_arg(modality, "modality")? = match c.modality {
            pal_core::Modality::Vision => PalModality::Vision,
            pal_core::Modality::Language => PalModality::Language,
        };
        *out_arg(count, "count")? = c.sequences.len();
        *out_arg(dim, "dim")? = c.dim;
        Ok(())
    })
}

/// Number of tokens in sequence `index`.
///
/// # Safety
/// `corpus` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_corpus_sequence_len(corpus: *const PalCorpus, index: usize, len: *mut usize) -> PalStatus {
    guard(|| {
        let c = &corpus.as_ref().ok_or_else(|| null("corpus"))?.0;
        let seq = c.sequences.get(index).ok_or_else(|| {
            Fail(PalStatus::InvalidArgument, format!("index {index} out of range ({} sequences)", c.sequences.len()))
        })?;
        *out_arg(len, "len")? = seq.len();
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_model_load(path: *const c_char, out: *mut *mut PalModel) -> PalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let state = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PalModel(state)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pal_model_load`] and not be freed yet; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pal_model_free(model: *mut PalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn side(state: &TrainState, modality: PalModality) -> &AnchorSet {
    match modality {
        PalModality::Vision => &state.anchors_v,
        PalModality::Language => &state.anchors_l,
    }
}

/// Anchor count and per-side token dimensions.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_model_info(
    model: *const PalModel,
    num_anchors: *mut usize,
    vision_dim: *mut usize,
    language_dim: *mut usize,
    tau_p: *mut f64,
) -> PalStatus {
    guard(|| {
        let s = &model.as_ref().ok_or_else(|| null("model"))?.0;
        *out_arg(num_anchors, "num_anchors")? = s.anchors_v.k();
        *out_arg(vision_dim, "vision_dim")? = s.anchors_v.dim();
        *out_arg(language_dim, "language_dim")? = s.anchors_l.dim();
        *out_arg(tau_p, "tau_p")? = s.config.tau_p;
        Ok(())
    })
}

fn encode_into(state: &TrainState, modality: PalModality, seq: &TokenSequence, out: &mut [f64]) -> Result<(), Fail> {
    let anchors = side(state, modality);
    if out.len() < anchors.k() {
        return Err(Fail(
            PalStatus::BufferTooSmall,
            format!("output holds {} values, need {}", out.len(), anchors.k()),
        ));
    }
    let f = forward_pooled(seq, anchors, state.config.tau_p, state.config.pooling)?;
    out[..anchors.k()].copy_from_slice(f.pooled.h());
    Ok(())
}

/// Encodes a row-major `num_tokens x dim` token matrix into the unit
/// vector `h` (length K) written to `out`. `modality` takes a
/// `PalModality` value.
///
/// # Safety
/// `tokens` must point at `num_tokens * dim` doubles and `out` at `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pal_model_encode(
    model: *const PalModel,
    modality: u32,
    tokens: *const f64,
    num_tokens: usize,
    dim: usize,
    out: *mut f64,
    out_len: usize,
) -> PalStatus {
    guard(|| {
        let s = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let modality = match modality {
            0 => PalModality::Vision,
            1 => PalModality::Language,
            m => return Err(Fail(PalStatus::InvalidArgument, format!("unknown modality {m}"))),
        };
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if num_tokens == 0 || dim == 0 {
            return Err(Fail(PalStatus::InvalidArgument, "empty token matrix".into()));
        }
        let n = num_tokens
            .checked_mul(dim)
            .ok_or_else(|| Fail(PalStatus::InvalidArgument, "token matrix size overflows".into()))?;
        let data = std::slice::from_raw_parts(tokens, n).to_vec();
        let seq = TokenSequence::new(0, Matrix::from_vec(num_tokens, dim, data), None)?;
        encode_into(s, modality, &seq, std::slice::from_raw_parts_mut(out, out_len))
    })
}

/// Encodes sequence `index` of `corpus` with the side matching the corpus modality.
///
/// # Safety
/// Handles must be live; `out` must point at `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pal_model_encode_corpus(
    model: *const PalModel,
    corpus: *const PalCorpus,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> PalStatus {
    guard(|| {
        let s = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let c = &corpus.as_ref().ok_or_else(|| null("corpus"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let seq = c.sequences.get(index).ok_or_else(|| {
            Fail(PalStatus::InvalidArgument, format!("index {index} out of range ({} sequences)", c.sequences.len()))
        })?;
        let modality = match c.modality {
            pal_core::Modality::Vision => PalModality::Vision,
            pal_core::Modality::Language => PalModality::Language,
        };
        encode_into(s, modality, seq, std::slice::from_raw_parts_mut(out, out_len))
    })
}

/// Runs the randomized gradient check with default sizes.
/// `passed` receives 1 or 0 and `worst_error` the largest relative error seen.
///
/// # Safety
/// Outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pal_gradcheck(
    instances: usize,
    seed: u64,
    passed: *mut i32,
    worst_error: *mut f64,
) -> PalStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        let worst_error = out_arg(worst_error, "worst_error")?;
        let cfg = GradcheckConfig { instances, seed, ..GradcheckConfig::default() };
        let report = run_gradcheck(&cfg)?;
        *passed = i32::from(report.passed());
        *worst_error = report.worst().max_rel_error;
        Ok(())
    })
}
