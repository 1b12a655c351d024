//! C ABI for the metast library.
//!
//! Every function returns a [`MetastStatus`]; on failure the message is
//! available from [`metast_last_error`] on the same thread. Objects are
//! handed out as opaque pointers and released with the matching `_free`.
//! Output buffers follow one convention: the caller passes a capacity, the
//! library always writes the required length to `out_len`, and returns
//! `METAST_STATUS_BUFFER_TOO_SMALL` without writing data when it does not
//! fit.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use metast::experiment::run_experiment;
use metast::metrics::{bleu4, greedy_decode, wer};
use metast::model::{load_checkpoint, ModelConfig};
use metast::tasks::{FrameSeq, Modality, Source};
use metast::vocab::Vocabulary;
use metast::{Error, ModelParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetastStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    Config = 6,
    Shape = 7,
    Contract = 8,
    NonFinite = 9,
    Checkpoint = 10,
    OutOfRange = 11,
    Failed = 12,
    Panic = 13,
}

/// Vocabulary handle.
pub struct MetastVocab(Vocabulary);

/// Trained model handle (parameters plus architecture).
pub struct MetastModel {
    params: ModelParams<f32>,
    config: ModelConfig,
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
    Small,
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn core_status(e: &Error) -> MetastStatus {
    match e {
        Error::Io { .. } => MetastStatus::Io,
        Error::Parse { .. } => MetastStatus::Parse,
        Error::Config { .. } => MetastStatus::Config,
        Error::Shape(_) | Error::Modality(_) => MetastStatus::Shape,
        Error::Contract(_) | Error::EmptyBatch | Error::Empty(_) => MetastStatus::Contract,
        Error::NonFinite(_) => MetastStatus::NonFinite,
        Error::Checkpoint(_) => MetastStatus::Checkpoint,
        Error::IdOutOfRange { .. } => MetastStatus::OutOfRange,
        _ => MetastStatus::Failed,
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> MetastStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MetastStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            core_status(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("`{what}` is null"));
            MetastStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("`{what}` is not valid UTF-8"));
            MetastStatus::InvalidUtf8
        }
        Ok(Err(Fail::Small)) => {
            set_error("output buffer too small; see out_len".into());
            MetastStatus::BufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MetastStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn str_array(p: *const *const c_char, n: usize, what: &'static str) -> Result<Vec<String>, Fail> {
    slice_arg(p, n, what)?.iter().map(|&s| str_arg(s, what).map(str::to_owned)).collect()
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn write_ids(ids: &[usize], out: *mut usize, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    *out_arg(out_len, "out_len")? = ids.len();
    if ids.len() > cap {
        return Err(Fail::Small);
    }
    if !ids.is_empty() {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        std::ptr::copy_nonoverlapping(ids.as_ptr(), out, ids.len());
    }
    Ok(())
}

/// Writes `s` NUL-terminated; `out_len` excludes the terminator.
unsafe fn write_str(s: &str, out: *mut c_char, cap: usize, out_len: *mut usize) -> Result<(), Fail> {
    *out_arg(out_len, "out_len")? = s.len();
    if s.len() + 1 > cap {
        return Err(Fail::Small);
    }
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), out, s.len());
    *out.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next metast call on the same thread.
#[no_mangle]
pub extern "C" fn metast_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn metast_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a universal vocabulary from `n` corpus strings.
///
/// # Safety
/// `corpus` must point to `n` valid NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_build(corpus: *const *const c_char, n: usize, out: *mut *mut MetastVocab) -> MetastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let texts = str_array(corpus, n, "corpus")?;
        *out = Box::into_raw(Box::new(MetastVocab(Vocabulary::build_universal(&[texts]))));
        Ok(())
    })
}

/// Loads a vocabulary file written by `metast_vocab_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_load(path: *const c_char, out: *mut *mut MetastVocab) -> MetastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let v = Vocabulary::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MetastVocab(v)));
        Ok(())
    })
}

/// # Safety
/// `vocab` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_save(vocab: *const MetastVocab, path: *const c_char) -> MetastStatus {
    guard(|| {
        let v = ref_arg(vocab, "vocab")?;
        v.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of ids, specials included; 0 for NULL.
///
/// # Safety
/// `vocab` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_len(vocab: *const MetastVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `vocab` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_free(vocab: *mut MetastVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Encodes `text`; with `wrap` the ids are framed by BOS/EOS.
///
/// # Safety
/// Pointers must be valid; `out` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_encode(
    vocab: *const MetastVocab,
    text: *const c_char,
    wrap: bool,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> MetastStatus {
    guard(|| {
        let v = ref_arg(vocab, "vocab")?;
        let ids = v.0.encode(str_arg(text, "text")?, wrap);
        write_ids(&ids, out, cap, out_len)
    })
}

/// Decodes `n` ids into a NUL-terminated string.
///
/// # Safety
/// `ids` must hold `n` values; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn metast_vocab_decode(
    vocab: *const MetastVocab,
    ids: *const usize,
    n: usize,
    out: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> MetastStatus {
    guard(|| {
        let v = ref_arg(vocab, "vocab")?;
        let text = v.0.decode(slice_arg(ids, n, "ids")?)?;
        write_str(&text, out, cap, out_len)
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn metast_model_load(dir: *const c_char, out: *mut *mut MetastModel) -> MetastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (params, manifest) = load_checkpoint(&PathBuf::from(str_arg(dir, "dir")?), None)?;
        *out = Box::into_raw(Box::new(MetastModel { params, config: manifest.config }));
        Ok(())
    })
}

/// Scalar parameter count; 0 for NULL.
///
/// # Safety
/// `model` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn metast_model_num_params(model: *const MetastModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_scalars())
}

/// # Safety
/// `model` must be NULL or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn metast_model_free(model: *mut MetastModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn decode_into(
    model: *const MetastModel,
    source: Source,
    modality: Modality,
    max_len: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> Result<(), Fail> {
    let m = ref_arg(model, "model")?;
    let ids = greedy_decode(&m.params, &m.config, &source, modality, max_len)?;
    write_ids(&ids, out, cap, out_len)
}

/// Greedy decode of a token sequence (no BOS/EOS in input or output).
///
/// # Safety
/// `ids` must hold `n` values; `out` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn metast_model_translate_tokens(
    model: *const MetastModel,
    ids: *const usize,
    n: usize,
    max_len: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> MetastStatus {
    guard(|| {
        let src = Source::Tokens(slice_arg(ids, n, "ids")?.to_vec());
        decode_into(model, src, Modality::Tokens, max_len, out, cap, out_len)
    })
}

/// Greedy decode of a row-major `frames × dim` feature matrix.
///
/// # Safety
/// `data` must hold `frames * dim` floats; `out` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn metast_model_translate_frames(
    model: *const MetastModel,
    data: *const f32,
    frames: usize,
    dim: usize,
    max_len: usize,
    out: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> MetastStatus {
    guard(|| {
        let n = frames.checked_mul(dim).ok_or(Fail::Core(Error::Shape("frames * dim overflows".into())))?;
        let seq = FrameSeq::new(frames, dim, slice_arg(data, n, "data")?.to_vec())?;
        decode_into(model, Source::Frames(seq), Modality::Frames, max_len, out, cap, out_len)
    })
}

/// Corpus BLEU-4 (0..100) of `n` hypothesis/reference pairs.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn metast_bleu(hyps: *const *const c_char, refs: *const *const c_char, n: usize, out: *mut f64) -> MetastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = bleu4(&str_array(hyps, n, "hyps")?, &str_array(refs, n, "refs")?)?.bleu;
        Ok(())
    })
}

/// Corpus word error rate of `n` hypothesis/reference pairs.
///
/// # Safety
/// `hyps` and `refs` must each point to `n` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn metast_wer(hyps: *const *const c_char, refs: *const *const c_char, n: usize, out: *mut f64) -> MetastStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = wer(&str_array(hyps, n, "hyps")?, &str_array(refs, n, "refs")?)?;
        Ok(())
    })
}

/// Runs the experiment described by a TOML config file and writes its
/// artifacts; same as `metast run`.
///
/// # Safety
/// `config_path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn metast_run_experiment(config_path: *const c_char) -> MetastStatus {
    guard(|| {
        run_experiment(&PathBuf::from(str_arg(config_path, "config_path")?))?;
        Ok(())
    })
}

/// Finite-difference check of every primitive (`trials` inputs each) and
/// of the model loss; writes the worst relative error.
///
/// # Safety
/// `out_max_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn metast_gradcheck(trials: usize, seed: u64, out_max_error: *mut f64) -> MetastStatus {
    guard(|| {
        let out = out_arg(out_max_error, "out_max_error")?;
        let results = metast::gradcheck::run_suite(trials, seed)?;
        *out = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
        Ok(())
    })
}
