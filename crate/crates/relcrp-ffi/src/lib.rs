//! C ABI over the relcrp library: opaque handles, integer status codes,
//! and a thread-local last-error message. The matching declarations live
//! in `include/relcrp.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use relcrp::corpus::{ingest_files, ingest_heldout, Corpus, IngestConfig};
use relcrp::error::Error;
use relcrp::stats::{load_checkpoint, save_checkpoint, Hyperparams, ModelState};

pub const RELCRP_OK: i32 = 0;
pub const RELCRP_ERR_RUNTIME: i32 = 1;
pub const RELCRP_ERR_CONFIG: i32 = 2;
pub const RELCRP_ERR_NULL: i32 = 3;
pub const RELCRP_ERR_UTF8: i32 = 4;
pub const RELCRP_ERR_PANIC: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let safe = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = safe);
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::UnknownUser(_) | Error::Json(_) => {
            RELCRP_ERR_CONFIG
        }
        _ => RELCRP_ERR_RUNTIME,
    }
}

fn fail(e: Error) -> i32 {
    let code = code_for(&e);
    set_error(&e.to_string());
    code
}

/// Copies the last error message on this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn relcrp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, i32> {
    if p.is_null() {
        set_error("null pointer argument");
        return Err(RELCRP_ERR_NULL);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        RELCRP_ERR_UTF8
    })
}

fn guarded<F: FnOnce() -> i32>(f: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            RELCRP_ERR_PANIC
        }
    }
}

/// Opaque corpus handle.
pub struct RelcrpCorpus(Corpus);
/// Opaque model handle.
pub struct RelcrpModel(ModelState);

/// Loads a post stream + user table into a corpus handle.
///
/// # Safety
/// Paths must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relcrp_corpus_load(
    posts_path: *const c_char,
    users_path: *const c_char,
    epoch_length: i64,
    out: *mut *mut RelcrpCorpus,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            set_error("null output handle");
            return RELCRP_ERR_NULL;
        }
        let posts = match cstr(posts_path) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let users = match cstr(users_path) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let config = IngestConfig {
            epoch_length,
            ..Default::default()
        };
        match ingest_files(Path::new(posts), Path::new(users), &config) {
            Ok(corpus) => {
                *out = Box::into_raw(Box::new(RelcrpCorpus(corpus)));
                RELCRP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of posts in the corpus, or 0 for a null handle.
///
/// # Safety
/// `corpus` must be a live handle from `relcrp_corpus_load` or null.
#[no_mangle]
pub unsafe extern "C" fn relcrp_corpus_posts(corpus: *const RelcrpCorpus) -> u64 {
    if corpus.is_null() {
        return 0;
    }
    (*corpus).0.posts.len() as u64
}

/// Frees a corpus handle (null is a no-op).
///
/// # Safety
/// `corpus` must be unused after this call.
#[no_mangle]
pub unsafe extern "C" fn relcrp_corpus_free(corpus: *mut RelcrpCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    #[serde(default)]
    hyper: Hyperparams,
    #[serde(default = "default_mode")]
    mode: String,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_sweeps")]
    sweeps: usize,
    #[serde(default = "default_workers")]
    workers: usize,
    #[serde(default)]
    seed: u64,
}

fn default_mode() -> String {
    "sequential".into()
}
fn default_batch() -> usize {
    35000
}
fn default_sweeps() -> usize {
    100
}
fn default_workers() -> usize {
    4
}

/// Fits a model to `corpus` according to a JSON config
/// (`{"hyper": {...}, "mode": "sequential"|"parallel", "batch": n,
/// "sweeps": n, "workers": n, "seed": n}`, all fields optional).
///
/// # Safety
/// `corpus` must be a live handle; `config_json` a valid C string;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relcrp_fit(
    corpus: *const RelcrpCorpus,
    config_json: *const c_char,
    out: *mut *mut RelcrpModel,
) -> i32 {
    guarded(|| {
        if corpus.is_null() || out.is_null() {
            set_error("null handle argument");
            return RELCRP_ERR_NULL;
        }
        let json = match cstr(config_json) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let config: FitConfig = match serde_json::from_str(json) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("bad fit config: {e}"));
                return RELCRP_ERR_CONFIG;
            }
        };
        let corpus = &(*corpus).0;
        let fitted = match config.mode.as_str() {
            "sequential" => relcrp::sampler::fit_sequential(
                corpus,
                config.hyper.clone(),
                config.batch,
                config.sweeps,
                config.seed,
            ),
            "parallel" => relcrp::parallel::fit_parallel(
                corpus,
                config.hyper.clone(),
                config.workers,
                config.batch,
                config.sweeps,
                config.seed,
            )
            .map(Into::into),
            other => {
                set_error(&format!("unknown mode `{other}`"));
                return RELCRP_ERR_CONFIG;
            }
        };
        match fitted {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(RelcrpModel(outcome.state)));
                RELCRP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the model as a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn relcrp_model_save(model: *const RelcrpModel, path: *const c_char) -> i32 {
    guarded(|| {
        if model.is_null() {
            set_error("null model handle");
            return RELCRP_ERR_NULL;
        }
        let path = match cstr(path) {
            Ok(s) => s,
            Err(c) => return c,
        };
        match save_checkpoint(&(*model).0, Path::new(path)) {
            Ok(()) => RELCRP_OK,
            Err(e) => fail(e),
        }
    })
}

/// Loads a JSON checkpoint into a model handle.
///
/// # Safety
/// `path` must be a valid C string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relcrp_model_load(path: *const c_char, out: *mut *mut RelcrpModel) -> i32 {
    guarded(|| {
        if out.is_null() {
            set_error("null output handle");
            return RELCRP_ERR_NULL;
        }
        let path = match cstr(path) {
            Ok(s) => s,
            Err(c) => return c,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(state) => {
                *out = Box::into_raw(Box::new(RelcrpModel(state)));
                RELCRP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of live topics, or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn relcrp_model_num_topics(model: *const RelcrpModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).0.topics.live_count() as u64
}

/// Frees a model handle (null is a no-op).
///
/// # Safety
/// `model` must be unused after this call.
#[no_mangle]
pub unsafe extern "C" fn relcrp_model_free(model: *mut RelcrpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Held-out perplexity of `heldout_path` (mapped through the training
/// corpus vocabulary) under `model`; written to `out`.
///
/// # Safety
/// `model` and `corpus` must be live handles; `heldout_path` a valid C
/// string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relcrp_perplexity(
    model: *const RelcrpModel,
    corpus: *const RelcrpCorpus,
    heldout_path: *const c_char,
    out: *mut f64,
) -> i32 {
    guarded(|| {
        if model.is_null() || corpus.is_null() || out.is_null() {
            set_error("null handle argument");
            return RELCRP_ERR_NULL;
        }
        let path = match cstr(heldout_path) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let train = &(*corpus).0;
        let config = IngestConfig::default();
        let heldout = match File::open(path)
            .map_err(Error::from)
            .and_then(|f| ingest_heldout(BufReader::new(f), train, &config))
        {
            Ok(h) => h,
            Err(e) => return fail(e),
        };
        match relcrp::eval::perplexity(&(*model).0, train, &heldout.posts) {
            Ok(report) => {
                *out = report.perplexity;
                RELCRP_OK
            }
            Err(e) => fail(e),
        }
    })
}
