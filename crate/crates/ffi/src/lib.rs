//! C interface to the sqlf toolkit.
//!
//! Every function returns an [`SqlfStatus`]; results come back through out
//! pointers. After a non-zero status, `sqlf_last_error` describes the
//! failure on the calling thread. Handles are opaque and must be released
//! with their `_free` function. Strings returned by the library are
//! released with `sqlf_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use sqlf::clf::{Classifier, GbtModel};
use sqlf::config::PipelineConfig;
use sqlf::io::Checkpoint;
use sqlf::metrics::{bleu, levenshtein};
use sqlf::pipeline::{run_pipeline, RunOptions, RunManifest};
use sqlf::text::{embed_batch, tokenize, EmbeddingTable, TokenizeOptions};
use sqlf::vae::VaeParams;

/// Status codes. 1–3 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqlfStatus {
    Ok = 0,
    /// Invalid argument or configuration.
    Usage = 1,
    /// Unreadable, malformed or inconsistent data.
    Data = 2,
    /// Non-finite values or a shape mismatch inside a computation.
    Numeric = 3,
    /// A required pointer was null or a string was not UTF-8.
    BadPointer = 4,
    /// The library panicked; the handle involved should be discarded.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Lib(sqlf::Error),
    Pointer(&'static str),
}

impl From<sqlf::Error> for Failure {
    fn from(e: sqlf::Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SqlfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SqlfStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            match e.exit_code() {
                1 => SqlfStatus::Usage,
                2 => SqlfStatus::Data,
                _ => SqlfStatus::Numeric,
            }
        }
        Ok(Err(Failure::Pointer(what))) => {
            set_error(what);
            SqlfStatus::BadPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            SqlfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Pointer(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Pointer(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Pointer(what))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sqlf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sqlf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn sqlf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn token_texts(query: &str, url_decode: bool) -> Result<Vec<String>, Failure> {
    let seq = tokenize(query, TokenizeOptions { url_decode })?;
    Ok(seq.content().iter().map(|t| t.text.clone()).collect())
}

/// Tokenizes `query` and returns the non-padding tokens joined by newlines.
///
/// # Safety
/// `query` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqlf_tokenize(query: *const c_char, url_decode: bool, out: *mut *mut c_char) -> SqlfStatus {
    guard(|| {
        let q = str_arg(query, "query")?;
        let out = out_arg(out, "out")?;
        *out = owned_string(token_texts(q, url_decode)?.join("\n"));
        Ok(())
    })
}

/// Token-level edit distance between two queries.
///
/// # Safety
/// `a` and `b` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqlf_token_levenshtein(a: *const c_char, b: *const c_char, out: *mut usize) -> SqlfStatus {
    guard(|| {
        let ta = token_texts(str_arg(a, "a")?, false)?;
        let tb = token_texts(str_arg(b, "b")?, false)?;
        *out_arg(out, "out")? = levenshtein(&ta, &tb);
        Ok(())
    })
}

/// Sentence BLEU (up to 4-grams) of `candidate` against `reference`, on
/// tokens.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqlf_token_bleu(reference: *const c_char, candidate: *const c_char, out: *mut f64) -> SqlfStatus {
    guard(|| {
        let r = token_texts(str_arg(reference, "reference")?, false)?;
        let c = token_texts(str_arg(candidate, "candidate")?, false)?;
        *out_arg(out, "out")? = bleu(&r, &c, 4)?;
        Ok(())
    })
}

/// Trained models of a finished run: embedding, VAE encoder and the final
/// boosted-tree classifier.
pub struct SqlfDetector {
    table: EmbeddingTable,
    vae: VaeParams,
    model: GbtModel,
    url_decode: bool,
}

fn load(dir: &Path, name: &str) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(&dir.join(name))?)
}

impl SqlfDetector {
    fn open(dir: &Path) -> Result<Self, Failure> {
        let manifest = RunManifest::load(dir)?;
        let url_decode = manifest.config["corpus"]["url_decode"].as_bool().unwrap_or(true);
        Ok(SqlfDetector {
            table: EmbeddingTable::from_checkpoint(&load(dir, "embedding.ckpt")?)?,
            vae: VaeParams::from_checkpoint(&load(dir, "vae.ckpt")?)?,
            model: GbtModel::from_checkpoint(&load(dir, "final_gbt.ckpt")?)?,
            url_decode,
        })
    }

    fn score(&self, queries: &[&str]) -> Result<Vec<f64>, Failure> {
        let opts = TokenizeOptions { url_decode: self.url_decode };
        let seqs = queries.iter().map(|q| tokenize(q, opts)).collect::<sqlf::Result<Vec<_>>>()?;
        let z = self.vae.encode_mean(&embed_batch(&seqs, &self.table))?;
        Ok(self.model.predict_proba(&z)?)
    }
}

/// Opens the run directory written by a completed pipeline.
///
/// # Safety
/// `run_dir` must be a NUL-terminated path; `out` must be writable. On
/// success `*out` owns a handle for `sqlf_detector_free`.
#[no_mangle]
pub unsafe extern "C" fn sqlf_detector_open(run_dir: *const c_char, out: *mut *mut SqlfDetector) -> SqlfStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SqlfDetector::open(&dir)?));
        Ok(())
    })
}

/// Probability that each of `n` queries is malicious.
///
/// # Safety
/// `detector` must come from `sqlf_detector_open`; `queries` must point to
/// `n` NUL-terminated strings and `out` to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sqlf_detector_score(
    detector: *const SqlfDetector,
    queries: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> SqlfStatus {
    guard(|| {
        let d = detector.as_ref().ok_or(Failure::Pointer("detector"))?;
        if n == 0 {
            return Ok(());
        }
        if queries.is_null() || out.is_null() {
            return Err(Failure::Pointer("queries/out"));
        }
        let texts = std::slice::from_raw_parts(queries, n)
            .iter()
            .map(|&q| str_arg(q, "query"))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = d.score(&texts)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&probs);
        Ok(())
    })
}

/// # Safety
/// `detector` must be null or a handle from `sqlf_detector_open` that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn sqlf_detector_free(detector: *mut SqlfDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Runs the whole pipeline into `out_dir`. `profile` is `default`, `desk`
/// or `tiny`; `config_toml` (nullable) is layered over it. Completed stages
/// of an earlier run with the same settings are reused.
///
/// # Safety
/// `profile` and `out_dir` must be NUL-terminated strings; `config_toml`
/// may be null.
#[no_mangle]
pub unsafe extern "C" fn sqlf_run_pipeline(
    profile: *const c_char,
    config_toml: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> SqlfStatus {
    guard(|| {
        let base = match str_arg(profile, "profile")? {
            "default" => PipelineConfig::default(),
            "desk" => PipelineConfig::desk(),
            "tiny" => PipelineConfig::tiny(),
            other => return Err(sqlf::Error::Config(format!("unknown profile {other:?}")).into()),
        };
        let mut config = if config_toml.is_null() {
            base
        } else {
            PipelineConfig::from_toml(str_arg(config_toml, "config_toml")?, &base)?
        };
        config.seed = seed;
        config.paths.out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        run_pipeline(&config, &RunOptions { resume: true, until: None })?;
        Ok(())
    })
}
