use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use sqlf_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sqlf_last_error()) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_is_static_text() {
    let v = unsafe { CStr::from_ptr(sqlf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tokenize_returns_owned_string() {
    let q = c("SELECT%20*%20FROM t");
    let mut out: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { sqlf_tokenize(q.as_ptr(), true, &mut out) }, SqlfStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    unsafe { sqlf_string_free(out) };
    assert_eq!(text.lines().count(), 4, "{text}");
    assert_eq!(last_error(), "");
}

#[test]
fn token_metrics() {
    let (a, b) = (c("SELECT a FROM t"), c("SELECT b FROM t"));
    let mut d = 99usize;
    assert_eq!(unsafe { sqlf_token_levenshtein(a.as_ptr(), b.as_ptr(), &mut d) }, SqlfStatus::Ok);
    assert_eq!(d, 1);
    let mut s = 0.0;
    assert_eq!(unsafe { sqlf_token_bleu(a.as_ptr(), a.as_ptr(), &mut s) }, SqlfStatus::Ok);
    assert_eq!(s, 1.0);
}

#[test]
fn null_pointers_are_reported() {
    let mut out: *mut c_char = ptr::null_mut();
    assert_eq!(unsafe { sqlf_tokenize(ptr::null(), false, &mut out) }, SqlfStatus::BadPointer);
    assert!(last_error().contains("query"));
    let q = c("x");
    assert_eq!(unsafe { sqlf_tokenize(q.as_ptr(), false, ptr::null_mut()) }, SqlfStatus::BadPointer);
    assert_eq!(unsafe { sqlf_detector_score(ptr::null(), ptr::null(), 1, ptr::null_mut()) }, SqlfStatus::BadPointer);
    unsafe {
        sqlf_string_free(ptr::null_mut());
        sqlf_detector_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().to_str().unwrap());
    let bad = c("huge");
    assert_eq!(unsafe { sqlf_run_pipeline(bad.as_ptr(), ptr::null(), 0, out.as_ptr()) }, SqlfStatus::Usage);
    assert!(last_error().contains("huge"));
    let tiny = c("tiny");
    let typo = c("[vae]\nbogus = 1\n");
    assert_eq!(unsafe { sqlf_run_pipeline(tiny.as_ptr(), typo.as_ptr(), 0, out.as_ptr()) }, SqlfStatus::Usage);

    let mut det: *mut SqlfDetector = ptr::null_mut();
    let missing = c(dir.path().join("nothing").to_str().unwrap());
    assert_eq!(unsafe { sqlf_detector_open(missing.as_ptr(), &mut det) }, SqlfStatus::Data);
    assert!(det.is_null());
}

#[test]
fn tiny_run_scores_queries() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().to_str().unwrap());
    let tiny = c("tiny");
    let cfg = c("[corpus]\ngenerate = 200\n");
    assert_eq!(unsafe { sqlf_run_pipeline(tiny.as_ptr(), cfg.as_ptr(), 9, out.as_ptr()) }, SqlfStatus::Ok, "{}", last_error());

    let mut det: *mut SqlfDetector = ptr::null_mut();
    assert_eq!(unsafe { sqlf_detector_open(out.as_ptr(), &mut det) }, SqlfStatus::Ok, "{}", last_error());
    let qs = [c("SELECT name FROM users WHERE id = 4"), c("' OR 1=1-- -")];
    let ptrs: Vec<*const c_char> = qs.iter().map(|q| q.as_ptr()).collect();
    let mut probs = [f64::NAN; 2];
    assert_eq!(unsafe { sqlf_detector_score(det, ptrs.as_ptr(), 2, probs.as_mut_ptr()) }, SqlfStatus::Ok);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)), "{probs:?}");
    let mut again = [f64::NAN; 2];
    assert_eq!(unsafe { sqlf_detector_score(det, ptrs.as_ptr(), 2, again.as_mut_ptr()) }, SqlfStatus::Ok);
    assert_eq!(probs, again);
    unsafe { sqlf_detector_free(det) };
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sqlf.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sqlf_last_error",
        "sqlf_version",
        "sqlf_string_free",
        "sqlf_tokenize",
        "sqlf_token_levenshtein",
        "sqlf_token_bleu",
        "sqlf_detector_open",
        "sqlf_detector_score",
        "sqlf_detector_free",
        "sqlf_run_pipeline",
        "SQLF_STATUS_BAD_POINTER",
        "typedef struct SqlfDetector SqlfDetector",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // syntax check with the system compiler when one is present
    if let Ok(o) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99"]).arg(&header).output() {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
}
