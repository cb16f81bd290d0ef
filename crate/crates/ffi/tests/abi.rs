use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use lossy_surprisal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lsl_last_error()).to_string_lossy().into_owned() }
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn ngram_train_score_free() {
    let text = c("a b\na b\na c\n");
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(lsl_ngram_train(text.as_ptr(), 2, &mut model), LslStatus::Ok);
        let mut out = [0.0f64; 4];
        let mut len = 0;
        let st = lsl_ngram_score(model, 1, c("a").as_ptr(), c("b").as_ptr(), out.as_mut_ptr(), 4, &mut len);
        assert_eq!(st, LslStatus::Ok);
        assert_eq!(len, 1);
        // p(b | a): count 2 of 3 after discounting, plus the interpolated share
        assert!(out[0] > 0.0 && out[0] < 1.0);
        // buffer too small reports the needed length
        let st = lsl_ngram_score(model, 1, c("").as_ptr(), c("a b").as_ptr(), out.as_mut_ptr(), 1, &mut len);
        assert_eq!(st, LslStatus::BufferTooSmall);
        assert_eq!(len, 2);
        lsl_ngram_free(model);
    }
}

#[test]
fn errors_carry_messages() {
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(lsl_ngram_train(ptr::null(), 2, &mut model), LslStatus::NullPointer);
        assert!(last_error().contains("text"));
        assert_eq!(lsl_ngram_train(c("a b").as_ptr(), 0, &mut model), LslStatus::InvalidArgument);
        assert!(last_error().contains("order"));
        let mut len = 0;
        let st = lsl_noise_kept_indices(c("ngram:1").as_ptr(), c("a").as_ptr(), 0, 5, 5, ptr::null_mut(), 0, &mut len);
        assert_eq!(st, LslStatus::Parse);
        assert_eq!(lsl_ngram_load(c("/nonexistent/model.tsv").as_ptr(), &mut model), LslStatus::Io);
        lsl_ngram_free(ptr::null_mut());
        lsl_fit_free(ptr::null_mut());
    }
}

#[test]
fn noise_indices() {
    let mut out = [0usize; 8];
    let mut len = 0;
    unsafe {
        let st = lsl_noise_kept_indices(c("ngram:3").as_ptr(), c("a").as_ptr(), 0, 6, 6, out.as_mut_ptr(), 8, &mut len);
        assert_eq!(st, LslStatus::Ok);
    }
    assert_eq!(&out[..len], &[4, 5]);
}

fn synthetic(n: usize) -> (Vec<f64>, Vec<f64>, Vec<u32>, Vec<u32>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut art = Vec::new();
    let mut sub = Vec::new();
    for i in 0..n {
        let x1 = ((i * 37) % 11) as f64 / 3.0;
        let x2 = ((i * 13) % 7) as f64;
        let a = (i % 4) as u32;
        let s = (i % 5) as u32;
        x.extend([1.0, x1, x2]);
        let noise = (((i * 7919) % 101) as f64 - 50.0) / 25.0;
        y.push(2.0 + 0.5 * x1 + 1.5 * x2 + a as f64 * 0.7 - s as f64 * 0.4 + noise);
        art.push(a);
        sub.push(s);
    }
    (x, y, art, sub)
}

#[test]
fn nested_fit_and_ppp() {
    let n = 60;
    let (x, y, art, sub) = synthetic(n);
    let (mut full, mut reduced) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        let st = lsl_lmm_fit_nested(x.as_ptr(), n, 3, 2, y.as_ptr(), art.as_ptr(), sub.as_ptr(), &mut full, &mut reduced);
        assert_eq!(st, LslStatus::Ok, "{}", last_error());
        let (mut sf, mut sr) = (LslFitSummary::default(), LslFitSummary::default());
        assert_eq!(lsl_fit_summary(full, &mut sf), LslStatus::Ok);
        assert_eq!(lsl_fit_summary(reduced, &mut sr), LslStatus::Ok);
        assert!(sf.loglik >= sr.loglik - 1e-8);
        assert_eq!(sf.n_rows, n);
        let mut ppp = 0.0;
        assert_eq!(lsl_ppp(full, reduced, &mut ppp), LslStatus::Ok);
        assert!((ppp - (sf.loglik - sr.loglik) / n as f64).abs() < 1e-12);
        let mut p = 0.0;
        assert_eq!(lsl_chisq_nested(sf.loglik, sr.loglik, 1, &mut p), LslStatus::Ok);
        assert!(p < 0.05);
        let mut beta = [0.0; 3];
        let mut len = 0;
        assert_eq!(lsl_fit_beta(full, beta.as_mut_ptr(), 3, &mut len), LslStatus::Ok);
        assert!((beta[2] - 1.5).abs() < 0.3, "{beta:?}");
        let mut res = vec![0.0; n];
        assert_eq!(lsl_fit_residuals(full, res.as_mut_ptr(), n, &mut len), LslStatus::Ok);
        assert_eq!(len, n);
        lsl_fit_free(full);
        lsl_fit_free(reduced);
    }
}

#[test]
fn rank_deficiency_is_numerical() {
    let n = 20;
    let (mut x, y, art, sub) = synthetic(n);
    for i in 0..n {
        x[i * 3 + 2] = 2.0 * x[i * 3 + 1];
    }
    let mut fit = ptr::null_mut();
    unsafe {
        let st = lsl_lmm_fit(x.as_ptr(), n, 3, y.as_ptr(), art.as_ptr(), sub.as_ptr(), &mut fit);
        assert_eq!(st, LslStatus::Numerical);
        assert!(last_error().contains("x2"));
    }
}

#[test]
fn permutation_through_abi() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let (mut d, mut p) = (0.0, 0.0);
    unsafe {
        assert_eq!(lsl_paired_permutation_test(a.as_ptr(), a.as_ptr(), 4, 99, 1, &mut d, &mut p), LslStatus::Ok);
    }
    assert_eq!((d, p), (0.0, 1.0));
}

/// Compiles a C program against the generated header and the static
/// library.
#[test]
fn c_program_links_against_header() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("liblossy_surprisal_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "lossy_surprisal.h"
int main(void) {
    LslNgramModel *m = NULL;
    if (lsl_ngram_train("x y\nx y\n", 2, &m) != LSL_STATUS_OK) return 1;
    double s[2]; size_t len = 0;
    if (lsl_ngram_score(m, 1, "x", "y", s, 2, &len) != LSL_STATUS_OK || len != 1) return 2;
    lsl_ngram_free(m);
    if (lsl_ngram_train(NULL, 2, &m) != LSL_STATUS_NULL_POINTER) return 3;
    if (strlen(lsl_last_error()) == 0) return 4;
    printf("%s %.6f\n", lsl_version(), s[0]);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg(format!("-I{include}"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(env!("CARGO_PKG_VERSION")));
}
