//! C ABI over the lossy-surprisal library.
//!
//! Every fallible function returns an [`LslStatus`]; on failure the message
//! is available from [`lsl_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Output arrays
//! follow one convention: the caller passes a buffer and its capacity, the
//! callee always writes the required length to `len` and fills the buffer
//! only when it is large enough (`LSL_STATUS_BUFFER_TOO_SMALL` otherwise).

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lossy_surprisal::corpus::WordKey;
use lossy_surprisal::lm::{NgramModel, Prefix};
use lossy_surprisal::noise::{NoiseKey, NoiseSpec};
use lossy_surprisal::regress::{fit_lmm, fit_nested, Design, FitOptions, FitResult, RowKey};
use lossy_surprisal::stats::{chisq_nested, paired_permutation_test};
use lossy_surprisal::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Trained or loaded n-gram model.
pub struct LslNgramModel(NgramModel);

/// Fitted mixed-effects model.
pub struct LslFit(FitResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LslStatus {
    match e {
        Error::Parse { .. } | Error::NoiseSpec(_) | Error::Json(_) => LslStatus::Parse,
        Error::Io { .. } => LslStatus::Io,
        Error::Singular | Error::NoConvergence { .. } | Error::RankDeficient(_) => LslStatus::Numerical,
        _ => LslStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (LslStatus, String)>) -> LslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LslStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LslStatus::Panic
        }
    }
}

fn lib<T>(r: lossy_surprisal::Result<T>) -> Result<T, (LslStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LslStatus, String) {
    (LslStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (LslStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (LslStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (LslStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T: Copy>(values: &[T], out: *mut T, cap: usize, len: *mut usize) -> Result<(), (LslStatus, String)> {
    if len.is_null() {
        return Err(null("len"));
    }
    *len = values.len();
    if values.len() > cap {
        return Err((
            LslStatus::BufferTooSmall,
            format!("need {} elements, capacity {cap}", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

/// Message of the last failure on this thread; valid until the next call
/// into the library from the same thread.
#[no_mangle]
pub extern "C" fn lsl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lsl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trains an n-gram model on `text`: one sentence per line, tokens
/// separated by whitespace.
///
/// # Safety
/// `text` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsl_ngram_train(text: *const c_char, order: usize, out: *mut *mut LslNgramModel) -> LslStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let sentences: Vec<Vec<String>> = text
            .lines()
            .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        let model = lib(NgramModel::train_sentences(&sentences, order))?;
        *out = Box::into_raw(Box::new(LslNgramModel(model)));
        Ok(())
    })
}

/// Loads a model written in the library's TSV format.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsl_ngram_load(path: *const c_char, out: *mut *mut LslNgramModel) -> LslStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = lib(NgramModel::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(LslNgramModel(model)));
        Ok(())
    })
}

/// Per-subword surprisals (nats) of the whitespace-separated `target`
/// after `<s>` (`bos != 0`) or `<b>`, followed by `context`.
///
/// # Safety
/// `model` must come from this library; strings must be NUL-terminated;
/// `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn lsl_ngram_score(
    model: *const LslNgramModel,
    bos: c_int,
    context: *const c_char,
    target: *const c_char,
    out: *mut f64,
    cap: usize,
    len: *mut usize,
) -> LslStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let context: Vec<String> = str_arg(context, "context")?.split_whitespace().map(String::from).collect();
        let target: Vec<String> = str_arg(target, "target")?.split_whitespace().map(String::from).collect();
        let prefix = if bos != 0 { Prefix::Bos } else { Prefix::Break };
        let s = m.0.score(prefix, &context, &target);
        write_out(&s, out, cap, len)
    })
}

/// # Safety
/// `model` must come from this library or be null; it must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsl_ngram_free(model: *mut LslNgramModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Indices of the context words kept by a noise specification such as
/// `"ngram:3"` or `"lpen:l=2,a=0.25,seed=7"`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn lsl_noise_kept_indices(
    spec: *const c_char,
    article_id: *const c_char,
    sent_n: usize,
    token_n: usize,
    context_len: usize,
    out: *mut usize,
    cap: usize,
    len: *mut usize,
) -> LslStatus {
    guard(|| {
        let spec: NoiseSpec = lib(str_arg(spec, "spec")?.parse())?;
        let key = NoiseKey {
            article_id: str_arg(article_id, "article_id")?,
            sent_n,
            token_n,
        };
        write_out(&spec.kept_indices(context_len, key), out, cap, len)
    })
}

unsafe fn design(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    article: *const u32,
    subject: *const u32,
) -> Result<Design, (LslStatus, String)> {
    let x = slice_arg(x, n * p, "x")?;
    let y = slice_arg(y, n, "y")?;
    let article = slice_arg(article, n, "article")?;
    let subject = slice_arg(subject, n, "subject")?;
    let a: Vec<String> = article.iter().map(|v| v.to_string()).collect();
    let s: Vec<String> = subject.iter().map(|v| v.to_string()).collect();
    let keys = (0..n)
        .map(|i| RowKey {
            subject_id: s[i].clone(),
            word: WordKey::new("row", 0, i),
        })
        .collect();
    let columns = (0..p).map(|j| format!("x{j}")).collect();
    lib(Design::from_parts(x.to_vec(), y.to_vec(), columns, &a, &s, keys))
}

/// ML fit of `y ~ X + (1 | article) + (1 | subject)`. `x` is row-major
/// `n x p` and should contain the intercept column.
///
/// # Safety
/// Arrays must hold `n * p`, `n`, `n` and `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsl_lmm_fit(
    x: *const f64,
    n: usize,
    p: usize,
    y: *const f64,
    article: *const u32,
    subject: *const u32,
    out: *mut *mut LslFit,
) -> LslStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = design(x, n, p, y, article, subject)?;
        let fit = lib(fit_lmm(&d, &FitOptions::default()))?;
        *out = Box::into_raw(Box::new(LslFit(fit)));
        Ok(())
    })
}

/// Fits the nested pair: the full model uses all `p` columns, the reduced
/// one the first `p_reduced`. The reduced fit seeds the full one, so the
/// full log-likelihood never falls below the reduced one.
///
/// # Safety
/// As for [`lsl_lmm_fit`]; both output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsl_lmm_fit_nested(
    x: *const f64,
    n: usize,
    p: usize,
    p_reduced: usize,
    y: *const f64,
    article: *const u32,
    subject: *const u32,
    out_full: *mut *mut LslFit,
    out_reduced: *mut *mut LslFit,
) -> LslStatus {
    guard(|| {
        if out_full.is_null() || out_reduced.is_null() {
            return Err(null("out"));
        }
        if p_reduced == 0 || p_reduced >= p {
            return Err((LslStatus::InvalidArgument, "need 0 < p_reduced < p".into()));
        }
        let full = design(x, n, p, y, article, subject)?;
        let xs = slice_arg(x, n * p, "x")?;
        let xr: Vec<f64> = (0..n).flat_map(|i| xs[i * p..i * p + p_reduced].iter().copied()).collect();
        let reduced = design(xr.as_ptr(), n, p_reduced, y, article, subject)?;
        let (fw, fo) = lib(fit_nested(&full, &reduced, &FitOptions::default()))?;
        *out_full = Box::into_raw(Box::new(LslFit(fw)));
        *out_reduced = Box::into_raw(Box::new(LslFit(fo)));
        Ok(())
    })
}

/// Scalar results of a fit: log-likelihood, residual variance and the two
/// random-intercept variances.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LslFitSummary {
    pub loglik: f64,
    pub sigma2: f64,
    pub var_article: f64,
    pub var_subject: f64,
    pub n_rows: usize,
    pub converged: c_int,
}

/// # Safety
/// `fit` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsl_fit_summary(fit: *const LslFit, out: *mut LslFitSummary) -> LslStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = LslFitSummary {
            loglik: f.loglik,
            sigma2: f.sigma2,
            var_article: f.var_article,
            var_subject: f.var_subject,
            n_rows: f.n_rows,
            converged: f.converged as c_int,
        };
        Ok(())
    })
}

/// # Safety
/// `fit` must come from this library; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn lsl_fit_beta(fit: *const LslFit, out: *mut f64, cap: usize, len: *mut usize) -> LslStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        write_out(&f.beta, out, cap, len)
    })
}

/// Residuals in input row order.
///
/// # Safety
/// `fit` must come from this library; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn lsl_fit_residuals(fit: *const LslFit, out: *mut f64, cap: usize, len: *mut usize) -> LslStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        write_out(&f.residuals, out, cap, len)
    })
}

/// # Safety
/// `fit` must come from this library or be null; it must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn lsl_fit_free(fit: *mut LslFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Per-row log-likelihood gain of `with` over `without`.
///
/// # Safety
/// Both fits must come from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsl_ppp(with: *const LslFit, without: *const LslFit, out: *mut f64) -> LslStatus {
    guard(|| {
        let w = &with.as_ref().ok_or_else(|| null("with"))?.0;
        let o = &without.as_ref().ok_or_else(|| null("without"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lib(lossy_surprisal::regress::ppp(w, o))?;
        Ok(())
    })
}

/// Paired sign-flip permutation test on `a - b`.
///
/// # Safety
/// `a` and `b` must hold `n` doubles; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsl_paired_permutation_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    n_perm: usize,
    seed: u64,
    mean_diff: *mut f64,
    p_value: *mut f64,
) -> LslStatus {
    guard(|| {
        let a = slice_arg(a, n, "a")?;
        let b = slice_arg(b, n, "b")?;
        if mean_diff.is_null() || p_value.is_null() {
            return Err(null("output"));
        }
        let r = lib(paired_permutation_test(a, b, n_perm, seed))?;
        *mean_diff = r.observed_mean_diff;
        *p_value = r.p_two_sided;
        Ok(())
    })
}

/// Chi-square upper-tail p for the statistic `2 (loglik_with - loglik_without)`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lsl_chisq_nested(loglik_with: f64, loglik_without: f64, df: u32, out: *mut f64) -> LslStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = lib(chisq_nested(loglik_with, loglik_without, df))?;
        Ok(())
    })
}
