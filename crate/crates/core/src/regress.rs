//! Gaze-duration regression with crossed random intercepts for article and
//! subject, fitted by maximum likelihood.
//!
//! The model is `y = X beta + Z_a b_a + Z_s b_s + e` with
//! `b_a ~ N(0, ra sigma2 I)`, `b_s ~ N(0, rs sigma2 I)` and
//! `e ~ N(0, sigma2 I)`. For fixed variance ratios `(ra, rs)` the fixed
//! effects, spherical random effects and `sigma2` have closed forms: with
//! `L = diag(sqrt(ra), .., sqrt(rs), ..)` the penalized least-squares problem
//!
//! ```text
//! min_{u, beta} |y - X beta - Z L u|^2 + |u|^2
//! ```
//!
//! is solved through its normal equations, giving the penalized residual
//! sum of squares `r2` and the profiled deviance
//!
//! ```text
//! -2 loglik = log det(L Z'Z L + I) + n (1 + log(2 pi r2 / n))
//! ```
//!
//! which only depends on the cross-products `Z'Z`, `Z'X`, `X'X`, `Z'y`,
//! `X'y` and `y'y`. The two ratios are optimized on the log scale.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{word_frequency, FixationRecord, FrequencyModel, Stimulus, WordKey};
use crate::error::{Error, Result};
use crate::surprisal::SurprisalTable;

/// Identifies one observation: a subject reading a word.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub subject_id: String,
    pub word: WordKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub key: RowKey,
    pub gd: f64,
    pub surprisal: f64,
    pub surprisal_prev_1: f64,
    pub surprisal_prev_2: f64,
    pub freq: f64,
    pub length: f64,
    pub freq_prev_1: f64,
    pub length_prev_1: f64,
    pub screen_n: f64,
    pub line_n: f64,
    pub segment_n: f64,
    pub article_id: String,
    pub subject_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowOptions {
    /// Enter frequency as its natural log.
    pub log_freq: bool,
}

impl Default for RowOptions {
    fn default() -> Self {
        RowOptions { log_freq: true }
    }
}

/// Joins fixations with word covariates and surprisals. Rows whose word
/// lacks two preceding words in its article's presentation order are
/// dropped.
pub fn build_rows(
    stimulus: &Stimulus,
    fixations: &[FixationRecord],
    table: &SurprisalTable,
    fm: &FrequencyModel,
    opts: RowOptions,
) -> Result<Vec<RegressionRow>> {
    let mut position: HashMap<WordKey, (usize, usize)> = HashMap::new();
    let mut sequences = Vec::new();
    for (ai, article) in stimulus.articles.iter().enumerate() {
        let seq: Vec<WordKey> = article
            .sentences
            .iter()
            .flat_map(|s| {
                s.words
                    .iter()
                    .map(move |w| WordKey::new(article.article_id.clone(), s.sent_n, w.token_n))
            })
            .collect();
        for (i, k) in seq.iter().enumerate() {
            position.insert(k.clone(), (ai, i));
        }
        sequences.push(seq);
    }
    let freq = |k: &WordKey| -> f64 {
        let f = word_frequency(stimulus.word(k).expect("key from stimulus"), fm);
        if opts.log_freq {
            f.ln()
        } else {
            f
        }
    };
    let surp = |k: &WordKey| -> Result<f64> {
        table
            .get(k)
            .map(|e| e.word_surprisal)
            .ok_or_else(|| Error::invalid(format!("surprisal table {} lacks {k}", table.config_id)))
    };
    let mut rows = Vec::with_capacity(fixations.len());
    for rec in fixations {
        let key = rec.word_key();
        let &(ai, i) = position
            .get(&key)
            .ok_or_else(|| Error::invalid(format!("fixation on unknown word {key}")))?;
        if i < 2 {
            continue;
        }
        let prev1 = &sequences[ai][i - 1];
        let prev2 = &sequences[ai][i - 2];
        let word = stimulus.word(&key).unwrap();
        let word_prev = stimulus.word(prev1).unwrap();
        rows.push(RegressionRow {
            key: RowKey {
                subject_id: rec.subject_id.clone(),
                word: key.clone(),
            },
            gd: rec.gaze_duration_ms,
            surprisal: surp(&key)?,
            surprisal_prev_1: surp(prev1)?,
            surprisal_prev_2: surp(prev2)?,
            freq: freq(&key),
            length: word.char_length as f64,
            freq_prev_1: freq(prev1),
            length_prev_1: word_prev.char_length as f64,
            screen_n: word.screen_n as f64,
            line_n: word.line_n as f64,
            segment_n: word.segment_n as f64,
            article_id: rec.article_id.clone(),
            subject_id: rec.subject_id.clone(),
        });
    }
    Ok(rows)
}

pub const BASE_COLUMNS: [&str; 10] = [
    "(Intercept)",
    "screenN",
    "lineN",
    "segmentN",
    "freq",
    "length",
    "freq:length",
    "freq_prev_1",
    "length_prev_1",
    "freq_prev_1:length_prev_1",
];

pub const SURPRISAL_COLUMNS: [&str; 3] = ["surprisal", "surprisal_prev_1", "surprisal_prev_2"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    /// z-standardize continuous predictors (interactions are formed from the
    /// standardized factors).
    pub standardize: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        DesignOptions { standardize: true }
    }
}

/// Fixed-effects matrix, response and grouping indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    /// Row-major `n x p`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub columns: Vec<String>,
    pub article: Vec<usize>,
    pub subject: Vec<usize>,
    pub article_levels: Vec<String>,
    pub subject_levels: Vec<String>,
    pub keys: Vec<RowKey>,
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    for x in v.iter_mut() {
        *x -= mean;
        if sd > 0.0 {
            *x /= sd;
        }
    }
}

fn levels<'a>(labels: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<String, usize>) {
    let uniq: BTreeMap<&str, ()> = labels.map(|l| (l, ())).collect();
    let names: Vec<String> = uniq.keys().map(|s| s.to_string()).collect();
    let index = names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    (names, index)
}

impl Design {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.p();
        &self.x[i * p..(i + 1) * p]
    }

    /// Assembles a design from raw parts; labels are mapped to sorted level
    /// indices.
    pub fn from_parts(
        x: Vec<f64>,
        y: Vec<f64>,
        columns: Vec<String>,
        article_labels: &[String],
        subject_labels: &[String],
        keys: Vec<RowKey>,
    ) -> Result<Self> {
        let n = y.len();
        let p = columns.len();
        if x.len() != n * p || article_labels.len() != n || subject_labels.len() != n || keys.len() != n {
            return Err(Error::invalid("design parts have inconsistent lengths"));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("design contains non-finite values"));
        }
        let (article_levels, ai) = levels(article_labels.iter().map(String::as_str));
        let (subject_levels, si) = levels(subject_labels.iter().map(String::as_str));
        let design = Design {
            x,
            y,
            columns,
            article: article_labels.iter().map(|l| ai[l]).collect(),
            subject: subject_labels.iter().map(|l| si[l]).collect(),
            article_levels,
            subject_levels,
            keys,
        };
        design.check_rank()?;
        Ok(design)
    }

    /// Modified Gram-Schmidt over the columns in order; a column whose
    /// remainder is negligible relative to its own norm depends on the
    /// earlier ones.
    fn check_rank(&self) -> Result<()> {
        let (n, p) = (self.n(), self.p());
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut dependent = Vec::new();
        for j in 0..p {
            let mut v: Vec<f64> = (0..n).map(|i| self.x[i * p + j]).collect();
            let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= d * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm0 == 0.0 || norm <= 1e-9 * norm0 {
                dependent.push(self.columns[j].clone());
            } else {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        if dependent.is_empty() {
            Ok(())
        } else {
            Err(Error::RankDeficient(dependent))
        }
    }

    /// Returns a copy with column `j` multiplied by `factor`.
    pub fn scale_column(&self, j: usize, factor: f64) -> Design {
        let mut d = self.clone();
        let p = d.p();
        for i in 0..d.n() {
            d.x[i * p + j] *= factor;
        }
        d
    }
}

/// Builds the fixed-effects design; the surprisal block is appended iff
/// `with_surprisal`. Both variants use the same rows.
pub fn build_design(rows: &[RegressionRow], with_surprisal: bool, opts: DesignOptions) -> Result<Design> {
    if rows.is_empty() {
        return Err(Error::invalid("no regression rows"));
    }
    let col = |f: fn(&RegressionRow) -> f64| -> Vec<f64> {
        let mut v: Vec<f64> = rows.iter().map(f).collect();
        if opts.standardize {
            standardize(&mut v);
        }
        v
    };
    let screen = col(|r| r.screen_n);
    let line = col(|r| r.line_n);
    let segment = col(|r| r.segment_n);
    let freq = col(|r| r.freq);
    let length = col(|r| r.length);
    let freq1 = col(|r| r.freq_prev_1);
    let length1 = col(|r| r.length_prev_1);
    let mut cols: Vec<Vec<f64>> = vec![
        vec![1.0; rows.len()],
        screen,
        line,
        segment,
        freq.clone(),
        length.clone(),
        freq.iter().zip(&length).map(|(a, b)| a * b).collect(),
        freq1.clone(),
        length1.clone(),
        freq1.iter().zip(&length1).map(|(a, b)| a * b).collect(),
    ];
    let mut names: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    if with_surprisal {
        cols.push(col(|r| r.surprisal));
        cols.push(col(|r| r.surprisal_prev_1));
        cols.push(col(|r| r.surprisal_prev_2));
        names.extend(SURPRISAL_COLUMNS.iter().map(|s| s.to_string()));
    }
    let p = cols.len();
    let mut x = Vec::with_capacity(rows.len() * p);
    for i in 0..rows.len() {
        for c in &cols {
            x.push(c[i]);
        }
    }
    let articles: Vec<String> = rows.iter().map(|r| r.article_id.clone()).collect();
    let subjects: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
    Design::from_parts(
        x,
        rows.iter().map(|r| r.gd).collect(),
        names,
        &articles,
        &subjects,
        rows.iter().map(|r| r.key.clone()).collect(),
    )
}

/// Sufficient statistics for evaluating the profiled deviance.
#[derive(Debug, Clone)]
pub struct CrossProducts {
    n: usize,
    qa: usize,
    q: usize,
    p: usize,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    xtx: DMatrix<f64>,
    zty: DVector<f64>,
    xty: DVector<f64>,
    yty: f64,
}

/// Solution of the penalized least-squares problem at fixed ratios.
#[derive(Debug, Clone)]
pub struct PlsSolution {
    pub beta: Vec<f64>,
    /// Random effects on the data scale: articles first, then subjects.
    pub b: Vec<f64>,
    pub pen_rss: f64,
    pub logdet: f64,
    pub deviance: f64,
}

impl CrossProducts {
    pub fn new(d: &Design) -> Self {
        let (n, p) = (d.n(), d.p());
        let qa = d.article_levels.len();
        let q = qa + d.subject_levels.len();
        let mut ztz = DMatrix::zeros(q, q);
        let mut ztx = DMatrix::zeros(q, p);
        let mut xtx = DMatrix::zeros(p, p);
        let mut zty = DVector::zeros(q);
        let mut xty = DVector::zeros(p);
        let mut yty = 0.0;
        for i in 0..n {
            let a = d.article[i];
            let s = qa + d.subject[i];
            let row = d.row(i);
            let y = d.y[i];
            ztz[(a, a)] += 1.0;
            ztz[(s, s)] += 1.0;
            ztz[(a, s)] += 1.0;
            ztz[(s, a)] += 1.0;
            for j in 0..p {
                ztx[(a, j)] += row[j];
                ztx[(s, j)] += row[j];
                xty[j] += row[j] * y;
                for k in 0..=j {
                    xtx[(j, k)] += row[j] * row[k];
                }
            }
            zty[a] += y;
            zty[s] += y;
            yty += y * y;
        }
        for j in 0..p {
            for k in 0..j {
                xtx[(k, j)] = xtx[(j, k)];
            }
        }
        CrossProducts {
            n,
            qa,
            q,
            p,
            ztz,
            ztx,
            xtx,
            zty,
            xty,
            yty,
        }
    }

    /// Solves the penalized least-squares problem at variance ratios
    /// `(ra, rs)`.
    pub fn solve(&self, ra: f64, rs: f64) -> Result<PlsSolution> {
        let (q, p) = (self.q, self.p);
        let lam: Vec<f64> = (0..q)
            .map(|i| if i < self.qa { ra.sqrt() } else { rs.sqrt() })
            .collect();
        let m = q + p;
        let mut sys = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for i in 0..q {
            for j in 0..q {
                sys[(i, j)] = lam[i] * self.ztz[(i, j)] * lam[j];
            }
            sys[(i, i)] += 1.0;
            for j in 0..p {
                let v = lam[i] * self.ztx[(i, j)];
                sys[(i, q + j)] = v;
                sys[(q + j, i)] = v;
            }
            rhs[i] = lam[i] * self.zty[i];
        }
        for j in 0..p {
            for k in 0..p {
                sys[(q + j, q + k)] = self.xtx[(j, k)];
            }
            rhs[q + j] = self.xty[j];
        }
        let chol = sys.cholesky().ok_or(Error::Singular)?;
        let logdet = 2.0 * (0..q).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
        let sol = chol.solve(&rhs);
        let pen_rss = (self.yty - rhs.dot(&sol)).max(f64::MIN_POSITIVE);
        let n = self.n as f64;
        let deviance = logdet + n * (1.0 + (2.0 * std::f64::consts::PI * pen_rss / n).ln());
        Ok(PlsSolution {
            beta: sol.rows(q, p).iter().copied().collect(),
            b: (0..q).map(|i| lam[i] * sol[i]).collect(),
            pen_rss,
            logdet,
            deviance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Fix the article variance ratio instead of estimating it.
    pub pin_article_ratio: Option<f64>,
    pub pin_subject_ratio: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative deviance spread at which the simplex is considered
    /// converged.
    pub tol: f64,
    /// Additional starting points, as variance ratios.
    #[serde(default)]
    pub extra_starts: Vec<(f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            pin_article_ratio: None,
            pin_subject_ratio: None,
            restarts: 5,
            seed: 0,
            max_iter: 500,
            tol: 1e-10,
            extra_starts: Vec::new(),
        }
    }
}

/// Log-ratio bounds for the optimizer; `exp(-30)` is indistinguishable from
/// zero at double precision for any realistic design, and exact zeros are
/// tried separately.
const LOG_RATIO_MIN: f64 = -30.0;
const LOG_RATIO_MAX: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub var_article: f64,
    pub var_subject: f64,
    pub loglik: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub row_keys: Vec<RowKey>,
    pub n_rows: usize,
    pub converged: bool,
    pub iterations: usize,
    pub design_description: Vec<String>,
    /// SHA-256 over the ordered row keys.
    pub row_fingerprint: String,
    /// Random-effect predictions, keyed by level.
    pub article_effects: BTreeMap<String, f64>,
    pub subject_effects: BTreeMap<String, f64>,
}

pub fn row_fingerprint(keys: &[RowKey]) -> String {
    let mut h = Sha256::new();
    for k in keys {
        h.update(format!("{}\t{}\t{}\t{}\n", k.subject_id, k.word.article_id, k.word.sent_n, k.word.token_n));
    }
    hex::encode(h.finalize())
}

struct Simplex {
    best: Vec<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Nelder-Mead on a box; trial points are clamped into the bounds.
fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    lo: f64,
    hi: f64,
    max_iter: usize,
    tol: f64,
) -> Simplex {
    let dim = start.len();
    let clamp = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.clamp(lo, hi)).collect() };
    let mut pts: Vec<Vec<f64>> = vec![clamp(start.to_vec())];
    for i in 0..dim {
        let mut p = start.to_vec();
        p[i] += if p[i] + step <= hi { step } else { -step };
        pts.push(clamp(p));
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        trace.push(vals[0]);
        let spread = (vals[dim] - vals[0]).abs();
        let size = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= tol * vals[0].abs().max(1e-300) && size < 1e-6 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|k| pts[..dim].iter().map(|p| p[k]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            clamp(
                centroid
                    .iter()
                    .zip(&pts[dim])
                    .map(|(c, w)| c + t * (w - c))
                    .collect(),
            )
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[dim] = xe;
                vals[dim] = fe;
            } else {
                pts[dim] = xr;
                vals[dim] = fr;
            }
        } else if fr < vals[dim - 1] {
            pts[dim] = xr;
            vals[dim] = fr;
        } else {
            let (xc, fc) = if fr < vals[dim] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < vals[dim].min(fr) {
                pts[dim] = xc;
                vals[dim] = fc;
            } else {
                for i in 1..=dim {
                    pts[i] = clamp(pts[i].iter().zip(&pts[0]).map(|(p, b)| b + 0.5 * (p - b)).collect());
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let bi = (0..=dim).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    Simplex {
        best: pts[bi].clone(),
        value: vals[bi],
        iterations: it,
        converged,
        trace,
    }
}

/// Newton refinement in ratio space for the coordinates flagged free,
/// using central finite differences; each step must decrease `f`.
fn newton_polish(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], free: &[bool], fx: &mut f64) {
    for _ in 0..30 {
        let idx: Vec<usize> = (0..x.len()).filter(|&i| free[i] && x[i] > 1e-8).collect();
        if idx.is_empty() {
            return;
        }
        let k = idx.len();
        let h: Vec<f64> = idx.iter().map(|&i| 1e-4 * x[i].max(1e-3)).collect();
        let eval = |f: &mut dyn FnMut(&[f64]) -> f64, d: &[(usize, f64)]| {
            let mut y = x.to_vec();
            for &(i, v) in d {
                y[i] += v;
            }
            f(&y)
        };
        let mut g = vec![0.0; k];
        let mut hess = vec![vec![0.0; k]; k];
        for a in 0..k {
            let (ia, ha) = (idx[a], h[a]);
            let fp = eval(f, &[(ia, ha)]);
            let fm = eval(f, &[(ia, -ha)]);
            g[a] = (fp - fm) / (2.0 * ha);
            hess[a][a] = (fp - 2.0 * *fx + fm) / (ha * ha);
            for b in 0..a {
                let (ib, hb) = (idx[b], h[b]);
                let fpp = eval(f, &[(ia, ha), (ib, hb)]);
                let fpm = eval(f, &[(ia, ha), (ib, -hb)]);
                let fmp = eval(f, &[(ia, -ha), (ib, hb)]);
                let fmm = eval(f, &[(ia, -ha), (ib, -hb)]);
                let v = (fpp - fpm - fmp + fmm) / (4.0 * ha * hb);
                hess[a][b] = v;
                hess[b][a] = v;
            }
        }
        let hm = DMatrix::from_fn(k, k, |r, c| hess[r][c]);
        let Some(chol) = hm.cholesky() else { return };
        let step = chol.solve(&DVector::from_vec(g.clone()));
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..20 {
            let mut y = x.to_vec();
            for (a, &i) in idx.iter().enumerate() {
                y[i] = (x[i] - t * step[a]).max(0.0);
            }
            let fy = f(&y);
            if fy < *fx {
                let gain = *fx - fy;
                x.copy_from_slice(&y);
                *fx = fy;
                improved = gain > 1e-13 * fx.abs();
                break;
            }
            t *= 0.5;
        }
        if !improved {
            return;
        }
    }
}

/// Fits the model by maximum likelihood.
pub fn fit_lmm(design: &Design, opts: &FitOptions) -> Result<FitResult> {
    if design.n() <= design.p() {
        return Err(Error::invalid(format!(
            "need more rows ({}) than fixed columns ({})",
            design.n(),
            design.p()
        )));
    }
    let cp = CrossProducts::new(design);
    let mut pins = [opts.pin_article_ratio, opts.pin_subject_ratio];
    for (slot, (levels, name)) in pins
        .iter_mut()
        .zip([(design.article_levels.len(), "article"), (design.subject_levels.len(), "subject")])
    {
        if slot.is_none() && levels < 2 {
            warn!("{name} has a single level; its variance component is fixed at 0");
            *slot = Some(0.0);
        }
    }
    let free: Vec<bool> = pins.iter().map(Option::is_none).collect();
    let to_ratios = |x: &[f64]| -> [f64; 2] {
        let mut it = x.iter();
        let mut r = [0.0; 2];
        for k in 0..2 {
            r[k] = match pins[k] {
                Some(v) => v,
                None => it.next().unwrap().exp(),
            };
        }
        r
    };
    let mut evaluations = 0usize;
    let dev_at = |r: [f64; 2]| -> f64 {
        match cp.solve(r[0], r[1]) {
            Ok(s) => s.deviance,
            Err(_) => f64::INFINITY,
        }
    };

    let n_free = free.iter().filter(|f| **f).count();
    let mut best_ratios = to_ratios(&vec![0.0; n_free]);
    let mut best_dev = dev_at(best_ratios);
    let mut any_converged = n_free == 0;
    let mut iterations = 0;
    let mut trace = Vec::new();

    if n_free > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut starts: Vec<Vec<f64>> = vec![vec![0.0; n_free]];
        for &(a, s) in &opts.extra_starts {
            let v: Vec<f64> = [a, s]
                .iter()
                .zip(&free)
                .filter(|(_, f)| **f)
                .map(|(r, _)| r.max((LOG_RATIO_MIN + 1.0).exp()).ln().clamp(LOG_RATIO_MIN, LOG_RATIO_MAX))
                .collect();
            starts.push(v);
        }
        for _ in 1..opts.restarts.max(1) {
            starts.push((0..n_free).map(|_| rng.gen_range(-4.0..3.0)).collect());
        }
        for start in starts {
            let mut obj = |x: &[f64]| {
                evaluations += 1;
                dev_at(to_ratios(x))
            };
            let res = nelder_mead(&mut obj, &start, 1.0, LOG_RATIO_MIN, LOG_RATIO_MAX, opts.max_iter, opts.tol);
            iterations += res.iterations;
            any_converged |= res.converged;
            trace.extend(res.trace.iter().rev().take(5).rev());
            if res.value < best_dev {
                best_dev = res.value;
                best_ratios = to_ratios(&res.best);
            }
        }
        // exact boundary candidates
        for mask in [[true, false], [false, true], [true, true]] {
            let mut r = best_ratios;
            for k in 0..2 {
                if mask[k] && free[k] {
                    r[k] = 0.0;
                }
            }
            let d = dev_at(r);
            if d < best_dev {
                best_dev = d;
                best_ratios = r;
            }
        }
        let mut x = best_ratios.to_vec();
        let mut obj = |r: &[f64]| dev_at([r[0], r[1]]);
        newton_polish(&mut obj, &mut x, &free, &mut best_dev);
        best_ratios = [x[0], x[1]];
    }
    if !best_dev.is_finite() {
        return Err(Error::Singular);
    }
    if !any_converged {
        return Err(Error::NoConvergence {
            iterations,
            trace,
        });
    }
    let sol = cp.solve(best_ratios[0], best_ratios[1])?;
    let n = design.n();
    let sigma2 = sol.pen_rss / n as f64;
    let qa = design.article_levels.len();
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let fitted: f64 = design.row(i).iter().zip(&sol.beta).map(|(a, b)| a * b).sum::<f64>()
                + sol.b[design.article[i]]
                + sol.b[qa + design.subject[i]];
            design.y[i] - fitted
        })
        .collect();
    Ok(FitResult {
        beta: sol.beta.clone(),
        sigma2,
        var_article: best_ratios[0] * sigma2,
        var_subject: best_ratios[1] * sigma2,
        loglik: -0.5 * sol.deviance,
        residuals,
        row_keys: design.keys.clone(),
        n_rows: n,
        converged: true,
        iterations,
        design_description: design.columns.clone(),
        row_fingerprint: row_fingerprint(&design.keys),
        article_effects: design
            .article_levels
            .iter()
            .cloned()
            .zip(sol.b[..qa].iter().copied())
            .collect(),
        subject_effects: design
            .subject_levels
            .iter()
            .cloned()
            .zip(sol.b[qa..].iter().copied())
            .collect(),
    })
}

/// Profiled deviance at the given variance ratios.
pub fn profiled_deviance(design: &Design, ra: f64, rs: f64) -> Result<f64> {
    Ok(CrossProducts::new(design).solve(ra, rs)?.deviance)
}

/// Fits the reduced model first and seeds the full model's optimizer with
/// its optimum, so the full model's likelihood can never fall below it.
pub fn fit_nested(with: &Design, without: &Design, opts: &FitOptions) -> Result<(FitResult, FitResult)> {
    if with.keys != without.keys {
        return Err(Error::RowMismatch("designs are built on different rows".into()));
    }
    let fit_without = fit_lmm(without, opts)?;
    let mut o = opts.clone();
    let s2 = fit_without.sigma2;
    o.extra_starts.push((fit_without.var_article / s2, fit_without.var_subject / s2));
    let fit_with = fit_lmm(with, &o)?;
    Ok((fit_with, fit_without))
}

/// Per-token log-likelihood gain of the model with surprisal predictors.
pub fn ppp(fit_with: &FitResult, fit_without: &FitResult) -> Result<f64> {
    if fit_with.n_rows != fit_without.n_rows || fit_with.row_fingerprint != fit_without.row_fingerprint {
        return Err(Error::RowMismatch(format!(
            "{} rows ({}) vs {} rows ({})",
            fit_with.n_rows,
            &fit_with.row_fingerprint[..fit_with.row_fingerprint.len().min(12)],
            fit_without.n_rows,
            &fit_without.row_fingerprint[..fit_without.row_fingerprint.len().min(12)]
        )));
    }
    Ok((fit_with.loglik - fit_without.loglik) / fit_with.n_rows as f64)
}

/// Exact Gaussian marginal log-density of `y` under `N(X beta, V)` with
/// `V = sigma2 I + var_article Z_a Z_a' + var_subject Z_s Z_s'`, evaluated
/// densely. Intended for verification on moderate `n`.
pub fn dense_marginal_loglik(design: &Design, beta: &[f64], sigma2: f64, var_article: f64, var_subject: f64) -> Result<f64> {
    let n = design.n();
    let v = DMatrix::from_fn(n, n, |i, j| {
        let mut x = 0.0;
        if i == j {
            x += sigma2;
        }
        if design.article[i] == design.article[j] {
            x += var_article;
        }
        if design.subject[i] == design.subject[j] {
            x += var_subject;
        }
        x
    });
    let chol = v.cholesky().ok_or(Error::Singular)?;
    let r = DVector::from_fn(n, |i, _| {
        design.y[i] - design.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>()
    });
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(&r));
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

impl FitResult {
    pub fn sse(&self) -> f64 {
        self.residuals.iter().map(|r| r * r).sum()
    }

    pub fn save(&self, json_path: &Path, residual_path: &Path, config_id: &str) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))?;
        let mut out = String::from(RESIDUAL_HEADER);
        out.push('\n');
        for (k, r) in self.row_keys.iter().zip(&self.residuals) {
            out.push_str(&format!(
                "{config_id}\t{}\t{}\t{}\t{}\t{r}\n",
                k.subject_id, k.word.article_id, k.word.sent_n, k.word.token_n
            ));
        }
        std::fs::write(residual_path, out).map_err(|e| Error::io(residual_path, e))
    }

    pub fn load(json_path: &Path, residual_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let mut fit: FitResult = serde_json::from_str(&text)?;
        let (keys, res) = read_residuals(residual_path)?;
        if row_fingerprint(&keys) != fit.row_fingerprint {
            return Err(Error::RowMismatch(format!(
                "{} does not match {}",
                residual_path.display(),
                json_path.display()
            )));
        }
        fit.row_keys = keys;
        fit.residuals = res;
        Ok(fit)
    }
}

pub const RESIDUAL_HEADER: &str = "config_id\tsubject_id\tarticle_id\tsentN\ttokenN\tresidual";

pub fn read_residuals(path: &Path) -> Result<(Vec<RowKey>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keys = Vec::new();
    let mut vals = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != RESIDUAL_HEADER {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "missing residual header".into(),
                });
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m.to_string(),
        };
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        keys.push(RowKey {
            subject_id: f[1].to_string(),
            word: WordKey::new(
                f[2],
                f[3].parse().map_err(|_| bad("bad sentN"))?,
                f[4].parse().map_err(|_| bad("bad tokenN"))?,
            ),
        });
        vals.push(f[5].parse().map_err(|_| bad("bad residual"))?);
    }
    Ok((keys, vals))
}
