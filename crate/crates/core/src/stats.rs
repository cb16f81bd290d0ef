//! Inferential statistics over regression residuals and ELC scores.

use std::collections::{BTreeMap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::regress::{FitResult, RowKey};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Squared residuals of one data point under two configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPair {
    pub key: RowKey,
    pub r_a2: f64,
    pub r_b2: f64,
}

/// Pairs the squared residuals of two fits by row key. The fits must cover
/// exactly the same rows.
pub fn align_residuals(a: &FitResult, b: &FitResult) -> Result<Vec<ResidualPair>> {
    if a.row_keys.len() != a.residuals.len() || b.row_keys.len() != b.residuals.len() {
        return Err(Error::Alignment("fit is missing its residuals".into()));
    }
    let bmap: HashMap<&RowKey, f64> = b.row_keys.iter().zip(&b.residuals).map(|(k, r)| (k, *r)).collect();
    if bmap.len() != a.row_keys.len() {
        return Err(Error::Alignment(format!(
            "{} rows vs {} rows",
            a.row_keys.len(),
            b.row_keys.len()
        )));
    }
    a.row_keys
        .iter()
        .zip(&a.residuals)
        .map(|(k, ra)| {
            let rb = bmap.get(k).ok_or_else(|| {
                Error::Alignment(format!("row {} {} only in the first fit", k.subject_id, k.word))
            })?;
            Ok(ResidualPair {
                key: k.clone(),
                r_a2: ra * ra,
                r_b2: rb * rb,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed_mean_diff: f64,
    pub p_two_sided: f64,
    pub n: usize,
    pub n_perm: usize,
    pub seed: u64,
}

const PERM_BLOCK: usize = 256;

/// Paired sign-flip permutation test on `a - b`.
///
/// The statistic is the mean difference. Permutation `i` belongs to block
/// `i / 256`; each block draws its signs from `ChaCha8Rng::seed_from_u64(seed)`
/// on stream `block`, one bit per pair taken from successive `u64`s
/// (least-significant bit first, a set bit flips the sign). Results do not
/// depend on the thread count. `p = (1 + #{|perm| >= |observed|}) / (1 + n_perm)`.
pub fn paired_permutation_test(a: &[f64], b: &[f64], n_perm: usize, seed: u64) -> Result<PermutationResult> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired samples differ in length"));
    }
    if a.len() < 2 {
        return Err(Error::invalid("permutation test needs at least two pairs"));
    }
    if n_perm == 0 {
        return Err(Error::invalid("n_perm must be at least 1"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed = d.iter().sum::<f64>() / n as f64;
    // tolerance for ties that differ only by summation rounding
    let tol = 1e-12 * d.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let threshold = observed.abs() - tol;
    let blocks = n_perm.div_ceil(PERM_BLOCK);
    let hits: usize = (0..blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(block as u64);
            let count = PERM_BLOCK.min(n_perm - block * PERM_BLOCK);
            let mut hits = 0;
            for _ in 0..count {
                let mut sum = 0.0;
                let mut bits = 0u64;
                for (i, v) in d.iter().enumerate() {
                    if i % 64 == 0 {
                        bits = rng.next_u64();
                    }
                    if bits & 1 == 1 {
                        sum -= v;
                    } else {
                        sum += v;
                    }
                    bits >>= 1;
                }
                if (sum / n as f64).abs() >= threshold {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(PermutationResult {
        observed_mean_diff: observed,
        p_two_sided: (1 + hits) as f64 / (1 + n_perm) as f64,
        n,
        n_perm,
        seed,
    })
}

pub fn permutation_test_pairs(pairs: &[ResidualPair], n_perm: usize, seed: u64) -> Result<PermutationResult> {
    if pairs.is_empty() {
        return Err(Error::invalid("no residual pairs"));
    }
    let a: Vec<f64> = pairs.iter().map(|p| p.r_a2).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.r_b2).collect();
    paired_permutation_test(&a, &b, n_perm, seed)
}

/// Effectiveness of long context per data point: the short-context squared
/// residual minus the full-context one. Positive values favour long context.
pub fn elc(pairs: &[ResidualPair]) -> BTreeMap<RowKey, f64> {
    pairs.iter().map(|p| (p.key.clone(), p.r_a2 - p.r_b2)).collect()
}

pub fn elc_from_fits(short: &FitResult, full: &FitResult) -> Result<BTreeMap<RowKey, f64>> {
    Ok(elc(&align_residuals(short, full)?))
}

/// Averages ELC tables key by key; keys absent from any table are dropped.
pub fn average_elc(tables: &[BTreeMap<RowKey, f64>]) -> BTreeMap<RowKey, f64> {
    let Some((first, rest)) = tables.split_first() else {
        return BTreeMap::new();
    };
    first
        .iter()
        .filter_map(|(k, v)| {
            let mut sum = *v;
            for t in rest {
                sum += t.get(k)?;
            }
            Some((k.clone(), sum / tables.len() as f64))
        })
        .collect()
}

/// Upper-tail chi-square p-value for the likelihood-ratio statistic
/// `2 (loglik_with - loglik_without)`.
pub fn chisq_nested(loglik_with: f64, loglik_without: f64, df: u32) -> Result<f64> {
    if df == 0 {
        return Err(Error::invalid("df must be at least 1"));
    }
    let stat = 2.0 * (loglik_with - loglik_without);
    if stat < -1e-6 {
        return Err(Error::invalid(format!(
            "negative likelihood-ratio statistic {stat}: the larger model fits worse"
        )));
    }
    chisq_sf(stat.max(0.0), df as f64)
}

pub fn chisq_sf(stat: f64, df: f64) -> Result<f64> {
    let dist = ChiSquared::new(df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.sf(stat).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// Classical one-way ANOVA.
pub fn oneway_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::invalid("ANOVA needs at least two groups"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid("every ANOVA group needs at least two values"));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let k = groups.len();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = mean(g);
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let (df1, df2) = (k - 1, n - k);
    if df2 == 0 {
        return Err(Error::invalid("degenerate within-group degrees of freedom"));
    }
    let msb = ssb / df1 as f64;
    let msw = ssw / df2 as f64;
    let (f, p) = if ssb <= 0.0 {
        (0.0, 1.0)
    } else if msw <= 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = msb / msw;
        let dist = FisherSnedecor::new(df1 as f64, df2 as f64).map_err(|e| Error::invalid(e.to_string()))?;
        (f, dist.sf(f))
    };
    Ok(AnovaResult {
        f,
        p,
        df_between: df1,
        df_within: df2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

fn t_result(diff: f64, se: f64, df: f64) -> Result<TTestResult> {
    if se <= 0.0 {
        return Ok(if diff == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0 }
        } else {
            TTestResult {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TTestResult {
        t,
        df,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

/// Welch's unequal-variance t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least two values per sample"));
    }
    let (va, vb) = (sample_var(a) / a.len() as f64, sample_var(b) / b.len() as f64);
    let se = (va + vb).sqrt();
    let df = if va + vb > 0.0 {
        (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64)
    } else {
        (a.len() + b.len() - 2) as f64
    };
    t_result(mean(a) - mean(b), se, df)
}

/// Pooled-variance two-sample t-test.
pub fn student_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least two values per sample"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * sample_var(a) + (nb - 1.0) * sample_var(b)) / df;
    t_result(mean(a) - mean(b), (pooled * (1.0 / na + 1.0 / nb)).sqrt(), df)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("correlation inputs differ in length"));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::invalid("correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("correlation inputs differ in length"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Uniform JSON record for every test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: String,
    pub statistic: f64,
    pub p: f64,
    pub n: usize,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
}

impl TestReport {
    pub fn permutation(r: &PermutationResult, params: serde_json::Value) -> Self {
        TestReport {
            test: "paired_permutation".into(),
            statistic: r.observed_mean_diff,
            p: r.p_two_sided,
            n: r.n,
            seed: Some(r.seed),
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
