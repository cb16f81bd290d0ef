//! Context-noise functions applied to the within-sentence context of a word.
//!
//! Noise operates on words (not subwords) and deletes them: survivors are
//! closed up in their original order and re-tokenized downstream.
//!
//! # LPEN sampling
//!
//! Linear probabilistic erasure keeps the `l` nearest words and erases the
//! word at distance `j` beyond that zone with probability `min(j * a, 1)`.
//! Draws are reproducible bit-for-bit on every platform:
//!
//! 1. A 32-byte key is `SHA-256("lsl-lpen-v1\0" || seed as u64 LE ||
//!    article_id bytes || 0x00 || sentN as u64 LE || target tokenN as u64 LE)`.
//! 2. The key seeds a ChaCha8 stream (`rand_chacha::ChaCha8Rng::from_seed`).
//! 3. Unprotected words are visited farthest first; each takes one `u64`
//!    from the stream, mapped to `u = (x >> 11) * 2^-53`, and is erased iff
//!    `u < min(j * a, 1)`.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseSpec {
    Identity,
    /// Keep the `n - 1` nearest words.
    Ngram { n: usize },
    Lpen {
        protected: usize,
        slope: f64,
        seed: u64,
    },
}

/// Identifies the target word whose context is being noised; LPEN draws are
/// keyed on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey<'a> {
    pub article_id: &'a str,
    pub sent_n: usize,
    pub token_n: usize,
}

impl NoiseSpec {
    pub fn ngram(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::NoiseSpec(format!("ngram:{n} (n must be at least 2)")));
        }
        Ok(NoiseSpec::Ngram { n })
    }

    pub fn lpen(protected: usize, slope: f64, seed: u64) -> Result<Self> {
        if !(slope.is_finite() && slope > 0.0) {
            return Err(Error::NoiseSpec(format!("lpen slope must be positive, got {slope}")));
        }
        Ok(NoiseSpec::Lpen {
            protected,
            slope,
            seed,
        })
    }

    /// Nominal context length in words for reporting, `None` when unbounded
    /// or probabilistic.
    pub fn input_length(&self) -> Option<usize> {
        match self {
            NoiseSpec::Ngram { n } => Some(n - 1),
            _ => None,
        }
    }

    /// Indices of the surviving context words, in order.
    pub fn kept_indices(&self, context_len: usize, key: NoiseKey<'_>) -> Vec<usize> {
        match *self {
            NoiseSpec::Identity => (0..context_len).collect(),
            NoiseSpec::Ngram { n } => {
                let keep = (n - 1).min(context_len);
                (context_len - keep..context_len).collect()
            }
            NoiseSpec::Lpen {
                protected,
                slope,
                seed,
            } => {
                let unprotected = context_len.saturating_sub(protected);
                let mut rng = lpen_rng(seed, key);
                let mut kept = Vec::with_capacity(context_len);
                for idx in 0..unprotected {
                    // distance beyond the protected zone, 1 = nearest
                    let j = (unprotected - idx) as f64;
                    let p = (j * slope).min(1.0);
                    let u = unit_f64(rng.next_u64());
                    if u >= p {
                        kept.push(idx);
                    }
                }
                kept.extend(unprotected..context_len);
                kept
            }
        }
    }

    pub fn apply<T: Clone>(&self, context: &[T], key: NoiseKey<'_>) -> Vec<T> {
        self.kept_indices(context.len(), key)
            .into_iter()
            .map(|i| context[i].clone())
            .collect()
    }
}

pub fn apply_noise<T: Clone>(context: &[T], spec: &NoiseSpec, key: NoiseKey<'_>) -> Vec<T> {
    spec.apply(context, key)
}

fn lpen_rng(seed: u64, key: NoiseKey<'_>) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"lsl-lpen-v1\0");
    h.update(seed.to_le_bytes());
    h.update(key.article_id.as_bytes());
    h.update([0u8]);
    h.update((key.sent_n as u64).to_le_bytes());
    h.update((key.token_n as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::Identity => write!(f, "identity"),
            NoiseSpec::Ngram { n } => write!(f, "ngram:{n}"),
            NoiseSpec::Lpen {
                protected,
                slope,
                seed,
            } => write!(f, "lpen:l={protected},a={slope},seed={seed}"),
        }
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::NoiseSpec(s.to_string());
        let s_trim = s.trim();
        if s_trim == "identity" {
            return Ok(NoiseSpec::Identity);
        }
        if let Some(n) = s_trim.strip_prefix("ngram:") {
            return NoiseSpec::ngram(n.parse().map_err(|_| bad())?);
        }
        if let Some(params) = s_trim.strip_prefix("lpen:") {
            let (mut l, mut a, mut seed) = (None, None, None);
            for kv in params.split(',') {
                let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                match k.trim() {
                    "l" => l = Some(v.trim().parse().map_err(|_| bad())?),
                    "a" => a = Some(v.trim().parse().map_err(|_| bad())?),
                    "seed" => seed = Some(v.trim().parse().map_err(|_| bad())?),
                    _ => return Err(bad()),
                }
            }
            return NoiseSpec::lpen(l.ok_or_else(bad)?, a.ok_or_else(bad)?, seed.unwrap_or(0));
        }
        Err(bad())
    }
}

impl TryFrom<String> for NoiseSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseSpec> for String {
    fn from(n: NoiseSpec) -> String {
        n.to_string()
    }
}
