//! Training-corpus rewriting: split sentences at random breakpoints and
//! patch the latter halves with the break token.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::read_text;
use crate::error::{Error, Result};
use crate::lm::{BOS, BREAK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Former,
    Latter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub sentence: usize,
    pub side: Side,
    pub tokens: Vec<String>,
}

impl Chunk {
    pub fn prefix_token(&self) -> &'static str {
        match self.side {
            Side::Former => BOS,
            Side::Latter => BREAK,
        }
    }
}

/// Breakpoint for sentence `index`, uniform over `0..len`. Each sentence draws
/// from its own ChaCha8 stream of the master seed.
pub fn breakpoint(seed: u64, index: usize, len: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen_range(0..len)
}

/// Splits every sentence into its former and latter chunk, in input order.
pub fn split_sentences(sentences: &[Vec<String>], seed: u64) -> Result<Vec<Chunk>> {
    if let Some(i) = sentences.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("sentence {i} is empty")));
    }
    Ok(sentences
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, s)| {
            let k = breakpoint(seed, i, s.len());
            [
                Chunk {
                    sentence: i,
                    side: Side::Former,
                    tokens: s[..k].to_vec(),
                },
                Chunk {
                    sentence: i,
                    side: Side::Latter,
                    tokens: s[k..].to_vec(),
                },
            ]
        })
        .collect())
}

/// Split, shuffle (stream `u64::MAX` of the seed) and concatenate with the
/// prefix tokens in place.
pub fn ngramify_corpus(sentences: &[Vec<String>], seed: u64) -> Result<Vec<String>> {
    let mut chunks = split_sentences(sentences, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    chunks.shuffle(&mut rng);
    let mut out = Vec::with_capacity(chunks.iter().map(|c| c.tokens.len() + 1).sum());
    for c in chunks {
        out.push(c.prefix_token().to_string());
        out.extend(c.tokens);
    }
    Ok(out)
}

/// One sentence per line, space-separated subwords; blank lines are skipped.
pub fn parse_sentences(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn modify_training_file(input: &Path, output: &Path, seed: u64) -> Result<usize> {
    let sentences = parse_sentences(&read_text(input)?);
    if sentences.is_empty() {
        return Err(Error::invalid(format!("{} contains no sentences", input.display())));
    }
    let stream = ngramify_corpus(&sentences, seed)?;
    std::fs::write(output, stream.join(" ") + "\n").map_err(|e| Error::io(output, e))?;
    Ok(sentences.len())
}
