//! Word-level lossy-context surprisal tables and perplexity.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Stimulus, WordKey};
use crate::error::{Error, Result};
use crate::lm::{Prefix, Scorer, SurprisalRequest};
use crate::noise::{NoiseKey, NoiseSpec};

/// How the conditioning token in front of a (possibly truncated) context is
/// chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixMode {
    /// `<s>` when the surviving context still starts at the sentence's first
    /// word (or the target is sentence-initial), `<b>` otherwise.
    #[default]
    Adaptive,
    /// `<s>` everywhere, for backends never trained with `<b>`.
    AlwaysBos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurprisalEntry {
    pub word_surprisal: f64,
    pub subword_surprisals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurprisalTable {
    pub config_id: String,
    /// Free-form provenance written as `# key=value` lines.
    pub meta: BTreeMap<String, String>,
    pub entries: BTreeMap<WordKey, SurprisalEntry>,
}

pub fn config_id(backend_label: &str, noise: &NoiseSpec) -> String {
    format!("{backend_label}+{noise}")
}

pub fn item_id(key: &WordKey) -> String {
    format!("{}|{}|{}", key.article_id, key.sent_n, key.token_n)
}

/// Builds the request for every word: the context is the same sentence's
/// preceding words, passed through `noise` and flattened to subwords.
pub fn build_requests(stimulus: &Stimulus, noise: &NoiseSpec, mode: PrefixMode) -> Vec<(WordKey, SurprisalRequest)> {
    let mut out = Vec::with_capacity(stimulus.word_count());
    for (article_id, sentence) in stimulus.sentences() {
        for (i, word) in sentence.words.iter().enumerate() {
            let key = NoiseKey {
                article_id,
                sent_n: sentence.sent_n,
                token_n: word.token_n,
            };
            let kept = noise.kept_indices(i, key);
            let untruncated = i == 0 || kept.first() == Some(&0);
            let prefix = match mode {
                PrefixMode::AlwaysBos => Prefix::Bos,
                PrefixMode::Adaptive if untruncated => Prefix::Bos,
                PrefixMode::Adaptive => Prefix::Break,
            };
            let context = kept
                .iter()
                .flat_map(|&j| sentence.words[j].subwords.iter().cloned())
                .collect();
            let wkey = WordKey::new(article_id, sentence.sent_n, word.token_n);
            out.push((
                wkey.clone(),
                SurprisalRequest {
                    item_id: item_id(&wkey),
                    prefix,
                    context,
                    target: word.subwords.clone(),
                },
            ));
        }
    }
    out
}

/// Scores every word of the stimulus under one (backend, noise) pair.
pub fn compute_table(
    stimulus: &Stimulus,
    noise: &NoiseSpec,
    backend: &dyn Scorer,
    backend_label: &str,
    mode: PrefixMode,
) -> Result<SurprisalTable> {
    let keyed = build_requests(stimulus, noise, mode);
    let requests: Vec<SurprisalRequest> = keyed.iter().map(|(_, r)| r.clone()).collect();
    let responses = backend.score_batch(&requests)?;
    if responses.len() != requests.len() {
        return Err(Error::Backend {
            item_id: requests.get(responses.len()).map(|r| r.item_id.clone()).unwrap_or_default(),
            message: "backend returned too few responses".into(),
        });
    }
    let mut entries = BTreeMap::new();
    for ((key, req), resp) in keyed.into_iter().zip(responses) {
        if resp.item_id != req.item_id || resp.surprisal.len() != req.target.len() {
            return Err(Error::Backend {
                item_id: req.item_id,
                message: "misaligned response".into(),
            });
        }
        entries.insert(
            key,
            SurprisalEntry {
                word_surprisal: resp.surprisal.iter().sum(),
                subword_surprisals: resp.surprisal,
            },
        );
    }
    let mut meta = BTreeMap::new();
    meta.insert("corpus_hash".into(), stimulus.content_hash());
    meta.insert("prefix_mode".into(), format!("{mode:?}").to_lowercase());
    Ok(SurprisalTable {
        config_id: config_id(backend_label, noise),
        meta,
        entries,
    })
}

/// `exp` of the mean per-subword surprisal (nats).
pub fn perplexity(subword_surprisals: &[f64]) -> Result<f64> {
    if subword_surprisals.is_empty() {
        return Err(Error::invalid("perplexity needs at least one subword"));
    }
    let mean = subword_surprisals.iter().sum::<f64>() / subword_surprisals.len() as f64;
    Ok(mean.exp())
}

pub const TABLE_HEADER: &str = "config_id\tarticle_id\tsentN\ttokenN\tword_surprisal\tsubword_surprisals";

impl SurprisalTable {
    pub fn corpus_hash(&self) -> Option<&str> {
        self.meta.get("corpus_hash").map(String::as_str)
    }

    pub fn get(&self, key: &WordKey) -> Option<&SurprisalEntry> {
        self.entries.get(key)
    }

    pub fn all_subword_surprisals(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|e| e.subword_surprisals.iter().copied())
            .collect()
    }

    pub fn perplexity(&self) -> Result<f64> {
        perplexity(&self.all_subword_surprisals())
    }

    /// The data rows only, without provenance comments. Values are written
    /// with shortest round-trip formatting, scaled by `1 / ln(base)`.
    pub fn rows_tsv(&self, log_base: f64) -> String {
        let scale = 1.0 / log_base.ln();
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for (k, e) in &self.entries {
            let subs: Vec<String> = e.subword_surprisals.iter().map(|v| (v * scale).to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                self.config_id,
                k.article_id,
                k.sent_n,
                k.token_n,
                e.word_surprisal * scale,
                subs.join(",")
            ));
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&self.rows_tsv(std::f64::consts::E));
        out
    }

    pub fn from_tsv(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut table = SurprisalTable::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(c) = line.strip_prefix("# ") {
                if let Some((k, v)) = c.split_once('=') {
                    table.meta.insert(k.to_string(), v.to_string());
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line != TABLE_HEADER {
                    return Err(err(n, "missing surprisal table header".into()));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(n, format!("expected 6 fields, found {}", f.len())));
            }
            if table.config_id.is_empty() {
                table.config_id = f[0].to_string();
            } else if table.config_id != f[0] {
                return Err(err(n, "mixed config_id values".into()));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(n, format!("bad number {s:?}")));
            let key = WordKey::new(
                f[1],
                f[2].parse().map_err(|_| err(n, "bad sentN".into()))?,
                f[3].parse().map_err(|_| err(n, "bad tokenN".into()))?,
            );
            let subs = f[5].split(',').map(num).collect::<Result<Vec<f64>>>()?;
            let entry = SurprisalEntry {
                word_surprisal: num(f[4])?,
                subword_surprisals: subs,
            };
            if table.entries.insert(key, entry).is_some() {
                return Err(err(n, "duplicate key".into()));
            }
        }
        if !header_seen {
            return Err(err(1, "missing surprisal table header".into()));
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(path, &text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Checks that the table covers exactly the words of `stimulus`.
    pub fn check_complete(&self, stimulus: &Stimulus) -> Result<()> {
        if self.entries.len() != stimulus.word_count() {
            return Err(Error::invalid(format!(
                "table {} has {} entries for {} words",
                self.config_id,
                self.entries.len(),
                stimulus.word_count()
            )));
        }
        for (k, _) in stimulus.words() {
            if !self.entries.contains_key(&k) {
                return Err(Error::invalid(format!("table {} lacks {k}", self.config_id)));
            }
        }
        Ok(())
    }
}
