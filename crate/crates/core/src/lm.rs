//! Next-subword probability sources.
//!
//! [`NgramModel`] is a self-contained interpolated absolute-discounting
//! n-gram model. [`ExternalBackend`] hands batches to another process
//! through JSON Lines files:
//!
//! ```text
//! request:  {"item_id": "a1|0|3", "prefix": "<b>", "context": ["the", "Ġcat"], "target": ["Ġsat"]}
//! response: {"item_id": "a1|0|3", "surprisal": [2.31]}
//! ```
//!
//! Responses may come back in any order; `item_id` is the join key.
//! Surprisals are in nats.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const BREAK: &str = "<b>";
pub const UNK: &str = "<unk>";

pub const DEFAULT_DISCOUNT: f64 = 0.75;

/// Token occupying the conditioning position in front of the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prefix {
    #[serde(rename = "<s>")]
    Bos,
    #[serde(rename = "<b>")]
    Break,
}

impl Prefix {
    pub fn token(self) -> &'static str {
        match self {
            Prefix::Bos => BOS,
            Prefix::Break => BREAK,
        }
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurprisalRequest {
    pub item_id: String,
    pub prefix: Prefix,
    pub context: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurprisalResponse {
    pub item_id: String,
    pub surprisal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendDescriptor {
    BuiltinNgram {
        order: usize,
        discount: f64,
        vocab_size: usize,
        bos_token: String,
        break_token: String,
    },
    External {
        command: Vec<String>,
        bos_token: String,
        break_token: String,
    },
}

/// Anything that turns surprisal requests into responses.
pub trait Scorer: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Scores a batch; the result is aligned with `requests`.
    fn score_batch(&self, requests: &[SurprisalRequest]) -> Result<Vec<SurprisalResponse>>;
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextStats {
    total: u64,
    followers: HashMap<u32, u64>,
}

/// Interpolated absolute-discounting n-gram model over subword tokens.
///
/// With discount `D`, history `h` and its one-shorter suffix `h'`:
///
/// ```text
/// p(w | h) = max(c(h w) - D, 0) / c(h .) + D * N1+(h .) / c(h .) * p(w | h')
/// ```
///
/// falling back to `p(w | h')` for unseen histories. The recursion bottoms
/// out in the uniform distribution over the vocabulary, which always holds
/// `<s>`, `<b>` and `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    discount: f64,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// `contexts[k]` maps histories of length `k` to follower counts.
    contexts: Vec<HashMap<Vec<u32>, ContextStats>>,
}

impl NgramModel {
    /// Trains on a flat token stream. Special tokens in the stream are
    /// ordinary tokens for counting purposes.
    pub fn train(stream: &[String], order: usize) -> Result<Self> {
        Self::train_with_discount(stream, order, DEFAULT_DISCOUNT)
    }

    pub fn train_with_discount(stream: &[String], order: usize, discount: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid("discount must lie in [0, 1)"));
        }
        if stream.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut model = NgramModel {
            order,
            discount,
            vocab: Vec::new(),
            index: HashMap::new(),
            contexts: vec![HashMap::new(); order],
        };
        for t in [BOS, BREAK, UNK] {
            model.intern(t);
        }
        let ids: Vec<u32> = stream.iter().map(|t| model.intern(t)).collect();
        for i in 0..ids.len() {
            for k in 0..order.min(i + 1) {
                let stats = model.contexts[k].entry(ids[i - k..i].to_vec()).or_default();
                stats.total += 1;
                *stats.followers.entry(ids[i]).or_insert(0) += 1;
            }
        }
        Ok(model)
    }

    /// Trains on sentences, each emitted as `<s> w_0 .. w_n` into one stream.
    pub fn train_sentences(sentences: &[Vec<String>], order: usize) -> Result<Self> {
        let mut stream = Vec::new();
        for s in sentences {
            stream.push(BOS.to_string());
            stream.extend(s.iter().cloned());
        }
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        Self::train(&stream, order)
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.vocab.len() as u32;
        self.vocab.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Token id, mapping unknown tokens to `<unk>`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(self.index[UNK])
    }

    fn prob_ids(&self, w: u32, history: &[u32]) -> f64 {
        let start = history.len().saturating_sub(self.order - 1);
        self.interp(w, &history[start..])
    }

    fn interp(&self, w: u32, h: &[u32]) -> f64 {
        let lower = if h.is_empty() {
            1.0 / self.vocab.len() as f64
        } else {
            self.interp(w, &h[1..])
        };
        match self.contexts[h.len()].get(h) {
            None => lower,
            Some(stats) => {
                let c = stats.followers.get(&w).copied().unwrap_or(0) as f64;
                let tot = stats.total as f64;
                let types = stats.followers.len() as f64;
                ((c - self.discount).max(0.0) + self.discount * types * lower) / tot
            }
        }
    }

    /// `p(token | history)`, history given oldest first.
    pub fn prob(&self, token: &str, history: &[&str]) -> f64 {
        let h: Vec<u32> = history.iter().map(|t| self.id(t)).collect();
        self.prob_ids(self.id(token), &h)
    }

    /// Per-target surprisals in nats for `prefix ∘ context ∘ target`.
    pub fn score(&self, prefix: Prefix, context: &[String], target: &[String]) -> Vec<f64> {
        let mut hist: Vec<u32> = Vec::with_capacity(1 + context.len() + target.len());
        hist.push(self.id(prefix.token()));
        hist.extend(context.iter().map(|t| self.id(t)));
        target
            .iter()
            .map(|t| {
                let id = self.id(t);
                let s = -self.prob_ids(id, &hist).ln();
                hist.push(id);
                s.max(0.0)
            })
            .collect()
    }

    /// Writes the count tables as TSV:
    ///
    /// ```text
    /// #lsl-ngram  v1
    /// order       5
    /// discount    0.75
    /// vocab       <token>          (one row per id, in id order)
    /// ngram       <count>  <history tokens ...> <token>
    /// ```
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "#lsl-ngram\tv1\norder\t{}\ndiscount\t{}\n",
            self.order, self.discount
        );
        for v in &self.vocab {
            out.push_str(&format!("vocab\t{v}\n"));
        }
        let mut rows: Vec<(Vec<u32>, u64)> = Vec::new();
        for level in &self.contexts {
            for (h, stats) in level {
                for (&w, &c) in &stats.followers {
                    let mut key = h.clone();
                    key.push(w);
                    rows.push((key, c));
                }
            }
        }
        rows.sort();
        for (key, c) in rows {
            let toks: Vec<&str> = key.iter().map(|&i| self.vocab[i as usize].as_str()).collect();
            out.push_str(&format!("ngram\t{c}\t{}\n", toks.join(" ")));
        }
        out
    }

    pub fn from_tsv(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, "#lsl-ngram\tv1")) => {}
            _ => return Err(err(1, "expected `#lsl-ngram\\tv1` header".into())),
        }
        let mut order = None;
        let mut discount = None;
        let mut model = NgramModel {
            order: 0,
            discount: 0.0,
            vocab: Vec::new(),
            index: HashMap::new(),
            contexts: Vec::new(),
        };
        for (n, line) in lines {
            let mut f = line.splitn(3, '\t');
            match (f.next(), f.next(), f.next()) {
                (Some("order"), Some(v), None) => {
                    let o: usize = v.parse().map_err(|_| err(n, "bad order".into()))?;
                    if o == 0 {
                        return Err(err(n, "order must be positive".into()));
                    }
                    order = Some(o);
                    model.contexts = vec![HashMap::new(); o];
                }
                (Some("discount"), Some(v), None) => {
                    discount = Some(v.parse().map_err(|_| err(n, "bad discount".into()))?)
                }
                (Some("vocab"), Some(v), None) => {
                    if model.index.contains_key(v) {
                        return Err(err(n, format!("duplicate vocab entry {v:?}")));
                    }
                    model.intern(v);
                }
                (Some("ngram"), Some(c), Some(toks)) => {
                    let o = order.ok_or_else(|| err(n, "ngram row before order".into()))?;
                    let c: u64 = c.parse().map_err(|_| err(n, "bad count".into()))?;
                    let ids = toks
                        .split(' ')
                        .map(|t| model.index.get(t).copied().ok_or_else(|| err(n, format!("token {t:?} not in vocab"))))
                        .collect::<Result<Vec<u32>>>()?;
                    if ids.is_empty() || ids.len() > o {
                        return Err(err(n, "n-gram length out of range".into()));
                    }
                    let (w, h) = ids.split_last().unwrap();
                    let stats = model.contexts[h.len()].entry(h.to_vec()).or_default();
                    stats.total += c;
                    stats.followers.insert(*w, c);
                }
                _ => return Err(err(n, format!("unrecognised row {line:?}"))),
            }
        }
        model.order = order.ok_or_else(|| err(1, "missing order".into()))?;
        model.discount = discount.ok_or_else(|| err(1, "missing discount".into()))?;
        for t in [BOS, BREAK, UNK] {
            if !model.index.contains_key(t) {
                return Err(err(1, format!("vocab lacks reserved token {t}")));
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(path, &text)
    }
}

impl Scorer for NgramModel {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::BuiltinNgram {
            order: self.order,
            discount: self.discount,
            vocab_size: self.vocab.len(),
            bos_token: BOS.into(),
            break_token: BREAK.into(),
        }
    }

    fn score_batch(&self, requests: &[SurprisalRequest]) -> Result<Vec<SurprisalResponse>> {
        Ok(requests
            .par_iter()
            .map(|r| SurprisalResponse {
                item_id: r.item_id.clone(),
                surprisal: self.score(r.prefix, &r.context, &r.target),
            })
            .collect())
    }
}

pub fn write_requests(path: &Path, requests: &[SurprisalRequest]) -> Result<()> {
    let mut buf = Vec::new();
    for r in requests {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_requests(path: &Path) -> Result<Vec<SurprisalRequest>> {
    read_jsonl(path)
}

pub fn write_responses(path: &Path, responses: &[SurprisalResponse]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in responses {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_responses(path: &Path) -> Result<Vec<SurprisalResponse>> {
    read_jsonl(path)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Joins responses to requests by `item_id` and checks the schema: one
/// finite, non-negative surprisal per target subword.
pub fn join_responses(
    requests: &[SurprisalRequest],
    responses: Vec<SurprisalResponse>,
) -> Result<Vec<SurprisalResponse>> {
    let mut by_id: HashMap<String, SurprisalResponse> = HashMap::with_capacity(responses.len());
    for r in responses {
        let id = r.item_id.clone();
        if by_id.insert(id.clone(), r).is_some() {
            return Err(Error::Backend {
                item_id: id,
                message: "duplicate response".into(),
            });
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(requests.len());
    for req in requests {
        if !seen.insert(req.item_id.as_str()) {
            return Err(Error::Backend {
                item_id: req.item_id.clone(),
                message: "duplicate request id".into(),
            });
        }
        let resp = by_id.remove(&req.item_id).ok_or_else(|| Error::Backend {
            item_id: req.item_id.clone(),
            message: "no response".into(),
        })?;
        if resp.surprisal.len() != req.target.len() {
            return Err(Error::Backend {
                item_id: req.item_id.clone(),
                message: format!(
                    "expected {} surprisals, got {}",
                    req.target.len(),
                    resp.surprisal.len()
                ),
            });
        }
        if let Some(bad) = resp.surprisal.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Backend {
                item_id: req.item_id.clone(),
                message: format!("invalid surprisal {bad}"),
            });
        }
        out.push(resp);
    }
    if let Some(extra) = by_id.into_keys().next() {
        return Err(Error::Backend {
            item_id: extra,
            message: "response for unknown item".into(),
        });
    }
    Ok(out)
}

/// Scores by running an external program over a request file.
///
/// `command` is split on whitespace; the tokens `{in}` and `{out}` are
/// replaced by the request and response paths.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub command: Vec<String>,
    pub workdir: PathBuf,
    pub timeout: Duration,
}

impl ExternalBackend {
    pub fn new(command: &str, workdir: impl Into<PathBuf>) -> Self {
        ExternalBackend {
            command: command.split_whitespace().map(String::from).collect(),
            workdir: workdir.into(),
            timeout: Duration::from_secs(3600),
        }
    }
}

impl Scorer for ExternalBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::External {
            command: self.command.clone(),
            bos_token: BOS.into(),
            break_token: BREAK.into(),
        }
    }

    fn score_batch(&self, requests: &[SurprisalRequest]) -> Result<Vec<SurprisalResponse>> {
        let first = requests.first().map(|r| r.item_id.clone()).unwrap_or_default();
        let fail = |message: String| Error::Backend {
            item_id: first.clone(),
            message,
        };
        std::fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        let req_path = self.workdir.join(format!("requests-{}.jsonl", std::process::id()));
        let resp_path = self.workdir.join(format!("responses-{}.jsonl", std::process::id()));
        write_requests(&req_path, requests)?;
        let _ = std::fs::remove_file(&resp_path);
        let args: Vec<String> = self
            .command
            .iter()
            .map(|a| {
                a.replace("{in}", &req_path.to_string_lossy())
                    .replace("{out}", &resp_path.to_string_lossy())
            })
            .collect();
        let (prog, rest) = args.split_first().ok_or_else(|| fail("empty backend command".into()))?;
        let mut child = Command::new(prog)
            .args(rest)
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| fail(format!("cannot start {prog}: {e}")))?;
        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() > self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(fail(format!("timed out after {:?}", self.timeout)));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(20)),
                Err(e) => return Err(fail(e.to_string())),
            }
        };
        if !status.success() {
            return Err(fail(format!("backend exited with {status}")));
        }
        let responses = read_responses(&resp_path).map_err(|e| fail(e.to_string()))?;
        join_responses(requests, responses)
    }
}

/// Textual backend selector used by the CLI: `builtin:<order>`,
/// `builtin-file:<path>` or `external:<command>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Builtin { order: usize },
    BuiltinFile { path: PathBuf },
    External { command: String },
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Builtin { order } => write!(f, "builtin:{order}"),
            BackendSpec::BuiltinFile { path } => write!(f, "builtin-file:{}", path.display()),
            BackendSpec::External { command } => write!(f, "external:{command}"),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid backend {s:?}"));
        if let Some(o) = s.strip_prefix("builtin:") {
            let order: usize = o.parse().map_err(|_| bad())?;
            if order == 0 {
                return Err(bad());
            }
            Ok(BackendSpec::Builtin { order })
        } else if let Some(p) = s.strip_prefix("builtin-file:") {
            Ok(BackendSpec::BuiltinFile { path: p.into() })
        } else if let Some(c) = s.strip_prefix("external:") {
            if c.trim().is_empty() {
                return Err(bad());
            }
            Ok(BackendSpec::External { command: c.into() })
        } else {
            Err(bad())
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

/// Counts of `n`-grams in a stream, for tests and diagnostics.
pub fn ngram_counts(stream: &[String], n: usize) -> BTreeMap<Vec<String>, u64> {
    let mut out = BTreeMap::new();
    for w in stream.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn count_dominance() {
        let m = NgramModel::train(&toks("a b a b"), 2).unwrap();
        assert!(m.prob("b", &["a"]) > m.prob("a", &["a"]));
    }

    #[test]
    fn hand_computed_bigram() {
        // vocab {<s>, <b>, <unk>, a, b}: V = 5; unigram counts a:2 b:2, N = 4
        let m = NgramModel::train(&toks("a b a b"), 2).unwrap();
        let p1_b = (2.0 - 0.75) / 4.0 + 0.75 * 2.0 / 4.0 / 5.0;
        let p_b_a = (2.0 - 0.75) / 2.0 + 0.75 * 1.0 / 2.0 * p1_b;
        assert!((p_b_a - 0.7703125f64).abs() < 1e-15);
        let s = m.score(Prefix::Bos, &toks("a"), &toks("b"));
        assert!((s[0] + p_b_a.ln()).abs() < 1e-12);
        let p1_a = p1_b;
        assert!((m.prob("a", &["a"]) - 0.75 * 0.5 * p1_a).abs() < 1e-15);
    }

    #[test]
    fn unigram_order() {
        let m = NgramModel::train(&toks("a a a b"), 1).unwrap();
        let v = m.vocab().len() as f64;
        let expect = (3.0 - 0.75) / 4.0 + 0.75 * 2.0 / 4.0 / v;
        assert!((m.prob("a", &["b", "a"]) - expect).abs() < 1e-15);
        assert!((m.prob("a", &[]) - expect).abs() < 1e-15);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(NgramModel::train(&[], 3), Err(Error::EmptyCorpus)));
        assert!(NgramModel::train(&toks("a"), 0).is_err());
    }

    fn flat_stream() -> Vec<String> {
        // 97 ordinary tokens plus the three reserved ones, each seen once
        let mut stream: Vec<String> = (0..97).map(|i| format!("t{i}")).collect();
        stream.extend([BOS, BREAK, UNK].map(String::from));
        stream
    }

    #[test]
    fn uniform_vocab_of_100() {
        let m = NgramModel::train_with_discount(&flat_stream(), 1, 0.0).unwrap();
        assert_eq!(m.vocab().len(), 100);
        let targets: Vec<String> = flat_stream()[..97].to_vec();
        let s = m.score(Prefix::Bos, &[], &targets);
        assert!(s.iter().all(|v| (v - 100f64.ln()).abs() < 1e-12));
        assert!((100f64.ln() - 4.605).abs() < 1e-3);
        let ppl = crate::surprisal::perplexity(&s).unwrap();
        assert!((ppl - 100.0).abs() < 1e-9);
    }

    #[test]
    fn certain_next_token() {
        let m = NgramModel::train_with_discount(&toks("x x x x x x"), 2, 0.0).unwrap();
        let s = m.score(Prefix::Bos, &toks("x"), &toks("x x"));
        assert!(s.iter().all(|v| v.abs() < 1e-12));
        assert!((crate::surprisal::perplexity(&s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_start_equals_empty_context() {
        let m = NgramModel::train(&toks("<s> a b <s> b a <s> a a"), 3).unwrap();
        let t = toks("a b");
        assert_eq!(m.score(Prefix::Bos, &[], &t), m.score(Prefix::Bos, &Vec::new(), &t));
        let direct: Vec<f64> = vec![-m.prob("a", &["<s>"]).ln(), -m.prob("b", &["<s>", "a"]).ln()];
        assert_eq!(m.score(Prefix::Bos, &[], &t), direct);
    }

    #[test]
    fn markov_chain_recovery() {
        let states = ["a", "b", "c"];
        let trans = [[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.3, 0.3, 0.4]];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sentences = Vec::new();
        for _ in 0..500 {
            let mut s = vec![];
            let mut cur = rng.gen_range(0..3);
            s.push(states[cur].to_string());
            for _ in 0..19 {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut next = 2;
                for (j, p) in trans[cur].iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = j;
                        break;
                    }
                }
                cur = next;
                s.push(states[cur].to_string());
            }
            sentences.push(s);
        }
        let m = NgramModel::train_sentences(&sentences, 2).unwrap();
        for (i, from) in states.iter().enumerate() {
            for (j, to) in states.iter().enumerate() {
                let p = m.prob(to, &[from]);
                assert!((p - trans[i][j]).abs() < 0.05, "{from}->{to}: {p}");
            }
        }
    }

    #[test]
    fn tsv_round_trip() {
        let m = NgramModel::train(&toks("<s> a b c <b> b c a <s> a a"), 3).unwrap();
        let text = m.to_tsv();
        let back = NgramModel::from_tsv(Path::new("m.tsv"), &text).unwrap();
        assert_eq!(back.to_tsv(), text);
        let ctx = toks("a b");
        assert_eq!(m.score(Prefix::Break, &ctx, &toks("c a")), back.score(Prefix::Break, &ctx, &toks("c a")));
        assert!(NgramModel::from_tsv(Path::new("m.tsv"), "order\t2\n").is_err());
    }

    #[test]
    fn join_checks_schema() {
        let req = |id: &str, n: usize| SurprisalRequest {
            item_id: id.into(),
            prefix: Prefix::Bos,
            context: vec![],
            target: vec!["x".into(); n],
        };
        let resp = |id: &str, v: Vec<f64>| SurprisalResponse {
            item_id: id.into(),
            surprisal: v,
        };
        let reqs = vec![req("1", 1), req("2", 2)];
        let ok = join_responses(&reqs, vec![resp("2", vec![1.0, 2.0]), resp("1", vec![0.5])]).unwrap();
        assert_eq!(ok[0].item_id, "1");
        assert_eq!(ok[1].surprisal, vec![1.0, 2.0]);
        let missing = join_responses(&reqs, vec![resp("1", vec![0.5])]);
        assert!(matches!(missing, Err(Error::Backend { item_id, .. }) if item_id == "2"));
        assert!(join_responses(&reqs, vec![resp("1", vec![0.5]), resp("2", vec![1.0])]).is_err());
        assert!(join_responses(&reqs, vec![resp("1", vec![-0.5]), resp("2", vec![1.0, 1.0])]).is_err());
    }

    #[test]
    fn exchange_wire_format() {
        let r = SurprisalRequest {
            item_id: "a|0|1".into(),
            prefix: Prefix::Break,
            context: toks("x y"),
            target: toks("z"),
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(line, r#"{"item_id":"a|0|1","prefix":"<b>","context":["x","y"],"target":["z"]}"#);
        let back: SurprisalResponse = serde_json::from_str(r#"{"item_id":"q","surprisal":[1.5]}"#).unwrap();
        assert_eq!(back.surprisal, vec![1.5]);
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("builtin:5".parse::<BackendSpec>().unwrap(), BackendSpec::Builtin { order: 5 });
        assert!("builtin:0".parse::<BackendSpec>().is_err());
        assert!("gpt2".parse::<BackendSpec>().is_err());
        let e: BackendSpec = "external:python3 adapter.py --in {in} --out {out}".parse().unwrap();
        assert_eq!(e.to_string(), "external:python3 adapter.py --in {in} --out {out}");
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(seed in any::<u64>(), order in 1usize..5, hist_len in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alphabet = ["a", "b", "c", "d", BOS, BREAK];
            let stream: Vec<String> = (0..60).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect();
            let m = NgramModel::train(&stream, order).unwrap();
            let hist: Vec<&str> = (0..hist_len).map(|_| alphabet[rng.gen_range(0..4)]).chain(["zz"]).collect();
            let total: f64 = m.vocab().iter().map(|v| m.prob(v, &hist)).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let s = m.score(Prefix::Break, &stream[..5], &stream[5..10]);
            prop_assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
