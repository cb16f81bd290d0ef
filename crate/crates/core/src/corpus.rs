//! Reading-time corpus ingestion, word covariates and data-point exclusion.
//!
//! Two tab-separated files describe a corpus. The stimulus file carries the
//! text side, one word per row:
//!
//! ```text
//! article_id  sentN  tokenN  surface  subwords  screenN  lineN  segmentN
//! ```
//!
//! and the fixation file carries one first-pass gaze duration per
//! (subject, word):
//!
//! ```text
//! subject_id  article_id  sentN  tokenN  gaze_duration_ms
//! ```
//!
//! Both files start with a header row naming the columns. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

/// Position of a word in the stimulus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WordKey {
    pub article_id: String,
    pub sent_n: usize,
    pub token_n: usize,
}

impl WordKey {
    pub fn new(article_id: impl Into<String>, sent_n: usize, token_n: usize) -> Self {
        WordKey {
            article_id: article_id.into(),
            sent_n,
            token_n,
        }
    }
}

impl fmt::Display for WordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.article_id, self.sent_n, self.token_n)
    }
}

/// One of the six exclusion criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    /// Zero gaze duration, or beyond three standard deviations.
    A,
    /// Contains punctuation.
    B,
    /// Contains numeric characters.
    C,
    /// The next segment has punctuation or numeric characters.
    D,
    /// First segment in a line.
    E,
    /// Last segment in a line.
    F,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::A,
        Criterion::B,
        Criterion::C,
        Criterion::D,
        Criterion::E,
        Criterion::F,
    ];

    pub fn from_char(c: char) -> Option<Self> {
        match c.to_ascii_lowercase() {
            'a' => Some(Criterion::A),
            'b' => Some(Criterion::B),
            'c' => Some(Criterion::C),
            'd' => Some(Criterion::D),
            'e' => Some(Criterion::E),
            'f' => Some(Criterion::F),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Criterion::A => 'a',
            Criterion::B => 'b',
            Criterion::C => 'c',
            Criterion::D => 'd',
            Criterion::E => 'e',
            Criterion::F => 'f',
        }
    }

    /// Parses a compact list such as `"ace"` or `"a,c,e"`.
    pub fn parse_set(s: &str) -> Result<BTreeSet<Criterion>> {
        s.chars()
            .filter(|c| !matches!(c, ',' | ' '))
            .map(|c| {
                Criterion::from_char(c)
                    .ok_or_else(|| Error::Config(format!("unknown exclusion criterion {c:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageProfile {
    #[default]
    English,
    Japanese,
}

impl LanguageProfile {
    /// English data uses every criterion; Japanese keeps (b), (d) and (f)
    /// points because bunsetsu units absorb punctuation and lines coincide
    /// with sentences.
    pub fn criteria(self) -> BTreeSet<Criterion> {
        match self {
            LanguageProfile::English => Criterion::ALL.into_iter().collect(),
            LanguageProfile::Japanese => [Criterion::A, Criterion::C, Criterion::E].into(),
        }
    }
}

impl FromStr for LanguageProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "english" | "en" => Ok(LanguageProfile::English),
            "japanese" | "ja" => Ok(LanguageProfile::Japanese),
            other => Err(Error::Config(format!("unknown language profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub surface: String,
    pub subwords: Vec<String>,
    pub screen_n: u32,
    pub line_n: u32,
    pub segment_n: u32,
    pub sent_n: usize,
    pub token_n: usize,
    pub char_length: usize,
    /// Word-level exclusion markers; only (b) through (f) are ever set here.
    pub flags: BTreeSet<Criterion>,
}

impl Word {
    pub fn new(surface: &str, subwords: Vec<String>, sent_n: usize, token_n: usize) -> Self {
        Word {
            surface: surface.to_string(),
            char_length: surface.chars().count(),
            subwords,
            screen_n: 0,
            line_n: 0,
            segment_n: 0,
            sent_n,
            token_n,
            flags: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_n: usize,
    pub words: Vec<Word>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub sentences: Vec<Sentence>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub articles: Vec<Article>,
}

impl Stimulus {
    /// Builds a stimulus from already-ordered articles, validating the
    /// structural invariants and computing word flags.
    pub fn from_articles(articles: Vec<Article>) -> Result<Self> {
        let mut stimulus = Stimulus { articles };
        stimulus.validate()?;
        stimulus.compute_flags();
        Ok(stimulus)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for article in &self.articles {
            if !seen.insert(article.article_id.as_str()) {
                return Err(Error::invalid(format!(
                    "article {} appears twice",
                    article.article_id
                )));
            }
            let mut sents = HashSet::new();
            for sentence in &article.sentences {
                if !sents.insert(sentence.sent_n) {
                    return Err(Error::invalid(format!(
                        "sentence {}/{} appears twice",
                        article.article_id, sentence.sent_n
                    )));
                }
                for (i, word) in sentence.words.iter().enumerate() {
                    if word.token_n != i {
                        return Err(Error::invalid(format!(
                            "{}/{}: tokenN must run 0,1,2,.. but found {} at position {i}",
                            article.article_id, sentence.sent_n, word.token_n
                        )));
                    }
                    if word.subwords.is_empty() {
                        return Err(Error::invalid(format!(
                            "{}/{}/{}: word has no subwords",
                            article.article_id, sentence.sent_n, word.token_n
                        )));
                    }
                    if detokenize(&word.subwords) != word.surface {
                        return Err(Error::invalid(format!(
                            "{}/{}/{}: subwords {:?} do not spell {:?}",
                            article.article_id,
                            sentence.sent_n,
                            word.token_n,
                            word.subwords,
                            word.surface
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Sets the word-level markers (b)–(f). Line boundaries are read from
    /// `lineN` changes within a screen, in presentation order.
    fn compute_flags(&mut self) {
        for article in &mut self.articles {
            let mut words: Vec<&mut Word> = article
                .sentences
                .iter_mut()
                .flat_map(|s| s.words.iter_mut())
                .collect();
            let n = words.len();
            let special: Vec<bool> = words
                .iter()
                .map(|w| has_punctuation(&w.surface) || has_numeric(&w.surface))
                .collect();
            let layout: Vec<(u32, u32)> = words.iter().map(|w| (w.screen_n, w.line_n)).collect();
            for (i, word) in words.iter_mut().enumerate() {
                word.flags.clear();
                if has_punctuation(&word.surface) {
                    word.flags.insert(Criterion::B);
                }
                if has_numeric(&word.surface) {
                    word.flags.insert(Criterion::C);
                }
                if i + 1 < n && special[i + 1] {
                    word.flags.insert(Criterion::D);
                }
                if i == 0 || layout[i - 1] != layout[i] {
                    word.flags.insert(Criterion::E);
                }
                if i + 1 == n || layout[i + 1] != layout[i] {
                    word.flags.insert(Criterion::F);
                }
            }
        }
    }

    pub fn article(&self, article_id: &str) -> Option<&Article> {
        self.articles.iter().find(|a| a.article_id == article_id)
    }

    pub fn word(&self, key: &WordKey) -> Option<&Word> {
        self.article(&key.article_id)?
            .sentences
            .iter()
            .find(|s| s.sent_n == key.sent_n)?
            .words
            .get(key.token_n)
    }

    /// All words with their keys in presentation order.
    pub fn words(&self) -> impl Iterator<Item = (WordKey, &Word)> {
        self.articles.iter().flat_map(|a| {
            a.sentences.iter().flat_map(move |s| {
                s.words
                    .iter()
                    .map(move |w| (WordKey::new(a.article_id.clone(), s.sent_n, w.token_n), w))
            })
        })
    }

    pub fn sentences(&self) -> impl Iterator<Item = (&str, &Sentence)> {
        self.articles
            .iter()
            .flat_map(|a| a.sentences.iter().map(move |s| (a.article_id.as_str(), s)))
    }

    pub fn word_count(&self) -> usize {
        self.sentences().map(|(_, s)| s.words.len()).sum()
    }

    /// Content hash of the stimulus, stable across runs and platforms.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (key, w) in self.words() {
            h.update(format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                key.article_id,
                key.sent_n,
                key.token_n,
                w.surface,
                w.subwords.join(" "),
                w.screen_n,
                w.line_n,
                w.segment_n
            ));
        }
        hex::encode(h.finalize())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = STIMULUS_HEADER.join("\t");
        out.push('\n');
        for (key, w) in self.words() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                key.article_id,
                key.sent_n,
                key.token_n,
                w.surface,
                w.subwords.join(" "),
                w.screen_n,
                w.line_n,
                w.segment_n
            ));
        }
        out
    }
}

/// Joins subwords into a surface form, dropping the word-boundary markers
/// common to subword tokenizers (`Ġ`, `▁`) and WordPiece continuation
/// prefixes (`##`).
pub fn detokenize(subwords: &[String]) -> String {
    let mut out = String::new();
    for sw in subwords {
        let s = sw
            .strip_prefix("##")
            .or_else(|| sw.strip_prefix('Ġ'))
            .or_else(|| sw.strip_prefix('▁'))
            .unwrap_or(sw);
        out.push_str(s);
    }
    out
}

pub fn has_punctuation(s: &str) -> bool {
    s.chars().any(|c| {
        matches!(
            get_general_category(c),
            GeneralCategory::ConnectorPunctuation
                | GeneralCategory::DashPunctuation
                | GeneralCategory::OpenPunctuation
                | GeneralCategory::ClosePunctuation
                | GeneralCategory::InitialPunctuation
                | GeneralCategory::FinalPunctuation
                | GeneralCategory::OtherPunctuation
        )
    })
}

pub fn has_numeric(s: &str) -> bool {
    // char::is_numeric covers exactly Nd, Nl and No.
    s.chars().any(char::is_numeric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub subject_id: String,
    pub article_id: String,
    pub sent_n: usize,
    pub token_n: usize,
    pub gaze_duration_ms: f64,
}

impl FixationRecord {
    pub fn word_key(&self) -> WordKey {
        WordKey::new(self.article_id.clone(), self.sent_n, self.token_n)
    }
}

pub const STIMULUS_HEADER: [&str; 8] = [
    "article_id",
    "sentN",
    "tokenN",
    "surface",
    "subwords",
    "screenN",
    "lineN",
    "segmentN",
];

pub const FIXATION_HEADER: [&str; 5] = [
    "subject_id",
    "article_id",
    "sentN",
    "tokenN",
    "gaze_duration_ms",
];

/// Splits a TSV body into (1-based line number, fields) pairs after
/// checking the header.
fn tsv_rows<'a>(
    path: &Path,
    text: &'a str,
    header: &[&str],
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (hline, hdr) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing header row".into(),
    })?;
    let got: Vec<&str> = hdr.split('\t').map(str::trim).collect();
    if got != header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: hline,
            message: format!("expected header {:?}, found {:?}", header, got),
        });
    }
    lines
        .map(|(n, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != header.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n,
                    message: format!("expected {} fields, found {}", header.len(), fields.len()),
                });
            }
            Ok((n, fields))
        })
        .collect()
}

fn parse_field<T: FromStr>(path: &Path, line: usize, name: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} value {value:?}"),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a stimulus TSV. Rows of one article must be contiguous; sentences
/// keep their first-appearance order.
pub fn parse_stimulus(path: &Path, text: &str) -> Result<Stimulus> {
    let mut articles: Vec<Article> = Vec::new();
    let mut article_pos: HashMap<String, usize> = HashMap::new();
    for (line, f) in tsv_rows(path, text, &STIMULUS_HEADER)? {
        let article_id = f[0].trim().to_string();
        let sent_n: usize = parse_field(path, line, "sentN", f[1])?;
        let token_n: usize = parse_field(path, line, "tokenN", f[2])?;
        let surface = f[3];
        let subwords: Vec<String> = f[4].split(' ').filter(|s| !s.is_empty()).map(String::from).collect();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        if surface.is_empty() {
            return Err(err("empty surface".into()));
        }
        if subwords.is_empty() {
            return Err(err("empty subword list".into()));
        }
        if detokenize(&subwords) != surface {
            return Err(err(format!("subwords {:?} do not spell {surface:?}", f[4])));
        }
        let mut word = Word::new(surface, subwords, sent_n, token_n);
        word.screen_n = parse_field(path, line, "screenN", f[5])?;
        word.line_n = parse_field(path, line, "lineN", f[6])?;
        word.segment_n = parse_field(path, line, "segmentN", f[7])?;

        let ai = match article_pos.get(&article_id) {
            Some(&i) if i + 1 == articles.len() => i,
            Some(_) => return Err(err(format!("rows of article {article_id} are not contiguous"))),
            None => {
                articles.push(Article {
                    article_id: article_id.clone(),
                    sentences: Vec::new(),
                });
                article_pos.insert(article_id, articles.len() - 1);
                articles.len() - 1
            }
        };
        let article = &mut articles[ai];
        let sentence = match article.sentences.last_mut() {
            Some(s) if s.sent_n == sent_n => s,
            _ => {
                if article.sentences.iter().any(|s| s.sent_n == sent_n) {
                    return Err(err(format!("rows of sentence {sent_n} are not contiguous")));
                }
                article.sentences.push(Sentence {
                    sent_n,
                    words: Vec::new(),
                });
                article.sentences.last_mut().unwrap()
            }
        };
        if token_n != sentence.words.len() {
            return Err(err(format!(
                "tokenN {token_n} out of sequence (expected {})",
                sentence.words.len()
            )));
        }
        sentence.words.push(word);
    }
    Stimulus::from_articles(articles)
}

pub fn parse_fixations(path: &Path, text: &str, stimulus: &Stimulus) -> Result<Vec<FixationRecord>> {
    let mut seen: HashSet<(String, WordKey)> = HashSet::new();
    let mut out = Vec::new();
    for (line, f) in tsv_rows(path, text, &FIXATION_HEADER)? {
        let rec = FixationRecord {
            subject_id: f[0].trim().to_string(),
            article_id: f[1].trim().to_string(),
            sent_n: parse_field(path, line, "sentN", f[2])?,
            token_n: parse_field(path, line, "tokenN", f[3])?,
            gaze_duration_ms: parse_field(path, line, "gaze_duration_ms", f[4])?,
        };
        if !rec.gaze_duration_ms.is_finite() || rec.gaze_duration_ms < 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("gaze duration must be a non-negative number, got {}", f[4]),
            });
        }
        let key = rec.word_key();
        if stimulus.word(&key).is_none() {
            return Err(Error::DanglingReference {
                path: path.to_path_buf(),
                line,
                article_id: key.article_id,
                sent: key.sent_n,
                token: key.token_n,
            });
        }
        if !seen.insert((rec.subject_id.clone(), key.clone())) {
            return Err(Error::DuplicateRecord {
                path: path.to_path_buf(),
                line,
                subject_id: rec.subject_id,
                article_id: key.article_id,
                sent: key.sent_n,
                token: key.token_n,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn ingest_corpus(stimulus_file: &Path, fixation_file: &Path) -> Result<(Stimulus, Vec<FixationRecord>)> {
    let stimulus = parse_stimulus(stimulus_file, &read_text(stimulus_file)?)?;
    let fixations = parse_fixations(fixation_file, &read_text(fixation_file)?, &stimulus)?;
    Ok((stimulus, fixations))
}

pub fn fixations_to_tsv(records: &[FixationRecord]) -> String {
    let mut out = FIXATION_HEADER.join("\t");
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.subject_id, r.article_id, r.sent_n, r.token_n, r.gaze_duration_ms
        ));
    }
    out
}

/// Subword counts for the `freq` covariate.
///
/// Relative frequencies are add-one smoothed over the known vocabulary plus
/// one bucket shared by all unseen subwords, so every subword gets a
/// positive probability.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrequencyModel {
    pub subword_counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl FrequencyModel {
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut subword_counts = BTreeMap::new();
        for (s, c) in counts {
            *subword_counts.entry(s).or_insert(0) += c;
        }
        let total = subword_counts.values().sum();
        FrequencyModel {
            subword_counts,
            total,
        }
    }

    /// Counts every subword token occurring in the stimulus.
    pub fn from_stimulus(stimulus: &Stimulus) -> Self {
        Self::from_counts(
            stimulus
                .words()
                .flat_map(|(_, w)| w.subwords.iter().map(|s| (s.clone(), 1))),
        )
    }

    pub fn parse_tsv(path: &Path, text: &str) -> Result<Self> {
        let mut counts = Vec::new();
        for (line, f) in tsv_rows(path, text, &["subword", "count"])? {
            counts.push((f[0].to_string(), parse_field(path, line, "count", f[1])?));
        }
        Ok(Self::from_counts(counts))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_tsv(path, &read_text(path)?)
    }

    pub fn relative_frequency(&self, subword: &str) -> f64 {
        let count = self.subword_counts.get(subword).copied().unwrap_or(0);
        let denom = self.total + self.subword_counts.len() as u64 + 1;
        (count + 1) as f64 / denom as f64
    }
}

/// Geometric mean of positive values.
pub fn geometric_mean(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let s: f64 = values.iter().map(|v| v.ln()).sum();
    (s / values.len() as f64).exp()
}

/// Frequency of a word: geometric mean of its subwords' relative
/// frequencies.
pub fn word_frequency(word: &Word, fm: &FrequencyModel) -> f64 {
    let freqs: Vec<f64> = word.subwords.iter().map(|s| fm.relative_frequency(s)).collect();
    geometric_mean(&freqs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierGrouping {
    #[default]
    PerSubject,
    Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRule {
    pub grouping: OutlierGrouping,
    pub sd_multiplier: f64,
}

impl Default for OutlierRule {
    fn default() -> Self {
        OutlierRule {
            grouping: OutlierGrouping::PerSubject,
            sd_multiplier: 3.0,
        }
    }
}

/// Filters fixation records by the given criteria.
///
/// Word-level criteria (b)–(f) are read from the word flags. Criterion (a)
/// drops zero durations, then repeatedly trims durations beyond
/// `sd_multiplier` standard deviations from the group mean until no record
/// is removed; the fixed point makes the filter idempotent.
pub fn apply_exclusions(
    stimulus: &Stimulus,
    fixations: &[FixationRecord],
    criteria: &BTreeSet<Criterion>,
    rule: OutlierRule,
) -> Vec<FixationRecord> {
    let mut kept: Vec<&FixationRecord> = fixations
        .iter()
        .filter(|r| {
            let Some(word) = stimulus.word(&r.word_key()) else {
                return false;
            };
            if word.flags.iter().any(|f| criteria.contains(f)) {
                return false;
            }
            !(criteria.contains(&Criterion::A) && r.gaze_duration_ms == 0.0)
        })
        .collect();

    if criteria.contains(&Criterion::A) {
        loop {
            let mut groups: HashMap<&str, (f64, f64, usize)> = HashMap::new();
            for r in &kept {
                let g = match rule.grouping {
                    OutlierGrouping::PerSubject => r.subject_id.as_str(),
                    OutlierGrouping::Corpus => "",
                };
                let e = groups.entry(g).or_insert((0.0, 0.0, 0));
                e.0 += r.gaze_duration_ms;
                e.2 += 1;
            }
            for r in &kept {
                let g = match rule.grouping {
                    OutlierGrouping::PerSubject => r.subject_id.as_str(),
                    OutlierGrouping::Corpus => "",
                };
                let e = groups.get_mut(g).unwrap();
                let mean = e.0 / e.2 as f64;
                e.1 += (r.gaze_duration_ms - mean).powi(2);
            }
            let before = kept.len();
            kept.retain(|r| {
                let g = match rule.grouping {
                    OutlierGrouping::PerSubject => r.subject_id.as_str(),
                    OutlierGrouping::Corpus => "",
                };
                let (sum, ss, n) = groups[g];
                if n < 2 {
                    return true;
                }
                let mean = sum / n as f64;
                let sd = (ss / (n - 1) as f64).sqrt();
                (r.gaze_duration_ms - mean).abs() <= rule.sd_multiplier * sd
            });
            if kept.len() == before {
                break;
            }
        }
    }
    kept.into_iter().cloned().collect()
}
