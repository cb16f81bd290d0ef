//! Synthetic corpora with a planted reading-time effect.
//!
//! Text comes from an order-5 source: the next-word logits are a bigram
//! table plus skip-gram terms tying the word to each of the three words
//! before its predecessor. Gaze durations are an affine function of the
//! true bigram surprisal, so a regression on 2-gram surprisal should beat
//! one on longer-context surprisal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{fixations_to_tsv, Article, FixationRecord, Sentence, Stimulus, Word, WordKey};
use crate::error::{Error, Result};

const SURFACES: [&str; 16] = [
    "ka", "tor", "mely", "sanu", "birok", "dalen", "fumita", "gorast", "holveni", "jusk", "lom", "nerapi", "otu",
    "pelisar", "quon", "rivatemo",
];

/// Subword split of a synthetic surface. Two words are split so that word
/// surprisal really is a sum over pieces.
pub fn subwords_of(surface: &str) -> Vec<String> {
    match surface {
        "pelisar" => vec!["peli".into(), "##sar".into()],
        "rivatemo" => vec!["riva".into(), "##temo".into()],
        s => vec![s.to_string()],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub bigram_scale: f64,
    /// Scale of the skip-gram terms at distances 2, 3 and 4.
    pub skip_scales: [f64; 3],
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            bigram_scale: 1.5,
            skip_scales: [1.6, 1.3, 1.0],
            min_sentence_len: 8,
            max_sentence_len: 14,
        }
    }
}

/// Order-5 word source. Index `V` stands for the sentence start.
#[derive(Debug, Clone)]
pub struct SourceModel {
    params: SourceParams,
    bigram: Vec<f64>,
    skip: [Vec<f64>; 3],
}

impl SourceModel {
    pub fn new(seed: u64, params: SourceParams) -> Self {
        let v = SURFACES.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut table = |scale: f64| -> Vec<f64> { (0..(v + 1) * v).map(|_| scale * std.sample(&mut rng)).collect() };
        let bigram = table(params.bigram_scale);
        let skip = [table(params.skip_scales[0]), table(params.skip_scales[1]), table(params.skip_scales[2])];
        SourceModel { params, bigram, skip }
    }

    pub fn vocab_size(&self) -> usize {
        SURFACES.len()
    }

    pub fn surface(&self, w: usize) -> &'static str {
        SURFACES[w]
    }

    /// Next-word distribution given the sentence so far.
    pub fn distribution(&self, sentence: &[usize]) -> Vec<f64> {
        let v = self.vocab_size();
        let back = |d: usize| if sentence.len() >= d { sentence[sentence.len() - d] } else { v };
        let mut logits: Vec<f64> = (0..v).map(|w| self.bigram[back(1) * v + w]).collect();
        for (k, table) in self.skip.iter().enumerate() {
            let h = back(k + 2);
            for (w, l) in logits.iter_mut().enumerate() {
                *l += table[h * v + w];
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        p
    }

    pub fn sample_sentence(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.gen_range(self.params.min_sentence_len..=self.params.max_sentence_len);
        let mut s = Vec::with_capacity(len);
        for _ in 0..len {
            let p = self.distribution(&s);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (w, pw) in p.iter().enumerate() {
                acc += pw;
                if u < acc {
                    pick = w;
                    break;
                }
            }
            s.push(pick);
        }
        s
    }

    pub fn sample_corpus(&self, n_sentences: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_sentences).map(|_| self.sample_sentence(&mut rng)).collect()
    }

    /// Subword rendering of sampled sentences, one token list per sentence.
    pub fn render(&self, sentences: &[Vec<usize>]) -> Vec<Vec<String>> {
        sentences
            .iter()
            .map(|s| s.iter().flat_map(|&w| subwords_of(self.surface(w))).collect())
            .collect()
    }
}

/// Bigram surprisal (nats) of the source, estimated from a large sample
/// independent of any study text. Row `V` conditions on the sentence start.
#[derive(Debug, Clone)]
pub struct BigramOracle {
    v: usize,
    surprisal: Vec<f64>,
}

impl BigramOracle {
    pub fn estimate(model: &SourceModel, n_sentences: usize, seed: u64) -> Self {
        let v = model.vocab_size();
        let mut counts = vec![0.5f64; (v + 1) * v];
        for s in model.sample_corpus(n_sentences, seed) {
            let mut prev = v;
            for w in s {
                counts[prev * v + w] += 1.0;
                prev = w;
            }
        }
        let mut surprisal = vec![0.0; counts.len()];
        for h in 0..=v {
            let row = &counts[h * v..(h + 1) * v];
            let total: f64 = row.iter().sum();
            for w in 0..v {
                surprisal[h * v + w] = -(row[w] / total).ln();
            }
        }
        BigramOracle { v, surprisal }
    }

    /// Surprisal of `w` after `prev` (`None` at sentence start).
    pub fn surprisal(&self, prev: Option<usize>, w: usize) -> f64 {
        self.surprisal[prev.unwrap_or(self.v) * self.v + w]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    pub source: SourceParams,
    pub n_articles: usize,
    pub sentences_per_article: usize,
    pub n_subjects: usize,
    pub train_sentences: usize,
    pub oracle_sentences: usize,
    pub words_per_line: usize,
    pub lines_per_screen: usize,
    pub intercept_ms: f64,
    pub surprisal_ms: f64,
    pub length_ms: f64,
    pub sd_article: f64,
    pub sd_subject: f64,
    pub sd_noise: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seed: 1,
            source: SourceParams::default(),
            n_articles: 10,
            sentences_per_article: 14,
            n_subjects: 10,
            train_sentences: 40_000,
            oracle_sentences: 200_000,
            words_per_line: 9,
            lines_per_screen: 5,
            intercept_ms: 150.0,
            surprisal_ms: 25.0,
            length_ms: 6.0,
            sd_article: 15.0,
            sd_subject: 25.0,
            sd_noise: 30.0,
        }
    }
}

impl StudyConfig {
    /// A few articles and subjects; enough to exercise every command.
    pub fn toy(seed: u64) -> Self {
        StudyConfig {
            seed,
            n_articles: 3,
            sentences_per_article: 6,
            n_subjects: 4,
            train_sentences: 3_000,
            oracle_sentences: 20_000,
            ..StudyConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticStudy {
    pub stimulus: Stimulus,
    pub fixations: Vec<FixationRecord>,
    /// Subword-tokenized LM training sentences, disjoint from the stimulus.
    pub training: Vec<Vec<String>>,
    pub true_bigram_surprisal: BTreeMap<WordKey, f64>,
    /// Head of every stimulus word (`None` for roots) with a relation label.
    pub dependencies: BTreeMap<WordKey, (Option<usize>, String)>,
}

const LABELS: [&str; 6] = ["nsubj", "obj", "obl", "advmod", "amod", "det"];

// Seed streams: 0 source, 1 oracle sample, 2 training text, 3 stimulus
// text, 4 gaze, 5 dependencies.
use crate::pipeline::derive_seed as sub_seed;

pub fn generate_study(cfg: &StudyConfig) -> Result<SyntheticStudy> {
    if cfg.n_articles == 0 || cfg.sentences_per_article == 0 || cfg.n_subjects == 0 {
        return Err(Error::invalid("synthetic study needs articles, sentences and subjects"));
    }
    if cfg.words_per_line == 0 || cfg.lines_per_screen == 0 {
        return Err(Error::invalid("layout sizes must be positive"));
    }
    let model = SourceModel::new(sub_seed(cfg.seed, 0), cfg.source);
    let oracle = BigramOracle::estimate(&model, cfg.oracle_sentences, sub_seed(cfg.seed, 1));
    let training = model.render(&model.sample_corpus(cfg.train_sentences, sub_seed(cfg.seed, 2)));
    let text = model.sample_corpus(cfg.n_articles * cfg.sentences_per_article, sub_seed(cfg.seed, 3));

    let mut articles = Vec::new();
    let mut true_s = BTreeMap::new();
    let mut dependencies = BTreeMap::new();
    let mut dep_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 5));
    for a in 0..cfg.n_articles {
        let article_id = format!("art{:02}", a + 1);
        let mut pos = 0usize;
        let mut sentences = Vec::new();
        for s in 0..cfg.sentences_per_article {
            let ws = &text[a * cfg.sentences_per_article + s];
            let mut words = Vec::new();
            for (t, &w) in ws.iter().enumerate() {
                let surface = model.surface(w);
                let mut word = Word::new(surface, subwords_of(surface), s, t);
                let line = pos / cfg.words_per_line;
                word.screen_n = (line / cfg.lines_per_screen + 1) as u32;
                word.line_n = (line % cfg.lines_per_screen + 1) as u32;
                word.segment_n = (pos % cfg.words_per_line + 1) as u32;
                pos += 1;
                words.push(word);
                let key = WordKey::new(article_id.clone(), s, t);
                let prev = t.checked_sub(1).map(|p| ws[p]);
                true_s.insert(key.clone(), oracle.surprisal(prev, w));
                let head = if t + 1 == ws.len() {
                    None
                } else if dep_rng.gen_bool(0.3) && t > 0 {
                    Some(dep_rng.gen_range(0..t))
                } else {
                    Some(dep_rng.gen_range(t + 1..ws.len().min(t + 9)))
                };
                dependencies.insert(key, (head, LABELS[dep_rng.gen_range(0..LABELS.len())].to_string()));
            }
            sentences.push(Sentence { sent_n: s, words });
        }
        articles.push(Article { article_id, sentences });
    }
    let stimulus = Stimulus::from_articles(articles)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4));
    let article_fx: BTreeMap<String, f64> = stimulus
        .articles
        .iter()
        .map(|a| (a.article_id.clone(), cfg.sd_article * rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    let subject_fx: Vec<f64> = (0..cfg.n_subjects)
        .map(|_| cfg.sd_subject * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let mut fixations = Vec::new();
    for (si, sfx) in subject_fx.iter().enumerate() {
        for (key, word) in stimulus.words() {
            let eps: f64 = rng.sample(rand_distr::StandardNormal);
            let gd = cfg.intercept_ms
                + cfg.surprisal_ms * true_s[&key]
                + cfg.length_ms * word.char_length as f64
                + article_fx[&key.article_id]
                + sfx
                + cfg.sd_noise * eps;
            fixations.push(FixationRecord {
                subject_id: format!("sub{:02}", si + 1),
                article_id: key.article_id.clone(),
                sent_n: key.sent_n,
                token_n: key.token_n,
                gaze_duration_ms: gd.max(1.0).round(),
            });
        }
    }
    Ok(SyntheticStudy {
        stimulus,
        fixations,
        training,
        true_bigram_surprisal: true_s,
        dependencies,
    })
}

impl SyntheticStudy {
    pub fn dependency_tsv(&self) -> String {
        let mut s = String::from("article_id\tsentN\ttokenN\thead_tokenN\trelation_label\n");
        for (k, (head, label)) in &self.dependencies {
            let h = head.map_or("-1".to_string(), |h| h.to_string());
            let _ = writeln!(s, "{}\t{}\t{}\t{h}\t{label}", k.article_id, k.sent_n, k.token_n);
        }
        s
    }

    pub fn training_text(&self) -> String {
        let mut s = String::new();
        for sent in &self.training {
            s.push_str(&sent.join(" "));
            s.push('\n');
        }
        s
    }

    /// Writes `stimulus.tsv`, `fixations.tsv`, `train.txt` and
    /// `dependencies.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("stimulus.tsv", self.stimulus.to_tsv()),
            ("fixations.tsv", fixations_to_tsv(&self.fixations)),
            ("train.txt", self.training_text()),
            ("dependencies.tsv", self.dependency_tsv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
