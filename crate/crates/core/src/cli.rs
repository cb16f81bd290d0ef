//! The `lsl` command line.
//!
//! Every command reads and writes files below the output directory:
//!
//! ```text
//! corpus/stimulus.tsv, corpus/fixations.tsv, corpus/kept.tsv, corpus/manifest.json   ingest
//! lm/builtin-<order>.tsv                                                               surprisal (builtin)
//! surprisal/<config>.tsv [+ <config>.base2.tsv]                                        surprisal
//! fits/<config>/{with,without}.json, {with,without}.residuals.tsv, summary.json        fit
//! ppp.tsv                                                                              ppp
//! compare/<a>__<b>.json                                                                compare
//! elc/<short>__<full>.tsv, elc/<short>__<full>.json                                    elc
//! analysis/<mode>.csv, analysis/<mode>.json                                            analyze-dependency
//! report/curve.csv, report/scatter.csv                                                 report
//! ```
//!
//! Sub-seeds come from the master seed via [`derive_seed`]: stream 1 seeds
//! the optimizer restarts, stream 2 the permutation test.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{filter_latter_half, group_elc, grouped_values, report_curves, DependencyAnnotation, GroupMode, GroupOptions, PppRecord};
use crate::corpus::{fixations_to_tsv, ingest_corpus, parse_fixations, parse_stimulus, read_text, Criterion, FrequencyModel, LanguageProfile, OutlierGrouping, OutlierRule, Stimulus};
use crate::error::{Error, Result};
use crate::lm::{BackendSpec, ExternalBackend, NgramModel, Scorer};
use crate::noise::NoiseSpec;
use crate::pipeline::{derive_seed, exclude, fit_table, AnalysisOptions};
use crate::regress::{DesignOptions, FitOptions, FitResult, RowKey, RowOptions};
use crate::stats::{align_residuals, oneway_anova, permutation_test_pairs, TestReport, DEFAULT_PERMUTATIONS};
use crate::surprisal::{compute_table, config_id, PrefixMode, SurprisalTable};
use crate::synth::{generate_study, StudyConfig};
use crate::traindata::{modify_training_file, parse_sentences};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    E,
    #[value(name = "2")]
    #[serde(rename = "2")]
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionConfig {
    pub log_freq: bool,
    pub standardize: bool,
    /// Exclusion criteria letters, e.g. `"abcdef"`; the language profile's
    /// set when absent.
    pub criteria: Option<String>,
    pub outlier_grouping: OutlierGrouping,
    pub sd_multiplier: f64,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        RegressionConfig {
            log_freq: true,
            standardize: true,
            criteria: None,
            outlier_grouping: OutlierGrouping::PerSubject,
            sd_multiplier: 3.0,
            restarts: f.restarts,
            max_iter: f.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub permutations: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            permutations: DEFAULT_PERMUTATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub short: NoiseSpec,
    pub full: NoiseSpec,
    pub long_dep_min_distance: usize,
    pub min_group_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let g = GroupOptions::default();
        AnalysisConfig {
            short: NoiseSpec::Ngram { n: 2 },
            full: NoiseSpec::Identity,
            long_dep_min_distance: g.long_dep_min_distance,
            min_group_size: g.min_group_size,
        }
    }
}

/// Run configuration: TOML file values, then command-line overrides.
/// Relative paths in a file are resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub language: LanguageProfile,
    pub stimulus: Option<PathBuf>,
    pub fixations: Option<PathBuf>,
    /// LM training text for builtin backends, one sentence per line.
    pub lm_train: Option<PathBuf>,
    /// Subword counts (`subword<TAB>count`) for the frequency covariate.
    pub freq: Option<PathBuf>,
    pub dependencies: Option<PathBuf>,
    pub backend: BackendSpec,
    pub noise: Vec<NoiseSpec>,
    pub prefix_mode: PrefixMode,
    pub log_base: LogBase,
    pub jobs: Option<usize>,
    pub regression: RegressionConfig,
    pub stats: StatsConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("lsl-out"),
            language: LanguageProfile::English,
            stimulus: None,
            fixations: None,
            lm_train: None,
            freq: None,
            dependencies: None,
            backend: BackendSpec::Builtin { order: 5 },
            noise: vec![NoiseSpec::Ngram { n: 2 }, NoiseSpec::Identity],
            prefix_mode: PrefixMode::Adaptive,
            log_base: LogBase::E,
            jobs: None,
            regression: RegressionConfig::default(),
            stats: StatsConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut cfg.stimulus);
        fix(&mut cfg.fixations);
        fix(&mut cfg.lm_train);
        fix(&mut cfg.freq);
        fix(&mut cfg.dependencies);
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        if let BackendSpec::BuiltinFile { path } = &mut cfg.backend {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, ignoring `out` and `jobs`, which
    /// cannot change any result.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.jobs = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn analysis_options(&self) -> Result<AnalysisOptions> {
        let criteria = match &self.regression.criteria {
            Some(s) => Some(Criterion::parse_set(s)?),
            None => None,
        };
        Ok(AnalysisOptions {
            profile: self.language,
            criteria,
            outlier: OutlierRule {
                grouping: self.regression.outlier_grouping,
                sd_multiplier: self.regression.sd_multiplier,
            },
            rows: RowOptions {
                log_freq: self.regression.log_freq,
            },
            design: DesignOptions {
                standardize: self.regression.standardize,
            },
            fit: FitOptions {
                restarts: self.regression.restarts,
                max_iter: self.regression.max_iter,
                seed: derive_seed(self.seed, 1),
                ..FitOptions::default()
            },
        })
    }

    fn require(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let p = p
            .clone()
            .ok_or_else(|| Error::Config(format!("no {what} file configured (set `{what}` or pass --{what})")))?;
        if !p.exists() {
            return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
        }
        Ok(p)
    }
}

#[derive(Debug, Parser)]
#[command(name = "lsl", version, about = "Lossy-context surprisal and reading-time analysis")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Noise specification; repeat for several (replaces the configured list).
    #[arg(long = "noise", global = true)]
    pub noise: Vec<NoiseSpec>,
    /// builtin:<order>, builtin-file:<path> or external:<command with {in} {out}>.
    #[arg(long, global = true)]
    pub backend: Option<BackendSpec>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "LSL_JOBS")]
    pub jobs: Option<usize>,
    /// Logarithm base for exported surprisal values.
    #[arg(long, global = true, value_enum)]
    pub log_base: Option<LogBase>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus and apply the exclusion criteria.
    Ingest(IngestArgs),
    /// Score every word under each noise specification.
    Surprisal(SurprisalArgs),
    /// Fit the nested mixed-effects models for each surprisal table.
    Fit,
    /// Print and persist PPP per configuration.
    Ppp,
    /// Paired permutation test on the squared residuals of two configurations.
    Compare(CompareArgs),
    /// Per-point effectiveness of long context.
    Elc(ElcArgs),
    /// Group ELC by dependency locality or type.
    AnalyzeDependency(DependencyArgs),
    /// Split and patch a training corpus with <s>/<b>.
    ModifyTrainingData(ModifyArgs),
    /// PPP-vs-context-length and PPL/PPP tables.
    Report(ReportArgs),
    /// Write a synthetic corpus with a planted 2-gram effect.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub stimulus: Option<PathBuf>,
    #[arg(long)]
    pub fixations: Option<PathBuf>,
    /// english or japanese.
    #[arg(long)]
    pub language: Option<LanguageProfile>,
}

#[derive(Debug, Args)]
pub struct SurprisalArgs {
    /// Training text for builtin backends.
    #[arg(long)]
    pub lm_train: Option<PathBuf>,
    /// Force <s> in front of every context.
    #[arg(long)]
    pub always_bos: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub a: NoiseSpec,
    #[arg(long)]
    pub b: NoiseSpec,
    #[arg(long)]
    pub permutations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ElcArgs {
    #[arg(long)]
    pub short: Option<NoiseSpec>,
    #[arg(long)]
    pub full: Option<NoiseSpec>,
}

#[derive(Debug, Args)]
pub struct DependencyArgs {
    #[arg(long)]
    pub dependencies: Option<PathBuf>,
    /// by_locality or by_type.
    #[arg(long, default_value = "by_locality")]
    pub mode: GroupMode,
    /// Keep only points at or after the median word position.
    #[arg(long)]
    pub latter_half: bool,
    /// Explicit 1-based position threshold for --latter-half.
    #[arg(long)]
    pub threshold: Option<usize>,
    #[arg(long)]
    pub short: Option<NoiseSpec>,
    #[arg(long)]
    pub full: Option<NoiseSpec>,
}

#[derive(Debug, Args)]
pub struct ModifyArgs {
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to aggregate (default: --out).
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Small corpus for smoke tests.
    #[arg(long)]
    pub toy: bool,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if !cli.noise.is_empty() {
        cfg.noise = cli.noise.clone();
    }
    if let Some(b) = &cli.backend {
        cfg.backend = b.clone();
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(l) = cli.log_base {
        cfg.log_base = l;
    }
    match &cli.command {
        Command::Ingest(a) => {
            if a.stimulus.is_some() {
                cfg.stimulus = a.stimulus.clone();
            }
            if a.fixations.is_some() {
                cfg.fixations = a.fixations.clone();
            }
            if let Some(l) = a.language {
                cfg.language = l;
            }
        }
        Command::Surprisal(a) => {
            if a.lm_train.is_some() {
                cfg.lm_train = a.lm_train.clone();
            }
            if a.always_bos {
                cfg.prefix_mode = PrefixMode::AlwaysBos;
            }
        }
        Command::AnalyzeDependency(a) if a.dependencies.is_some() => {
            cfg.dependencies = a.dependencies.clone();
        }
        _ => {}
    }
    if cfg.noise.is_empty() {
        return Err(Error::Config("at least one noise specification is required".into()));
    }
    Ok(cfg)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if let Some(j) = cfg.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // only the first pool configuration in a process takes effect
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let ctx = Ctx {
        hash: cfg.hash(),
        cfg,
    };
    match &cli.command {
        Command::Ingest(_) => ctx.ingest(),
        Command::Surprisal(_) => ctx.surprisal(),
        Command::Fit => ctx.fit(),
        Command::Ppp => ctx.ppp(),
        Command::Compare(a) => ctx.compare(a),
        Command::Elc(a) => ctx.elc(a.short.as_ref(), a.full.as_ref()).map(|_| ()),
        Command::AnalyzeDependency(a) => ctx.analyze_dependency(a),
        Command::ModifyTrainingData(a) => {
            let n = modify_training_file(&a.input, &a.output, ctx.cfg.seed)?;
            println!("rewrote {n} sentences into {}", a.output.display());
            Ok(())
        }
        Command::Report(a) => ctx.report(a),
        Command::Synth(a) => {
            let sc = if a.toy {
                StudyConfig::toy(ctx.cfg.seed)
            } else {
                StudyConfig {
                    seed: ctx.cfg.seed,
                    ..StudyConfig::default()
                }
            };
            let study = generate_study(&sc)?;
            study.write(&ctx.cfg.out)?;
            println!(
                "wrote {} words, {} fixations to {}",
                study.stimulus.word_count(),
                study.fixations.len(),
                ctx.cfg.out.display()
            );
            Ok(())
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
}

/// File-name form of a configuration id.
pub fn slug(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require_artifact(path: PathBuf, command: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, command })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    corpus_hash: String,
    words: usize,
    fixations: usize,
    kept: usize,
    criteria: String,
    config_hash: String,
    tool_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitSummary {
    config_id: String,
    noise: NoiseSpec,
    seed: u64,
    n_rows: usize,
    loglik_with: f64,
    loglik_without: f64,
    ppp: f64,
    chisq_p: f64,
    ppl: f64,
    corpus_hash: String,
    config_hash: String,
    tool_version: String,
}

impl Ctx {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn backend_label(&self) -> String {
        match &self.cfg.backend {
            BackendSpec::Builtin { order } => format!("builtin{order}"),
            BackendSpec::BuiltinFile { path } => {
                format!("builtin-file-{}", path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default())
            }
            BackendSpec::External { command } => {
                format!("external-{}", &hex::encode(Sha256::digest(command.as_bytes()))[..8])
            }
        }
    }

    fn config_id(&self, noise: &NoiseSpec) -> String {
        config_id(&self.backend_label(), noise)
    }

    fn load_corpus(&self) -> Result<(Stimulus, Vec<crate::corpus::FixationRecord>)> {
        let sp = require_artifact(self.out("corpus/stimulus.tsv"), "ingest")?;
        let kp = require_artifact(self.out("corpus/kept.tsv"), "ingest")?;
        let stim = parse_stimulus(&sp, &read_text(&sp)?)?;
        let kept = parse_fixations(&kp, &read_text(&kp)?, &stim)?;
        Ok((stim, kept))
    }

    fn ingest(&self) -> Result<()> {
        let sp = self.cfg.require(&self.cfg.stimulus, "stimulus")?;
        let fp = self.cfg.require(&self.cfg.fixations, "fixations")?;
        let (stim, fix) = ingest_corpus(&sp, &fp)?;
        let opts = self.cfg.analysis_options()?;
        let kept = exclude(&stim, &fix, &opts);
        write(&self.out("corpus/stimulus.tsv"), &stim.to_tsv())?;
        write(&self.out("corpus/fixations.tsv"), &fixations_to_tsv(&fix))?;
        write(&self.out("corpus/kept.tsv"), &fixations_to_tsv(&kept))?;
        let manifest = CorpusManifest {
            corpus_hash: stim.content_hash(),
            words: stim.word_count(),
            fixations: fix.len(),
            kept: kept.len(),
            criteria: opts.criteria().iter().map(|c| c.as_char()).collect(),
            config_hash: self.hash.clone(),
            tool_version: TOOL_VERSION.into(),
        };
        write(&self.out("corpus/manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
        println!(
            "{} words, {} fixations, {} kept after exclusions ({})",
            manifest.words, manifest.fixations, manifest.kept, manifest.criteria
        );
        Ok(())
    }

    fn scorer(&self, stim: &Stimulus) -> Result<Box<dyn Scorer>> {
        match &self.cfg.backend {
            BackendSpec::Builtin { order } => {
                let cache = self.out(&format!("lm/builtin-{order}.tsv"));
                let sentences = match &self.cfg.lm_train {
                    Some(p) => parse_sentences(&read_text(p)?),
                    None => {
                        log::warn!("no lm_train file; training the builtin model on the stimulus itself");
                        stim.sentences()
                            .map(|(_, s)| s.words.iter().flat_map(|w| w.subwords.iter().cloned()).collect())
                            .collect()
                    }
                };
                let model = NgramModel::train_sentences(&sentences, *order)?;
                write(&cache, &model.to_tsv())?;
                Ok(Box::new(model))
            }
            BackendSpec::BuiltinFile { path } => Ok(Box::new(NgramModel::load(path)?)),
            BackendSpec::External { command } => Ok(Box::new(ExternalBackend::new(command, self.out("backend")))),
        }
    }

    fn table_path(&self, noise: &NoiseSpec) -> PathBuf {
        self.out(&format!("surprisal/{}.tsv", slug(&self.config_id(noise))))
    }

    fn surprisal(&self) -> Result<()> {
        let (stim, _) = self.load_corpus()?;
        let scorer = self.scorer(&stim)?;
        let corpus_hash = stim.content_hash();
        for noise in &self.cfg.noise {
            let path = self.table_path(noise);
            let id = self.config_id(noise);
            let cached = SurprisalTable::load(&path).ok().filter(|t| {
                t.config_id == id
                    && t.corpus_hash() == Some(corpus_hash.as_str())
                    && t.meta.get("config_hash") == Some(&self.hash)
            });
            let table = match cached {
                Some(t) => {
                    log::info!("reusing {}", path.display());
                    t
                }
                None => {
                    let mut t = compute_table(&stim, noise, scorer.as_ref(), &self.backend_label(), self.cfg.prefix_mode)?;
                    t.meta.insert("config_hash".into(), self.hash.clone());
                    t.meta.insert("tool_version".into(), TOOL_VERSION.into());
                    t.meta.insert("backend".into(), self.cfg.backend.to_string());
                    write(&path, &t.to_tsv())?;
                    t
                }
            };
            if self.cfg.log_base == LogBase::Two {
                write(&path.with_extension("base2.tsv"), &table.rows_tsv(2.0))?;
            }
            let ppl = table.perplexity()?;
            let ppl_shown = match self.cfg.log_base {
                LogBase::E => format!("{ppl:.4}"),
                LogBase::Two => format!("{ppl:.4} ({:.4} bits/subword)", ppl.log2()),
            };
            println!("{id}\tPPL {ppl_shown}\t{}", path.display());
        }
        Ok(())
    }

    fn fit_dir(&self, noise: &NoiseSpec) -> PathBuf {
        self.out(&format!("fits/{}", slug(&self.config_id(noise))))
    }

    fn frequency_model(&self, stim: &Stimulus) -> Result<FrequencyModel> {
        if let Some(p) = &self.cfg.freq {
            return FrequencyModel::load(p);
        }
        if let Some(p) = &self.cfg.lm_train {
            let sentences = parse_sentences(&read_text(p)?);
            return Ok(FrequencyModel::from_counts(sentences.into_iter().flatten().map(|s| (s, 1))));
        }
        Ok(FrequencyModel::from_stimulus(stim))
    }

    fn fit(&self) -> Result<()> {
        let (stim, kept) = self.load_corpus()?;
        let fm = self.frequency_model(&stim)?;
        let opts = self.cfg.analysis_options()?;
        for noise in &self.cfg.noise {
            let tp = require_artifact(self.table_path(noise), "surprisal")?;
            let table = SurprisalTable::load(&tp)?;
            if table.corpus_hash() != Some(stim.content_hash().as_str()) {
                return Err(Error::invalid(format!(
                    "{} was computed on a different corpus (hash {}); rerun `surprisal`",
                    tp.display(),
                    table.corpus_hash().unwrap_or("missing")
                )));
            }
            let f = fit_table(&stim, &kept, &table, &fm, &opts)?;
            let dir = self.fit_dir(noise);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            f.with.save(&dir.join("with.json"), &dir.join("with.residuals.tsv"), &f.config_id)?;
            f.without
                .save(&dir.join("without.json"), &dir.join("without.residuals.tsv"), &f.config_id)?;
            let summary = FitSummary {
                config_id: f.config_id.clone(),
                noise: noise.clone(),
                seed: self.cfg.seed,
                n_rows: f.with.n_rows,
                loglik_with: f.with.loglik,
                loglik_without: f.without.loglik,
                ppp: f.ppp,
                chisq_p: f.chisq_p,
                ppl: f.ppl,
                corpus_hash: stim.content_hash(),
                config_hash: self.hash.clone(),
                tool_version: TOOL_VERSION.into(),
            };
            write(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            println!("{}\tn={}\tPPP {:.6}\tp {:.3e}", f.config_id, f.with.n_rows, f.ppp, f.chisq_p);
        }
        Ok(())
    }

    fn summary(&self, dir: &Path, noise: &NoiseSpec) -> Result<FitSummary> {
        let rel = format!("fits/{}/summary.json", slug(&self.config_id(noise)));
        let p = require_artifact(dir.join(rel), "fit")?;
        Ok(serde_json::from_str(&read_text(&p)?)?)
    }

    fn ppp(&self) -> Result<()> {
        let mut out = String::from("config_id\tn_rows\tppp\tchisq_p\tppl\tloglik_with\tloglik_without\n");
        for noise in &self.cfg.noise {
            let s = self.summary(&self.cfg.out, noise)?;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:e}\t{}\t{}\t{}",
                s.config_id, s.n_rows, s.ppp, s.chisq_p, s.ppl, s.loglik_with, s.loglik_without
            );
        }
        write(&self.out("ppp.tsv"), &out)?;
        print!("{out}");
        Ok(())
    }

    fn load_fit(&self, noise: &NoiseSpec) -> Result<FitResult> {
        let dir = self.fit_dir(noise);
        let j = require_artifact(dir.join("with.json"), "fit")?;
        let r = require_artifact(dir.join("with.residuals.tsv"), "fit")?;
        FitResult::load(&j, &r)
    }

    fn compare(&self, a: &CompareArgs) -> Result<()> {
        let fa = self.load_fit(&a.a)?;
        let fb = self.load_fit(&a.b)?;
        let pairs = align_residuals(&fa, &fb)?;
        let n_perm = a.permutations.unwrap_or(self.cfg.stats.permutations);
        let r = permutation_test_pairs(&pairs, n_perm, derive_seed(self.cfg.seed, 2))?;
        let report = TestReport::permutation(
            &r,
            serde_json::json!({
                "a": self.config_id(&a.a),
                "b": self.config_id(&a.b),
                "n_perm": n_perm,
                "statistic": "mean(r_a^2 - r_b^2)",
                "config_hash": self.hash,
                "tool_version": TOOL_VERSION,
            }),
        );
        let json = report.to_json()?;
        let name = format!("compare/{}__{}.json", slug(&self.config_id(&a.a)), slug(&self.config_id(&a.b)));
        write(&self.out(&name), &json)?;
        print!("{json}");
        Ok(())
    }

    fn elc_path(&self, short: &NoiseSpec, full: &NoiseSpec) -> PathBuf {
        self.out(&format!("elc/{}__{}.tsv", slug(&self.config_id(short)), slug(&self.config_id(full))))
    }

    fn elc(&self, short: Option<&NoiseSpec>, full: Option<&NoiseSpec>) -> Result<BTreeMap<RowKey, f64>> {
        let short = short.unwrap_or(&self.cfg.analysis.short);
        let full = full.unwrap_or(&self.cfg.analysis.full);
        let fs = self.load_fit(short)?;
        let ff = self.load_fit(full)?;
        let values = crate::stats::elc_from_fits(&fs, &ff)?;
        let mut out = String::from("subject_id\tarticle_id\tsentN\ttokenN\telc\n");
        for (k, v) in &values {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{v}", k.subject_id, k.word.article_id, k.word.sent_n, k.word.token_n);
        }
        let path = self.elc_path(short, full);
        write(&path, &out)?;
        let n = values.len() as f64;
        let mean = values.values().sum::<f64>() / n;
        let summary = serde_json::json!({
            "short": self.config_id(short),
            "full": self.config_id(full),
            "n": values.len(),
            "mean_elc": mean,
            "sse_short": fs.sse(),
            "sse_full": ff.sse(),
            "config_hash": self.hash,
            "tool_version": TOOL_VERSION,
        });
        write(&path.with_extension("json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        println!("mean ELC {mean} over {} points -> {}", values.len(), path.display());
        Ok(values)
    }

    fn read_elc(&self, short: &NoiseSpec, full: &NoiseSpec) -> Result<BTreeMap<RowKey, f64>> {
        let path = require_artifact(self.elc_path(short, full), "elc")?;
        let text = read_text(&path)?;
        let mut out = BTreeMap::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: "malformed ELC row".into(),
            };
            if f.len() != 5 {
                return Err(bad());
            }
            let key = RowKey {
                subject_id: f[0].into(),
                word: crate::corpus::WordKey::new(f[1], f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?),
            };
            out.insert(key, f[4].parse().map_err(|_| bad())?);
        }
        Ok(out)
    }

    fn analyze_dependency(&self, a: &DependencyArgs) -> Result<()> {
        let dp = self.cfg.require(&self.cfg.dependencies, "dependencies")?;
        let ann = DependencyAnnotation::load(&dp)?;
        let short = a.short.as_ref().unwrap_or(&self.cfg.analysis.short);
        let full = a.full.as_ref().unwrap_or(&self.cfg.analysis.full);
        let mut elc = self.read_elc(short, full)?;
        if a.latter_half || a.threshold.is_some() {
            elc = filter_latter_half(&elc, a.threshold)?;
        }
        let opts = GroupOptions {
            mode: a.mode,
            long_dep_min_distance: self.cfg.analysis.long_dep_min_distance,
            min_group_size: self.cfg.analysis.min_group_size,
        };
        let report = group_elc(&elc, &ann, opts);
        let kept: Vec<Vec<f64>> = grouped_values(&elc, &ann, opts)
            .into_iter()
            .filter(|(l, _)| report.groups.iter().any(|g| &g.label == l))
            .map(|(_, v)| v)
            .filter(|v| v.len() >= 2)
            .collect();
        let anova = if kept.len() >= 2 { oneway_anova(&kept).ok() } else { None };
        let mode = match a.mode {
            GroupMode::ByLocality => "by_locality",
            GroupMode::ByType => "by_type",
        };
        write(&self.out(&format!("analysis/{mode}.csv")), &report.to_csv())?;
        let json = serde_json::json!({
            "groups": report,
            "anova": anova,
            "n_points": elc.len(),
            "config_hash": self.hash,
            "tool_version": TOOL_VERSION,
        });
        write(&self.out(&format!("analysis/{mode}.json")), &(serde_json::to_string_pretty(&json)? + "\n"))?;
        print!("{}", report.to_csv());
        if let Some(an) = anova {
            println!("one-way ANOVA: F({}, {}) = {:.4}, p = {:.4e}", an.df_between, an.df_within, an.f, an.p);
        }
        for (l, n) in &report.excluded {
            println!("excluded group {l} ({n} points)");
        }
        Ok(())
    }

    fn report(&self, a: &ReportArgs) -> Result<()> {
        let runs = if a.runs.is_empty() {
            vec![self.cfg.out.clone()]
        } else {
            a.runs.clone()
        };
        let mut records = Vec::new();
        for dir in &runs {
            // every fitted configuration in the run, whatever config produced it
            let fits = require_artifact(dir.join("fits"), "fit")?;
            let mut summaries = Vec::new();
            for e in std::fs::read_dir(&fits).map_err(|e| Error::io(&fits, e))? {
                let p = e.map_err(|e| Error::io(&fits, e))?.path().join("summary.json");
                if p.is_file() {
                    summaries.push(p);
                }
            }
            summaries.sort();
            for p in summaries {
                let s: FitSummary = serde_json::from_str(&read_text(&p)?)?;
                records.push(PppRecord {
                    config_id: s.config_id,
                    noise: s.noise,
                    seed: s.seed,
                    ppl: s.ppl,
                    ppp: s.ppp,
                });
            }
        }
        let (curve, scatter) = report_curves(&records)?;
        write(&self.out("report/curve.csv"), &curve)?;
        write(&self.out("report/scatter.csv"), &scatter)?;
        print!("{curve}");
        Ok(())
    }
}
