//! Glue shared by the CLI and the end-to-end tests: exclusions, row
//! building and the nested fit for one surprisal table.

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{apply_exclusions, Criterion, FixationRecord, FrequencyModel, LanguageProfile, OutlierRule, Stimulus};
use crate::error::{Error, Result};
use crate::regress::{build_design, build_rows, fit_nested, ppp, DesignOptions, FitOptions, FitResult, RowOptions};
use crate::stats::chisq_nested;
use crate::surprisal::SurprisalTable;

/// Seed for sub-task `stream` of a run: the first `u64` of ChaCha8 stream
/// `stream` keyed by the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Number of surprisal predictors added by the full model.
pub const SURPRISAL_DF: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub profile: LanguageProfile,
    /// Overrides the profile's exclusion criteria when set.
    pub criteria: Option<BTreeSet<Criterion>>,
    pub outlier: OutlierRule,
    pub rows: RowOptions,
    pub design: DesignOptions,
    pub fit: FitOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            profile: LanguageProfile::English,
            criteria: None,
            outlier: OutlierRule::default(),
            rows: RowOptions::default(),
            design: DesignOptions::default(),
            fit: FitOptions::default(),
        }
    }
}

impl AnalysisOptions {
    pub fn criteria(&self) -> BTreeSet<Criterion> {
        self.criteria.clone().unwrap_or_else(|| self.profile.criteria())
    }
}

pub fn exclude(stimulus: &Stimulus, fixations: &[FixationRecord], opts: &AnalysisOptions) -> Vec<FixationRecord> {
    apply_exclusions(stimulus, fixations, &opts.criteria(), opts.outlier)
}

#[derive(Debug, Clone)]
pub struct ConfigFit {
    pub config_id: String,
    pub with: FitResult,
    pub without: FitResult,
    pub ppp: f64,
    pub chisq_p: f64,
    pub ppl: f64,
}

/// Fits the models with and without the table's surprisal predictors on
/// already-filtered fixations.
pub fn fit_table(
    stimulus: &Stimulus,
    kept: &[FixationRecord],
    table: &SurprisalTable,
    fm: &FrequencyModel,
    opts: &AnalysisOptions,
) -> Result<ConfigFit> {
    if let Some(h) = table.corpus_hash() {
        if h != stimulus.content_hash() {
            return Err(Error::invalid(format!(
                "surprisal table {} was computed on a different corpus",
                table.config_id
            )));
        }
    }
    table.check_complete(stimulus)?;
    let rows = build_rows(stimulus, kept, table, fm, opts.rows)?;
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let with = build_design(&rows, true, opts.design)?;
    let without = build_design(&rows, false, opts.design)?;
    let (fw, fo) = fit_nested(&with, &without, &opts.fit)?;
    let gain = ppp(&fw, &fo)?;
    let chisq_p = chisq_nested(fw.loglik, fo.loglik, SURPRISAL_DF)?;
    Ok(ConfigFit {
        config_id: table.config_id.clone(),
        ppl: table.perplexity()?,
        with: fw,
        without: fo,
        ppp: gain,
        chisq_p,
    })
}
