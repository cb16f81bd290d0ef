//! Dependency-based grouping of ELC scores and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_text, WordKey};
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::regress::RowKey;

pub const DEPENDENCY_HEADER: [&str; 5] = ["article_id", "sentN", "tokenN", "head_tokenN", "relation_label"];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Arc {
    token_n: usize,
    head: Option<usize>,
    label: String,
}

/// One head relation per word, grouped by sentence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DependencyAnnotation {
    sentences: BTreeMap<(String, usize), Vec<Arc>>,
}

/// A preceding word linked to the target by a direct dependency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partner {
    pub token_n: usize,
    pub distance: usize,
    pub label: String,
}

impl DependencyAnnotation {
    /// Parses the dependency TSV. Roots carry `-1`, `-` or an empty head.
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        let cols: Vec<&str> = header.split('\t').collect();
        if cols != DEPENDENCY_HEADER {
            return Err(perr(1, format!("expected header {}", DEPENDENCY_HEADER.join("\t"))));
        }
        let mut ann = DependencyAnnotation::default();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(perr(i + 1, format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| perr(i + 1, format!("{what} is not a non-negative integer: {s:?}")))
            };
            let sent_n = num(f[1], "sentN")?;
            let token_n = num(f[2], "tokenN")?;
            let head = match f[3] {
                "" | "-" | "-1" => None,
                h => Some(num(h, "head_tokenN")?),
            };
            if head == Some(token_n) {
                return Err(perr(i + 1, "word is its own head".into()));
            }
            let arcs = ann.sentences.entry((f[0].to_string(), sent_n)).or_default();
            if arcs.iter().any(|a| a.token_n == token_n) {
                return Err(perr(i + 1, format!("duplicate relation for token {token_n}")));
            }
            arcs.push(Arc {
                token_n,
                head,
                label: f[4].to_string(),
            });
        }
        Ok(ann)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &read_text(path)?)
    }

    /// Adds one arc; used to build fixtures in code.
    pub fn insert(&mut self, key: &WordKey, head: Option<usize>, label: &str) {
        let arcs = self.sentences.entry((key.article_id.clone(), key.sent_n)).or_default();
        arcs.retain(|a| a.token_n != key.token_n);
        arcs.push(Arc {
            token_n: key.token_n,
            head,
            label: label.to_string(),
        });
    }

    pub fn has_sentence(&self, article_id: &str, sent_n: usize) -> bool {
        self.sentences.contains_key(&(article_id.to_string(), sent_n))
    }

    /// Preceding heads and dependents of `key`. A head contributes the word's
    /// own relation label, a dependent its relation toward `key`.
    pub fn preceding_partners(&self, key: &WordKey) -> Vec<Partner> {
        let Some(arcs) = self.sentences.get(&(key.article_id.clone(), key.sent_n)) else {
            return Vec::new();
        };
        let t = key.token_n;
        let mut out = Vec::new();
        for a in arcs {
            if a.token_n == t {
                if let Some(h) = a.head.filter(|&h| h < t) {
                    out.push(Partner {
                        token_n: h,
                        distance: t - h,
                        label: a.label.clone(),
                    });
                }
            } else if a.head == Some(t) && a.token_n < t {
                out.push(Partner {
                    token_n: a.token_n,
                    distance: t - a.token_n,
                    label: a.label.clone(),
                });
            }
        }
        out.sort_by_key(|p| p.token_n);
        out
    }
}

/// Mean distance to preceding directly related words; `None` without any.
pub fn dependency_locality(key: &WordKey, ann: &DependencyAnnotation) -> Option<f64> {
    let partners = ann.preceding_partners(key);
    if partners.is_empty() {
        return None;
    }
    Some(partners.iter().map(|p| p.distance as f64).sum::<f64>() / partners.len() as f64)
}

/// Lower median of the 1-based word positions.
pub fn median_position<'a>(keys: impl IntoIterator<Item = &'a WordKey>) -> Option<usize> {
    let mut pos: Vec<usize> = keys.into_iter().map(|k| k.token_n + 1).collect();
    if pos.is_empty() {
        return None;
    }
    pos.sort_unstable();
    Some(pos[(pos.len() - 1) / 2])
}

/// Keeps data points whose 1-based position is at least `threshold`
/// (default: the median position of the input).
pub fn filter_latter_half(elc: &BTreeMap<RowKey, f64>, threshold: Option<usize>) -> Result<BTreeMap<RowKey, f64>> {
    let threshold = match threshold {
        Some(0) => return Err(Error::invalid("position threshold must be at least 1")),
        Some(t) => t,
        None => match median_position(elc.keys().map(|k| &k.word)) {
            Some(t) => t,
            None => return Ok(BTreeMap::new()),
        },
    };
    Ok(elc
        .iter()
        .filter(|(k, _)| k.word.token_n + 1 >= threshold)
        .map(|(k, v)| (k.clone(), *v))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    ByLocality,
    ByType,
}

impl std::str::FromStr for GroupMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_locality" | "locality" => Ok(GroupMode::ByLocality),
            "by_type" | "type" => Ok(GroupMode::ByType),
            _ => Err(Error::invalid(format!("unknown grouping mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupOptions {
    pub mode: GroupMode,
    pub long_dep_min_distance: usize,
    pub min_group_size: usize,
}

impl Default for GroupOptions {
    fn default() -> Self {
        GroupOptions {
            mode: GroupMode::ByLocality,
            long_dep_min_distance: 4,
            min_group_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElcGroup {
    pub label: String,
    pub n: usize,
    pub mean_elc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub options: GroupOptions,
    pub groups: Vec<ElcGroup>,
    /// Groups dropped for having too few points, with their sizes.
    pub excluded: Vec<(String, usize)>,
    /// Mean ELC over every membership in a kept group.
    pub grouped_mean: f64,
    pub n_grouped: usize,
}

impl GroupReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,n,mean_elc\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{},{}", g.label, g.n, g.mean_elc);
        }
        s
    }
}

/// ELC values per group label, before the size threshold. Under `ByType`
/// a point joins one group per qualifying relation. Locality groups are
/// ordered numerically.
pub fn grouped_values(elc: &BTreeMap<RowKey, f64>, ann: &DependencyAnnotation, opts: GroupOptions) -> Vec<(String, Vec<f64>)> {
    let mut buckets: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for (k, v) in elc {
        match opts.mode {
            GroupMode::ByLocality => {
                if let Some(loc) = dependency_locality(&k.word, ann) {
                    let r = loc.round() as u64;
                    buckets.entry((r, r.to_string())).or_default().push(*v);
                }
            }
            GroupMode::ByType => {
                for p in ann.preceding_partners(&k.word) {
                    if p.distance > opts.long_dep_min_distance {
                        buckets.entry((0, p.label)).or_default().push(*v);
                    }
                }
            }
        }
    }
    buckets.into_iter().map(|((_, label), v)| (label, v)).collect()
}

/// Groups ELC values by rounded dependency locality or by the labels of
/// long preceding dependencies; type groups need more than
/// `min_group_size` points.
pub fn group_elc(elc: &BTreeMap<RowKey, f64>, ann: &DependencyAnnotation, opts: GroupOptions) -> GroupReport {
    let min = match opts.mode {
        GroupMode::ByLocality => 0,
        GroupMode::ByType => opts.min_group_size,
    };
    let mut groups = Vec::new();
    let mut excluded = Vec::new();
    let (mut total, mut count) = (0.0, 0usize);
    for (label, vals) in grouped_values(elc, ann, opts) {
        if vals.len() <= min {
            excluded.push((label, vals.len()));
            continue;
        }
        let sum: f64 = vals.iter().sum();
        total += sum;
        count += vals.len();
        groups.push(ElcGroup {
            label,
            n: vals.len(),
            mean_elc: sum / vals.len() as f64,
        });
    }
    GroupReport {
        options: opts,
        groups,
        excluded,
        grouped_mean: if count > 0 { total / count as f64 } else { 0.0 },
        n_grouped: count,
    }
}

/// One fitted configuration for the report tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PppRecord {
    pub config_id: String,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub ppl: f64,
    pub ppp: f64,
}

fn length_label(noise: &NoiseSpec) -> (u64, String) {
    match noise.input_length() {
        Some(l) => (l as u64, l.to_string()),
        None if *noise == NoiseSpec::Identity => (u64::MAX, "full".into()),
        None => (u64::MAX - 1, noise.to_string()),
    }
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// PPP against context length (mean and sample SD over seeds), and the
/// PPL/PPP scatter rows. Rows are sorted, so output is order independent.
pub fn report_curves(records: &[PppRecord]) -> Result<(String, String)> {
    if records.is_empty() {
        return Err(Error::invalid("no PPP results to report"));
    }
    let mut by_len: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        by_len.entry(length_label(&r.noise)).or_default().push(r.ppp);
    }
    let mut curve = String::from("input_length,mean_ppp,sd_ppp,n_seeds\n");
    for ((_, label), mut v) in by_len {
        v.sort_by(f64::total_cmp);
        let (m, sd) = mean_sd(&v);
        let _ = writeln!(curve, "{label},{m},{sd},{}", v.len());
    }
    let mut rows: Vec<&PppRecord> = records.iter().collect();
    rows.sort_by(|a, b| a.config_id.cmp(&b.config_id).then(a.seed.cmp(&b.seed)));
    let mut scatter = String::from("config_id,seed,ppl,ppp\n");
    for r in rows {
        let _ = writeln!(scatter, "{},{},{},{}", r.config_id, r.seed, r.ppl, r.ppp);
    }
    Ok((curve, scatter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wk(t: usize) -> WordKey {
        WordKey::new("a", 0, t)
    }

    fn rk(subject: &str, t: usize) -> RowKey {
        RowKey {
            subject_id: subject.into(),
            word: wk(t),
        }
    }

    /// Relative-clause fragment: the main verb's only preceding partner is
    /// its subject three words back.
    fn example_annotation() -> DependencyAnnotation {
        let mut ann = DependencyAnnotation::default();
        // 0 the  1 man  2 she  3 saw  4 had ...
        ann.insert(&wk(0), Some(1), "det");
        ann.insert(&wk(1), Some(4), "nsubj");
        ann.insert(&wk(2), Some(3), "nsubj");
        ann.insert(&wk(3), Some(1), "acl:relcl");
        ann.insert(&wk(4), None, "root");
        ann
    }

    #[test]
    fn locality_of_verb_is_three() {
        let ann = example_annotation();
        assert_eq!(dependency_locality(&wk(4), &ann), Some(3.0));
        // "man": preceding dependent "the" at distance 1; its head follows
        assert_eq!(dependency_locality(&wk(1), &ann), Some(1.0));
        assert_eq!(dependency_locality(&wk(0), &ann), None);
        assert_eq!(dependency_locality(&WordKey::new("zz", 0, 3), &ann), None);
    }

    #[test]
    fn locality_is_a_mean() {
        let mut ann = DependencyAnnotation::default();
        ann.insert(&wk(2), Some(5), "obj");
        ann.insert(&wk(4), Some(5), "advmod");
        ann.insert(&wk(5), None, "root");
        assert_eq!(dependency_locality(&wk(5), &ann), Some(2.0));
    }

    #[test]
    fn parse_dependency_tsv() {
        let text = "article_id\tsentN\ttokenN\thead_tokenN\trelation_label\n\
                    a\t0\t0\t1\tdet\na\t0\t1\t-1\troot\n";
        let ann = DependencyAnnotation::parse(Path::new("d.tsv"), text).unwrap();
        assert_eq!(dependency_locality(&wk(1), &ann), Some(1.0));
        let bad = "article_id\tsentN\ttokenN\thead_tokenN\trelation_label\na\t0\t0\t0\tx\n";
        assert!(DependencyAnnotation::parse(Path::new("d.tsv"), bad).is_err());
        assert!(DependencyAnnotation::parse(Path::new("d.tsv"), "x\ty\n").is_err());
    }

    #[test]
    fn latter_half_filter() {
        let mut elc = BTreeMap::new();
        for s in 0..3 {
            for t in 0..10 {
                elc.insert(
                    RowKey {
                        subject_id: "s".into(),
                        word: WordKey::new("a", s, t),
                    },
                    t as f64,
                );
            }
        }
        assert_eq!(median_position(elc.keys().map(|k| &k.word)), Some(5));
        let kept = filter_latter_half(&elc, None).unwrap();
        let mut positions: Vec<usize> = kept.keys().map(|k| k.word.token_n + 1).collect();
        positions.sort_unstable();
        positions.dedup();
        assert_eq!(positions, (5..=10).collect::<Vec<_>>());
        assert_eq!(kept.len(), 18);
        assert_eq!(filter_latter_half(&elc, Some(1)).unwrap(), elc);
        let k13 = filter_latter_half(&elc, Some(13)).unwrap();
        assert!(k13.is_empty());
        assert!(filter_latter_half(&elc, Some(0)).is_err());
    }

    #[test]
    fn zero_elc_gives_zero_group_means() {
        let ann = example_annotation();
        let elc: BTreeMap<_, _> = (0..5).map(|t| (rk("s", t), 0.0)).collect();
        let r = group_elc(&elc, &ann, GroupOptions::default());
        assert!(!r.groups.is_empty());
        assert!(r.groups.iter().all(|g| g.mean_elc == 0.0));
    }

    /// Sentence where word `t` (t ≥ 6) depends on word `t - 6` with a label
    /// that cycles through `labels`; ELC is assigned per label.
    fn typed_fixture(labels: &[(&str, usize, f64)]) -> (DependencyAnnotation, BTreeMap<RowKey, f64>) {
        let mut ann = DependencyAnnotation::default();
        let mut elc = BTreeMap::new();
        let mut sent = 0;
        for (label, count, value) in labels {
            for _ in 0..*count {
                let dep = WordKey::new("a", sent, 6);
                ann.insert(&dep, Some(0), label);
                ann.insert(&WordKey::new("a", sent, 0), None, "root");
                // short relation that must be ignored in by_type mode
                ann.insert(&WordKey::new("a", sent, 5), Some(6), "short");
                elc.insert(
                    RowKey {
                        subject_id: "s".into(),
                        word: dep,
                    },
                    *value,
                );
                sent += 1;
            }
        }
        (ann, elc)
    }

    #[test]
    fn by_type_threshold_and_means() {
        let (ann, elc) = typed_fixture(&[("nsubj", 150, 2.5), ("obj", 101, -1.25), ("obl", 99, 7.0), ("iobj", 100, 1.0)]);
        let opts = GroupOptions {
            mode: GroupMode::ByType,
            ..GroupOptions::default()
        };
        let r = group_elc(&elc, &ann, opts);
        let got: Vec<(&str, usize, f64)> = r.groups.iter().map(|g| (g.label.as_str(), g.n, g.mean_elc)).collect();
        assert_eq!(got, vec![("nsubj", 150, 2.5), ("obj", 101, -1.25)]);
        assert_eq!(r.excluded, vec![("iobj".to_string(), 100), ("obl".to_string(), 99)]);
        let recomposed: f64 = r.groups.iter().map(|g| g.n as f64 * g.mean_elc).sum::<f64>() / r.n_grouped as f64;
        assert!((recomposed - r.grouped_mean).abs() < 1e-12);
    }

    #[test]
    fn curves() {
        let rec = |seed, ppp| PppRecord {
            config_id: "builtin+ngram:2".into(),
            noise: NoiseSpec::ngram(2).unwrap(),
            seed,
            ppl: 10.0,
            ppp,
        };
        let (curve, scatter) = report_curves(&[rec(1, 1e-3)]).unwrap();
        assert_eq!(curve.lines().count(), 2);
        assert_eq!(scatter.lines().count(), 2);
        let (curve, _) = report_curves(&[rec(3, 3e-3), rec(1, 1e-3), rec(2, 2e-3)]).unwrap();
        let row: Vec<f64> = curve.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(row[0], 1.0);
        assert!((row[1] - 2e-3).abs() < 1e-15);
        assert!((row[2] - 1e-3).abs() < 1e-15);
        assert_eq!(row[3], 3.0);
        assert!(report_curves(&[]).is_err());
    }

    proptest! {
        #[test]
        fn locality_groups_recompose(values in proptest::collection::vec(-5.0f64..5.0, 1..60), heads in proptest::collection::vec(0usize..60, 60)) {
            let mut ann = DependencyAnnotation::default();
            let mut elc = BTreeMap::new();
            for (t, v) in values.iter().enumerate() {
                let h = heads[t] % (values.len() + 1);
                ann.insert(&wk(t), (h != t && h < values.len()).then_some(h), "x");
                elc.insert(rk("s", t), *v);
            }
            let r = group_elc(&elc, &ann, GroupOptions::default());
            let grouped: Vec<f64> = elc.iter().filter(|(k, _)| dependency_locality(&k.word, &ann).is_some()).map(|(_, v)| *v).collect();
            prop_assert_eq!(r.n_grouped, grouped.len());
            if !grouped.is_empty() {
                let direct = grouped.iter().sum::<f64>() / grouped.len() as f64;
                let recomposed: f64 = r.groups.iter().map(|g| g.n as f64 * g.mean_elc).sum::<f64>() / r.n_grouped as f64;
                prop_assert!((recomposed - direct).abs() < 1e-9);
            }
        }

        #[test]
        fn latter_half_monotone(lo in 1usize..15, extra in 0usize..10, lens in proptest::collection::vec(1usize..20, 1..10)) {
            let mut elc = BTreeMap::new();
            for (s, len) in lens.iter().enumerate() {
                for t in 0..*len {
                    elc.insert(RowKey { subject_id: "s".into(), word: WordKey::new("a", s, t) }, 0.0);
                }
            }
            let small = filter_latter_half(&elc, Some(lo + extra)).unwrap();
            let big = filter_latter_half(&elc, Some(lo)).unwrap();
            prop_assert!(small.keys().all(|k| big.contains_key(k)));
        }
    }
}
