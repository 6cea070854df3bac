//! Relevance, rank-coherence, re-ranking opportunity and score-gap subsets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{QueryCluster, Qrels, RankedList};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid ranking: {0}")]
    InvalidRanking(String),
    #[error("selected document `{doc_id}` is not in the top-{k} of `{query_id}`")]
    InvalidSelection { query_id: String, doc_id: String, k: usize },
    #[error("no run for query `{0}`")]
    MissingRun(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Mean and population standard deviation of a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RboConfig {
    pub k: usize,
    pub p: f64,
    pub normalized: bool,
}

impl Default for RboConfig {
    fn default() -> Self {
        Self {
            k: 5,
            p: 0.9,
            normalized: true,
        }
    }
}

impl RboConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(MetricsError::InvalidArgument("RBO depth k must be >= 1".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(MetricsError::InvalidArgument(format!("RBO persistence must be in (0,1), got {}", self.p)));
        }
        Ok(())
    }
}

fn check_distinct(list: &[&str]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in list {
        if !seen.insert(*id) {
            return Err(MetricsError::InvalidRanking(format!("id `{id}` repeated")));
        }
    }
    Ok(())
}

/// Rank-biased overlap truncated at depth `k`. A list shorter than `k`
/// contributes its whole length at every deeper cut; identical lists score 1
/// whatever their length.
pub fn rbo_at_k(s: &[&str], t: &[&str], config: &RboConfig) -> Result<f64> {
    config.validate()?;
    check_distinct(s)?;
    check_distinct(t)?;
    if s.is_empty() || t.is_empty() {
        return Err(MetricsError::InvalidRanking("empty list".into()));
    }
    let (s, t) = (&s[..config.k.min(s.len())], &t[..config.k.min(t.len())]);
    if s == t {
        return Ok(if config.normalized { 1.0 } else { 1.0 - config.p.powi(config.k as i32) });
    }
    let depth = config.k;
    let (mut seen_s, mut seen_t) = (BTreeSet::new(), BTreeSet::new());
    let mut overlap = 0usize;
    let (mut sum, mut weights, mut w) = (0.0, 0.0, 1.0);
    for d in 0..depth {
        if let Some(x) = s.get(d) {
            if seen_t.contains(x) {
                overlap += 1;
            }
            seen_s.insert(*x);
        }
        if let Some(y) = t.get(d) {
            if seen_s.contains(y) {
                overlap += 1;
            }
            seen_t.insert(*y);
        }
        sum += w * overlap as f64 / (d + 1) as f64;
        weights += w;
        w *= config.p;
    }
    Ok(if config.normalized {
        sum / weights
    } else {
        (1.0 - config.p) * sum
    })
}

/// Fractional (1-based) ranks: items present take their position, absent items
/// share the mean of the positions after `present`.
fn conjoint_ranks(list: &[&str], union: &[&str]) -> Vec<f64> {
    let pos: HashMap<&str, usize> = list.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let absent = union.len() - list.len();
    let tied = list.len() as f64 + (absent as f64 + 1.0) / 2.0;
    union
        .iter()
        .map(|d| pos.get(d).map_or(tied, |&i| (i + 1) as f64))
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation of the two top-k lists over their union, with
/// unmatched items tied after the listed ones.
pub fn spearman_at_k(s: &[&str], t: &[&str], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MetricsError::InvalidArgument("k must be >= 1".into()));
    }
    check_distinct(s)?;
    check_distinct(t)?;
    let (s, t) = (&s[..k.min(s.len())], &t[..k.min(t.len())]);
    if s == t {
        return Ok(1.0);
    }
    let mut union: Vec<&str> = s.to_vec();
    union.extend(t.iter().filter(|d| !s.contains(d)));
    Ok(pearson(&conjoint_ranks(s, &union), &conjoint_ranks(t, &union)).unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRelevance {
    pub p_at_1: f64,
    pub mrr_at_10: f64,
    pub ndcg_at_10: f64,
    pub map_at_100: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSummary {
    pub p_at_1: MeanStd,
    pub mrr_at_10: MeanStd,
    pub ndcg_at_10: MeanStd,
    pub map_at_100: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub per_query: BTreeMap<String, QueryRelevance>,
    pub mean: RelevanceSummary,
    /// Runs whose query has no judgements at all.
    pub missing_qrels: Vec<String>,
    /// Runs whose query has judgements but none with grade >= 1.
    pub no_relevant: Vec<String>,
}

/// Metrics for one run against `query_id -> grade` judgements with at least
/// one relevant document.
pub fn query_relevance(run: &RankedList, judged: &BTreeMap<String, u32>) -> QueryRelevance {
    let grade = |d: &str| judged.get(d).copied().unwrap_or(0);
    let relevant_total = judged.values().filter(|&&g| g >= 1).count();
    let ids: Vec<&str> = run.doc_ids().collect();

    let p_at_1 = ids.first().map_or(0.0, |d| (grade(d) >= 1) as u8 as f64);
    let mrr_at_10 = ids
        .iter()
        .take(10)
        .position(|d| grade(d) >= 1)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64);

    let dcg = |grades: &mut dyn Iterator<Item = u32>| -> f64 {
        grades
            .take(10)
            .enumerate()
            .map(|(i, g)| g as f64 / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&mut ideal.into_iter());
    let ndcg_at_10 = if idcg > 0.0 {
        dcg(&mut ids.iter().map(|d| grade(d))) / idcg
    } else {
        0.0
    };

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, d) in ids.iter().take(100).enumerate() {
        if grade(d) >= 1 {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    let map_at_100 = if relevant_total > 0 {
        precision_sum / relevant_total as f64
    } else {
        0.0
    };

    QueryRelevance {
        p_at_1,
        mrr_at_10,
        ndcg_at_10,
        map_at_100,
    }
}

pub fn relevance_metrics(runs: &[RankedList], qrels: &Qrels) -> RelevanceReport {
    let mut report = RelevanceReport::default();
    for run in runs {
        let Some(judged) = qrels.for_query(&run.query_id) else {
            log::warn!("no qrels for query `{}`; skipped", run.query_id);
            report.missing_qrels.push(run.query_id.clone());
            continue;
        };
        if !judged.values().any(|&g| g >= 1) {
            report.no_relevant.push(run.query_id.clone());
            continue;
        }
        report.per_query.insert(run.query_id.clone(), query_relevance(run, judged));
    }
    let col = |f: fn(&QueryRelevance) -> f64| MeanStd::of(&report.per_query.values().map(f).collect::<Vec<_>>());
    report.mean = RelevanceSummary {
        p_at_1: col(|q| q.p_at_1),
        mrr_at_10: col(|q| q.mrr_at_10),
        ndcg_at_10: col(|q| q.ndcg_at_10),
        map_at_100: col(|q| q.map_at_100),
    };
    report
}

pub type RunMap = BTreeMap<String, RankedList>;

pub fn run_map(runs: impl IntoIterator<Item = RankedList>) -> RunMap {
    runs.into_iter().map(|r| (r.query_id.clone(), r)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterCoherence {
    pub rbo: f64,
    pub spearman: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub per_cluster: BTreeMap<String, ClusterCoherence>,
    /// Over all canonical/variant pairs.
    pub rbo: MeanStd,
    pub spearman: MeanStd,
    pub skipped_clusters: Vec<String>,
}

/// Compares each cluster's canonical ranking with each variant's ranking.
pub fn coherence_eval<'a>(
    runs: &RunMap,
    clusters: impl IntoIterator<Item = &'a QueryCluster>,
    config: &RboConfig,
) -> Result<CoherenceReport> {
    config.validate()?;
    let mut report = CoherenceReport::default();
    let (mut all_rbo, mut all_sp) = (Vec::new(), Vec::new());
    for cluster in clusters {
        let Some(canon) = runs.get(&cluster.canonical_query_id) else {
            log::warn!("cluster `{}` has no canonical run; skipped", cluster.cluster_id);
            report.skipped_clusters.push(cluster.cluster_id.clone());
            continue;
        };
        let canon_ids = canon.top_ids(config.k);
        let (mut rbos, mut sps) = (Vec::new(), Vec::new());
        for vid in &cluster.variant_query_ids {
            let Some(run) = runs.get(vid) else {
                log::warn!("variant `{vid}` of cluster `{}` has no run; pair skipped", cluster.cluster_id);
                continue;
            };
            let ids = run.top_ids(config.k);
            rbos.push(rbo_at_k(&canon_ids, &ids, config)?);
            sps.push(spearman_at_k(&canon_ids, &ids, config.k)?);
        }
        if rbos.is_empty() {
            report.skipped_clusters.push(cluster.cluster_id.clone());
            continue;
        }
        report.per_cluster.insert(
            cluster.cluster_id.clone(),
            ClusterCoherence {
                rbo: MeanStd::of(&rbos).mean,
                spearman: MeanStd::of(&sps).mean,
                pairs: rbos.len(),
            },
        );
        all_rbo.extend(rbos);
        all_sp.extend(sps);
    }
    report.rbo = MeanStd::of(&all_rbo);
    report.spearman = MeanStd::of(&all_sp);
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpportunityReport {
    /// Keyed by canonical query id.
    pub per_query: BTreeMap<String, f64>,
    pub mean: MeanStd,
    /// Clusters without variants, where the measure is undefined.
    pub skipped: Vec<String>,
}

/// Fraction of a cluster's variants whose top-k contains the document selected
/// for the canonical query.
pub fn opportunity<'a>(
    runs: &RunMap,
    clusters: impl IntoIterator<Item = &'a QueryCluster>,
    selections: &BTreeMap<String, String>,
    k: usize,
) -> Result<OpportunityReport> {
    if k == 0 {
        return Err(MetricsError::InvalidArgument("k must be >= 1".into()));
    }
    let mut report = OpportunityReport::default();
    for cluster in clusters {
        let qid = &cluster.canonical_query_id;
        if cluster.variant_query_ids.is_empty() {
            report.skipped.push(qid.clone());
            continue;
        }
        let Some(selected) = selections.get(qid) else {
            log::warn!("no selection for `{qid}`; skipped");
            report.skipped.push(qid.clone());
            continue;
        };
        let canon = runs.get(qid).ok_or_else(|| MetricsError::MissingRun(qid.clone()))?;
        if !canon.top_ids(k).contains(&selected.as_str()) {
            return Err(MetricsError::InvalidSelection {
                query_id: qid.clone(),
                doc_id: selected.clone(),
                k,
            });
        }
        let mut hits = 0usize;
        for vid in &cluster.variant_query_ids {
            let run = runs.get(vid).ok_or_else(|| MetricsError::MissingRun(vid.clone()))?;
            if run.top_ids(k).contains(&selected.as_str()) {
                hits += 1;
            }
        }
        report
            .per_query
            .insert(qid.clone(), hits as f64 / cluster.variant_query_ids.len() as f64);
    }
    report.mean = MeanStd::of(&report.per_query.values().copied().collect::<Vec<_>>());
    Ok(report)
}

/// Highest-graded document of the run; ties go to the higher score, then the
/// smaller doc id.
pub fn oracle_selector(run: &RankedList, qrels: &Qrels) -> Option<String> {
    run.entries
        .iter()
        .max_by(|(da, sa), (db, sb)| {
            qrels
                .grade(&run.query_id, da)
                .cmp(&qrels.grade(&run.query_id, db))
                .then(sa.total_cmp(sb))
                .then(db.cmp(da))
        })
        .map(|(d, _)| d.clone())
}

/// Query ids whose score gap between rank 1 and rank `depth` (or the last
/// entry of shorter runs) is below `threshold`.
pub fn complexity_subset(runs: &[RankedList], threshold: f64, depth: usize) -> Vec<String> {
    runs.iter()
        .filter(|r| {
            let Some(first) = r.entries.first() else {
                return false;
            };
            let last = &r.entries[depth.clamp(1, r.len()) - 1];
            first.1 - last.1 < threshold
        })
        .map(|r| r.query_id.clone())
        .collect()
}

/// Parses a `query_id<TAB>doc_id` selections file.
pub fn read_selections(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
            return Err(MetricsError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "expected `query_id<TAB>doc_id`".into(),
            });
        }
        out.insert(fields[0].to_string(), fields[1].to_string());
    }
    Ok(out)
}

pub fn write_selections(selections: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let body: String = selections.iter().map(|(q, d)| format!("{q}\t{d}\n")).collect();
    Ok(fs::write(path, body)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(k: usize) -> RboConfig {
        RboConfig { k, ..RboConfig::default() }
    }

    fn list(qid: &str, entries: &[(&str, f64)]) -> RankedList {
        RankedList::new(qid, entries.iter().map(|(d, s)| (d.to_string(), *s)).collect())
    }

    fn ids(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    /// Direct evaluation of the truncated, normalized RBO sum.
    fn rbo_oracle(s: &[&str], t: &[&str], k: usize, p: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for d in 1..=k {
            let a: BTreeSet<&str> = s.iter().take(d).copied().collect();
            let b: BTreeSet<&str> = t.iter().take(d).copied().collect();
            num += p.powi(d as i32 - 1) * a.intersection(&b).count() as f64 / d as f64;
            den += p.powi(d as i32 - 1);
        }
        num / den
    }

    #[test]
    fn rbo_examples() {
        let c = cfg(3);
        assert_eq!(rbo_at_k(&["a", "b", "c"], &["a", "b", "c"], &c).unwrap(), 1.0);
        assert_eq!(rbo_at_k(&["a", "b", "c"], &["x", "y", "z"], &c).unwrap(), 0.0);
        let v = rbo_at_k(&["a", "b", "c"], &["a", "c", "b"], &c).unwrap();
        assert!((v - 0.833948).abs() < 1e-6, "{v}");
        assert!((v - (1.0 + 0.9 * 0.5 + 0.81) / 2.71).abs() < 1e-15);
        assert!(matches!(rbo_at_k(&["a", "a"], &["a"], &c), Err(MetricsError::InvalidRanking(_))));
        let unnorm = RboConfig { normalized: false, ..c };
        let u = rbo_at_k(&["a", "b", "c"], &["a", "b", "c"], &unnorm).unwrap();
        assert!((u - 0.1 * 2.71).abs() < 1e-15);
    }

    #[test]
    fn spearman_examples() {
        let s = ["a", "b", "c", "d", "e"];
        assert_eq!(spearman_at_k(&s, &s, 5).unwrap(), 1.0);
        let r = ["e", "d", "c", "b", "a"];
        assert!((spearman_at_k(&s, &r, 5).unwrap() + 1.0).abs() < 1e-15);
        // ranks over {a,b,c}: S (1,2,3), T (1,3,2)
        assert!((spearman_at_k(&["a", "b"], &["a", "c"], 2).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(spearman_at_k(&["a"], &["a"], 5).unwrap(), 1.0);
        assert!(spearman_at_k(&["a", "a"], &["b"], 2).is_err());
    }

    #[test]
    fn spearman_disjoint_and_absent_ties() {
        // union {a,b,c,d}: S (1,2,3.5,3.5), T (3.5,3.5,1,2)
        let v = spearman_at_k(&["a", "b"], &["c", "d"], 2).unwrap();
        let x = [1.0, 2.0, 3.5, 3.5];
        let y = [3.5, 3.5, 1.0, 2.0];
        assert!((v - pearson(&x, &y).unwrap()).abs() < 1e-15);
        assert!((v + 8.0 / 9.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn relevance_examples() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "rel", 1);
        let at = |pos: usize| {
            let mut e: Vec<(String, f64)> = (0..10).map(|i| (format!("x{i}"), 1.0 - i as f64 * 0.01)).collect();
            e[pos].0 = "rel".into();
            query_relevance(&RankedList::new("q", e), qrels.for_query("q").unwrap())
        };
        let first = at(0);
        assert_eq!((first.p_at_1, first.mrr_at_10, first.ndcg_at_10, first.map_at_100), (1.0, 1.0, 1.0, 1.0));
        let third = at(2);
        assert!((third.ndcg_at_10 - 0.5).abs() < 1e-15);
        assert!((third.mrr_at_10 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(third.p_at_1, 0.0);
        assert!((at(3).mrr_at_10 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relevance_graded_and_skips() {
        let mut qrels = Qrels::new();
        qrels.insert("q", "a", 2);
        qrels.insert("q", "b", 1);
        qrels.insert("z", "a", 0);
        let runs = vec![
            list("q", &[("b", 0.9), ("a", 0.8), ("c", 0.1)]),
            list("z", &[("a", 0.5)]),
            list("nojudge", &[("a", 0.5)]),
        ];
        let r = relevance_metrics(&runs, &qrels);
        assert_eq!(r.missing_qrels, vec!["nojudge"]);
        assert_eq!(r.no_relevant, vec!["z"]);
        let q = r.per_query["q"];
        let dcg = 1.0 + 2.0 / 3f64.log2();
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert!((q.ndcg_at_10 - dcg / idcg).abs() < 1e-15);
        assert_eq!(q.map_at_100, 1.0);
        assert_eq!(r.mean.p_at_1.n, 1);
    }

    fn cluster(id: &str, canon: &str, variants: &[&str]) -> QueryCluster {
        QueryCluster {
            cluster_id: id.into(),
            canonical_query_id: canon.into(),
            variant_query_ids: variants.iter().map(|v| v.to_string()).collect(),
        }
    }

    #[test]
    fn coherence_examples() {
        let same = [("a", 0.9), ("b", 0.8), ("c", 0.7)];
        let runs = run_map(["c", "v1", "v2"].map(|q| list(q, &same)));
        let cl = [cluster("k", "c", &["v1", "v2"]), cluster("gone", "missing", &["v1"])];
        let r = coherence_eval(&runs, &cl, &RboConfig::default()).unwrap();
        assert_eq!((r.rbo.mean, r.rbo.std), (1.0, 0.0));
        assert_eq!(r.spearman.mean, 1.0);
        assert_eq!(r.skipped_clusters, vec!["gone"]);

        let mut runs = run_map([list("c", &same)]);
        runs.insert("v1".into(), list("v1", &[("x", 0.9), ("y", 0.1)]));
        let r = coherence_eval(&runs, &cl[..1], &RboConfig::default()).unwrap();
        assert_eq!(r.rbo.mean, 0.0);
        assert_eq!(r.per_cluster["k"].pairs, 1);
    }

    #[test]
    fn opportunity_examples() {
        let with = [("d", 0.9), ("e", 0.5)];
        let without = [("e", 0.9), ("f", 0.5)];
        let mut runs = run_map([list("c", &with), list("v1", &with), list("v2", &with)]);
        runs.insert("v3".into(), list("v3", &without));
        runs.insert("v4".into(), list("v4", &without));
        let sel: BTreeMap<String, String> = [("c".to_string(), "d".to_string())].into();
        let all = opportunity(&runs, &[cluster("k", "c", &["v1", "v2"])], &sel, 50).unwrap();
        assert_eq!(all.per_query["c"], 1.0);
        let half = opportunity(&runs, &[cluster("k", "c", &["v1", "v2", "v3", "v4"])], &sel, 50).unwrap();
        assert_eq!(half.per_query["c"], 0.5);
        let none = opportunity(&runs, &[cluster("k", "c", &[])], &sel, 50).unwrap();
        assert_eq!(none.skipped, vec!["c"]);
        assert!(none.per_query.is_empty());

        let bad: BTreeMap<String, String> = [("c".to_string(), "zzz".to_string())].into();
        assert!(matches!(
            opportunity(&runs, &[cluster("k", "c", &["v1"])], &bad, 50),
            Err(MetricsError::InvalidSelection { .. })
        ));
        // d is at rank 1 of the canonical run but k = 1 excludes e from variants
        let edge = opportunity(&runs, &[cluster("k", "c", &["v1", "v3"])], &sel, 1).unwrap();
        assert_eq!(edge.per_query["c"], 0.5);
    }

    #[test]
    fn oracle_selector_examples() {
        let run = list("q", &(0..10).map(|i| (["d0", "d1", "d2", "d3", "d4", "d5", "d6", "d7", "d8", "d9"][i], 1.0 - i as f64 * 0.1)).collect::<Vec<_>>());
        let mut qrels = Qrels::new();
        assert_eq!(oracle_selector(&run, &qrels).unwrap(), "d0");
        qrels.insert("q", "d6", 1);
        assert_eq!(oracle_selector(&run, &qrels).unwrap(), "d6");
        qrels.insert("q", "d2", 1);
        assert_eq!(oracle_selector(&run, &qrels).unwrap(), "d2");
        let tied = list("q", &[("b", 0.5), ("a", 0.5)]);
        assert_eq!(oracle_selector(&tied, &Qrels::new()).unwrap(), "a");
        assert!(oracle_selector(&list("q", &[]), &qrels).is_none());
    }

    #[test]
    fn complexity_examples() {
        let ramp = |top: f64, bottom: f64| -> Vec<(String, f64)> {
            (0..50).map(|i| (format!("d{i}"), top - (top - bottom) * i as f64 / 49.0)).collect()
        };
        let runs = vec![
            RankedList::new("flat", ramp(0.95, 0.90)),
            RankedList::new("steep", ramp(0.95, 0.50)),
            RankedList::new("edge", ramp(0.2, 0.1)),
            RankedList::new("short", vec![("a".into(), 0.9), ("b".into(), 0.85)]),
            RankedList::new("empty", vec![]),
        ];
        assert_eq!(0.2f64 - 0.1, 0.1);
        assert_eq!(complexity_subset(&runs, 0.1, 50), vec!["flat", "short"]);
        let constant = vec![RankedList::new("c", vec![("a".into(), 0.3), ("b".into(), 0.3)])];
        assert_eq!(complexity_subset(&constant, 0.1, 50), vec!["c"]);
    }

    #[test]
    fn selections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.tsv");
        let sel: BTreeMap<String, String> = [("q1".into(), "d1".into()), ("q2".into(), "d9".into())].into();
        write_selections(&sel, &path).unwrap();
        assert_eq!(read_selections(&path).unwrap(), sel);
        fs::write(&path, "q1 d1\n").unwrap();
        assert!(matches!(read_selections(&path), Err(MetricsError::Parse { line: 1, .. })));
    }

    fn perm_strategy(n: usize) -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
        (Just(ids(n, "x")).prop_shuffle(), Just(ids(n, "x")).prop_shuffle(), 0..=n, 0..=n).prop_map(|(a, b, la, lb)| {
            (a[..la.max(1)].to_vec(), b[..lb.max(1)].to_vec())
        })
    }

    proptest! {
        #[test]
        fn rbo_matches_oracle_and_is_symmetric((s, t) in perm_strategy(8), k in 1usize..8) {
            let s: Vec<&str> = s.iter().map(String::as_str).collect();
            let t: Vec<&str> = t.iter().map(String::as_str).collect();
            let a = rbo_at_k(&s, &t, &cfg(k)).unwrap();
            let b = rbo_at_k(&t, &s, &cfg(k)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
            if s[..k.min(s.len())] == t[..k.min(t.len())] {
                prop_assert_eq!(a, 1.0);
            } else {
                prop_assert!((a - rbo_oracle(&s, &t, k, 0.9)).abs() < 1e-12);
            }
        }

        #[test]
        fn rbo_appending_shared_id_never_decreases((s, t) in perm_strategy(6), k in 1usize..10) {
            let mut s: Vec<&str> = s.iter().map(String::as_str).collect();
            let mut t: Vec<&str> = t.iter().map(String::as_str).collect();
            let before = rbo_at_k(&s, &t, &cfg(k)).unwrap();
            s.push("fresh");
            t.push("fresh");
            let after = rbo_at_k(&s, &t, &cfg(k)).unwrap();
            prop_assert!(after >= before - 1e-12, "{} < {}", after, before);
        }

        #[test]
        fn spearman_symmetric_and_bounded((s, t) in perm_strategy(8), k in 1usize..8) {
            let s: Vec<&str> = s.iter().map(String::as_str).collect();
            let t: Vec<&str> = t.iter().map(String::as_str).collect();
            let a = spearman_at_k(&s, &t, k).unwrap();
            prop_assert!((a - spearman_at_k(&t, &s, k).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert_eq!(spearman_at_k(&s, &s, k).unwrap(), 1.0);
        }

        #[test]
        fn relevance_in_unit_range(order in Just(ids(12, "d")).prop_shuffle(), grades in prop::collection::vec(0u32..3, 12)) {
            let mut qrels = Qrels::new();
            for (i, g) in grades.iter().enumerate() {
                qrels.insert("q", &format!("d{i}"), *g);
            }
            prop_assume!(grades.iter().any(|&g| g >= 1));
            let run = RankedList::new("q", order.iter().enumerate().map(|(i, d)| (d.clone(), -(i as f64))).collect());
            let m = query_relevance(&run, qrels.for_query("q").unwrap());
            for v in [m.p_at_1, m.mrr_at_10, m.ndcg_at_10, m.map_at_100] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            // the grade-sorted ordering is ideal
            let mut ideal: Vec<(String, f64)> = (0..12).map(|i| (format!("d{i}"), grades[i] as f64)).collect();
            ideal.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let best = query_relevance(&RankedList::new("q", ideal), qrels.for_query("q").unwrap());
            prop_assert!((best.ndcg_at_10 - 1.0).abs() < 1e-12);
            prop_assert!(m.ndcg_at_10 <= best.ndcg_at_10 + 1e-12);
        }

        #[test]
        fn opportunity_matches_membership_count(
            lists in prop::collection::vec(prop::collection::btree_set(0u8..15, 1..8), 2..7),
            k in 1usize..8,
        ) {
            let runs: RunMap = lists
                .iter()
                .enumerate()
                .map(|(i, set)| {
                    let q = format!("q{i}");
                    let entries = set.iter().enumerate().map(|(r, d)| (format!("d{d}"), -(r as f64))).collect();
                    (q.clone(), RankedList::new(q, entries))
                })
                .collect();
            let selected = runs["q0"].entries[0].0.clone();
            let variants: Vec<String> = (1..lists.len()).map(|i| format!("q{i}")).collect();
            let cl = QueryCluster { cluster_id: "c".into(), canonical_query_id: "q0".into(), variant_query_ids: variants.clone() };
            let sel: BTreeMap<String, String> = [("q0".to_string(), selected.clone())].into();
            let got = opportunity(&runs, &[cl], &sel, k).unwrap().per_query["q0"];
            let count = variants.iter().filter(|v| runs[*v].top_ids(k).contains(&selected.as_str())).count();
            prop_assert_eq!(got, count as f64 / variants.len() as f64);
        }
    }
}
