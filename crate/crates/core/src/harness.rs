//! Experiment plumbing: configuration, search over a dataset, evaluation
//! reports, lambda sweeps and the gradient self-check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{compare_gradients, analytic_gradients, l2_normalize_rows, AutodiffError, GradCheckReport, Tape, Tensor, Var};
use crate::data::{self, Dataset, RankedList, Split};
use crate::encoder::{EncoderError, EncoderParams};
use crate::losses::{cr_loss, mnr_loss, qea_term, qq_pair_loss, smc_term, LossBatch, LossConfig, LAMBDA_GRID};
use crate::metrics::{
    coherence_eval, complexity_subset, opportunity, oracle_selector, relevance_metrics, run_map, CoherenceReport, MeanStd,
    MetricsError, OpportunityReport, RboConfig, RelevanceSummary, RunMap,
};
use crate::retrieval::{search_best_reform_embeddings, search_centroid_embeddings, search_topk, RetrievalError, VectorIndex};
use crate::synthetic::{generate, GenerationError, GeneratorConfig};
use crate::trainer::{train, History, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_at(path))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_at(path))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// How each query is turned into a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Single,
    /// Centroid of the query and the other members of its cluster.
    Centroid,
    /// Best score over the query and the other members of its cluster.
    Best,
}

impl FromStr for Strategy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Strategy::Single),
            "centroid" => Ok(Strategy::Centroid),
            "best" => Ok(Strategy::Best),
            other => Err(HarnessError::Usage(format!(
                "unknown strategy `{other}` (expected single, centroid or best)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub k_coherence: usize,
    pub rbo_p: f64,
    pub k_opportunity: usize,
    pub complexity_threshold: f64,
    pub complexity_depth: usize,
    /// Retrieval depth of evaluation runs; covers MAP@100.
    pub run_depth: usize,
    pub strategy: Strategy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            k_coherence: 5,
            rbo_p: 0.9,
            k_opportunity: 50,
            complexity_threshold: 0.1,
            complexity_depth: 50,
            run_depth: 100,
            strategy: Strategy::Single,
        }
    }
}

impl EvalSettings {
    pub fn rbo(&self) -> RboConfig {
        RboConfig {
            k: self.k_coherence,
            p: self.rbo_p,
            normalized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Directory with the standard dataset files; generated when absent.
    pub data_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub tag: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            tag: "coherank".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_file(path)?).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(dir) => Ok(Dataset::load_dir(dir, true)?),
            None => Ok(generate(&self.generator)?.dataset),
        }
    }
}

/// Query ids searched for `split`: every member of the split's clusters.
pub fn split_query_ids(dataset: &Dataset, split: Option<Split>) -> Vec<String> {
    dataset
        .clusters_in(split)
        .flat_map(|c| c.members().map(str::to_string))
        .collect()
}

/// Rankings for `query_ids`. Non-single strategies combine each query with the
/// rest of its cluster, the query itself first.
pub fn search_queries(
    dataset: &Dataset,
    encoder: &EncoderParams,
    index: &VectorIndex,
    query_ids: &[String],
    k: usize,
    strategy: Strategy,
) -> Result<Vec<RankedList>> {
    let text = |id: &str| {
        dataset
            .query_text(id)
            .ok_or_else(|| HarnessError::Usage(format!("unknown query `{id}`")))
    };
    let mut out = Vec::with_capacity(query_ids.len());
    for qid in query_ids {
        let mut texts = vec![text(qid)?];
        if strategy != Strategy::Single {
            let cluster = dataset.queries.get(qid).and_then(|q| dataset.clusters.get(&q.cluster_id));
            for member in cluster.into_iter().flat_map(|c| c.members()) {
                if member != qid {
                    texts.push(text(member)?);
                }
            }
        }
        let emb = encoder.encode(&texts).map_err(|e| match e {
            EncoderError::EmptyText { text, .. } => HarnessError::Retrieval(RetrievalError::EmptyText(vec![text])),
            other => other.into(),
        })?;
        out.push(match strategy {
            Strategy::Single => search_topk(index, qid, emb.row(0), k)?,
            Strategy::Centroid => search_centroid_embeddings(index, qid, &emb, k)?,
            Strategy::Best => search_best_reform_embeddings(index, qid, &emb, k)?,
        });
    }
    Ok(out)
}

/// Where a reported number came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub quantity: String,
    pub operation: String,
    pub inputs: String,
}

fn prov(quantity: &str, operation: &str, inputs: String) -> Provenance {
    Provenance {
        quantity: quantity.into(),
        operation: operation.into(),
        inputs,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexitySection {
    pub threshold: f64,
    pub depth: usize,
    pub queries: usize,
    pub clusters: usize,
    pub rbo: MeanStd,
    pub spearman: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpportunitySection {
    pub k: usize,
    /// `oracle` or the selections file path.
    pub selection_source: String,
    pub report: OpportunityReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_dev_ndcg_at_10: f64,
    pub stopped_early: bool,
    pub final_mnr: f64,
    pub final_qea: f64,
    pub final_smc: f64,
}

impl From<&History> for LossSummary {
    fn from(h: &History) -> Self {
        let last = h.epochs.last().map(|e| e.mean).unwrap_or_default();
        Self {
            epochs: h.epochs.len(),
            best_epoch: h.best_epoch,
            best_dev_ndcg_at_10: h.best_dev,
            stopped_early: h.stopped_early,
            final_mnr: last.mnr,
            final_qea: last.qea,
            final_smc: last.smc,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tag: String,
    pub config: serde_json::Value,
    pub relevance: RelevanceSummary,
    pub relevance_queries: usize,
    pub coherence: CoherenceReport,
    pub complexity: ComplexitySection,
    pub opportunity: Option<OpportunitySection>,
    pub loss: Option<LossSummary>,
    pub provenance: Vec<Provenance>,
}

/// Evaluates runs on the clusters of `split`: relevance on canonical queries,
/// coherence on canonical/variant pairs, coherence restricted to the
/// complexity subset, and re-ranking opportunity when runs are deep enough.
pub fn evaluate(
    dataset: &Dataset,
    runs: &RunMap,
    split: Option<Split>,
    settings: &EvalSettings,
    selections: Option<(&BTreeMap<String, String>, &str)>,
) -> Result<Report> {
    let clusters: Vec<_> = dataset.clusters_in(split).cloned().collect();
    let split_name = split.map_or("all".to_string(), |s| format!("{s:?}").to_lowercase());
    let canonical_runs: Vec<RankedList> = clusters
        .iter()
        .filter_map(|c| runs.get(&c.canonical_query_id).cloned())
        .collect();
    let relevance = relevance_metrics(&canonical_runs, &dataset.qrels);
    let coherence = coherence_eval(runs, &clusters, &settings.rbo())?;

    let subset = complexity_subset(&canonical_runs, settings.complexity_threshold, settings.complexity_depth);
    let subset_clusters: Vec<_> = clusters
        .iter()
        .filter(|c| subset.contains(&c.canonical_query_id))
        .cloned()
        .collect();
    let sub = coherence_eval(runs, &subset_clusters, &settings.rbo())?;
    let complexity = ComplexitySection {
        threshold: settings.complexity_threshold,
        depth: settings.complexity_depth,
        queries: subset.len(),
        clusters: sub.per_cluster.len(),
        rbo: sub.rbo,
        spearman: sub.spearman,
    };

    let mut provenance = vec![
        prov(
            "relevance",
            "metrics::relevance_metrics",
            format!("{} canonical {split_name} runs, qrels", canonical_runs.len()),
        ),
        prov(
            "coherence",
            "metrics::coherence_eval",
            format!("{} {split_name} clusters, rbo k={} p={}", clusters.len(), settings.k_coherence, settings.rbo_p),
        ),
        prov(
            "complexity",
            "metrics::complexity_subset + metrics::coherence_eval",
            format!(
                "canonical runs, threshold {} depth {}",
                settings.complexity_threshold, settings.complexity_depth
            ),
        ),
    ];

    let depth = canonical_runs.iter().map(RankedList::len).min().unwrap_or(0);
    let opportunity_section = if depth >= settings.k_opportunity {
        let section = opportunity_section(dataset, runs, split, settings.k_opportunity, selections)?;
        provenance.push(prov(
            "opportunity",
            "metrics::opportunity + metrics::oracle_selector",
            format!(
                "{split_name} clusters, k={}, selections: {}",
                settings.k_opportunity, section.selection_source
            ),
        ));
        Some(section)
    } else {
        None
    };

    Ok(Report {
        tag: String::new(),
        config: serde_json::Value::Null,
        relevance: relevance.mean,
        relevance_queries: relevance.per_query.len(),
        coherence,
        complexity,
        opportunity: opportunity_section,
        loss: None,
        provenance,
    })
}

/// Re-ranking opportunity at depth `k` for the clusters of `split`. Each
/// canonical query's selected document comes from `selections` when given,
/// otherwise from the oracle selector over its own top `k`. Runs shallower
/// than `k` are a usage error.
pub fn opportunity_section(
    dataset: &Dataset,
    runs: &RunMap,
    split: Option<Split>,
    k: usize,
    selections: Option<(&BTreeMap<String, String>, &str)>,
) -> Result<OpportunitySection> {
    // only variants that were actually searched take part
    let clusters: Vec<_> = dataset
        .clusters_in(split)
        .filter(|c| runs.contains_key(&c.canonical_query_id))
        .map(|c| {
            let mut c = c.clone();
            c.variant_query_ids.retain(|v| runs.contains_key(v));
            c
        })
        .collect();
    for c in &clusters {
        for id in c.members() {
            let depth = runs[id].len();
            if depth < k {
                return Err(HarnessError::Usage(format!(
                    "run for `{id}` has depth {depth}, opportunity needs k={k}"
                )));
            }
        }
    }
    let (chosen, source) = match selections {
        Some((sel, source)) => (sel.clone(), source.to_string()),
        None => (
            clusters
                .iter()
                .filter_map(|c| {
                    let r = &runs[&c.canonical_query_id];
                    let top = RankedList::new(r.query_id.clone(), r.entries.iter().take(k).cloned().collect());
                    oracle_selector(&top, &dataset.qrels).map(|d| (r.query_id.clone(), d))
                })
                .collect(),
            "oracle".to_string(),
        ),
    };
    let report = opportunity(runs, &clusters, &chosen, k)?;
    Ok(OpportunitySection {
        k,
        selection_source: source,
        report,
    })
}

impl Report {
    /// Plain-text summary, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "report: {}", self.tag);
        let _ = writeln!(s, "relevance ({} queries)", self.relevance_queries);
        for (name, m) in [
            ("P@1", &self.relevance.p_at_1),
            ("MRR@10", &self.relevance.mrr_at_10),
            ("NDCG@10", &self.relevance.ndcg_at_10),
            ("MAP@100", &self.relevance.map_at_100),
        ] {
            let _ = writeln!(s, "  {name:<10} {m}");
        }
        let _ = writeln!(s, "coherence ({} pairs)", self.coherence.rbo.n);
        let _ = writeln!(s, "  {:<10} {}", "RBO", self.coherence.rbo);
        let _ = writeln!(s, "  {:<10} {}", "Spearman", self.coherence.spearman);
        let c = &self.complexity;
        let _ = writeln!(
            s,
            "complexity subset (gap < {} at depth {}: {} queries)",
            c.threshold, c.depth, c.queries
        );
        let _ = writeln!(s, "  {:<10} {}", "RBO", c.rbo);
        let _ = writeln!(s, "  {:<10} {}", "Spearman", c.spearman);
        if let Some(o) = &self.opportunity {
            let _ = writeln!(s, "opportunity (k={}, selections: {})", o.k, o.selection_source);
            let _ = writeln!(s, "  {:<10} {}", "mean", o.report.mean);
        }
        if let Some(l) = &self.loss {
            let _ = writeln!(
                s,
                "training: {} epochs, best epoch {} (dev NDCG@10 {:.4}), final mnr {:.4} qea {:.4} smc {:.4}",
                l.epochs, l.best_epoch, l.best_dev_ndcg_at_10, l.final_mnr, l.final_qea, l.final_smc
            );
        }
        let _ = writeln!(s, "provenance");
        for p in &self.provenance {
            let _ = writeln!(s, "  {}: {} on {}", p.quantity, p.operation, p.inputs);
        }
        s
    }
}

/// Result of one training-plus-evaluation run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub params: EncoderParams,
    pub history: History,
    pub runs: Vec<RankedList>,
    pub report: Report,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const RUN_FILE: &str = "run.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const CONFIG_ECHO: &str = "config.json";

/// Trains on the dataset, searches every test-split query and evaluates.
pub fn run_experiment_on(dataset: &Dataset, config: &ExperimentConfig) -> Result<ExperimentResult> {
    let outcome = train(dataset, &config.train)?;
    let index = VectorIndex::build(dataset.corpus.values(), &outcome.params)?;
    let ids = split_query_ids(dataset, Some(Split::Test));
    let runs = search_queries(dataset, &outcome.params, &index, &ids, config.eval.run_depth, config.eval.strategy)?;
    let mut report = evaluate(dataset, &run_map(runs.clone()), Some(Split::Test), &config.eval, None)?;
    report.tag = config.tag.clone();
    report.config = serde_json::to_value(config).expect("config serializes");
    report.loss = Some(LossSummary::from(&outcome.history));
    Ok(ExperimentResult {
        params: outcome.params,
        history: outcome.history,
        runs,
        report,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_on(&config.dataset()?, config)
}

/// Writes the checkpoint, history, run file and report into `dir`.
pub fn write_experiment(result: &ExperimentResult, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_file(&dir.join(CONFIG_ECHO), to_json(config))?;
    result.params.save(&dir.join(CHECKPOINT_FILE))?;
    result.history.write_epochs(&dir.join(HISTORY_FILE))?;
    result.history.write_steps(&dir.join(STEPS_FILE))?;
    data::write_run(&result.runs, &config.tag, &dir.join(RUN_FILE))?;
    write_file(&dir.join(REPORT_JSON), to_json(&result.report))?;
    write_file(&dir.join(REPORT_TEXT), result.report.to_text())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub ndcg_at_10: f64,
    pub rbo: f64,
    pub spearman: f64,
    pub best_epoch: usize,
}

/// Trains and evaluates once per `(lambda1, lambda2)` in the grid.
pub fn sweep(dataset: &Dataset, config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &l1 in &LAMBDA_GRID {
        for &l2 in &LAMBDA_GRID {
            let mut cfg = config.clone();
            cfg.train.loss = cfg.train.loss.with_lambdas(l1, l2);
            cfg.tag = format!("{}-l{l1}-{l2}", config.tag);
            let r = run_experiment_on(dataset, &cfg)?;
            log::info!("sweep lambda1={l1} lambda2={l2}: rbo {:.4}", r.report.coherence.rbo.mean);
            rows.push(SweepRow {
                lambda1: l1,
                lambda2: l2,
                ndcg_at_10: r.report.relevance.ndcg_at_10.mean,
                rbo: r.report.coherence.rbo.mean,
                spearman: r.report.coherence.spearman.mean,
                best_epoch: r.history.best_epoch,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda1 lambda2  NDCG@10   RBO@5  Spearman  best_epoch\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>7.1} {:>7.1}  {:>7.4}  {:>6.4}  {:>8.4}  {:>10}",
            r.lambda1, r.lambda2, r.ndcg_at_10, r.rbo, r.spearman, r.best_epoch
        );
    }
    s
}

/// Batch shape used by the gradient self-check.
pub const GRADCHECK_SHAPE: (usize, usize, usize, usize) = (4, 2, 3, 16);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub loss: String,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<GradCheckRow>,
    pub pass: bool,
}

impl GradCheckSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!("gradcheck seed={} h={:e} tol={:e}\n", self.seed, self.step, self.tolerance);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "  {:<4} max_rel_err {:.3e} over {} coordinates  {}",
                r.loss,
                r.max_rel_err,
                r.coordinates,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "{}", if self.pass { "all passed" } else { "FAILED" });
        s
    }
}

/// Seeded raw leaves `[queries, variants, positives, negatives]` with the
/// self-check batch shape.
pub fn gradcheck_leaves(seed: u64) -> Vec<Tensor> {
    let (b, v, n, d) = GRADCHECK_SHAPE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [b, b * v, b, b * n]
        .iter()
        .map(|&rows| {
            let data = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = Tensor::new(rows, d, data).expect("finite");
            l2_normalize_rows(&t).expect("non-degenerate").0
        })
        .collect()
}

type LossProgram = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;

fn loss_program(name: &'static str) -> LossProgram {
    let config = LossConfig::default().with_lambdas(0.5, 0.5);
    let lift = |e: crate::losses::LossError| match e {
        crate::losses::LossError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument(other.to_string()),
    };
    Box::new(move |tape: &mut Tape, leaves: &[Var]| {
        let unit = leaves
            .iter()
            .map(|&x| tape.rowwise_l2_normalize(x))
            .collect::<Result<Vec<_>, _>>()?;
        if name == "qq" {
            return qq_pair_loss(tape, unit[0], unit[2], config.scale).map_err(lift);
        }
        let batch = LossBatch::new(tape, unit[0], Some(unit[1]), unit[2], unit[3]).map_err(lift)?;
        match name {
            "mnr" => mnr_loss(tape, &batch, &config).map_err(lift),
            "qea" => qea_term(tape, &batch).map(|t| t.value).map_err(lift),
            "smc" => smc_term(tape, &batch, config.normalize_smc).map(|t| t.value).map_err(lift),
            _ => cr_loss(tape, &batch, &config).map(|o| o.total).map_err(lift),
        }
    })
}

pub const GRADCHECK_LOSSES: [&str; 5] = ["mnr", "qea", "smc", "cr", "qq"];

/// Finite-difference check of every loss on a seeded batch. `corrupt`
/// perturbs one analytic gradient coordinate to exercise the failure path.
pub fn gradcheck_suite(seed: u64, corrupt: bool) -> Result<GradCheckSummary> {
    let (h, tol) = (1e-5, 1e-4);
    let leaves = gradcheck_leaves(seed);
    let mut rows = Vec::new();
    for name in GRADCHECK_LOSSES {
        let f = loss_program(name);
        let mut analytic = analytic_gradients(&f, &leaves)?;
        if corrupt {
            let first = Tensor::new(
                analytic[0].rows(),
                analytic[0].cols(),
                analytic[0].data().iter().enumerate().map(|(i, &g)| if i == 0 { g + 1.0 } else { g }).collect(),
            )?;
            analytic[0] = first;
        }
        let r: GradCheckReport = compare_gradients(&f, &leaves, &analytic, h, tol)?;
        rows.push(GradCheckRow {
            loss: name.to_string(),
            max_rel_err: r.max_rel_err,
            coordinates: r.coordinates,
            pass: r.pass,
        });
    }
    Ok(GradCheckSummary {
        seed,
        step: h,
        tolerance: tol,
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            generator: GeneratorConfig {
                concepts: 80,
                docs: 200,
                train_clusters: 40,
                dev_clusters: 10,
                test_clusters: 10,
                ..GeneratorConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                batch_size: 16,
                feature_count: 256,
                dim: 16,
                ..TrainConfig::default()
            },
            eval: EvalSettings {
                run_depth: 60,
                ..EvalSettings::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("centroid".parse::<Strategy>().unwrap(), Strategy::Centroid);
        assert!(matches!("median".parse::<Strategy>(), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn experiment_report_sections() {
        let cfg = small();
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.runs.len(), 50);
        assert!(r.runs.iter().all(|l| l.len() == 60));
        assert_eq!(r.report.relevance_queries, 10);
        assert_eq!(r.report.coherence.rbo.n, 40);
        let o = r.report.opportunity.as_ref().unwrap();
        assert_eq!(o.selection_source, "oracle");
        assert!(o.report.per_query.values().all(|v| (0.0..=1.0).contains(v)));
        let text = r.report.to_text();
        assert!(text.contains(" ± "));
        assert!(text.contains("provenance"));
        assert_eq!(r.report.provenance.len(), 4);
    }

    #[test]
    fn perfect_retriever_scores_one() {
        let d = small().dataset().unwrap();
        let ids = split_query_ids(&d, Some(Split::Test));
        let runs: RunMap = ids
            .iter()
            .map(|q| {
                let rel: Vec<(String, f64)> = d.qrels.relevant(q).map(|doc| (doc.to_string(), 1.0)).collect();
                (q.clone(), RankedList::new(q.clone(), rel))
            })
            .collect();
        let r = evaluate(&d, &runs, Some(Split::Test), &EvalSettings::default(), None).unwrap();
        assert_eq!(r.relevance.ndcg_at_10.mean, 1.0);
        assert_eq!(r.relevance.p_at_1.mean, 1.0);
        assert_eq!(r.relevance.map_at_100.mean, 1.0);
        assert_eq!(r.relevance.mrr_at_10.mean, 1.0);
    }

    #[test]
    fn missing_variant_runs_only_affect_coherence() {
        let cfg = small();
        let d = cfg.dataset().unwrap();
        let enc = EncoderParams::new(256, 16, 1).unwrap();
        let index = VectorIndex::build(d.corpus.values(), &enc).unwrap();
        let ids = split_query_ids(&d, Some(Split::Test));
        let runs = run_map(search_queries(&d, &enc, &index, &ids, 60, Strategy::Single).unwrap());
        let full = evaluate(&d, &runs, Some(Split::Test), &cfg.eval, None).unwrap();
        let canon_only: RunMap = runs.into_iter().filter(|(q, _)| d.queries[q].is_canonical).collect();
        let partial = evaluate(&d, &canon_only, Some(Split::Test), &cfg.eval, None).unwrap();
        assert_eq!(partial.relevance, full.relevance);
        assert_eq!(partial.coherence.skipped_clusters.len(), 10);
    }

    #[test]
    fn centroid_matches_single_on_singleton_clusters() {
        let mut d = small().dataset().unwrap();
        for c in d.clusters.values_mut() {
            c.variant_query_ids.clear();
        }
        let enc = EncoderParams::new(256, 16, 1).unwrap();
        let index = VectorIndex::build(d.corpus.values(), &enc).unwrap();
        let ids = split_query_ids(&d, Some(Split::Test));
        let single = search_queries(&d, &enc, &index, &ids, 50, Strategy::Single).unwrap();
        let centroid = search_queries(&d, &enc, &index, &ids, 50, Strategy::Centroid).unwrap();
        assert_eq!(data::format_run(&single, "t"), data::format_run(&centroid, "t"));
    }

    #[test]
    fn gradcheck_suite_passes_and_detects_corruption() {
        let ok = gradcheck_suite(0, false).unwrap();
        assert!(ok.pass, "{}", ok.to_text());
        assert_eq!(ok.rows.len(), 5);
        assert_eq!(ok, gradcheck_suite(0, false).unwrap());
        let bad = gradcheck_suite(0, true).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn sweep_covers_grid() {
        let mut cfg = small();
        cfg.train.max_epochs = 1;
        cfg.generator.train_clusters = 16;
        let d = cfg.dataset().unwrap();
        let rows = sweep(&d, &cfg).unwrap();
        assert_eq!(rows.len(), 25);
        assert!(sweep_table(&rows).lines().count() == 26);
    }
}
