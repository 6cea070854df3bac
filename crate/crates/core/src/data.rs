//! Dataset records and file I/O.
//!
//! Corpus, queries and training triplets are JSON lines; relevance judgements
//! and runs use the whitespace-separated TREC text formats:
//!
//! ```text
//! qrels: qid 0 docid grade
//! run:   qid Q0 docid rank score tag
//! ```
//!
//! Every map is a `BTreeMap` so that iteration, and therefore anything written
//! back out, is deterministic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate id `{id}` at {path}:{line}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("cluster `{cluster_id}`: {message}")]
    Cluster { cluster_id: String, message: String },
    #[error("invalid triplet for query `{query_id}`: {message}")]
    InvalidTriplet { query_id: String, message: String },
    #[error("run format error at {path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unresolved reference: {0}")]
    Reference(String),
    #[error("invalid ranked list for `{query_id}`: {message}")]
    InvalidRanking { query_id: String, message: String },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// Dataset split a query belongs to. Optional in the queries file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub cluster_id: String,
    pub is_canonical: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// A set of equivalent queries: one canonical member and its variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCluster {
    pub cluster_id: String,
    pub canonical_query_id: String,
    pub variant_query_ids: Vec<String>,
}

impl QueryCluster {
    /// Canonical id followed by the variants, in file order.
    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical_query_id.as_str())
            .chain(self.variant_query_ids.iter().map(String::as_str))
    }
}

/// Graded relevance judgements, `query_id -> doc_id -> grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgements: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a grade, returning the previous one if the pair was already judged.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Option<u32> {
        self.judgements
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
    }

    pub fn remove(&mut self, query_id: &str, doc_id: &str) -> Option<u32> {
        let docs = self.judgements.get_mut(query_id)?;
        let old = docs.remove(doc_id);
        if docs.is_empty() {
            self.judgements.remove(query_id);
        }
        old
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgements
            .get(query_id)
            .and_then(|docs| docs.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgements.get(query_id)
    }

    /// Documents judged with grade >= 1.
    pub fn relevant(&self, query_id: &str) -> impl Iterator<Item = &str> {
        self.judgements
            .get(query_id)
            .into_iter()
            .flat_map(|docs| docs.iter().filter(|(_, g)| **g >= 1).map(|(d, _)| d.as_str()))
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgements.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgements.iter().flat_map(|(q, docs)| {
            docs.iter().map(move |(d, g)| (q.as_str(), d.as_str(), *g))
        })
    }

    pub fn len(&self) -> usize {
        self.judgements.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgements.is_empty()
    }
}

/// One training triplet `<q, d+, D->` plus the ids of equivalent queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_id: String,
    pub positive_doc_id: String,
    pub negative_doc_ids: Vec<String>,
    #[serde(default)]
    pub variant_query_ids: Vec<String>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| DataError::InvalidTriplet {
            query_id: self.query_id.clone(),
            message,
        };
        if self.negative_doc_ids.contains(&self.positive_doc_id) {
            return Err(invalid(format!(
                "positive `{}` listed among negatives",
                self.positive_doc_id
            )));
        }
        let mut seen = BTreeSet::new();
        for neg in &self.negative_doc_ids {
            if !seen.insert(neg) {
                return Err(invalid(format!("negative `{neg}` repeated")));
            }
        }
        Ok(())
    }
}

/// Descending `(doc_id, score)` list retrieved for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, entries: Vec<(String, f64)>) -> Self {
        Self {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }

    /// The first `k` doc ids.
    pub fn top_ids(&self, k: usize) -> Vec<&str> {
        self.doc_ids().take(k).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that scores are non-increasing and ids distinct.
    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| DataError::InvalidRanking {
            query_id: self.query_id.clone(),
            message,
        };
        let mut seen = BTreeSet::new();
        for (i, (doc, score)) in self.entries.iter().enumerate() {
            if !seen.insert(doc.as_str()) {
                return Err(invalid(format!("doc `{doc}` repeated")));
            }
            if i > 0 && *score > self.entries[i - 1].1 {
                return Err(invalid(format!("score increases at rank {}", i + 1)));
            }
        }
        Ok(())
    }
}

/// One line of a TREC run file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

impl RunRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{} Q0 {} {} {:.6} {}",
            self.query_id, self.doc_id, self.rank, self.score, self.tag
        )
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_json_line<T: for<'de> Deserialize<'de>>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

/// Parsing knobs shared by the loaders.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept documents with empty text.
    pub allow_empty_text: bool,
}

pub fn load_corpus(path: &Path) -> Result<BTreeMap<String, Document>> {
    load_corpus_with(path, LoadOptions::default())
}

pub fn load_corpus_with(path: &Path, options: LoadOptions) -> Result<BTreeMap<String, Document>> {
    let mut corpus = BTreeMap::new();
    for (line_no, line) in read_lines(path)? {
        let doc: Document = parse_json_line(path, line_no, &line)?;
        if doc.doc_id.is_empty() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty doc_id".into(),
            });
        }
        if doc.text.is_empty() && !options.allow_empty_text {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("document `{}` has empty text", doc.doc_id),
            });
        }
        if corpus.contains_key(&doc.doc_id) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: doc.doc_id,
            });
        }
        corpus.insert(doc.doc_id.clone(), doc);
    }
    Ok(corpus)
}

pub type QueryMap = BTreeMap<String, Query>;
pub type ClusterMap = BTreeMap<String, QueryCluster>;

pub fn load_queries(path: &Path) -> Result<(QueryMap, ClusterMap)> {
    let mut queries = QueryMap::new();
    let mut order = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let query: Query = parse_json_line(path, line_no, &line)?;
        if queries.contains_key(&query.query_id) {
            return Err(DataError::DuplicateId {
                path: path.to_path_buf(),
                line: line_no,
                id: query.query_id,
            });
        }
        order.push(query.query_id.clone());
        queries.insert(query.query_id.clone(), query);
    }
    let clusters = assemble_clusters(order.iter().map(|id| &queries[id]))?;
    Ok((queries, clusters))
}

/// Groups queries into clusters, keeping variant order as given.
pub fn assemble_clusters<'a>(queries: impl IntoIterator<Item = &'a Query>) -> Result<ClusterMap> {
    let mut canonical: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut variants: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for q in queries {
        canonical.entry(q.cluster_id.clone()).or_default();
        variants.entry(q.cluster_id.clone()).or_default();
        if q.is_canonical {
            canonical.get_mut(&q.cluster_id).unwrap().push(q.query_id.clone());
        } else {
            variants.get_mut(&q.cluster_id).unwrap().push(q.query_id.clone());
        }
    }
    let mut clusters = ClusterMap::new();
    for (cluster_id, mut canon) in canonical {
        if canon.len() != 1 {
            return Err(DataError::Cluster {
                message: format!("expected exactly one canonical query, found {}", canon.len()),
                cluster_id,
            });
        }
        let variant_query_ids = variants.remove(&cluster_id).unwrap_or_default();
        clusters.insert(
            cluster_id.clone(),
            QueryCluster {
                cluster_id,
                canonical_query_id: canon.pop().unwrap(),
                variant_query_ids,
            },
        );
    }
    Ok(clusters)
}

/// Parsed qrels together with the number of overwritten duplicate judgements.
#[derive(Debug, Clone, Default)]
pub struct QrelsLoad {
    pub qrels: Qrels,
    pub duplicates: usize,
}

pub fn load_qrels(path: &Path) -> Result<QrelsLoad> {
    let mut load = QrelsLoad::default();
    for (line_no, line) in read_lines(path)? {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if cols.len() != 4 {
            return Err(parse_err(format!("expected 4 columns, found {}", cols.len())));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| parse_err(format!("grade `{}` is not an integer", cols[3])))?;
        // Negative grades appear in some TREC collections; they count as non-relevant.
        let grade = grade.max(0) as u32;
        if load.qrels.insert(cols[0], cols[2], grade).is_some() {
            log::warn!("{}:{line_no}: duplicate judgement for ({}, {})", path.display(), cols[0], cols[2]);
            load.duplicates += 1;
        }
    }
    Ok(load)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, d, g) in qrels.iter() {
        let _ = writeln!(out, "{q} 0 {d} {g}");
    }
    out
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    fs::write(path, format_qrels(qrels)).map_err(io_err(path))
}

/// Renders ranked lists as TREC run lines; scores carry six decimals.
pub fn format_run(lists: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for list in lists {
        for (i, (doc_id, score)) in list.entries.iter().enumerate() {
            let record = RunRecord {
                query_id: list.query_id.clone(),
                doc_id: doc_id.clone(),
                rank: i + 1,
                score: *score,
                tag: tag.to_string(),
            };
            out.push_str(&record.to_line());
            out.push('\n');
        }
    }
    out
}

pub fn write_run(lists: &[RankedList], tag: &str, path: &Path) -> Result<()> {
    for list in lists {
        list.validate()?;
    }
    fs::write(path, format_run(lists, tag)).map_err(io_err(path))
}

/// Reads a run file. Lists come back in first-appearance order of their query ids.
pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    let mut lists: Vec<RankedList> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (line_no, line) in read_lines(path)? {
        let fmt_err = |message: String| DataError::Format {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(fmt_err(format!("expected 6 columns, found {}", cols.len())));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| fmt_err(format!("rank `{}` is not an integer", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| fmt_err(format!("score `{}` is not a number", cols[4])))?;
        let slot = *index.entry(cols[0].to_string()).or_insert_with(|| {
            lists.push(RankedList::new(cols[0], Vec::new()));
            lists.len() - 1
        });
        let list = &mut lists[slot];
        if rank != list.entries.len() + 1 {
            return Err(fmt_err(format!(
                "query `{}`: expected rank {}, found {rank}",
                cols[0],
                list.entries.len() + 1
            )));
        }
        if let Some((_, prev)) = list.entries.last() {
            if score > *prev {
                return Err(fmt_err(format!("query `{}`: score increases at rank {rank}", cols[0])));
            }
        }
        list.entries.push((cols[2].to_string(), score));
    }
    Ok(lists)
}

pub fn load_triplets(path: &Path) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let example: TrainingExample = parse_json_line(path, line_no, &line)?;
        example.validate()?;
        out.push(example);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_corpus<'a>(docs: impl IntoIterator<Item = &'a Document>, path: &Path) -> Result<()> {
    write_jsonl(docs, path)
}

pub fn write_queries<'a>(queries: impl IntoIterator<Item = &'a Query>, path: &Path) -> Result<()> {
    write_jsonl(queries, path)
}

pub fn write_triplets(examples: &[TrainingExample], path: &Path) -> Result<()> {
    write_jsonl(examples, path)
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const QRELS_FILE: &str = "qrels.txt";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

/// Everything one experiment reads.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub corpus: BTreeMap<String, Document>,
    pub queries: QueryMap,
    pub clusters: ClusterMap,
    pub qrels: Qrels,
    pub triplets: Vec<TrainingExample>,
}

impl Dataset {
    /// Loads the four standard files from `dir`. A missing triplets file is
    /// treated as an empty training set.
    pub fn load_dir(dir: &Path, strict: bool) -> Result<Self> {
        let corpus = load_corpus(&dir.join(CORPUS_FILE))?;
        let (queries, clusters) = load_queries(&dir.join(QUERIES_FILE))?;
        let qrels = load_qrels(&dir.join(QRELS_FILE))?.qrels;
        let triplets_path = dir.join(TRIPLETS_FILE);
        let triplets = if triplets_path.exists() {
            load_triplets(&triplets_path)?
        } else {
            Vec::new()
        };
        let dataset = Self {
            corpus,
            queries,
            clusters,
            qrels,
            triplets,
        };
        if strict {
            dataset.validate_references()?;
        }
        Ok(dataset)
    }

    /// Writes the dataset in the standard layout. Queries are written cluster by
    /// cluster, canonical first.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_corpus(self.corpus.values(), &dir.join(CORPUS_FILE))?;
        let ordered: Vec<&Query> = self
            .clusters
            .values()
            .flat_map(|c| c.members().map(|id| &self.queries[id]))
            .collect();
        write_queries(ordered, &dir.join(QUERIES_FILE))?;
        write_qrels(&self.qrels, &dir.join(QRELS_FILE))?;
        write_triplets(&self.triplets, &dir.join(TRIPLETS_FILE))
    }

    /// Strict referential checks across files.
    pub fn validate_references(&self) -> Result<()> {
        for (cluster_id, cluster) in &self.clusters {
            for id in cluster.members() {
                match self.queries.get(id) {
                    Some(q) if &q.cluster_id == cluster_id => {}
                    Some(_) => {
                        return Err(DataError::Cluster {
                            cluster_id: cluster_id.clone(),
                            message: format!("member `{id}` carries a different cluster_id"),
                        })
                    }
                    None => return Err(DataError::Reference(format!("query `{id}` in cluster `{cluster_id}`"))),
                }
            }
            if cluster.variant_query_ids.contains(&cluster.canonical_query_id) {
                return Err(DataError::Cluster {
                    cluster_id: cluster_id.clone(),
                    message: "canonical query listed as a variant".into(),
                });
            }
        }
        for (q, d, _) in self.qrels.iter() {
            if !self.queries.contains_key(q) {
                return Err(DataError::Reference(format!("qrels query `{q}`")));
            }
            if !self.corpus.contains_key(d) {
                return Err(DataError::Reference(format!("qrels document `{d}`")));
            }
        }
        for ex in &self.triplets {
            let query = self
                .queries
                .get(&ex.query_id)
                .ok_or_else(|| DataError::Reference(format!("triplet query `{}`", ex.query_id)))?;
            for doc in std::iter::once(&ex.positive_doc_id).chain(&ex.negative_doc_ids) {
                if !self.corpus.contains_key(doc) {
                    return Err(DataError::Reference(format!("triplet document `{doc}`")));
                }
            }
            for v in &ex.variant_query_ids {
                match self.queries.get(v) {
                    Some(vq) if vq.cluster_id == query.cluster_id => {}
                    Some(_) => {
                        return Err(DataError::InvalidTriplet {
                            query_id: ex.query_id.clone(),
                            message: format!("variant `{v}` belongs to another cluster"),
                        })
                    }
                    None => return Err(DataError::Reference(format!("triplet variant `{v}`"))),
                }
            }
        }
        Ok(())
    }

    /// Clusters whose canonical query is in `split` (all clusters for `None`).
    pub fn clusters_in(&self, split: Option<Split>) -> impl Iterator<Item = &QueryCluster> {
        self.clusters.values().filter(move |c| {
            split.is_none()
                || self
                    .queries
                    .get(&c.canonical_query_id)
                    .is_some_and(|q| q.split == split)
        })
    }

    pub fn query_text(&self, query_id: &str) -> Option<&str> {
        self.queries.get(query_id).map(|q| q.text.as_str())
    }

    pub fn doc_text(&self, doc_id: &str) -> Option<&str> {
        self.corpus.get(doc_id).map(|d| d.text.as_str())
    }
}
