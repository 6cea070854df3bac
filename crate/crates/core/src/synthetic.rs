//! Rule-based synthetic benchmark.
//!
//! A fixed set of concepts each has several pseudo-word surface forms.
//! Documents are bags of concepts drawn with a Zipf-like popularity skew.
//! Each concept is written with a main form (form 0 most of the time) and
//! sometimes a second, synonymous form. A cluster's canonical query names a
//! few of its target document's concepts, usually with the document's main
//! forms, wrapped in a style template; every variant expresses the same
//! concepts with other forms, in another order, with another template.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{assemble_clusters, Dataset, Document, Qrels, Query, Split, TrainingExample};
use crate::encoder::tokenize;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("cluster `{cluster_id}`: {message}")]
    Unsatisfiable { cluster_id: String, message: String },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T, E = GenerationError> = std::result::Result<T, E>;

/// Words placed before and after the concept forms of a query. `|` in the
/// compact string form separates prefix and suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
}

impl StyleTemplate {
    pub fn parse(pattern: &str) -> Self {
        let (prefix, suffix) = pattern.split_once('|').unwrap_or((pattern, ""));
        Self {
            prefix: prefix.trim().to_string(),
            suffix: suffix.trim().to_string(),
        }
    }

    fn apply(&self, body: &str) -> String {
        [self.prefix.as_str(), body, self.suffix.as_str()]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const SUBSET_TRIES: usize = 2;
/// A canonical query subset is accepted once fewer than this many other
/// documents contain all of its concepts.
const MAX_RIVALS: usize = 5;

pub fn default_templates() -> Vec<StyleTemplate> {
    [
        "what is",
        "tell me about",
        "explain|please",
        "describe|briefly",
        "info on",
        "looking for|facts",
        "how does|work",
        "give details regarding",
    ]
    .iter()
    .map(|s| StyleTemplate::parse(s))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub concepts: usize,
    pub surface_forms_per_concept: usize,
    pub docs: usize,
    pub concepts_per_doc: usize,
    pub concepts_per_query: usize,
    /// Each cluster draws its query length uniformly from
    /// `min_concepts_per_query..=concepts_per_query`; a minimum above the
    /// maximum is clamped to it.
    pub min_concepts_per_query: usize,
    pub train_clusters: usize,
    pub dev_clusters: usize,
    pub test_clusters: usize,
    pub variants_per_query: usize,
    pub hard_negatives: usize,
    /// Documents sharing at least this fraction of the target's concepts are
    /// judged relevant too.
    pub near_duplicate_overlap: f64,
    /// Variants never reuse the canonical query's form of a concept.
    pub disjoint_forms: bool,
    /// Probability that a document writes a concept with its first form; the
    /// remaining mass is spread evenly over the other forms.
    pub primary_form_share: f64,
    /// Probability that the canonical query writes a concept the way its
    /// target document does; otherwise the form is drawn uniformly.
    pub canonical_copy_share: f64,
    /// Probability that a document also mentions a concept with a second,
    /// different form.
    pub synonym_share: f64,
    /// Zipf exponent of concept popularity in documents (0 = uniform).
    pub concept_skew: f64,
    pub style_templates: Vec<StyleTemplate>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            concepts: 300,
            surface_forms_per_concept: 3,
            docs: 1000,
            concepts_per_doc: 8,
            concepts_per_query: 4,
            min_concepts_per_query: 4,
            train_clusters: 300,
            dev_clusters: 100,
            test_clusters: 100,
            variants_per_query: 4,
            hard_negatives: 5,
            near_duplicate_overlap: 0.75,
            disjoint_forms: true,
            primary_form_share: 0.86,
            concept_skew: 1.28,
            canonical_copy_share: 0.62,
            synonym_share: 0.89,
            style_templates: default_templates(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(GenerationError::Config(m));
        if self.surface_forms_per_concept < 2 {
            return fail("surface_forms_per_concept must be >= 2".into());
        }
        if self.concepts == 0 || self.docs == 0 {
            return fail("concepts and docs must be >= 1".into());
        }
        if self.concepts_per_doc == 0 || self.concepts_per_doc > self.concepts {
            return fail(format!("concepts_per_doc must be in 1..={}", self.concepts));
        }
        if self.concepts_per_query == 0 || self.concepts_per_query > self.concepts_per_doc {
            return fail(format!("concepts_per_query must be in 1..={}", self.concepts_per_doc));
        }
        if self.min_concepts_per_query == 0 {
            return fail("min_concepts_per_query must be >= 1".into());
        }
        let clusters = self.train_clusters + self.dev_clusters + self.test_clusters;
        if clusters > self.docs {
            return fail(format!("{clusters} clusters need as many distinct target documents, have {}", self.docs));
        }
        if self.concepts.saturating_mul(self.surface_forms_per_concept) > 100_000 {
            return fail("at most 100000 surface forms supported".into());
        }
        if self.style_templates.len() < 2 {
            return fail("at least 2 style templates required".into());
        }
        if !(0.0..=1.0).contains(&self.primary_form_share) {
            return fail("primary_form_share must be in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.synonym_share) {
            return fail("synonym_share must be in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.canonical_copy_share) {
            return fail("canonical_copy_share must be in [0,1]".into());
        }
        if !(self.concept_skew.is_finite() && self.concept_skew >= 0.0) {
            return fail("concept_skew must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.near_duplicate_overlap) {
            return fail("near_duplicate_overlap must be in [0,1]".into());
        }
        Ok(())
    }

    pub fn total_clusters(&self) -> usize {
        self.train_clusters + self.dev_clusters + self.test_clusters
    }
}

/// Generator output: the dataset plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Surface forms of each concept.
    pub lexicon: Vec<Vec<String>>,
    /// Concepts of each document, by doc id.
    pub doc_concepts: BTreeMap<String, Vec<usize>>,
    /// Concepts expressed by each query, by query id.
    pub query_concepts: BTreeMap<String, Vec<usize>>,
    /// Document each cluster's queries were written from, by cluster id.
    pub targets: BTreeMap<String, String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

fn build_lexicon(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut used: BTreeSet<String> = config
        .style_templates
        .iter()
        .flat_map(|t| tokenize(&t.prefix).into_iter().chain(tokenize(&t.suffix)))
        .collect();
    (0..config.concepts)
        .map(|_| {
            (0..config.surface_forms_per_concept)
                .map(|_| loop {
                    let w = pseudo_word(rng);
                    if used.insert(w.clone()) {
                        break w;
                    }
                })
                .collect()
        })
        .collect()
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|c| b.contains(c)).count()
}

pub fn generate(config: &GeneratorConfig) -> Result<Synthetic> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lexicon = build_lexicon(config, &mut rng);
    let forms = config.surface_forms_per_concept;
    let width = config.docs.to_string().len().max(4);

    // documents: concept list and the form used for each concept
    let all_concepts: Vec<usize> = (0..config.concepts).collect();
    let popularity = |c: &usize| (*c as f64 + 1.0).powf(-config.concept_skew);
    let draw_form = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(config.primary_form_share) {
            0
        } else {
            rng.gen_range(1..forms)
        }
    };
    // each concept's forms in a document, main form first
    let mut docs: Vec<(String, Vec<usize>, Vec<Vec<usize>>)> = Vec::with_capacity(config.docs);
    for i in 0..config.docs {
        let concepts: Vec<usize> = all_concepts
            .choose_multiple_weighted(&mut rng, config.concepts_per_doc, popularity)
            .expect("positive weights")
            .copied()
            .collect();
        let chosen: Vec<Vec<usize>> = concepts
            .iter()
            .map(|_| {
                let main = draw_form(&mut rng);
                if rng.gen_bool(config.synonym_share) {
                    vec![main, (main + rng.gen_range(1..forms)) % forms]
                } else {
                    vec![main]
                }
            })
            .collect();
        docs.push((format!("d{i:0width$}"), concepts, chosen));
    }
    let corpus: BTreeMap<String, Document> = docs
        .iter()
        .map(|(id, concepts, chosen)| {
            let text = concepts
                .iter()
                .zip(chosen)
                .flat_map(|(&c, fs)| fs.iter().map(|&f| lexicon[c][f].as_str()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .join(" ");
            (id.clone(), Document { doc_id: id.clone(), text })
        })
        .collect();

    let mut targets: Vec<usize> = (0..config.docs).collect();
    targets.shuffle(&mut rng);
    targets.truncate(config.total_clusters());

    let cwidth = config.total_clusters().to_string().len().max(4);
    let min_shared = (config.near_duplicate_overlap * config.concepts_per_doc as f64).ceil() as usize;
    let mut queries = Vec::new();
    let mut qrels = Qrels::new();
    let mut triplets = Vec::new();
    let mut query_concepts = BTreeMap::new();
    let mut target_ids = BTreeMap::new();

    for (ci, &target) in targets.iter().enumerate() {
        let cluster_id = format!("c{ci:0cwidth$}");
        let split = if ci < config.train_clusters {
            Split::Train
        } else if ci < config.train_clusters + config.dev_clusters {
            Split::Dev
        } else {
            Split::Test
        };
        let unsat = |message: String| GenerationError::Unsatisfiable {
            cluster_id: cluster_id.clone(),
            message,
        };
        let (target_id, target_concepts, target_forms) = &docs[target];
        target_ids.insert(cluster_id.clone(), target_id.clone());
        let length = if config.min_concepts_per_query < config.concepts_per_query {
            rng.gen_range(config.min_concepts_per_query..=config.concepts_per_query)
        } else {
            config.concepts_per_query
        };
        // prefer a subset few other documents contain in full, so the target
        // stays findable when popular concepts dominate
        let slots: Vec<usize> = (0..config.concepts_per_doc).collect();
        let mut picks: Vec<usize> = Vec::new();
        let mut fewest = usize::MAX;
        for _ in 0..SUBSET_TRIES {
            let candidate: Vec<usize> = slots.choose_multiple(&mut rng, length).copied().collect();
            let rivals = docs
                .iter()
                .enumerate()
                .filter(|(di, (_, dc, _))| *di != target && candidate.iter().all(|&p| dc.contains(&target_concepts[p])))
                .count();
            if rivals < fewest {
                fewest = rivals;
                picks = candidate;
            }
            if fewest < MAX_RIVALS {
                break;
            }
        }
        let concepts: Vec<usize> = picks.iter().map(|&p| target_concepts[p]).collect();
        let canon_forms: Vec<usize> = picks
            .iter()
            .map(|&p| {
                if rng.gen_bool(config.canonical_copy_share) {
                    target_forms[p][0]
                } else {
                    rng.gen_range(0..forms)
                }
            })
            .collect();

        let mut templates: Vec<usize> = (0..config.style_templates.len()).collect();
        templates.shuffle(&mut rng);
        let render = |order: &[usize], form_of: &dyn Fn(usize) -> usize, template: usize| {
            let body = order
                .iter()
                .map(|&slot| lexicon[concepts[slot]][form_of(slot)].as_str())
                .collect::<Vec<_>>()
                .join(" ");
            config.style_templates[template].apply(&body)
        };

        let canonical_id = format!("q{ci:0cwidth$}");
        let identity: Vec<usize> = (0..concepts.len()).collect();
        let mut members = vec![Query {
            query_id: canonical_id.clone(),
            text: render(&identity, &|slot| canon_forms[slot], templates[0]),
            cluster_id: cluster_id.clone(),
            is_canonical: true,
            split: Some(split),
        }];
        for v in 0..config.variants_per_query {
            // rotate through the alternatives to the canonical form
            let offset: Vec<usize> = (0..concepts.len())
                .map(|_| if config.disjoint_forms { rng.gen_range(1..forms) } else { rng.gen_range(0..forms) })
                .collect();
            let mut order = identity.clone();
            order.shuffle(&mut rng);
            let template = templates[1 + v % (templates.len() - 1)];
            let form_of = |slot: usize| {
                if config.disjoint_forms {
                    let step = (offset[slot] - 1 + v) % (forms - 1) + 1;
                    (canon_forms[slot] + step) % forms
                } else {
                    offset[slot]
                }
            };
            members.push(Query {
                query_id: format!("{canonical_id}v{}", v + 1),
                text: render(&order, &form_of, template),
                cluster_id: cluster_id.clone(),
                is_canonical: false,
                split: Some(split),
            });
        }

        let relevant: Vec<usize> = docs
            .iter()
            .enumerate()
            .filter(|(di, (_, dc, _))| *di == target || overlap(target_concepts, dc) >= min_shared)
            .map(|(di, _)| di)
            .collect();
        for q in &members {
            for &di in &relevant {
                qrels.insert(&q.query_id, &docs[di].0, 1);
            }
            query_concepts.insert(q.query_id.clone(), concepts.clone());
        }

        if split == Split::Train {
            let mut pool: Vec<(usize, usize, usize)> = docs
                .iter()
                .enumerate()
                .filter(|(di, _)| !relevant.contains(di))
                .map(|(di, (_, dc, _))| (overlap(&concepts, dc), overlap(target_concepts, dc), di))
                .collect();
            if pool.len() < config.hard_negatives {
                return Err(unsat(format!(
                    "{} non-relevant documents for {} hard negatives",
                    pool.len(),
                    config.hard_negatives
                )));
            }
            pool.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
            triplets.push(TrainingExample {
                query_id: canonical_id.clone(),
                positive_doc_id: target_id.clone(),
                negative_doc_ids: pool[..config.hard_negatives].iter().map(|p| docs[p.2].0.clone()).collect(),
                variant_query_ids: members[1..].iter().map(|q| q.query_id.clone()).collect(),
            });
        }
        queries.extend(members);
    }

    let clusters = assemble_clusters(&queries)?;
    let dataset = Dataset {
        corpus,
        queries: queries.into_iter().map(|q| (q.query_id.clone(), q)).collect(),
        clusters,
        qrels,
        triplets,
    };
    Ok(Synthetic {
        dataset,
        lexicon,
        doc_concepts: docs.into_iter().map(|(id, c, _)| (id, c)).collect(),
        query_concepts,
        targets: target_ids,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub clusters: usize,
    pub queries: usize,
    pub documents: usize,
    pub triplets: usize,
    /// Mean Jaccard overlap of token sets, canonical vs each variant.
    pub mean_token_overlap: f64,
    pub violations: Vec<String>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// Structural checks on a dataset. Problems are collected, not raised.
pub fn verify_dataset(dataset: &Dataset) -> VerifyReport {
    let mut report = VerifyReport {
        clusters: dataset.clusters.len(),
        queries: dataset.queries.len(),
        documents: dataset.corpus.len(),
        triplets: dataset.triplets.len(),
        ..VerifyReport::default()
    };
    let v = &mut report.violations;

    // partition: every query in exactly one cluster, one split per cluster
    let mut owner: HashMap<&str, &str> = HashMap::new();
    let mut split_clusters: BTreeMap<Option<Split>, BTreeSet<&str>> = BTreeMap::new();
    for (cid, cluster) in &dataset.clusters {
        let mut splits = BTreeSet::new();
        for qid in cluster.members() {
            if let Some(prev) = owner.insert(qid, cid) {
                v.push(format!("query `{qid}` in clusters `{prev}` and `{cid}`"));
            }
            match dataset.queries.get(qid) {
                Some(q) => {
                    splits.insert(q.split);
                }
                None => v.push(format!("cluster `{cid}` references unknown query `{qid}`")),
            }
        }
        if splits.len() > 1 {
            v.push(format!("cluster `{cid}` spans several splits"));
        }
        for s in splits {
            split_clusters.entry(s).or_default().insert(cid);
        }
    }
    for qid in dataset.queries.keys() {
        if !owner.contains_key(qid.as_str()) {
            v.push(format!("query `{qid}` belongs to no cluster"));
        }
    }

    // coverage: evaluated queries need a relevant document
    for q in dataset.queries.values() {
        if q.split == Some(Split::Test) && dataset.qrels.relevant(&q.query_id).next().is_none() {
            v.push(format!("test query `{}` has no relevant document", q.query_id));
        }
    }
    for (q, d, _) in dataset.qrels.iter() {
        if !dataset.corpus.contains_key(d) {
            v.push(format!("qrels for `{q}` reference unknown document `{d}`"));
        }
    }

    for ex in &dataset.triplets {
        if let Err(e) = ex.validate() {
            v.push(e.to_string());
        }
        match dataset.queries.get(&ex.query_id) {
            Some(q) if q.split.is_some_and(|s| s != Split::Train) => {
                v.push(format!("triplet query `{}` is not a training query", ex.query_id));
            }
            None => v.push(format!("triplet query `{}` unknown", ex.query_id)),
            _ => {}
        }
        for d in std::iter::once(&ex.positive_doc_id).chain(&ex.negative_doc_ids) {
            if !dataset.corpus.contains_key(d) {
                v.push(format!("triplet for `{}` references unknown document `{d}`", ex.query_id));
            }
        }
        if dataset.qrels.grade(&ex.query_id, &ex.positive_doc_id) == 0 {
            v.push(format!("triplet positive `{}` not judged relevant for `{}`", ex.positive_doc_id, ex.query_id));
        }
        for n in &ex.negative_doc_ids {
            if dataset.qrels.grade(&ex.query_id, n) > 0 {
                v.push(format!("triplet negative `{n}` is relevant for `{}`", ex.query_id));
            }
        }
    }

    let mut overlaps = Vec::new();
    for cluster in dataset.clusters.values() {
        let Some(canon) = dataset.query_text(&cluster.canonical_query_id) else {
            continue;
        };
        let a = token_set(canon);
        for vid in &cluster.variant_query_ids {
            if let Some(text) = dataset.query_text(vid) {
                let b = token_set(text);
                let union = a.union(&b).count();
                overlaps.push(if union == 0 { 1.0 } else { a.intersection(&b).count() as f64 / union as f64 });
            }
        }
    }
    report.mean_token_overlap = if overlaps.is_empty() {
        0.0
    } else {
        overlaps.iter().sum::<f64>() / overlaps.len() as f64
    };
    report
}
