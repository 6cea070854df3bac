//! Training example expansion and deterministic batching.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::Dataset;

/// Training configuration, named after the objective it optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// MNR on the original triplets.
    Ft,
    /// MNR with every variant added as a standalone example.
    Aug,
    /// Alternating MNR and query-query steps.
    Qq,
    /// Coherence ranking loss with both alignment terms.
    Cr,
    /// Augmented examples trained with the coherence ranking loss.
    Full,
    QeaOnly,
    SmcOnly,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Ft,
        Mode::Aug,
        Mode::Qq,
        Mode::Cr,
        Mode::Full,
        Mode::QeaOnly,
        Mode::SmcOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ft => "FT",
            Mode::Aug => "AUG",
            Mode::Qq => "QQ",
            Mode::Cr => "CR",
            Mode::Full => "FULL",
            Mode::QeaOnly => "QEA_ONLY",
            Mode::SmcOnly => "SMC_ONLY",
        }
    }

    /// Whether anchors carry sampled variants into the loss.
    pub fn attaches_variants(self) -> bool {
        matches!(self, Mode::Qq | Mode::Cr | Mode::Full | Mode::QeaOnly | Mode::SmcOnly)
    }

    pub fn expands_examples(self) -> bool {
        matches!(self, Mode::Aug | Mode::Full)
    }

    /// Weights actually used for the alignment terms.
    pub fn effective_lambdas(self, lambda1: f64, lambda2: f64) -> (f64, f64) {
        match self {
            Mode::Ft | Mode::Aug | Mode::Qq => (0.0, 0.0),
            Mode::Cr | Mode::Full => (lambda1, lambda2),
            Mode::QeaOnly => (lambda1, 0.0),
            Mode::SmcOnly => (0.0, lambda2),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == up)
            .ok_or_else(|| TrainError::Config(format!("unknown mode `{s}`")))
    }
}

/// A training example with all texts resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub query_id: String,
    pub query_text: String,
    pub positive_id: String,
    pub positive_text: String,
    pub negative_texts: Vec<String>,
    /// Equivalent queries available for alignment, `(id, text)`.
    pub variant_pool: Vec<(String, String)>,
}

fn lookup<'a>(what: &str, id: &str, text: Option<&'a str>) -> Result<&'a str, TrainError> {
    text.ok_or_else(|| TrainError::Data(format!("{what} `{id}` not found")))
}

/// Resolves the dataset's triplets for `mode`. Expanding modes add one example
/// per variant whose variant pool is the rest of its cluster.
pub fn prepare_examples(dataset: &Dataset, mode: Mode) -> Result<Vec<PreparedExample>, TrainError> {
    let mut out = Vec::new();
    for ex in &dataset.triplets {
        let positive_text = lookup("document", &ex.positive_doc_id, dataset.doc_text(&ex.positive_doc_id))?.to_string();
        let negative_texts = ex
            .negative_doc_ids
            .iter()
            .map(|d| lookup("document", d, dataset.doc_text(d)).map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let mut members = vec![ex.query_id.clone()];
        members.extend(ex.variant_query_ids.iter().cloned());
        let texts = members
            .iter()
            .map(|q| lookup("query", q, dataset.query_text(q)).map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let anchors = if mode.expands_examples() { members.len() } else { 1 };
        for a in 0..anchors {
            let variant_pool = if mode.attaches_variants() {
                (0..members.len())
                    .filter(|&i| i != a)
                    .map(|i| (members[i].clone(), texts[i].clone()))
                    .collect()
            } else {
                Vec::new()
            };
            out.push(PreparedExample {
                query_id: members[a].clone(),
                query_text: texts[a].clone(),
                positive_id: ex.positive_doc_id.clone(),
                positive_text: positive_text.clone(),
                negative_texts: negative_texts.clone(),
                variant_pool,
            });
        }
    }
    Ok(out)
}

/// One optimization step's worth of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<PreparedExample>,
    /// Sampled variant texts, `variants_per_anchor` per example.
    pub variant_texts: Vec<Vec<String>>,
    pub variants_per_anchor: usize,
    pub negatives_per_anchor: usize,
}

/// Stream seed for `(seed, parts...)`, mixed with splitmix64.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Shuffles examples (seeded by `seed` and `epoch`) into batches whose query
/// ids are distinct, then samples variants per batch without replacement.
/// Every batch uses the same variant count for all its anchors: the smaller of
/// `variants` and the scarcest anchor's pool.
pub fn build_batches(
    examples: &[PreparedExample],
    mode: Mode,
    batch_size: usize,
    variants: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));

    let mut groups: Vec<(Vec<usize>, BTreeSet<&str>)> = Vec::new();
    let mut open = 0;
    for i in order {
        let qid = examples[i].query_id.as_str();
        let mut slot = open;
        while slot < groups.len() && (groups[slot].0.len() >= batch_size || groups[slot].1.contains(qid)) {
            slot += 1;
        }
        if slot == groups.len() {
            groups.push((Vec::new(), BTreeSet::new()));
        }
        groups[slot].0.push(i);
        groups[slot].1.insert(qid);
        while open < groups.len() && groups[open].0.len() >= batch_size {
            open += 1;
        }
    }

    let want_variants = mode.attaches_variants();
    groups
        .into_iter()
        .enumerate()
        .map(|(bi, (idx, _))| {
            let batch_examples: Vec<PreparedExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let negatives_per_anchor = batch_examples.iter().map(|e| e.negative_texts.len()).min().unwrap_or(0);
            if negatives_per_anchor == 0 {
                return Err(TrainError::Data("every training example needs at least one negative".into()));
            }
            let (variants_per_anchor, variant_texts) = if want_variants {
                if let Some(e) = batch_examples.iter().find(|e| e.variant_pool.is_empty()) {
                    return Err(TrainError::MissingVariants(e.query_id.clone()));
                }
                let pool_min = batch_examples.iter().map(|e| e.variant_pool.len()).min().unwrap_or(0);
                let v = variants.min(pool_min).max(usize::from(mode == Mode::Qq));
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, bi as u64, 1]));
                let texts = batch_examples
                    .iter()
                    .map(|e| e.variant_pool.choose_multiple(&mut rng, v).map(|(_, t)| t.clone()).collect())
                    .collect();
                (v, texts)
            } else {
                (0, vec![Vec::new(); batch_examples.len()])
            };
            Ok(Batch {
                examples: batch_examples
                    .into_iter()
                    .map(|mut e| {
                        e.negative_texts.truncate(negatives_per_anchor);
                        e
                    })
                    .collect(),
                variant_texts,
                variants_per_anchor,
                negatives_per_anchor,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, GeneratorConfig};

    fn data() -> Dataset {
        generate(&GeneratorConfig {
            concepts: 60,
            docs: 150,
            train_clusters: 40,
            dev_clusters: 5,
            test_clusters: 5,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn expansion_counts() {
        let d = data();
        assert_eq!(prepare_examples(&d, Mode::Ft).unwrap().len(), 40);
        assert_eq!(prepare_examples(&d, Mode::Aug).unwrap().len(), 40 * 5);
        let full = prepare_examples(&d, Mode::Full).unwrap();
        assert_eq!(full.len(), 200);
        assert!(full.iter().all(|e| e.variant_pool.len() == 4 && !e.variant_pool.iter().any(|(id, _)| *id == e.query_id)));

        // ten variants -> eleven examples per triplet
        let mut d10 = d.clone();
        let ex = d10.triplets[0].clone();
        for i in 0..10 {
            let id = format!("{}x{i}", ex.query_id);
            let mut q = d10.queries[&ex.query_id].clone();
            q.query_id = id.clone();
            q.is_canonical = false;
            d10.queries.insert(id.clone(), q);
            if i >= 4 {
                d10.triplets[0].variant_query_ids.push(id);
            }
        }
        d10.triplets.truncate(1);
        d10.triplets[0].variant_query_ids.truncate(10);
        assert_eq!(d10.triplets[0].variant_query_ids.len(), 10);
        assert_eq!(prepare_examples(&d10, Mode::Aug).unwrap().len(), 11);
    }

    #[test]
    fn ft_carries_no_variants() {
        let d = data();
        let ex = prepare_examples(&d, Mode::Ft).unwrap();
        let batches = build_batches(&ex, Mode::Ft, 16, 2, 1, 0).unwrap();
        assert!(batches.iter().all(|b| b.variants_per_anchor == 0));
        assert_eq!(batches.iter().map(|b| b.examples.len()).sum::<usize>(), 40);
    }

    #[test]
    fn deterministic_per_seed_and_epoch() {
        let d = data();
        let ex = prepare_examples(&d, Mode::Cr).unwrap();
        let a = build_batches(&ex, Mode::Cr, 16, 2, 7, 3).unwrap();
        assert_eq!(a, build_batches(&ex, Mode::Cr, 16, 2, 7, 3).unwrap());
        assert_ne!(a, build_batches(&ex, Mode::Cr, 16, 2, 7, 4).unwrap());
        for b in &a {
            assert_eq!(b.variants_per_anchor, 2);
            for (e, vs) in b.examples.iter().zip(&b.variant_texts) {
                let distinct: BTreeSet<&String> = vs.iter().collect();
                assert_eq!(distinct.len(), 2);
                assert!(vs.iter().all(|v| e.variant_pool.iter().any(|(_, t)| t == v)));
            }
        }
    }

    #[test]
    fn distinct_query_ids_per_batch() {
        let d = data();
        let mut ex = prepare_examples(&d, Mode::Ft).unwrap();
        let dup = ex[0].clone();
        ex.extend([dup.clone(), dup]);
        for b in build_batches(&ex, Mode::Ft, 8, 0, 3, 0).unwrap() {
            let ids: BTreeSet<&str> = b.examples.iter().map(|e| e.query_id.as_str()).collect();
            assert_eq!(ids.len(), b.examples.len());
            assert!(b.examples.len() <= 8);
        }
    }

    #[test]
    fn missing_variants_error() {
        let mut d = data();
        d.triplets[3].variant_query_ids.clear();
        let ex = prepare_examples(&d, Mode::Cr).unwrap();
        assert!(matches!(build_batches(&ex, Mode::Cr, 64, 2, 1, 0), Err(TrainError::MissingVariants(_))));
        let ex = prepare_examples(&d, Mode::Ft).unwrap();
        assert!(build_batches(&ex, Mode::Ft, 64, 2, 1, 0).is_ok());
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!("qea-only".parse::<Mode>().unwrap(), Mode::QeaOnly);
        assert!("nope".parse::<Mode>().is_err());
    }
}
