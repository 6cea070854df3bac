//! Training objectives.
//!
//! * `mnr_loss`: scaled-cosine softmax cross-entropy with the positive document
//!   as target, over the anchor's hard negatives and optionally the other
//!   anchors' positives.
//! * `qea_term`: mean squared L2 distance between an anchor query embedding
//!   and the embeddings of its equivalent variants.
//! * `smc_term`: squared differences between the anchor's similarity margins
//!   `cos(q, d+) - cos(q, d)` and each variant's margins, summed over
//!   variants and negatives.
//! * `cr_loss`: `lambda1 * qea + lambda2 * smc + mnr`.
//! * `qq_pair_loss`: MNR over equivalent query pairs (query-query task).
//!
//! Batched operands are flattened to 2-D: variant `v` of anchor `i` is row
//! `i * V + v`, negative `j` of anchor `i` is row `i * N + j`. Per-anchor terms
//! are averaged over anchors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{dot, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Multiplier applied to cosine similarities inside the MNR softmax.
    pub scale: f64,
    pub include_in_batch_negatives: bool,
    /// Divide the SMC double sum by `V * N`.
    pub normalize_smc: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            scale: 20.0,
            include_in_batch_negatives: true,
            normalize_smc: false,
        }
    }
}

/// Values explored for `lambda1` and `lambda2` in sweeps.
pub const LAMBDA_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

impl LossConfig {
    pub fn with_lambdas(self, lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(LossError::Config(format!(
                "lambdas must be finite and >= 0 (got {}, {})",
                self.lambda1, self.lambda2
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(LossError::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Embeddings for one optimization step. All rows are expected unit-norm.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub queries: Var,
    /// `b*V x D`, absent when no variants are attached.
    pub variants: Option<Var>,
    pub positives: Var,
    /// `b*N x D`.
    pub negatives: Var,
    anchors: usize,
    variants_per_anchor: usize,
    negatives_per_anchor: usize,
    /// Identity of each anchor's positive; anchors sharing a positive are not
    /// used as each other's in-batch negatives.
    positive_keys: Option<Vec<String>>,
}

impl LossBatch {
    pub fn new(tape: &Tape, queries: Var, variants: Option<Var>, positives: Var, negatives: Var) -> Result<Self> {
        let (b, dim) = tape.shape(queries);
        if b == 0 {
            return Err(LossError::InvalidBatch("no anchors".into()));
        }
        if tape.shape(positives) != (b, dim) {
            return Err(LossError::InvalidBatch(format!(
                "positives are {:?}, expected ({b}, {dim})",
                tape.shape(positives)
            )));
        }
        let per_anchor = |var: Var, what: &str| -> Result<usize> {
            let (rows, cols) = tape.shape(var);
            if cols != dim || rows % b != 0 {
                return Err(LossError::InvalidBatch(format!(
                    "{what} are {rows}x{cols}, not a multiple of {b} anchors x {dim}"
                )));
            }
            Ok(rows / b)
        };
        let negatives_per_anchor = per_anchor(negatives, "negatives")?;
        if negatives_per_anchor == 0 {
            return Err(LossError::InvalidBatch("at least one negative per anchor required".into()));
        }
        let variants_per_anchor = match variants {
            Some(v) => per_anchor(v, "variants")?,
            None => 0,
        };
        Ok(Self {
            queries,
            variants: variants.filter(|_| variants_per_anchor > 0),
            positives,
            negatives,
            anchors: b,
            variants_per_anchor,
            negatives_per_anchor,
            positive_keys: None,
        })
    }

    pub fn with_positive_keys(mut self, keys: Vec<String>) -> Result<Self> {
        if keys.len() != self.anchors {
            return Err(LossError::InvalidBatch(format!("{} positive keys for {} anchors", keys.len(), self.anchors)));
        }
        self.positive_keys = Some(keys);
        Ok(self)
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn variants_per_anchor(&self) -> usize {
        self.variants_per_anchor
    }

    pub fn negatives_per_anchor(&self) -> usize {
        self.negatives_per_anchor
    }

    /// Candidate columns for each anchor in the `[positives; negatives]`
    /// similarity matrix. The anchor's own positive is column `i`.
    pub fn mnr_candidates(&self, include_in_batch: bool) -> Vec<Vec<usize>> {
        let (b, n) = (self.anchors, self.negatives_per_anchor);
        (0..b)
            .map(|i| {
                let mut cands = vec![i];
                cands.extend((0..n).map(|j| b + i * n + j));
                if include_in_batch {
                    cands.extend((0..b).filter(|&k| {
                        k != i
                            && self
                                .positive_keys
                                .as_ref()
                                .is_none_or(|keys| keys[k] != keys[i])
                    }));
                }
                cands
            })
            .collect()
    }
}

/// A loss component that may be skipped when its operands are absent.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    pub value: Var,
    pub skipped: bool,
}

/// `cos(q, d+) - cos(q, d)` for unit vectors.
pub fn margin(query: &[f64], positive: &[f64], negative: &[f64]) -> f64 {
    dot(query, positive) - dot(query, negative)
}

pub fn mnr_loss(tape: &mut Tape, batch: &LossBatch, config: &LossConfig) -> Result<Var> {
    let docs = tape.concat_rows(&[batch.positives, batch.negatives])?;
    let sims = tape.cosine_similarity_matrix(batch.queries, docs)?;
    let candidates = batch.mnr_candidates(config.include_in_batch_negatives);
    let targets: Vec<usize> = (0..batch.anchors).collect();
    Ok(tape.softmax_cross_entropy_masked(sims, candidates, &targets, config.scale)?)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn repeat_each(count: usize, times: usize) -> Vec<usize> {
    (0..count).flat_map(|i| std::iter::repeat_n(i, times)).collect()
}

/// `(1/V) sum_v |q - q_v|^2` per anchor, averaged over anchors.
pub fn qea_term(tape: &mut Tape, batch: &LossBatch) -> Result<Term> {
    let v = batch.variants_per_anchor;
    let Some(variants) = batch.variants else {
        return Ok(Term {
            value: zero(tape),
            skipped: true,
        });
    };
    let anchors = tape.gather_rows(batch.queries, &repeat_each(batch.anchors, v))?;
    let diff = tape.sub(anchors, variants)?;
    let total = tape.sum_squares(diff);
    Ok(Term {
        value: tape.scale(total, 1.0 / (batch.anchors * v) as f64),
        skipped: false,
    })
}

/// `sum_v sum_d (m(q, d+, d) - m(q_v, d+, d))^2` per anchor, averaged over
/// anchors. With `normalize` the double sum is divided by `V * N`.
pub fn smc_term(tape: &mut Tape, batch: &LossBatch, normalize: bool) -> Result<Term> {
    let (b, v, n) = (batch.anchors, batch.variants_per_anchor, batch.negatives_per_anchor);
    let Some(variants) = batch.variants else {
        return Ok(Term {
            value: zero(tape),
            skipped: true,
        });
    };

    // anchor margins, one per (i, j)
    let anchor_pos = tape.rowwise_dot(batch.queries, batch.positives)?;
    let q_per_neg = tape.gather_rows(batch.queries, &repeat_each(b, n))?;
    let anchor_neg = tape.rowwise_dot(q_per_neg, batch.negatives)?;
    let anchor_pos_per_neg = tape.gather_rows(anchor_pos, &repeat_each(b, n))?;
    let anchor_margin = tape.sub(anchor_pos_per_neg, anchor_neg)?;

    // variant margins, one per (i, v, j)
    let pos_per_variant = tape.gather_rows(batch.positives, &repeat_each(b, v))?;
    let variant_pos = tape.rowwise_dot(variants, pos_per_variant)?;
    let mut variant_idx = Vec::with_capacity(b * v * n);
    let mut negative_idx = Vec::with_capacity(b * v * n);
    let mut anchor_margin_idx = Vec::with_capacity(b * v * n);
    for i in 0..b {
        for vi in 0..v {
            for j in 0..n {
                variant_idx.push(i * v + vi);
                negative_idx.push(i * n + j);
                anchor_margin_idx.push(i * n + j);
            }
        }
    }
    let variant_rows = tape.gather_rows(variants, &variant_idx)?;
    let negative_rows = tape.gather_rows(batch.negatives, &negative_idx)?;
    let variant_neg = tape.rowwise_dot(variant_rows, negative_rows)?;
    let variant_pos_rep = tape.gather_rows(variant_pos, &variant_idx)?;
    let variant_margin = tape.sub(variant_pos_rep, variant_neg)?;

    let anchor_margin_rep = tape.gather_rows(anchor_margin, &anchor_margin_idx)?;
    let diff = tape.sub(anchor_margin_rep, variant_margin)?;
    let total = tape.sum_squares(diff);
    let denom = if normalize { (b * v * n) as f64 } else { b as f64 };
    Ok(Term {
        value: tape.scale(total, 1.0 / denom),
        skipped: false,
    })
}

/// Per-component values of one loss evaluation, as written to training logs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub qea: f64,
    pub smc: f64,
    pub mnr: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CrOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `lambda1 * qea + lambda2 * smc + mnr`. Components with a zero weight are not
/// evaluated and report 0 in the breakdown.
pub fn cr_loss(tape: &mut Tape, batch: &LossBatch, config: &LossConfig) -> Result<CrOutput> {
    config.validate()?;
    let mnr = mnr_loss(tape, batch, config)?;
    let mut breakdown = LossBreakdown {
        mnr: tape.value(mnr).item(),
        ..LossBreakdown::default()
    };
    let mut total = mnr;
    if config.lambda1 > 0.0 {
        let qea = qea_term(tape, batch)?;
        if !qea.skipped {
            breakdown.qea = tape.value(qea.value).item();
            let weighted = tape.scale(qea.value, config.lambda1);
            total = tape.add(total, weighted)?;
        }
    }
    if config.lambda2 > 0.0 {
        let smc = smc_term(tape, batch, config.normalize_smc)?;
        if !smc.skipped {
            breakdown.smc = tape.value(smc.value).item();
            let weighted = tape.scale(smc.value, config.lambda2);
            total = tape.add(total, weighted)?;
        }
    }
    breakdown.total = tape.value(total).item();
    Ok(CrOutput { total, breakdown })
}

/// MNR over query pairs: `b_i` is the positive for `a_i`, every other `b_j` in
/// the batch a negative.
pub fn qq_pair_loss(tape: &mut Tape, queries_a: Var, queries_b: Var, scale: f64) -> Result<Var> {
    let (rows, _) = tape.shape(queries_a);
    if rows < 2 {
        return Err(LossError::InvalidBatch("query-query loss needs at least 2 pairs".into()));
    }
    if tape.shape(queries_a) != tape.shape(queries_b) {
        return Err(LossError::InvalidBatch(format!(
            "pair sides differ: {:?} vs {:?}",
            tape.shape(queries_a),
            tape.shape(queries_b)
        )));
    }
    let sims = tape.cosine_similarity_matrix(queries_a, queries_b)?;
    let targets: Vec<usize> = (0..rows).collect();
    Ok(tape.softmax_cross_entropy_rows(sims, &targets, scale)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, l2_normalize_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor {
        let data = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        l2_normalize_rows(&Tensor::new(rows, dim, data).unwrap()).unwrap().0
    }

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    struct Raw {
        q: Tensor,
        v: Option<Tensor>,
        p: Tensor,
        n: Tensor,
    }

    fn seeded(seed: u64, b: usize, v: usize, n: usize, d: usize) -> Raw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raw {
            q: unit_rows(&mut rng, b, d),
            v: (v > 0).then(|| unit_rows(&mut rng, b * v, d)),
            p: unit_rows(&mut rng, b, d),
            n: unit_rows(&mut rng, b * n, d),
        }
    }

    fn load(tape: &mut Tape, raw: &Raw) -> LossBatch {
        let q = tape.constant(raw.q.clone());
        let v = raw.v.clone().map(|v| tape.constant(v));
        let p = tape.constant(raw.p.clone());
        let n = tape.constant(raw.n.clone());
        LossBatch::new(tape, q, v, p, n).unwrap()
    }

    fn eval(raw: &Raw, f: impl FnOnce(&mut Tape, &LossBatch) -> Var) -> f64 {
        let mut tape = Tape::new();
        let batch = load(&mut tape, raw);
        let out = f(&mut tape, &batch);
        tape.value(out).item()
    }

    #[test]
    fn margin_examples() {
        let q = [1.0, 0.0];
        assert_eq!(margin(&q, &[0.6, 0.8], &[0.6, 0.8]), 0.0);
        assert_eq!(margin(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), 0.0);
        // cos(q, d+) = 0.9, cos(q, d) = 0.4
        let pos = [0.9, (1.0f64 - 0.81).sqrt()];
        let neg = [0.4, (1.0f64 - 0.16).sqrt()];
        assert!((margin(&q, &pos, &neg) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mnr_uniform_is_ln_candidates() {
        // q orthogonal to every document: all similarities 0; 1 + 3 candidates
        let raw = Raw {
            q: t(1, 3, &[1.0, 0.0, 0.0]),
            v: None,
            p: t(1, 3, &[0.0, 1.0, 0.0]),
            n: t(3, 3, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0]),
        };
        for scale in [1.0, 20.0, 55.0] {
            let cfg = LossConfig { scale, ..LossConfig::default() };
            let l = eval(&raw, |tape, b| mnr_loss(tape, b, &cfg).unwrap());
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mnr_saturates() {
        let raw = Raw {
            q: t(1, 2, &[1.0, 0.0]),
            v: None,
            p: t(1, 2, &[1.0, 0.0]),
            n: t(2, 2, &[-1.0, 0.0, -1.0, 0.0]),
        };
        let l = eval(&raw, |tape, b| mnr_loss(tape, b, &LossConfig::default()).unwrap());
        assert!(l < 1e-8);
    }

    #[test]
    fn in_batch_candidate_count() {
        let raw = seeded(1, 2, 0, 3, 4);
        let mut tape = Tape::new();
        let batch = load(&mut tape, &raw);
        for c in batch.mnr_candidates(true) {
            assert_eq!(c.len(), 1 + 3 + 1);
        }
        for c in batch.mnr_candidates(false) {
            assert_eq!(c.len(), 1 + 3);
        }
        let batch = batch.with_positive_keys(vec!["d".into(), "d".into()]).unwrap();
        for c in batch.mnr_candidates(true) {
            assert_eq!(c.len(), 1 + 3);
        }
    }

    #[test]
    fn empty_negatives_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(t(1, 2, &[1.0, 0.0]));
        let p = tape.constant(t(1, 2, &[1.0, 0.0]));
        let n = tape.constant(Tensor::zeros(0, 2));
        assert!(matches!(LossBatch::new(&tape, q, None, p, n), Err(LossError::InvalidBatch(_))));
    }

    #[test]
    fn qea_examples() {
        let mut raw = seeded(2, 1, 0, 1, 2);
        raw.q = t(1, 2, &[1.0, 0.0]);
        raw.v = Some(t(1, 2, &[0.0, 1.0]));
        assert!((eval(&raw, |tape, b| qea_term(tape, b).unwrap().value) - 2.0).abs() < 1e-15);

        raw.v = Some(t(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        assert_eq!(eval(&raw, |tape, b| qea_term(tape, b).unwrap().value), 0.0);

        // duplicating every variant leaves the mean unchanged
        let raw = seeded(3, 2, 2, 1, 5);
        let once = eval(&raw, |tape, b| qea_term(tape, b).unwrap().value);
        let v = raw.v.as_ref().unwrap();
        let dup: Vec<f64> = (0..2)
            .flat_map(|i| {
                let a = v.row(i * 2).to_vec();
                let c = v.row(i * 2 + 1).to_vec();
                [a.clone(), c.clone(), a, c].concat()
            })
            .collect();
        let raw2 = Raw { v: Some(t(8, 5, &dup)), ..raw };
        let twice = eval(&raw2, |tape, b| qea_term(tape, b).unwrap().value);
        assert!((once - twice).abs() < 1e-14);
    }

    #[test]
    fn qea_and_smc_skip_without_variants() {
        let raw = seeded(4, 2, 0, 2, 3);
        let mut tape = Tape::new();
        let batch = load(&mut tape, &raw);
        let q = qea_term(&mut tape, &batch).unwrap();
        let s = smc_term(&mut tape, &batch, false).unwrap();
        assert!(q.skipped && s.skipped);
        assert_eq!(tape.value(q.value).item(), 0.0);
        assert_eq!(tape.value(s.value).item(), 0.0);
    }

    #[test]
    fn smc_examples() {
        // variant equal to anchor -> 0
        let mut raw = seeded(5, 2, 1, 3, 4);
        raw.v = Some(raw.q.clone());
        assert_eq!(eval(&raw, |tape, b| smc_term(tape, b, false).unwrap().value), 0.0);

        // anchor margin 0.5, variant margin 0.3 -> 0.04
        let raw = Raw {
            q: t(1, 2, &[1.0, 0.0]),
            v: Some(t(1, 2, &[0.0, 1.0])),
            p: t(1, 2, &[0.5, 0.3]),
            n: t(1, 2, &[0.0, 0.0]),
        };
        let got = eval(&raw, |tape, b| smc_term(tape, b, false).unwrap().value);
        assert!((got - 0.04).abs() < 1e-15);
    }

    #[test]
    fn smc_symmetric_in_identical_negatives() {
        let mut raw = seeded(6, 1, 2, 2, 4);
        let row = raw.n.row(0).to_vec();
        raw.n = t(2, 4, &[row.clone(), row].concat());
        let a = eval(&raw, |tape, b| smc_term(tape, b, false).unwrap().value);
        let mut raw2 = raw;
        let data = raw2.n.clone().into_data();
        raw2.n = t(2, 4, &[&data[4..], &data[..4]].concat());
        let b = eval(&raw2, |tape, b| smc_term(tape, b, false).unwrap().value);
        assert_eq!(a, b);
    }

    #[test]
    fn smc_normalization_flag() {
        let raw = seeded(7, 3, 2, 4, 6);
        let plain = eval(&raw, |tape, b| smc_term(tape, b, false).unwrap().value);
        let norm = eval(&raw, |tape, b| smc_term(tape, b, true).unwrap().value);
        assert!((plain / 8.0 - norm).abs() < 1e-15);
    }

    #[test]
    fn cr_recomposes_components() {
        let raw = seeded(8, 4, 2, 3, 8);
        let cfg = LossConfig::default().with_lambdas(0.5, 0.5);
        let (total, bd) = {
            let mut tape = Tape::new();
            let b = load(&mut tape, &raw);
            let out = cr_loss(&mut tape, &b, &cfg).unwrap();
            (tape.value(out.total).item(), out.breakdown)
        };
        let mnr = eval(&raw, |tape, b| mnr_loss(tape, b, &cfg).unwrap());
        let qea = eval(&raw, |tape, b| qea_term(tape, b).unwrap().value);
        let smc = eval(&raw, |tape, b| smc_term(tape, b, false).unwrap().value);
        assert!((total - (0.5 * qea + 0.5 * smc + mnr)).abs() < 1e-12);
        assert_eq!(bd.total, total);
        assert_eq!((bd.mnr, bd.qea, bd.smc), (mnr, qea, smc));
    }

    #[test]
    fn cr_degenerate_weights_equal_mnr_bitwise() {
        let raw = seeded(9, 4, 2, 3, 8);
        let cfg = LossConfig::default().with_lambdas(0.0, 0.0);
        let cr = eval(&raw, |tape, b| cr_loss(tape, b, &cfg).unwrap().total);
        let mnr = eval(&raw, |tape, b| mnr_loss(tape, b, &cfg).unwrap());
        assert_eq!(cr.to_bits(), mnr.to_bits());

        let qea_only = LossConfig::default().with_lambdas(1.0, 0.0);
        let mut tape = Tape::new();
        let b = load(&mut tape, &raw);
        assert_eq!(cr_loss(&mut tape, &b, &qea_only).unwrap().breakdown.smc, 0.0);
    }

    #[test]
    fn qq_examples() {
        let s = 20.0;
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let l = qq_pair_loss(&mut tape, a, a, s).unwrap();
        let expect = -(s.exp() / (s.exp() + 1.0)).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let same = tape.constant(t(3, 2, &[0.6, 0.8, 0.6, 0.8, 0.6, 0.8]));
        let l = qq_pair_loss(&mut tape, same, same, s).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let one = tape.constant(t(1, 2, &[1.0, 0.0]));
        assert!(matches!(qq_pair_loss(&mut tape, one, one, s), Err(LossError::InvalidBatch(_))));
    }

    #[test]
    fn qq_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = unit_rows(&mut rng, 4, 5);
        let b = unit_rows(&mut rng, 4, 5);
        let perm = [2, 0, 3, 1];
        let permute = |x: &Tensor| t(4, 5, &perm.iter().flat_map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let value = |x: Tensor, y: Tensor| {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(x), tape.constant(y));
            let l = qq_pair_loss(&mut tape, x, y, 20.0).unwrap();
            tape.value(l).item()
        };
        let base = value(a.clone(), b.clone());
        assert!((base - value(permute(&a), permute(&b))).abs() < 1e-12);
    }

    #[test]
    fn mnr_monotone_in_positive_similarity() {
        // rotate the positive toward the query; loss must not increase
        let q = [1.0, 0.0, 0.0];
        let negs = [0.2, 0.9797958971132712, 0.0, 0.3, 0.0, 0.9539392014169457];
        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let angle = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 20.0);
            let raw = Raw {
                q: t(1, 3, &q),
                v: None,
                p: t(1, 3, &[angle.cos(), angle.sin(), 0.0]),
                n: t(2, 3, &negs),
            };
            let l = eval(&raw, |tape, b| mnr_loss(tape, b, &LossConfig::default()).unwrap());
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    fn check_term(which: &'static str) {
        let raw = seeded(12, 4, 2, 3, 16);
        let leaves = vec![raw.q.clone(), raw.v.clone().unwrap(), raw.p.clone(), raw.n.clone()];
        let cfg = LossConfig::default().with_lambdas(0.5, 0.5);
        let f = move |tape: &mut Tape, v: &[Var]| -> std::result::Result<Var, AutodiffError> {
            let norm: Vec<Var> = v.iter().map(|x| tape.rowwise_l2_normalize(*x)).collect::<std::result::Result<_, _>>()?;
            let batch = LossBatch::new(tape, norm[0], Some(norm[1]), norm[2], norm[3]).unwrap();
            Ok(match which {
                "mnr" => mnr_loss(tape, &batch, &cfg).unwrap(),
                "qea" => qea_term(tape, &batch).unwrap().value,
                "smc" => smc_term(tape, &batch, false).unwrap().value,
                _ => cr_loss(tape, &batch, &cfg).unwrap().total,
            })
        };
        let report = grad_check(f, &leaves, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{which}: {report:?}");
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        for which in ["mnr", "qea", "smc", "cr"] {
            check_term(which);
        }
    }
}
