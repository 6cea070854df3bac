//! Optimization loop for every training mode.

mod batches;
mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batches::{build_batches, derive_seed, prepare_examples, Batch, Mode, PreparedExample};
pub use optim::{adam_step, lr_at_step, AdamConfig, OptimizerState};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{Dataset, Split};
use crate::encoder::{EncoderError, EncoderParams};
use crate::losses::{cr_loss, qq_pair_loss, LossBatch, LossBreakdown, LossConfig, LossError};
use crate::metrics::relevance_metrics;
use crate::retrieval::{search_topk, RetrievalError, VectorIndex};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("query `{0}` has no variants to attach")]
    MissingVariants(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("dev evaluation failed after epoch {epoch}: {message}")]
    DevEvaluation { epoch: usize, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DevMetric {
    #[serde(rename = "ndcg@10")]
    NdcgAt10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub loss: LossConfig,
    pub lr_peak: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    /// Variants sampled per anchor in modes that attach them.
    pub variants_per_anchor: usize,
    pub dev_metric: DevMetric,
    pub adam: AdamConfig,
    pub feature_count: usize,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cr,
            loss: LossConfig::default(),
            lr_peak: 3e-2,
            batch_size: 64,
            max_epochs: 15,
            patience: 5,
            warmup_frac: 0.1,
            seed: 0,
            variants_per_anchor: 4,
            dev_metric: DevMetric::NdcgAt10,
            adam: AdamConfig::default(),
            feature_count: 1024,
            dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail("warmup_frac must be in [0, 1)");
        }
        if self.patience == 0 {
            return fail("patience must be >= 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(self.lr_peak.is_finite() && self.lr_peak > 0.0) {
            return fail("lr_peak must be > 0");
        }
        if self.mode.attaches_variants() && self.mode != Mode::Qq && self.variants_per_anchor == 0 {
            return fail("variants_per_anchor must be >= 1 for this mode");
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Loss configuration with the mode's weights applied.
    pub fn effective_loss(&self) -> LossConfig {
        let (l1, l2) = self.mode.effective_lambdas(self.loss.lambda1, self.loss.lambda2);
        self.loss.with_lambdas(l1, l2)
    }
}

/// Counts epochs without strict improvement of the dev metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records an epoch's metric; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        match self.best {
            Some((_, b)) if value <= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, value));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// `main` for the mode's ranking loss, `qq` for query-query steps.
    pub kind: String,
    pub lr: f64,
    pub qea: f64,
    pub smc: f64,
    pub mnr: f64,
    pub qq: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossBreakdown,
    pub qq_mean: Option<f64>,
    pub dev_ndcg_at_10: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_dev: f64,
    pub stopped_early: bool,
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| TrainError::Data(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

impl History {
    /// Per-epoch records as JSON lines.
    pub fn write_epochs(&self, path: &Path) -> Result<()> {
        write_jsonl(&self.epochs, path)
    }

    /// Per-step loss breakdowns as JSON lines.
    pub fn write_steps(&self, path: &Path) -> Result<()> {
        write_jsonl(&self.steps, path)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub params: EncoderParams,
    pub history: History,
}

fn encode_flat(tape: &mut Tape, encoder: &EncoderParams, weights: Var, texts: &[&str]) -> Result<Var> {
    Ok(encoder.encode_on_tape(tape, weights, texts)?)
}

/// Records the mode's ranking loss for `batch` on a fresh tape.
pub fn batch_loss(
    tape: &mut Tape,
    encoder: &EncoderParams,
    weights: Var,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let ex = &batch.examples;
    let queries: Vec<&str> = ex.iter().map(|e| e.query_text.as_str()).collect();
    let positives: Vec<&str> = ex.iter().map(|e| e.positive_text.as_str()).collect();
    let negatives: Vec<&str> = ex
        .iter()
        .flat_map(|e| e.negative_texts.iter().map(String::as_str))
        .collect();
    let q = encode_flat(tape, encoder, weights, &queries)?;
    let p = encode_flat(tape, encoder, weights, &positives)?;
    let n = encode_flat(tape, encoder, weights, &negatives)?;
    let needs_variants = batch.variants_per_anchor > 0 && (loss.lambda1 > 0.0 || loss.lambda2 > 0.0);
    let v = if needs_variants {
        let variants: Vec<&str> = batch.variant_texts.iter().flatten().map(String::as_str).collect();
        Some(encode_flat(tape, encoder, weights, &variants)?)
    } else {
        None
    };
    let lb = LossBatch::new(tape, q, v, p, n)?.with_positive_keys(ex.iter().map(|e| e.positive_id.clone()).collect())?;
    let out = cr_loss(tape, &lb, loss)?;
    Ok((out.total, out.breakdown))
}

/// Gradient of the mode's ranking loss with respect to the embedding matrix.
pub fn batch_gradients(encoder: &EncoderParams, batch: &Batch, loss: &LossConfig) -> Result<(Tensor, LossBreakdown)> {
    let mut tape = Tape::new();
    let w = tape.leaf(encoder.weights().clone());
    let (total, breakdown) = batch_loss(&mut tape, encoder, w, batch, loss)?;
    let mut grads = tape.backward(total)?;
    Ok((grads.take(w).expect("weights are a leaf"), breakdown))
}

/// Gradient of the query-query loss over each anchor and its first sampled
/// variant.
pub fn qq_gradients(encoder: &EncoderParams, batch: &Batch, scale: f64) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let w = tape.leaf(encoder.weights().clone());
    let a: Vec<&str> = batch.examples.iter().map(|e| e.query_text.as_str()).collect();
    let b: Vec<&str> = batch
        .variant_texts
        .iter()
        .map(|v| v.first().map(String::as_str).ok_or_else(|| TrainError::MissingVariants(String::new())))
        .collect::<Result<_>>()?;
    let qa = encode_flat(&mut tape, encoder, w, &a)?;
    let qb = encode_flat(&mut tape, encoder, w, &b)?;
    let loss = qq_pair_loss(&mut tape, qa, qb, scale)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((grads.take(w).expect("weights are a leaf"), value))
}

/// Mean NDCG@10 of the dev split's canonical queries.
pub fn dev_ndcg(dataset: &Dataset, encoder: &EncoderParams) -> std::result::Result<f64, RetrievalError> {
    let index = VectorIndex::build(dataset.corpus.values(), encoder)?;
    let mut runs = Vec::new();
    let mut texts = Vec::new();
    let mut ids = Vec::new();
    for c in dataset.clusters_in(Some(Split::Dev)) {
        if let Some(t) = dataset.query_text(&c.canonical_query_id) {
            texts.push(t);
            ids.push(c.canonical_query_id.as_str());
        }
    }
    if texts.is_empty() {
        return Ok(0.0);
    }
    let emb = encoder.encode(&texts)?;
    for (i, id) in ids.iter().enumerate() {
        runs.push(search_topk(&index, id, emb.row(i), 10)?);
    }
    Ok(relevance_metrics(&runs, &dataset.qrels).mean.ndcg_at_10.mean)
}

fn check_finite(value: f64, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Numerical(format!("loss became {value} at step {step}")))
    }
}

/// Trains an encoder on `dataset` and returns the best dev checkpoint.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.clusters_in(Some(Split::Dev)).next().is_none() {
        return Err(TrainError::Data("early stopping needs queries in the dev split".into()));
    }
    let loss = config.effective_loss();
    let examples = prepare_examples(dataset, config.mode)?;
    if examples.is_empty() {
        return Err(TrainError::Data("no training triplets".into()));
    }
    let mut encoder = EncoderParams::new(config.feature_count, config.dim, config.seed)?;
    let mut state = OptimizerState::new(config.adam, encoder.weights().data().len());

    let first = build_batches(&examples, config.mode, config.batch_size, config.variants_per_anchor, config.seed, 0)?;
    let updates_per_batch = if config.mode == Mode::Qq { 2 } else { 1 };
    let total_steps = first.len() * updates_per_batch * config.max_epochs;

    let mut history = History::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = encoder.clone();
    let mut step = 0usize;
    for epoch in 1..=config.max_epochs {
        let batches = if epoch == 1 {
            first.clone()
        } else {
            build_batches(&examples, config.mode, config.batch_size, config.variants_per_anchor, config.seed, epoch - 1)?
        };
        let mut sums = LossBreakdown::default();
        let mut main_steps = 0usize;
        let (mut qq_sum, mut qq_steps) = (0.0, 0usize);
        for batch in &batches {
            step += 1;
            let lr = lr_at_step(step, total_steps, config.lr_peak, config.warmup_frac);
            let (grad, b) = batch_gradients(&encoder, batch, &loss)?;
            check_finite(b.total, step)?;
            adam_step(encoder.weights_mut().data_mut(), &grad, &mut state, lr)?;
            sums.qea += b.qea;
            sums.smc += b.smc;
            sums.mnr += b.mnr;
            sums.total += b.total;
            main_steps += 1;
            history.steps.push(StepRecord {
                step,
                epoch,
                kind: "main".into(),
                lr,
                qea: b.qea,
                smc: b.smc,
                mnr: b.mnr,
                qq: 0.0,
                total: b.total,
            });

            if config.mode == Mode::Qq {
                step += 1;
                if batch.examples.len() < 2 {
                    log::debug!("skipping query-query step on a single-anchor batch");
                    continue;
                }
                let lr = lr_at_step(step, total_steps, config.lr_peak, config.warmup_frac);
                let (grad, value) = qq_gradients(&encoder, batch, loss.scale)?;
                check_finite(value, step)?;
                adam_step(encoder.weights_mut().data_mut(), &grad, &mut state, lr)?;
                qq_sum += value;
                qq_steps += 1;
                history.steps.push(StepRecord {
                    step,
                    epoch,
                    kind: "qq".into(),
                    lr,
                    qea: 0.0,
                    smc: 0.0,
                    mnr: 0.0,
                    qq: value,
                    total: value,
                });
            }
        }
        let n = main_steps.max(1) as f64;
        let mean = LossBreakdown {
            qea: sums.qea / n,
            smc: sums.smc / n,
            mnr: sums.mnr / n,
            total: sums.total / n,
        };
        let dev = dev_ndcg(dataset, &encoder).map_err(|e| TrainError::DevEvaluation {
            epoch,
            message: e.to_string(),
        })?;
        let improved = stopper.observe(epoch, dev);
        if improved {
            best = encoder.clone();
        }
        log::info!(
            "{} epoch {epoch}: loss {:.4} (mnr {:.4} qea {:.4} smc {:.4}) dev ndcg@10 {dev:.4}{}",
            config.mode,
            mean.total,
            mean.mnr,
            mean.qea,
            mean.smc,
            if improved { " *" } else { "" }
        );
        history.epochs.push(EpochRecord {
            epoch,
            steps: main_steps + qq_steps,
            mean,
            qq_mean: (qq_steps > 0).then(|| qq_sum / qq_steps as f64),
            dev_ndcg_at_10: dev,
            improved,
        });
        if stopper.should_stop() {
            history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let (best_epoch, best_dev) = stopper.best().expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    history.best_dev = best_dev;
    Ok(TrainOutcome { params: best, history })
}
