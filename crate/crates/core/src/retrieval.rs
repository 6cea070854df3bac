//! Exact top-k cosine retrieval over an in-memory index, and two train-free
//! ways of combining reformulated queries (centroid and best-of).

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::autodiff::{dot, norm, Tensor, EPS_NORM};
use crate::data::{Document, RankedList};
use crate::encoder::{EncoderError, EncoderParams};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("texts with no tokens: {0:?}")]
    EmptyText(Vec<String>),
    #[error("centroid of query embeddings has norm {0:e}")]
    DegenerateCentroid(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

const INDEX_MAGIC: &[u8; 4] = b"CRKI";
const INDEX_VERSION: u32 = 1;
/// Tolerance on the norm of query embeddings passed in directly.
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    doc_ids: Vec<String>,
    matrix: Tensor,
    checkpoint_hash: String,
    built_at: u64,
}

impl VectorIndex {
    /// Encodes every document. Documents without tokens are all reported in
    /// one error.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>, encoder: &EncoderParams) -> Result<Self> {
        let docs: Vec<&Document> = docs.into_iter().collect();
        let empty: Vec<String> = docs
            .iter()
            .filter(|d| encoder.features(&d.text).is_empty())
            .map(|d| d.doc_id.clone())
            .collect();
        if !empty.is_empty() {
            return Err(RetrievalError::EmptyText(empty));
        }
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let matrix = if texts.is_empty() {
            Tensor::zeros(0, encoder.dim())
        } else {
            encoder.encode(&texts)?
        };
        let built_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self {
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            matrix,
            checkpoint_hash: encoder.checkpoint_hash(),
            built_at,
        })
    }

    pub fn from_parts(doc_ids: Vec<String>, matrix: Tensor, checkpoint_hash: impl Into<String>) -> Result<Self> {
        if doc_ids.len() != matrix.rows() {
            return Err(RetrievalError::InvalidArgument(format!(
                "{} doc ids for {} rows",
                doc_ids.len(),
                matrix.rows()
            )));
        }
        Ok(Self {
            doc_ids,
            matrix,
            checkpoint_hash: checkpoint_hash.into(),
            built_at: 0,
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    /// Unix seconds at build time; 0 for indexes assembled from parts.
    pub fn built_at(&self) -> u64 {
        self.built_at
    }

    /// Cosine of a unit query against every document, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(RetrievalError::InvalidArgument(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim()
            )));
        }
        let n = norm(query);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(RetrievalError::InvalidArgument(format!("query embedding has norm {n}, expected 1")));
        }
        Ok((0..self.len()).map(|i| dot(self.matrix.row(i), query)).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        put_str(&mut out, &self.checkpoint_hash);
        out.extend_from_slice(&self.built_at.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for id in &self.doc_ids {
            put_str(&mut out, id);
        }
        for v in self.matrix.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != INDEX_MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {version}")));
        }
        let checkpoint_hash = r.string()?;
        let built_at = r.u64()?;
        let (m, d) = (r.u64()? as usize, r.u64()? as usize);
        let doc_ids = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let len = m.checked_mul(d).ok_or_else(|| RetrievalError::Format("matrix too large".into()))?;
        let data = (0..len).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(RetrievalError::Format("trailing bytes".into()));
        }
        let matrix = Tensor::new(m, d, data).map_err(|e| RetrievalError::Format(e.to_string()))?;
        Ok(Self {
            doc_ids,
            matrix,
            checkpoint_hash,
            built_at,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RetrievalError::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| RetrievalError::Format(e.to_string()))
    }
}

/// Descending score, then ascending doc id.
fn rank_order(a: &(usize, f64), b: &(usize, f64), ids: &[String]) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(&ids[b.0]))
}

/// Top-k of precomputed per-document scores under the index's tie rule.
pub fn top_k_of_scores(index: &VectorIndex, query_id: &str, scores: &[f64], k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(RetrievalError::InvalidArgument("k must be >= 1".into()));
    }
    if index.is_empty() {
        return Err(RetrievalError::InvalidArgument("index is empty".into()));
    }
    let ids = index.doc_ids();
    let mut scored: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(a, b, ids));
        scored.truncate(k);
    }
    scored.sort_by(|a, b| rank_order(a, b, ids));
    Ok(RankedList::new(
        query_id,
        scored.into_iter().map(|(i, s)| (ids[i].clone(), s)).collect(),
    ))
}

/// Exact top-k for a unit-norm query embedding.
pub fn search_topk(index: &VectorIndex, query_id: &str, query: &[f64], k: usize) -> Result<RankedList> {
    let scores = index.scores(query)?;
    top_k_of_scores(index, query_id, &scores, k)
}

fn encode_queries<S: AsRef<str>>(encoder: &EncoderParams, texts: &[S]) -> Result<Tensor> {
    if texts.is_empty() {
        return Err(RetrievalError::InvalidArgument("at least one query text required".into()));
    }
    let empty: Vec<String> = texts
        .iter()
        .filter(|t| encoder.features(t.as_ref()).is_empty())
        .map(|t| t.as_ref().to_string())
        .collect();
    if !empty.is_empty() {
        return Err(RetrievalError::EmptyText(empty));
    }
    Ok(encoder.encode(texts)?)
}

pub fn search_text(index: &VectorIndex, encoder: &EncoderParams, query_id: &str, text: &str, k: usize) -> Result<RankedList> {
    let q = encode_queries(encoder, &[text])?;
    search_topk(index, query_id, q.row(0), k)
}

/// Unit centroid of query embeddings. When all rows are bitwise identical the
/// row itself is returned, so a single query reproduces plain search exactly.
pub fn centroid(embeddings: &Tensor) -> Result<Vec<f64>> {
    if embeddings.rows() == 0 {
        return Err(RetrievalError::InvalidArgument("at least one query embedding required".into()));
    }
    let first = embeddings.row(0);
    if (1..embeddings.rows()).all(|i| embeddings.row(i) == first) {
        return Ok(first.to_vec());
    }
    let mut mean = vec![0.0; embeddings.cols()];
    for i in 0..embeddings.rows() {
        for (m, x) in mean.iter_mut().zip(embeddings.row(i)) {
            *m += x;
        }
    }
    let n = embeddings.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let len = norm(&mean);
    if len < EPS_NORM {
        return Err(RetrievalError::DegenerateCentroid(len));
    }
    Ok(mean.into_iter().map(|m| m / len).collect())
}

pub fn search_centroid_embeddings(index: &VectorIndex, query_id: &str, embeddings: &Tensor, k: usize) -> Result<RankedList> {
    search_topk(index, query_id, &centroid(embeddings)?, k)
}

/// Ranks by each document's best cosine over all query embeddings.
pub fn search_best_reform_embeddings(index: &VectorIndex, query_id: &str, embeddings: &Tensor, k: usize) -> Result<RankedList> {
    if embeddings.rows() == 0 {
        return Err(RetrievalError::InvalidArgument("at least one query embedding required".into()));
    }
    let mut best = index.scores(embeddings.row(0))?;
    for i in 1..embeddings.rows() {
        for (b, s) in best.iter_mut().zip(index.scores(embeddings.row(i))?) {
            *b = b.max(s);
        }
    }
    top_k_of_scores(index, query_id, &best, k)
}

/// Centroid search over the original query followed by its reformulations.
pub fn search_centroid<S: AsRef<str>>(
    index: &VectorIndex,
    encoder: &EncoderParams,
    query_id: &str,
    texts: &[S],
    k: usize,
) -> Result<RankedList> {
    search_centroid_embeddings(index, query_id, &encode_queries(encoder, texts)?, k)
}

pub fn search_best_reform<S: AsRef<str>>(
    index: &VectorIndex,
    encoder: &EncoderParams,
    query_id: &str,
    texts: &[S],
    k: usize,
) -> Result<RankedList> {
    search_best_reform_embeddings(index, query_id, &encode_queries(encoder, texts)?, k)
}
