//! Hashed bag-of-tokens text encoder shared by queries and documents.
//!
//! A text is tokenized, each token is hashed (FNV-1a, 64 bit) into one of `F`
//! feature rows of a trainable `F x D` matrix, and the embedding is the
//! L2-normalized mean of those rows. Token order is irrelevant; repeated
//! tokens count with multiplicity.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{group_mean_rows, l2_normalize_rows, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty token")]
    InvalidToken,
    #[error("text {index} has no tokens: {text:?}")]
    EmptyText { index: usize, text: String },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Splits on any non-alphanumeric character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub min_token_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            min_token_len: 1,
        }
    }
}

impl TokenizerConfig {
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.chars().count() >= self.min_token_len.max(1))
            .map(|t| if self.lowercase { t.to_lowercase() } else { t.to_string() })
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    TokenizerConfig::default().tokenize(text)
}

pub const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
pub const FNV_PRIME: u64 = 1_099_511_628_211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Feature row of a token: FNV-1a over its UTF-8 bytes, modulo `feature_count`.
pub fn hash_token(token: &str, feature_count: usize) -> Result<usize> {
    if token.is_empty() {
        return Err(EncoderError::InvalidToken);
    }
    Ok((fnv1a64(token.as_bytes()) % feature_count as u64) as usize)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CRKE";
const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8;

/// Trainable parameters: an `F x D` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    feature_count: usize,
    dim: usize,
    seed: u64,
    weights: Tensor,
    tokenizer: TokenizerConfig,
}

impl EncoderParams {
    /// Seeded uniform initialization in `(-1/sqrt(D), 1/sqrt(D))`.
    pub fn new(feature_count: usize, dim: usize, seed: u64) -> Result<Self> {
        if feature_count == 0 || dim == 0 {
            return Err(EncoderError::Config(format!("F={feature_count}, D={dim}; both must be >= 1")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..feature_count * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            feature_count,
            dim,
            seed,
            weights: Tensor::new(feature_count, dim, data)?,
            tokenizer: TokenizerConfig::default(),
        })
    }

    pub fn from_weights(weights: Tensor, seed: u64) -> Result<Self> {
        let (feature_count, dim) = weights.shape();
        if feature_count == 0 || dim == 0 {
            return Err(EncoderError::Config("empty weight matrix".into()));
        }
        Ok(Self {
            feature_count,
            dim,
            seed,
            weights,
            tokenizer: TokenizerConfig::default(),
        })
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// Hashed feature indices of a text, one per token.
    pub fn features(&self, text: &str) -> Vec<usize> {
        self.tokenizer
            .tokenize(text)
            .iter()
            .map(|t| (fnv1a64(t.as_bytes()) % self.feature_count as u64) as usize)
            .collect()
    }

    fn feature_groups<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Vec<usize>>> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                let f = self.features(t.as_ref());
                if f.is_empty() {
                    Err(EncoderError::EmptyText {
                        index,
                        text: t.as_ref().to_string(),
                    })
                } else {
                    Ok(f)
                }
            })
            .collect()
    }

    /// Encodes texts into unit rows without recording a graph.
    pub fn encode<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let groups = self.feature_groups(texts)?;
        let mean = group_mean_rows(&self.weights, &groups)?;
        Ok(l2_normalize_rows(&mean)?.0)
    }

    pub fn encode_one(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.encode(&[text])?.into_data())
    }

    /// Differentiable encoding against `weights`, a tape variable holding this
    /// encoder's matrix (usually a leaf).
    pub fn encode_on_tape<S: AsRef<str>>(&self, tape: &mut Tape, weights: Var, texts: &[S]) -> Result<Var> {
        let groups = self.feature_groups(texts)?;
        let mean = tape.rowwise_mean(weights, groups)?;
        Ok(tape.rowwise_l2_normalize(mean)?)
    }

    /// Header (magic, version, F, D, seed) then the matrix as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.weights.data().len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.weights.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing header"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let (f, d, seed) = (u64_at(8) as usize, u64_at(16) as usize, u64_at(24));
        let body = &bytes[HEADER_LEN..];
        if f.checked_mul(d).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(bad("matrix length does not match header"));
        }
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_weights(Tensor::new(f, d, data)?, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn checkpoint_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("What is DNA?"), ["what", "is", "dna"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("C-3PO unit"), ["c", "3po", "unit"]);
    }

    /// Straight transcription of FNV-1a; kept separate from the fold above.
    fn reference_fnv(s: &str) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in s.bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    #[test]
    fn hash_matches_reference() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        for tok in ["a", "dna", "ünïcode", "3po"] {
            assert_eq!(hash_token(tok, 1024).unwrap(), (reference_fnv(tok) % 1024) as usize);
            assert_eq!(hash_token(tok, 1024).unwrap(), hash_token(tok, 1024).unwrap());
        }
        assert!(matches!(hash_token("", 8), Err(EncoderError::InvalidToken)));
    }

    #[test]
    fn hash_spreads_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = 1024;
        let mut load = vec![0usize; f];
        let n = 10_000;
        for _ in 0..n {
            let len = rng.gen_range(3..10);
            let tok: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            load[hash_token(&tok, f).unwrap()] += 1;
        }
        let mean = n as f64 / f as f64;
        assert!((*load.iter().max().unwrap() as f64) < 4.0 * mean);
    }

    #[test]
    fn encode_properties() {
        let p = EncoderParams::new(64, 8, 1).unwrap();
        let e = p.encode(&["alpha beta", "alpha beta", "beta alpha", "gamma"]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(0), e.row(2));
        for r in 0..4 {
            assert!((crate::autodiff::norm(e.row(r)) - 1.0).abs() < 1e-9);
        }
        // single token: normalized feature row
        let idx = hash_token("gamma", 64).unwrap();
        let row = p.weights().row(idx);
        let n = crate::autodiff::norm(row);
        for (a, b) in e.row(3).iter().zip(row) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn encode_rejects_empty_and_degenerate() {
        let p = EncoderParams::new(16, 4, 1).unwrap();
        assert!(matches!(p.encode(&["ok", "?!"]), Err(EncoderError::EmptyText { index: 1, .. })));
        let zero = EncoderParams::from_weights(Tensor::zeros(16, 4), 0).unwrap();
        assert!(matches!(
            zero.encode(&["x"]),
            Err(EncoderError::Autodiff(AutodiffError::DegenerateRow { .. }))
        ));
    }

    #[test]
    fn tape_and_direct_encoding_agree() {
        let p = EncoderParams::new(32, 6, 9).unwrap();
        let texts = ["one two two", "three"];
        let mut tape = Tape::new();
        let w = tape.leaf(p.weights().clone());
        let v = p.encode_on_tape(&mut tape, w, &texts).unwrap();
        assert_eq!(tape.value(v), &p.encode(&texts).unwrap());
    }

    #[test]
    fn cosine_gradient_passes_grad_check() {
        let p = EncoderParams::new(24, 5, 4).unwrap();
        let f = |tape: &mut Tape, v: &[Var]| {
            let q = p.encode_on_tape(tape, v[0], &["red fox jumps"]).unwrap();
            let d = p.encode_on_tape(tape, v[0], &["lazy red dog fox fox"]).unwrap();
            tape.cosine_similarity_matrix(q, d)
        };
        let report = grad_check(f, &[p.weights().clone()], 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = EncoderParams::new(10, 3, 77).unwrap();
        let bytes = p.to_bytes();
        let back = EncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);
        assert!(EncoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(p.checkpoint_hash().len(), 64);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = EncoderParams::new(8, 4, 3).unwrap();
        assert_eq!(a, EncoderParams::new(8, 4, 3).unwrap());
        assert_ne!(a, EncoderParams::new(8, 4, 4).unwrap());
        assert!(a.weights().data().iter().all(|v| v.abs() < 0.5));
        assert!(EncoderParams::new(0, 4, 1).is_err());
    }
}
