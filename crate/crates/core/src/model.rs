//! Autoregressive softmax policy under the unconstrained-features model.
//!
//! Each context `(question, prefix)` owns a free embedding `h`. A shared
//! unembedding matrix `W`, one row per token, turns it into logits `W h`.
//! Missing embeddings are created lazily from a hash of the context key, so
//! the table contents never depend on the order in which contexts are queried.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::linalg::{all_finite, axpy, dot};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuestionId(pub u64);

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense token ids `0..size`; the last id is the end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    labels: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(LabError::InvalidArgument(format!(
                "vocabulary needs at least one content token plus the end token, got size {size}"
            )));
        }
        Ok(Self { size, labels: None })
    }

    /// Labelled vocabulary; labels must be unique and the last one names the end token.
    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut vocab = Self::new(labels.len())?;
        let mut seen = std::collections::BTreeSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(LabError::InvalidArgument(format!("duplicate token label {label:?}")));
            }
        }
        vocab.labels = Some(labels);
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        (self.size - 1) as TokenId
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn label(&self, token: TokenId) -> String {
        match &self.labels {
            Some(labels) if self.contains(token) => labels[token as usize].clone(),
            _ => token.to_string(),
        }
    }
}

/// Identifies one embedding: equal prefixes under one question share it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey {
    pub question: QuestionId,
    pub prefix: Vec<TokenId>,
}

impl ContextKey {
    pub fn new(question: QuestionId, prefix: &[TokenId]) -> Self {
        Self { question, prefix: prefix.to_vec() }
    }

    pub fn root(question: QuestionId) -> Self {
        Self { question, prefix: Vec::new() }
    }

    fn missing(&self) -> LabError {
        LabError::MissingContext { question: self.question.0, prefix_len: self.prefix.len() }
    }
}

/// Next-token probabilities; entries are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Softmax with the maximum logit subtracted first.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// The prediction error `e_token - pi`.
    pub fn prediction_error(&self, token: TokenId) -> Vec<f64> {
        let mut err: Vec<f64> = self.probs.iter().map(|p| -p).collect();
        err[token as usize] += 1.0;
        err
    }
}

/// How lazily created context embeddings are drawn.
///
/// With no anchor for a question, embeddings are i.i.d. `N(0, 1/d)`. With an
/// anchor `mu` and correlation `rho`, they are `rho * mu + sqrt(1 - rho^2) * xi`
/// for the same isotropic noise `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPrior {
    pub seed: u64,
    pub correlation: f64,
    pub anchors: BTreeMap<QuestionId, Vec<f64>>,
}

impl EmbeddingPrior {
    pub fn isotropic(seed: u64) -> Self {
        Self { seed, correlation: 0.0, anchors: BTreeMap::new() }
    }

    fn draw(&self, key: &ContextKey, dim: usize) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(key.question.0.to_le_bytes());
        hasher.update((key.prefix.len() as u64).to_le_bytes());
        for t in &key.prefix {
            hasher.update(t.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(bytes);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let noise: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        match self.anchors.get(&key.question) {
            None => noise,
            Some(anchor) => {
                let rho = self.correlation;
                let rest = (1.0 - rho * rho).max(0.0).sqrt();
                anchor.iter().zip(&noise).map(|(a, n)| rho * a + rest * n).collect()
            }
        }
    }
}

/// The unembedding matrix `W` (row-major, `vocab_size x dim`) and the
/// context embedding table `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    dim: usize,
    w: Vec<f64>,
    h: BTreeMap<ContextKey, Vec<f64>>,
    prior: EmbeddingPrior,
}

impl PolicyParams {
    /// `W` drawn i.i.d. `N(0, 1/d)` from `seed`; embeddings follow the isotropic prior.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        check_shape(vocab_size, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let w = (0..vocab_size * dim).map(|_| normal.sample(&mut rng)).collect();
        let prior = EmbeddingPrior::isotropic(seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self { vocab_size, dim, w, h: BTreeMap::new(), prior })
    }

    /// Explicit parameters. `w` is row-major `vocab_size x dim`.
    pub fn from_parts(
        vocab_size: usize,
        dim: usize,
        w: Vec<f64>,
        contexts: impl IntoIterator<Item = (ContextKey, Vec<f64>)>,
    ) -> Result<Self> {
        check_shape(vocab_size, dim)?;
        if w.len() != vocab_size * dim {
            return Err(LabError::Shape(format!(
                "unembedding has {} entries, expected {}",
                w.len(),
                vocab_size * dim
            )));
        }
        if !all_finite(&w) {
            return Err(LabError::NonFinite("unembedding matrix"));
        }
        let mut params = Self { vocab_size, dim, w, h: BTreeMap::new(), prior: EmbeddingPrior::isotropic(0) };
        for (key, value) in contexts {
            params.insert_embedding(key, value)?;
        }
        Ok(params)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn w_row(&self, token: TokenId) -> &[f64] {
        let t = token as usize;
        &self.w[t * self.dim..(t + 1) * self.dim]
    }

    /// Replaces one unembedding row.
    pub fn set_w_row(&mut self, token: TokenId, row: &[f64]) -> Result<()> {
        if (token as usize) >= self.vocab_size || row.len() != self.dim {
            return Err(LabError::Shape(format!("row for token {token} of length {}", row.len())));
        }
        if !all_finite(row) {
            return Err(LabError::NonFinite("unembedding row"));
        }
        let d = self.dim;
        let t = token as usize;
        self.w[t * d..(t + 1) * d].copy_from_slice(row);
        Ok(())
    }

    pub fn prior(&self) -> &EmbeddingPrior {
        &self.prior
    }

    /// Replaces the lazy-initialisation prior; existing embeddings are kept.
    pub fn set_prior(&mut self, prior: EmbeddingPrior) -> Result<()> {
        if !(0.0..=1.0).contains(&prior.correlation) {
            return Err(LabError::InvalidArgument(format!(
                "embedding correlation must lie in [0, 1], got {}",
                prior.correlation
            )));
        }
        for anchor in prior.anchors.values() {
            if anchor.len() != self.dim {
                return Err(LabError::Shape(format!("anchor of length {}", anchor.len())));
            }
            if !all_finite(anchor) {
                return Err(LabError::NonFinite("embedding anchor"));
            }
        }
        self.prior = prior;
        Ok(())
    }

    pub fn contains(&self, key: &ContextKey) -> bool {
        self.h.contains_key(key)
    }

    pub fn context_count(&self) -> usize {
        self.h.len()
    }

    /// Context embeddings in key order.
    pub fn contexts(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.h.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn embedding(&self, key: &ContextKey) -> Result<&[f64]> {
        self.h.get(key).map(Vec::as_slice).ok_or_else(|| key.missing())
    }

    /// Inserts or overwrites one embedding.
    pub fn insert_embedding(&mut self, key: ContextKey, value: Vec<f64>) -> Result<()> {
        if value.len() != self.dim {
            return Err(LabError::Shape(format!("embedding of length {}, expected {}", value.len(), self.dim)));
        }
        if !all_finite(&value) {
            return Err(LabError::NonFinite("context embedding"));
        }
        self.h.insert(key, value);
        Ok(())
    }

    /// Returns the embedding, drawing it from the prior on first use.
    pub fn ensure_context(&mut self, key: &ContextKey) -> &[f64] {
        if !self.h.contains_key(key) {
            let value = self.prior.draw(key, self.dim);
            self.h.insert(key.clone(), value);
        }
        &self.h[key]
    }

    /// Registers every prefix context `y_<k`, `k = 0..|y|`.
    pub fn ensure_sequence(&mut self, question: QuestionId, tokens: &[TokenId]) {
        for k in 0..tokens.len() {
            self.ensure_context(&ContextKey::new(question, &tokens[..k]));
        }
    }

    pub fn logits(&self, key: &ContextKey) -> Result<Vec<f64>> {
        let h = self.embedding(key)?;
        Ok(self.w.chunks_exact(self.dim).map(|row| dot(row, h)).collect())
    }

    pub fn next_token_distribution(&self, key: &ContextKey) -> Result<Distribution> {
        Ok(Distribution::from_logits(&self.logits(key)?))
    }

    /// `sum_z pi(z) w_z`
    pub fn mean_unembedding(&self, dist: &Distribution) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (row, p) in self.w.chunks_exact(self.dim).zip(dist.probs()) {
            axpy(*p, row, &mut mean);
        }
        mean
    }

    /// `ln pi(token | ctx)`
    pub fn token_log_prob(&self, key: &ContextKey, token: TokenId) -> Result<f64> {
        self.check_tokens(&[token])?;
        Ok(log_softmax_at(&self.logits(key)?, token as usize))
    }

    /// `sum_k ln pi(y_k | x, y_<k)`
    pub fn sequence_log_likelihood(&self, question: QuestionId, tokens: &[TokenId]) -> Result<f64> {
        self.check_tokens(tokens)?;
        let mut total = 0.0;
        for k in 0..tokens.len() {
            let logits = self.logits(&ContextKey::new(question, &tokens[..k]))?;
            total += log_softmax_at(&logits, tokens[k] as usize);
        }
        Ok(total)
    }

    /// Gradient of `sequence_log_likelihood` with respect to `W` and every prefix embedding.
    pub fn grad_log_likelihood(&self, question: QuestionId, tokens: &[TokenId]) -> Result<ParamGradient> {
        self.check_tokens(tokens)?;
        let mut grad = ParamGradient::zeros(self.vocab_size, self.dim);
        for k in 0..tokens.len() {
            grad.accumulate_token(self, &ContextKey::new(question, &tokens[..k]), tokens[k], 1.0)?;
        }
        Ok(grad)
    }

    /// `theta + lr * grad`; every context of `grad` must exist here.
    pub fn apply_gradient(&self, grad: &ParamGradient, lr: f64) -> Result<PolicyParams> {
        if grad.vocab_size != self.vocab_size || grad.dim != self.dim {
            return Err(LabError::Shape("gradient shape differs from parameters".into()));
        }
        if !lr.is_finite() {
            return Err(LabError::NonFinite("learning rate"));
        }
        if !grad.is_finite() {
            return Err(LabError::NonFinite("gradient"));
        }
        let mut next = self.clone();
        axpy(lr, &grad.dw, &mut next.w);
        for (key, delta) in &grad.dh {
            let h = next.h.get_mut(key).ok_or_else(|| key.missing())?;
            axpy(lr, delta, h);
        }
        Ok(next)
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|t| (**t as usize) >= self.vocab_size) {
            Some(t) => Err(LabError::InvalidArgument(format!(
                "token {t} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }
}

fn check_shape(vocab_size: usize, dim: usize) -> Result<()> {
    if vocab_size == 0 || dim == 0 {
        return Err(LabError::Shape(format!("vocabulary {vocab_size} and dimension {dim} must be positive")));
    }
    Ok(())
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// A gradient with the same shape as [`PolicyParams`]; `dh` holds only the
/// contexts the originating responses touched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    vocab_size: usize,
    dim: usize,
    dw: Vec<f64>,
    dh: BTreeMap<ContextKey, Vec<f64>>,
}

impl ParamGradient {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        Self { vocab_size, dim, dw: vec![0.0; vocab_size * dim], dh: BTreeMap::new() }
    }

    pub fn dw(&self) -> &[f64] {
        &self.dw
    }

    pub fn dw_row(&self, token: TokenId) -> &[f64] {
        let t = token as usize;
        &self.dw[t * self.dim..(t + 1) * self.dim]
    }

    pub fn dh(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.dh.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn dh_entry(&self, key: &ContextKey) -> Option<&[f64]> {
        self.dh.get(key).map(Vec::as_slice)
    }

    /// Adds `coef * grad ln pi(token | ctx)`:
    /// `dW += coef (e_token - pi) h^T`, `dH[ctx] += coef (w_token - sum_z pi_z w_z)`.
    /// The context key is recorded even when `coef` is zero.
    pub fn accumulate_token(&mut self, params: &PolicyParams, key: &ContextKey, token: TokenId, coef: f64) -> Result<()> {
        let h = params.embedding(key)?;
        let d = self.dim;
        let entry = self.dh.entry(key.clone()).or_insert_with(|| vec![0.0; d]);
        if coef == 0.0 {
            return Ok(());
        }
        let dist = params.next_token_distribution(key)?;
        let mean = params.mean_unembedding(&dist);
        let w_tok = params.w_row(token);
        for c in 0..d {
            entry[c] += coef * (w_tok[c] - mean[c]);
        }
        for (z, p) in dist.probs().iter().enumerate() {
            let e = if z == token as usize { 1.0 - p } else { -p };
            axpy(coef * e, h, &mut self.dw[z * d..(z + 1) * d]);
        }
        Ok(())
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, other: &ParamGradient, c: f64) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(c, &other.dw, &mut self.dw);
        for (key, v) in &other.dh {
            let d = self.dim;
            let entry = self.dh.entry(key.clone()).or_insert_with(|| vec![0.0; d]);
            axpy(c, v, entry);
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> ParamGradient {
        let mut out = self.clone();
        out.dw.iter_mut().for_each(|v| *v *= c);
        out.dh.values_mut().flatten().for_each(|v| *v *= c);
        out
    }

    /// Euclidean inner product over `W` and the union of context keys.
    pub fn dot(&self, other: &ParamGradient) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut total = dot(&self.dw, &other.dw);
        for (key, v) in &self.dh {
            if let Some(u) = other.dh.get(key) {
                total += dot(v, u);
            }
        }
        Ok(total)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self).expect("same shape")
    }

    /// Largest entrywise absolute difference, treating absent contexts as zero.
    pub fn max_abs_diff(&self, other: &ParamGradient) -> Result<f64> {
        self.check_same_shape(other)?;
        let mut worst = self.dw.iter().zip(&other.dw).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let zero = vec![0.0; self.dim];
        for key in self.dh.keys().chain(other.dh.keys()) {
            let a = self.dh.get(key).unwrap_or(&zero);
            let b = other.dh.get(key).unwrap_or(&zero);
            worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        }
        Ok(worst)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.dw) && self.dh.values().all(|v| all_finite(v))
    }

    fn check_same_shape(&self, other: &ParamGradient) -> Result<()> {
        if self.vocab_size != other.vocab_size || self.dim != other.dim {
            return Err(LabError::Shape("gradients of different shape".into()));
        }
        Ok(())
    }
}
