//! Seeded question generation, sampling and scoring.
//!
//! Every random draw comes from a stream keyed by (master seed, purpose,
//! question id), so a question's data does not depend on how many other
//! questions exist or on the order they are processed in.

use lld_core::model::{EmbeddingPrior, PolicyParams, QuestionId, TokenId};
use lld_core::rollout::{compute_advantages, sample_group, score_group, AnswerSpanOracle, RolloutGroup, SamplingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, TaskFamily};
use crate::error::{HarnessError, Result};

/// Seed of the stream `(master, purpose, index)`.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Static description of one question.
#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub id: QuestionId,
    /// Token the anchor favours; `None` for the isotropic family.
    pub mode_token: Option<TokenId>,
    /// Accepted final tokens, ascending.
    pub accepted: Vec<TokenId>,
}

/// Shared unembedding, embedding prior and the question list.
#[derive(Debug, Clone)]
pub struct Task {
    pub base: PolicyParams,
    pub questions: Vec<Question>,
}

pub fn build_task(cfg: &ExperimentConfig) -> Result<Task> {
    let (v, d) = (cfg.vocab_size, cfg.dim);
    let mut base = PolicyParams::random(v, d, derive_seed(cfg.seed, "unembedding", 0)).map_err(HarnessError::model(0))?;
    let noise = Normal::new(0.0, cfg.prior_noise / (d as f64).sqrt()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut prior = EmbeddingPrior::isotropic(derive_seed(cfg.seed, "embedding", 0));
    let mut questions = Vec::with_capacity(cfg.questions);
    for q in 0..cfg.questions as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "question", q));
        let mode_token = match cfg.task {
            TaskFamily::Anchored => {
                let f = rng.random_range(0..(v - 1) as TokenId);
                let w_f = base.w_row(f);
                let scale = cfg.prior_kappa / lld_core::linalg::norm_sq(w_f);
                let anchor: Vec<f64> = w_f.iter().map(|w| scale * w + noise.sample(&mut rng)).collect();
                prior.anchors.insert(QuestionId(q), anchor);
                Some(f)
            }
            TaskFamily::Isotropic => None,
        };
        let mut accepted: Vec<TokenId> =
            rand::seq::index::sample(&mut rng, v - 1, cfg.answer_set_size).into_iter().map(|t| t as TokenId).collect();
        accepted.sort_unstable();
        questions.push(Question { id: QuestionId(q), mode_token, accepted });
    }
    if cfg.task == TaskFamily::Anchored {
        prior.correlation = cfg.prior_rho;
    }
    base.set_prior(prior).map_err(HarnessError::model(0))?;
    Ok(Task { base, questions })
}

/// A sampled and scored question with its own copy of the parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub question: Question,
    pub params: PolicyParams,
    /// Scored; carries advantages unless degenerate.
    pub group: RolloutGroup,
    pub degenerate: bool,
}

impl Prepared {
    pub fn id(&self) -> u64 {
        self.question.id.0
    }
}

pub fn sampling_config(cfg: &ExperimentConfig) -> SamplingConfig {
    SamplingConfig {
        group_size: cfg.group_size,
        max_len: cfg.max_len,
        temperature: cfg.temperature,
        eos: (cfg.vocab_size - 1) as TokenId,
    }
}

pub fn prepare_question(cfg: &ExperimentConfig, task: &Task, question: &Question) -> Result<Prepared> {
    let q = question.id.0;
    let mut params = task.base.clone();
    let sampled = sample_group(&mut params, question.id, &sampling_config(cfg), derive_seed(cfg.seed, "rollout", q))
        .map_err(HarnessError::model(q))?;
    let mut oracle = AnswerSpanOracle::single_token(question.accepted.iter().copied(), (cfg.vocab_size - 1) as TokenId);
    oracle.require_eos = cfg.require_eos;
    let scored = score_group(&sampled, &oracle).map_err(HarnessError::model(q))?;
    let degenerate = scored.is_degenerate().map_err(HarnessError::model(q))?;
    let group = if degenerate { scored } else { compute_advantages(&scored, cfg.variance).map_err(HarnessError::model(q))? };
    Ok(Prepared { question: question.clone(), params, group, degenerate })
}

/// All questions of a run, in id order.
pub fn prepare_all(cfg: &ExperimentConfig) -> Result<Vec<Prepared>> {
    let task = build_task(cfg)?;
    task.questions.par_iter().map(|q| prepare_question(cfg, &task, q)).collect()
}
