//! Group sampling, binary rewards and group-normalized advantages.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::model::{ContextKey, Distribution, PolicyParams, QuestionId, TokenId};

/// One sampled response. `reward` is `None` until the group is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub reward: Option<bool>,
}

impl Response {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens, reward: None }
    }

    pub fn scored(tokens: Vec<TokenId>, correct: bool) -> Self {
        Self { tokens, reward: Some(correct) }
    }

    pub fn is_positive(&self) -> bool {
        self.reward == Some(true)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How advantages are normalized within a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Divide by `G`; advantages equal the group weights `+p_plus`, `-p_minus` exactly.
    #[default]
    Population,
    /// Divide by `G - 1`.
    Sample,
}

impl std::str::FromStr for VarianceMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "population" => Ok(Self::Population),
            "sample" => Ok(Self::Sample),
            other => Err(LabError::InvalidArgument(format!("unknown variance mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Population => "population",
            Self::Sample => "sample",
        })
    }
}

/// One question's responses, their rewards and their advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub question: QuestionId,
    pub responses: Vec<Response>,
    /// Seed of the sampling stream that produced the responses.
    pub seed: u64,
    /// One scalar per response, broadcast to every token.
    pub advantages: Option<Vec<f64>>,
}

impl RolloutGroup {
    pub fn new(question: QuestionId, responses: Vec<Response>, seed: u64) -> Self {
        Self { question, responses, seed, advantages: None }
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn is_scored(&self) -> bool {
        !self.responses.is_empty() && self.responses.iter().all(|r| r.reward.is_some())
    }

    pub fn n_plus(&self) -> usize {
        self.responses.iter().filter(|r| r.is_positive()).count()
    }

    pub fn n_minus(&self) -> usize {
        self.responses.iter().filter(|r| r.reward == Some(false)).count()
    }

    /// `p = N+ / G`.
    pub fn success_rate(&self) -> Result<f64> {
        if !self.is_scored() {
            return Err(LabError::Unscored);
        }
        Ok(self.n_plus() as f64 / self.size() as f64)
    }

    pub fn is_degenerate(&self) -> Result<bool> {
        let p = self.success_rate()?;
        Ok(p == 0.0 || p == 1.0)
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.size()).filter(|&i| self.responses[i].is_positive()).collect()
    }

    pub fn negative_indices(&self) -> Vec<usize> {
        (0..self.size()).filter(|&i| self.responses[i].reward == Some(false)).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.responses.iter().map(Response::len).sum()
    }

    pub fn advantages(&self) -> Result<&[f64]> {
        self.advantages.as_deref().ok_or(LabError::NoAdvantages)
    }

    /// Success rate of a group that must be mixed.
    pub fn mixed_success_rate(&self) -> Result<f64> {
        let p = self.success_rate()?;
        if p == 0.0 || p == 1.0 {
            return Err(LabError::DegenerateGroup(p));
        }
        Ok(p)
    }

    /// Registers every prefix context of every response.
    pub fn register_contexts(&self, params: &mut PolicyParams) {
        for r in &self.responses {
            params.ensure_sequence(self.question, &r.tokens);
        }
    }
}

/// Sampling controls for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub group_size: usize,
    pub max_len: usize,
    /// Softmax temperature; 1 samples the policy itself.
    pub temperature: f64,
    pub eos: TokenId,
}

impl SamplingConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.group_size < 2 {
            return Err(LabError::InvalidArgument(format!("group size must be at least 2, got {}", self.group_size)));
        }
        if self.max_len == 0 {
            return Err(LabError::InvalidArgument("max_len must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LabError::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.eos as usize >= vocab_size {
            return Err(LabError::InvalidArgument(format!("end token {} outside vocabulary", self.eos)));
        }
        Ok(())
    }
}

/// Samples `group_size` responses token by token until the end token or
/// `max_len`. New contexts are registered in `params` as they are reached.
pub fn sample_group(params: &mut PolicyParams, question: QuestionId, cfg: &SamplingConfig, seed: u64) -> Result<RolloutGroup> {
    cfg.validate(params.vocab_size())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut responses = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut tokens = Vec::new();
        while tokens.len() < cfg.max_len {
            let key = ContextKey::new(question, &tokens);
            params.ensure_context(&key);
            let logits: Vec<f64> = params.logits(&key)?.iter().map(|z| z / cfg.temperature).collect();
            let dist = Distribution::from_logits(&logits);
            let sampler = WeightedIndex::new(dist.probs())
                .map_err(|e| LabError::InvalidArgument(format!("degenerate next-token distribution: {e}")))?;
            let token = sampler.sample(&mut rng) as TokenId;
            tokens.push(token);
            if token == cfg.eos {
                break;
            }
        }
        responses.push(Response::new(tokens));
    }
    Ok(RolloutGroup::new(question, responses, seed))
}

/// Deterministic binary reward.
pub trait TaskOracle {
    fn is_correct(&self, question: QuestionId, tokens: &[TokenId]) -> bool;
}

/// Reward 1 iff the answer span is one of the accepted spans.
///
/// The answer span is the last `span_len` tokens after the end token is
/// stripped. With `require_eos`, a response cut off at `max_len` is wrong.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSpanOracle {
    pub accepted: BTreeSet<Vec<TokenId>>,
    pub span_len: usize,
    pub eos: TokenId,
    pub require_eos: bool,
}

impl AnswerSpanOracle {
    /// Single-token answers drawn from `accepted`.
    pub fn single_token(accepted: impl IntoIterator<Item = TokenId>, eos: TokenId) -> Self {
        Self {
            accepted: accepted.into_iter().map(|t| vec![t]).collect(),
            span_len: 1,
            eos,
            require_eos: false,
        }
    }

    pub fn answer_span<'a>(&self, tokens: &'a [TokenId]) -> Option<&'a [TokenId]> {
        let body = match tokens.last() {
            Some(&t) if t == self.eos => &tokens[..tokens.len() - 1],
            _ => tokens,
        };
        (body.len() >= self.span_len && self.span_len > 0).then(|| &body[body.len() - self.span_len..])
    }
}

impl TaskOracle for AnswerSpanOracle {
    fn is_correct(&self, _question: QuestionId, tokens: &[TokenId]) -> bool {
        if self.require_eos && tokens.last() != Some(&self.eos) {
            return false;
        }
        self.answer_span(tokens).is_some_and(|span| self.accepted.contains(span))
    }
}

/// Assigns rewards to an unscored group.
pub fn score_group(group: &RolloutGroup, oracle: &dyn TaskOracle) -> Result<RolloutGroup> {
    if group.responses.iter().any(|r| r.reward.is_some()) {
        return Err(LabError::AlreadyScored);
    }
    let mut scored = group.clone();
    for r in &mut scored.responses {
        r.reward = Some(oracle.is_correct(group.question, &r.tokens));
    }
    Ok(scored)
}

/// `(p_plus, p_minus) = ((1 - p), p) / sqrt(p (1 - p))`.
pub fn group_weights(p: f64) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LabError::DegenerateGroup(p));
    }
    let sigma = (p * (1.0 - p)).sqrt();
    Ok(((1.0 - p) / sigma, p / sigma))
}

/// `A_i = (r_i - p) / sigma`, identical for every token of response `i`.
pub fn compute_advantages(group: &RolloutGroup, mode: VarianceMode) -> Result<RolloutGroup> {
    let p = group.mixed_success_rate()?;
    let g = group.size() as f64;
    let sigma = match mode {
        VarianceMode::Population => (p * (1.0 - p)).sqrt(),
        VarianceMode::Sample => {
            let ss: f64 = group.responses.iter().map(|r| (reward_value(r) - p).powi(2)).sum();
            (ss / (g - 1.0)).sqrt()
        }
    };
    let mut out = group.clone();
    out.advantages = Some(group.responses.iter().map(|r| (reward_value(r) - p) / sigma).collect());
    Ok(out)
}

fn reward_value(r: &Response) -> f64 {
    if r.is_positive() {
        1.0
    } else {
        0.0
    }
}

/// Drops groups whose responses are all correct or all wrong.
pub fn filter_degenerate(groups: Vec<RolloutGroup>) -> Result<Vec<RolloutGroup>> {
    let mut kept = Vec::with_capacity(groups.len());
    for g in groups {
        if !g.is_degenerate()? {
            kept.push(g);
        }
    }
    Ok(kept)
}
