//! Prediction-error similarity weights, the embedding score of a question,
//! per-token negative scores, threshold selection and the summation-first
//! fast path.
//!
//! For two token positions `a` and `b` the similarity weight is
//! `alpha = <e_{y_a} - pi_a, e_{y_b} - pi_b>`. A negative token's score sums
//! `alpha * <h_pos, h_neg>` over every token of every positive response.
//! All quantities are read from the pre-update parameters.

use std::collections::BTreeSet;

use crate::error::{LabError, Result};
use crate::linalg::{dot, norm_sq};
use crate::model::{ContextKey, PolicyParams, QuestionId, TokenId};
use crate::rollout::{group_weights, RolloutGroup};

/// `e_token - pi(.|ctx)`
pub fn prediction_error(params: &PolicyParams, key: &ContextKey, token: TokenId) -> Result<Vec<f64>> {
    Ok(params.next_token_distribution(key)?.prediction_error(token))
}

/// Inner product of two prediction-error vectors.
pub fn alpha_weight(params: &PolicyParams, ctx_a: &ContextKey, token_a: TokenId, ctx_b: &ContextKey, token_b: TokenId) -> Result<f64> {
    Ok(dot(&prediction_error(params, ctx_a, token_a)?, &prediction_error(params, ctx_b, token_b)?))
}

/// `eta = 2 |0.5 - p|`
pub fn eta_schedule(p: f64) -> f64 {
    2.0 * (0.5 - p).abs()
}

/// Scores of one negative response.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeTokenScores {
    /// Index of the response within its group.
    pub response: usize,
    pub s_minus: Vec<f64>,
    /// Bound on `|exact - reported|` per position; zero on exact paths.
    pub bound: Vec<f64>,
    /// Positions whose score exceeds the threshold, ascending.
    pub selected: Vec<usize>,
}

/// Mean influence of one positive response's tokens on all positive tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveInfluence {
    pub response: usize,
    pub value: f64,
    pub bound: f64,
}

/// Token scores for one group plus, once selection has run, the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct NthrReport {
    pub question: QuestionId,
    pub negatives: Vec<NegativeTokenScores>,
    pub positives: Vec<PositiveInfluence>,
    pub tau: Option<f64>,
    /// Attenuation the caller applied; informational.
    pub eta: Option<f64>,
}

impl NthrReport {
    pub fn selected_count(&self) -> usize {
        self.negatives.iter().map(|n| n.selected.len()).sum()
    }

    pub fn min_positive_influence(&self) -> Option<f64> {
        self.positives.iter().map(|p| p.value).reduce(f64::min)
    }

    pub(crate) fn check_matches(&self, group: &RolloutGroup) -> Result<()> {
        let negatives = group.negative_indices();
        let ok = self.question == group.question
            && self.negatives.len() == negatives.len()
            && self.negatives.iter().zip(&negatives).all(|(n, &j)| {
                n.response == j
                    && n.s_minus.len() == group.responses[j].len()
                    && n.selected.iter().all(|&k| k < n.s_minus.len())
            });
        if ok {
            Ok(())
        } else {
            Err(LabError::Shape("token score report does not match the group".into()))
        }
    }
}

/// Embedding and prediction error of one response token.
struct TokenFeature {
    h: Vec<f64>,
    err: Vec<f64>,
}

fn harvest(params: &PolicyParams, group: &RolloutGroup, response: usize) -> Result<Vec<TokenFeature>> {
    let y = &group.responses[response].tokens;
    (0..y.len())
        .map(|k| {
            let key = ContextKey::new(group.question, &y[..k]);
            Ok(TokenFeature { h: params.embedding(&key)?.to_vec(), err: prediction_error(params, &key, y[k])? })
        })
        .collect()
}

fn harvest_all(params: &PolicyParams, group: &RolloutGroup, indices: &[usize]) -> Result<Vec<Vec<TokenFeature>>> {
    indices.iter().map(|&i| harvest(params, group, i)).collect()
}

fn pair(a: &TokenFeature, b: &TokenFeature) -> f64 {
    dot(&a.err, &b.err) * dot(&a.h, &b.h)
}

/// Negative-token scores by explicit loops over every positive token:
/// `s_{j,k'} = sum_i sum_k alpha_{k,k'} <h_{i,<k}, h_{j,<k'}>`.
/// Positive influences are filled too; no token is selected yet.
pub fn nthr_scores(params: &PolicyParams, group: &RolloutGroup) -> Result<NthrReport> {
    group.mixed_success_rate()?;
    let pos = harvest_all(params, group, &group.positive_indices())?;
    let negatives = group
        .negative_indices()
        .into_iter()
        .map(|j| {
            let feats = harvest(params, group, j)?;
            let s_minus: Vec<f64> = feats
                .iter()
                .map(|neg| {
                    let mut s = 0.0;
                    for response in &pos {
                        for tok in response {
                            s += pair(tok, neg);
                        }
                    }
                    s
                })
                .collect();
            Ok(NegativeTokenScores { response: j, bound: vec![0.0; s_minus.len()], s_minus, selected: Vec::new() })
        })
        .collect::<Result<_>>()?;
    Ok(NthrReport {
        question: group.question,
        negatives,
        positives: positive_mutual_influence(params, group)?,
        tau: None,
        eta: None,
    })
}

/// `s_bar_{i'} = (1 / |y_{i'}|) sum_{k''} sum_i sum_k alpha_{k,k''} <h_{i,<k}, h_{i',<k''}>`.
pub fn positive_mutual_influence(params: &PolicyParams, group: &RolloutGroup) -> Result<Vec<PositiveInfluence>> {
    if !group.is_scored() {
        return Err(LabError::Unscored);
    }
    let indices = group.positive_indices();
    if indices.is_empty() {
        return Err(LabError::NoPositives);
    }
    let pos = harvest_all(params, group, &indices)?;
    Ok(indices
        .iter()
        .zip(&pos)
        .map(|(&i, target)| {
            let mut total = 0.0;
            for tok in target {
                for response in &pos {
                    for other in response {
                        total += pair(other, tok);
                    }
                }
            }
            PositiveInfluence { response: i, value: total / target.len() as f64, bound: 0.0 }
        })
        .collect())
}

/// Score of one negative token against a single positive response:
/// `sum_k alpha_{k,k'} <h_{i,<k}, h_{j,<k'}>`.
pub fn nthr_score_single(params: &PolicyParams, group: &RolloutGroup, positive: usize, negative: usize, position: usize) -> Result<f64> {
    if !group.responses[positive].is_positive() || group.responses[negative].reward != Some(false) {
        return Err(LabError::InvalidArgument("expected one positive and one negative response".into()));
    }
    let pos = harvest(params, group, positive)?;
    let neg = harvest(params, group, negative)?;
    let target = neg
        .get(position)
        .ok_or_else(|| LabError::InvalidArgument(format!("position {position} outside response {negative}")))?;
    Ok(pos.iter().map(|tok| pair(tok, target)).sum())
}

/// Applies `tau = beta * min s_bar` and keeps the positions with `s > tau`.
/// `beta = -inf` selects every negative token and `beta = +inf` none,
/// whatever the sign of the minimum.
pub fn select_tokens(report: &NthrReport, beta: f64) -> Result<NthrReport> {
    if beta.is_nan() {
        return Err(LabError::InvalidArgument("beta is NaN".into()));
    }
    let min = report.min_positive_influence().ok_or(LabError::NoPositives)?;
    let tau = if beta.is_infinite() { beta } else { beta * min };
    let mut out = report.clone();
    out.tau = Some(tau);
    for neg in &mut out.negatives {
        neg.selected = (0..neg.s_minus.len()).filter(|&k| neg.s_minus[k] > tau).collect();
    }
    Ok(out)
}

/// Vocabulary used by [`fast_nthr`] for prediction-error vectors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum VocabularyRestriction {
    #[default]
    Full,
    /// Tokens occurring in the group's responses plus the end token.
    ResponseTokens,
    Tokens(BTreeSet<TokenId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FastPathConfig {
    pub vocabulary: VocabularyRestriction,
}

/// Union of response tokens and the end token `|V| - 1`.
pub fn response_vocabulary(group: &RolloutGroup, vocab_size: usize) -> BTreeSet<TokenId> {
    let mut set: BTreeSet<TokenId> = group.responses.iter().flat_map(|r| r.tokens.iter().copied()).collect();
    set.insert((vocab_size - 1) as TokenId);
    set
}

/// Prediction error restricted to `support`, plus the probability mass left out.
struct RestrictedFeature {
    h: Vec<f64>,
    err: Vec<f64>,
    outside_mass: f64,
}

fn harvest_restricted(params: &PolicyParams, group: &RolloutGroup, response: usize, support: &[usize]) -> Result<Vec<RestrictedFeature>> {
    let y = &group.responses[response].tokens;
    let mut in_support = vec![false; params.vocab_size()];
    for &z in support {
        in_support[z] = true;
    }
    (0..y.len())
        .map(|k| {
            let key = ContextKey::new(group.question, &y[..k]);
            let dist = params.next_token_distribution(&key)?;
            let full = dist.prediction_error(y[k]);
            let outside_mass = (0..params.vocab_size()).filter(|&z| !in_support[z]).map(|z| dist.probs()[z]).sum();
            Ok(RestrictedFeature {
                h: params.embedding(&key)?.to_vec(),
                err: support.iter().map(|&z| full[z]).collect(),
                outside_mass,
            })
        })
        .collect()
}

/// Summation-first scores. The positive side is folded once into
/// `M = sum_i sum_k (e - pi) h^T` over the chosen vocabulary, after which
/// every score is the bilinear form `(e - pi)^T M h`.
///
/// Dropping vocabulary entries changes each `alpha` by
/// `sum_{z outside} pi_a(z) pi_b(z) <= m_a m_b`, where `m` is the mass left
/// out, so every reported score carries the bound
/// `m_b ||h_b|| sum_{a} m_a ||h_a||`. The bound is zero on the full vocabulary.
pub fn fast_nthr(params: &PolicyParams, group: &RolloutGroup, cfg: &FastPathConfig) -> Result<NthrReport> {
    group.mixed_success_rate()?;
    let support: Vec<usize> = match &cfg.vocabulary {
        VocabularyRestriction::Full => (0..params.vocab_size()).collect(),
        VocabularyRestriction::ResponseTokens => {
            response_vocabulary(group, params.vocab_size()).into_iter().map(|t| t as usize).collect()
        }
        VocabularyRestriction::Tokens(set) => {
            let mut with_responses = set.clone();
            with_responses.extend(group.responses.iter().flat_map(|r| r.tokens.iter().copied()));
            if with_responses.iter().any(|&t| (t as usize) >= params.vocab_size()) {
                return Err(LabError::InvalidArgument("restricted vocabulary exceeds the model vocabulary".into()));
            }
            with_responses.into_iter().map(|t| t as usize).collect()
        }
    };
    let (s, d) = (support.len(), params.dim());
    let pos_idx = group.positive_indices();
    let pos: Vec<Vec<RestrictedFeature>> =
        pos_idx.iter().map(|&i| harvest_restricted(params, group, i, &support)).collect::<Result<_>>()?;

    let mut m = vec![0.0; s * d];
    let mut mass_norm = 0.0;
    for tok in pos.iter().flatten() {
        for (row, e) in m.chunks_exact_mut(d).zip(&tok.err) {
            crate::linalg::axpy(*e, &tok.h, row);
        }
        mass_norm += tok.outside_mass * norm_sq(&tok.h).sqrt();
    }
    let score = |tok: &RestrictedFeature| -> (f64, f64) {
        let value = m.chunks_exact(d).zip(&tok.err).map(|(row, e)| e * dot(row, &tok.h)).sum();
        (value, tok.outside_mass * norm_sq(&tok.h).sqrt() * mass_norm)
    };

    let negatives = group
        .negative_indices()
        .into_iter()
        .map(|j| {
            let feats = harvest_restricted(params, group, j, &support)?;
            let (s_minus, bound) = feats.iter().map(&score).unzip();
            Ok(NegativeTokenScores { response: j, s_minus, bound, selected: Vec::new() })
        })
        .collect::<Result<_>>()?;
    let positives = pos_idx
        .iter()
        .zip(&pos)
        .map(|(&i, feats)| {
            let n = feats.len() as f64;
            let (value, bound) = feats.iter().map(&score).fold((0.0, 0.0), |(v, b), (x, y)| (v + x, b + y));
            PositiveInfluence { response: i, value: value / n, bound: bound / n }
        })
        .collect();
    Ok(NthrReport { question: group.question, negatives, positives, tau: None, eta: None })
}

/// Embedding score of one question, per positive response and averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct GwhesScore {
    pub question: QuestionId,
    pub per_response: Vec<(usize, f64)>,
    pub mean: f64,
}

/// `p_minus sum_k sum_j sum_k' alpha <h_i, h_j> - p_plus sum_k sum_i' sum_k'' alpha <h_i, h_i'>`
/// for positive response `i`, evaluated through the folded matrices
/// `M+ = sum (e - pi) h^T` over positive tokens and `M-` over negative tokens.
pub fn gwhes(params: &PolicyParams, group: &RolloutGroup, i: usize) -> Result<f64> {
    Ok(gwhes_parts(params, group, &[i])?.remove(0).1)
}

/// [`gwhes`] for every positive response and its mean.
pub fn gwhes_score(params: &PolicyParams, group: &RolloutGroup) -> Result<GwhesScore> {
    let per_response = gwhes_parts(params, group, &group.positive_indices())?;
    let mean = per_response.iter().map(|(_, v)| v).sum::<f64>() / per_response.len() as f64;
    Ok(GwhesScore { question: group.question, per_response, mean })
}

fn gwhes_parts(params: &PolicyParams, group: &RolloutGroup, targets: &[usize]) -> Result<Vec<(usize, f64)>> {
    let (pp, pm) = group_weights(group.mixed_success_rate()?)?;
    if let Some(&bad) = targets.iter().find(|&&i| i >= group.size() || !group.responses[i].is_positive()) {
        return Err(LabError::InvalidArgument(format!("response {bad} is not a positive response")));
    }
    let (v, d) = (params.vocab_size(), params.dim());
    let fold = |indices: Vec<usize>| -> Result<Vec<f64>> {
        let mut m = vec![0.0; v * d];
        for feats in harvest_all(params, group, &indices)? {
            for tok in feats {
                for (row, e) in m.chunks_exact_mut(d).zip(&tok.err) {
                    crate::linalg::axpy(*e, &tok.h, row);
                }
            }
        }
        Ok(m)
    };
    let m_plus = fold(group.positive_indices())?;
    let m_minus = fold(group.negative_indices())?;
    let bilinear = |m: &[f64], tok: &TokenFeature| -> f64 { m.chunks_exact(d).zip(&tok.err).map(|(row, e)| e * dot(row, &tok.h)).sum() };
    targets
        .iter()
        .map(|&i| {
            let feats = harvest(params, group, i)?;
            let neg: f64 = feats.iter().map(|t| bilinear(&m_minus, t)).sum();
            let pos: f64 = feats.iter().map(|t| bilinear(&m_plus, t)).sum();
            Ok((i, pm * neg - pp * pos))
        })
        .collect()
}
