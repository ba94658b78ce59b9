//! Cross-module identity checks on random small instances.
//!
//! Each check compares two independently computed quantities and records the
//! largest discrepancy against its tolerance.

use std::path::PathBuf;

use lld_core::dynamics::{first_order_rate, probe_gradient, term_decomposition, ProbeOptions};
use lld_core::model::{ContextKey, PolicyParams, QuestionId, TokenId};
use lld_core::nthr::{fast_nthr, gwhes, nthr_scores, FastPathConfig};
use lld_core::objective::{grpo_objective_gradient, group_preference_gradient, UpdateConfig, Variant};
use lld_core::rollout::{compute_advantages, group_weights, Response, RolloutGroup, VarianceMode};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, Columns, RunDir};
use crate::task::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOutcome {
    pub dir: PathBuf,
    pub checks: Vec<CheckResult>,
}

/// A scored group with advantages over `|V| <= 16`, `d <= 8`, `|y| <= 6`,
/// with its contexts registered. With `distinct_first`, no two responses
/// share a first token.
pub fn random_instance(rng: &mut ChaCha8Rng, distinct_first: bool) -> (PolicyParams, RolloutGroup) {
    let v = rng.random_range(3..=16usize);
    let d = rng.random_range(2..=8usize);
    let g = rng.random_range(2..=v.min(8));
    let firsts: Vec<TokenId> = if distinct_first {
        sample(rng, v, g).into_iter().map(|t| t as TokenId).collect()
    } else {
        (0..g).map(|_| rng.random_range(0..v as TokenId)).collect()
    };
    let n_plus = rng.random_range(1..g);
    let question = QuestionId(rng.random());
    let responses = firsts
        .iter()
        .enumerate()
        .map(|(i, &first)| {
            let len = rng.random_range(1..=6usize);
            let mut tokens = vec![first];
            tokens.extend((1..len).map(|_| rng.random_range(0..v as TokenId)));
            Response::scored(tokens, i < n_plus)
        })
        .collect();
    let group = RolloutGroup::new(question, responses, 0);
    let group = compute_advantages(&group, VarianceMode::Population).expect("mixed rewards by construction");
    let mut params = PolicyParams::random(v, d, rng.random()).expect("valid shape");
    group.register_contexts(&mut params);
    (params, group)
}

/// Largest `|analytic - numeric| / (abs + rel * |numeric|)` over every
/// parameter the sequence touches; at most 1 means the check holds.
fn finite_difference_violation(params: &PolicyParams, question: QuestionId, y: &[TokenId]) -> lld_core::Result<f64> {
    const STEP: f64 = 1e-5;
    const REL: f64 = 1e-5;
    const ABS: f64 = 1e-8;
    let grad = params.grad_log_likelihood(question, y)?;
    let ll = |p: &PolicyParams| p.sequence_log_likelihood(question, y);
    let mut worst: f64 = 0.0;
    let mut record = |analytic: f64, numeric: f64| worst = worst.max((analytic - numeric).abs() / (ABS + REL * numeric.abs()));
    let d = params.dim();
    for t in 0..params.vocab_size() as TokenId {
        for c in 0..d {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut row = params.w_row(t).to_vec();
            row[c] += STEP;
            plus.set_w_row(t, &row)?;
            row[c] -= 2.0 * STEP;
            minus.set_w_row(t, &row)?;
            record(grad.dw_row(t)[c], (ll(&plus)? - ll(&minus)?) / (2.0 * STEP));
        }
    }
    for k in 0..y.len() {
        let key = ContextKey::new(question, &y[..k]);
        let h = params.embedding(&key)?.to_vec();
        let analytic = grad.dh_entry(&key).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; d]);
        for c in 0..d {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut e = h.clone();
            e[c] += STEP;
            plus.insert_embedding(key.clone(), e.clone())?;
            e[c] -= 2.0 * STEP;
            minus.insert_embedding(key.clone(), e)?;
            record(analytic[c], (ll(&plus)? - ll(&minus)?) / (2.0 * STEP));
        }
    }
    Ok(worst)
}

/// Single-token group of random size `2..=64` with mixed rewards.
fn random_reward_group(rng: &mut ChaCha8Rng) -> lld_core::Result<RolloutGroup> {
    let g = rng.random_range(2..=64usize);
    let n_plus = rng.random_range(1..g);
    let responses = (0..g).map(|i| Response::scored(vec![0], i < n_plus)).collect();
    compute_advantages(&RolloutGroup::new(QuestionId(0), responses, 0), VarianceMode::Population)
}

fn unnormalized() -> UpdateConfig {
    UpdateConfig { length_norm: false, ..UpdateConfig::default() }
}

fn check(
    name: &'static str,
    instances: usize,
    tolerance: f64,
    seed: u64,
    mut error: impl FnMut(&mut ChaCha8Rng) -> lld_core::Result<f64>,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name, 0));
    let mut max_error: f64 = 0.0;
    for _ in 0..instances {
        let e = error(&mut rng).map_err(HarnessError::model(0))?;
        // NaN must fail the check rather than vanish in `max`.
        max_error = if e.is_nan() { f64::NAN } else { max_error.max(e) };
        if max_error.is_nan() {
            break;
        }
    }
    Ok(CheckResult { name, instances, max_error, tolerance })
}

/// Runs every identity check with streams derived from `seed`.
pub fn identity_checks(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check("gradient_finite_difference", 100, 1.0, seed, |rng| {
            let (params, group) = random_instance(rng, false);
            let i = rng.random_range(0..group.size());
            finite_difference_violation(&params, group.question, &group.responses[i].tokens)
        })?,
        check("surrogate_equals_group_objective", 50, 1e-10, seed, |rng| {
            let (params, group) = random_instance(rng, false);
            let surrogate = grpo_objective_gradient(&params, &params, &group, &unnormalized())?;
            surrogate.max_abs_diff(&group_preference_gradient(&params, &params, &group, &unnormalized())?)
        })?,
        check("decomposition_identity", 50, 1e-8, seed, |rng| {
            let (params, group) = random_instance(rng, true);
            let i = group.positive_indices()[0];
            let direction = group_preference_gradient(&params, &params, &group, &unnormalized())?;
            let inner = params.grad_log_likelihood(group.question, &group.responses[i].tokens)?.dot(&direction)?;
            Ok((term_decomposition(&params, &group, i)?.total() - inner).abs())
        })?,
        check("embedding_score_identity", 50, 1e-10, seed, |rng| {
            let (params, group) = random_instance(rng, true);
            let i = group.positive_indices()[0];
            Ok((gwhes(&params, &group, i)? - term_decomposition(&params, &group, i)?.embedding_score()).abs())
        })?,
        check("token_scores_fast_equals_naive", 25, 1e-9, seed, |rng| {
            let (params, group) = random_instance(rng, false);
            let naive = nthr_scores(&params, &group)?;
            let fast = fast_nthr(&params, &group, &FastPathConfig::default())?;
            let mut worst: f64 = 0.0;
            for (a, b) in naive.negatives.iter().zip(&fast.negatives) {
                for (x, y) in a.s_minus.iter().zip(&b.s_minus) {
                    worst = worst.max((x - y).abs());
                }
            }
            for (a, b) in naive.positives.iter().zip(&fast.positives) {
                worst = worst.max((a.value - b.value).abs());
            }
            Ok(worst)
        })?,
        check("advantage_sum", 1000, 1e-10, seed, |rng| {
            let group = random_reward_group(rng)?;
            Ok(group.advantages()?.iter().sum::<f64>().abs())
        })?,
        check("advantage_balance", 1000, 1e-12, seed, |rng| {
            let group = random_reward_group(rng)?;
            let (pp, pm) = group_weights(group.success_rate()?)?;
            Ok((pp * group.n_plus() as f64 - pm * group.n_minus() as f64).abs())
        })?,
        check("threshold_sentinels", 50, 0.0, seed, |rng| {
            let (params, group) = random_instance(rng, false);
            let opts = ProbeOptions::default();
            let grad = |variant, beta| probe_gradient(&params, &group, &UpdateConfig { variant, beta, ..UpdateConfig::default() }, &opts);
            let none = grad(Variant::Nthr, f64::INFINITY)?.0.max_abs_diff(&grad(Variant::Grpo, 1.0)?.0)?;
            let all = grad(Variant::Nthr, f64::NEG_INFINITY)?.0.max_abs_diff(&grad(Variant::PosOnly, 1.0)?.0)?;
            Ok(none.max(all))
        })?,
        check("positive_only_first_order_ascent", 50, 1e-12, seed, |rng| {
            let (params, group) = random_instance(rng, false);
            let cfg = UpdateConfig { variant: Variant::PosOnly, ..UpdateConfig::default() };
            let (grad, _, _) = probe_gradient(&params, &group, &cfg, &ProbeOptions::default())?;
            Ok((-first_order_rate(&params, &group, &grad)?).max(0.0))
        })?,
    ])
}

const COLUMNS: Columns = &[
    ("check", "identity being compared"),
    ("instances", "random instances"),
    ("max_error", "largest discrepancy"),
    ("tolerance", "allowed discrepancy"),
    ("passed", "1 if max_error <= tolerance"),
];

/// Writes `validate.csv`; fails with a validation error after writing when
/// any check does not hold.
pub fn run_validation(cfg: &ExperimentConfig) -> Result<ValidationOutcome> {
    let checks = identity_checks(cfg.seed)?;
    let mut dir = RunDir::create(cfg, "validate")?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.name.to_string(),
                c.instances.to_string(),
                fmt_f64(c.max_error),
                fmt_f64(c.tolerance),
                u8::from(c.passed()).to_string(),
            ]
        })
        .collect();
    dir.csv("validate.csv", COLUMNS, &rows)?;
    let dir = dir.finish(cfg)?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if !failed.is_empty() {
        return Err(HarnessError::Validation(failed.join(", ")));
    }
    Ok(ValidationOutcome { dir, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_instances_respect_their_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (params, group) = random_instance(&mut rng, true);
            assert!(params.vocab_size() <= 16 && params.dim() <= 8);
            assert!(group.responses.iter().all(|r| (1..=6).contains(&r.len())));
            assert!(group.n_plus() > 0 && group.n_minus() > 0);
            assert!(lld_core::dynamics::has_distinct_first_tokens(&group));
        }
    }

    #[test]
    fn nan_errors_fail_the_check() {
        let r = check("nan", 3, 1.0, 0, |_| Ok(f64::NAN)).unwrap();
        assert!(!r.passed());
    }
}
