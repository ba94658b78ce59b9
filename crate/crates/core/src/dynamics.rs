//! Single-step probes of how an update moves the likelihood of correct
//! responses, the four-term decomposition of that movement, and ranking
//! diagnostics over questions.
//!
//! A probe clones the parameters, applies one ascent step and compares
//! log-likelihoods; the caller's parameters are never modified, so every
//! variant starts from the same state.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::linalg::{dot, norm_sq};
use crate::model::{ContextKey, ParamGradient, PolicyParams, QuestionId};
use crate::nthr::{alpha_weight, fast_nthr, gwhes_score, select_tokens, FastPathConfig, NthrReport};
use crate::objective::{apply_update, grpo_gradient, make_mask, UpdateConfig, Variant};
use crate::rollout::{group_weights, RolloutGroup};

/// `ln pi_after(y_i) - ln pi_before(y_i)` for every positive response `i`.
pub fn per_response_delta(before: &PolicyParams, after: &PolicyParams, group: &RolloutGroup) -> Result<Vec<(usize, f64)>> {
    group
        .positive_indices()
        .into_iter()
        .map(|i| {
            let y = &group.responses[i].tokens;
            Ok((i, after.sequence_log_likelihood(group.question, y)? - before.sequence_log_likelihood(group.question, y)?))
        })
        .collect()
}

/// Mean log-likelihood change over the positive responses.
pub fn delta_likelihood(before: &PolicyParams, after: &PolicyParams, group: &RolloutGroup) -> Result<f64> {
    let deltas = per_response_delta(before, after, group)?;
    if deltas.is_empty() {
        return Err(LabError::NoPositives);
    }
    Ok(deltas.iter().map(|(_, d)| d).sum::<f64>() / deltas.len() as f64)
}

/// Likelihood displacement: the change falls short of `eps_lld` (strictly).
pub fn lld_classify(delta: f64, eps_lld: f64) -> bool {
    delta < eps_lld
}

/// Mean over positives of `<grad ln pi(y_i), direction>`: the first-order
/// rate of [`delta_likelihood`] along `direction`.
pub fn first_order_rate(params: &PolicyParams, group: &RolloutGroup, direction: &ParamGradient) -> Result<f64> {
    let positives = group.positive_indices();
    if positives.is_empty() {
        return Err(LabError::NoPositives);
    }
    let mut total = 0.0;
    for &i in &positives {
        total += params.grad_log_likelihood(group.question, &group.responses[i].tokens)?.dot(direction)?;
    }
    Ok(total / positives.len() as f64)
}

/// The four parts of `<grad ln pi(y_i), p+ sum grad ln pi(y+) - p- sum grad ln pi(y-)>`
/// for a group whose responses all start with different tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionTerms {
    /// (I) `p+ sum_k sum_i' sum_k'' alpha+ <h, h>`
    pub positive_embedding: f64,
    /// (II) `p- sum_k sum_j sum_k' alpha- <h, h>`
    pub negative_embedding: f64,
    /// (III) first-token unembedding term at the shared root context.
    pub first_token: f64,
    /// (IV) `p+ sum_{k >= 2} ||w_{y_k} - sum_z pi_z w_z||^2`
    pub continuation: f64,
}

impl DecompositionTerms {
    /// `I - II + III + IV`
    pub fn total(&self) -> f64 {
        self.positive_embedding - self.negative_embedding + self.first_token + self.continuation
    }

    /// `II - I`, the embedding score of the response.
    pub fn embedding_score(&self) -> f64 {
        self.negative_embedding - self.positive_embedding
    }
}

/// Decomposition with the group's own weights.
pub fn term_decomposition(params: &PolicyParams, group: &RolloutGroup, i: usize) -> Result<DecompositionTerms> {
    let (pp, pm) = group_weights(group.mixed_success_rate()?)?;
    term_decomposition_weighted(params, group, i, pp, pm)
}

/// Decomposition under explicit weights. (III) is evaluated in its general
/// form, which reduces to the usual first-token expression when
/// `p+ N+ = p- N-`.
pub fn term_decomposition_weighted(params: &PolicyParams, group: &RolloutGroup, i: usize, p_plus: f64, p_minus: f64) -> Result<DecompositionTerms> {
    if !group.is_scored() {
        return Err(LabError::Unscored);
    }
    if i >= group.size() || !group.responses[i].is_positive() {
        return Err(LabError::InvalidArgument(format!("response {i} is not a positive response")));
    }
    check_distinct_first_tokens(group)?;
    let x = group.question;
    let yi = &group.responses[i].tokens;
    let key = |y: &[u32], k: usize| ContextKey::new(x, &y[..k]);

    let embedding_sum = |others: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for k in 0..yi.len() {
            let hk = params.embedding(&key(yi, k))?;
            for &o in others {
                let yo = &group.responses[o].tokens;
                for k2 in 0..yo.len() {
                    let alpha = alpha_weight(params, &key(yi, k), yi[k], &key(yo, k2), yo[k2])?;
                    total += alpha * dot(hk, params.embedding(&key(yo, k2))?);
                }
            }
        }
        Ok(total)
    };
    let positive_embedding = p_plus * embedding_sum(&group.positive_indices())?;
    let negative_embedding = p_minus * embedding_sum(&group.negative_indices())?;

    let root = ContextKey::root(x);
    let mean_root = params.mean_unembedding(&params.next_token_distribution(&root)?);
    let centred = |t: u32| -> Vec<f64> { params.w_row(t).iter().zip(&mean_root).map(|(w, m)| w - m).collect() };
    let mut pull = vec![0.0; params.dim()];
    for (idx, r) in group.responses.iter().enumerate() {
        let weight = if group.responses[idx].is_positive() { p_plus } else { -p_minus };
        crate::linalg::axpy(weight, &centred(r.tokens[0]), &mut pull);
    }
    let first_token = dot(&centred(yi[0]), &pull);

    let mut continuation = 0.0;
    for k in 1..yi.len() {
        let ctx = key(yi, k);
        let mean = params.mean_unembedding(&params.next_token_distribution(&ctx)?);
        let diff: Vec<f64> = params.w_row(yi[k]).iter().zip(&mean).map(|(w, m)| w - m).collect();
        continuation += norm_sq(&diff);
    }
    Ok(DecompositionTerms { positive_embedding, negative_embedding, first_token, continuation: p_plus * continuation })
}

/// Whether every response starts with a different token.
pub fn has_distinct_first_tokens(group: &RolloutGroup) -> bool {
    check_distinct_first_tokens(group).is_ok()
}

fn check_distinct_first_tokens(group: &RolloutGroup) -> Result<()> {
    for a in 0..group.size() {
        for b in a + 1..group.size() {
            if group.responses[a].tokens.first() == group.responses[b].tokens.first() {
                return Err(LabError::SharedFirstToken { first: a, second: b });
            }
        }
    }
    Ok(())
}

/// Settings of a probe that are not part of the update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub eps_lld: f64,
    /// Seed of the random mask; unused by the other variants.
    pub mask_seed: u64,
    pub fast: FastPathConfig,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { eps_lld: 0.0, mask_seed: 0, fast: FastPathConfig::default() }
    }
}

/// Outcome of one single-step probe.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub question: QuestionId,
    pub variant: Variant,
    pub lr: f64,
    pub delta: f64,
    pub per_response: Vec<(usize, f64)>,
    /// `lr` times the first-order rate.
    pub predicted: f64,
    /// Mean embedding score over positive responses.
    pub gwhes: f64,
    /// Decomposition for the first positive response when first tokens are distinct.
    pub terms: Option<DecompositionTerms>,
    pub lld_flag: bool,
    pub eps_lld: f64,
    /// Negative tokens whose advantage was re-weighted.
    pub modified_tokens: usize,
    pub nthr: Option<NthrReport>,
}

/// The variant's update direction at `theta_old`, with the selection report
/// for `RANDOM` and `NTHR`.
pub fn probe_gradient(params: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig, opts: &ProbeOptions) -> Result<(ParamGradient, Option<NthrReport>, usize)> {
    cfg.validate()?;
    let p = group.mixed_success_rate()?;
    let report = match cfg.variant {
        Variant::Random | Variant::Nthr => {
            let mut r = select_tokens(&fast_nthr(params, group, &opts.fast)?, cfg.beta)?;
            if cfg.variant == Variant::Nthr {
                r.eta = Some(cfg.eta.resolve(p));
            }
            Some(r)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.mask_seed);
    let mask = make_mask(group, cfg, report.as_ref(), &mut rng)?;
    let grad = grpo_gradient(params, group, cfg, &mask)?;
    Ok((grad, report, mask.modified_count()))
}

/// Clones `params`, applies one step of the variant at `cfg.lr` and measures
/// the change in positive-response likelihood.
pub fn single_step_probe(params: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig, opts: &ProbeOptions) -> Result<UpdateReport> {
    let (grad, nthr, modified_tokens) = probe_gradient(params, group, cfg, opts)?;
    let after = apply_update(params, &grad, cfg.lr)?;
    let per_response = per_response_delta(params, &after, group)?;
    let delta = per_response.iter().map(|(_, d)| d).sum::<f64>() / per_response.len() as f64;
    let predicted = cfg.lr * first_order_rate(params, group, &grad)?;
    let terms = if has_distinct_first_tokens(group) {
        Some(term_decomposition(params, group, group.positive_indices()[0])?)
    } else {
        None
    };
    Ok(UpdateReport {
        question: group.question,
        variant: cfg.variant,
        lr: cfg.lr,
        delta,
        per_response,
        predicted,
        gwhes: gwhes_score(params, group)?.mean,
        terms,
        lld_flag: lld_classify(delta, opts.eps_lld),
        eps_lld: opts.eps_lld,
        modified_tokens,
        nthr,
    })
}

/// Step-size control for probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrCalibration {
    /// Allowed relative gap between the measured change and its first-order prediction.
    pub tolerance: f64,
    pub max_halvings: u32,
}

impl Default for LrCalibration {
    fn default() -> Self {
        Self { tolerance: 0.05, max_halvings: 40 }
    }
}

/// Largest `start / 2^n` at which every direction satisfies
/// `|delta - lr * rate| <= tolerance * |delta|`.
pub fn calibrate_lr(params: &PolicyParams, group: &RolloutGroup, directions: &[&ParamGradient], start: f64, cal: &LrCalibration) -> Result<f64> {
    if start == 0.0 {
        return Ok(0.0);
    }
    let rates: Vec<f64> = directions.iter().map(|g| first_order_rate(params, group, g)).collect::<Result<_>>()?;
    let mut lr = start;
    for _ in 0..=cal.max_halvings {
        let mut ok = true;
        for (g, rate) in directions.iter().zip(&rates) {
            let delta = delta_likelihood(params, &apply_update(params, g, lr)?, group)?;
            let gap = (delta - lr * rate).abs();
            if gap > cal.tolerance * delta.abs() && !(delta == 0.0 && *rate == 0.0) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(lr);
        }
        lr *= 0.5;
    }
    Err(LabError::Calibration(cal.max_halvings))
}

/// Two orderings of the same question ids and a cut-off `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingPair {
    first: Vec<QuestionId>,
    second: Vec<QuestionId>,
    k: usize,
}

impl RankingPair {
    pub fn new(first: Vec<QuestionId>, second: Vec<QuestionId>, k: usize) -> Result<Self> {
        let a: BTreeSet<_> = first.iter().collect();
        let b: BTreeSet<_> = second.iter().collect();
        if a.len() != first.len() || b.len() != second.len() || a != b {
            return Err(LabError::InvalidArgument("rankings must be permutations of the same ids".into()));
        }
        if k == 0 {
            return Err(LabError::InvalidArgument("K must be positive".into()));
        }
        if k > first.len() {
            return Err(LabError::InvalidArgument(format!("K = {k} exceeds {} ranked questions", first.len())));
        }
        Ok(Self { first, second, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// `|top_K(first) ∩ top_K(second)| / K`
pub fn topk_overlap(pair: &RankingPair) -> f64 {
    let top: BTreeSet<_> = pair.first[..pair.k].iter().collect();
    let hits = pair.second[..pair.k].iter().filter(|q| top.contains(q)).count();
    hits as f64 / pair.k as f64
}

/// Expected overlap of two independent uniform rankings: `K / n`.
pub fn random_overlap_baseline(k: usize, n: usize) -> f64 {
    k as f64 / n as f64
}

/// Ids ordered by value, ties broken by id.
pub fn rank_by(values: &[(QuestionId, f64)], descending: bool) -> Vec<QuestionId> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        (if descending { ord.reverse() } else { ord }).then(a.0.cmp(&b.0))
    });
    sorted.into_iter().map(|(q, _)| q).collect()
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = rank;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::InvalidArgument("spearman needs two equal-length samples of size >= 2".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(LabError::InvalidArgument("spearman is undefined for a constant sample".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nthr::gwhes;
    use crate::objective::{TokenAdvantageMask, EtaPolicy};
    use crate::rollout::{compute_advantages, Response, VarianceMode};
    use proptest::prelude::*;

    const Q: QuestionId = QuestionId(2);

    fn instance(seed: u64, rewards: &[bool], seqs: &[Vec<u32>]) -> (PolicyParams, RolloutGroup) {
        let responses = seqs.iter().zip(rewards).map(|(y, &r)| Response::scored(y.clone(), r)).collect();
        let group = compute_advantages(&RolloutGroup::new(Q, responses, 0), VarianceMode::Population).unwrap();
        let mut params = PolicyParams::random(8, 4, seed).unwrap();
        group.register_contexts(&mut params);
        (params, group)
    }

    fn distinct(seed: u64) -> (PolicyParams, RolloutGroup) {
        instance(seed, &[true, false, true, false], &[vec![0, 3, 3], vec![1, 3], vec![2, 5, 0, 7], vec![4]])
    }

    #[test]
    fn identical_parameters_give_zero_change() {
        let (params, group) = distinct(1);
        assert_eq!(delta_likelihood(&params, &params, &group).unwrap(), 0.0);
    }

    #[test]
    fn mean_of_per_response_changes() {
        // Two positives whose log-likelihoods move by +0.4 and -0.2.
        let (params, group) = instance(2, &[true, true, false], &[vec![0], vec![1], vec![2]]);
        let key = ContextKey::root(Q);
        let dist = params.next_token_distribution(&key).unwrap();
        let logits = params.logits(&key).unwrap();
        let mut target = logits.clone();
        target[0] += 0.4;
        target[1] -= 0.2;
        // Keep the normaliser fixed by moving the remaining mass onto token 2.
        let lse = |l: &[f64]| l.iter().map(|v| v.exp()).sum::<f64>().ln();
        let rest_old: f64 = dist.probs()[2..].iter().sum();
        let rest_new = rest_old - dist.probs()[0] * (0.4f64.exp() - 1.0) - dist.probs()[1] * ((-0.2f64).exp() - 1.0);
        let factor = rest_new / rest_old;
        for v in target.iter_mut().skip(2) {
            *v += factor.ln();
        }
        assert!((lse(&target) - lse(&logits)).abs() < 1e-12);
        let h = params.embedding(&key).unwrap().to_vec();
        let hh = norm_sq(&h);
        let mut after = params.clone();
        for t in 0..8u32 {
            let shift = (target[t as usize] - logits[t as usize]) / hh;
            let row: Vec<f64> = params.w_row(t).iter().zip(&h).map(|(w, x)| w + shift * x).collect();
            after.set_w_row(t, &row).unwrap();
        }
        let per = per_response_delta(&params, &after, &group).unwrap();
        assert!((per[0].1 - 0.4).abs() < 1e-12 && (per[1].1 + 0.2).abs() < 1e-12);
        assert!((delta_likelihood(&params, &after, &group).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn classification_is_strict() {
        assert!(lld_classify(-0.3, 0.0));
        assert!(!lld_classify(0.5, 0.01));
        assert!(!lld_classify(0.0, 0.0));
    }

    #[test]
    fn zero_step_probe_flags_with_positive_threshold() {
        let (params, group) = distinct(3);
        let cfg = UpdateConfig { lr: 0.0, ..Default::default() };
        let opts = ProbeOptions { eps_lld: 1e-3, ..Default::default() };
        let report = single_step_probe(&params, &group, &cfg, &opts).unwrap();
        assert_eq!(report.delta, 0.0);
        assert!(report.lld_flag);
    }

    #[test]
    fn positive_only_step_does_not_lower_likelihood() {
        for seed in 0..20 {
            let (params, group) = distinct(seed);
            let cfg = UpdateConfig { lr: 1e-6, variant: Variant::PosOnly, ..Default::default() };
            let report = single_step_probe(&params, &group, &cfg, &ProbeOptions::default()).unwrap();
            assert!(report.delta >= -1e-12, "seed {seed}: {}", report.delta);
        }
    }

    #[test]
    fn decomposition_matches_inner_product_with_preference_gradient() {
        for seed in 0..10 {
            let (params, group) = distinct(seed);
            let cfg = UpdateConfig { length_norm: false, ..Default::default() };
            let direction = grpo_gradient(&params, &group, &cfg, &TokenAdvantageMask::ones(&group)).unwrap();
            for i in group.positive_indices() {
                let terms = term_decomposition(&params, &group, i).unwrap();
                let target = params.grad_log_likelihood(Q, &group.responses[i].tokens).unwrap().dot(&direction).unwrap();
                assert!((terms.total() - target).abs() < 1e-10, "seed {seed}");
                assert!((terms.embedding_score() - gwhes(&params, &group, i).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_embeddings_leave_only_unembedding_terms() {
        let (base, group) = distinct(4);
        let contexts: Vec<_> = base.contexts().map(|(k, _)| (k.clone(), vec![0.0; 4])).collect();
        let params = PolicyParams::from_parts(8, 4, base.w().to_vec(), contexts).unwrap();
        let terms = term_decomposition(&params, &group, 0).unwrap();
        assert_eq!(terms.positive_embedding, 0.0);
        assert_eq!(terms.negative_embedding, 0.0);
        assert!(terms.continuation >= 0.0);
    }

    #[test]
    fn zero_negative_weight_removes_term_two() {
        let (params, group) = distinct(5);
        let (pp, _) = group_weights(0.5).unwrap();
        let terms = term_decomposition_weighted(&params, &group, 0, pp, 0.0).unwrap();
        assert_eq!(terms.negative_embedding, 0.0);
    }

    #[test]
    fn shared_first_token_is_rejected() {
        let (params, group) = instance(6, &[true, false], &[vec![1, 2], vec![1, 3]]);
        assert_eq!(term_decomposition(&params, &group, 0), Err(LabError::SharedFirstToken { first: 0, second: 1 }));
    }

    #[test]
    fn nthr_with_nothing_selected_equals_grpo() {
        let (params, group) = distinct(7);
        let opts = ProbeOptions::default();
        let grpo = single_step_probe(&params, &group, &UpdateConfig::default(), &opts).unwrap();
        let cfg = UpdateConfig { variant: Variant::Nthr, beta: f64::INFINITY, ..Default::default() };
        let nthr = single_step_probe(&params, &group, &cfg, &opts).unwrap();
        assert_eq!(nthr.delta, grpo.delta);
        assert_eq!(nthr.modified_tokens, 0);
    }

    #[test]
    fn nthr_selecting_everything_with_zero_eta_equals_positive_only() {
        let (params, group) = distinct(8);
        let opts = ProbeOptions::default();
        let pos = single_step_probe(&params, &group, &UpdateConfig { variant: Variant::PosOnly, ..Default::default() }, &opts).unwrap();
        let cfg = UpdateConfig { variant: Variant::Nthr, beta: f64::NEG_INFINITY, eta: EtaPolicy::Fixed(0.0), ..Default::default() };
        let nthr = single_step_probe(&params, &group, &cfg, &opts).unwrap();
        assert_eq!(nthr.delta, pos.delta);
    }

    #[test]
    fn calibrated_step_meets_first_order_tolerance() {
        let (params, group) = distinct(9);
        let cfg = UpdateConfig::default();
        let (grad, _, _) = probe_gradient(&params, &group, &cfg, &ProbeOptions::default()).unwrap();
        let cal = LrCalibration::default();
        let lr = calibrate_lr(&params, &group, &[&grad], 50.0, &cal).unwrap();
        assert!(lr < 50.0);
        let delta = delta_likelihood(&params, &apply_update(&params, &grad, lr).unwrap(), &group).unwrap();
        let rate = first_order_rate(&params, &group, &grad).unwrap();
        assert!((delta - lr * rate).abs() <= 0.05 * delta.abs());
        assert_eq!(calibrate_lr(&params, &group, &[&grad], 0.0, &cal).unwrap(), 0.0);
    }

    #[test]
    fn overlap_edge_cases() {
        let ids: Vec<QuestionId> = (0..6).map(QuestionId).collect();
        let same = RankingPair::new(ids.clone(), ids.clone(), 3).unwrap();
        assert_eq!(topk_overlap(&same), 1.0);
        let reversed: Vec<QuestionId> = ids.iter().rev().copied().collect();
        assert_eq!(topk_overlap(&RankingPair::new(ids.clone(), reversed.clone(), 3).unwrap()), 0.0);
        assert_eq!(topk_overlap(&RankingPair::new(ids.clone(), reversed, 6).unwrap()), 1.0);
        assert!(RankingPair::new(ids.clone(), ids.clone(), 0).is_err());
        assert!(RankingPair::new(ids.clone(), ids[..5].to_vec(), 2).is_err());
        assert_eq!(random_overlap_baseline(10, 40), 0.25);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(), -1.0);
        let ranked = rank_by(&[(QuestionId(1), 0.5), (QuestionId(0), 0.5), (QuestionId(2), 0.9)], true);
        assert_eq!(ranked, vec![QuestionId(2), QuestionId(0), QuestionId(1)]);
    }

    #[test]
    fn spearman_matches_frozen_reference() {
        // Reference from an independent rank-correlation routine with tie averaging.
        let a = [0.3, -1.2, 0.3, 2.5, 0.0, 1.1];
        let b = [1.0, 0.2, -0.4, 3.0, 0.2, 0.9];
        assert!((spearman(&a, &b).unwrap() - 0.647_058_823_529_411_8).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn overlap_is_a_fraction(perm in Just((0u64..12).collect::<Vec<_>>()).prop_shuffle(), k in 1usize..12) {
            let ids: Vec<QuestionId> = (0..12).map(QuestionId).collect();
            let other: Vec<QuestionId> = perm.into_iter().map(QuestionId).collect();
            let v = topk_overlap(&RankingPair::new(ids, other, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!((v * k as f64).round() / k as f64, v);
        }
    }
}
