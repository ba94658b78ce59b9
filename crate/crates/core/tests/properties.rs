//! Cross-module properties of the model, objective, scoring and probe code.

use lld_core::dynamics::{first_order_rate, random_overlap_baseline, single_step_probe, spearman, topk_overlap, ProbeOptions, RankingPair};
use lld_core::linalg::dot;
use lld_core::model::{ContextKey, PolicyParams, QuestionId, TokenId};
use lld_core::nthr::{gwhes_score, positive_mutual_influence};
use lld_core::objective::{grpo_gradient, make_mask, EtaPolicy, TokenAdvantageMask, UpdateConfig, Variant};
use lld_core::rollout::{compute_advantages, Response, RolloutGroup, VarianceMode};
use lld_core::snapshot::{read_params, write_params};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const Q: QuestionId = QuestionId(3);

/// Mixed-reward group over `|V| <= 12`, `d <= 6`, `|y| <= 5`, contexts registered.
fn instance(seed: u64) -> (PolicyParams, RolloutGroup) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: usize = rng.random_range(3..=12);
    let d: usize = rng.random_range(1..=6);
    let g: usize = rng.random_range(2..=6);
    let n_plus = rng.random_range(1..g);
    let responses = (0..g)
        .map(|i| {
            let len = rng.random_range(1..=5);
            Response::scored((0..len).map(|_| rng.random_range(0..v as TokenId)).collect(), i < n_plus)
        })
        .collect();
    let group = compute_advantages(&RolloutGroup::new(Q, responses, 0), VarianceMode::Population).unwrap();
    let mut params = PolicyParams::random(v, d, rng.random()).unwrap();
    group.register_contexts(&mut params);
    (params, group)
}

fn scaled_params(v: usize, d: usize, seed: u64, scale: f64) -> PolicyParams {
    let base = PolicyParams::random(v, d, seed).unwrap();
    let w: Vec<f64> = base.w().iter().map(|x| x * scale).collect();
    PolicyParams::from_parts(v, d, w, Vec::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_normalized(seed in any::<u64>(), scale in 0.0f64..50.0, prefix in proptest::collection::vec(0u32..9, 0..4)) {
        let mut params = scaled_params(9, 4, seed, scale);
        let key = ContextKey::new(Q, &prefix);
        params.ensure_context(&key);
        let dist = params.next_token_distribution(&key).unwrap();
        prop_assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(dist.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn common_row_shift_leaves_distributions_unchanged(seed in any::<u64>(), shift in proptest::collection::vec(-3.0f64..3.0, 4)) {
        let mut params = PolicyParams::random(7, 4, seed).unwrap();
        let key = ContextKey::new(Q, &[1, 2]);
        params.ensure_context(&key);
        let before = params.next_token_distribution(&key).unwrap();
        let mut shifted = params.clone();
        for t in 0..7 {
            let row: Vec<f64> = params.w_row(t).iter().zip(&shift).map(|(w, c)| w + c).collect();
            shifted.set_w_row(t, &row).unwrap();
        }
        let after = shifted.next_token_distribution(&key).unwrap();
        for (a, b) in before.probs().iter().zip(after.probs()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>()) {
        let (params, group) = instance(seed);
        let y = &group.responses[0].tokens;
        let grad = params.grad_log_likelihood(Q, y).unwrap();
        let ll = |p: &PolicyParams| p.sequence_log_likelihood(Q, y).unwrap();
        let step = 1e-6;
        for t in 0..params.vocab_size() as TokenId {
            for c in 0..params.dim() {
                let mut row = params.w_row(t).to_vec();
                let (mut plus, mut minus) = (params.clone(), params.clone());
                row[c] += step;
                plus.set_w_row(t, &row).unwrap();
                row[c] -= 2.0 * step;
                minus.set_w_row(t, &row).unwrap();
                let numeric = (ll(&plus) - ll(&minus)) / (2.0 * step);
                prop_assert!((grad.dw_row(t)[c] - numeric).abs() <= 1e-8 + 1e-5 * numeric.abs());
            }
        }
    }

    #[test]
    fn positive_only_direction_never_lowers_correct_responses_at_first_order(seed in any::<u64>()) {
        let (params, group) = instance(seed);
        let cfg = UpdateConfig { variant: Variant::PosOnly, ..UpdateConfig::default() };
        let mask = make_mask(&group, &cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grad = grpo_gradient(&params, &group, &cfg, &mask).unwrap();
        prop_assert!(first_order_rate(&params, &group, &grad).unwrap() >= -1e-12);
    }

    #[test]
    fn clearing_one_token_changes_only_its_own_contributions(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let (params, group) = instance(seed);
        let cfg = UpdateConfig::default();
        let tokens: Vec<(usize, usize)> = group
            .responses
            .iter()
            .enumerate()
            .flat_map(|(i, r)| (0..r.len()).map(move |k| (i, k)))
            .collect();
        let (j, k) = tokens[pick.index(tokens.len())];
        let full = TokenAdvantageMask::ones(&group);
        let mut cleared = full.clone();
        cleared.set(j, k, 0.0);
        let a = grpo_gradient(&params, &group, &cfg, &full).unwrap();
        let b = grpo_gradient(&params, &group, &cfg, &cleared).unwrap();
        // Expected difference: exactly the removed token's own term.
        let y = &group.responses[j].tokens;
        let key = ContextKey::new(Q, &y[..k]);
        let coef = group.advantages().unwrap()[j] / group.total_tokens() as f64;
        let mut expected = lld_core::ParamGradient::zeros(params.vocab_size(), params.dim());
        expected.accumulate_token(&params, &key, y[k], coef).unwrap();
        let mut diff = a.clone();
        diff.add_scaled(&b, -1.0).unwrap();
        prop_assert!(diff.max_abs_diff(&expected).unwrap() <= 1e-12);
        for (other, _) in diff.dh() {
            if *other != key {
                prop_assert!(diff.dh_entry(other).unwrap().iter().all(|x| x.abs() <= 1e-12));
            }
        }
    }

    #[test]
    fn snapshot_preserves_probe_results(seed in 0u64..200) {
        let (params, group) = instance(seed);
        let mut buf = Vec::new();
        write_params(&params, &mut buf).unwrap();
        let back = read_params(buf.as_slice()).unwrap();
        let cfg = UpdateConfig::default();
        let a = single_step_probe(&params, &group, &cfg, &ProbeOptions::default()).unwrap();
        let b = single_step_probe(&back, &group, &cfg, &ProbeOptions::default()).unwrap();
        prop_assert_eq!(a.delta.to_bits(), b.delta.to_bits());
    }
}

#[test]
fn shared_prefix_entry_moves_both_likelihoods() {
    let mut params = PolicyParams::random(6, 3, 4).unwrap();
    let (a, b) = (vec![2, 1, 0], vec![2, 1, 4]);
    params.ensure_sequence(Q, &a);
    params.ensure_sequence(Q, &b);
    let before = (params.sequence_log_likelihood(Q, &a).unwrap(), params.sequence_log_likelihood(Q, &b).unwrap());
    let key = ContextKey::new(Q, &[2, 1]);
    let moved: Vec<f64> = params.embedding(&key).unwrap().iter().map(|x| x + 0.5).collect();
    params.insert_embedding(key, moved).unwrap();
    assert_ne!(params.sequence_log_likelihood(Q, &a).unwrap(), before.0);
    assert_ne!(params.sequence_log_likelihood(Q, &b).unwrap(), before.1);
}

#[test]
fn positive_influence_matches_four_loop_evaluation() {
    for seed in 0..30 {
        let (params, group) = instance(seed);
        let influence = positive_mutual_influence(&params, &group).unwrap();
        let feature = |i: usize, k: usize| {
            let y = &group.responses[i].tokens;
            let key = ContextKey::new(Q, &y[..k]);
            let err = params.next_token_distribution(&key).unwrap().prediction_error(y[k]);
            (params.embedding(&key).unwrap().to_vec(), err)
        };
        for p in &influence {
            let target_len = group.responses[p.response].len();
            let mut total = 0.0;
            for k2 in 0..target_len {
                let (h2, e2) = feature(p.response, k2);
                for i in group.positive_indices() {
                    for k in 0..group.responses[i].len() {
                        let (h, e) = feature(i, k);
                        total += dot(&e, &e2) * dot(&h, &h2);
                    }
                }
            }
            assert!((p.value - total / target_len as f64).abs() <= 1e-10);
        }
    }
}

/// Negative responses reuse the positives' second token; the first negative's
/// second-step context embedding is placed `t` along the positives' sum.
fn overlap_family(t: f64) -> (PolicyParams, RolloutGroup) {
    let responses = vec![
        Response::scored(vec![1, 2, 7], true),
        Response::scored(vec![3, 2, 7], true),
        Response::scored(vec![4, 2, 7], false),
        Response::scored(vec![5, 6, 7], false),
    ];
    let group = compute_advantages(&RolloutGroup::new(Q, responses, 0), VarianceMode::Population).unwrap();
    let mut params = PolicyParams::random(8, 4, 23).unwrap();
    group.register_contexts(&mut params);
    let a = params.embedding(&ContextKey::new(Q, &[1])).unwrap().to_vec();
    let b = params.embedding(&ContextKey::new(Q, &[3])).unwrap().to_vec();
    let key = ContextKey::new(Q, &[4]);
    let moved: Vec<f64> = params.embedding(&key).unwrap().iter().zip(a.iter().zip(&b)).map(|(h, (x, y))| h + t * (x + y)).collect();
    params.insert_embedding(key, moved).unwrap();
    (params, group)
}

#[test]
fn embedding_score_ranks_likelihood_loss_across_an_overlap_family() {
    let (mut scores, mut deltas) = (Vec::new(), Vec::new());
    for n in 0..20 {
        let (params, group) = overlap_family(2.0 * n as f64 / 19.0);
        scores.push(gwhes_score(&params, &group).unwrap().mean);
        deltas.push(single_step_probe(&params, &group, &UpdateConfig::default(), &ProbeOptions::default()).unwrap().delta);
    }
    assert!(spearman(&scores, &deltas).unwrap() <= -0.9);
}

#[test]
fn strong_overlap_favours_positive_only_and_selection_over_grpo() {
    let (params, group) = overlap_family(6.0);
    let probe = |variant, eta| {
        let cfg = UpdateConfig { variant, eta, beta: 1.0, ..UpdateConfig::default() };
        single_step_probe(&params, &group, &cfg, &ProbeOptions::default()).unwrap()
    };
    let grpo = probe(Variant::Grpo, EtaPolicy::Fixed(0.0));
    let pos = probe(Variant::PosOnly, EtaPolicy::Fixed(0.0));
    let nthr = probe(Variant::Nthr, EtaPolicy::Fixed(0.0));
    assert!(pos.delta > grpo.delta);
    assert!(nthr.delta >= grpo.delta);
    assert!(nthr.modified_tokens > 0);
}

#[test]
fn shuffled_rankings_overlap_at_the_analytic_rate() {
    let n = 40;
    let ids: Vec<QuestionId> = (0..n).map(QuestionId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in [5, 10, 15] {
        let samples: Vec<f64> = (0..1000)
            .map(|_| {
                let mut perm = ids.clone();
                perm.shuffle(&mut rng);
                topk_overlap(&RankingPair::new(perm, ids.clone(), k).unwrap())
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let se = (var / samples.len() as f64).sqrt();
        assert!((mean - random_overlap_baseline(k, n as usize)).abs() <= 3.0 * se, "k={k} mean={mean} se={se}");
    }
}
