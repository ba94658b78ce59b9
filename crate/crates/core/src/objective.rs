//! The clipped GRPO surrogate, its group-preference reduction, closed-form
//! gradients and the four update variants.
//!
//! Probes evaluate gradients at `theta = theta_old`, where every likelihood
//! ratio is exactly 1 and clipping is inactive. The clipped values and their
//! general gradients are kept for value-level checks away from `theta_old`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{LabError, Result};
use crate::model::{ContextKey, ParamGradient, PolicyParams};
use crate::nthr::{eta_schedule, NthrReport};
use crate::rollout::{group_weights, RolloutGroup};

/// Update rule applied to the negative responses of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Grpo,
    PosOnly,
    Random,
    Nthr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Grpo, Variant::PosOnly, Variant::Random, Variant::Nthr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Grpo => "GRPO",
            Self::PosOnly => "POS_ONLY",
            Self::Random => "RANDOM",
            Self::Nthr => "NTHR",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| LabError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// Attenuation applied to selected negative tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaPolicy {
    Fixed(f64),
    /// `eta = p`
    SuccessRate,
    /// `eta = 1 - p`
    FailureRate,
    /// `eta = 2 |0.5 - p|`
    Balanced,
}

impl EtaPolicy {
    pub fn resolve(self, p: f64) -> f64 {
        match self {
            Self::Fixed(eta) => eta,
            Self::SuccessRate => p,
            Self::FailureRate => 1.0 - p,
            Self::Balanced => eta_schedule(p),
        }
    }
}

impl fmt::Display for EtaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(eta) => write!(f, "{eta}"),
            Self::SuccessRate => f.write_str("p"),
            Self::FailureRate => f.write_str("1-p"),
            Self::Balanced => f.write_str("balanced"),
        }
    }
}

impl FromStr for EtaPolicy {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "p" => Ok(Self::SuccessRate),
            "1-p" => Ok(Self::FailureRate),
            "balanced" => Ok(Self::Balanced),
            other => {
                let eta: f64 = other
                    .parse()
                    .map_err(|_| LabError::InvalidArgument(format!("unknown eta policy {other:?}")))?;
                if !(0.0..=1.0).contains(&eta) {
                    return Err(LabError::InvalidArgument(format!("fixed eta must lie in [0, 1], got {eta}")));
                }
                Ok(Self::Fixed(eta))
            }
        }
    }
}

/// Hyperparameters of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub clip_eps: f64,
    pub lr: f64,
    pub variant: Variant,
    /// Divide by the group's total token count.
    pub length_norm: bool,
    pub eta: EtaPolicy,
    /// Threshold scale; `-inf` selects every negative token, `+inf` none.
    pub beta: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2, lr: 1e-4, variant: Variant::Grpo, length_norm: true, eta: EtaPolicy::Fixed(0.0), beta: 1.0 }
    }
}

impl UpdateConfig {
    /// A zero learning rate is accepted so that null probes can be expressed.
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return Err(LabError::InvalidArgument(format!("clip range must be positive, got {}", self.clip_eps)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LabError::InvalidArgument(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if let EtaPolicy::Fixed(eta) = self.eta {
            if !(0.0..=1.0).contains(&eta) {
                return Err(LabError::InvalidArgument(format!("eta must lie in [0, 1], got {eta}")));
            }
        }
        if self.beta.is_nan() {
            return Err(LabError::InvalidArgument("beta is NaN".into()));
        }
        Ok(())
    }

    fn normalizer(&self, group: &RolloutGroup) -> f64 {
        if self.length_norm {
            group.total_tokens() as f64
        } else {
            1.0
        }
    }
}

/// Per-token multiplier on the advantage: 1, `eta` or 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAdvantageMask {
    weights: Vec<Vec<f64>>,
}

impl TokenAdvantageMask {
    pub fn ones(group: &RolloutGroup) -> Self {
        Self { weights: group.responses.iter().map(|r| vec![1.0; r.len()]).collect() }
    }

    pub fn zeros(group: &RolloutGroup) -> Self {
        Self { weights: group.responses.iter().map(|r| vec![0.0; r.len()]).collect() }
    }

    pub fn get(&self, response: usize, position: usize) -> f64 {
        self.weights[response][position]
    }

    pub fn set(&mut self, response: usize, position: usize, value: f64) {
        self.weights[response][position] = value;
    }

    pub fn response(&self, response: usize) -> &[f64] {
        &self.weights[response]
    }

    /// Number of multipliers different from 1.
    pub fn modified_count(&self) -> usize {
        self.weights.iter().flatten().filter(|w| **w != 1.0).count()
    }

    fn check(&self, group: &RolloutGroup) -> Result<()> {
        let ok = self.weights.len() == group.size()
            && self.weights.iter().zip(&group.responses).all(|(m, r)| m.len() == r.len());
        if ok {
            Ok(())
        } else {
            Err(LabError::Shape("mask does not match the group's token layout".into()))
        }
    }
}

/// Per-token likelihood ratios `pi_theta / pi_old`.
pub fn likelihood_ratios(params: &PolicyParams, old: &PolicyParams, group: &RolloutGroup) -> Result<Vec<Vec<f64>>> {
    group
        .responses
        .iter()
        .map(|r| {
            (0..r.len())
                .map(|k| {
                    let key = ContextKey::new(group.question, &r.tokens[..k]);
                    let token = r.tokens[k];
                    Ok((params.token_log_prob(&key, token)? - old.token_log_prob(&key, token)?).exp())
                })
                .collect()
        })
        .collect()
}

fn unclipped(advantage: f64, ratio: f64, eps: f64) -> bool {
    if advantage >= 0.0 {
        ratio <= 1.0 + eps
    } else {
        ratio >= 1.0 - eps
    }
}

/// Token-level clipped surrogate
/// `sum_{i,k} min(g A_i, clip(g, 1 - eps, 1 + eps) A_i)`, divided by the
/// group's token count when length normalization is on.
pub fn grpo_objective_value(params: &PolicyParams, old: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig) -> Result<f64> {
    group.mixed_success_rate()?;
    let adv = group.advantages()?;
    let ratios = likelihood_ratios(params, old, group)?;
    let eps = cfg.clip_eps;
    let mut total = 0.0;
    for (a, row) in adv.iter().zip(&ratios) {
        for g in row {
            total += (g * a).min(g.clamp(1.0 - eps, 1.0 + eps) * a);
        }
    }
    Ok(total / cfg.normalizer(group))
}

/// Gradient of [`grpo_objective_value`] at arbitrary `params`: clipped tokens
/// contribute nothing, the rest contribute `A_i g grad ln pi`.
pub fn grpo_objective_gradient(params: &PolicyParams, old: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig) -> Result<ParamGradient> {
    group.mixed_success_rate()?;
    let adv = group.advantages()?;
    let ratios = likelihood_ratios(params, old, group)?;
    let norm = cfg.normalizer(group);
    let mut grad = ParamGradient::zeros(params.vocab_size(), params.dim());
    for (i, r) in group.responses.iter().enumerate() {
        for (k, &g) in ratios[i].iter().enumerate() {
            let coef = if unclipped(adv[i], g, cfg.clip_eps) { adv[i] * g / norm } else { 0.0 };
            grad.accumulate_token(params, &ContextKey::new(group.question, &r.tokens[..k]), r.tokens[k], coef)?;
        }
    }
    Ok(grad)
}

fn sequence_ratio(params: &PolicyParams, old: &PolicyParams, group: &RolloutGroup, i: usize) -> Result<f64> {
    let y = &group.responses[i].tokens;
    Ok((params.sequence_log_likelihood(group.question, y)? - old.sequence_log_likelihood(group.question, y)?).exp())
}

/// `p_plus sum_i min(R_i, 1 + eps) - p_minus sum_j max(R_j, 1 - eps)` over
/// sequence-level ratios `R`.
pub fn group_preference_objective(params: &PolicyParams, old: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig) -> Result<f64> {
    let (pp, pm) = group_weights(group.mixed_success_rate()?)?;
    let eps = cfg.clip_eps;
    let mut total = 0.0;
    for i in 0..group.size() {
        let ratio = sequence_ratio(params, old, group, i)?;
        total += if group.responses[i].is_positive() { pp * ratio.min(1.0 + eps) } else { -pm * ratio.max(1.0 - eps) };
    }
    Ok(total)
}

/// Gradient of [`group_preference_objective`], built from whole-sequence
/// likelihood gradients.
pub fn group_preference_gradient(params: &PolicyParams, old: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig) -> Result<ParamGradient> {
    let (pp, pm) = group_weights(group.mixed_success_rate()?)?;
    let eps = cfg.clip_eps;
    let mut grad = ParamGradient::zeros(params.vocab_size(), params.dim());
    for (i, r) in group.responses.iter().enumerate() {
        let ratio = sequence_ratio(params, old, group, i)?;
        let coef = match r.is_positive() {
            true if ratio <= 1.0 + eps => pp * ratio,
            false if ratio >= 1.0 - eps => -pm * ratio,
            _ => 0.0,
        };
        let seq = params.grad_log_likelihood(group.question, &r.tokens)?;
        grad.add_scaled(&seq, coef)?;
    }
    Ok(grad)
}

/// `(1 / norm) sum_{i,k} mask_{i,k} A_i grad ln pi(y_{i,k} | x, y_{i,<k})`
/// at `theta = theta_old`.
pub fn grpo_gradient(params: &PolicyParams, group: &RolloutGroup, cfg: &UpdateConfig, mask: &TokenAdvantageMask) -> Result<ParamGradient> {
    group.mixed_success_rate()?;
    let adv = group.advantages()?;
    mask.check(group)?;
    let norm = cfg.normalizer(group);
    let mut grad = ParamGradient::zeros(params.vocab_size(), params.dim());
    for (i, r) in group.responses.iter().enumerate() {
        for k in 0..r.len() {
            let coef = mask.get(i, k) * adv[i] / norm;
            grad.accumulate_token(params, &ContextKey::new(group.question, &r.tokens[..k]), r.tokens[k], coef)?;
        }
    }
    Ok(grad)
}

/// Builds the variant's mask. `RANDOM` and `NTHR` read the selected sets of a
/// report whose thresholds have been applied; `RANDOM` zeroes the same number
/// of uniformly chosen positions in each negative response.
pub fn make_mask<R: Rng + ?Sized>(
    group: &RolloutGroup,
    cfg: &UpdateConfig,
    report: Option<&NthrReport>,
    rng: &mut R,
) -> Result<TokenAdvantageMask> {
    let mut mask = TokenAdvantageMask::ones(group);
    match cfg.variant {
        Variant::Grpo => {}
        Variant::PosOnly => {
            for j in group.negative_indices() {
                mask.weights[j].iter_mut().for_each(|w| *w = 0.0);
            }
        }
        Variant::Random | Variant::Nthr => {
            let report = report.ok_or(LabError::MissingReport)?;
            report.check_matches(group)?;
            let eta = cfg.eta.resolve(group.mixed_success_rate()?);
            for neg in &report.negatives {
                if cfg.variant == Variant::Nthr {
                    for &k in &neg.selected {
                        mask.weights[neg.response][k] = eta;
                    }
                } else {
                    let len = group.responses[neg.response].len();
                    for k in rand::seq::index::sample(rng, len, neg.selected.len()) {
                        mask.weights[neg.response][k] = 0.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// One gradient-ascent step `theta + lr * grad`.
pub fn apply_update(params: &PolicyParams, grad: &ParamGradient, lr: f64) -> Result<PolicyParams> {
    params.apply_gradient(grad, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuestionId;
    use crate::nthr::{nthr_scores, select_tokens};
    use crate::rollout::{compute_advantages, Response, VarianceMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const Q: QuestionId = QuestionId(3);

    fn setup(rewards: &[bool], seqs: &[Vec<u32>]) -> (PolicyParams, RolloutGroup) {
        let responses = seqs.iter().zip(rewards).map(|(y, &r)| Response::scored(y.clone(), r)).collect();
        let group = compute_advantages(&RolloutGroup::new(Q, responses, 0), VarianceMode::Population).unwrap();
        let mut params = PolicyParams::random(6, 3, 17).unwrap();
        group.register_contexts(&mut params);
        (params, group)
    }

    fn standard() -> (PolicyParams, RolloutGroup) {
        setup(&[true, false, true, false], &[vec![1, 2, 5], vec![1, 3, 5], vec![4, 5], vec![2, 2, 2]])
    }

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("grpo".parse::<Variant>().is_err());
        for s in ["p", "1-p", "balanced", "0.25"] {
            assert_eq!(s.parse::<EtaPolicy>().unwrap().to_string(), s);
        }
        assert!("1.5".parse::<EtaPolicy>().is_err());
    }

    #[test]
    fn value_at_old_policy_is_mean_token_advantage() {
        let (params, group) = standard();
        let cfg = UpdateConfig::default();
        let value = grpo_objective_value(&params, &params, &group, &cfg).unwrap();
        let adv = group.advantages().unwrap();
        let expected: f64 = group.responses.iter().zip(adv).map(|(r, a)| a * r.len() as f64).sum::<f64>() / 11.0;
        assert!((value - expected).abs() < 1e-15);
    }

    #[test]
    fn value_at_old_policy_vanishes_for_equal_lengths_at_half_success() {
        let (params, group) = setup(&[true, false, false, true], &[vec![1, 2], vec![3, 5], vec![2, 2], vec![4, 1]]);
        let value = grpo_objective_value(&params, &params, &group, &UpdateConfig::default()).unwrap();
        assert_eq!(value, 0.0);
    }

    #[test]
    fn raising_a_positive_token_raises_the_value() {
        let (params, group) = standard();
        let cfg = UpdateConfig::default();
        let base = grpo_objective_value(&params, &params, &group, &cfg).unwrap();
        // Move the root embedding toward w_1, the first token of positive response 0.
        for step in [1e-3, 1e-2, 5e-2] {
            let mut moved = params.clone();
            let key = ContextKey::root(Q);
            let h: Vec<f64> = moved.embedding(&key).unwrap().iter().zip(params.w_row(1)).map(|(h, w)| h + step * w).collect();
            moved.insert_embedding(key, h).unwrap();
            assert!(grpo_objective_value(&moved, &params, &group, &cfg).unwrap() > base, "step {step}");
        }
    }

    #[test]
    fn preference_value_is_zero_at_old_policy() {
        let (params, group) = standard();
        let v = group_preference_objective(&params, &params, &group, &UpdateConfig::default()).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn preference_value_hand_case_and_clip_boundary() {
        // Single-token responses so sequence ratios are set by one logit each.
        let (params, group) = setup(&[true, false], &[vec![1], vec![2]]);
        let cfg = UpdateConfig::default();
        let mut moved = params.clone();
        let dist = params.next_token_distribution(&ContextKey::root(Q)).unwrap();
        // Choose new logits so that the two ratios are exactly representable targets.
        let logits = params.logits(&ContextKey::root(Q)).unwrap();
        let target = |t: usize, ratio: f64| dist.probs()[t] * ratio;
        let (p1, p2) = (target(1, 1.1), target(2, 0.9));
        // Rebuild W so the new softmax hits (p1, p2) on tokens 1 and 2, keeping the rest proportional.
        let rest = 1.0 - p1 - p2;
        let old_rest = 1.0 - dist.probs()[1] - dist.probs()[2];
        let mut new_logits = logits.clone();
        for (t, logit) in new_logits.iter_mut().enumerate() {
            let p = match t {
                1 => p1,
                2 => p2,
                _ => dist.probs()[t] * rest / old_rest,
            };
            *logit = p.ln();
        }
        // Realise the logits through W with h fixed: shift each row along h.
        let h = params.embedding(&ContextKey::root(Q)).unwrap().to_vec();
        let hh: f64 = h.iter().map(|v| v * v).sum();
        for t in 0..6u32 {
            let shift = (new_logits[t as usize] - logits[t as usize]) / hh;
            let row: Vec<f64> = params.w_row(t).iter().zip(&h).map(|(w, x)| w + shift * x).collect();
            moved.set_w_row(t, &row).unwrap();
        }
        let v = group_preference_objective(&moved, &params, &group, &cfg).unwrap();
        assert!((v - 0.2).abs() < 1e-12, "{v}");

        // Positive ratio 1.5 is clipped to 1.2.
        let (p1, _) = (target(1, 1.5), ());
        let rest = 1.0 - p1 - dist.probs()[2];
        let old_rest = 1.0 - dist.probs()[1] - dist.probs()[2];
        for t in 0..6u32 {
            let p = match t {
                1 => p1,
                2 => dist.probs()[2],
                _ => dist.probs()[t as usize] * rest / old_rest,
            };
            let shift = (p.ln() - logits[t as usize]) / hh;
            let row: Vec<f64> = params.w_row(t).iter().zip(&h).map(|(w, x)| w + shift * x).collect();
            moved.set_w_row(t, &row).unwrap();
        }
        let v = group_preference_objective(&moved, &params, &group, &cfg).unwrap();
        assert!((v - (1.2 - 1.0)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_mask_gives_zero_gradient() {
        let (params, group) = standard();
        let g = grpo_gradient(&params, &group, &UpdateConfig::default(), &TokenAdvantageMask::zeros(&group)).unwrap();
        assert_eq!(g.norm_sq(), 0.0);
    }

    #[test]
    fn single_unmasked_response_is_scaled_sequence_gradient() {
        let (params, group) = standard();
        let mut mask = TokenAdvantageMask::zeros(&group);
        for k in 0..3 {
            mask.set(0, k, 1.0);
        }
        let cfg = UpdateConfig::default();
        let g = grpo_gradient(&params, &group, &cfg, &mask).unwrap();
        let expected = params.grad_log_likelihood(Q, &group.responses[0].tokens).unwrap().scaled(group.advantages().unwrap()[0] / 11.0);
        assert!(g.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn full_mask_equals_sum_of_token_terms() {
        let (params, group) = standard();
        let cfg = UpdateConfig { length_norm: false, ..UpdateConfig::default() };
        let g = grpo_gradient(&params, &group, &cfg, &TokenAdvantageMask::ones(&group)).unwrap();
        let mut manual = ParamGradient::zeros(6, 3);
        for (i, r) in group.responses.iter().enumerate() {
            for k in 0..r.len() {
                let key = ContextKey::new(Q, &r.tokens[..k]);
                let dist = params.next_token_distribution(&key).unwrap();
                let err = dist.prediction_error(r.tokens[k]);
                let h = params.embedding(&key).unwrap().to_vec();
                let a = group.advantages().unwrap()[i];
                let mut dw = vec![0.0; 18];
                for z in 0..6 {
                    for c in 0..3 {
                        dw[z * 3 + c] = a * err[z] * h[c];
                    }
                }
                let mean = params.mean_unembedding(&dist);
                let dh: Vec<f64> = params.w_row(r.tokens[k]).iter().zip(&mean).map(|(w, m)| a * (w - m)).collect();
                // Compare token by token against the hand-expanded outer product.
                let mut single = ParamGradient::zeros(6, 3);
                single.accumulate_token(&params, &key, r.tokens[k], a).unwrap();
                for (x, y) in single.dw().iter().zip(&dw) {
                    assert!((x - y).abs() < 1e-15);
                }
                for (x, y) in single.dh_entry(&key).unwrap().iter().zip(&dh) {
                    assert!((x - y).abs() < 1e-15);
                }
                manual.add_scaled(&single, 1.0).unwrap();
            }
        }
        assert!(g.max_abs_diff(&manual).unwrap() < 1e-12);
    }

    #[test]
    fn masks_follow_variant_rules() {
        let (params, group) = standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pos = make_mask(&group, &UpdateConfig { variant: Variant::PosOnly, ..Default::default() }, None, &mut rng).unwrap();
        assert_eq!(pos.response(1), &[0.0; 3]);
        assert_eq!(pos.response(3), &[0.0; 3]);
        assert_eq!(pos.response(0), &[1.0; 3]);

        let nthr_cfg = UpdateConfig { variant: Variant::Nthr, ..Default::default() };
        assert_eq!(make_mask(&group, &nthr_cfg, None, &mut rng), Err(LabError::MissingReport));

        // Nothing selected: RANDOM equals GRPO.
        let report = select_tokens(&nthr_scores(&params, &group).unwrap(), f64::INFINITY).unwrap();
        let rand_cfg = UpdateConfig { variant: Variant::Random, ..Default::default() };
        assert_eq!(make_mask(&group, &rand_cfg, Some(&report), &mut rng).unwrap(), TokenAdvantageMask::ones(&group));

        // Hand-picked selection of two tokens with eta = 0.
        let mut report = report;
        report.negatives[0].selected = vec![0, 2];
        let mask = make_mask(&group, &nthr_cfg, Some(&report), &mut rng).unwrap();
        assert_eq!(mask.response(1), &[0.0, 1.0, 0.0]);
        assert_eq!(mask.modified_count(), 2);
        let random = make_mask(&group, &rand_cfg, Some(&report), &mut rng).unwrap();
        assert_eq!(random.response(1).iter().filter(|w| **w == 0.0).count(), 2);
        assert_eq!(random.modified_count(), 2);
    }

    #[test]
    fn eta_policy_scales_selected_tokens() {
        let (params, group) = standard();
        let mut report = select_tokens(&nthr_scores(&params, &group).unwrap(), f64::INFINITY).unwrap();
        report.negatives[1].selected = vec![1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = UpdateConfig { variant: Variant::Nthr, eta: EtaPolicy::SuccessRate, ..Default::default() };
        let mask = make_mask(&group, &cfg, Some(&report), &mut rng).unwrap();
        assert_eq!(mask.response(3), &[1.0, 0.5, 1.0]);
    }

    #[test]
    fn update_with_zero_step_is_identity() {
        let (params, group) = standard();
        let g = grpo_gradient(&params, &group, &UpdateConfig::default(), &TokenAdvantageMask::ones(&group)).unwrap();
        assert_eq!(apply_update(&params, &g, 0.0).unwrap(), params);
        assert_eq!(apply_update(&params, &ParamGradient::zeros(6, 3), 0.3).unwrap(), params);
    }

    #[test]
    fn small_ascent_step_increases_the_objective() {
        let (params, group) = standard();
        let cfg = UpdateConfig::default();
        let g = grpo_gradient(&params, &group, &cfg, &TokenAdvantageMask::ones(&group)).unwrap();
        let base = grpo_objective_value(&params, &params, &group, &cfg).unwrap();
        let mut lr = 1.0;
        let mut improved = false;
        while lr > 1e-8 {
            let next = apply_update(&params, &g, lr).unwrap();
            if grpo_objective_value(&next, &params, &group, &cfg).unwrap() > base {
                improved = true;
                break;
            }
            lr *= 0.5;
        }
        assert!(improved);
    }

    #[test]
    fn clipped_gradient_matches_finite_differences_away_from_old_policy() {
        let (params, group) = standard();
        let cfg = UpdateConfig::default();
        let g = grpo_gradient(&params, &group, &cfg, &TokenAdvantageMask::ones(&group)).unwrap();
        let moved = apply_update(&params, &g, 8.0).unwrap();
        let ratios = likelihood_ratios(&moved, &params, &group).unwrap();
        let clipped = ratios.iter().flatten().filter(|g| (**g - 1.0).abs() > 0.2).count();
        assert!(clipped > 0, "the step should push some ratio past the clip range");
        for g in ratios.iter().flatten() {
            assert!(((g - 1.0).abs() - 0.2).abs() > 1e-4, "ratio {g} too close to a clip edge");
        }
        let grad = grpo_objective_gradient(&moved, &params, &group, &cfg).unwrap();
        let step = 1e-6;
        for idx in 0..moved.w().len() {
            let (z, c) = ((idx / 3) as u32, idx % 3);
            let shifted = |delta: f64| {
                let mut p = moved.clone();
                let mut row = p.w_row(z).to_vec();
                row[c] += delta;
                p.set_w_row(z, &row).unwrap();
                grpo_objective_value(&p, &params, &group, &cfg).unwrap()
            };
            let fd = (shifted(step) - shifted(-step)) / (2.0 * step);
            assert!((fd - grad.dw()[idx]).abs() < 1e-7, "W[{idx}] {fd} vs {}", grad.dw()[idx]);
        }
    }
}
