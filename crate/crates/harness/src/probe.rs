//! Probing a set of update rules on every valid question at one common
//! step size.
//!
//! The step size starts at the configured `lr` and is halved per question
//! until every rule passes the first-order check; the run then uses the
//! smallest of those values everywhere, so changes are comparable across
//! both rules and questions.

use lld_core::dynamics::{calibrate_lr, probe_gradient, single_step_probe, LrCalibration, ProbeOptions, UpdateReport};
use lld_core::objective::{EtaPolicy, UpdateConfig, Variant};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::task::{derive_seed, Prepared};

/// An update rule with the label used in output tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub label: String,
    pub update: UpdateConfig,
}

impl ProbeSpec {
    /// `variant` with the configured clip range, step size, `beta` and `eta`.
    pub fn variant(cfg: &ExperimentConfig, variant: Variant) -> Self {
        Self { label: variant.as_str().to_string(), update: UpdateConfig { variant, ..cfg.update } }
    }

    pub fn nthr(cfg: &ExperimentConfig, beta: f64, eta: EtaPolicy) -> Self {
        Self {
            label: format!("NTHR(beta={beta},eta={eta})"),
            update: UpdateConfig { variant: Variant::Nthr, beta, eta, ..cfg.update },
        }
    }
}

/// Reports of every rule on one question, in rule order.
#[derive(Debug, Clone)]
pub struct QuestionProbes {
    pub question: u64,
    pub reports: Vec<UpdateReport>,
    /// Whether the measured change is within tolerance of its first-order
    /// prediction at the common step size.
    pub first_order_ok: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub lr: f64,
    pub questions: Vec<QuestionProbes>,
}

pub fn probe_options(cfg: &ExperimentConfig, question: u64) -> ProbeOptions {
    ProbeOptions { eps_lld: cfg.eps_lld, mask_seed: derive_seed(cfg.seed, "mask", question), fast: cfg.fast_path() }
}

fn calibration(cfg: &ExperimentConfig) -> LrCalibration {
    LrCalibration { tolerance: cfg.lr_tolerance, max_halvings: cfg.max_halvings }
}

/// Largest calibrated step size of one question over all rules.
pub fn question_lr(cfg: &ExperimentConfig, prepared: &Prepared, specs: &[ProbeSpec]) -> Result<f64> {
    let q = prepared.id();
    let opts = probe_options(cfg, q);
    let directions: Vec<_> = specs
        .iter()
        .map(|s| probe_gradient(&prepared.params, &prepared.group, &s.update, &opts).map(|(g, _, _)| g))
        .collect::<lld_core::Result<_>>()
        .map_err(HarnessError::model(q))?;
    let refs: Vec<_> = directions.iter().collect();
    calibrate_lr(&prepared.params, &prepared.group, &refs, cfg.update.lr, &calibration(cfg)).map_err(HarnessError::model(q))
}

/// Probes every rule on every non-degenerate question.
pub fn run_probes(cfg: &ExperimentConfig, valid: &[&Prepared], specs: &[ProbeSpec]) -> Result<ProbeRun> {
    let lrs: Vec<f64> = valid.par_iter().map(|p| question_lr(cfg, p, specs)).collect::<Result<_>>()?;
    let lr = lrs.iter().copied().fold(cfg.update.lr, f64::min);
    let tol = cfg.lr_tolerance;
    let questions = valid
        .par_iter()
        .map(|p| {
            let q = p.id();
            let opts = probe_options(cfg, q);
            let reports: Vec<UpdateReport> = specs
                .iter()
                .map(|s| single_step_probe(&p.params, &p.group, &UpdateConfig { lr, ..s.update }, &opts))
                .collect::<lld_core::Result<_>>()
                .map_err(HarnessError::model(q))?;
            let first_order_ok = reports
                .iter()
                .map(|r| (r.delta - r.predicted).abs() <= tol * r.delta.abs() || (r.delta == 0.0 && r.predicted == 0.0))
                .collect();
            Ok(QuestionProbes { question: q, reports, first_order_ok })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeRun { lr, questions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::prepare_all;

    #[test]
    fn probes_share_one_step_size_and_pass_the_first_order_check() {
        let cfg = ExperimentConfig { questions: 10, ..ExperimentConfig::default() };
        let prepared = prepare_all(&cfg).unwrap();
        let valid: Vec<&Prepared> = prepared.iter().filter(|p| !p.degenerate).collect();
        assert!(!valid.is_empty());
        let specs = [ProbeSpec::variant(&cfg, Variant::Grpo), ProbeSpec::variant(&cfg, Variant::PosOnly)];
        let run = run_probes(&cfg, &valid, &specs).unwrap();
        assert!(run.lr > 0.0 && run.lr <= cfg.update.lr);
        for q in &run.questions {
            assert!(q.reports.iter().all(|r| r.lr == run.lr));
            assert!(q.first_order_ok.iter().all(|&ok| ok));
            assert!(q.reports[1].delta >= -1e-12);
        }
    }

    #[test]
    fn labels_name_the_rule() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ProbeSpec::variant(&cfg, Variant::PosOnly).label, "POS_ONLY");
        assert_eq!(ProbeSpec::nthr(&cfg, f64::NEG_INFINITY, EtaPolicy::Balanced).label, "NTHR(beta=-inf,eta=balanced)");
    }
}
