//! The experiment suites. Each one samples and scores every question,
//! drops degenerate groups, probes a set of update rules at one common step
//! size and writes its tables into `<out>/<suite>/`.
//!
//! A question counts as flagged when its GRPO step lowers the mean
//! log-likelihood of its correct responses by more than `eps_lld`.

use std::path::PathBuf;

use lld_core::dynamics::{random_overlap_baseline, rank_by, spearman, topk_overlap, RankingPair, UpdateReport};
use lld_core::model::QuestionId;
use lld_core::objective::{EtaPolicy, Variant};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::{fmt_f64, fmt_opt, Columns, RunDir};
use crate::probe::{run_probes, ProbeRun, ProbeSpec};
use crate::stats::{mean, paired_one_sided, PairedTest};
use crate::task::{derive_seed, prepare_all, Prepared};

/// Question counts of one run; `questions_in = filtered_degenerate + valid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accounting {
    pub questions_in: usize,
    pub filtered_degenerate: usize,
    pub valid: usize,
}

fn split(prepared: &[Prepared]) -> (Vec<&Prepared>, Accounting) {
    let valid: Vec<&Prepared> = prepared.iter().filter(|p| !p.degenerate).collect();
    let acc = Accounting { questions_in: prepared.len(), filtered_degenerate: prepared.len() - valid.len(), valid: valid.len() };
    (valid, acc)
}

fn accounting_entries(acc: &Accounting, lr: f64) -> Vec<(&'static str, String)> {
    vec![
        ("questions_in", acc.questions_in.to_string()),
        ("filtered_degenerate", acc.filtered_degenerate.to_string()),
        ("valid", acc.valid.to_string()),
        ("lr", fmt_f64(lr)),
    ]
}

const GROUP_COLUMNS: Columns = &[
    ("question", "question id"),
    ("degenerate", "all rewards equal; excluded from probes"),
    ("response", "index within the group"),
    ("reward", "1 if correct"),
    ("advantage", "normalized advantage; empty for degenerate groups"),
    ("length", "tokens including the end token"),
    ("tokens", "space-separated token ids"),
];

fn group_rows(prepared: &[Prepared]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for p in prepared {
        let adv = p.group.advantages().ok();
        for (i, r) in p.group.responses.iter().enumerate() {
            rows.push(vec![
                p.id().to_string(),
                u8::from(p.degenerate).to_string(),
                i.to_string(),
                u8::from(r.is_positive()).to_string(),
                fmt_opt(adv.map(|a| a[i])),
                r.len().to_string(),
                r.tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
            ]);
        }
    }
    rows
}

const UPDATE_COLUMNS: Columns = &[
    ("question", "question id"),
    ("rule", "update rule label"),
    ("variant", "GRPO | POS_ONLY | RANDOM | NTHR"),
    ("lr", "common step size of the run"),
    ("delta", "mean log-likelihood change of the correct responses after one step"),
    ("predicted", "lr times the first-order rate of delta"),
    ("first_order_ok", "1 if |delta - predicted| <= lr_tolerance * |delta|"),
    ("gwhes", "mean embedding score of the correct responses"),
    ("lld_flag", "1 if delta < eps_lld"),
    ("eps_lld", "displacement threshold"),
    ("modified_tokens", "tokens whose advantage the rule changed"),
    ("tau", "score threshold; empty for rules without selection"),
    ("eta", "attenuation of selected tokens; empty unless NTHR"),
    ("term_i", "positive-pair embedding term of the first correct response; empty unless first tokens are distinct"),
    ("term_ii", "negative-pair embedding term"),
    ("term_iii", "first-token unembedding term"),
    ("term_iv", "continuation unembedding term"),
];

fn update_rows(run: &ProbeRun, specs: &[ProbeSpec]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for q in &run.questions {
        for ((r, spec), ok) in q.reports.iter().zip(specs).zip(&q.first_order_ok) {
            let terms = r.terms;
            rows.push(vec![
                q.question.to_string(),
                spec.label.clone(),
                r.variant.to_string(),
                fmt_f64(r.lr),
                fmt_f64(r.delta),
                fmt_f64(r.predicted),
                u8::from(*ok).to_string(),
                fmt_f64(r.gwhes),
                u8::from(r.lld_flag).to_string(),
                fmt_f64(r.eps_lld),
                r.modified_tokens.to_string(),
                fmt_opt(r.nthr.as_ref().and_then(|n| n.tau)),
                fmt_opt(r.nthr.as_ref().and_then(|n| n.eta)),
                fmt_opt(terms.map(|t| t.positive_embedding)),
                fmt_opt(terms.map(|t| t.negative_embedding)),
                fmt_opt(terms.map(|t| t.first_token)),
                fmt_opt(terms.map(|t| t.continuation)),
            ]);
        }
    }
    rows
}

fn mean_length(p: &Prepared) -> f64 {
    p.group.total_tokens() as f64 / p.group.size() as f64
}

fn success_rate(p: &Prepared) -> f64 {
    p.group.n_plus() as f64 / p.group.size() as f64
}

/// Prepares, probes and writes the tables shared by every suite.
fn probe_suite(
    cfg: &ExperimentConfig,
    suite: &'static str,
    specs: &[ProbeSpec],
    prepared: Vec<Prepared>,
) -> Result<(Vec<Prepared>, Accounting, ProbeRun, RunDir)> {
    let (valid, acc) = split(&prepared);
    if valid.is_empty() {
        return Err(HarnessError::EmptySurvey(acc.questions_in));
    }
    let run = run_probes(cfg, &valid, specs)?;
    let mut dir = RunDir::create(cfg, suite)?;
    dir.csv("groups.csv", GROUP_COLUMNS, &group_rows(&prepared))?;
    dir.csv("updates.csv", UPDATE_COLUMNS, &update_rows(&run, specs))?;
    Ok((prepared, acc, run, dir))
}

fn by_id(prepared: &[Prepared], id: u64) -> &Prepared {
    &prepared[id as usize]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyRow {
    pub question: u64,
    pub success_rate: f64,
    pub n_plus: usize,
    pub n_minus: usize,
    pub mean_length: f64,
    pub delta_grpo: f64,
    pub delta_pos_only: f64,
    pub gwhes: f64,
    pub lld_flag: bool,
}

#[derive(Debug, Clone)]
pub struct SurveyOutcome {
    pub dir: PathBuf,
    pub accounting: Accounting,
    pub lr: f64,
    /// Ascending by GRPO change, ties by question id.
    pub rows: Vec<SurveyRow>,
    /// POS_ONLY against GRPO on flagged questions.
    pub test: PairedTest,
}

const SURVEY_COLUMNS: Columns = &[
    ("rank", "position in ascending order of delta_grpo"),
    ("question", "question id"),
    ("success_rate", "fraction of correct responses"),
    ("n_plus", "correct responses"),
    ("n_minus", "incorrect responses"),
    ("mean_length", "mean response length"),
    ("delta_grpo", "likelihood change of the correct responses under GRPO"),
    ("delta_pos_only", "likelihood change under POS_ONLY"),
    ("gwhes", "mean embedding score of the correct responses"),
    ("lld_flag", "1 if delta_grpo < eps_lld"),
];

pub fn run_survey(cfg: &ExperimentConfig) -> Result<SurveyOutcome> {
    let specs = [ProbeSpec::variant(cfg, Variant::Grpo), ProbeSpec::variant(cfg, Variant::PosOnly)];
    let (prepared, accounting, run, mut dir) = probe_suite(cfg, "survey", &specs, prepare_all(cfg)?)?;
    let mut rows: Vec<SurveyRow> = run
        .questions
        .iter()
        .map(|q| {
            let p = by_id(&prepared, q.question);
            SurveyRow {
                question: q.question,
                success_rate: success_rate(p),
                n_plus: p.group.n_plus(),
                n_minus: p.group.n_minus(),
                mean_length: mean_length(p),
                delta_grpo: q.reports[0].delta,
                delta_pos_only: q.reports[1].delta,
                gwhes: q.reports[0].gwhes,
                lld_flag: q.reports[0].lld_flag,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.delta_grpo.total_cmp(&b.delta_grpo).then(a.question.cmp(&b.question)));

    let flagged: Vec<&SurveyRow> = rows.iter().filter(|r| r.lld_flag).collect();
    let pos: Vec<f64> = flagged.iter().map(|r| r.delta_pos_only).collect();
    let grpo: Vec<f64> = flagged.iter().map(|r| r.delta_grpo).collect();
    let test = paired_one_sided(&pos, &grpo);

    let table: Vec<Vec<String>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                i.to_string(),
                r.question.to_string(),
                fmt_f64(r.success_rate),
                r.n_plus.to_string(),
                r.n_minus.to_string(),
                fmt_f64(r.mean_length),
                fmt_f64(r.delta_grpo),
                fmt_f64(r.delta_pos_only),
                fmt_f64(r.gwhes),
                u8::from(r.lld_flag).to_string(),
            ]
        })
        .collect();
    dir.csv("survey.csv", SURVEY_COLUMNS, &table)?;
    let mut summary = accounting_entries(&accounting, run.lr);
    summary.extend([
        ("flagged", flagged.len().to_string()),
        ("mean_delta_grpo_flagged", fmt_f64(mean(&grpo))),
        ("mean_delta_pos_only_flagged", fmt_f64(mean(&pos))),
        ("paired_t", fmt_f64(test.t)),
        ("paired_p_one_sided", fmt_f64(test.p_value)),
        ("pos_only_above_grpo_at_0.05", u8::from(test.mean_diff > 0.0 && test.p_value < 0.05).to_string()),
    ]);
    dir.summary("summary.csv", &summary)?;
    Ok(SurveyOutcome { dir: dir.finish(cfg)?, accounting, lr: run.lr, rows, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MitigationRow {
    pub question: u64,
    pub success_rate: f64,
    pub delta_grpo: f64,
    pub delta_random: f64,
    pub delta_nthr: f64,
    pub selected_tokens: usize,
    pub negative_tokens: usize,
    pub lld_flag: bool,
}

#[derive(Debug, Clone)]
pub struct MitigationOutcome {
    pub dir: PathBuf,
    pub accounting: Accounting,
    pub lr: f64,
    /// Question id order.
    pub rows: Vec<MitigationRow>,
    pub flagged: usize,
    /// Fraction of flagged questions with `delta_nthr >= delta_grpo`.
    pub nthr_not_worse: f64,
    /// Means over flagged questions: GRPO, RANDOM, NTHR.
    pub flagged_means: [f64; 3],
}

const MITIGATION_COLUMNS: Columns = &[
    ("question", "question id"),
    ("success_rate", "fraction of correct responses"),
    ("delta_grpo", "likelihood change under GRPO"),
    ("delta_random", "likelihood change with as many random incorrect tokens attenuated"),
    ("delta_nthr", "likelihood change with the selected incorrect tokens attenuated"),
    ("selected_tokens", "incorrect tokens above the threshold"),
    ("negative_tokens", "tokens in incorrect responses"),
    ("lld_flag", "1 if delta_grpo < eps_lld"),
];

const TOKEN_COLUMNS: Columns = &[
    ("question", "question id"),
    ("response", "index of the incorrect response"),
    ("position", "token position"),
    ("token", "token id"),
    ("s_minus", "summed similarity to all correct tokens"),
    ("bound", "bound on the score error; zero on the exact path"),
    ("selected", "1 if s_minus exceeds the threshold"),
];

pub fn run_mitigation(cfg: &ExperimentConfig) -> Result<MitigationOutcome> {
    let specs = [
        ProbeSpec::variant(cfg, Variant::Grpo),
        ProbeSpec::variant(cfg, Variant::Random),
        ProbeSpec::variant(cfg, Variant::Nthr),
    ];
    let (prepared, accounting, run, mut dir) = probe_suite(cfg, "mitigate", &specs, prepare_all(cfg)?)?;
    let mut tokens = Vec::new();
    let rows: Vec<MitigationRow> = run
        .questions
        .iter()
        .map(|q| {
            let p = by_id(&prepared, q.question);
            let report = q.reports[2].nthr.as_ref().expect("NTHR probes carry their scores");
            for neg in &report.negatives {
                let y = &p.group.responses[neg.response].tokens;
                for (k, (&s, &b)) in neg.s_minus.iter().zip(&neg.bound).enumerate() {
                    tokens.push(vec![
                        q.question.to_string(),
                        neg.response.to_string(),
                        k.to_string(),
                        y[k].to_string(),
                        fmt_f64(s),
                        fmt_f64(b),
                        u8::from(neg.selected.contains(&k)).to_string(),
                    ]);
                }
            }
            MitigationRow {
                question: q.question,
                success_rate: success_rate(p),
                delta_grpo: q.reports[0].delta,
                delta_random: q.reports[1].delta,
                delta_nthr: q.reports[2].delta,
                selected_tokens: report.selected_count(),
                negative_tokens: p.group.negative_indices().iter().map(|&j| p.group.responses[j].len()).sum(),
                lld_flag: q.reports[0].lld_flag,
            }
        })
        .collect();

    let flagged: Vec<&MitigationRow> = rows.iter().filter(|r| r.lld_flag).collect();
    let nthr_not_worse = if flagged.is_empty() {
        f64::NAN
    } else {
        flagged.iter().filter(|r| r.delta_nthr >= r.delta_grpo).count() as f64 / flagged.len() as f64
    };
    let col = |f: fn(&MitigationRow) -> f64| mean(&flagged.iter().map(|r| f(r)).collect::<Vec<_>>());
    let flagged_means = [col(|r| r.delta_grpo), col(|r| r.delta_random), col(|r| r.delta_nthr)];

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.question.to_string(),
                fmt_f64(r.success_rate),
                fmt_f64(r.delta_grpo),
                fmt_f64(r.delta_random),
                fmt_f64(r.delta_nthr),
                r.selected_tokens.to_string(),
                r.negative_tokens.to_string(),
                u8::from(r.lld_flag).to_string(),
            ]
        })
        .collect();
    dir.csv("mitigate.csv", MITIGATION_COLUMNS, &table)?;
    dir.csv("nthr_tokens.csv", TOKEN_COLUMNS, &tokens)?;
    let all = |f: fn(&MitigationRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let mut summary = accounting_entries(&accounting, run.lr);
    summary.extend([
        ("flagged", flagged.len().to_string()),
        ("nthr_not_worse_fraction_flagged", fmt_f64(nthr_not_worse)),
        ("mean_delta_grpo_flagged", fmt_f64(flagged_means[0])),
        ("mean_delta_random_flagged", fmt_f64(flagged_means[1])),
        ("mean_delta_nthr_flagged", fmt_f64(flagged_means[2])),
        ("mean_delta_grpo", fmt_f64(all(|r| r.delta_grpo))),
        ("mean_delta_random", fmt_f64(all(|r| r.delta_random))),
        ("mean_delta_nthr", fmt_f64(all(|r| r.delta_nthr))),
    ]);
    dir.summary("summary.csv", &summary)?;
    let flagged = flagged.len();
    Ok(MitigationOutcome { dir: dir.finish(cfg)?, accounting, lr: run.lr, rows, flagged, nthr_not_worse, flagged_means })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRow {
    pub k: usize,
    pub n: usize,
    pub overlap: f64,
    /// `K / n`
    pub baseline: f64,
    pub shuffled_mean: f64,
    pub shuffled_se: f64,
}

#[derive(Debug, Clone)]
pub struct OverlapOutcome {
    pub dir: PathBuf,
    pub accounting: Accounting,
    pub lr: f64,
    pub rows: Vec<OverlapRow>,
    /// Rank correlation of embedding score and likelihood change.
    pub spearman: f64,
}

const RANKING_COLUMNS: Columns = &[
    ("question", "question id"),
    ("gwhes", "mean embedding score of the correct responses"),
    ("delta_grpo", "likelihood change under GRPO"),
    ("gwhes_rank", "position in descending order of gwhes"),
    ("delta_rank", "position in ascending order of delta_grpo"),
];

const OVERLAP_COLUMNS: Columns = &[
    ("k", "cut-off"),
    ("n", "ranked questions"),
    ("overlap", "shared top-k questions of the two rankings over k"),
    ("baseline", "expected overlap of a random ranking, k/n"),
    ("shuffled_mean", "mean overlap of randomly permuted score rankings"),
    ("shuffled_se", "standard error of shuffled_mean"),
    ("shuffled_within_3se", "1 if |shuffled_mean - baseline| <= 3 shuffled_se"),
];

pub fn run_overlap(cfg: &ExperimentConfig) -> Result<OverlapOutcome> {
    let specs = [ProbeSpec::variant(cfg, Variant::Grpo)];
    let needed = 2 * cfg.k.iter().copied().max().unwrap_or(0);
    let prepared = prepare_all(cfg)?;
    let found = split(&prepared).1.valid;
    if found < needed {
        return Err(HarnessError::InsufficientQuestions { found, needed });
    }
    let (_, accounting, run, mut dir) = probe_suite(cfg, "overlap", &specs, prepared)?;
    let reports: Vec<&UpdateReport> = run.questions.iter().map(|q| &q.reports[0]).collect();
    let by_score: Vec<(QuestionId, f64)> = reports.iter().map(|r| (r.question, r.gwhes)).collect();
    let by_delta: Vec<(QuestionId, f64)> = reports.iter().map(|r| (r.question, r.delta)).collect();
    let score_rank = rank_by(&by_score, true);
    let delta_rank = rank_by(&by_delta, false);
    let n = reports.len();
    let spearman = spearman(&by_score.iter().map(|x| x.1).collect::<Vec<_>>(), &by_delta.iter().map(|x| -x.1).collect::<Vec<_>>())
        .map_err(HarnessError::model(0))?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", 0));
    let mut shuffled: Vec<Vec<QuestionId>> = Vec::with_capacity(cfg.shuffles);
    for _ in 0..cfg.shuffles {
        let mut perm = score_rank.clone();
        perm.shuffle(&mut rng);
        shuffled.push(perm);
    }
    let mut rows = Vec::new();
    for &k in &cfg.k {
        let pair = |first: Vec<QuestionId>| RankingPair::new(first, delta_rank.clone(), k).map_err(HarnessError::model(0));
        let overlap = topk_overlap(&pair(score_rank.clone())?);
        let controls: Vec<f64> = shuffled.iter().map(|s| pair(s.clone()).map(|p| topk_overlap(&p))).collect::<Result<_>>()?;
        let sd = crate::stats::sample_sd(&controls);
        rows.push(OverlapRow {
            k,
            n,
            overlap,
            baseline: random_overlap_baseline(k, n),
            shuffled_mean: mean(&controls),
            shuffled_se: if controls.len() > 1 { sd / (controls.len() as f64).sqrt() } else { f64::NAN },
        });
    }

    let position = |ranking: &[QuestionId], q: QuestionId| ranking.iter().position(|&x| x == q).expect("ranking covers every question");
    let ranking_rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.question.to_string(),
                fmt_f64(r.gwhes),
                fmt_f64(r.delta),
                position(&score_rank, r.question).to_string(),
                position(&delta_rank, r.question).to_string(),
            ]
        })
        .collect();
    let overlap_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                r.n.to_string(),
                fmt_f64(r.overlap),
                fmt_f64(r.baseline),
                fmt_f64(r.shuffled_mean),
                fmt_f64(r.shuffled_se),
                u8::from((r.shuffled_mean - r.baseline).abs() <= 3.0 * r.shuffled_se).to_string(),
            ]
        })
        .collect();
    dir.csv("ranking.csv", RANKING_COLUMNS, &ranking_rows)?;
    dir.csv("overlap.csv", OVERLAP_COLUMNS, &overlap_rows)?;
    let mut summary = accounting_entries(&accounting, run.lr);
    summary.push(("spearman_gwhes_vs_negated_delta", fmt_f64(spearman)));
    dir.summary("summary.csv", &summary)?;
    Ok(OverlapOutcome { dir: dir.finish(cfg)?, accounting, lr: run.lr, rows, spearman })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub beta: f64,
    pub eta: EtaPolicy,
    pub mean_delta: f64,
    pub mean_delta_flagged: f64,
    /// Mean of `delta - delta_grpo` over flagged questions.
    pub mean_gain_flagged: f64,
    pub not_worse_fraction_flagged: f64,
    pub mean_selected_tokens: f64,
    /// Largest `|delta - delta_grpo|` over questions.
    pub max_diff_grpo: f64,
    /// Largest `|delta - delta_pos_only|` over questions.
    pub max_diff_pos_only: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub dir: PathBuf,
    pub accounting: Accounting,
    pub lr: f64,
    pub flagged: usize,
    pub mean_delta_grpo_flagged: f64,
    /// Beta-major grid order.
    pub rows: Vec<AblationRow>,
}

const ABLATION_COLUMNS: Columns = &[
    ("beta", "threshold scale; -inf attenuates every incorrect token"),
    ("eta", "attenuation policy"),
    ("mean_delta", "mean likelihood change over all probed questions"),
    ("mean_delta_flagged", "mean likelihood change over questions flagged under GRPO"),
    ("mean_gain_flagged", "mean of delta - delta_grpo over flagged questions"),
    ("not_worse_fraction_flagged", "fraction of flagged questions with delta >= delta_grpo"),
    ("mean_selected_tokens", "mean number of selected incorrect tokens"),
    ("max_diff_grpo", "largest |delta - delta_grpo|"),
    ("max_diff_pos_only", "largest |delta - delta_pos_only|"),
];

const ABLATION_QUESTION_COLUMNS: Columns = &[
    ("question", "question id"),
    ("beta", "threshold scale"),
    ("eta", "attenuation policy"),
    ("eta_value", "resolved attenuation"),
    ("delta", "likelihood change"),
    ("selected_tokens", "selected incorrect tokens"),
];

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let mut specs = vec![ProbeSpec::variant(cfg, Variant::Grpo), ProbeSpec::variant(cfg, Variant::PosOnly)];
    let grid: Vec<(f64, EtaPolicy)> = cfg.beta_grid.iter().flat_map(|&b| cfg.eta_grid.iter().map(move |&e| (b, e))).collect();
    specs.extend(grid.iter().map(|&(b, e)| ProbeSpec::nthr(cfg, b, e)));
    let (_, accounting, run, mut dir) = probe_suite(cfg, "ablate", &specs, prepare_all(cfg)?)?;

    let flagged: Vec<bool> = run.questions.iter().map(|q| q.reports[0].lld_flag).collect();
    let grpo: Vec<f64> = run.questions.iter().map(|q| q.reports[0].delta).collect();
    let pos: Vec<f64> = run.questions.iter().map(|q| q.reports[1].delta).collect();
    let pick = |xs: &[f64]| -> Vec<f64> { xs.iter().zip(&flagged).filter(|(_, &f)| f).map(|(x, _)| *x).collect() };
    let grpo_flagged = pick(&grpo);
    let mut rows = Vec::new();
    let mut per_question = Vec::new();
    for (g, &(beta, eta)) in grid.iter().enumerate() {
        let idx = g + 2;
        let delta: Vec<f64> = run.questions.iter().map(|q| q.reports[idx].delta).collect();
        let selected: Vec<f64> =
            run.questions.iter().map(|q| q.reports[idx].nthr.as_ref().map_or(0, |n| n.selected_count()) as f64).collect();
        for q in &run.questions {
            let r = &q.reports[idx];
            per_question.push(vec![
                q.question.to_string(),
                fmt_f64(beta),
                eta.to_string(),
                fmt_opt(r.nthr.as_ref().and_then(|n| n.eta)),
                fmt_f64(r.delta),
                r.nthr.as_ref().map_or(0, |n| n.selected_count()).to_string(),
            ]);
        }
        let delta_flagged = pick(&delta);
        let gains: Vec<f64> = delta_flagged.iter().zip(&grpo_flagged).map(|(a, b)| a - b).collect();
        let max_diff = |other: &[f64]| delta.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rows.push(AblationRow {
            beta,
            eta,
            mean_delta: mean(&delta),
            mean_delta_flagged: mean(&delta_flagged),
            mean_gain_flagged: mean(&gains),
            not_worse_fraction_flagged: if gains.is_empty() {
                f64::NAN
            } else {
                gains.iter().filter(|&&x| x >= 0.0).count() as f64 / gains.len() as f64
            },
            mean_selected_tokens: mean(&selected),
            max_diff_grpo: max_diff(&grpo),
            max_diff_pos_only: max_diff(&pos),
        });
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.beta),
                r.eta.to_string(),
                fmt_f64(r.mean_delta),
                fmt_f64(r.mean_delta_flagged),
                fmt_f64(r.mean_gain_flagged),
                fmt_f64(r.not_worse_fraction_flagged),
                fmt_f64(r.mean_selected_tokens),
                fmt_f64(r.max_diff_grpo),
                fmt_f64(r.max_diff_pos_only),
            ]
        })
        .collect();
    dir.csv("ablate.csv", ABLATION_COLUMNS, &table)?;
    dir.csv("ablate_questions.csv", ABLATION_QUESTION_COLUMNS, &per_question)?;
    let mut summary = accounting_entries(&accounting, run.lr);
    summary.extend([
        ("flagged", grpo_flagged.len().to_string()),
        ("mean_delta_grpo_flagged", fmt_f64(mean(&grpo_flagged))),
        ("mean_delta_pos_only_flagged", fmt_f64(mean(&pick(&pos)))),
    ]);
    dir.summary("summary.csv", &summary)?;
    Ok(AblationOutcome {
        dir: dir.finish(cfg)?,
        accounting,
        lr: run.lr,
        flagged: grpo_flagged.len(),
        mean_delta_grpo_flagged: mean(&grpo_flagged),
        rows,
    })
}
