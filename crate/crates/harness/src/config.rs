//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors, so a typo cannot silently leave a default in place.
//! Lists are comma separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lld_core::nthr::{FastPathConfig, VocabularyRestriction};
use lld_core::objective::{EtaPolicy, UpdateConfig};
use lld_core::rollout::VarianceMode;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// How questions, their embedding priors and their rewards are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    /// Context embeddings of a question share an anchor aligned with one
    /// "mode" token; responses are rewarded on their final token.
    Anchored,
    /// I.i.d. context embeddings; responses are rewarded on their final token.
    Isotropic,
}

impl FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "anchored" => Ok(Self::Anchored),
            "isotropic" => Ok(Self::Isotropic),
            other => Err(format!("unknown task family {other:?}")),
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Anchored => "anchored",
            Self::Isotropic => "isotropic",
        })
    }
}

/// Vocabulary used for negative-token scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreVocabulary {
    Full,
    /// Response tokens plus the end token; scores become approximate.
    Response,
}

impl FromStr for ScoreVocabulary {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "response" => Ok(Self::Response),
            other => Err(format!("unknown score vocabulary {other:?}")),
        }
    }
}

impl std::fmt::Display for ScoreVocabulary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Response => "response",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskFamily,
    pub vocab_size: usize,
    pub dim: usize,
    pub group_size: usize,
    pub max_len: usize,
    pub questions: usize,
    pub seed: u64,
    pub temperature: f64,
    pub prior_rho: f64,
    pub prior_kappa: f64,
    pub prior_noise: f64,
    pub answer_set_size: usize,
    pub require_eos: bool,
    /// Variant is chosen per probe; the remaining fields apply to every probe.
    pub update: UpdateConfig,
    pub variance: VarianceMode,
    /// Always zero: the KL penalty is not part of the probed update.
    pub kl_coef: f64,
    pub eps_lld: f64,
    pub beta_grid: Vec<f64>,
    pub eta_grid: Vec<EtaPolicy>,
    pub k: Vec<usize>,
    pub lr_tolerance: f64,
    pub max_halvings: u32,
    pub score_vocabulary: ScoreVocabulary,
    pub shuffles: usize,
    /// Not part of the canonical form or the hash.
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskFamily::Anchored,
            vocab_size: 32,
            dim: 16,
            group_size: 8,
            max_len: 24,
            questions: 100,
            seed: 0,
            temperature: 0.6,
            prior_rho: 0.9,
            prior_kappa: 3.0,
            prior_noise: 1.0,
            answer_set_size: 10,
            require_eos: false,
            update: UpdateConfig::default(),
            variance: VarianceMode::Population,
            kl_coef: 0.0,
            eps_lld: 0.0,
            beta_grid: vec![f64::NEG_INFINITY, 0.0, 0.1, 1.0],
            eta_grid: vec![EtaPolicy::Fixed(0.0), EtaPolicy::SuccessRate, EtaPolicy::FailureRate, EtaPolicy::Balanced],
            k: vec![10, 15],
            lr_tolerance: 0.05,
            max_halvings: 40,
            score_vocabulary: ScoreVocabulary::Full,
            shuffles: 1000,
            out: PathBuf::from("out"),
        }
    }
}

/// Every key with its one-line documentation, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("task", "question family: anchored | isotropic"),
    ("vocab_size", "vocabulary size including the end token (the last id)"),
    ("dim", "embedding dimension"),
    ("group_size", "responses sampled per question"),
    ("max_len", "maximum response length in tokens"),
    ("questions", "questions generated per run"),
    ("seed", "master seed"),
    ("temperature", "sampling temperature"),
    ("prior_rho", "anchored family: correlation of context embeddings with the question anchor"),
    ("prior_kappa", "anchored family: logit margin of the mode token under the anchor"),
    ("prior_noise", "anchored family: scale of the isotropic part of the anchor"),
    ("answer_set_size", "accepted final tokens per question"),
    ("require_eos", "responses cut off at max_len are wrong"),
    ("clip_eps", "ratio clip range"),
    ("lr", "starting step size; halved until the first-order check holds"),
    ("length_norm", "divide the surrogate by the group's total token count"),
    ("variance", "advantage normalization: population | sample"),
    ("kl_coef", "KL penalty weight; only 0 is supported"),
    ("eps_lld", "likelihood displacement threshold on the mean log-likelihood change"),
    ("beta", "threshold scale of the mitigation suite"),
    ("eta", "attenuation of selected tokens in the mitigation suite: number | p | 1-p | balanced"),
    ("beta_grid", "threshold scales of the ablation suite; -inf selects every negative token"),
    ("eta_grid", "attenuation policies of the ablation suite"),
    ("k", "cut-offs of the top-K overlap"),
    ("lr_tolerance", "allowed relative gap between measured and first-order change"),
    ("max_halvings", "step-size halvings before calibration fails"),
    ("score_vocabulary", "vocabulary of negative-token scores: full | response"),
    ("shuffles", "random rankings in the overlap control"),
    ("out", "output directory"),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| HarnessError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "group_size" => self.group_size = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "questions" => self.questions = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "prior_rho" => self.prior_rho = parse_value(key, value)?,
            "prior_kappa" => self.prior_kappa = parse_value(key, value)?,
            "prior_noise" => self.prior_noise = parse_value(key, value)?,
            "answer_set_size" => self.answer_set_size = parse_value(key, value)?,
            "require_eos" => self.require_eos = parse_value(key, value)?,
            "clip_eps" => self.update.clip_eps = parse_value(key, value)?,
            "lr" => self.update.lr = parse_value(key, value)?,
            "length_norm" => self.update.length_norm = parse_value(key, value)?,
            "variance" => self.variance = parse_value(key, value)?,
            "kl_coef" => self.kl_coef = parse_value(key, value)?,
            "eps_lld" => self.eps_lld = parse_value(key, value)?,
            "beta" => self.update.beta = parse_value(key, value)?,
            "eta" => self.update.eta = parse_value(key, value)?,
            "beta_grid" => self.beta_grid = parse_list(key, value)?,
            "eta_grid" => self.eta_grid = parse_list(key, value)?,
            "k" => self.k = parse_list(key, value)?,
            "lr_tolerance" => self.lr_tolerance = parse_value(key, value)?,
            "max_halvings" => self.max_halvings = parse_value(key, value)?,
            "score_vocabulary" => self.score_vocabulary = parse_value(key, value)?,
            "shuffles" => self.shuffles = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "task" => self.task.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "dim" => self.dim.to_string(),
            "group_size" => self.group_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "questions" => self.questions.to_string(),
            "seed" => self.seed.to_string(),
            "temperature" => self.temperature.to_string(),
            "prior_rho" => self.prior_rho.to_string(),
            "prior_kappa" => self.prior_kappa.to_string(),
            "prior_noise" => self.prior_noise.to_string(),
            "answer_set_size" => self.answer_set_size.to_string(),
            "require_eos" => self.require_eos.to_string(),
            "clip_eps" => self.update.clip_eps.to_string(),
            "lr" => self.update.lr.to_string(),
            "length_norm" => self.update.length_norm.to_string(),
            "variance" => self.variance.to_string(),
            "kl_coef" => self.kl_coef.to_string(),
            "eps_lld" => self.eps_lld.to_string(),
            "beta" => self.update.beta.to_string(),
            "eta" => self.update.eta.to_string(),
            "beta_grid" => join(&self.beta_grid),
            "eta_grid" => join(&self.eta_grid),
            "k" => join(&self.k),
            "lr_tolerance" => self.lr_tolerance.to_string(),
            "max_halvings" => self.max_halvings.to_string(),
            "score_vocabulary" => self.score_vocabulary.to_string(),
            "shuffles" => self.shuffles.to_string(),
            "out" => self.out.display().to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// One `key = value` line per key except `out`; parsing it back yields the
    /// same configuration.
    pub fn canonical(&self) -> String {
        let mut text = String::new();
        for (key, _) in KEYS.iter().filter(|(k, _)| *k != "out") {
            let _ = writeln!(text, "{key} = {}", self.value_of(key));
        }
        text
    }

    /// The canonical form with each key's documentation, plus `out`.
    pub fn documented(&self) -> String {
        let mut text = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(text, "# {doc}\n{key} = {}", self.value_of(key));
        }
        text
    }

    /// Hex SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn fast_path(&self) -> FastPathConfig {
        FastPathConfig {
            vocabulary: match self.score_vocabulary {
                ScoreVocabulary::Full => VocabularyRestriction::Full,
                ScoreVocabulary::Response => VocabularyRestriction::ResponseTokens,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.vocab_size < 3 {
            return fail(format!("vocab_size must be at least 3, got {}", self.vocab_size));
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.group_size < 2 {
            return fail(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.max_len == 0 || self.questions == 0 {
            return fail("max_len and questions must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.prior_rho) {
            return fail(format!("prior_rho must lie in [0, 1], got {}", self.prior_rho));
        }
        if !self.prior_kappa.is_finite() || !(self.prior_noise >= 0.0 && self.prior_noise.is_finite()) {
            return fail("prior_kappa must be finite and prior_noise finite and non-negative".into());
        }
        if self.answer_set_size == 0 || self.answer_set_size > self.vocab_size - 1 {
            return fail(format!("answer_set_size must lie in [1, {}], got {}", self.vocab_size - 1, self.answer_set_size));
        }
        self.update.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.update.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.update.lr));
        }
        if self.kl_coef != 0.0 {
            return fail(format!("kl_coef must be 0; the KL penalty is not implemented, got {}", self.kl_coef));
        }
        if !(self.eps_lld >= 0.0 && self.eps_lld.is_finite()) {
            return fail(format!("eps_lld must be finite and non-negative, got {}", self.eps_lld));
        }
        if self.beta_grid.is_empty() || self.beta_grid.iter().any(|b| b.is_nan()) {
            return fail("beta_grid must be a non-empty list of numbers".into());
        }
        if self.eta_grid.is_empty() {
            return fail("eta_grid must not be empty".into());
        }
        if self.k.is_empty() || self.k.contains(&0) {
            return fail("k must be a non-empty list of positive cut-offs".into());
        }
        if !(self.lr_tolerance > 0.0 && self.lr_tolerance < 1.0) {
            return fail(format!("lr_tolerance must lie in (0, 1), got {}", self.lr_tolerance));
        }
        if self.max_halvings > 200 {
            return fail(format!("max_halvings must be at most 200, got {}", self.max_halvings));
        }
        if self.shuffles == 0 {
            return fail("shuffles must be positive".into());
        }
        Ok(())
    }
}
