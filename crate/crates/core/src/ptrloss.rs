//! Reference implementation of the weighted refinement loss and a
//! finite-difference gradient checker.
//!
//! For steps `y_1..y_n` (drafts, then the final answer) with step
//! probabilities `p[t]` and adjacent-step consistencies `c[t]`:
//!
//! ```text
//! L = -λ1·ln p[n]  +  λ2·Σ_{t=2..n} g(c[t])  +  λ3·Σ_{t=1..n} β_t·(1 - p[t])
//! ```
//!
//! where `g(c) = 1 - c` by default so that consistent drafts lower the loss.
//! Setting `paper_literal_consistency_sign` uses `g(c) = c` instead.
//!
//! The gradient checker runs a toy model: every token position has its own
//! logits, a step's probability is the product (optionally the geometric
//! mean) of the softmax probabilities of its target tokens, and positions
//! that belong to masked spans outside any step contribute nothing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SpanRole;

/// Smallest probability accepted before taking a logarithm.
pub const MIN_PROB: f64 = 1e-12;

/// Gradient components whose magnitude is below this scale are compared on
/// an absolute basis at this scale in [`relative_error`].
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaRepr", into = "BetaRepr")]
pub enum BetaSchedule {
    Uniform,
    Linear,
    Custom(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    Named(String),
    List(Vec<f64>),
}

impl TryFrom<BetaRepr> for BetaSchedule {
    type Error = String;

    fn try_from(r: BetaRepr) -> Result<Self, String> {
        match r {
            BetaRepr::Named(s) if s == "uniform" => Ok(BetaSchedule::Uniform),
            BetaRepr::Named(s) if s == "linear" => Ok(BetaSchedule::Linear),
            BetaRepr::Named(s) => Err(format!("unknown beta schedule `{s}`")),
            BetaRepr::List(v) => Ok(BetaSchedule::Custom(v)),
        }
    }
}

impl From<BetaSchedule> for BetaRepr {
    fn from(b: BetaSchedule) -> Self {
        match b {
            BetaSchedule::Uniform => BetaRepr::Named("uniform".into()),
            BetaSchedule::Linear => BetaRepr::Named("linear".into()),
            BetaSchedule::Custom(v) => BetaRepr::List(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    #[serde(rename = "beta_schedule", alias = "beta")]
    pub beta: BetaSchedule,
    pub paper_literal_consistency_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.1,
            lambda3: 0.1,
            beta: BetaSchedule::Linear,
            paper_literal_consistency_sign: false,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("loss config: {0}")]
    Config(String),
    #[error("expected {expected} consistency values for {steps} steps, got {got}")]
    DimensionMismatch { steps: usize, expected: usize, got: usize },
    #[error("step probability p[{index}] = {value} outside (0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("step probability p[{index}] = {value:e} below the log floor {MIN_PROB:e}")]
    ProbabilityTooSmall { index: usize, value: f64 },
    #[error("consistency value c[{index}] = {value} outside [0, 1]")]
    ConsistencyOutOfRange { index: usize, value: f64 },
    #[error("toy instance: {0}")]
    Toy(String),
}

impl LossConfig {
    pub fn new(lambdas: [f64; 3], beta: BetaSchedule) -> Result<Self, LossError> {
        let cfg = Self {
            lambda1: lambdas[0],
            lambda2: lambdas[1],
            lambda3: lambdas[2],
            beta,
            paper_literal_consistency_sign: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let l = self.lambdas();
        if l.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(LossError::Config(format!("lambdas must be finite and >= 0, got {l:?}")));
        }
        let sum: f64 = l.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(LossError::Config(format!("lambda1 + lambda2 + lambda3 must equal 1, got {sum}")));
        }
        if let BetaSchedule::Custom(b) = &self.beta {
            if b.is_empty() || b.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(LossError::Config("custom beta must be a nonempty list of values >= 0".into()));
            }
            let s: f64 = b.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(LossError::Config(format!("custom beta must sum to 1, got {s}")));
            }
        }
        Ok(())
    }
}

/// Confidence weights for `n` steps. Linear gives `β_t = t / (n(n+1)/2)`.
pub fn beta_schedule(n: usize, kind: &BetaSchedule) -> Result<Vec<f64>, LossError> {
    if n == 0 {
        return Err(LossError::Config("beta schedule needs at least one step".into()));
    }
    match kind {
        BetaSchedule::Uniform => Ok(vec![1.0 / n as f64; n]),
        BetaSchedule::Linear => {
            let total = (n * (n + 1) / 2) as f64;
            Ok((1..=n).map(|t| t as f64 / total).collect())
        }
        BetaSchedule::Custom(b) if b.len() == n => Ok(b.clone()),
        BetaSchedule::Custom(b) => {
            Err(LossError::Config(format!("custom beta has {} entries but there are {n} steps", b.len())))
        }
    }
}

/// Per-step probabilities `p[t]`, each in `[MIN_PROB, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProbabilities(Vec<f64>);

impl StepProbabilities {
    pub fn new(p: Vec<f64>) -> Result<Self, LossError> {
        if p.is_empty() {
            return Err(LossError::Config("at least one step probability is required".into()));
        }
        for (index, &value) in p.iter().enumerate() {
            if !(value > 0.0 && value <= 1.0) {
                return Err(LossError::ProbabilityOutOfRange { index, value });
            }
            if value < MIN_PROB {
                return Err(LossError::ProbabilityTooSmall { index, value });
            }
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Adjacent-step consistencies `c[t]` for `t = 2..n`, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyValues(Vec<f64>);

impl ConsistencyValues {
    pub fn new(c: Vec<f64>) -> Result<Self, LossError> {
        for (index, &value) in c.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(LossError::ConsistencyOutOfRange { index, value });
            }
        }
        Ok(Self(c))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub term_answer: f64,
    pub term_consistency: f64,
    pub term_confidence: f64,
    pub total: f64,
}

pub fn ptr_loss(p: &StepProbabilities, c: &ConsistencyValues, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    let p = p.as_slice();
    let c = c.as_slice();
    let n = p.len();
    if c.len() != n - 1 {
        return Err(LossError::DimensionMismatch { steps: n, expected: n - 1, got: c.len() });
    }
    let beta = beta_schedule(n, &cfg.beta)?;

    // `+ 0.0` folds a signed zero (from ln 1 or a zero weight) into +0.
    let term_answer = -cfg.lambda1 * p[n - 1].ln() + 0.0;
    let g = |x: f64| if cfg.paper_literal_consistency_sign { x } else { 1.0 - x };
    let term_consistency = cfg.lambda2 * c.iter().map(|&x| g(x)).sum::<f64>() + 0.0;
    let term_confidence = cfg.lambda3 * beta.iter().zip(p).map(|(b, pt)| b * (1.0 - pt)).sum::<f64>();
    Ok(LossBreakdown {
        term_answer,
        term_consistency,
        term_confidence,
        total: term_answer + term_consistency + term_confidence,
    })
}

/// `∂L/∂p[t]` for every step.
pub fn loss_grad_wrt_p(p: &StepProbabilities, cfg: &LossConfig) -> Result<Vec<f64>, LossError> {
    let p = p.as_slice();
    let n = p.len();
    let beta = beta_schedule(n, &cfg.beta)?;
    let mut g: Vec<f64> = beta.iter().map(|b| -cfg.lambda3 * b).collect();
    g[n - 1] -= cfg.lambda1 / p[n - 1];
    Ok(g)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    /// `p[t]` is the raw product of token probabilities.
    #[default]
    Product,
    /// `p[t]` is the geometric mean of token probabilities.
    GeometricMean,
}

/// One token position of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPosition {
    pub role: SpanRole,
    /// 0-based step this position scores, `None` for query and instruction
    /// tokens.
    pub step: Option<usize>,
    pub logits: Vec<f64>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyInstance {
    pub steps: usize,
    pub positions: Vec<ToyPosition>,
    pub consistency: Vec<f64>,
    #[serde(default)]
    pub length_norm: LengthNorm,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl ToyInstance {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::Toy(m));
        if self.steps == 0 {
            return bad("at least one step is required".into());
        }
        if self.consistency.len() != self.steps - 1 {
            return bad(format!("{} consistency values for {} steps", self.consistency.len(), self.steps));
        }
        let mut per_step = vec![0usize; self.steps];
        for (i, pos) in self.positions.iter().enumerate() {
            if pos.logits.is_empty() || pos.target >= pos.logits.len() {
                return bad(format!("position {i}: target outside vocabulary"));
            }
            let expected_step = match pos.role {
                SpanRole::Query | SpanRole::RefineInstruction => pos.step.is_none(),
                SpanRole::Thought => pos.step.is_some_and(|s| s + 1 < self.steps),
                SpanRole::Answer => pos.step == Some(self.steps - 1),
            };
            if !expected_step {
                return bad(format!("position {i}: role {:?} cannot score step {:?}", pos.role, pos.step));
            }
            if let Some(s) = pos.step {
                per_step[s] += 1;
            }
        }
        if let Some(s) = per_step.iter().position(|&c| c == 0) {
            return bad(format!("step {s} has no positions"));
        }
        Ok(())
    }

    /// Step probabilities under the toy model.
    pub fn step_probabilities(&self) -> Vec<f64> {
        let mut log_p = vec![0.0; self.steps];
        let mut counts = vec![0usize; self.steps];
        for pos in &self.positions {
            if let Some(s) = pos.step {
                log_p[s] += log_softmax(&pos.logits)[pos.target];
                counts[s] += 1;
            }
        }
        log_p
            .iter()
            .zip(&counts)
            .map(|(lp, &k)| match self.length_norm {
                LengthNorm::Product => lp.exp(),
                LengthNorm::GeometricMean => (lp / k.max(1) as f64).exp(),
            })
            .collect()
    }

    pub fn loss(&self, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
        self.validate()?;
        let p = StepProbabilities::new(self.step_probabilities())?;
        let c = ConsistencyValues::new(self.consistency.clone())?;
        ptr_loss(&p, &c, cfg)
    }

    /// Analytic `∂L/∂logit`, shaped like the positions' logits. Uses
    /// `∂p_t/∂z_k = s·p_t·(1[k = target] - softmax_k)` with `s = 1` for the
    /// product and `s = 1/len` for the geometric mean.
    pub fn analytic_grad(&self, cfg: &LossConfig) -> Result<Vec<Vec<f64>>, LossError> {
        self.validate()?;
        let p_raw = self.step_probabilities();
        let p = StepProbabilities::new(p_raw.clone())?;
        let dl_dp = loss_grad_wrt_p(&p, cfg)?;
        let mut counts = vec![0usize; self.steps];
        for s in self.positions.iter().filter_map(|p| p.step) {
            counts[s] += 1;
        }
        Ok(self
            .positions
            .iter()
            .map(|pos| match pos.step {
                None => vec![0.0; pos.logits.len()],
                Some(s) => {
                    let scale = match self.length_norm {
                        LengthNorm::Product => 1.0,
                        LengthNorm::GeometricMean => 1.0 / counts[s] as f64,
                    };
                    let coeff = dl_dp[s] * p_raw[s] * scale;
                    log_softmax(&pos.logits)
                        .iter()
                        .enumerate()
                        .map(|(k, ls)| {
                            let onehot = if k == pos.target { 1.0 } else { 0.0 };
                            coeff * (onehot - ls.exp())
                        })
                        .collect()
                }
            })
            .collect())
    }

    /// `−Σ w·ln softmax(target)` over positions whose span carries loss, with
    /// answer weight 1 and every other role masked to 0.
    pub fn masked_answer_nll(&self) -> f64 {
        self.positions.iter().filter(|p| !p.role.is_masked()).map(|p| -log_softmax(&p.logits)[p.target]).sum()
    }

    /// Random instance: `steps` steps of 1–3 target tokens each, a few query
    /// tokens, an instruction token after every draft, logits in [-2, 2].
    pub fn random<R: Rng>(rng: &mut R, steps: usize, vocab: usize) -> Self {
        let steps = steps.max(1);
        let vocab = vocab.max(2);
        let mut position = |role, step| ToyPosition {
            role,
            step,
            logits: (0..vocab).map(|_| rng.random_range(-2.0..=2.0)).collect(),
            target: rng.random_range(0..vocab),
        };
        let mut positions = Vec::new();
        for _ in 0..2 {
            positions.push(position(SpanRole::Query, None));
        }
        for s in 0..steps {
            let (role, n_tokens) = if s + 1 == steps { (SpanRole::Answer, 3) } else { (SpanRole::Thought, 2) };
            for _ in 0..n_tokens {
                positions.push(position(role, Some(s)));
            }
            if role == SpanRole::Thought {
                positions.push(position(SpanRole::RefineInstruction, None));
            }
        }
        let consistency = (1..steps).map(|_| rng.random_range(0.0..=1.0)).collect();
        Self { steps, positions, consistency, length_norm: LengthNorm::Product }
    }
}

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Max relative error between analytic and central-difference gradients
/// over every logit of the instance.
pub fn grad_check(inst: &ToyInstance, cfg: &LossConfig, eps: f64) -> Result<f64, LossError> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(LossError::Config(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let analytic = inst.analytic_grad(cfg)?;
    let mut probe = inst.clone();
    let mut worst = 0.0f64;
    for (i, row) in analytic.iter().enumerate() {
        for (k, &a) in row.iter().enumerate() {
            let orig = probe.positions[i].logits[k];
            probe.positions[i].logits[k] = orig + eps;
            let up = probe.loss(cfg)?.total;
            probe.positions[i].logits[k] = orig - eps;
            let down = probe.loss(cfg)?.total;
            probe.positions[i].logits[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
