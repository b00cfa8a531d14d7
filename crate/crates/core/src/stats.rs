//! Wilcoxon signed-rank test for paired weak/strong quality scores.
//!
//! Differences are `strong − weak`. Zero differences are dropped and tied
//! magnitudes share their average rank. Ranks are kept doubled as integers
//! so the exact null distribution can be enumerated without rounding.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest effective sample size for which the exact distribution is used.
pub const EXACT_CUTOFF: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedScores {
    pub weak: Vec<f64>,
    pub strong: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// Strong scores tend to exceed weak scores.
    #[default]
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub z: Option<f64>,
    pub p_value: f64,
    pub method: Method,
    pub alternative: Alternative,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("paired scores have different lengths ({weak} weak, {strong} strong)")]
    LengthMismatch { weak: usize, strong: usize },
    #[error("no paired scores")]
    Empty,
    #[error("score at index {0} is not finite")]
    NotFinite(usize),
    #[error("exact enumeration limited to n_eff <= 30, got {0}")]
    TooLargeForExact(usize),
}

impl PairedScores {
    pub fn new(weak: Vec<f64>, strong: Vec<f64>) -> Result<Self, StatsError> {
        let s = Self { weak, strong };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.weak.len() != self.strong.len() {
            return Err(StatsError::LengthMismatch { weak: self.weak.len(), strong: self.strong.len() });
        }
        if self.weak.is_empty() {
            return Err(StatsError::Empty);
        }
        if let Some(i) = (0..self.weak.len()).find(|&i| !(self.weak[i].is_finite() && self.strong[i].is_finite())) {
            return Err(StatsError::NotFinite(i));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weak.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weak.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self { weak: self.strong.clone(), strong: self.weak.clone() }
    }
}

/// Nonzero differences with their doubled average ranks.
#[derive(Debug, Clone)]
struct Ranked {
    positive: Vec<bool>,
    rank2: Vec<u64>,
    /// Sizes of tie groups, for the variance correction.
    ties: Vec<u64>,
}

fn rank(pairs: &PairedScores) -> Ranked {
    let mut d: Vec<f64> = pairs.strong.iter().zip(&pairs.weak).map(|(s, w)| s - w).filter(|d| *d != 0.0).collect();
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let n = d.len();
    let mut rank2 = vec![0u64; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled: (i+1)+(j+1)
        let r2 = (i + j + 2) as u64;
        rank2[i..=j].fill(r2);
        ties.push((j - i + 1) as u64);
        i = j + 1;
    }
    Ranked { positive: d.iter().map(|x| *x > 0.0).collect(), rank2, ties }
}

/// Runs the test, choosing exact enumeration when `n_eff <= EXACT_CUTOFF`.
pub fn wilcoxon_signed_rank(pairs: &PairedScores, alternative: Alternative) -> Result<WilcoxonResult, StatsError> {
    pairs.validate()?;
    let n = rank(pairs).rank2.len();
    let method = if n <= EXACT_CUTOFF { Method::Exact } else { Method::NormalApprox };
    wilcoxon_with_method(pairs, alternative, method)
}

/// Runs the test with a forced method. Exact is capped at `n_eff <= 30`.
pub fn wilcoxon_with_method(
    pairs: &PairedScores,
    alternative: Alternative,
    method: Method,
) -> Result<WilcoxonResult, StatsError> {
    pairs.validate()?;
    let r = rank(pairs);
    let n = r.rank2.len();
    let w_plus2: u64 = r.rank2.iter().zip(&r.positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let total2 = (n * (n + 1)) as u64;
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;

    if n == 0 {
        return Ok(WilcoxonResult {
            n_effective: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            z: None,
            p_value: 1.0,
            method: Method::Exact,
            alternative,
        });
    }

    let (z, p_value) = match method {
        Method::Exact => {
            if n > 30 {
                return Err(StatsError::TooLargeForExact(n));
            }
            let (upper, lower) = exact_tails(&r.rank2, w_plus2);
            let p = match alternative {
                Alternative::Greater => upper,
                Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
            };
            (None, p)
        }
        Method::NormalApprox => {
            let nf = n as f64;
            let mu = nf * (nf + 1.0) / 4.0;
            let tie_term: f64 = r.ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
            let sigma = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
            let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
            match alternative {
                Alternative::Greater => {
                    let z = (w_plus - mu - 0.5) / sigma;
                    (Some(z), 1.0 - std_normal.cdf(z))
                }
                Alternative::TwoSided => {
                    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / sigma;
                    (Some(z), (2.0 * (1.0 - std_normal.cdf(z))).min(1.0))
                }
            }
        }
    };
    Ok(WilcoxonResult { n_effective: n, w_plus, w_minus, z, p_value: p_value.clamp(0.0, 1.0), method, alternative })
}

/// `(P(W+ >= obs), P(W+ <= obs))` under the null, via a subset-sum count
/// over doubled ranks.
fn exact_tails(rank2: &[u64], observed2: u64) -> (f64, f64) {
    let total: u64 = rank2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in rank2 {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = (1u64 << rank2.len()) as f64;
    let upper: u64 = counts[observed2 as usize..].iter().sum();
    let lower: u64 = counts[..=observed2 as usize].iter().sum();
    (upper as f64 / all, lower as f64 / all)
}
