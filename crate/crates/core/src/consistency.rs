//! Thought/answer consistency scoring and sample filtering.
//!
//! The per-pair consistency is a weighted blend of distinct word n-gram
//! Jaccard similarity (surface overlap) and embedding similarity (meaning).
//! A thought sequence scores the fraction of its thoughts whose consistency
//! with the final answer reaches `delta`; sequences scoring below `kappa`
//! are dropped.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::generation::{GeneratedSample, RefinedAnswer, ThoughtSequence};
use crate::provider::{EmbeddingVector, ProviderError, TextEmbedder};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub ngram_order: usize,
    pub delta: f64,
    pub kappa: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { alpha1: 0.3, alpha2: 0.7, ngram_order: 2, delta: 0.5, kappa: 0.5 }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), ConsistencyError> {
        let bad = |m: String| Err(ConsistencyError::Config(m));
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return bad(format!("alpha weights must be >= 0, got ({}, {})", self.alpha1, self.alpha2));
        }
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-9 {
            return bad(format!("alpha1 + alpha2 must equal 1, got {}", self.alpha1 + self.alpha2));
        }
        if self.ngram_order == 0 {
            return bad("ngram_order must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.delta) || !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("delta and kappa must lie in [0, 1], got ({}, {})", self.delta, self.kappa));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ConsistencyError {
    #[error("consistency config: {0}")]
    Config(String),
    #[error("thought sequence is empty")]
    EmptySequence,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    pub per_thought: Vec<f64>,
    pub c_value: f64,
    pub kept: bool,
}

impl ConsistencyScore {
    /// Fraction of `per_thought` values at or above `delta`.
    pub fn c_from(per_thought: &[f64], delta: f64) -> f64 {
        let hits = per_thought.iter().filter(|&&f| f >= delta).count();
        hits as f64 / per_thought.len() as f64
    }
}

/// Jaccard index of the distinct word n-gram sets of `a` and `b`
/// (lowercased, whitespace-tokenized). Two empty sets score 1, one empty set
/// scores 0.
pub fn ngram_sim(a: &str, b: &str, n: usize) -> f64 {
    let ga = text::ngram_set(&text::words(a), n);
    let gb = text::ngram_set(&text::words(b), n);
    text::jaccard(&ga, &gb).unwrap_or(1.0)
}

/// Cosine similarity of the two embeddings mapped affinely onto [0, 1].
pub fn embed_sim(a: &str, b: &str, embedder: &dyn TextEmbedder) -> Result<f64, ProviderError> {
    let ea = embedder.embed_text(a)?;
    let eb = embedder.embed_text(b)?;
    Ok(((1.0 + ea.cosine(&eb)) / 2.0).clamp(0.0, 1.0))
}

pub fn f_cons(a: &str, b: &str, cfg: &ConsistencyConfig, embedder: &dyn TextEmbedder) -> Result<f64, ConsistencyError> {
    cfg.validate()?;
    Ok(f_cons_unchecked(a, b, cfg, embedder)?)
}

fn f_cons_unchecked(
    a: &str,
    b: &str,
    cfg: &ConsistencyConfig,
    embedder: &dyn TextEmbedder,
) -> Result<f64, ProviderError> {
    let mut score = 0.0;
    if cfg.alpha1 > 0.0 {
        score += cfg.alpha1 * ngram_sim(a, b, cfg.ngram_order);
    }
    if cfg.alpha2 > 0.0 {
        score += cfg.alpha2 * embed_sim(a, b, embedder)?;
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Scores thoughts against a final answer.
pub fn score_texts<S: AsRef<str> + Sync>(
    thoughts: &[S],
    final_answer: &str,
    cfg: &ConsistencyConfig,
    embedder: &dyn TextEmbedder,
) -> Result<ConsistencyScore, ConsistencyError> {
    cfg.validate()?;
    if thoughts.is_empty() {
        return Err(ConsistencyError::EmptySequence);
    }
    let per_thought = thoughts
        .iter()
        .map(|t| f_cons_unchecked(t.as_ref(), final_answer, cfg, embedder))
        .collect::<Result<Vec<_>, _>>()?;
    let c_value = ConsistencyScore::c_from(&per_thought, cfg.delta);
    Ok(ConsistencyScore { per_thought, c_value, kept: c_value >= cfg.kappa })
}

pub fn seq_consistency(
    s: &ThoughtSequence,
    final_answer: &RefinedAnswer,
    cfg: &ConsistencyConfig,
    embedder: &dyn TextEmbedder,
) -> Result<ConsistencyScore, ConsistencyError> {
    let texts: Vec<&str> = s.thoughts.iter().map(|t| t.text.as_str()).collect();
    score_texts(&texts, &final_answer.text, cfg, embedder)
}

/// One line of the filter audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub query_id: String,
    pub per_thought: Vec<f64>,
    pub c_value: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample: GeneratedSample,
    pub score: ConsistencyScore,
}

impl ScoredSample {
    pub fn audit(&self) -> FilterAudit {
        FilterAudit {
            query_id: self.sample.query.id.clone(),
            per_thought: self.score.per_thought.clone(),
            c_value: self.score.c_value,
            kept: self.score.kept,
        }
    }
}

/// Partitions samples into (kept, dropped), both in input order and both
/// carrying their scores.
pub fn filter_samples(
    samples: Vec<GeneratedSample>,
    cfg: &ConsistencyConfig,
    embedder: &dyn TextEmbedder,
) -> Result<(Vec<ScoredSample>, Vec<ScoredSample>), ConsistencyError> {
    cfg.validate()?;
    let scores = samples
        .par_iter()
        .map(|s| seq_consistency(&s.thoughts, &s.answer, cfg, embedder))
        .collect::<Result<Vec<_>, _>>()?;
    let (kept, dropped) = samples
        .into_iter()
        .zip(scores)
        .map(|(sample, score)| ScoredSample { sample, score })
        .partition(|s| s.score.kept);
    Ok((kept, dropped))
}

/// Memoizes embeddings by exact text.
pub struct CachedEmbedder<'a> {
    inner: &'a dyn TextEmbedder,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<'a> CachedEmbedder<'a> {
    pub fn new(inner: &'a dyn TextEmbedder) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TextEmbedder for CachedEmbedder<'_> {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if let Some(v) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(text) {
            return Ok(v.clone());
        }
        // computed outside the lock; concurrent misses on one key just race
        let v = self.inner.embed_text(text)?;
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).insert(text.to_owned(), v.clone());
        Ok(v)
    }
}
