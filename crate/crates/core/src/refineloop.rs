//! Inference-time refinement: ask, then repeatedly show the model its own
//! earlier answers and ask for a better one.

use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::generation::render;
use crate::provider::{Client, GenerationParams, ProviderError};

/// Built-in refinement instructions as `(id, instruction)`.
pub const BUILTIN_INSTRUCTIONS: [(&str, &str); 5] = [
    (
        "review",
        "Assume that this thought could be either correct or incorrect. Carefully review the thought and provide a better answer.",
    ),
    (
        "assess",
        "Review your previous thought and assess whether it's correct. Then, provide a better response based on your answer.",
    ),
    (
        "regardless",
        "Regardless of whether your previous thought is correct or not, provide a better answer.",
    ),
    ("continue", "Please continue thinking and refine your answer"),
    ("precise", "Please further think about and give me a more precise and professional answer."),
];

pub const DEFAULT_PROMPT_ID: &str = "review";

#[derive(Debug, Clone, thiserror::Error)]
pub enum RefineError {
    #[error("refine config: {0}")]
    Config(String),
    #[error("query {query_id}: iteration {iteration} failed after {} completed: {source}", session.traces.len())]
    Aborted {
        query_id: String,
        iteration: u32,
        /// Traces completed before the failure; `session.aborted` is set.
        session: Box<RefineSession>,
        #[source]
        source: ProviderError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinePrompt {
    pub id: String,
    pub text: String,
}

impl RefinePrompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, RefineError> {
        let p = Self { id: id.into(), text: text.into() };
        for ph in ["{history}", "{query}"] {
            if !p.text.contains(ph) {
                return Err(RefineError::Config(format!("prompt `{}` is missing {ph}", p.id)));
            }
        }
        Ok(p)
    }

    /// Wraps a bare instruction: question, prior answers, then the
    /// instruction.
    pub fn from_instruction(id: &str, instruction: &str) -> Self {
        Self { id: id.to_owned(), text: format!("Question: {{query}}\n\n{{history}}\n\n{instruction}") }
    }

    pub fn builtin(id: &str) -> Option<Self> {
        BUILTIN_INSTRUCTIONS.iter().find(|(k, _)| *k == id).map(|(k, text)| Self::from_instruction(k, text))
    }

    pub fn builtins() -> Vec<Self> {
        BUILTIN_INSTRUCTIONS.iter().map(|(k, text)| Self::from_instruction(k, text)).collect()
    }

    pub fn render(&self, query: &str, history: &str) -> String {
        render(&self.text, &[("query", query), ("history", history)])
    }
}

impl Default for RefinePrompt {
    fn default() -> Self {
        Self::builtin(DEFAULT_PROMPT_ID).expect("default prompt is built in")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TemperatureSchedule {
    Fixed {
        value: f64,
    },
    /// `start · factor^(i−1)` at iteration `i`.
    Decaying {
        start: f64,
        factor: f64,
    },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self::Fixed { value: 0.0 }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<(), RefineError> {
        let ok = match *self {
            Self::Fixed { value } => value.is_finite() && value >= 0.0,
            Self::Decaying { start, factor } => start.is_finite() && start >= 0.0 && factor > 0.0 && factor <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(RefineError::Config(format!("invalid temperature schedule {self:?}")))
        }
    }

    pub fn at(&self, iteration: u32) -> f64 {
        match *self {
            Self::Fixed { value } => value,
            Self::Decaying { start, factor } => start * factor.powi(iteration.saturating_sub(1) as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    #[default]
    Freeform,
    Boxed,
    ChoiceLetter,
    CodeBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub text: String,
    /// The format did not match and the whole trimmed response was used.
    pub fallback: bool,
}

static CODE_BLOCK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[^\n`]*\n(.*?)```").expect("static regex"));

pub fn extract_answer(response: &str, format: AnswerFormat) -> Extraction {
    let found = match format {
        AnswerFormat::Freeform => Some(response.trim().to_owned()),
        AnswerFormat::Boxed => last_boxed(response),
        AnswerFormat::ChoiceLetter => last_choice_letter(response).map(String::from),
        AnswerFormat::CodeBlock => {
            CODE_BLOCK.captures_iter(response).last().map(|c| c[1].trim_end_matches('\n').to_owned())
        }
    };
    match found {
        Some(text) => Extraction { text, fallback: false },
        None => Extraction { text: response.trim().to_owned(), fallback: true },
    }
}

fn last_boxed(s: &str) -> Option<String> {
    let start = s.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, c) in s[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(s[start..start + i].trim().to_owned());
                }
            }
            _ => {}
        }
    }
    None
}

fn last_choice_letter(s: &str) -> Option<char> {
    let chars: Vec<char> = s.chars().collect();
    (0..chars.len()).rev().find_map(|i| {
        let c = chars[i];
        let standalone = ('A'..='E').contains(&c)
            && (i == 0 || !chars[i - 1].is_alphanumeric())
            && chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
        standalone.then_some(c)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub prompt: String,
    pub response: String,
    pub extracted: String,
    pub temperature: f64,
    #[serde(default)]
    pub extraction_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSession {
    pub query_id: String,
    pub traces: Vec<IterationTrace>,
    #[serde(rename = "final")]
    pub final_answer: String,
    /// Set when a provider failure cut the session short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub k: u32,
    pub format: AnswerFormat,
    pub last_only: bool,
    pub stop_on_fixpoint: bool,
    pub max_tokens: u32,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { k: 3, format: AnswerFormat::Freeform, last_only: false, stop_on_fixpoint: false, max_tokens: 512 }
    }
}

fn history(traces: &[IterationTrace], last_only: bool) -> String {
    let from = if last_only { traces.len().saturating_sub(1) } else { 0 };
    traces[from..]
        .iter()
        .map(|t| format!("Previous thought {}: {}", t.iteration, t.extracted))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs up to `opts.k` iterations. The first prompt is the bare query.
pub fn run_iterations(
    q: &Query,
    client: &Client,
    prompt: &RefinePrompt,
    sched: &TemperatureSchedule,
    opts: &RefineOptions,
) -> Result<RefineSession, RefineError> {
    if opts.k == 0 {
        return Err(RefineError::Config("k must be at least 1".into()));
    }
    sched.validate()?;
    let mut traces: Vec<IterationTrace> = Vec::with_capacity(opts.k as usize);
    for iteration in 1..=opts.k {
        let text =
            if iteration == 1 { q.text.clone() } else { prompt.render(&q.text, &history(&traces, opts.last_only)) };
        let temperature = sched.at(iteration);
        let params = GenerationParams { temperature, max_tokens: opts.max_tokens, ..GenerationParams::default() };
        let response = match client.complete(&text, &params) {
            Ok(mut out) => out.swap_remove(0),
            Err(source) => {
                let session = RefineSession {
                    query_id: q.id.clone(),
                    final_answer: traces.last().map(|t| t.extracted.clone()).unwrap_or_default(),
                    traces,
                    aborted: Some(format!("iteration {iteration}: {source}")),
                };
                return Err(RefineError::Aborted {
                    query_id: q.id.clone(),
                    iteration,
                    session: Box::new(session),
                    source,
                });
            }
        };
        let ex = extract_answer(&response, opts.format);
        if ex.fallback {
            tracing::warn!(query_id = %q.id, iteration, "answer format not found; using whole response");
        }
        let fixpoint = traces.last().is_some_and(|t| t.response == response);
        traces.push(IterationTrace {
            iteration,
            prompt: text,
            response,
            extracted: ex.text,
            temperature,
            extraction_fallback: ex.fallback,
        });
        if opts.stop_on_fixpoint && fixpoint {
            break;
        }
    }
    Ok(RefineSession {
        query_id: q.id.clone(),
        final_answer: traces.last().map(|t| t.extracted.clone()).unwrap_or_default(),
        traces,
        aborted: None,
    })
}

/// One session per query, in input order; queries run in parallel.
pub fn run_batch(
    queries: &[Query],
    client: &Client,
    prompt: &RefinePrompt,
    sched: &TemperatureSchedule,
    opts: &RefineOptions,
) -> Vec<Result<RefineSession, RefineError>> {
    queries.par_iter().map(|q| run_iterations(q, client, prompt, sched, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{MockProvider, ModelEndpoint, Role};

    fn echo() -> Client {
        Client::with_mock(ModelEndpoint::mock(Role::Strong, 1), MockProvider::echo(1)).unwrap()
    }

    #[test]
    fn builtin_prompts() {
        assert_eq!(RefinePrompt::builtins().len(), 5);
        assert_eq!(RefinePrompt::default().id, "review");
        assert!(RefinePrompt::default().text.contains("could be either correct or incorrect"));
        assert!(RefinePrompt::builtin("nope").is_none());
        assert!(RefinePrompt::new("x", "only {query}").is_err());
        assert!(RefinePrompt::new("x", "{query} {history}").is_ok());
    }

    #[test]
    fn decaying_schedule() {
        let s = TemperatureSchedule::Decaying { start: 0.8, factor: 0.5 };
        assert_eq!([s.at(1), s.at(2), s.at(3)], [0.8, 0.4, 0.2]);
        assert!(TemperatureSchedule::Decaying { start: 0.8, factor: 1.5 }.validate().is_err());
        assert!(TemperatureSchedule::Fixed { value: -1.0 }.validate().is_err());
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_answer("the answer is \\boxed{42}", AnswerFormat::Boxed).text, "42");
        assert_eq!(extract_answer("\\boxed{1} then \\boxed{\\frac{1}{2}}", AnswerFormat::Boxed).text, "\\frac{1}{2}");
        assert_eq!(extract_answer("A. no B. yes Answer: B", AnswerFormat::ChoiceLetter).text, "B");
        assert_eq!(extract_answer("  hi ", AnswerFormat::Freeform), Extraction { text: "hi".into(), fallback: false });
        let code = "first\n```py\nx = 1\n```\nthen\n```rust\nfn f() {}\n```";
        assert_eq!(extract_answer(code, AnswerFormat::CodeBlock).text, "fn f() {}");
        let miss = extract_answer(" no box here ", AnswerFormat::Boxed);
        assert!(miss.fallback);
        assert_eq!(miss.text, "no box here");
        assert!(extract_answer("Answer unknown", AnswerFormat::ChoiceLetter).fallback);
    }

    #[test]
    fn single_iteration_is_bare_query() {
        let q = Query::new("q1", "What is 2+2?");
        let opts = RefineOptions { k: 1, ..Default::default() };
        let s = run_iterations(&q, &echo(), &RefinePrompt::default(), &TemperatureSchedule::default(), &opts).unwrap();
        assert_eq!(s.traces.len(), 1);
        assert_eq!(s.traces[0].prompt, "What is 2+2?");
        assert_eq!(s.final_answer, s.traces[0].extracted);
    }

    #[test]
    fn history_accumulates() {
        let q = Query::new("q1", "What is 2+2?");
        let s = run_iterations(
            &q,
            &echo(),
            &RefinePrompt::default(),
            &TemperatureSchedule::default(),
            &RefineOptions::default(),
        )
        .unwrap();
        assert_eq!(s.traces.len(), 3);
        for later in 1..3 {
            for earlier in 0..later {
                assert!(s.traces[later].prompt.contains(&s.traces[earlier].extracted));
            }
        }
        assert!(s.traces[2].prompt.contains("Previous thought 1: "));
    }

    #[test]
    fn last_only_drops_older_history() {
        let q = Query::new("q1", "Why?");
        let opts = RefineOptions { last_only: true, ..Default::default() };
        let s = run_iterations(&q, &echo(), &RefinePrompt::default(), &TemperatureSchedule::default(), &opts).unwrap();
        assert!(!s.traces[2].prompt.contains("Previous thought 1:"));
        assert!(s.traces[2].prompt.contains("Previous thought 2:"));
    }

    #[test]
    fn fixpoint_stops_early() {
        let mock = MockProvider::new(1).with_canned("", "same");
        let c = Client::with_mock(ModelEndpoint::mock(Role::Strong, 1), mock).unwrap();
        let q = Query::new("q", "x");
        let opts = RefineOptions { k: 5, stop_on_fixpoint: true, ..Default::default() };
        let s = run_iterations(&q, &c, &RefinePrompt::default(), &TemperatureSchedule::default(), &opts).unwrap();
        assert_eq!(s.traces.len(), 2);
    }

    #[test]
    fn zero_k_rejected() {
        let q = Query::new("q", "x");
        let opts = RefineOptions { k: 0, ..Default::default() };
        assert!(run_iterations(&q, &echo(), &RefinePrompt::default(), &TemperatureSchedule::default(), &opts).is_err());
    }
}
