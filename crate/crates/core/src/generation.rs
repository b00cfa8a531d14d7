//! Weak-model thought sampling and strong-model in-context refinement.
//!
//! Weak endpoints produce `T` draft thoughts for a query (round-robin when
//! several are given). The strong endpoint then sees the query together with
//! every draft, each followed by the refinement instruction, and writes the
//! final answer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::provider::{Client, GenerationParams, ProviderError, Role};

pub const DEFAULT_INSTRUCTION: &str = "Please continue thinking and refine your answer";

pub const DEFAULT_ICL_TEMPLATE: &str = "You will see a question and a sequence of prior draft thoughts. \
Produce a single improved final answer.\n\nQuestion: {query}\n\n{thoughts}\n\nFinal answer:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub text: String,
    pub attempt: usize,
    pub producer: String,
    pub raw_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtSequence {
    pub query_id: String,
    pub thoughts: Vec<Thought>,
}

impl ThoughtSequence {
    /// Checks that attempts run 1..=T without gaps and no text is empty.
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.thoughts.is_empty() {
            return Err(GenerationError::Invalid(format!("query {}: empty thought sequence", self.query_id)));
        }
        for (i, t) in self.thoughts.iter().enumerate() {
            if t.attempt != i + 1 {
                return Err(GenerationError::Invalid(format!(
                    "query {}: attempt {} at position {}",
                    self.query_id,
                    t.attempt,
                    i + 1
                )));
            }
            if t.text.trim().is_empty() {
                return Err(GenerationError::Invalid(format!(
                    "query {}: thought {} is empty",
                    self.query_id, t.attempt
                )));
            }
        }
        Ok(())
    }

    pub fn texts(&self) -> Vec<&str> {
        self.thoughts.iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedAnswer {
    pub text: String,
    pub producer: String,
    pub icl_prompt: String,
}

/// A query with its drafts and refined answer, before consistency filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub query: Query,
    pub thoughts: ThoughtSequence,
    pub answer: RefinedAnswer,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum GenerationError {
    #[error("generation config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("query {query_id}, {step}: {source}")]
    Provider {
        query_id: String,
        step: String,
        #[source]
        source: ProviderError,
    },
    #[error("query {query_id}, {step}: model returned empty text")]
    EmptyOutput { query_id: String, step: String },
}

/// Prompt template with `{query}`, `{thoughts}` and optional `{instruction}`
/// placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclTemplate {
    text: String,
}

impl Default for IclTemplate {
    fn default() -> Self {
        Self { text: DEFAULT_ICL_TEMPLATE.to_owned() }
    }
}

impl IclTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, GenerationError> {
        let text = text.into();
        for ph in ["{query}", "{thoughts}"] {
            if !text.contains(ph) {
                return Err(GenerationError::Config(format!("template is missing the {ph} placeholder")));
            }
        }
        Ok(Self { text })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Substitutes `{name}` placeholders in one left-to-right pass, so braces
/// inside substituted values are never re-expanded. Unknown placeholders are
/// left untouched.
pub(crate) fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open..];
        let hit = vars.iter().find_map(|(name, value)| {
            let token_len = name.len() + 2;
            (after.len() >= token_len && after.as_bytes()[token_len - 1] == b'}' && &after[1..token_len - 1] == *name)
                .then_some((token_len, *value))
        });
        match hit {
            Some((len, value)) => {
                out.push_str(value);
                rest = &after[len..];
            }
            None => {
                out.push('{');
                rest = &after[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Builds the strong model's prompt: the query, then every thought in
/// attempt order, each followed by the refinement instruction.
pub fn assemble_icl_prompt(q: &Query, s: &ThoughtSequence, template: &IclTemplate, instruction: &str) -> String {
    let block = s
        .thoughts
        .iter()
        .map(|t| format!("Thought {}: {}\n{}", t.attempt, t.text, instruction))
        .collect::<Vec<_>>()
        .join("\n");
    render(template.as_str(), &[("query", &q.text), ("thoughts", &block), ("instruction", instruction)])
}

fn provider_err(query_id: &str, step: String) -> impl FnOnce(ProviderError) -> GenerationError + '_ {
    move |source| GenerationError::Provider { query_id: query_id.to_owned(), step, source }
}

/// Samples `count` thoughts. Attempt `t` uses `weak[(t - 1) % weak.len()]`
/// and a per-attempt seed offset so a single weak model still yields
/// distinct drafts. When `n_samples > 1` the first nonempty candidate is
/// used. Any failed attempt aborts the whole sequence.
pub fn generate_thoughts(
    q: &Query,
    weak: &[&Client],
    count: usize,
    params: &GenerationParams,
) -> Result<ThoughtSequence, GenerationError> {
    if count == 0 {
        return Err(GenerationError::Config("thought count must be >= 1".into()));
    }
    if weak.is_empty() {
        return Err(GenerationError::Config("at least one weak endpoint is required".into()));
    }
    let mut thoughts = Vec::with_capacity(count);
    for attempt in 1..=count {
        let client = weak[(attempt - 1) % weak.len()];
        let step = format!("thought {attempt}");
        let attempt_params =
            GenerationParams { seed: Some(params.seed.unwrap_or(0).wrapping_add(attempt as u64)), ..params.clone() };
        let candidates = client.complete(&q.text, &attempt_params).map_err(provider_err(&q.id, step.clone()))?;
        let text = candidates
            .into_iter()
            .map(|c| c.trim().to_owned())
            .find(|c| !c.is_empty())
            .ok_or_else(|| GenerationError::EmptyOutput { query_id: q.id.clone(), step })?;
        thoughts.push(Thought { text, attempt, producer: client.endpoint().id(), raw_prompt: q.text.clone() });
    }
    Ok(ThoughtSequence { query_id: q.id.clone(), thoughts })
}

pub fn refine_answer(
    q: &Query,
    s: &ThoughtSequence,
    strong: &Client,
    params: &GenerationParams,
    template: &IclTemplate,
    instruction: &str,
) -> Result<RefinedAnswer, GenerationError> {
    if strong.endpoint().role != Role::Strong {
        return Err(GenerationError::Config(format!(
            "refinement endpoint {} has role {}, expected strong",
            strong.endpoint().model_name,
            strong.endpoint().role
        )));
    }
    let icl_prompt = assemble_icl_prompt(q, s, template, instruction);
    let first = strong
        .complete(&icl_prompt, params)
        .map_err(provider_err(&q.id, "refine".into()))?
        .into_iter()
        .next()
        .unwrap_or_default();
    let text = first.trim().to_owned();
    if text.is_empty() {
        return Err(GenerationError::EmptyOutput { query_id: q.id.clone(), step: "refine".into() });
    }
    Ok(RefinedAnswer { text, producer: strong.endpoint().id(), icl_prompt })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub thoughts: usize,
    pub weak_params: GenerationParams,
    pub strong_params: GenerationParams,
    pub instruction: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            thoughts: 3,
            weak_params: GenerationParams { temperature: 0.8, ..GenerationParams::default() },
            strong_params: GenerationParams::greedy(),
            instruction: DEFAULT_INSTRUCTION.to_owned(),
        }
    }
}

/// Generates one sample per query in parallel, preserving input order.
/// The first failure aborts the batch.
pub fn generate_batch(
    queries: &[Query],
    weak: &[&Client],
    strong: &Client,
    cfg: &GenerationConfig,
    template: &IclTemplate,
) -> Result<Vec<GeneratedSample>, GenerationError> {
    queries
        .par_iter()
        .map(|q| {
            let thoughts = generate_thoughts(q, weak, cfg.thoughts, &cfg.weak_params)?;
            let answer = refine_answer(q, &thoughts, strong, &cfg.strong_params, template, &cfg.instruction)?;
            Ok(GeneratedSample { query: q.clone(), thoughts, answer })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{MockProvider, ModelEndpoint};

    fn weak(seed: u64) -> Client {
        Client::new(ModelEndpoint::mock(Role::Weak, seed)).unwrap()
    }

    fn strong() -> Client {
        let mock = MockProvider::new(9).with_canned("Final answer:", "the refined answer");
        Client::with_mock(ModelEndpoint::mock(Role::Strong, 9), mock).unwrap()
    }

    fn seq(texts: &[&str]) -> ThoughtSequence {
        ThoughtSequence {
            query_id: "q".into(),
            thoughts: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Thought {
                    text: t.to_string(),
                    attempt: i + 1,
                    producer: "w".into(),
                    raw_prompt: "Q".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn single_thought() {
        let w = weak(1);
        let s = generate_thoughts(&Query::new("q", "what is up"), &[&w], 1, &GenerationParams::default()).unwrap();
        assert_eq!(s.thoughts.len(), 1);
        s.validate().unwrap();
    }

    #[test]
    fn round_robin_producers() {
        let (a, b) = (weak(1), weak(2));
        let s = generate_thoughts(&Query::new("q", "what is up"), &[&a, &b], 3, &GenerationParams::default()).unwrap();
        let producers: Vec<_> = s.thoughts.iter().map(|t| t.producer.as_str()).collect();
        assert_eq!(producers, ["mock-weak-1", "mock-weak-2", "mock-weak-1"]);
    }

    #[test]
    fn rerun_is_identical_and_attempts_differ() {
        let w = weak(4);
        let q = Query::new("q", "explain the water cycle briefly");
        let p = GenerationConfig::default().weak_params;
        let a = generate_thoughts(&q, &[&w], 3, &p).unwrap();
        assert_eq!(a, generate_thoughts(&q, &[&w], 3, &p).unwrap());
        assert_ne!(a.thoughts[0].text, a.thoughts[1].text);
    }

    #[test]
    fn zero_count_and_no_endpoints_rejected() {
        let w = weak(1);
        let q = Query::new("q", "x y z");
        assert!(generate_thoughts(&q, &[&w], 0, &GenerationParams::default()).is_err());
        assert!(generate_thoughts(&q, &[], 1, &GenerationParams::default()).is_err());
    }

    #[test]
    fn prompt_contains_query_then_thoughts_in_order() {
        let q = Query::new("q", "How many legs does a spider have?");
        let s = seq(&["first draft", "second draft", "third draft"]);
        let p = assemble_icl_prompt(&q, &s, &IclTemplate::default(), DEFAULT_INSTRUCTION);
        assert_eq!(p.matches(&q.text).count(), 1);
        let pos: Vec<usize> = ["first draft", "second draft", "third draft"]
            .iter()
            .map(|t| {
                assert_eq!(p.matches(t).count(), 1);
                p.find(t).unwrap()
            })
            .collect();
        assert!(p.find(&q.text).unwrap() < pos[0]);
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p.matches(DEFAULT_INSTRUCTION).count(), 3);
    }

    #[test]
    fn template_requires_placeholders() {
        assert!(IclTemplate::new("{query} only").is_err());
        assert!(IclTemplate::new("{thoughts} only").is_err());
        assert!(IclTemplate::new("{query}\n{thoughts}").is_ok());
    }

    #[test]
    fn render_is_single_pass() {
        let out = render("{query}|{thoughts}|{other}", &[("query", "{thoughts}"), ("thoughts", "T")]);
        assert_eq!(out, "{thoughts}|T|{other}");
        assert_eq!(render("{", &[("query", "x")]), "{");
        assert_eq!(render("a{query", &[("query", "x")]), "a{query");
    }

    #[test]
    fn canned_strong_answer() {
        let q = Query::new("q", "Name a primary color");
        let s = seq(&["draft"]);
        let st = strong();
        let a = refine_answer(&q, &s, &st, &GenerationParams::greedy(), &IclTemplate::default(), DEFAULT_INSTRUCTION)
            .unwrap();
        assert_eq!(a.text, "the refined answer");
        assert_eq!(a.icl_prompt, assemble_icl_prompt(&q, &s, &IclTemplate::default(), DEFAULT_INSTRUCTION));
        assert_eq!(
            a,
            refine_answer(&q, &s, &st, &GenerationParams::greedy(), &IclTemplate::default(), DEFAULT_INSTRUCTION)
                .unwrap()
        );
    }

    #[test]
    fn refine_requires_strong_role() {
        let w = weak(1);
        let r = refine_answer(
            &Query::new("q", "x"),
            &seq(&["d"]),
            &w,
            &GenerationParams::greedy(),
            &IclTemplate::default(),
            "i",
        );
        assert!(matches!(r, Err(GenerationError::Config(_))));
    }

    #[test]
    fn batch_of_five() {
        let (w, st) = (weak(3), strong());
        let qs: Vec<Query> = (0..5).map(|i| Query::new(format!("q{i}"), format!("toy question number {i}"))).collect();
        let out = generate_batch(&qs, &[&w], &st, &GenerationConfig::default(), &IclTemplate::default()).unwrap();
        assert_eq!(out.len(), 5);
        for (s, q) in out.iter().zip(&qs) {
            assert_eq!(s.query.id, q.id);
            assert_eq!(s.thoughts.thoughts.len(), 3);
            for t in &s.thoughts.thoughts {
                assert!(s.answer.icl_prompt.contains(&t.text));
            }
        }
    }
}
