//! Training dataset assembly and the thought-masked example format.
//!
//! A [`TrainingExample`] is an ordered list of role-tagged spans. Only the
//! answer span carries loss weight; the query, the thoughts and the
//! refinement instructions that follow each thought are masked with weight
//! zero. Separators live inside the preceding masked span, so concatenating
//! span texts gives exactly the string a trainer sees and the answer span
//! holds nothing but the answer.
//!
//! On disk the format is JSON lines, one example per line:
//!
//! ```text
//! {"spans":[{"role":"query","text":"..","loss_weight":0.0},..],"meta":{"query_id":"..","thought_count":2}}
//! ```

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyScore;
use crate::corpus::Query;
use crate::generation::{RefinedAnswer, ThoughtSequence};
use crate::jsonl::{self, JsonlError};

/// One element of the refinement dataset: query, drafts, refined answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtrSample {
    pub query: Query,
    pub thoughts: ThoughtSequence,
    pub answer: RefinedAnswer,
    pub consistency: ConsistencyScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    Query,
    Thought,
    RefineInstruction,
    Answer,
}

impl SpanRole {
    pub fn is_masked(self) -> bool {
        self != SpanRole::Answer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub role: SpanRole,
    pub text: String,
    pub loss_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleMeta {
    pub query_id: String,
    pub thought_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingExample {
    pub spans: Vec<Span>,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum DatasetError {
    #[error("sample for query {0} did not pass consistency filtering")]
    NotKept(String),
    #[error("refinement instruction must be nonempty")]
    EmptyInstruction,
    #[error("answer weight must be positive and finite, got {0}")]
    BadAnswerWeight(f64),
    #[error("sft query {0} has no answer")]
    MissingAnswer(String),
    #[error("line {line}: field `{field}`: {message}")]
    Parse { line: usize, field: String, message: String },
}

impl From<JsonlError> for DatasetError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Parse { line, field, message } => DatasetError::Parse { line, field, message },
            JsonlError::Io { path, source } => {
                DatasetError::Parse { line: 0, field: path, message: source.to_string() }
            }
        }
    }
}

/// Admits a scored sample into the dataset.
pub fn assemble(
    query: Query,
    thoughts: ThoughtSequence,
    answer: RefinedAnswer,
    score: ConsistencyScore,
) -> Result<PtrSample, DatasetError> {
    if !score.kept {
        return Err(DatasetError::NotKept(query.id));
    }
    Ok(PtrSample { query, thoughts, answer, consistency: score })
}

const QUERY_SEP: &str = "\n\n";
const THOUGHT_SEP: &str = "\n";
const INSTRUCTION_SEP: &str = "\n\n";

fn masked(role: SpanRole, text: String) -> Span {
    Span { role, text, loss_weight: 0.0 }
}

fn check_weight(answer_weight: f64) -> Result<(), DatasetError> {
    if answer_weight > 0.0 && answer_weight.is_finite() {
        Ok(())
    } else {
        Err(DatasetError::BadAnswerWeight(answer_weight))
    }
}

pub fn to_training_example(
    sample: &PtrSample,
    instruction: &str,
    answer_weight: f64,
) -> Result<TrainingExample, DatasetError> {
    if instruction.is_empty() {
        return Err(DatasetError::EmptyInstruction);
    }
    check_weight(answer_weight)?;
    let thoughts = &sample.thoughts.thoughts;
    let mut spans = Vec::with_capacity(2 + 2 * thoughts.len());
    spans.push(masked(SpanRole::Query, format!("{}{QUERY_SEP}", sample.query.text)));
    for t in thoughts {
        spans.push(masked(SpanRole::Thought, format!("{}{THOUGHT_SEP}", t.text)));
        spans.push(masked(SpanRole::RefineInstruction, format!("{instruction}{INSTRUCTION_SEP}")));
    }
    spans.push(Span { role: SpanRole::Answer, text: sample.answer.text.clone(), loss_weight: answer_weight });
    Ok(TrainingExample {
        spans,
        meta: ExampleMeta { query_id: sample.query.id.clone(), thought_count: thoughts.len() },
    })
}

/// Plain query/answer example used for SFT mixing.
pub fn sft_example(query: &Query, answer_weight: f64) -> Result<TrainingExample, DatasetError> {
    check_weight(answer_weight)?;
    let answer = query.sft_answer.clone().ok_or_else(|| DatasetError::MissingAnswer(query.id.clone()))?;
    Ok(TrainingExample {
        spans: vec![
            masked(SpanRole::Query, format!("{}{QUERY_SEP}", query.text)),
            Span { role: SpanRole::Answer, text: answer, loss_weight: answer_weight },
        ],
        meta: ExampleMeta { query_id: query.id.clone(), thought_count: 0 },
    })
}

impl TrainingExample {
    /// The exact training string: span texts concatenated.
    pub fn full_text(&self) -> String {
        self.spans.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn masked_weight(&self) -> f64 {
        self.spans.iter().filter(|s| s.role.is_masked()).map(|s| s.loss_weight).sum()
    }

    /// Checks span order (query, then thought/instruction pairs, then the
    /// answer), masking, and the recorded thought count. Returns the
    /// offending field path on failure.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let fail = |field: String, msg: &str| Err((field, msg.to_owned()));
        let n = self.spans.len();
        if n < 2 || n % 2 != 0 {
            return fail("spans".into(), "expected query, thought/instruction pairs and an answer");
        }
        for (i, span) in self.spans.iter().enumerate() {
            let expected = if i == 0 {
                SpanRole::Query
            } else if i == n - 1 {
                SpanRole::Answer
            } else if i % 2 == 1 {
                SpanRole::Thought
            } else {
                SpanRole::RefineInstruction
            };
            if span.role != expected {
                return fail(format!("spans[{i}].role"), "span out of order");
            }
            let w = span.loss_weight;
            if span.role.is_masked() && w != 0.0 {
                return fail(format!("spans[{i}].loss_weight"), "masked span must have weight 0");
            }
            if !span.role.is_masked() && !(w > 0.0 && w.is_finite()) {
                return fail(format!("spans[{i}].loss_weight"), "answer span must have positive weight");
            }
        }
        if self.meta.thought_count != (n - 2) / 2 {
            return fail("meta.thought_count".into(), "does not match the number of thought spans");
        }
        Ok(())
    }
}

pub fn serialize(examples: &[TrainingExample]) -> String {
    jsonl::to_string(examples)
}

pub fn parse(input: &str) -> Result<Vec<TrainingExample>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = jsonl::parse_line(line, idx + 1)?;
        ex.validate().map_err(|(field, message)| DatasetError::Parse { line: idx + 1, field, message })?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::Thought;
    use proptest::prelude::*;

    fn sample(n_thoughts: usize, kept: bool) -> PtrSample {
        let q = Query::new("q1", "What is 6 x 7?");
        let thoughts = ThoughtSequence {
            query_id: "q1".into(),
            thoughts: (1..=n_thoughts)
                .map(|t| Thought {
                    text: format!("draft {t}"),
                    attempt: t,
                    producer: "w".into(),
                    raw_prompt: q.text.clone(),
                })
                .collect(),
        };
        let answer = RefinedAnswer { text: "42".into(), producer: "s".into(), icl_prompt: "p".into() };
        let score = ConsistencyScore { per_thought: vec![0.9; n_thoughts], c_value: 1.0, kept };
        PtrSample { query: q, thoughts, answer, consistency: score }
    }

    #[test]
    fn assemble_requires_kept() {
        let s = sample(2, true);
        let a = assemble(s.query.clone(), s.thoughts.clone(), s.answer.clone(), s.consistency.clone()).unwrap();
        assert_eq!(a, s);
        let d = sample(2, false);
        assert_eq!(assemble(d.query, d.thoughts, d.answer, d.consistency), Err(DatasetError::NotKept("q1".into())));
    }

    #[test]
    fn kept_count_matches_admitted() {
        let mut admitted = 0;
        let mut expected = 0;
        for i in 0..100 {
            let s = sample(1 + i % 3, (i * 7) % 3 != 0);
            expected += usize::from(s.consistency.kept);
            if assemble(s.query, s.thoughts, s.answer, s.consistency).is_ok() {
                admitted += 1;
            }
        }
        assert_eq!(admitted, expected);
    }

    #[test]
    fn span_layout() {
        let ex = to_training_example(&sample(1, true), "refine", 1.0).unwrap();
        let roles: Vec<_> = ex.spans.iter().map(|s| s.role).collect();
        assert_eq!(roles, [SpanRole::Query, SpanRole::Thought, SpanRole::RefineInstruction, SpanRole::Answer]);

        let ex = to_training_example(&sample(3, true), "refine", 2.5).unwrap();
        assert_eq!(ex.spans.len(), 8);
        assert_eq!(ex.masked_weight(), 0.0);
        assert_eq!(ex.spans.last().unwrap().loss_weight, 2.5);
        assert_eq!(ex.spans.last().unwrap().text, "42");
        assert_eq!(ex.meta.thought_count, 3);
        ex.validate().unwrap();
        assert_eq!(ex.full_text(), "What is 6 x 7?\n\ndraft 1\nrefine\n\ndraft 2\nrefine\n\ndraft 3\nrefine\n\n42");
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(to_training_example(&sample(1, true), "", 1.0), Err(DatasetError::EmptyInstruction));
        assert_eq!(to_training_example(&sample(1, true), "x", 0.0), Err(DatasetError::BadAnswerWeight(0.0)));
    }

    #[test]
    fn sft_examples() {
        let mut q = Query::new("s1", "Capital of France?");
        assert!(sft_example(&q, 1.0).is_err());
        q.sft_answer = Some("Paris".into());
        let ex = sft_example(&q, 1.0).unwrap();
        ex.validate().unwrap();
        assert_eq!(ex.full_text(), "Capital of France?\n\nParis");
    }

    #[test]
    fn empty_list_is_empty_file() {
        assert_eq!(serialize(&[]), "");
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn truncated_line_names_line() {
        let good = serialize(&[to_training_example(&sample(1, true), "r", 1.0).unwrap()]);
        let broken = format!("{good}{}", &good[..good.len() / 2]);
        match parse(&broken) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_name_field() {
        let mut ex = to_training_example(&sample(1, true), "r", 1.0).unwrap();
        ex.spans[1].loss_weight = 0.5;
        match parse(&serialize(&[ex])) {
            Err(DatasetError::Parse { line: 1, field, .. }) => assert_eq!(field, "spans[1].loss_weight"),
            other => panic!("{other:?}"),
        }
        let bad_role =
            r#"{"spans":[{"role":"narrator","text":"x","loss_weight":0.0}],"meta":{"query_id":"a","thought_count":0}}"#;
        match parse(bad_role) {
            Err(DatasetError::Parse { field, .. }) => assert_eq!(field, "spans[0].role"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn reconstruction_and_mask(n in 1usize..6, instr in "[a-zA-Z .]{1,30}", w in 0.01f64..10.0) {
            let ex = to_training_example(&sample(n, true), &instr, w).unwrap();
            prop_assert!(ex.validate().is_ok());
            prop_assert_eq!(ex.spans.len(), 2 + 2 * n);
            for s in &ex.spans {
                prop_assert_eq!(s.loss_weight == 0.0, s.role != SpanRole::Answer);
            }
            let expected: String = std::iter::once(format!("{}\n\n", "What is 6 x 7?"))
                .chain((1..=n).map(|t| format!("draft {t}\n{instr}\n\n")))
                .chain(std::iter::once("42".to_string()))
                .collect();
            prop_assert_eq!(ex.full_text(), expected);
        }
    }
}
