//! Scoring of per-iteration answers and iteration tables.
//!
//! Scores are accumulated on a 0–1 scale per item and reported on 0–100.
//! Code execution and model-graded judgments are delegated to an external
//! command; nothing is executed in-process.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::consistency::embed_sim;
use crate::jsonl::{self, JsonlError};
use crate::provider::{ProviderError, TextEmbedder};
use crate::refineloop::{extract_answer, AnswerFormat, RefineSession};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    Similarity,
    ExternalJudge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub metric: Metric,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    #[serde(default)]
    pub judge_cmd: Option<String>,
    #[serde(default)]
    pub format: AnswerFormat,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("task spec: {0}")]
    Spec(String),
    #[error("score matrix is ragged: item {item} has {got} iterations, expected {expected}")]
    Ragged { item: usize, expected: usize, got: usize },
    #[error("score matrix is empty")]
    Empty,
    #[error("no gold answer for item `{0}`")]
    MissingGold(String),
    #[error("similarity needs nonempty prediction and gold (item `{0}`)")]
    EmptyText(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum JudgeError {
    #[error("judge could not be started: {0}")]
    Spawn(String),
    #[error("judge timed out after {0:?}")]
    Timeout(Duration),
    #[error("judge exited with {code:?} and printed no score")]
    NoScore { code: Option<i32> },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        match self.metric {
            Metric::ExactMatch | Metric::Similarity if self.gold.is_none() => {
                Err(EvalError::Spec(format!("task `{}`: {:?} requires a gold file", self.name, self.metric)))
            }
            Metric::ExternalJudge if self.judge_cmd.as_deref().is_none_or(|c| c.trim().is_empty()) => {
                Err(EvalError::Spec(format!("task `{}`: external_judge requires judge_cmd", self.name)))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub id: String,
    pub answer: String,
}

pub fn load_gold(path: &Path) -> Result<BTreeMap<String, String>, EvalError> {
    let rows: Vec<GoldAnswer> = jsonl::read_path(path)?;
    Ok(rows.into_iter().map(|g| (g.id, g.answer)).collect())
}

fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_end_matches(|c: char| c == '.' || c.is_whitespace()).to_owned()
}

/// 1 when the answers agree after trimming, lowercasing, collapsing
/// whitespace and dropping trailing periods.
pub fn score_exact(pred: &str, gold: &str) -> u8 {
    u8::from(normalize_answer(pred) == normalize_answer(gold))
}

/// `100 · embed_sim(pred, gold)`.
pub fn score_similarity(pred: &str, gold: &str, embedder: &dyn TextEmbedder) -> Result<f64, EvalError> {
    if pred.trim().is_empty() || gold.trim().is_empty() {
        return Err(EvalError::EmptyText(String::new()));
    }
    Ok(100.0 * embed_sim(pred, gold, embedder)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeConfig {
    pub timeout: Duration,
    /// Maximum number of judge subprocesses alive at once.
    pub parallelism: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(60), parallelism: 4 }
    }
}

/// Runs `sh -c judge_cmd` with `{"prediction": .., "item": ..}` on stdin.
/// A numeric last line of stdout is the score; otherwise exit status 0
/// scores 1 and exit status 1 scores 0.
pub fn run_external_judge(
    judge_cmd: &str,
    pred: &str,
    item_meta: &serde_json::Value,
    timeout: Duration,
) -> Result<f64, JudgeError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(judge_cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| JudgeError::Spawn(e.to_string()))?;

    let payload = serde_json::json!({ "prediction": pred, "item": item_meta }).to_string();
    let mut stdin = child.stdin.take().expect("stdin is piped");
    let mut stdout = child.stdout.take().expect("stdout is piped");
    // feed and drain on helper threads so a chatty judge cannot deadlock
    let writer = std::thread::spawn(move || {
        // a judge that ignores its input may close the pipe early
        let _ = stdin.write_all(payload.as_bytes());
    });
    let reader = std::thread::spawn(move || {
        let mut out = String::new();
        let _ = stdout.read_to_string(&mut out);
        out
    });

    let status = match child.wait_timeout(timeout).map_err(|e| JudgeError::Spawn(e.to_string()))? {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            let _ = writer.join();
            return Err(JudgeError::Timeout(timeout));
        }
    };
    let _ = writer.join();
    let out = reader.join().unwrap_or_default();

    let numeric = out
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| l.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite());
    match (numeric, status.code()) {
        (Some(v), _) => Ok(v),
        (None, Some(0)) => Ok(1.0),
        (None, Some(1)) => Ok(0.0),
        (None, code) => Err(JudgeError::NoScore { code }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeItem {
    pub id: String,
    pub prediction: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Judges every item with bounded parallelism. Failed items score 0 and
/// carry the failure.
pub fn judge_batch(judge_cmd: &str, items: &[JudgeItem], cfg: &JudgeConfig) -> Vec<JudgeOutcome> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallelism.max(1)).build().expect("judge thread pool");
    pool.install(|| {
        items
            .par_iter()
            .map(|it| match run_external_judge(judge_cmd, &it.prediction, &it.meta, cfg.timeout) {
                Ok(score) => JudgeOutcome { id: it.id.clone(), score, error: None },
                Err(e) => {
                    tracing::warn!(item = %it.id, error = %e, "judge failed; scoring 0");
                    JudgeOutcome { id: it.id.clone(), score: 0.0, error: Some(e.to_string()) }
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationScore {
    pub iteration: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub task: String,
    pub per_iteration: Vec<IterationScore>,
    /// `deltas[i] = per_iteration[i + 1] − per_iteration[i]`.
    pub deltas: Vec<f64>,
    pub baseline: Option<f64>,
    /// `per_iteration[0] − baseline`.
    pub baseline_delta: Option<f64>,
}

/// Column means × 100 of an items × iterations matrix of 0–1 scores.
pub fn aggregate_iterations(
    task: &str,
    scores: &[Vec<f64>],
    baseline: Option<f64>,
) -> Result<IterationReport, EvalError> {
    let width = scores.first().map(Vec::len).ok_or(EvalError::Empty)?;
    if width == 0 {
        return Err(EvalError::Empty);
    }
    if let Some((item, row)) = scores.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(EvalError::Ragged { item, expected: width, got: row.len() });
    }
    let n = scores.len() as f64;
    let per_iteration: Vec<IterationScore> = (0..width)
        .map(|j| IterationScore {
            iteration: j as u32 + 1,
            score: 100.0 * scores.iter().map(|r| r[j]).sum::<f64>() / n,
        })
        .collect();
    let deltas = per_iteration.windows(2).map(|w| w[1].score - w[0].score).collect();
    Ok(IterationReport {
        task: task.to_owned(),
        baseline_delta: baseline.map(|b| per_iteration[0].score - b),
        per_iteration,
        deltas,
        baseline,
    })
}

impl IterationReport {
    /// Change shown next to each iteration: against the baseline for the
    /// first one (when known), against the previous iteration otherwise.
    pub fn annotated_deltas(&self) -> Vec<Option<f64>> {
        std::iter::once(self.baseline_delta).chain(self.deltas.iter().copied().map(Some)).collect()
    }
}

/// `+x.y` / `-x.y`, never `-0.0`.
pub fn format_delta(d: f64) -> String {
    let s = format!("{d:+.1}");
    if s == "-0.0" {
        "+0.0".to_owned()
    } else {
        s
    }
}

/// Aligned table: one row per iteration, one column per task, each cell
/// `score (+delta)`.
pub fn format_table(reports: &[IterationReport]) -> String {
    let rows = reports.iter().map(|r| r.per_iteration.len()).max().unwrap_or(0);
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Iteration".to_owned()];
    header.extend(reports.iter().map(|r| r.task.clone()));
    grid.push(header);
    if reports.iter().any(|r| r.baseline.is_some()) {
        let mut row = vec!["Baseline".to_owned()];
        row.extend(reports.iter().map(|r| r.baseline.map(|b| format!("{b:.1}")).unwrap_or_default()));
        grid.push(row);
    }
    for i in 0..rows {
        let mut row = vec![(i + 1).to_string()];
        for r in reports {
            let cell = match r.per_iteration.get(i) {
                None => String::new(),
                Some(s) => match r.annotated_deltas()[i] {
                    Some(d) => format!("{:.1} ({})", s.score, format_delta(d)),
                    None => format!("{:.1}", s.score),
                },
            };
            row.push(cell);
        }
        grid.push(row);
    }
    let widths: Vec<usize> =
        (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &grid {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item: String,
    pub iteration: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub item_ids: Vec<String>,
    /// items × iterations, 0–1 scale.
    pub scores: Vec<Vec<f64>>,
    pub failures: Vec<ItemFailure>,
}

/// Scores every trace of every session. Answers are re-extracted from raw
/// responses using the task's format.
pub fn score_sessions(
    spec: &TaskSpec,
    sessions: &[RefineSession],
    gold: &BTreeMap<String, String>,
    embedder: Option<&dyn TextEmbedder>,
    judge: &JudgeConfig,
) -> Result<ScoreMatrix, EvalError> {
    spec.validate()?;
    let width = sessions.first().map(|s| s.traces.len()).ok_or(EvalError::Empty)?;
    if let Some((item, s)) = sessions.iter().enumerate().find(|(_, s)| s.traces.len() != width) {
        return Err(EvalError::Ragged { item, expected: width, got: s.traces.len() });
    }
    let extracted: Vec<Vec<String>> = sessions
        .iter()
        .map(|s| s.traces.iter().map(|t| extract_answer(&t.response, spec.format).text).collect())
        .collect();
    let mut m = ScoreMatrix { item_ids: sessions.iter().map(|s| s.query_id.clone()).collect(), ..Default::default() };
    match spec.metric {
        Metric::ExactMatch | Metric::Similarity => {
            for (s, answers) in sessions.iter().zip(&extracted) {
                let g = gold.get(&s.query_id).ok_or_else(|| EvalError::MissingGold(s.query_id.clone()))?;
                let row = answers
                    .iter()
                    .map(|a| match spec.metric {
                        Metric::ExactMatch => Ok(f64::from(score_exact(a, g))),
                        _ => {
                            let e =
                                embedder.ok_or_else(|| EvalError::Spec("similarity needs an embed endpoint".into()))?;
                            if a.trim().is_empty() || g.trim().is_empty() {
                                return Err(EvalError::EmptyText(s.query_id.clone()));
                            }
                            Ok(score_similarity(a, g, e)? / 100.0)
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                m.scores.push(row);
            }
        }
        Metric::ExternalJudge => {
            let cmd = spec.judge_cmd.as_deref().unwrap_or_default();
            let items: Vec<JudgeItem> = sessions
                .iter()
                .zip(&extracted)
                .flat_map(|(s, answers)| {
                    answers.iter().enumerate().map(move |(j, a)| JudgeItem {
                        id: s.query_id.clone(),
                        prediction: a.clone(),
                        meta: serde_json::json!({
                            "id": s.query_id,
                            "iteration": j + 1,
                            "gold": gold.get(&s.query_id),
                        }),
                    })
                })
                .collect();
            let outcomes = judge_batch(cmd, &items, judge);
            for (i, chunk) in outcomes.chunks(width).enumerate() {
                m.scores.push(chunk.iter().map(|o| o.score).collect());
                for (j, o) in chunk.iter().enumerate() {
                    if let Some(error) = &o.error {
                        m.failures.push(ItemFailure {
                            item: m.item_ids[i].clone(),
                            iteration: j as u32 + 1,
                            error: error.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(m)
}
