use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ptr_core::corpus::{self, build_leakage_index, CorpusConfig, RawRecord};
use ptr_core::evalkit::{self, JudgeConfig, Metric, TaskSpec};
use ptr_core::jsonl::{self, JsonlError};
use ptr_core::pipeline::{self, FailureKind, Manifest, PipelineConfig, PipelineError};
use ptr_core::ptrloss::{grad_check, ptr_loss, ConsistencyValues, StepProbabilities, ToyInstance};
use ptr_core::refineloop::{self, AnswerFormat, RefineError, RefineOptions, RefinePrompt, TemperatureSchedule};
use ptr_core::stats::{wilcoxon_signed_rank, Method};
use ptr_core::{Alternative, BetaSchedule, Client, LossConfig, ModelEndpoint, PairedScores, Query, Role};

use crate::{Exit, Failure, OrExit};

fn jsonl_exit(e: &JsonlError) -> Exit {
    match e {
        JsonlError::Io { .. } => Exit::Config,
        JsonlError::Parse { .. } => Exit::Contract,
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    jsonl::read_path(path).map_err(|e| Failure { exit: jsonl_exit(&e), error: e.into() })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    jsonl::write_path(path, items).or_exit(Exit::Config)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).or_exit(Exit::Contract)?;
    println!("{text}");
    Ok(())
}

fn contract(msg: String) -> Failure {
    Failure { exit: Exit::Contract, error: anyhow!(msg) }
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// JSON-lines of raw records ({id, text, answer?, source?}).
    #[arg(long)]
    input: PathBuf,
    /// Where the cleaned queries go.
    #[arg(long)]
    output: PathBuf,
    /// JSON-lines of evaluation queries to screen out.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Take thresholds from this pipeline config's `corpus` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    min_words: Option<usize>,
    #[arg(long)]
    near_dup_threshold: Option<f64>,
    #[arg(long)]
    leakage_threshold: Option<f64>,
}

pub fn clean(a: CleanArgs) -> Result<(), Failure> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p).map_err(pipeline_failure)?.corpus,
        None => CorpusConfig::default(),
    };
    if let Some(v) = a.min_words {
        cfg.rules.min_words = v;
    }
    if let Some(v) = a.near_dup_threshold {
        cfg.near_dup_threshold = v;
    }
    if let Some(v) = a.leakage_threshold {
        cfg.leakage_threshold = v;
    }
    let raws: Vec<RawRecord> = read_jsonl(&a.input)?;
    let eval_texts: Vec<String> = match &a.eval {
        Some(p) => read_jsonl::<RawRecord>(p)?.into_iter().map(|r| r.text).collect(),
        None => Vec::new(),
    };
    let index = build_leakage_index(&eval_texts);
    let (queries, report) = corpus::prepare(&raws, &cfg, &index).map_err(|e| {
        let exit = match e {
            corpus::CorpusError::BadThreshold(_) | corpus::CorpusError::BadRatio(_) => Exit::Config,
            _ => Exit::Contract,
        };
        Failure { exit, error: e.into() }
    })?;
    write_jsonl(&a.output, &queries)?;
    print_json(&report)
}

fn pipeline_failure(e: PipelineError) -> Failure {
    let exit = match e.kind() {
        FailureKind::Contract => Exit::Contract,
        FailureKind::Config => Exit::Config,
        FailureKind::Provider => Exit::Provider,
    };
    Failure { exit, error: e.into() }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Pipeline config, TOML or JSON by extension.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads across all stages (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
}

pub fn build(a: BuildArgs) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::load(&a.config).map_err(pipeline_failure)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.output_dir {
        cfg.paths.output_dir = d;
    }
    if let Some(k) = a.kappa {
        cfg.consistency.kappa = k;
    }
    if let Some(d) = a.delta {
        cfg.consistency.delta = d;
    }
    let outcome = pipeline::build(&cfg, a.jobs).map_err(pipeline_failure)?;
    print_json(&outcome.manifest.counts)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlternativeArg {
    Greater,
    TwoSided,
}

#[derive(Debug, Args)]
pub struct SeparationArgs {
    /// JSON-lines of {item_id, weak, strong} with an optional `task` field.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "greater")]
    alternative: AlternativeArg,
    /// Significance level for the last column.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Deserialize)]
struct PairRow {
    #[serde(default)]
    task: Option<String>,
    #[allow(dead_code)]
    item_id: serde_json::Value,
    weak: f64,
    strong: f64,
}

#[derive(Debug, Serialize)]
struct SeparationRow {
    task: String,
    n: usize,
    #[serde(flatten)]
    result: ptr_core::WilcoxonResult,
    significant: bool,
}

pub fn validate_separation(a: SeparationArgs) -> Result<(), Failure> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure { exit: Exit::Config, error: anyhow!("alpha must lie in (0, 1)") });
    }
    let rows: Vec<PairRow> = read_jsonl(&a.input)?;
    let default_task = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let task = r.task.unwrap_or_else(|| default_task.clone());
        if !grouped.contains_key(&task) {
            order.push(task.clone());
        }
        let entry = grouped.entry(task).or_default();
        entry.0.push(r.weak);
        entry.1.push(r.strong);
    }
    if order.is_empty() {
        return Err(contract(format!("{}: no paired scores", a.input.display())));
    }
    let alternative = match a.alternative {
        AlternativeArg::Greater => Alternative::Greater,
        AlternativeArg::TwoSided => Alternative::TwoSided,
    };
    let mut out = Vec::new();
    for task in order {
        let (weak, strong) = grouped.remove(&task).expect("grouped task");
        let n = weak.len();
        let pairs = PairedScores::new(weak, strong).or_exit(Exit::Contract)?;
        let result = wilcoxon_signed_rank(&pairs, alternative).or_exit(Exit::Contract)?;
        out.push(SeparationRow { task, n, significant: result.p_value < a.alpha, result });
    }
    if a.json {
        return print_json(&out);
    }
    println!("{:<16} {:>6} {:>6} {:>10} {:>16} {:>12} {:>6}", "Task", "n", "n_eff", "W+", "Statistic", "p", "Sig");
    for r in &out {
        let stat = match (r.result.method, r.result.z) {
            (Method::NormalApprox, Some(z)) => format!("z = {z:.3}"),
            _ => "exact".to_owned(),
        };
        println!(
            "{:<16} {:>6} {:>6} {:>10.1} {:>16} {:>12} {:>6}",
            r.task,
            r.n,
            r.result.n_effective,
            r.result.w_plus,
            stat,
            format_p(r.result.p_value),
            if r.significant { "yes" } else { "no" }
        );
    }
    Ok(())
}

fn format_p(p: f64) -> String {
    if p == 1.0 {
        "1".to_owned()
    } else if p < 1e-4 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

#[derive(Debug, Args)]
pub struct EmitTrainArgs {
    /// Output directory of a previous build.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Refinement instruction (default: the one recorded in the manifest).
    #[arg(long)]
    instruction: Option<String>,
    /// Loss weight of answer spans (default: the one in the manifest).
    #[arg(long)]
    answer_weight: Option<f64>,
}

pub fn emit_train(a: EmitTrainArgs) -> Result<(), Failure> {
    let manifest_path = a.dir.join(pipeline::MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| manifest_path.display().to_string())
        .or_exit(Exit::Config)?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| manifest_path.display().to_string()).or_exit(Exit::Contract)?;
    let instruction = a.instruction.unwrap_or(manifest.instruction);
    let weight = a.answer_weight.unwrap_or(manifest.answer_weight);
    let n = pipeline::emit_train(&a.dir.join(pipeline::SAMPLES_FILE), &a.output, &instruction, weight)
        .map_err(pipeline_failure)?;
    println!("{n}");
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Freeform,
    Boxed,
    ChoiceLetter,
    CodeBlock,
}

impl From<FormatArg> for AnswerFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Freeform => AnswerFormat::Freeform,
            FormatArg::Boxed => AnswerFormat::Boxed,
            FormatArg::ChoiceLetter => AnswerFormat::ChoiceLetter,
            FormatArg::CodeBlock => AnswerFormat::CodeBlock,
        }
    }
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// `mock:<seed>[:echo]` or an OpenAI-compatible base URL.
    #[arg(long, default_value = "mock:0")]
    base_url: String,
    #[arg(long, default_value = "mock-model")]
    model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "")]
    api_key_env: String,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
}

impl EndpointArgs {
    fn client(&self, role: Role) -> Result<Client, Failure> {
        let mut ep = ModelEndpoint::new(role, &self.base_url, &self.model);
        ep.api_key_env = self.api_key_env.clone();
        ep.max_in_flight = self.max_in_flight;
        Client::new(ep).or_exit(Exit::Config)
    }
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// JSON-lines of queries ({id, text}).
    #[arg(long)]
    input: PathBuf,
    /// Sessions output (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    endpoint: EndpointArgs,
    /// Number of iterations.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..=10))]
    k: u32,
    /// Built-in prompt: review, assess, regardless, continue or precise.
    #[arg(long, default_value = refineloop::DEFAULT_PROMPT_ID)]
    prompt_id: String,
    /// Custom prompt template with {query} and {history}; overrides --prompt-id.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Decaying temperature as `start,factor`; overrides --temperature.
    #[arg(long)]
    decay: Option<String>,
    #[arg(long, value_enum, default_value = "freeform")]
    format: FormatArg,
    #[arg(long)]
    stop_on_fixpoint: bool,
    /// Show only the previous answer instead of the full history.
    #[arg(long)]
    last_only: bool,
    #[arg(long, default_value_t = 512)]
    max_tokens: u32,
}

fn parse_decay(s: &str) -> Result<TemperatureSchedule, Failure> {
    let bad = || Failure { exit: Exit::Config, error: anyhow!("--decay expects `start,factor`, got `{s}`") };
    let (start, factor) = s.split_once(',').ok_or_else(bad)?;
    Ok(TemperatureSchedule::Decaying {
        start: start.trim().parse().map_err(|_| bad())?,
        factor: factor.trim().parse().map_err(|_| bad())?,
    })
}

pub fn refine(a: RefineArgs) -> Result<(), Failure> {
    let prompt = match &a.prompt_file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| p.display().to_string()).or_exit(Exit::Config)?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            RefinePrompt::new(id, text).or_exit(Exit::Config)?
        }
        None => RefinePrompt::builtin(&a.prompt_id)
            .ok_or_else(|| Failure { exit: Exit::Config, error: anyhow!("unknown prompt id `{}`", a.prompt_id) })?,
    };
    let sched = match &a.decay {
        Some(d) => parse_decay(d)?,
        None => TemperatureSchedule::Fixed { value: a.temperature },
    };
    sched.validate().or_exit(Exit::Config)?;
    let opts = RefineOptions {
        k: a.k,
        format: a.format.into(),
        last_only: a.last_only,
        stop_on_fixpoint: a.stop_on_fixpoint,
        max_tokens: a.max_tokens,
    };
    let client = a.endpoint.client(Role::Strong)?;
    let queries: Vec<Query> =
        read_jsonl::<RawRecord>(&a.input)?.into_iter().map(|r| Query::new(r.id, r.text)).collect();

    let mut sessions = Vec::with_capacity(queries.len());
    let mut first_failure = None;
    for result in refineloop::run_batch(&queries, &client, &prompt, &sched, &opts) {
        match result {
            Ok(s) => sessions.push(s),
            Err(RefineError::Aborted { session, source, query_id, .. }) => {
                sessions.push(*session);
                first_failure.get_or_insert_with(|| anyhow!("query {query_id}: {source}"));
            }
            Err(e) => return Err(e).or_exit(Exit::Config),
        }
    }
    match &a.output {
        Some(p) => write_jsonl(p, &sessions)?,
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(jsonl::to_string(&sessions).as_bytes()).or_exit(Exit::Contract)?;
        }
    }
    match first_failure {
        Some(error) => Err(Failure { exit: Exit::Provider, error }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    ExactMatch,
    Similarity,
    ExternalJudge,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sessions written by `ptr refine`.
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long, default_value = "task")]
    task: String,
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// JSON-lines of {id, answer}.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Shell command run once per answer; reads JSON on stdin.
    #[arg(long)]
    judge_cmd: Option<String>,
    #[arg(long, value_enum, default_value = "freeform")]
    format: FormatArg,
    /// Score before the first iteration, shown as the baseline row.
    #[arg(long)]
    baseline: Option<f64>,
    /// Embedding endpoint for the similarity metric.
    #[arg(long, default_value = "mock:0")]
    embed_url: String,
    #[arg(long, default_value = "mock-embed")]
    embed_model: String,
    #[arg(long, default_value_t = 60)]
    judge_timeout_secs: u64,
    /// Concurrent judge subprocesses.
    #[arg(long, default_value_t = 4)]
    judge_jobs: usize,
    /// Also write the report and per-item failures as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    report: evalkit::IterationReport,
    failures: Vec<evalkit::ItemFailure>,
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let spec = TaskSpec {
        name: a.task.clone(),
        metric: match a.metric {
            MetricArg::ExactMatch => Metric::ExactMatch,
            MetricArg::Similarity => Metric::Similarity,
            MetricArg::ExternalJudge => Metric::ExternalJudge,
        },
        gold: a.gold.clone(),
        judge_cmd: a.judge_cmd.clone(),
        format: a.format.into(),
    };
    spec.validate().or_exit(Exit::Config)?;
    let gold = match &spec.gold {
        Some(p) => evalkit::load_gold(p).map_err(|e| {
            let exit = match &e {
                evalkit::EvalError::Jsonl(j) => jsonl_exit(j),
                _ => Exit::Contract,
            };
            Failure { exit, error: e.into() }
        })?,
        None => BTreeMap::new(),
    };
    let sessions: Vec<refineloop::RefineSession> = read_jsonl(&a.sessions)?;
    let embedder = match spec.metric {
        Metric::Similarity => {
            Some(Client::new(ModelEndpoint::new(Role::Embed, &a.embed_url, &a.embed_model)).or_exit(Exit::Config)?)
        }
        _ => None,
    };
    let judge = JudgeConfig { timeout: Duration::from_secs(a.judge_timeout_secs), parallelism: a.judge_jobs.max(1) };
    let matrix = evalkit::score_sessions(
        &spec,
        &sessions,
        &gold,
        embedder.as_ref().map(|c| c as &dyn ptr_core::provider::TextEmbedder),
        &judge,
    )
    .map_err(|e| {
        let exit = match e {
            evalkit::EvalError::Provider(_) => Exit::Provider,
            evalkit::EvalError::Spec(_) => Exit::Config,
            _ => Exit::Contract,
        };
        Failure { exit, error: e.into() }
    })?;
    let report = evalkit::aggregate_iterations(&a.task, &matrix.scores, a.baseline).or_exit(Exit::Contract)?;
    print!("{}", evalkit::format_table(std::slice::from_ref(&report)));
    for f in &matrix.failures {
        eprintln!("judge failure: item {} iteration {}: {}", f.item, f.iteration, f.error);
    }
    if let Some(p) = &a.output {
        let out = EvalOutput { report, failures: matrix.failures };
        let text = serde_json::to_string_pretty(&out).or_exit(Exit::Contract)?;
        fs::write(p, text + "\n").with_context(|| p.display().to_string()).or_exit(Exit::Config)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    /// JSON array of {name?, p, c, lambdas, beta_schedule?, paper_literal_consistency_sign?, expected_total?}.
    #[arg(long)]
    cases: PathBuf,
    /// Random toy instances gradient-checked per case.
    #[arg(long, default_value_t = 100)]
    grad_instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

/// Maximum relative gradient error accepted by `loss-check`.
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-6;
/// Agreement required with a case's `expected_total`.
const TOTAL_TOLERANCE: f64 = 1e-12;

fn default_beta() -> BetaSchedule {
    BetaSchedule::Linear
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossCase {
    #[serde(default)]
    name: Option<String>,
    p: Vec<f64>,
    c: Vec<f64>,
    lambdas: [f64; 3],
    #[serde(default = "default_beta", alias = "beta")]
    beta_schedule: BetaSchedule,
    #[serde(default)]
    paper_literal_consistency_sign: bool,
    #[serde(default)]
    expected_total: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LossCaseReport {
    name: String,
    breakdown: ptr_core::LossBreakdown,
    expected_total: Option<f64>,
    grad_max_rel_error: f64,
    ok: bool,
}

pub fn loss_check(a: LossCheckArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.cases).with_context(|| a.cases.display().to_string()).or_exit(Exit::Config)?;
    let cases: Vec<LossCase> =
        serde_json::from_str(&text).with_context(|| a.cases.display().to_string()).or_exit(Exit::Contract)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut reports = Vec::new();
    for (i, case) in cases.into_iter().enumerate() {
        let name = case.name.clone().unwrap_or_else(|| format!("case{}", i + 1));
        let ctx = |e: ptr_core::ptrloss::LossError| contract(format!("{name}: {e}"));
        let mut cfg = LossConfig::new(case.lambdas, case.beta_schedule).map_err(ctx)?;
        cfg.paper_literal_consistency_sign = case.paper_literal_consistency_sign;
        let p = StepProbabilities::new(case.p).map_err(ctx)?;
        let c = ConsistencyValues::new(case.c).map_err(ctx)?;
        let breakdown = ptr_loss(&p, &c, &cfg).map_err(ctx)?;

        let steps = p.as_slice().len();
        let mut grad_max = 0.0f64;
        for _ in 0..a.grad_instances {
            let vocab = rng.random_range(2..=8);
            let inst = ToyInstance::random(&mut rng, steps, vocab);
            grad_max = grad_max.max(grad_check(&inst, &cfg, GRAD_EPS).map_err(ctx)?);
        }
        let total_ok = case.expected_total.is_none_or(|t| (t - breakdown.total).abs() <= TOTAL_TOLERANCE);
        reports.push(LossCaseReport {
            name,
            breakdown,
            expected_total: case.expected_total,
            grad_max_rel_error: grad_max,
            ok: total_ok && grad_max <= GRAD_TOLERANCE,
        });
    }
    if a.json {
        print_json(&reports)?;
    } else {
        for r in &reports {
            let b = &r.breakdown;
            println!(
                "{:<24} total={:.12} answer={:.12} consistency={:.12} confidence={:.12} grad_rel={:.2e} {}",
                r.name,
                b.total,
                b.term_answer,
                b.term_consistency,
                b.term_confidence,
                r.grad_max_rel_error,
                if r.ok { "ok" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.ok).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(contract(format!("loss check failed for {}", failed.join(", "))))
    }
}
