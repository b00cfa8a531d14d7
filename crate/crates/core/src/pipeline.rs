//! One-config dataset build: corpus → generation → consistency → dataset.
//!
//! A run is reproducible from its config file and seed when mock providers
//! are used. Outputs go to `paths.output_dir`:
//!
//! * `samples.jsonl` — kept refinement samples and mixed-in SFT items
//! * `filter_audit.jsonl` — per-sample consistency scores, kept or not
//! * `train.jsonl` — thought-masked training examples
//! * `manifest.json` — stage counts, config hash, output file digests

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{filter_samples, CachedEmbedder, ConsistencyConfig, ConsistencyError, FilterAudit};
use crate::corpus::{self, build_leakage_index, CorpusConfig, CorpusError, ItemKind, LeakageIndex, Query, RawRecord};
use crate::dataset::{self, DatasetError, PtrSample, TrainingExample};
use crate::generation::{generate_batch, GenerationConfig, GenerationError, IclTemplate};
use crate::jsonl::{self, JsonlError};
use crate::provider::{Client, ModelEndpoint, ProviderError, Role};
use crate::ptrloss::{LossConfig, LossError};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const AUDIT_FILE: &str = "filter_audit.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub weak: Vec<ModelEndpoint>,
    pub strong: ModelEndpoint,
    pub embed: ModelEndpoint,
    #[serde(default)]
    pub judge: Option<ModelEndpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// JSON-lines of raw records.
    pub input: PathBuf,
    pub output_dir: PathBuf,
    /// JSON-lines of evaluation queries to keep out of the training data.
    #[serde(default)]
    pub eval_queries: Option<PathBuf>,
    /// JSON-lines of raw records with answers, mixed in as plain SFT pairs.
    #[serde(default)]
    pub sft_pairs: Option<PathBuf>,
    /// ICL template text file.
    #[serde(default)]
    pub template: Option<PathBuf>,
}

fn default_answer_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub consistency: ConsistencyConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub paths: Paths,
    #[serde(default = "default_answer_weight")]
    pub answer_weight: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("stage corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("stage generation: {0}")]
    Generation(#[from] GenerationError),
    #[error("stage consistency: {0}")]
    Consistency(#[from] ConsistencyError),
    #[error("stage dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("provider setup: {0}")]
    Provider(#[from] ProviderError),
    #[error("no sample survived consistency filtering ({generated} generated, kappa = {kappa})")]
    NoSurvivors { generated: usize, kappa: f64 },
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Contract,
    Config,
    Provider,
}

impl PipelineError {
    pub fn kind(&self) -> FailureKind {
        match self {
            PipelineError::Config(_) | PipelineError::Io { .. } => FailureKind::Config,
            PipelineError::Provider(ProviderError::Config(_)) => FailureKind::Config,
            PipelineError::Provider(_)
            | PipelineError::Generation(GenerationError::Provider { .. })
            | PipelineError::Consistency(ConsistencyError::Provider(_)) => FailureKind::Provider,
            PipelineError::Generation(GenerationError::Config(_))
            | PipelineError::Consistency(ConsistencyError::Config(_)) => FailureKind::Config,
            _ => FailureKind::Contract,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

impl PipelineConfig {
    /// Parses TOML (`.toml`) or JSON (anything else) and resolves relative
    /// paths against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text, path.extension().is_some_and(|e| e == "toml"))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn parse(text: &str, toml_syntax: bool) -> Result<Self, PipelineError> {
        if toml_syntax {
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
        } else {
            let de = &mut serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| PipelineError::Config(format!("{}: {}", e.path(), e.inner())))
        }
    }

    /// SHA-256 of the canonical JSON form, so equivalent TOML and JSON files
    /// hash identically.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg_err = |m: String| Err(PipelineError::Config(m));
        if self.endpoints.weak.is_empty() {
            return cfg_err("at least one weak endpoint is required".into());
        }
        let roles = self
            .endpoints
            .weak
            .iter()
            .map(|e| (e, Role::Weak))
            .chain([(&self.endpoints.strong, Role::Strong), (&self.endpoints.embed, Role::Embed)])
            .chain(self.endpoints.judge.iter().map(|e| (e, Role::Judge)));
        for (ep, role) in roles {
            if ep.role != role {
                return cfg_err(format!("endpoint {} is listed as {role} but has role {}", ep.model_name, ep.role));
            }
            ep.validate().map_err(|e| PipelineError::Config(format!("endpoint {}: {e}", ep.model_name)))?;
        }
        self.consistency.validate()?;
        self.loss.validate().map_err(|e: LossError| PipelineError::Config(e.to_string()))?;
        if self.generation.thoughts == 0 {
            return cfg_err("generation.thoughts must be >= 1".into());
        }
        for p in [&self.generation.weak_params, &self.generation.strong_params] {
            p.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if self.generation.instruction.is_empty() {
            return cfg_err("generation.instruction must be nonempty".into());
        }
        if !(self.answer_weight > 0.0 && self.answer_weight.is_finite()) {
            return cfg_err(format!("answer_weight must be positive, got {}", self.answer_weight));
        }
        for t in [self.corpus.near_dup_threshold, self.corpus.leakage_threshold, self.corpus.sft_ratio] {
            if !(0.0..=1.0).contains(&t) {
                return cfg_err(format!("corpus thresholds and ratio must lie in [0, 1], got {t}"));
            }
        }
        let p = &self.paths;
        for file in std::iter::once(&p.input).chain(&p.eval_queries).chain(&p.sft_pairs).chain(&p.template) {
            if !file.is_file() {
                return cfg_err(format!("{} does not exist", file.display()));
            }
        }
        Ok(())
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        fix(&mut self.output_dir);
        for p in [&mut self.eval_queries, &mut self.sft_pairs, &mut self.template].into_iter().flatten() {
            fix(p);
        }
    }
}

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetItem {
    Ptr(PtrSample),
    Sft { query: Query },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub rejected_empty: usize,
    pub rejected_noise: usize,
    pub deduped: usize,
    pub leaked: usize,
    pub cleaned: usize,
    pub sft_items: usize,
    pub generated: usize,
    pub kept: usize,
    pub dropped: usize,
    pub train_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub counts: StageCounts,
    pub consistency: ConsistencyConfig,
    pub loss: LossConfig,
    pub instruction: String,
    pub answer_weight: f64,
    /// Output file name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

pub struct Providers {
    pub weak: Vec<Client>,
    pub strong: Client,
    pub embed: Client,
}

impl Providers {
    pub fn from_endpoints(e: &Endpoints) -> Result<Self, PipelineError> {
        Ok(Self {
            weak: e.weak.iter().cloned().map(Client::new).collect::<Result<_, _>>()?,
            strong: Client::new(e.strong.clone())?,
            embed: Client::new(e.embed.clone())?,
        })
    }
}

fn read_raws(path: &Path) -> Result<Vec<RawRecord>, PipelineError> {
    Ok(jsonl::read_path(path)?)
}

fn leakage_index(cfg: &PipelineConfig) -> Result<LeakageIndex, PipelineError> {
    let texts: Vec<String> = match &cfg.paths.eval_queries {
        Some(p) => read_raws(p)?.into_iter().map(|r| r.text).collect(),
        None => Vec::new(),
    };
    Ok(build_leakage_index(&texts))
}

fn load_template(cfg: &PipelineConfig) -> Result<IclTemplate, PipelineError> {
    match &cfg.paths.template {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            Ok(IclTemplate::new(text)?)
        }
        None => Ok(IclTemplate::default()),
    }
}

fn write_file(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    digests: &mut BTreeMap<String, String>,
) -> Result<(), PipelineError> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(io_err(&path))?;
    digests.insert(name.to_owned(), hex::encode(Sha256::digest(bytes)));
    Ok(())
}

/// Runs the whole build with the given providers. Writes every output
/// (including the audit and manifest) before reporting an empty result as
/// [`PipelineError::NoSurvivors`].
pub fn build_with(cfg: &PipelineConfig, providers: &Providers) -> Result<BuildOutcome, PipelineError> {
    cfg.validate()?;
    let mut counts = StageCounts::default();

    let raws = read_raws(&cfg.paths.input)?;
    counts.input = raws.len();
    let index = leakage_index(cfg)?;
    let (queries, report) = corpus::prepare(&raws, &cfg.corpus, &index)?;
    counts.rejected_empty = report.rejected_empty;
    counts.rejected_noise = report.rejected_noise;
    counts.deduped = report.deduped;
    counts.leaked = report.leaked;
    counts.cleaned = report.kept;
    tracing::info!(stage = "corpus", kept = report.kept, "corpus prepared");

    let mixed = match &cfg.paths.sft_pairs {
        Some(p) => {
            let sft: Vec<Query> = read_raws(p)?
                .iter()
                .filter_map(|r| corpus::clean_record(r, &cfg.corpus.rules).ok())
                .filter(|q| q.sft_answer.is_some())
                .collect();
            corpus::mix_sft(queries, sft, cfg.corpus.sft_ratio, cfg.seed)?
        }
        None => corpus::mix_sft(queries, Vec::new(), 0.0, cfg.seed)?,
    };
    let ptr_queries: Vec<Query> = mixed.iter().filter(|m| m.kind == ItemKind::Ptr).map(|m| m.query.clone()).collect();
    counts.sft_items = mixed.len() - ptr_queries.len();

    let mut gen_cfg = cfg.generation.clone();
    gen_cfg.weak_params.seed.get_or_insert(cfg.seed);
    let template = load_template(cfg)?;
    let weak: Vec<&Client> = providers.weak.iter().collect();
    let generated = generate_batch(&ptr_queries, &weak, &providers.strong, &gen_cfg, &template)?;
    counts.generated = generated.len();
    tracing::info!(stage = "generation", samples = generated.len(), "samples generated");

    let embedder = CachedEmbedder::new(&providers.embed);
    let (kept, dropped) = filter_samples(generated, &cfg.consistency, &embedder)?;
    counts.kept = kept.len();
    counts.dropped = dropped.len();
    tracing::info!(stage = "consistency", kept = kept.len(), dropped = dropped.len(), "samples filtered");

    // audit in generation order
    let mut audits: Vec<(usize, FilterAudit)> = Vec::new();
    let order: BTreeMap<&str, usize> = ptr_queries.iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    for s in kept.iter().chain(&dropped) {
        audits.push((order[s.sample.query.id.as_str()], s.audit()));
    }
    audits.sort_by_key(|(i, _)| *i);
    let audits: Vec<FilterAudit> = audits.into_iter().map(|(_, a)| a).collect();

    let mut by_id: BTreeMap<String, PtrSample> = BTreeMap::new();
    for s in kept {
        let g = s.sample;
        let sample = dataset::assemble(g.query, g.thoughts, g.answer, s.score)?;
        by_id.insert(sample.query.id.clone(), sample);
    }
    let mut items = Vec::new();
    for m in mixed {
        match m.kind {
            ItemKind::Ptr => items.extend(by_id.remove(&m.query.id).map(DatasetItem::Ptr)),
            ItemKind::Sft => items.push(DatasetItem::Sft { query: m.query }),
        }
    }
    let train = to_training(&items, &cfg.generation.instruction, cfg.answer_weight)?;
    counts.train_examples = train.len();

    let dir = &cfg.paths.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = BTreeMap::new();
    write_file(dir, SAMPLES_FILE, jsonl::to_string(&items).as_bytes(), &mut files)?;
    write_file(dir, AUDIT_FILE, jsonl::to_string(&audits).as_bytes(), &mut files)?;
    write_file(dir, TRAIN_FILE, dataset::serialize(&train).as_bytes(), &mut files)?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        counts,
        consistency: cfg.consistency,
        loss: cfg.loss.clone(),
        instruction: cfg.generation.instruction.clone(),
        answer_weight: cfg.answer_weight,
        files,
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest_json).map_err(io_err(&path))?;

    if manifest.counts.kept == 0 {
        return Err(PipelineError::NoSurvivors { generated: manifest.counts.generated, kappa: cfg.consistency.kappa });
    }
    Ok(BuildOutcome { manifest, output_dir: dir.clone() })
}

/// [`build_with`] using providers constructed from the config, on a worker
/// pool of `jobs` threads (all cores when `None`).
pub fn build(cfg: &PipelineConfig, jobs: Option<usize>) -> Result<BuildOutcome, PipelineError> {
    cfg.validate()?;
    let providers = Providers::from_endpoints(&cfg.endpoints)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        pool = pool.num_threads(j.max(1));
    }
    let pool = pool.build().map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| build_with(cfg, &providers))
}

fn to_training(
    items: &[DatasetItem],
    instruction: &str,
    answer_weight: f64,
) -> Result<Vec<TrainingExample>, DatasetError> {
    items
        .iter()
        .map(|it| match it {
            DatasetItem::Ptr(s) => dataset::to_training_example(s, instruction, answer_weight),
            DatasetItem::Sft { query } => dataset::sft_example(query, answer_weight),
        })
        .collect()
}

/// Re-emits training examples from an existing `samples.jsonl` with a new
/// instruction or answer weight. Returns the number of examples written.
pub fn emit_train(samples: &Path, out: &Path, instruction: &str, answer_weight: f64) -> Result<usize, PipelineError> {
    let items: Vec<DatasetItem> = jsonl::read_path(samples)?;
    if let Some(bad) = items.iter().find_map(|it| match it {
        DatasetItem::Ptr(s) if !s.consistency.kept => Some(s.query.id.clone()),
        _ => None,
    }) {
        return Err(DatasetError::NotKept(bad).into());
    }
    let train = to_training(&items, instruction, answer_weight)?;
    std::fs::write(out, dataset::serialize(&train)).map_err(io_err(out))?;
    Ok(train.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_inputs(dir: &Path, n: usize) -> PipelineConfig {
        let raws: Vec<RawRecord> = (0..n)
            .map(|i| RawRecord {
                id: format!("q{i}"),
                text: format!("question number {i} asks about topic{i} and detail{}", i * 3),
                answer: None,
                source: "toy".into(),
            })
            .collect();
        jsonl::write_path(&dir.join("in.jsonl"), &raws).unwrap();
        PipelineConfig {
            seed: 7,
            endpoints: Endpoints {
                weak: vec![ModelEndpoint::mock(Role::Weak, 1)],
                strong: ModelEndpoint::mock(Role::Strong, 2),
                embed: ModelEndpoint::mock(Role::Embed, 3),
                judge: None,
            },
            consistency: ConsistencyConfig { kappa: 0.0, ..Default::default() },
            loss: LossConfig::default(),
            generation: GenerationConfig::default(),
            corpus: CorpusConfig::default(),
            paths: Paths {
                input: dir.join("in.jsonl"),
                output_dir: dir.join("out"),
                eval_queries: None,
                sft_pairs: None,
                template: None,
            },
            answer_weight: 1.0,
        }
    }

    #[test]
    fn kappa_zero_keeps_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_inputs(dir.path(), 10);
        let out = build(&cfg, Some(2)).unwrap();
        assert_eq!(out.manifest.counts.kept, 10);
        assert_eq!(out.manifest.counts.train_examples, 10);
        let train = dataset::parse(&std::fs::read_to_string(dir.path().join("out").join(TRAIN_FILE)).unwrap()).unwrap();
        assert_eq!(train.len(), 10);
    }

    #[test]
    fn strict_filter_empties_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = write_inputs(dir.path(), 5);
        cfg.consistency.kappa = 1.0;
        cfg.consistency.delta = 1.0;
        let err = build(&cfg, None).unwrap_err();
        assert!(matches!(err, PipelineError::NoSurvivors { generated: 5, .. }));
        assert_eq!(err.kind(), FailureKind::Contract);
        assert!(dir.path().join("out").join(MANIFEST_FILE).exists());
    }

    #[test]
    fn toml_and_json_hash_alike() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_inputs(dir.path(), 1);
        let json = serde_json::to_string(&cfg).unwrap();
        let toml_text = toml::to_string(&cfg).unwrap();
        let a = PipelineConfig::parse(&json, false).unwrap();
        let b = PipelineConfig::parse(&toml_text, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = write_inputs(dir.path(), 1);
        cfg.paths.input = dir.path().join("missing.jsonl");
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        let mut cfg = write_inputs(dir.path(), 1);
        cfg.endpoints.strong.role = Role::Weak;
        assert_eq!(cfg.validate().unwrap_err().kind(), FailureKind::Config);
        let err = PipelineConfig::parse(r#"{"seed": "x"}"#, false).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn sft_items_are_mixed_in() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = write_inputs(dir.path(), 8);
        let sft: Vec<RawRecord> = (0..5)
            .map(|i| RawRecord {
                id: format!("s{i}"),
                text: format!("plain instruction {i} with words"),
                answer: Some(format!("answer {i}")),
                source: "sft".into(),
            })
            .collect();
        jsonl::write_path(&dir.path().join("sft.jsonl"), &sft).unwrap();
        cfg.paths.sft_pairs = Some(dir.path().join("sft.jsonl"));
        let out = build(&cfg, None).unwrap();
        // round(0.2 * 8 / 0.8) = 2
        assert_eq!(out.manifest.counts.sft_items, 2);
        assert_eq!(out.manifest.counts.train_examples, 10);

        let re = dir.path().join("re.jsonl");
        let n = emit_train(&dir.path().join("out").join(SAMPLES_FILE), &re, "think again", 2.0).unwrap();
        assert_eq!(n, 10);
        let train = dataset::parse(&std::fs::read_to_string(&re).unwrap()).unwrap();
        assert!(train.iter().all(|t| t.spans.last().unwrap().loss_weight == 2.0));
    }
}
