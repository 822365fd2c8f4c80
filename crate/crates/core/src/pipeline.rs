//! Pipeline stages as restartable commands over an output directory.
//!
//! Each command reads declared inputs, writes its outputs and a manifest
//! under `manifests/<command>.json` holding the config hash, backend kind
//! and SHA-256 digests of every input and output. A rerun whose manifest
//! still matches is skipped unless forced.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{load_qa_dataset, AnnotatedQuery, Annotator, QaRecord};
use crate::curation::{curate, CorrectnessOracle, CuratedRecord, F1Oracle, F1OrJudge};
use crate::eval::{evaluate, output_stats, MetricSet};
use crate::export::{build_dpo_pairs, rl_reward, to_sft_example};
use crate::gateways::{
    CachePolicy, HttpLlm, HttpSearchProvider, LlmClient, OfflineProvider, ReplayLlm, ReplayMode,
    SearchClient, SearchGateway,
};
use crate::jsonl::{read_jsonl, write_json, write_jsonl, JsonlError};
use crate::orchestrator::{sample_candidates, AgentClients, StopReason, Trajectory};
use crate::sampler::sample_diverse_with_report;
use crate::sim::{self, SimAnnotator, SimJudge, SimReasoner, SimSummarizer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const ANNOTATED: &str = "annotated.jsonl";
pub const ANNOTATION_ERRORS: &str = "annotation_errors.jsonl";
pub const SELECTED: &str = "selected.jsonl";
pub const SAMPLING_REPORT: &str = "sampling_report.json";
pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const CURATED: &str = "curated.jsonl";
pub const CURATED_TRAJECTORIES: &str = "curated_trajectories.jsonl";
pub const SURVIVORS: &str = "survivors.jsonl";
pub const AUDIT: &str = "audit.jsonl";
pub const QUESTIONS: &str = "question_summary.jsonl";
pub const SFT: &str = "sft.jsonl";
pub const DPO: &str = "dpo.jsonl";
pub const REWARDS: &str = "rewards.jsonl";
pub const EVAL_ITEMS: &str = "eval_report.jsonl";
pub const EVAL_SUMMARY: &str = "eval_summary.json";
pub const EVAL_TABLE: &str = "eval_report.txt";
pub const STATS: &str = "stats.json";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {artifact}; run {producer}")]
    MissingInput { artifact: String, producer: String },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Data(#[from] JsonlError),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput { .. } => 3,
            Self::Backend(_) => 4,
            Self::Data(_) | Self::Invalid(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Annotate,
    Sample,
    Synthesize,
    Curate,
    ExportSft,
    ExportDpo,
    Reward,
    Eval,
    Stats,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Self::Annotate,
        Self::Sample,
        Self::Synthesize,
        Self::Curate,
        Self::ExportSft,
        Self::ExportDpo,
        Self::Reward,
        Self::Eval,
        Self::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Annotate => "annotate",
            Self::Sample => "sample",
            Self::Synthesize => "synthesize",
            Self::Curate => "curate",
            Self::ExportSft => "export-sft",
            Self::ExportDpo => "export-dpo",
            Self::Reward => "reward",
            Self::Eval => "eval",
            Self::Stats => "stats",
        }
    }

    fn outputs(self) -> &'static [&'static str] {
        match self {
            Self::Annotate => &[ANNOTATED, ANNOTATION_ERRORS],
            Self::Sample => &[SELECTED, SAMPLING_REPORT],
            Self::Synthesize => &[TRAJECTORIES],
            Self::Curate => &[CURATED, CURATED_TRAJECTORIES, SURVIVORS, AUDIT, QUESTIONS],
            Self::ExportSft => &[SFT],
            Self::ExportDpo => &[DPO],
            Self::Reward => &[REWARDS],
            Self::Eval => &[EVAL_ITEMS, EVAL_SUMMARY, EVAL_TABLE],
            Self::Stats => &[STATS],
        }
    }

    fn needs_backends(self, opts: &RunOptions, cfg: &PipelineConfig) -> bool {
        match self {
            Self::Annotate | Self::Synthesize => true,
            Self::Curate | Self::ExportDpo => cfg.curation.use_judge,
            Self::Eval => opts.metrics.judge,
            Self::Sample | Self::ExportSft | Self::Reward | Self::Stats => false,
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command {s:?}"))
    }
}

/// Where LLM and search traffic goes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendMode {
    /// Built-in simulated models and the search fixture.
    Mock,
    /// Serve every call from a recorded archive; misses are errors.
    Replay(PathBuf),
    /// Configured HTTP endpoints, cached under the cache directory.
    Live,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    pub mode: BackendMode,
    /// Archive every call under this directory for later replay.
    pub record: Option<PathBuf>,
}

impl BackendSpec {
    pub fn mock() -> Self {
        Self { mode: BackendMode::Mock, record: None }
    }

    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self { mode: BackendMode::Replay(dir.into()), record: None }
    }

    pub fn recording(mut self, dir: impl Into<PathBuf>) -> Self {
        self.record = Some(dir.into());
        self
    }

    fn kind(&self) -> &'static str {
        match self.mode {
            BackendMode::Mock => "mock",
            BackendMode::Replay(_) => "replay",
            BackendMode::Live => "live",
        }
    }
}

pub struct Backends {
    pub reasoner: Arc<dyn LlmClient>,
    pub summarizer: Arc<dyn LlmClient>,
    pub annotator: Arc<dyn LlmClient>,
    pub judge: Arc<dyn LlmClient>,
    pub searcher: Arc<dyn SearchClient>,
}

fn llm_dir(dir: &Path) -> PathBuf {
    dir.join("llm")
}

fn search_dir(dir: &Path) -> PathBuf {
    dir.join("search")
}

impl Backends {
    pub fn build(cfg: &PipelineConfig, spec: &BackendSpec) -> Result<Self, PipelineError> {
        let provider = cfg.endpoints.search.provider.clone();
        let budget = cfg.synthesis.doc_char_budget;
        match &spec.mode {
            BackendMode::Mock => {
                let wrap = |inner: Arc<dyn LlmClient>| -> Arc<dyn LlmClient> {
                    match &spec.record {
                        Some(dir) => Arc::new(ReplayLlm::recording(llm_dir(dir), ReplayMode::Record, inner)),
                        None => inner,
                    }
                };
                let fixture = match &cfg.paths.search_fixture {
                    Some(p) => crate::gateways::FixtureSearchProvider::from_jsonl(p)
                        .map_err(|e| ConfigError::Invalid {
                            field: "paths.search_fixture".into(),
                            message: e.to_string(),
                        })?,
                    None => sim::bundled_search_fixture(),
                };
                let policy = match &spec.record {
                    Some(dir) => CachePolicy::ReadWrite(search_dir(dir)),
                    None => CachePolicy::Memory,
                };
                Ok(Self {
                    reasoner: wrap(Arc::new(SimReasoner::new(cfg.synthesis.tokens.clone()))),
                    summarizer: wrap(Arc::new(SimSummarizer)),
                    annotator: wrap(Arc::new(SimAnnotator)),
                    judge: wrap(Arc::new(SimJudge)),
                    searcher: Arc::new(
                        SearchGateway::new(fixture.with_name(provider), policy).with_doc_char_budget(budget),
                    ),
                })
            }
            BackendMode::Replay(dir) => {
                let llm: Arc<dyn LlmClient> = Arc::new(ReplayLlm::replay(llm_dir(dir)));
                Ok(Self {
                    reasoner: llm.clone(),
                    summarizer: llm.clone(),
                    annotator: llm.clone(),
                    judge: llm,
                    searcher: Arc::new(
                        SearchGateway::new(OfflineProvider::new(provider), CachePolicy::ReplayOnly(search_dir(dir)))
                            .with_doc_char_budget(budget),
                    ),
                })
            }
            BackendMode::Live => {
                let archive = spec.record.clone().unwrap_or_else(|| cfg.paths.cache_dir.clone());
                let e = &cfg.endpoints;
                let live = |role: &str, ep: &crate::config::LlmEndpoint| -> Result<Arc<dyn LlmClient>, PipelineError> {
                    if ep.url.trim().is_empty() {
                        return Err(ConfigError::Invalid {
                            field: format!("endpoints.{role}.url"),
                            message: "required for live runs".into(),
                        }
                        .into());
                    }
                    let key = std::env::var(&ep.api_key_env).ok();
                    let client = HttpLlm::new(&ep.url, key).with_model(&ep.model);
                    Ok(Arc::new(ReplayLlm::recording(llm_dir(&archive), ReplayMode::Auto, Arc::new(client))))
                };
                let reasoner = live("reasoner", &e.reasoner)?;
                let summarizer = live("summarizer", &e.summarizer)?;
                let annotator = live("annotator", &e.annotator)?;
                let judge = live("judge", &e.judge)?;
                if e.search.url.trim().is_empty() {
                    return Err(ConfigError::Invalid {
                        field: "endpoints.search.url".into(),
                        message: "required for live runs".into(),
                    }
                    .into());
                }
                let key = std::env::var(&e.search.api_key_env).ok();
                let search = HttpSearchProvider::new(provider, &e.search.url, key).fetching_pages(e.search.fetch_pages);
                Ok(Self {
                    reasoner,
                    summarizer,
                    annotator,
                    judge,
                    searcher: Arc::new(
                        SearchGateway::new(search, CachePolicy::ReadWrite(search_dir(&archive)))
                            .with_doc_char_budget(budget),
                    ),
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub force: bool,
    pub metrics: MetricSet,
    /// Weak-model trajectories for DPO export; overrides the config path.
    pub weak: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { force: false, metrics: MetricSet::default(), weak: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub backend: String,
    pub config_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Completed,
    /// Inputs, config and outputs matched the previous manifest.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub command: Command,
    pub status: StageStatus,
    pub summary: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// An input the command reads, with what to say when it is absent.
struct Input {
    label: String,
    path: Option<PathBuf>,
    bundled: Option<&'static str>,
    artifact: &'static str,
    producer: String,
}

impl Input {
    fn artifact(out: &Path, file: &str, artifact: &'static str, producer: Command) -> Self {
        Self {
            label: file.to_string(),
            path: Some(out.join(file)),
            bundled: None,
            artifact,
            producer: producer.name().to_string(),
        }
    }

    fn digest(&self) -> Result<FileDigest, PipelineError> {
        let sha256 = match (&self.path, self.bundled) {
            (Some(p), _) => digest_file(p).ok_or_else(|| PipelineError::MissingInput {
                artifact: self.artifact.to_string(),
                producer: self.producer.clone(),
            })?,
            (None, Some(content)) => sha256_hex(content.as_bytes()),
            (None, None) => unreachable!("inputs have a path or bundled content"),
        };
        Ok(FileDigest { path: self.label.clone(), sha256 })
    }
}

fn inputs_for(cmd: Command, cfg: &PipelineConfig, spec: &BackendSpec, opts: &RunOptions) -> Vec<Input> {
    let out = &cfg.paths.output_dir;
    let external = |path: &Option<PathBuf>, bundled: &'static str, what: &'static str| match path {
        Some(p) => Input {
            label: p.display().to_string(),
            path: Some(p.clone()),
            bundled: None,
            artifact: what,
            producer: "a valid path".into(),
        },
        None => Input {
            label: format!("<bundled {what}>"),
            path: None,
            bundled: Some(bundled),
            artifact: what,
            producer: String::new(),
        },
    };
    let trajectories = || Input::artifact(out, TRAJECTORIES, "trajectories", Command::Synthesize);
    match cmd {
        Command::Annotate => vec![external(&cfg.paths.corpus, sim::BUNDLED_CORPUS, "corpus")],
        Command::Sample => vec![Input::artifact(out, ANNOTATED, "annotated queries", Command::Annotate)],
        Command::Synthesize => {
            let mut v = vec![Input::artifact(out, SELECTED, "selected queries", Command::Sample)];
            if spec.mode == BackendMode::Mock {
                v.push(external(&cfg.paths.search_fixture, sim::BUNDLED_SEARCH_FIXTURE, "search fixture"));
            }
            v
        }
        Command::Curate | Command::Reward | Command::Eval | Command::Stats => vec![trajectories()],
        Command::ExportSft => {
            vec![Input::artifact(out, CURATED_TRAJECTORIES, "curated trajectories", Command::Curate)]
        }
        Command::ExportDpo => {
            let weak = opts.weak.clone().or_else(|| cfg.paths.weak_trajectories.clone());
            let weak = match weak {
                Some(p) => Input {
                    label: p.display().to_string(),
                    path: Some(p),
                    bundled: None,
                    artifact: "weak trajectories",
                    producer: "synthesize with the target model".into(),
                },
                None => Input {
                    label: "weak trajectories".into(),
                    path: Some(PathBuf::new()),
                    bundled: None,
                    artifact: "weak trajectories",
                    producer: "synthesize with the target model and pass --weak".into(),
                },
            };
            vec![trajectories(), weak]
        }
    }
}

fn manifest_path(out: &Path, cmd: Command) -> PathBuf {
    out.join(MANIFEST_DIR).join(format!("{}.json", cmd.name()))
}

fn config_hash(cfg: &PipelineConfig, spec: &BackendSpec, opts: &RunOptions, cmd: Command) -> String {
    let mut material = format!("{}\n{}", cfg.content_hash(), spec.kind());
    if cmd == Command::Eval {
        let m = opts.metrics;
        material.push_str(&format!("\nf1={} judge={} stages={}", m.f1, m.judge, m.stages));
    }
    sha256_hex(material.as_bytes())
}

fn up_to_date(previous: &Manifest, current_inputs: &[FileDigest], hash: &str, out: &Path) -> bool {
    previous.version == VERSION
        && previous.config_hash == hash
        && previous.inputs == current_inputs
        && previous
            .outputs
            .iter()
            .all(|o| digest_file(&out.join(&o.path)).as_deref() == Some(o.sha256.as_str()))
}

/// Runs one command. `backends` is only called for commands that talk to
/// a model or search engine.
pub fn run_command(
    cmd: Command,
    cfg: &PipelineConfig,
    spec: &BackendSpec,
    opts: &RunOptions,
    backends: &dyn Fn() -> Result<Backends, PipelineError>,
) -> Result<StageReport, PipelineError> {
    cfg.validate()?;
    let out = cfg.paths.output_dir.clone();
    let inputs = inputs_for(cmd, cfg, spec, opts);
    let digests = inputs.iter().map(Input::digest).collect::<Result<Vec<_>, _>>()?;
    let hash = config_hash(cfg, spec, opts, cmd);
    let mpath = manifest_path(&out, cmd);

    if !opts.force {
        if let Some(prev) = fs::read(&mpath).ok().and_then(|b| serde_json::from_slice::<Manifest>(&b).ok()) {
            if up_to_date(&prev, &digests, &hash, &out) {
                tracing::info!(command = cmd.name(), "outputs up to date; skipping");
                return Ok(StageReport { command: cmd, status: StageStatus::Skipped, summary: "up to date".into() });
            }
        }
    }

    let backends = if cmd.needs_backends(opts, cfg) { Some(backends()?) } else { None };
    let ctx = Ctx { cfg, out: &out, backends: backends.as_ref(), opts, inputs: &inputs };
    let summary = match cmd {
        Command::Annotate => annotate(&ctx)?,
        Command::Sample => sample(&ctx)?,
        Command::Synthesize => synthesize(&ctx)?,
        Command::Curate => curate_stage(&ctx)?,
        Command::ExportSft => export_sft(&ctx)?,
        Command::ExportDpo => export_dpo(&ctx)?,
        Command::Reward => reward(&ctx)?,
        Command::Eval => eval_stage(&ctx)?,
        Command::Stats => stats(&ctx)?,
    };

    let outputs = cmd
        .outputs()
        .iter()
        .map(|name| FileDigest {
            path: name.to_string(),
            sha256: digest_file(&out.join(name)).unwrap_or_default(),
        })
        .collect();
    let manifest = Manifest {
        command: cmd.name().to_string(),
        version: VERSION.to_string(),
        backend: spec.kind().to_string(),
        config_hash: hash,
        inputs: digests,
        outputs,
    };
    write_json(&mpath, &manifest)?;
    Ok(StageReport { command: cmd, status: StageStatus::Completed, summary })
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
    backends: Option<&'a Backends>,
    opts: &'a RunOptions,
    inputs: &'a [Input],
}

impl Ctx<'_> {
    fn backends(&self) -> &Backends {
        self.backends.expect("command declared it needs backends")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn pool(&self) -> Result<rayon::ThreadPool, PipelineError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.concurrency)
            .build()
            .map_err(|e| PipelineError::Invalid(format!("cannot start worker pool: {e}")))
    }

    fn oracle(&self) -> Box<dyn CorrectnessOracle + '_> {
        let threshold = self.cfg.curation.f1_threshold;
        if self.cfg.curation.use_judge {
            Box::new(F1OrJudge { threshold, judge: self.backends().judge.as_ref() })
        } else {
            Box::new(F1Oracle { threshold })
        }
    }
}

#[derive(Debug, Serialize)]
struct AnnotationFailure {
    record_id: String,
    code: String,
    message: String,
}

fn annotate(ctx: &Ctx) -> Result<String, PipelineError> {
    let cfg = ctx.cfg;
    let records: Vec<QaRecord> = match &cfg.paths.corpus {
        Some(p) => load_qa_dataset(p, cfg.paths.corpus_format),
        None => sim::bundled_corpus(),
    }
    .map_err(|e| PipelineError::Invalid(format!("corpus: {e}")))?;
    let annotator = Annotator::new(ctx.backends().annotator.clone(), &cfg.sampling.domain_labels)
        .with_lexicon(cfg.sampling.interrogatives.clone());
    let results: Vec<_> = ctx.pool()?.install(|| records.par_iter().map(|r| annotator.annotate(r)).collect());
    let mut annotated = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(a) => annotated.push(a),
            Err(e) => failures.push(AnnotationFailure {
                record_id: e.record_id().to_string(),
                code: e.code().to_string(),
                message: e.to_string(),
            }),
        }
    }
    write_jsonl(&ctx.path(ANNOTATED), &annotated)?;
    write_jsonl(&ctx.path(ANNOTATION_ERRORS), &failures)?;
    if annotated.is_empty() && failures.iter().any(|f| f.code == "annotation_backend_failure") {
        return Err(PipelineError::Backend(format!("all {} annotations failed", failures.len())));
    }
    Ok(format!("annotated {} queries, {} failures", annotated.len(), failures.len()))
}

fn sample(ctx: &Ctx) -> Result<String, PipelineError> {
    let annotated: Vec<AnnotatedQuery> = read_jsonl(&ctx.path(ANNOTATED))?;
    let outcome = sample_diverse_with_report(&annotated, ctx.cfg.sampling.target)
        .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    write_jsonl(&ctx.path(SELECTED), &outcome.selected)?;
    write_json(&ctx.path(SAMPLING_REPORT), &outcome.report)?;
    Ok(format!(
        "selected {} of {} queries across {} domains",
        outcome.selected.len(),
        annotated.len(),
        outcome.report.domains.len()
    ))
}

/// Synthesizes every candidate for every query on a bounded worker pool.
pub fn synthesize_all(
    queries: &[AnnotatedQuery],
    cfg: &PipelineConfig,
    backends: &Backends,
    pool: &rayon::ThreadPool,
) -> Vec<Trajectory> {
    let clients = AgentClients {
        reasoner: backends.reasoner.as_ref(),
        searcher: backends.searcher.as_ref(),
        summarizer: backends.summarizer.as_ref(),
    };
    let per_query: Vec<Vec<Trajectory>> = pool.install(|| {
        queries
            .par_iter()
            .map(|q| sample_candidates(q, &cfg.synthesis, clients, cfg.seed))
            .collect()
    });
    per_query.into_iter().flatten().collect()
}

fn synthesize(ctx: &Ctx) -> Result<String, PipelineError> {
    let queries: Vec<AnnotatedQuery> = read_jsonl(&ctx.path(SELECTED))?;
    let trajectories = synthesize_all(&queries, ctx.cfg, ctx.backends(), &ctx.pool()?);
    write_jsonl(&ctx.path(TRAJECTORIES), &trajectories)?;
    let failed = trajectories.iter().filter(|t| t.stop_reason == StopReason::BackendError).count();
    if !trajectories.is_empty() && failed == trajectories.len() {
        let first = trajectories[0].error.as_ref().map(|e| e.message.clone()).unwrap_or_default();
        return Err(PipelineError::Backend(format!("every trajectory failed; first error: {first}")));
    }
    Ok(format!("{} trajectories for {} queries, {failed} backend errors", trajectories.len(), queries.len()))
}

fn curate_stage(ctx: &Ctx) -> Result<String, PipelineError> {
    let trajectories: Vec<Trajectory> = read_jsonl(&ctx.path(TRAJECTORIES))?;
    let oracle = ctx.oracle();
    let outcome = curate(&trajectories, &ctx.cfg.synthesis.tokens, &ctx.cfg.curation, oracle.as_ref());
    write_jsonl(&ctx.path(CURATED), &outcome.curated)?;
    write_jsonl(&ctx.path(CURATED_TRAJECTORIES), &outcome.chosen)?;
    write_jsonl(&ctx.path(SURVIVORS), &outcome.survivors)?;
    write_jsonl(&ctx.path(AUDIT), &outcome.audit)?;
    write_jsonl(&ctx.path(QUESTIONS), &outcome.questions)?;
    Ok(format!(
        "curated {} of {} questions; {} rejections audited",
        outcome.curated.len(),
        outcome.questions.len(),
        outcome.audit.len()
    ))
}

fn export_sft(ctx: &Ctx) -> Result<String, PipelineError> {
    let chosen: Vec<Trajectory> = read_jsonl(&ctx.path(CURATED_TRAJECTORIES))?;
    let examples = chosen
        .iter()
        .map(to_sft_example)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    write_jsonl(&ctx.path(SFT), &examples)?;
    Ok(format!("{} SFT examples", examples.len()))
}

fn export_dpo(ctx: &Ctx) -> Result<String, PipelineError> {
    let strong: Vec<Trajectory> = read_jsonl(&ctx.path(TRAJECTORIES))?;
    let weak_path = ctx.inputs[1].path.clone().expect("weak input has a path");
    let weak: Vec<Trajectory> = read_jsonl(&weak_path)?;
    let oracle = ctx.oracle();
    let pairs = build_dpo_pairs(&strong, &weak, &ctx.cfg.synthesis.tokens, &ctx.cfg.curation, oracle.as_ref());
    write_jsonl(&ctx.path(DPO), &pairs)?;
    Ok(format!("{} preference pairs", pairs.len()))
}

fn reward(ctx: &Ctx) -> Result<String, PipelineError> {
    let trajectories: Vec<Trajectory> = read_jsonl(&ctx.path(TRAJECTORIES))?;
    let rewards: Vec<_> = trajectories
        .iter()
        .map(|t| rl_reward(t, &ctx.cfg.synthesis.tokens, &ctx.cfg.reward))
        .collect();
    write_jsonl(&ctx.path(REWARDS), &rewards)?;
    let penalized = rewards.iter().filter(|r| !r.flags.is_empty()).count();
    Ok(format!("{} rewards, {penalized} penalized", rewards.len()))
}

fn eval_stage(ctx: &Ctx) -> Result<String, PipelineError> {
    let trajectories: Vec<Trajectory> = read_jsonl(&ctx.path(TRAJECTORIES))?;
    let judge = ctx.backends.map(|b| b.judge.as_ref());
    let report = evaluate(&trajectories, judge, ctx.opts.metrics).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    write_jsonl(&ctx.path(EVAL_ITEMS), &report.items)?;
    let mut summary = serde_json::to_value(&report).expect("report serializes");
    summary.as_object_mut().expect("report is an object").remove("items");
    write_json(&ctx.path(EVAL_SUMMARY), &summary)?;
    let table = report.render_table();
    crate::jsonl::write_atomic(&ctx.path(EVAL_TABLE), table.as_bytes())?;
    Ok(table)
}

#[derive(Debug, Serialize)]
struct StatsReport {
    trajectories: usize,
    questions: usize,
    stop_reasons: Vec<(StopReason, usize)>,
    mean_alternatively: f64,
    mean_searches: f64,
    mean_output_length: f64,
}

fn stats(ctx: &Ctx) -> Result<String, PipelineError> {
    let trajectories: Vec<Trajectory> = read_jsonl(&ctx.path(TRAJECTORIES))?;
    let s = output_stats(&trajectories).map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let mut questions: Vec<&str> = trajectories.iter().map(|t| t.query.record.id.as_str()).collect();
    questions.sort_unstable();
    questions.dedup();
    let stop_reasons = [
        StopReason::Answered,
        StopReason::MaxSearches,
        StopReason::MaxTurns,
        StopReason::MaxTokens,
        StopReason::BackendError,
    ]
    .into_iter()
    .map(|r| (r, trajectories.iter().filter(|t| t.stop_reason == r).count()))
    .collect();
    let report = StatsReport {
        trajectories: trajectories.len(),
        questions: questions.len(),
        stop_reasons,
        mean_alternatively: s.mean_alternatively,
        mean_searches: s.mean_searches,
        mean_output_length: s.mean_length,
    };
    write_json(&ctx.path(STATS), &report)?;
    Ok(format!(
        "{} trajectories: mean searches {:.2}, mean length {:.1}, mean 'alternatively' {:.2}",
        report.trajectories, s.mean_searches, s.mean_length, s.mean_alternatively
    ))
}

/// Reads curated records, for callers that want the curated set without
/// trajectories.
pub fn read_curated(out: &Path) -> Result<Vec<CuratedRecord>, PipelineError> {
    Ok(read_jsonl(&out.join(CURATED))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(out: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.paths.output_dir = out.to_path_buf();
        cfg.synthesis.candidates_per_query = 3;
        cfg
    }

    fn run(cmd: Command, cfg: &PipelineConfig, spec: &BackendSpec) -> Result<StageReport, PipelineError> {
        run_command(cmd, cfg, spec, &RunOptions::default(), &|| Backends::build(cfg, spec))
    }

    #[test]
    fn dependency_guard_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let err = run(Command::Curate, &cfg, &BackendSpec::mock()).unwrap_err();
        assert_eq!(err.to_string(), "missing trajectories; run synthesize");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn mock_pipeline_runs_and_skips_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let spec = BackendSpec::mock();
        for cmd in [Command::Annotate, Command::Sample, Command::Synthesize, Command::Curate, Command::ExportSft] {
            assert_eq!(run(cmd, &cfg, &spec).unwrap().status, StageStatus::Completed, "{cmd}");
        }
        let before = fs::read(dir.path().join(TRAJECTORIES)).unwrap();
        assert_eq!(run(Command::Synthesize, &cfg, &spec).unwrap().status, StageStatus::Skipped);
        let forced = run_command(
            Command::Synthesize,
            &cfg,
            &spec,
            &RunOptions { force: true, ..RunOptions::default() },
            &|| Backends::build(&cfg, &spec),
        )
        .unwrap();
        assert_eq!(forced.status, StageStatus::Completed);
        assert_eq!(fs::read(dir.path().join(TRAJECTORIES)).unwrap(), before);
    }

    #[test]
    fn replay_miss_is_a_backend_error() {
        let dir = tempfile::tempdir().unwrap();
        let archive = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let err = run(Command::Annotate, &cfg, &BackendSpec::replay(archive.path())).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn live_without_endpoint_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let spec = BackendSpec { mode: BackendMode::Live, record: None };
        let err = run(Command::Annotate, &cfg, &spec).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().starts_with("endpoints.reasoner.url"), "{err}");
    }
}
