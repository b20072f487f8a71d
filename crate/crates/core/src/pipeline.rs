//! Declarative pipeline: ingest, mix, an ordered list of record stages, emit.
//!
//! Record stages run on a pool of `workers` threads. Each stage is a barrier
//! and results are collected in input order, so the output and the report do
//! not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::budget::{fit_to_context, pad_sequence, truncate_by_score, BudgetConfig, Tokenizer};
use crate::corpus::{
    ingest_conversation_trees, ingest_doc_summary, ingest_qa, linearize_tree, mix, read_records_jsonl,
    write_qa_jsonl, Dataset, Payload, Record,
};
use crate::filters::{
    clean_text, compression_ratio_filter, load_wordlist, profanity_filter, qa_similarity_filter, quality_filter,
    reason_vocabulary, truncate_by_length, CleanConfig, QualityConfig,
};
use crate::prompts::{format_conversation, mark_boundaries, PromptScheme};
use crate::scoring::{score_filter_mask, HeuristicScorer, OnScorerError, RemoteScorer, ScoreFilterConfig, Scorer};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    QaJsonl,
    TreeJson,
    DocSummaryJsonl,
    RecordsJsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub path: PathBuf,
    pub format: InputFormat,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    RecordsJsonl,
    QaJsonl,
    /// `{"id": ..., "text": ...}` per line; needs a `format` stage.
    TextJsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub on_error: OnScorerError,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: 10_000,
            max_in_flight: 4,
            on_error: OnScorerError::Abort,
        }
    }
}

/// One entry of the stage list: an operation name plus its parameters,
/// written inline next to `op`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub op: String,
    #[serde(flatten)]
    pub params: Map<String, Value>,
}

impl StageSpec {
    pub fn new(op: &str) -> Self {
        Self {
            op: op.to_string(),
            params: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Vec<InputSpec>,
    #[serde(default)]
    pub mix_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub prompt: PromptScheme,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    pub output: OutputSpec,
}

impl PipelineConfig {
    /// Parse a config document. Relative paths (inputs, output, wordlists)
    /// are resolved against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, serde_json::Error> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            stage: "config".into(),
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolve_paths(&mut self, base_dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        for i in &mut self.inputs {
            fix(&mut i.path);
        }
        fix(&mut self.output.path);
        for s in &mut self.stages {
            if let Some(Value::String(w)) = s.params.get_mut("wordlist") {
                let mut p = PathBuf::from(&*w);
                fix(&mut p);
                *w = p.to_string_lossy().into_owned();
            }
        }
    }

    /// `<output>.report.json`
    pub fn report_path(&self) -> PathBuf {
        report_path_for(&self.output.path)
    }
}

pub fn report_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".report.json");
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Problem {
    pub code: &'static str,
    /// Location within the config document, e.g. `stages[2].threshold`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} ({})", self.path, self.message, self.code)
    }
}

fn problem(code: &'static str, path: impl Into<String>, message: impl Into<String>) -> Problem {
    Problem {
        code,
        path: path.into(),
        message: message.into(),
    }
}

pub const STAGE_OPS: [&str; 13] = [
    "clean",
    "quality",
    "profanity",
    "similarity",
    "compression_ratio",
    "truncate_by_length",
    "score",
    "score_filter",
    "format",
    "fit_to_context",
    "pad",
    "truncate_by_score",
    "boundary_mark",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerChoice {
    Heuristic,
    Remote,
}

#[derive(Debug, Clone)]
enum Stage {
    Clean(CleanConfig),
    Quality(QualityConfig),
    Profanity(BTreeSet<String>),
    Similarity(f64),
    CompressionRatio { min_ratio: f64, max_ratio: f64 },
    TruncateByLength(usize),
    Score(ScorerChoice),
    ScoreFilter(ScoreFilterConfig),
    Format,
    FitToContext,
    Pad,
    TruncateByScore(usize),
    BoundaryMark { start: String, end: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfanityParams {
    #[serde(default)]
    wordlist: Option<PathBuf>,
    #[serde(default)]
    words: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimilarityParams {
    #[serde(default = "default_similarity")]
    threshold: f64,
}

fn default_similarity() -> f64 {
    0.05
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatioParams {
    #[serde(default = "default_min_ratio")]
    min_ratio: f64,
    #[serde(default = "default_max_ratio")]
    max_ratio: f64,
}

fn default_min_ratio() -> f64 {
    1.3
}

fn default_max_ratio() -> f64 {
    50.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaxTokensParams {
    max_tokens: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreParams {
    #[serde(default)]
    scorer: Option<ScorerChoice>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptyParams {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TruncateByScoreParams {
    #[serde(default)]
    budget_tokens: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundaryParams {
    #[serde(default = "default_start")]
    start: String,
    #[serde(default = "default_end")]
    end: String,
}

fn default_start() -> String {
    "<s>".into()
}

fn default_end() -> String {
    "</s>".into()
}

fn params<T: serde::de::DeserializeOwned>(spec: &StageSpec, at: &str, problems: &mut Vec<Problem>) -> Option<T> {
    match serde_json::from_value(Value::Object(spec.params.clone())) {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(problem("bad_params", at, e.to_string()));
            None
        }
    }
}

/// Where in the stage list formatted text exists.
#[derive(Default)]
struct OrderState {
    formatted: bool,
    scored: bool,
}

fn build_stage(
    spec: &StageSpec,
    at: &str,
    cfg: &PipelineConfig,
    order: &mut OrderState,
    problems: &mut Vec<Problem>,
) -> Option<Stage> {
    let tokenizer = cfg.budget.tokenizer.tokenizer();
    let mut order_problem = |msg: &str| problems.push(problem("stage_order", at, msg));
    let needs_text = ["fit_to_context", "pad", "boundary_mark"];
    let payload_mutators = ["clean", "truncate_by_score"];
    if needs_text.contains(&spec.op.as_str()) && !order.formatted {
        order_problem(&format!("{} needs a preceding format stage", spec.op));
    }
    if payload_mutators.contains(&spec.op.as_str()) && order.formatted {
        order_problem(&format!("{} must come before format", spec.op));
    }
    if spec.op == "format" && order.formatted {
        order_problem("format may appear only once");
    }
    if spec.op == "score_filter" && !order.scored {
        order_problem("score_filter needs a preceding score stage or scored records input");
    }

    let stage = match spec.op.as_str() {
        "clean" => Stage::Clean(params::<CleanConfig>(spec, at, problems)?.normalized()),
        "quality" => {
            let q: QualityConfig = params(spec, at, problems)?;
            if let Err(m) = q.validate() {
                problems.push(problem("bad_params", at, m));
                return None;
            }
            Stage::Quality(q)
        }
        "profanity" => {
            let p: ProfanityParams = params(spec, at, problems)?;
            let mut words: BTreeSet<String> = p.words.iter().map(|w| w.to_lowercase()).collect();
            if let Some(path) = &p.wordlist {
                match File::open(path).and_then(|f| load_wordlist(BufReader::new(f))) {
                    Ok(list) => words.extend(list),
                    Err(e) => {
                        problems.push(problem(
                            "missing_input",
                            format!("{at}.wordlist"),
                            format!("{}: {e}", path.display()),
                        ));
                        return None;
                    }
                }
            } else if p.words.is_empty() {
                problems.push(problem("bad_params", at, "profanity needs `wordlist` or `words`"));
                return None;
            }
            Stage::Profanity(words)
        }
        "similarity" => {
            let p: SimilarityParams = params(spec, at, problems)?;
            if !(0.0..=1.0).contains(&p.threshold) {
                problems.push(problem("bad_params", format!("{at}.threshold"), "threshold must lie in [0, 1]"));
                return None;
            }
            Stage::Similarity(p.threshold)
        }
        "compression_ratio" => {
            let p: RatioParams = params(spec, at, problems)?;
            if !(p.min_ratio >= 0.0 && p.min_ratio <= p.max_ratio) {
                problems.push(problem("bad_params", at, "need 0 <= min_ratio <= max_ratio"));
                return None;
            }
            Stage::CompressionRatio {
                min_ratio: p.min_ratio,
                max_ratio: p.max_ratio,
            }
        }
        "truncate_by_length" => Stage::TruncateByLength(params::<MaxTokensParams>(spec, at, problems)?.max_tokens),
        "score" => {
            let p: ScoreParams = params(spec, at, problems)?;
            let choice = p.scorer.unwrap_or(if cfg.scoring.endpoint.is_some() {
                ScorerChoice::Remote
            } else {
                ScorerChoice::Heuristic
            });
            if choice == ScorerChoice::Remote && cfg.scoring.endpoint.is_none() {
                problems.push(problem("bad_params", at, "remote scorer needs scoring.endpoint"));
                return None;
            }
            order.scored = true;
            Stage::Score(choice)
        }
        "score_filter" => {
            let f: ScoreFilterConfig = params(spec, at, problems)?;
            if let Err(e) = f.validate() {
                problems.push(problem("bad_params", at, e.to_string()));
                return None;
            }
            Stage::ScoreFilter(f)
        }
        "format" => {
            params::<EmptyParams>(spec, at, problems)?;
            order.formatted = true;
            Stage::Format
        }
        "fit_to_context" => {
            params::<EmptyParams>(spec, at, problems)?;
            Stage::FitToContext
        }
        "pad" => {
            params::<EmptyParams>(spec, at, problems)?;
            let padding = BudgetConfig {
                pad_to_max: true,
                ..cfg.budget.clone()
            };
            if let Err(e) = padding.validate(tokenizer) {
                problems.push(problem(e.code(), "budget.pad_symbol", e.to_string()));
                return None;
            }
            Stage::Pad
        }
        "truncate_by_score" => {
            let p: TruncateByScoreParams = params(spec, at, problems)?;
            let budget = p.budget_tokens.unwrap_or(cfg.budget.context_tokens);
            if budget == 0 {
                problems.push(problem("bad_params", at, "budget_tokens must be at least 1"));
                return None;
            }
            Stage::TruncateByScore(budget)
        }
        "boundary_mark" => {
            let p: BoundaryParams = params(spec, at, problems)?;
            Stage::BoundaryMark { start: p.start, end: p.end }
        }
        other => {
            problems.push(problem(
                "unknown_stage",
                format!("{at}.op"),
                format!("unknown stage {other:?}; expected one of {}", STAGE_OPS.join(", ")),
            ));
            return None;
        }
    };
    Some(stage)
}

fn plan(cfg: &PipelineConfig) -> Result<Vec<Stage>, Vec<Problem>> {
    let mut problems = Vec::new();

    if cfg.inputs.is_empty() {
        problems.push(problem("missing_input", "inputs", "at least one input is required"));
    }
    let mut sources = HashSet::new();
    for (i, input) in cfg.inputs.iter().enumerate() {
        if !input.path.is_file() {
            problems.push(problem(
                "missing_input",
                format!("inputs[{i}].path"),
                format!("{} does not exist", input.path.display()),
            ));
        }
        if input.source.is_empty() {
            problems.push(problem("bad_params", format!("inputs[{i}].source"), "source label is empty"));
        } else if !sources.insert(input.source.as_str()) {
            problems.push(problem(
                "duplicate_source",
                format!("inputs[{i}].source"),
                format!("source {:?} is used twice", input.source),
            ));
        }
    }
    if let Some(w) = &cfg.mix_weights {
        if w.len() != cfg.inputs.len() {
            problems.push(problem(
                "weight_arity",
                "mix_weights",
                format!("{} weights for {} inputs", w.len(), cfg.inputs.len()),
            ));
        }
        if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
            problems.push(problem("invalid_weight", format!("mix_weights[{i}]"), format!("weight {x}")));
        } else if !w.iter().any(|&x| x > 0.0) {
            problems.push(problem("no_positive_weight", "mix_weights", "no weight is positive"));
        }
    }
    if cfg.workers == 0 {
        problems.push(problem("bad_params", "workers", "workers must be at least 1"));
    }
    if cfg.scoring.max_in_flight == 0 {
        problems.push(problem("bad_params", "scoring.max_in_flight", "must be at least 1"));
    }
    if let Err(e) = cfg.prompt.validate() {
        problems.push(problem(e.code(), "prompt", e.to_string()));
    }
    if let Err(e) = cfg.budget.validate(cfg.budget.tokenizer.tokenizer()) {
        problems.push(problem(e.code(), "budget", e.to_string()));
    }
    if let Some(dir) = cfg.output.path.parent() {
        if !dir.as_os_str().is_empty() && !dir.is_dir() {
            problems.push(problem(
                "missing_output_dir",
                "output.path",
                format!("{} is not a directory", dir.display()),
            ));
        }
    }

    let mut order = OrderState {
        scored: cfg.inputs.iter().any(|i| i.format == InputFormat::RecordsJsonl),
        ..OrderState::default()
    };
    let mut stages = Vec::new();
    for (i, spec) in cfg.stages.iter().enumerate() {
        if let Some(s) = build_stage(spec, &format!("stages[{i}]"), cfg, &mut order, &mut problems) {
            stages.push(s);
        }
    }
    if cfg.output.format == OutputFormat::TextJsonl && !order.formatted {
        problems.push(problem("stage_order", "output.format", "text_jsonl output needs a format stage"));
    }

    if problems.is_empty() {
        Ok(stages)
    } else {
        Err(problems)
    }
}

/// Every problem that would stop the config from running; empty when runnable.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<Problem> {
    plan(cfg).err().unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_name: String,
    pub records_in: usize,
    pub records_kept: usize,
    pub drops_by_reason: BTreeMap<String, usize>,
    /// Records kept without a score after a scorer failure.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub unscored: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl StageReport {
    fn new(stage_name: &str, records_in: usize) -> Self {
        Self {
            stage_name: stage_name.to_string(),
            records_in,
            ..Self::default()
        }
    }

    fn drop(&mut self, reason: impl Into<String>) {
        *self.drops_by_reason.entry(reason.into()).or_insert(0) += 1;
    }

    pub fn dropped(&self) -> usize {
        self.drops_by_reason.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub records_out: usize,
    pub wall_time_secs: f64,
}

impl PipelineReport {
    /// Pretty JSON with the wall time zeroed; equal across worker counts.
    pub fn to_stable_json(&self) -> String {
        let mut r = self.clone();
        r.wall_time_secs = 0.0;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config:\n{}", .0.iter().map(|p| format!("  {p}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Problem>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage}: {}: {source}", path.display())]
    Io {
        stage: String,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{stage}: {code}: {message}")]
    Stage {
        stage: String,
        code: &'static str,
        message: String,
    },
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Invalid(_) | Self::Config(_) => "invalid_config",
            Self::Io { .. } => "io",
            Self::Stage { code, .. } => code,
        }
    }
}

// ---------------------------------------------------------------------------
// Execution

/// A record in flight, plus its rendered training text once formatted.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub record: Record,
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub items: Vec<Item>,
    pub report: PipelineReport,
}

enum Step {
    Keep(Item),
    Drop(String),
    Unscored(Item),
    Fail(&'static str, String),
}

fn ingest_input(input: &InputSpec, report: &mut StageReport) -> Result<Dataset, PipelineError> {
    let io_err = |source| PipelineError::Io {
        stage: "ingest".into(),
        path: input.path.clone(),
        source,
    };
    let file = File::open(&input.path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let (dataset, skips) = match input.format {
        InputFormat::QaJsonl => ingest_qa(reader, &input.source).map_err(io_err)?,
        InputFormat::DocSummaryJsonl => ingest_doc_summary(reader, &input.source).map_err(io_err)?,
        InputFormat::RecordsJsonl => read_records_jsonl(reader).map_err(io_err)?,
        InputFormat::TreeJson => {
            let (trees, tree_report) = ingest_conversation_trees(reader).map_err(|e| PipelineError::Stage {
                stage: format!("ingest {}", input.path.display()),
                code: e.code(),
                message: e.to_string(),
            })?;
            let mut records = Vec::new();
            for t in &trees {
                let lin = linearize_tree(t);
                report.records_in += lin.paths.len() + lin.dropped;
                for _ in 0..lin.dropped {
                    report.drop("unanswered_branch");
                }
                for p in lin.paths {
                    let id = format!("{}:{}", input.source, records.len() + 1);
                    records.push(Record::new(id, &input.source, Payload::Conversation(p)));
                }
            }
            report.records_in += tree_report.rejected.len();
            for r in &tree_report.rejected {
                report.drop(format!("tree:{}", r.reason.as_str()));
            }
            return Ok(Dataset::from_records(records));
        }
    };
    report.records_in += dataset.len() + skips.skips.len();
    for s in &skips.skips {
        report.drop(s.reason.clone());
    }
    Ok(dataset)
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Stage {
            stage: "pool".into(),
            code: "internal",
            message: e.to_string(),
        })?;
    Ok(pool.install(f))
}

fn item_texts(item: &Item) -> Vec<&str> {
    match &item.text {
        Some(t) => vec![t.as_str()],
        None => item.record.payload.texts(),
    }
}

fn first_drop(item: &Item, verdict: impl Fn(&str) -> crate::filters::FilterVerdict) -> Option<String> {
    item_texts(item).into_iter().map(verdict).find(|v| !v.keep).and_then(|v| v.reason)
}

fn apply(stage: &Stage, mut item: Item, cfg: &PipelineConfig, scorer: Option<&dyn Scorer>) -> Step {
    let tokenizer: &dyn Tokenizer = cfg.budget.tokenizer.tokenizer();
    let drop_if = |reason: Option<String>, item: Item| match reason {
        Some(r) => Step::Drop(r),
        None => Step::Keep(item),
    };
    match stage {
        Stage::Clean(c) => {
            item.record.payload.map_texts(|t| clean_text(t, c));
            Step::Keep(item)
        }
        Stage::Quality(q) => drop_if(first_drop(&item, |t| quality_filter(t, q)), item),
        Stage::Profanity(words) => drop_if(first_drop(&item, |t| profanity_filter(t, words)), item),
        Stage::Similarity(threshold) => match &item.record.payload {
            Payload::Qa(qa) => {
                let v = qa_similarity_filter(qa, *threshold);
                drop_if(v.reason, item)
            }
            _ => Step::Keep(item),
        },
        Stage::CompressionRatio { min_ratio, max_ratio } => match &item.record.payload {
            Payload::DocSummary(d) => {
                let v = compression_ratio_filter(d, *min_ratio, *max_ratio, tokenizer);
                drop_if(v.reason, item)
            }
            _ => Step::Keep(item),
        },
        Stage::TruncateByLength(n) => {
            match &mut item.text {
                Some(t) => *t = truncate_by_length(t, *n, tokenizer),
                None => item.record.payload.map_texts(|t| truncate_by_length(t, *n, tokenizer)),
            }
            Step::Keep(item)
        }
        Stage::Score(_) => {
            let scorer = scorer.expect("score stage has a scorer");
            match scorer.score(&item.record) {
                Ok(s) => {
                    item.record.score = Some(s);
                    Step::Keep(item)
                }
                Err(e) => match cfg.scoring.on_error {
                    OnScorerError::Abort => Step::Fail(e.code(), format!("{}: {e}", item.record.id)),
                    OnScorerError::KeepUnscored => {
                        item.record.score = None;
                        Step::Unscored(item)
                    }
                    OnScorerError::Drop => Step::Drop(e.code().to_string()),
                },
            }
        }
        Stage::ScoreFilter(_) => unreachable!("score_filter runs over the whole dataset"),
        Stage::Format => match format_conversation(&item.record.payload.as_path(), &cfg.prompt) {
            Ok(t) => {
                item.text = Some(t);
                Step::Keep(item)
            }
            Err(e) => Step::Drop(e.code().to_string()),
        },
        Stage::FitToContext => {
            let t = item.text.as_deref().unwrap_or_default();
            item.text = Some(fit_to_context(t, &cfg.budget, tokenizer));
            Step::Keep(item)
        }
        Stage::Pad => {
            let padding = BudgetConfig {
                pad_to_max: true,
                ..cfg.budget.clone()
            };
            let t = item.text.as_deref().unwrap_or_default();
            item.text = Some(pad_sequence(t, &padding, tokenizer).0);
            Step::Keep(item)
        }
        Stage::TruncateByScore(budget) => {
            let path = item.record.payload.as_path();
            match truncate_by_score(&path, *budget, &cfg.prompt, tokenizer) {
                Ok(t) if t.removed.is_empty() => Step::Keep(item),
                Ok(t) => {
                    item.record.payload = Payload::Conversation(t.path);
                    Step::Keep(item)
                }
                Err(e) => Step::Drop(e.code().to_string()),
            }
        }
        Stage::BoundaryMark { start, end } => {
            let t = item.text.as_deref().unwrap_or_default();
            item.text = Some(mark_boundaries(t, start, end));
            Step::Keep(item)
        }
    }
}

fn stage_name(stage: &Stage) -> &'static str {
    match stage {
        Stage::Clean(_) => "clean",
        Stage::Quality(_) => "quality",
        Stage::Profanity(_) => "profanity",
        Stage::Similarity(_) => "similarity",
        Stage::CompressionRatio { .. } => "compression_ratio",
        Stage::TruncateByLength(_) => "truncate_by_length",
        Stage::Score(_) => "score",
        Stage::ScoreFilter(_) => "score_filter",
        Stage::Format => "format",
        Stage::FitToContext => "fit_to_context",
        Stage::Pad => "pad",
        Stage::TruncateByScore(_) => "truncate_by_score",
        Stage::BoundaryMark { .. } => "boundary_mark",
    }
}

fn run_stage(
    stage: &Stage,
    items: Vec<Item>,
    cfg: &PipelineConfig,
) -> Result<(Vec<Item>, StageReport), PipelineError> {
    let name = stage_name(stage);
    let mut report = StageReport::new(name, items.len());

    if let Stage::ScoreFilter(f) = stage {
        let records: Vec<Record> = items.iter().map(|i| i.record.clone()).collect();
        let mask = score_filter_mask(&records, f).map_err(|e| PipelineError::Stage {
            stage: name.into(),
            code: e.code(),
            message: e.to_string(),
        })?;
        let reason = match f {
            ScoreFilterConfig::Threshold { .. } => "below_threshold",
            ScoreFilterConfig::DropFraction { .. } => "drop_fraction",
        };
        let mut kept = Vec::with_capacity(items.len());
        for (item, drop) in items.into_iter().zip(mask) {
            if drop {
                report.drop(reason);
            } else {
                kept.push(item);
            }
        }
        report.records_kept = kept.len();
        return Ok((kept, report));
    }

    let remote;
    let scorer: Option<&dyn Scorer> = match stage {
        Stage::Score(ScorerChoice::Heuristic) => Some(&HeuristicScorer),
        Stage::Score(ScorerChoice::Remote) => {
            remote = RemoteScorer::new(
                cfg.scoring.endpoint.clone().unwrap_or_default(),
                Duration::from_millis(cfg.scoring.timeout_ms),
                cfg.prompt.clone(),
            );
            Some(&remote)
        }
        _ => None,
    };
    let threads = match stage {
        Stage::Score(ScorerChoice::Remote) => cfg.scoring.max_in_flight,
        _ => cfg.workers,
    };
    let steps: Vec<Step> = if threads <= 1 {
        items.into_iter().map(|i| apply(stage, i, cfg, scorer)).collect()
    } else {
        in_pool(threads, || items.into_par_iter().map(|i| apply(stage, i, cfg, scorer)).collect())?
    };

    let mut kept = Vec::with_capacity(steps.len());
    for step in steps {
        match step {
            Step::Keep(i) => kept.push(i),
            Step::Unscored(i) => {
                report.unscored += 1;
                kept.push(i);
            }
            Step::Drop(reason) => {
                debug_assert!(
                    reason_vocabulary(name).iter().any(|v| reason.starts_with(v)),
                    "unregistered drop reason {reason:?} from {name}"
                );
                report.drop(reason);
            }
            Step::Fail(code, message) => {
                return Err(PipelineError::Stage {
                    stage: name.into(),
                    code,
                    message,
                })
            }
        }
    }
    report.records_kept = kept.len();
    Ok((kept, report))
}

/// Run every stage in memory without writing anything.
pub fn execute(cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let started = Instant::now();
    let stages = plan(cfg).map_err(PipelineError::Invalid)?;
    let mut reports = Vec::new();

    let mut ingest = StageReport::new("ingest", 0);
    let mut datasets = Vec::with_capacity(cfg.inputs.len());
    for input in &cfg.inputs {
        datasets.push(ingest_input(input, &mut ingest)?);
    }
    let ingested: usize = datasets.iter().map(Dataset::len).sum();
    ingest.records_kept = ingested;
    reports.push(ingest);

    let dataset = match &cfg.mix_weights {
        Some(weights) => {
            let mut r = StageReport::new("mix", ingested);
            for (d, &w) in datasets.iter().zip(weights) {
                if w == 0.0 {
                    for _ in 0..d.len() {
                        r.drop("zero_weight");
                    }
                }
            }
            let mixed = mix(&datasets, weights, cfg.seed).map_err(|e| PipelineError::Stage {
                stage: "mix".into(),
                code: e.code(),
                message: e.to_string(),
            })?;
            r.records_kept = mixed.len();
            reports.push(r);
            mixed
        }
        None => Dataset::from_records(datasets.into_iter().flat_map(|d| d.records).collect()),
    };

    let mut items: Vec<Item> = dataset
        .records
        .into_iter()
        .map(|record| Item { record, text: None })
        .collect();
    for stage in &stages {
        let (next, report) = run_stage(stage, items, cfg)?;
        items = next;
        reports.push(report);
    }

    Ok(RunOutput {
        report: PipelineReport {
            seed: cfg.seed,
            stages: reports,
            records_out: items.len(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
        items,
    })
}

#[derive(Serialize)]
struct TextLine<'a> {
    id: &'a str,
    text: &'a str,
}

/// Serialize the surviving records in the configured output format. Formatted
/// text, when present, is carried in `meta.text` of records output.
pub fn write_output<W: Write>(items: &[Item], format: OutputFormat, mut w: W) -> io::Result<()> {
    match format {
        OutputFormat::RecordsJsonl => {
            for item in items {
                match &item.text {
                    Some(t) => {
                        let mut r = item.record.clone();
                        r.meta.insert("text".into(), t.clone());
                        serde_json::to_writer(&mut w, &r)?;
                    }
                    None => serde_json::to_writer(&mut w, &item.record)?,
                }
                w.write_all(b"\n")?;
            }
        }
        OutputFormat::QaJsonl => {
            let records: Vec<Record> = items.iter().map(|i| i.record.clone()).collect();
            write_qa_jsonl(&records, &mut w)?;
        }
        OutputFormat::TextJsonl => {
            for item in items {
                let line = TextLine {
                    id: &item.record.id,
                    text: item.text.as_deref().unwrap_or_default(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()
}

/// Run the pipeline and write the output file plus `<output>.report.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    let out = execute(cfg)?;
    let emit_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io {
            stage: "emit".into(),
            path,
            source,
        }
    };
    let file = File::create(&cfg.output.path).map_err(emit_err(&cfg.output.path))?;
    write_output(&out.items, cfg.output.format, BufWriter::new(file)).map_err(emit_err(&cfg.output.path))?;
    let report_path = cfg.report_path();
    let mut json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    json.push('\n');
    std::fs::write(&report_path, json).map_err(emit_err(&report_path))?;
    Ok(out.report)
}
