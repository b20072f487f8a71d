use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forge_core::corpus::{
    dataset_stats, ingest_conversation_trees, ingest_doc_summary, ingest_qa, mix, read_records_jsonl,
    trees_to_dataset, write_records_jsonl, Dataset, IngestReport,
};
use forge_core::filters::{clean_text, load_wordlist, CaseMode, CleanConfig};
use forge_core::lora::{
    recommended_gpu, reference, weight_memory_bytes, ArchSpec, GpuBits, LoraConfig, LoraPlan, ModelSize,
};
use forge_core::pipeline::{run_pipeline, validate_config, PipelineConfig, PipelineError};
use forge_core::prompts::{format_conversation, PromptScheme};
use forge_core::scoring::{
    filter_by_score, grade_dataset, HeuristicScorer, OnScorerError, RemoteScorer, ScoreFilterConfig, Scorer,
};

/// Fine-tuning data preparation and LoRA planning.
#[derive(Parser)]
#[command(name = "forge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read raw data into records JSONL.
    Ingest(IngestArgs),
    /// Normalize the text of every record.
    Clean(CleanArgs),
    /// Render records as prompt-formatted training text.
    Format(FormatArgs),
    /// Grade records and optionally drop low scorers.
    Score(ScoreArgs),
    /// Interleave several record files by seeded weighted choice.
    Mix(MixArgs),
    /// Count trainable and total parameters for an adapter config.
    PlanLora(PlanLoraArgs),
    /// Recommended GPU memory for a model size and precision.
    PlanMemory(PlanMemoryArgs),
    /// Run a pipeline config.
    Run(RunArgs),
    /// Summary statistics of a records file.
    Stats(StatsArgs),
    /// Check a pipeline config without running it.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum IngestFormat {
    Qa,
    DocSummary,
    Tree,
    Records,
}

#[derive(Args)]
struct IngestArgs {
    /// Input file, or `-` for standard input.
    input: PathBuf,
    #[arg(long, value_enum)]
    format: IngestFormat,
    /// Source label used in record ids; defaults to the file stem.
    #[arg(long)]
    source: Option<String>,
    /// Output records JSONL; standard output when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Write skipped lines or rejected trees here as JSONL.
    #[arg(long)]
    skips: Option<PathBuf>,
}

#[derive(Args)]
struct CleanArgs {
    /// Records JSONL, or `-`.
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// JSON cleaning config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "uppercase")]
    lowercase: bool,
    #[arg(long)]
    uppercase: bool,
    #[arg(long)]
    strip_punctuation: bool,
    #[arg(long)]
    remove_special_chars: bool,
    /// One stopword per line.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    collapse_whitespace: bool,
}

#[derive(Args)]
struct FormatArgs {
    /// Records JSONL, or `-`.
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// JSON prompt scheme (human_prefix, bot_prefix, separator, terminator).
    #[arg(long)]
    scheme: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnError {
    Abort,
    KeepUnscored,
    Drop,
}

#[derive(Args)]
struct ScoreArgs {
    /// Records JSONL, or `-`.
    input: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Reward-model endpoint; the built-in heuristic is used when omitted.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, value_enum, default_value_t = OnError::Abort)]
    on_error: OnError,
    /// Keep records scoring at least this.
    #[arg(long, conflicts_with = "drop_fraction")]
    threshold: Option<f64>,
    /// Drop this fraction of lowest-scoring records.
    #[arg(long)]
    drop_fraction: Option<f64>,
}

#[derive(Args)]
struct MixArgs {
    /// Records JSONL files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Comma-separated weights, one per input.
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    #[arg(long, env = "FORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PlanLoraArgs {
    /// Architecture JSON; the bundled Falcon-40B architecture when both files are omitted.
    #[arg(requires = "lora")]
    arch: Option<PathBuf>,
    /// Adapter config JSON.
    lora: Option<PathBuf>,
}

#[derive(Args)]
struct PlanMemoryArgs {
    /// One of 7B, 12B, 20B, 30B, 40B, 65B.
    model: String,
    /// 4, 8 or 16.
    bits: u32,
    /// Also print raw weight bytes for this many parameters.
    #[arg(long)]
    params: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = "FORGE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Records JSONL, or `-`.
    input: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    config: PathBuf,
}

/// Exit status plus message for the error stream.
struct Failure {
    status: u8,
    message: String,
}

const USAGE: u8 = 2;
const DOMAIN: u8 = 3;
const INTERNAL: u8 = 1;

fn fail(status: u8, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn open_input(path: &Path) -> Result<Box<dyn BufRead>, Failure> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    File::open(path)
        .map(|f| Box::new(BufReader::new(f)) as Box<dyn BufRead>)
        .map_err(|e| fail(USAGE, format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    let mut s = String::new();
    open_input(path)?
        .read_to_string(&mut s)
        .map_err(|e| fail(USAGE, format!("{}: {e}", path.display())))?;
    Ok(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| fail(USAGE, format!("{}: {e}", path.display())))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) if p == Path::new("-") => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) => File::create(p)
            .map(|f| Box::new(BufWriter::new(f)) as Box<dyn Write>)
            .map_err(|e| fail(USAGE, format!("{}: {e}", p.display()))),
    }
}

fn io_fail(e: io::Error) -> Failure {
    fail(INTERNAL, e.to_string())
}

fn read_records(path: &Path) -> Result<Dataset, Failure> {
    let (d, report) = read_records_jsonl(open_input(path)?).map_err(|e| fail(USAGE, e.to_string()))?;
    warn_skips(path, &report);
    Ok(d)
}

fn warn_skips(path: &Path, report: &IngestReport) {
    for s in &report.skips {
        eprintln!("{}:{}: skipped ({})", path.display(), s.line, s.reason);
    }
}

fn write_records(d: &Dataset, output: Option<&Path>) -> Outcome {
    let mut w = open_output(output)?;
    write_records_jsonl(&d.records, &mut w).map_err(io_fail)?;
    w.flush().map_err(io_fail)
}

fn ingest(a: IngestArgs) -> Outcome {
    let source = a.source.clone().unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| s != "-")
            .unwrap_or_else(|| "stdin".into())
    });
    let input = open_input(&a.input)?;
    let mut skip_lines: Vec<serde_json::Value> = Vec::new();
    let dataset = match a.format {
        IngestFormat::Tree => {
            let (trees, report) =
                ingest_conversation_trees(input).map_err(|e| fail(DOMAIN, format!("{}: {e}", a.input.display())))?;
            for r in &report.rejected {
                skip_lines.push(serde_json::json!({"tree": r.tree, "reason": r.reason.as_str()}));
            }
            let (d, dropped) = trees_to_dataset(&trees, &source);
            eprintln!(
                "{} trees read, {} rejected, {} branches ending on a human turn dropped",
                report.trees_read,
                report.rejected.len(),
                dropped
            );
            d
        }
        fmt => {
            let (d, report) = match fmt {
                IngestFormat::Qa => ingest_qa(input, &source),
                IngestFormat::DocSummary => ingest_doc_summary(input, &source),
                _ => read_records_jsonl(input),
            }
            .map_err(|e| fail(USAGE, format!("{}: {e}", a.input.display())))?;
            for s in &report.skips {
                skip_lines.push(serde_json::json!({"line": s.line, "reason": s.reason}));
            }
            eprintln!("{} lines read, {} skipped", report.lines_read, report.skips.len());
            d
        }
    };
    if let Some(p) = &a.skips {
        let mut w = open_output(Some(p))?;
        for l in &skip_lines {
            writeln!(w, "{l}").map_err(io_fail)?;
        }
        w.flush().map_err(io_fail)?;
    }
    write_records(&dataset, a.output.as_deref())
}

fn clean(a: CleanArgs) -> Outcome {
    let mut cfg: CleanConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CleanConfig::default(),
    };
    if a.lowercase {
        cfg.case_mode = CaseMode::Lower;
    }
    if a.uppercase {
        cfg.case_mode = CaseMode::Upper;
    }
    cfg.strip_punctuation |= a.strip_punctuation;
    cfg.remove_special_chars |= a.remove_special_chars;
    cfg.collapse_whitespace |= a.collapse_whitespace;
    if let Some(p) = &a.stopwords {
        cfg.stopword_list = load_wordlist(open_input(p)?).map_err(|e| fail(USAGE, e.to_string()))?;
        cfg.remove_stopwords = true;
    }
    let cfg = cfg.normalized();
    let mut d = read_records(&a.input)?;
    for r in &mut d.records {
        r.payload.map_texts(|t| clean_text(t, &cfg));
    }
    write_records(&d, a.output.as_deref())
}

fn format(a: FormatArgs) -> Outcome {
    let scheme: PromptScheme = match &a.scheme {
        Some(p) => read_json(p)?,
        None => PromptScheme::default(),
    };
    scheme.validate().map_err(|e| fail(USAGE, e.to_string()))?;
    let d = read_records(&a.input)?;
    let mut w = open_output(a.output.as_deref())?;
    let mut refused = 0;
    for r in &d.records {
        match format_conversation(&r.payload.as_path(), &scheme) {
            Ok(text) => {
                let line = serde_json::json!({"id": r.id, "text": text});
                writeln!(w, "{line}").map_err(io_fail)?;
            }
            Err(e) => {
                refused += 1;
                eprintln!("{}: {e}", r.id);
            }
        }
    }
    w.flush().map_err(io_fail)?;
    if refused > 0 {
        eprintln!("{refused} records not formatted");
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Outcome {
    let d = read_records(&a.input)?;
    let remote;
    let scorer: &dyn Scorer = match &a.endpoint {
        Some(url) => {
            remote = RemoteScorer::new(url.clone(), Duration::from_millis(a.timeout_ms), PromptScheme::default());
            &remote
        }
        None => &HeuristicScorer,
    };
    let on_error = match a.on_error {
        OnError::Abort => OnScorerError::Abort,
        OnError::KeepUnscored => OnScorerError::KeepUnscored,
        OnError::Drop => OnScorerError::Drop,
    };
    if a.max_in_flight == 0 {
        return Err(fail(USAGE, "--max-in-flight must be at least 1"));
    }
    let graded = grade_dataset(&d, scorer, on_error, a.max_in_flight).map_err(|e| fail(DOMAIN, e.to_string()))?;
    if !graded.unscored.is_empty() {
        eprintln!("{} records unscored", graded.unscored.len());
    }
    for (id, code) in &graded.dropped {
        eprintln!("{id}: dropped ({code})");
    }
    let filter = match (a.threshold, a.drop_fraction) {
        (Some(threshold), _) => Some(ScoreFilterConfig::Threshold { threshold }),
        (None, Some(drop_fraction)) => Some(ScoreFilterConfig::DropFraction { drop_fraction }),
        (None, None) => None,
    };
    let out = match filter {
        Some(f) => {
            f.validate().map_err(|e| fail(USAGE, e.to_string()))?;
            let (kept, report) = filter_by_score(&graded.dataset, &f).map_err(|e| fail(DOMAIN, e.to_string()))?;
            eprintln!("{} records below the cut", report.dropped.len());
            kept
        }
        None => graded.dataset,
    };
    write_records(&out, a.output.as_deref())
}

fn mix_cmd(a: MixArgs) -> Outcome {
    let sets = a.inputs.iter().map(|p| read_records(p)).collect::<Result<Vec<_>, _>>()?;
    let mixed = mix(&sets, &a.weights, a.seed).map_err(|e| fail(USAGE, e.to_string()))?;
    write_records(&mixed, a.output.as_deref())
}

fn plan_lora(a: PlanLoraArgs) -> Outcome {
    let (arch, cfg): (ArchSpec, LoraConfig) = match (&a.arch, &a.lora) {
        (Some(arch), Some(lora)) => (read_json(arch)?, read_json(lora)?),
        _ => (reference::falcon_40b(), reference::falcon_40b_lora()),
    };
    let plan = LoraPlan::compute(&arch, &cfg).map_err(|e| {
        let status = if e.code() == "invalid_arch" || e.code() == "invalid_lora_config" {
            USAGE
        } else {
            DOMAIN
        };
        fail(status, e.to_string())
    })?;
    println!("{plan}");
    Ok(())
}

fn plan_memory(a: PlanMemoryArgs) -> Outcome {
    let size: ModelSize = a.model.parse().map_err(|e: String| fail(USAGE, e))?;
    let bits = GpuBits::from_bits(a.bits).ok_or_else(|| fail(USAGE, format!("bits must be 4, 8 or 16, got {}", a.bits)))?;
    println!("{size} @ {}-bit → {}GB", a.bits, recommended_gpu(size, bits));
    if let Some(n) = a.params {
        let bytes = weight_memory_bytes(n, a.bits).map_err(|e| fail(USAGE, e.to_string()))?;
        println!("weights: {n} params @ {}-bit = {bytes} bytes", a.bits);
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<PipelineConfig, Failure> {
    PipelineConfig::load(path).map_err(|e| fail(USAGE, e.to_string()))
}

fn report_problems(cfg: &PipelineConfig) -> Outcome {
    let problems = validate_config(cfg);
    if problems.is_empty() {
        return Ok(());
    }
    let listed: Vec<String> = problems.iter().map(|p| format!("  {p}")).collect();
    Err(fail(USAGE, format!("invalid config:\n{}", listed.join("\n"))))
}

fn run(a: RunArgs) -> Outcome {
    let mut cfg = load_config(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.output {
        cfg.output.path = o;
    }
    report_problems(&cfg)?;
    let report = run_pipeline(&cfg).map_err(|e| match e {
        PipelineError::Invalid(_) | PipelineError::Config(_) => fail(USAGE, e.to_string()),
        PipelineError::Io { ref stage, .. } if stage == "ingest" || stage == "config" => fail(USAGE, e.to_string()),
        PipelineError::Io { .. } => fail(INTERNAL, e.to_string()),
        PipelineError::Stage { .. } => fail(DOMAIN, e.to_string()),
    })?;
    for s in &report.stages {
        eprintln!("{:<20} in {:>8}  kept {:>8}", s.stage_name, s.records_in, s.records_kept);
    }
    println!("{}", cfg.report_path().display());
    Ok(())
}

fn stats(a: StatsArgs) -> Outcome {
    let d = read_records(&a.input)?;
    let s = serde_json::to_string_pretty(&dataset_stats(&d)).map_err(|e| fail(INTERNAL, e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn validate(a: ValidateArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    report_problems(&cfg)?;
    println!("ok");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Clean(a) => clean(a),
        Command::Format(a) => format(a),
        Command::Score(a) => score(a),
        Command::Mix(a) => mix_cmd(a),
        Command::PlanLora(a) => plan_lora(a),
        Command::PlanMemory(a) => plan_memory(a),
        Command::Run(a) => run(a),
        Command::Stats(a) => stats(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("forge: {}", f.message);
            ExitCode::from(f.status)
        }
    }
}
