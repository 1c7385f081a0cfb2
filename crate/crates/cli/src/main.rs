//! `dse`: sample, cluster, grade and report semantic-entropy filtering runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dse_core::clustering::ClusterPolicy;
use dse_core::corpus::{CorpusFormat, GraderKind};
use dse_core::pipeline::{Pipeline, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dse", version, about = "Semantic-entropy hallucination filtering for vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw k samples and one baseline answer per question.
    Sample(RunArgs),
    /// Judge pairwise entailment, cluster the samples and record the entropy.
    Cluster(RunArgs),
    /// Grade baseline answers, optionally importing expert grades.
    Grade(RunArgs),
    /// Write accuracy tables, bootstrap statistics, curve, Sankey and cost files.
    Report(RunArgs),
    /// Write the coverage curve only.
    Curve(RunArgs),
    /// Price recorded calls.
    Cost(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// canonical, vqa-med-2019 or rad-dataset.
    #[arg(long)]
    corpus_format: Option<CorpusFormat>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Scripted offline backend instead of HTTP.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    retry_limit: Option<u32>,
    #[arg(long)]
    request_timeout_ms: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sample_temperature: Option<f64>,
    #[arg(long)]
    baseline_temperature: Option<f64>,
    /// Comma-separated entropy thresholds.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Comma-separated, strictly descending.
    #[arg(long, value_delimiter = ',')]
    curve_thresholds: Option<Vec<f64>>,
    /// connected-components or greedy-representative.
    #[arg(long)]
    policy: Option<ClusterPolicy>,
    #[arg(long)]
    judge_sees_image: Option<bool>,
    #[arg(long)]
    unparseable_retries: Option<u32>,
    /// normalized-exact, containment or model-judge.
    #[arg(long)]
    grader: Option<GraderKind>,
    /// Two-column file of expert grades (`id,correct`).
    #[arg(long)]
    grades_file: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    comparisons: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    price_per_million_tokens: Option<f64>,
}

macro_rules! apply {
    ($($field:ident => $target:expr),* $(,)?) => {
        $(if let Some(v) = $field { $target = v; })*
    };
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        let RunArgs {
            corpus,
            corpus_format,
            out,
            cache_dir,
            mock_script,
            endpoint,
            model,
            api_key_env,
            retry_limit,
            request_timeout_ms,
            k,
            sample_temperature,
            baseline_temperature,
            thresholds,
            curve_thresholds,
            policy,
            judge_sees_image,
            unparseable_retries,
            grader,
            grades_file,
            iterations,
            seed,
            alpha,
            comparisons,
            concurrency,
            price_per_million_tokens,
            ..
        } = self;
        apply!(
            corpus => c.corpus,
            corpus_format => c.corpus_format,
            out => c.out_dir,
            endpoint => c.backend.endpoint_url,
            model => c.backend.model_name,
            api_key_env => c.backend.api_key_env,
            retry_limit => c.backend.retry_limit,
            request_timeout_ms => c.backend.request_timeout_ms,
            k => c.k,
            sample_temperature => c.sample_temperature,
            baseline_temperature => c.baseline_temperature,
            thresholds => c.thresholds,
            policy => c.policy,
            judge_sees_image => c.judge_sees_image,
            unparseable_retries => c.unparseable_retries,
            grader => c.grader,
            iterations => c.iterations,
            seed => c.seed,
            alpha => c.alpha,
            comparisons => c.comparisons,
            concurrency => c.concurrency,
            price_per_million_tokens => c.price_per_million_tokens,
        );
        if cache_dir.is_some() {
            c.cache_dir = cache_dir;
        }
        if mock_script.is_some() {
            c.mock_script = mock_script;
        }
        if curve_thresholds.is_some() {
            c.curve_thresholds = curve_thresholds;
        }
        if grades_file.is_some() {
            c.grades_file = grades_file;
        }
        if let Some(n) = concurrency {
            c.backend.max_in_flight = n;
        }
        Ok(c)
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    let (name, args) = match command {
        Command::Sample(a) => ("sample", a),
        Command::Cluster(a) => ("cluster", a),
        Command::Grade(a) => ("grade", a),
        Command::Report(a) => ("report", a),
        Command::Curve(a) => ("curve", a),
        Command::Cost(a) => ("cost", a),
    };
    let config = args.resolve().map_err(|e| PipelineError::Config(format!("{e:#}")))?;
    let pipeline = Pipeline::new(config)?;
    match name {
        "sample" | "cluster" | "grade" => {
            let summary = match name {
                "sample" => pipeline.sample()?,
                "cluster" => pipeline.cluster()?,
                _ => pipeline.grade()?,
            };
            println!(
                "{}: {} questions, {} computed, {} already done, {} backend calls",
                summary.stage, summary.questions, summary.computed, summary.skipped, summary.backend_calls
            );
        }
        "report" => {
            let report = pipeline.report()?;
            print!("{}", report.render_text());
        }
        "curve" => {
            let points = pipeline.curve()?;
            println!("curve: {} points written", points.len());
        }
        _ => {
            let c = pipeline.cost()?;
            println!(
                "cost: {} questions, ${:.4} total, ${:.4} per question (sampling ${:.4}, entailment ${:.4}), est. latency {:.1} s{}",
                c.questions,
                c.total.total_cost,
                c.mean_cost_per_question,
                c.mean_sampling_cost_per_question,
                c.mean_entailment_cost_per_question,
                c.total.pipeline_latency_ms / 1000.0,
                if c.total.complete { "" } else { " (incomplete token counts)" }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
