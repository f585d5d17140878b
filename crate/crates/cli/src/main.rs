//! `streamsel`: scenario generation, simulation, offline selection over traces,
//! retrieval and ablation sweeps.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data or format error
//! (including context overflow), 4 empty or degenerate input.
//! Settings resolve as flag, then config file, then built-in default.

mod files;

use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use streamsel_core::backend::{read_trace, write_trace, BackendOutput, ClipBackend, MockBackend, ScenarioSpec};
use streamsel_core::config::{parse_config, parse_layer_list, parse_scenario, scenario_to_text, FileConfig};
use streamsel_core::memory::ContextAssembly;
use streamsel_core::numerics::top_k_ascending;
use streamsel_core::pipeline::{answer_query, default_queries, run_global_uniform, run_simulation, PipelineConfig, SimQuery, SimulationReport};
use streamsel_core::scoring::{compute_token_scores, AggregationMode};
use streamsel_core::selection::Selector;
use streamsel_core::{Error, Similarity};

#[derive(Parser)]
#[command(name = "streamsel", version, about = "Streaming video memory engine with a mock model backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-event scenario, its ground truth and one query per event.
    GenScenario(GenArgs),
    /// Stream a scenario through the pipeline and write a report.
    Simulate(SimulateArgs),
    /// Score and select tokens offline from a trace file.
    Select(SelectArgs),
    /// Answer queries against the captions stored in a trace file.
    Retrieve(RetrieveArgs),
    /// Repeat a simulation over a list of values for one setting.
    Sweep(SweepArgs),
}

fn parse_selector(s: &str) -> Result<Selector, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_agg(s: &str) -> Result<AggregationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_similarity(s: &str) -> Result<Similarity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Alias so clap parses the whole list as one value.
type Layers = Vec<usize>;

fn parse_layers(s: &str) -> Result<Layers, String> {
    parse_layer_list(s).map_err(|e| e.to_string())
}

/// Pipeline settings that override the config file.
#[derive(Args, Default)]
struct PipelineFlags {
    /// attention, uniform, mean-pool or kmeans
    #[arg(long, value_parser = parse_selector)]
    selector: Option<Selector>,
    /// Head aggregation: avg or max
    #[arg(long, value_parser = parse_agg)]
    agg: Option<AggregationMode>,
    /// Comma-separated layer indices, e.g. 5,9,14,20
    #[arg(long, value_parser = parse_layers)]
    layers: Option<Layers>,
    #[arg(long)]
    clip_size: Option<usize>,
    #[arg(long)]
    max_mem: Option<usize>,
    #[arg(long)]
    n_select: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// MMR trade-off between relevance (1.0) and diversity
    #[arg(long)]
    lambda: Option<f64>,
    /// Retrieval token budget
    #[arg(long)]
    budget: Option<usize>,
    /// Retrieve exactly this many captions instead of filling the budget
    #[arg(long)]
    k: Option<usize>,
    /// pooled or pairwise
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<Similarity>,
    /// Pipeline seed (k-means selection)
    #[arg(long)]
    seed: Option<u64>,
}

impl PipelineFlags {
    fn apply(&self, c: &mut PipelineConfig) {
        if let Some(v) = self.selector {
            c.selector = v;
        }
        if let Some(v) = self.agg {
            c.aggregation = v;
        }
        if let Some(v) = &self.layers {
            c.layer_subset = v.clone();
        }
        if let Some(v) = self.clip_size {
            c.clip_size = v;
        }
        if let Some(v) = self.max_mem {
            c.max_mem = v;
        }
        if let Some(v) = self.n_select {
            c.n_select = v;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if let Some(v) = self.lambda {
            c.mmr_lambda = v;
        }
        if let Some(v) = self.budget {
            c.retrieval_budget = v;
        }
        if self.k.is_some() {
            c.retrieval_k = self.k;
        }
        if let Some(v) = self.similarity {
            c.similarity = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenario seed, overriding the config file
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file from gen-scenario; generated from the config when absent
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Query file; one query per planted event when absent
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Report path; stdout when absent
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write every backend output to this trace file
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Append per-clip wall-clock timings (makes the report run-dependent)
    #[arg(long)]
    timings: bool,
    /// Offline baseline: frames picked uniformly over the whole stream, no memory
    #[arg(long)]
    global_uniform: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_parser = parse_layers, default_value = "5,9,14,20")]
    layers: Layers,
    #[arg(long, value_parser = parse_agg, default_value = "avg")]
    agg: AggregationMode,
    /// Tokens to keep per clip
    #[arg(long, default_value_t = 196)]
    n: usize,
    /// Listing path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace file whose captions form the store
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    query_file: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<Similarity>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    Selector,
    MaxMem,
    NSelect,
    Lambda,
    Aggregation,
    Budget,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values; every selector when sweeping selectors and absent
    #[arg(long)]
    values: Option<String>,
    /// Table path; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

/// An error tagged with the module that raised it.
struct Failure {
    module: &'static str,
    message: String,
    code: u8,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::EmptyStore | Error::DegenerateVector(_) => 4,
        _ => 3,
    }
}

fn fail(module: &'static str) -> impl Fn(Error) -> Failure {
    move |e| Failure { module, code: exit_code(&e), message: e.to_string() }
}

fn io_fail<'a>(module: &'static str, path: &'a Path, code: u8) -> impl Fn(std::io::Error) -> Failure + 'a {
    move |e| Failure { module, code, message: format!("{}: {e}", path.display()) }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(io_fail("config", path, 2))?;
    let cfg = parse_config(&text).map_err(|e| Failure {
        module: "config",
        code: 2,
        message: format!("{}: {e}", path.display()),
    })?;
    for n in &cfg.notices {
        eprintln!("notice: {n}");
    }
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(io_fail("cli", p, 3)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn model(cfg: &FileConfig) -> Result<MockBackend, Failure> {
    MockBackend::new(cfg.model).map_err(fail("model_backend"))
}

fn load_scenario(path: Option<&Path>, cfg: &FileConfig) -> Result<ScenarioSpec, Failure> {
    let spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_fail("model_backend", p, 3))?;
            parse_scenario(&text).map_err(|e| Failure {
                module: "model_backend",
                code: 3,
                message: format!("{}: {e}", p.display()),
            })?
        }
        None => cfg.scenario.build().map_err(fail("model_backend"))?,
    };
    if spec.dim != cfg.model.dim {
        return Err(Failure {
            module: "model_backend",
            code: 2,
            message: format!("scenario dim {} does not match model dim {}", spec.dim, cfg.model.dim),
        });
    }
    Ok(spec)
}

fn cmd_gen_scenario(args: &GenArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.scenario.seed = s;
    }
    let dir = args.out.clone().or_else(|| cfg.output.dir.clone()).ok_or_else(|| Failure {
        module: "cli",
        code: 2,
        message: "no output directory: pass --out or set [output] dir".into(),
    })?;
    cfg.pipeline.validate().map_err(fail("pipeline"))?;
    let spec = load_scenario(None, &cfg)?;
    let backend = model(&cfg)?;
    let queries = default_queries(&spec, &backend, &cfg.pipeline).map_err(fail("model_backend"))?;
    fs::create_dir_all(&dir).map_err(io_fail("cli", &dir, 3))?;
    let files = [
        ("scenario.txt", scenario_to_text(&spec)),
        ("ground_truth.txt", spec.ground_truth().to_text()),
        ("queries.txt", files::queries_to_text(&queries)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_fail("cli", &path, 3))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Forwards to the mock and keeps every output for the trace file.
struct Recorder<'a> {
    inner: &'a MockBackend,
    outputs: RefCell<Vec<BackendOutput<f64>>>,
}

impl ClipBackend<f64> for Recorder<'_> {
    fn process_clip(&self, ctx: &ContextAssembly<'_, f64>, layers: &[usize]) -> streamsel_core::Result<BackendOutput<f64>> {
        let out = self.inner.process_clip(ctx, layers)?;
        self.outputs.borrow_mut().push(out.clone());
        Ok(out)
    }
}

fn load_queries(path: Option<&Path>, spec: &ScenarioSpec, backend: &MockBackend, config: &PipelineConfig) -> Result<Vec<SimQuery>, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_fail("caption_retrieval", p, 3))?;
            files::parse_queries(&text).map_err(|e| Failure {
                module: "caption_retrieval",
                code: 3,
                message: format!("{}: {e}", p.display()),
            })
        }
        None => default_queries(spec, backend, config).map_err(fail("model_backend")),
    }
}

fn simulate(spec: &ScenarioSpec, config: &PipelineConfig, backend: &MockBackend, queries: &[SimQuery]) -> Result<SimulationReport, Failure> {
    config.validate().map_err(|e| {
        let module = if matches!(e, Error::ContextOverflow(_)) { "memory" } else { "pipeline" };
        fail(module)(e)
    })?;
    run_simulation(spec, config, backend, queries).map_err(|e| {
        let module = match e {
            Error::ContextOverflow(_) | Error::OutOfOrderClip { .. } => "memory",
            Error::EmptyStore => "caption_retrieval",
            Error::MissingTrace { .. } => "attention_scoring",
            _ => "pipeline",
        };
        fail(module)(e)
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.pipeline.apply(&mut cfg.pipeline);
    let spec = load_scenario(args.scenario.as_deref(), &cfg)?;
    let backend = model(&cfg)?;
    let report_path = args.report.clone().or_else(|| cfg.output.report.clone());
    if args.global_uniform {
        let r = run_global_uniform(&spec, &cfg.pipeline, &backend).map_err(fail("pipeline"))?;
        let frames: Vec<String> = r.frames.iter().map(usize::to_string).collect();
        let mut text = String::from("# offline global-uniform baseline (whole stream, no memory; not a streaming mode)\n");
        let _ = writeln!(text, "frames={}", frames.join(","));
        let _ = writeln!(text, "selected_tokens={}", r.selected_tokens);
        let _ = writeln!(text, "selection_recall={}", r.selection_recall.map_or("n/a".to_string(), |v| v.to_string()));
        let _ = writeln!(text, "caption={}", r.caption.text.unwrap_or_default());
        return write_output(report_path.as_deref(), &text);
    }
    let queries = load_queries(args.queries.as_deref(), &spec, &backend, &cfg.pipeline)?;
    let trace_path = args.trace.clone().or_else(|| cfg.output.trace.clone());
    let report = match &trace_path {
        Some(path) => {
            let recorder = Recorder { inner: &backend, outputs: RefCell::new(Vec::new()) };
            cfg.pipeline.validate().map_err(fail("pipeline"))?;
            let report = run_simulation(&spec, &cfg.pipeline, &recorder, &queries).map_err(fail("pipeline"))?;
            write_trace(path, &recorder.outputs.into_inner()).map_err(fail("model_backend"))?;
            report
        }
        None => simulate(&spec, &cfg.pipeline, &backend, &queries)?,
    };
    write_output(report_path.as_deref(), &report.to_text(args.timings))
}

fn cmd_select(args: &SelectArgs) -> Result<(), Failure> {
    let outputs = read_trace(&args.trace).map_err(fail("model_backend"))?;
    let mut text = String::from("# clip_id n_visual indices scores\n");
    for out in &outputs {
        let scores = compute_token_scores(&out.trace, &args.layers, args.agg).map_err(fail("attention_scoring"))?;
        let n_visual = scores.len();
        if args.n == 0 || args.n > n_visual {
            return Err(Failure {
                module: "selection",
                code: 2,
                message: format!("--n {} outside 1..={n_visual} for clip {}", args.n, out.trace.clip_id()),
            });
        }
        let keep = top_k_ascending(&scores.scores, args.n);
        let idx: Vec<String> = keep.iter().map(usize::to_string).collect();
        let sc: Vec<String> = keep.iter().map(|&i| scores.scores[i].to_string()).collect();
        let _ = writeln!(text, "{} {} {} {}", out.trace.clip_id(), n_visual, idx.join(","), sc.join(","));
    }
    write_output(args.out.as_deref(), &text)
}

fn cmd_retrieve(args: &RetrieveArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    PipelineFlags { lambda: args.lambda, budget: args.budget, k: args.k, similarity: args.similarity, ..Default::default() }
        .apply(&mut cfg.pipeline);
    let outputs = read_trace(&args.state).map_err(fail("model_backend"))?;
    let store: Vec<_> = outputs.into_iter().map(|o| std::sync::Arc::new(o.caption)).collect();
    let text = fs::read_to_string(&args.query_file).map_err(io_fail("caption_retrieval", &args.query_file, 3))?;
    let queries = files::parse_queries(&text).map_err(|e| Failure {
        module: "caption_retrieval",
        code: 3,
        message: format!("{}: {e}", args.query_file.display()),
    })?;
    if queries.is_empty() {
        return Err(Failure { module: "caption_retrieval", code: 4, message: "query file holds no queries".into() });
    }
    let mut out = String::new();
    for (i, q) in queries.iter().enumerate() {
        let answer = answer_query(&store, &q.query, &cfg.pipeline).map_err(fail("caption_retrieval"))?;
        let r = &answer.retrieval;
        let _ = writeln!(out, "query {i}: {}", q.query.text.as_deref().unwrap_or("-"));
        let _ = writeln!(out, "tokens_used={} budget={}", r.tokens_used, r.budget);
        for (rank, c) in r.ranked.iter().enumerate() {
            let tokens = store.iter().find(|s| s.clip_id == c.clip_id).map_or(0, |s| s.token_count());
            let _ = writeln!(out, "rank={} clip={} score={} tokens={}", rank + 1, c.clip_id, c.score, tokens);
        }
    }
    print!("{out}");
    Ok(())
}

fn sweep_value(param: SweepParam, value: &str, c: &mut PipelineConfig) -> Result<(), Failure> {
    let bad = |reason: String| Failure { module: "cli", code: 2, message: format!("sweep value `{value}`: {reason}") };
    match param {
        SweepParam::Selector => c.selector = parse_selector(value).map_err(bad)?,
        SweepParam::Aggregation => c.aggregation = parse_agg(value).map_err(bad)?,
        SweepParam::MaxMem => c.max_mem = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepParam::NSelect => c.n_select = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepParam::Lambda => c.mmr_lambda = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepParam::Budget => c.retrieval_budget = value.parse().map_err(|e| bad(format!("{e}")))?,
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref())?;
    args.pipeline.apply(&mut cfg.pipeline);
    let spec = load_scenario(args.scenario.as_deref(), &cfg)?;
    let backend = model(&cfg)?;
    let values: Vec<String> = match (&args.values, args.param) {
        (Some(v), _) => v.split(',').map(|s| s.trim().to_string()).collect(),
        (None, SweepParam::Selector) => Selector::ALL.iter().map(|s| s.to_string()).collect(),
        (None, _) => {
            return Err(Failure { module: "cli", code: 2, message: "--values is required for this parameter".into() });
        }
    };
    let name = args.param.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default();
    let rate = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    let mut table = format!("# {name} clips selection_recall memory_concept_recall retrieval_recall_at_k retrieval_top1\n");
    for value in &values {
        let mut config = cfg.pipeline.clone();
        sweep_value(args.param, value, &mut config)?;
        let queries = default_queries(&spec, &backend, &config).map_err(fail("model_backend"))?;
        let m = simulate(&spec, &config, &backend, &queries)?.metrics;
        let _ = writeln!(
            table,
            "{value} {} {} {} {} {}",
            m.clips_processed,
            rate(m.selection_recall),
            rate(m.memory_concept_recall),
            rate(m.retrieval_recall_at_k),
            rate(m.retrieval_top1)
        );
    }
    write_output(args.out.as_deref(), &table)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenScenario(a) => cmd_gen_scenario(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Select(a) => cmd_select(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.module, f.message);
            ExitCode::from(f.code)
        }
    }
}
