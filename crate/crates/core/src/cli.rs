//! The `llmregress` command line.
//!
//! Exit codes: 0 ok / all PASS, 1 suite FAIL, 2 suite INCONCLUSIVE, 3 partial
//! run, 4 usage or data error, 5 provider error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::analysis::{self, CompareOptions, ReferencePopulation};
use crate::canonical::{ContentHash, Label};
use crate::datasets::{load_dataset, Clause, Dataset, SliceSpec};
use crate::driftsim::{self, DriftSpec, SyntheticModelSpec, SyntheticProvider};
use crate::par::Execution;
use crate::prompts::{PromptMode, PromptRegistry, PromptTemplate};
use crate::providers::{HttpClientConfig, ModelRef, OpenAiClient, Provider, ReplayMode, ReplayStore, SamplingParams};
use crate::regress::{self, BaselineSelector, Metric, RegressionTest, TestSuite};
use crate::report::{Format, HistogramReport, MatrixCellSummary, MatrixReport, MatrixRow, Payload, ReportDocument};
use crate::runner::{CellStatus, MatrixIndex, RunConfig, RunContext, RunError, RunRecord, RunStore};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;
pub const EXIT_USAGE: i32 = 4;
pub const EXIT_PROVIDER: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "llmregress", version, about = "Slice-level regression testing for prompts on evolving LLM APIs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Output {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Write the report to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct StoreArg {
    /// Root of the run/prompt/replay store
    #[arg(long, default_value = ".llmregress")]
    store: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dataset checks
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Prompt registry
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Execute or resume one run
    Run(RunArgs),
    /// Run every (model, prompt) cell over one dataset
    Matrix(MatrixArgs),
    /// Compare two stored runs
    Compare(CompareArgs),
    /// Evaluate a regression test suite
    Suite(SuiteArgs),
    /// Calibration and power experiments on synthetic models
    #[command(subcommand)]
    Simulate(SimulateCmd),
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum PromptCmd {
    /// Register the next version of a prompt
    Add {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "completion")]
        mode: PromptMode,
        /// File holding the template body (must contain {text})
        #[arg(long)]
        body: PathBuf,
        #[arg(long)]
        system: Option<String>,
        #[arg(long, default_value = "")]
        notes: String,
    },
    List {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        id: Option<String>,
    },
    Diff {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        id: String,
        #[arg(long)]
        from: u32,
        #[arg(long)]
        to: u32,
    },
}

#[derive(Args, Debug)]
struct ProviderArgs {
    #[arg(long, value_parser = parse_replay_mode, default_value = "record")]
    replay_mode: ReplayMode,
    /// Replay store location (default: <store>/replay)
    #[arg(long)]
    replay_dir: Option<PathBuf>,
    /// Fetch examples one at a time
    #[arg(long)]
    sequential: bool,
}

fn parse_replay_mode(s: &str) -> Result<ReplayMode, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    store: StoreArg,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    store: StoreArg,
    #[command(flatten)]
    provider: ProviderArgs,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "candidate", requires = "dataset")]
    baseline: Option<String>,
    #[arg(long)]
    candidate: Option<String>,
    /// Run with n >= 2 samples per example, for the entropy breakdown
    #[arg(long)]
    sampling_run: Option<String>,
    /// TOML file with [[slices]] entries
    #[arg(long)]
    slices: Option<PathBuf>,
    /// Positive label for F1 (default: first label of the dataset)
    #[arg(long)]
    positive: Option<String>,
    /// `all`, or a gold label (default: the positive label)
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    macro_f1: bool,
    /// Emit only the entropy breakdown
    #[arg(long, requires = "sampling_run")]
    entropy: bool,
    /// Emit the flip table instead of the slice table (csv)
    #[arg(long)]
    flips: bool,
    /// Accuracy deltas of every model pair in these matrices
    #[arg(long = "matrix", conflicts_with = "baseline")]
    matrices: Vec<String>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    store: StoreArg,
    /// Baseline run (overrides the suite's selector)
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long)]
    candidate: String,
    /// Candidate's sampling run for the flaky flag
    #[arg(long)]
    probe: Option<String>,
    /// Bootstrap seed (overrides the suite's `seed`)
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Subcommand, Debug)]
enum SimulateCmd {
    Calibrate(SimArgs),
    Power(SimArgs),
}

#[derive(Args, Debug)]
struct SimArgs {
    /// DriftSpec TOML
    #[arg(long)]
    config: PathBuf,
    /// Dataset to simulate on (default: generated)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Size of the generated dataset
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "accuracy")]
    metric: String,
    #[arg(long, default_value_t = regress::DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = regress::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = regress::DEFAULT_MIN_N)]
    min_n: usize,
    /// Slice clause `key=value` or `gold=label`; repeatable
    #[arg(long = "slice")]
    slice: Vec<String>,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    output: Output,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl ToString) -> Self {
        CliError { code: EXIT_USAGE, message: message.to_string() }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::ProviderFailure { completed: 0, .. } => EXIT_PROVIDER,
            RunError::ProviderFailure { .. } => EXIT_PARTIAL,
            _ => EXIT_USAGE,
        };
        let message = match &e {
            RunError::Prompt(p) if p.code() == "UNKNOWN_PROMPT_VERSION" => format!("unknown prompt version: {p}"),
            _ => format!("{}: {e}", e.code()),
        };
        CliError { code, message }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::usage(format!("{}: {e}", e.code()))
            }
        }
    )*};
}
usage_from!(crate::datasets::DatasetError, crate::analysis::AnalysisError, crate::regress::RegressError);

impl From<crate::prompts::PromptError> for CliError {
    fn from(e: crate::prompts::PromptError) -> Self {
        RunError::Prompt(e).into()
    }
}

impl From<driftsim::DriftError> for CliError {
    fn from(e: driftsim::DriftError) -> Self {
        match e {
            driftsim::DriftError::Run(r) => r.into(),
            other => CliError::usage(format!("{}: {other}", other.code())),
        }
    }
}

type CliResult = Result<i32, CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Dataset(DatasetCmd::Validate { dataset }) => cmd_dataset_validate(&dataset),
        Command::Prompt(p) => cmd_prompt(p),
        Command::Run(a) => cmd_run(&a),
        Command::Matrix(a) => cmd_matrix(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Suite(a) => cmd_suite(&a),
        Command::Simulate(SimulateCmd::Calibrate(a)) => cmd_simulate(&a, false),
        Command::Simulate(SimulateCmd::Power(a)) => cmd_simulate(&a, true),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = read(path)?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        let at = line.map(|l| format!(":{l}")).unwrap_or_default();
        CliError::usage(format!("{}{at}: {}", path.display(), e.message()))
    })
}

fn emit(output: &Output, doc: &ReportDocument) -> Result<(), CliError> {
    let text = doc.render(output.format);
    match &output.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
            }
            fs::write(path, text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(CliError::usage)
        }
    }
}

fn cmd_dataset_validate(path: &Path) -> CliResult {
    let d = load_dataset(path)?;
    println!("dataset {} ok", d.id());
    println!("digest {}", d.digest());
    println!("examples {}", d.len());
    for (label, n) in d.label_counts() {
        println!("label {label} {n}");
    }
    let keys: Vec<&str> = d.metadata_keys().into_iter().collect();
    println!("metadata {}", keys.join(","));
    Ok(EXIT_OK)
}

fn cmd_prompt(cmd: PromptCmd) -> CliResult {
    match cmd {
        PromptCmd::Add { store, id, mode, body, system, notes } => {
            let registry = PromptRegistry::open(&store.store);
            let text = read(&body)?;
            let mut t = PromptTemplate::new(&id, registry.next_version(&id)?, mode, &text);
            t.system_preamble = system;
            t.notes = notes;
            t.parent_version = (t.version > 1).then(|| t.version - 1);
            let v = registry.register(&t)?;
            println!("{id}@{v} {}", registry.stored_hash(&id, v)?);
            Ok(EXIT_OK)
        }
        PromptCmd::List { store, id } => {
            let registry = PromptRegistry::open(&store.store);
            let ids = match id {
                Some(i) => vec![i],
                None => registry.prompt_ids()?,
            };
            for pid in ids {
                for v in registry.versions(&pid)? {
                    let t = registry.get(&pid, v)?;
                    let parent = t.parent_version.map(|p| format!(" parent={p}")).unwrap_or_default();
                    println!("{pid}@{v} {:?}{parent} {}", t.mode, t.content_hash());
                }
            }
            Ok(EXIT_OK)
        }
        PromptCmd::Diff { store, id, from, to } => {
            print!("{}", PromptRegistry::open(&store.store).diff(&id, from, to)?);
            Ok(EXIT_OK)
        }
    }
}

/// `run --config` file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    model: ModelRef,
    prompt: PromptSel,
    params: SamplingParams,
    #[serde(default)]
    seed_note: String,
    #[serde(default)]
    http: Option<HttpClientConfig>,
    #[serde(default)]
    synthetic: Vec<SyntheticModelSpec>,
}

#[derive(Debug, Clone, Deserialize)]
struct PromptSel {
    id: String,
    version: u32,
}

/// `matrix --config` file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    models: Vec<ModelRef>,
    prompts: Vec<PromptSel>,
    params: SamplingParams,
    #[serde(default)]
    seed_note: String,
    #[serde(default)]
    http: Option<HttpClientConfig>,
    #[serde(default)]
    synthetic: Vec<SyntheticModelSpec>,
}

fn build_provider(
    models: &[ModelRef],
    http: &Option<HttpClientConfig>,
    synthetic: &[SyntheticModelSpec],
    dataset: &Dataset,
) -> Result<Box<dyn Provider>, CliError> {
    let providers: std::collections::BTreeSet<&str> = models.iter().map(|m| m.provider.as_str()).collect();
    match providers.into_iter().collect::<Vec<_>>().as_slice() {
        [driftsim::SYNTHETIC_PROVIDER] => {
            for m in models {
                if !synthetic.iter().any(|s| s.model_name == m.model_name) {
                    return Err(CliError::usage(format!("no [[synthetic]] spec for model `{}`", m.model_name)));
                }
            }
            for s in synthetic {
                s.validate()?;
            }
            Ok(Box::new(SyntheticProvider::new(dataset.label_set().labels(), synthetic.iter().cloned())))
        }
        [_] => {
            let cfg = http.clone().unwrap_or_else(HttpClientConfig::from_env);
            Ok(Box::new(OpenAiClient::new(&cfg)))
        }
        _ => Err(CliError::usage("all models of one invocation must use the same provider")),
    }
}

fn open_replay(store: &Path, args: &ProviderArgs) -> ReplayStore {
    let dir = args.replay_dir.clone().unwrap_or_else(|| store.join("replay"));
    ReplayStore::open(&dir, args.replay_mode)
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn cmd_run(args: &RunArgs) -> CliResult {
    let file: RunFile = parse_toml(&args.config)?;
    let dataset = load_dataset(&args.dataset)?;
    let registry = PromptRegistry::open(&args.store.store);
    let template = registry.get(&file.prompt.id, file.prompt.version)?;
    let provider = build_provider(std::slice::from_ref(&file.model), &file.http, &file.synthetic, &dataset)?;
    let replay = open_replay(&args.store.store, &args.provider);
    let ctx = RunContext::new(provider.as_ref(), &replay).with_execution(execution(args.provider.sequential));
    let mut config = RunConfig::new(file.model, &template, &dataset, file.params);
    config.seed_note = file.seed_note;
    let store = RunStore::open(&args.store.store);
    let run_id = config.run_id();
    match store.execute_run(&config, &dataset, &template, &ctx) {
        Ok(r) => {
            println!("{}", r.run_id.hex());
            Ok(EXIT_OK)
        }
        Err(e @ RunError::ProviderFailure { .. }) => {
            println!("{}", run_id.hex());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn matrix_report(store: &RunStore, index: &MatrixIndex, dataset: &Dataset) -> Result<MatrixReport, CliError> {
    let positive = dataset.label_set().labels()[0].clone();
    let prompts: Vec<String> = index.prompts().iter().map(|(p, v)| format!("{p}@{v}")).collect();
    let mut rows = Vec::new();
    for model in index.models() {
        let mut cells = Vec::new();
        for (pid, ver) in index.prompts() {
            let cell = index.cell(&model.model_name, &pid, ver).expect("cell for every model and prompt");
            let (accuracy, f1) = match (&cell.run_id, cell.status) {
                (Some(id), CellStatus::Complete) => {
                    let run = store.load_complete(id)?;
                    (
                        Some(analysis::accuracy(&run, dataset, None)?),
                        Some(analysis::f1(&run, dataset, &positive, None)?.value),
                    )
                }
                _ => (None, None),
            };
            cells.push(MatrixCellSummary {
                prompt: format!("{pid}@{ver}"),
                run_id: cell.run_id.clone(),
                status: cell.status,
                accuracy,
                f1,
                error: cell.error.clone(),
            });
        }
        rows.push(MatrixRow { model: model.model_name.clone(), cells });
    }
    Ok(MatrixReport { matrix_id: index.matrix_id.clone(), dataset_id: index.dataset_id.clone(), prompts, rows })
}

fn cmd_matrix(args: &MatrixArgs) -> CliResult {
    let file: MatrixFile = parse_toml(&args.config)?;
    let dataset = load_dataset(&args.dataset)?;
    let registry = PromptRegistry::open(&args.store.store);
    let provider = build_provider(&file.models, &file.http, &file.synthetic, &dataset)?;
    let replay = open_replay(&args.store.store, &args.provider);
    let ctx = RunContext::new(provider.as_ref(), &replay).with_execution(execution(args.provider.sequential));
    let store = RunStore::open(&args.store.store);
    let prompts: Vec<(String, u32)> = file.prompts.iter().map(|p| (p.id.clone(), p.version)).collect();
    let (index, _) =
        store.run_matrix(&file.models, &prompts, &registry, &dataset, &file.params, &file.seed_note, &ctx)?;
    let report = matrix_report(&store, &index, &dataset)?;
    emit(&args.output, &ReportDocument::new(Payload::Matrix(report)))?;
    for c in index.cells.iter().filter(|c| c.status != CellStatus::Complete) {
        eprintln!(
            "cell {}/{}@{}: {}",
            c.model.model_name,
            c.prompt_id,
            c.prompt_version,
            c.error.as_deref().unwrap_or("")
        );
    }
    let code = if index.cells.iter().all(|c| c.status == CellStatus::Complete) {
        EXIT_OK
    } else if index.cells.iter().any(|c| c.status == CellStatus::Partial) {
        EXIT_PARTIAL
    } else {
        EXIT_USAGE
    };
    Ok(code)
}

fn load_run(store: &RunStore, id: &str) -> Result<RunRecord, CliError> {
    let hash = store.resolve(id)?;
    Ok(store.load_complete(&hash)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlicesFile {
    #[serde(default)]
    slices: Vec<SliceSpec>,
}

fn label_in(dataset: &Dataset, name: &str) -> Result<Label, CliError> {
    dataset
        .label_set()
        .lookup(name)
        .cloned()
        .ok_or_else(|| CliError::usage(format!("label `{name}` is not in dataset `{}`", dataset.id())))
}

fn cmd_compare(args: &CompareArgs) -> CliResult {
    let store = RunStore::open(&args.store.store);
    if !args.matrices.is_empty() {
        let mut reports = Vec::new();
        for id in &args.matrices {
            let index = store.load_matrix(id)?;
            let dataset = match &args.dataset {
                Some(p) if load_dataset(p)?.digest() == &index.dataset_digest => load_dataset(p)?,
                _ => dataset_for_index(&store, &index)?,
            };
            reports.push(matrix_report(&store, &index, &dataset)?);
        }
        emit(&args.output, &ReportDocument::new(Payload::Histogram(HistogramReport::from_matrices(&reports))))?;
        return Ok(EXIT_OK);
    }
    let (Some(b), Some(c), Some(dpath)) = (&args.baseline, &args.candidate, &args.dataset) else {
        return Err(CliError::usage("compare needs --baseline, --candidate and --dataset, or --matrix"));
    };
    let dataset = load_dataset(dpath)?;
    let baseline = load_run(&store, b)?;
    let candidate = load_run(&store, c)?;
    let sampling = args.sampling_run.as_deref().map(|s| load_run(&store, s)).transpose()?;
    let positive = match &args.positive {
        Some(p) => label_in(&dataset, p)?,
        None => dataset.label_set().labels()[0].clone(),
    };
    let mut options = CompareOptions::for_positive(positive);
    options.macro_f1 = args.macro_f1;
    options.reference = match args.reference.as_deref() {
        None => options.reference,
        Some("all") => ReferencePopulation::All,
        Some(l) => ReferencePopulation::Gold(label_in(&dataset, l)?),
    };
    let slices = match &args.slices {
        Some(p) => parse_toml::<SlicesFile>(p)?.slices,
        None => Vec::new(),
    };
    let summary = analysis::delta_report(&baseline, &candidate, &dataset, &slices, sampling.as_ref(), &options)?;
    let payload = if args.entropy {
        Payload::Entropy(summary.entropy.clone().expect("sampling run given"))
    } else {
        Payload::Comparison(summary)
    };
    let doc = ReportDocument::new(payload);
    if args.flips && args.output.format == Format::Csv {
        if let Payload::Comparison(s) = &doc.payload {
            let table = analysis::flip_table_csv(s);
            return write_raw(&args.output, &table).map(|_| EXIT_OK);
        }
    }
    emit(&args.output, &doc)?;
    Ok(EXIT_OK)
}

fn write_raw(output: &Output, text: &str) -> Result<(), CliError> {
    match &output.out {
        Some(p) => fs::write(p, text).map_err(|e| CliError::usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// A matrix's dataset is not stored with it; any stored run of the matrix
/// carries its digest, but the examples themselves must come from `--dataset`.
fn dataset_for_index(_store: &RunStore, index: &MatrixIndex) -> Result<Dataset, CliError> {
    Err(CliError::usage(format!(
        "matrix {} was run on dataset `{}` ({}); pass it with --dataset",
        index.matrix_id.hex(),
        index.dataset_id,
        index.dataset_digest
    )))
}

fn resolve_baseline(
    store: &RunStore,
    suite: &TestSuite,
    args: &SuiteArgs,
    dataset: &Dataset,
) -> Result<RunRecord, CliError> {
    if let Some(b) = &args.baseline {
        return load_run(store, b);
    }
    match &suite.baseline {
        Some(BaselineSelector::RunId { run_id }) => load_run(store, run_id),
        Some(BaselineSelector::ModelPrompt { model, prompt_id, prompt_version }) => {
            let digest: &ContentHash = dataset.digest();
            let mut found = store.find(|c| {
                &c.model.model_name == model
                    && &c.prompt_id == prompt_id
                    && c.prompt_version == *prompt_version
                    && &c.dataset_digest == digest
                    && c.params.n_samples == 1
            })?;
            match found.len() {
                1 => Ok(found.remove(0)),
                0 => Err(CliError::usage(format!("no stored run for baseline {model}/{prompt_id}@{prompt_version}"))),
                n => Err(CliError::usage(format!(
                    "{n} stored runs match baseline {model}/{prompt_id}@{prompt_version}; pass --baseline"
                ))),
            }
        }
        None => Err(CliError::usage("suite has no baseline selector; pass --baseline")),
    }
}

fn cmd_suite(args: &SuiteArgs) -> CliResult {
    let mut suite = TestSuite::from_toml(&args.suite.display().to_string(), &read(&args.suite)?)?;
    if let Some(seed) = args.seed {
        suite.seed = seed;
    }
    let dataset = load_dataset(&args.dataset)?;
    if suite.dataset_id != dataset.id() {
        return Err(CliError::usage(format!(
            "suite targets dataset `{}` but `{}` was given",
            suite.dataset_id,
            dataset.id()
        )));
    }
    let store = RunStore::open(&args.store.store);
    let baseline = resolve_baseline(&store, &suite, args, &dataset)?;
    let candidate = load_run(&store, &args.candidate)?;
    let probe = args.probe.as_deref().map(|p| load_run(&store, p)).transpose()?;
    let report = regress::run_suite(&suite, &baseline, &candidate, &dataset, probe.as_ref(), Execution::Parallel);
    let code = report.exit_code();
    emit(&args.output, &ReportDocument::new(Payload::Suite(report)))?;
    Ok(code)
}

fn parse_clause(s: &str) -> Result<Clause, CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::usage(format!("slice clause `{s}` is not key=value")))?;
    Ok(match (k, v) {
        ("gold", l) => Clause::gold(&Label::new(l).map_err(CliError::usage)?),
        (k, "true") => Clause::meta(k, true),
        (k, "false") => Clause::meta(k, false),
        (k, v) => Clause::meta(k, v),
    })
}

fn cmd_simulate(args: &SimArgs, power: bool) -> CliResult {
    let drift: DriftSpec = parse_toml(&args.config)?;
    let dataset = match &args.dataset {
        Some(p) => load_dataset(p)?,
        None => driftsim::synthetic_dataset("synthetic", args.n, &[]),
    };
    let metric = match args.metric.as_str() {
        "accuracy" => Metric::Accuracy,
        "f1" => Metric::F1,
        "regression_rate" => Metric::RegressionRate,
        other => return Err(CliError::usage(format!("unknown metric `{other}`"))),
    };
    let mut test =
        RegressionTest::new("simulated", args.slice.iter().map(|s| parse_clause(s)).collect::<Result<_, _>>()?, metric);
    test.delta = args.delta;
    test.alpha = args.alpha;
    test.min_n = args.min_n;
    let exec = execution(args.sequential);
    let result = if power {
        driftsim::power_experiment(&drift, &test, &dataset, args.trials, args.seed, exec)?
    } else {
        driftsim::calibration_experiment(&drift, &test, &dataset, args.trials, args.seed, exec)?
    };
    emit(&args.output, &ReportDocument::new(Payload::Simulation(result)))?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_4_and_help_exits_0() {
        assert_eq!(run(["llmregress", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["llmregress", "run"]), EXIT_USAGE);
        assert_eq!(run(["llmregress", "--help"]), EXIT_OK);
    }

    #[test]
    fn clause_parsing() {
        assert_eq!(parse_clause("gold=toxic").unwrap(), Clause::gold(&Label::new("toxic").unwrap()));
        assert_eq!(parse_clause("severe=true").unwrap(), Clause::meta("severe", true));
        assert_eq!(parse_clause("trigger=politics").unwrap(), Clause::meta("trigger", "politics"));
        assert!(parse_clause("nonsense").is_err());
    }

    #[test]
    fn missing_dataset_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.jsonl");
        assert_eq!(
            run([
                "llmregress".into(),
                "dataset".into(),
                "validate".into(),
                "--dataset".into(),
                missing.into_os_string()
            ]),
            EXIT_USAGE
        );
    }
}
