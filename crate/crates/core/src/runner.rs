//! Run execution and the content-addressed run store.
//!
//! Store layout (relative to the store root):
//!
//! ```text
//! runs/<run_id>/config.rec     run config + run id
//! runs/<run_id>/samples.recl   one JSON record per (example_id, sample_index)
//! runs/<run_id>/status         complete|partial + timestamps
//! matrices/<hash>/index.rec    one entry per (model, prompt) cell
//! ```
//!
//! `samples.recl` is appended to while a run is in progress and rewritten in
//! `(example_id, sample_index)` order once it completes, so a resumed run ends
//! with the same bytes as an uninterrupted one.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{canonical_json, hash_of, ContentHash, Label};
use crate::datasets::{Dataset, ExampleId};
use crate::par::{self, Execution};
use crate::prompts::{render, LabelParseRule, PromptError, PromptRegistry, PromptTemplate};
use crate::providers::{
    complete_indices, ModelIdentity, ModelRef, Provider, ProviderError, ReplayStore, SamplingParams, Usage,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Examples fetched concurrently before their samples are appended to disk.
const DEFAULT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("dataset digest {got} does not match run config digest {expected}")]
    DigestMismatch { expected: ContentHash, got: ContentHash },
    #[error("prompt template {got} does not match config prompt {expected}")]
    PromptMismatch { expected: String, got: String },
    #[error("provider failure after {completed} examples (run left partial): {source}")]
    ProviderFailure { completed: usize, source: ProviderError },
    #[error("run {0} not found in store")]
    NotFound(String),
    #[error("run {0} is not complete")]
    Incomplete(String),
    #[error("run {run_id}: stored parse for `{example_id}`#{sample_index} disagrees with the parse rule")]
    ParseMismatch { run_id: String, example_id: String, sample_index: u32 },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("run store {path}: {reason}")]
    Store { path: String, reason: String },
}

impl RunError {
    pub fn code(&self) -> &'static str {
        match self {
            RunError::DigestMismatch { .. } => "DIGEST_MISMATCH",
            RunError::PromptMismatch { .. } => "PROMPT_MISMATCH",
            RunError::ProviderFailure { .. } => "PROVIDER_FAILURE",
            RunError::NotFound(_) => "RUN_NOT_FOUND",
            RunError::Incomplete(_) => "RUN_INCOMPLETE",
            RunError::ParseMismatch { .. } => "PARSE_MISMATCH",
            RunError::Prompt(e) => e.code(),
            RunError::Store { .. } => "RUN_STORE",
        }
    }
}

fn store_err(path: &Path, reason: impl ToString) -> RunError {
    RunError::Store { path: path.display().to_string(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelRef,
    pub prompt_id: String,
    pub prompt_version: u32,
    pub dataset_id: String,
    pub dataset_digest: ContentHash,
    pub params: SamplingParams,
    pub parse_rule: LabelParseRule,
    #[serde(default)]
    pub seed_note: String,
}

#[derive(Serialize)]
struct RunIdView<'a> {
    model: ModelIdentity<'a>,
    prompt_id: &'a str,
    prompt_version: u32,
    dataset_id: &'a str,
    dataset_digest: &'a ContentHash,
    params: &'a SamplingParams,
    parse_rule: &'a LabelParseRule,
    seed_note: &'a str,
}

impl RunConfig {
    /// Config for running `template` over `dataset` with labels parsed against
    /// the dataset's label set.
    pub fn new(model: ModelRef, template: &PromptTemplate, dataset: &Dataset, params: SamplingParams) -> Self {
        RunConfig {
            model,
            prompt_id: template.prompt_id.clone(),
            prompt_version: template.version,
            dataset_id: dataset.id().to_string(),
            dataset_digest: dataset.digest().clone(),
            params,
            parse_rule: LabelParseRule::new(dataset.label_set().clone()),
            seed_note: String::new(),
        }
    }

    pub fn run_id(&self) -> ContentHash {
        hash_of(&RunIdView {
            model: self.model.identity(),
            prompt_id: &self.prompt_id,
            prompt_version: self.prompt_version,
            dataset_id: &self.dataset_id,
            dataset_digest: &self.dataset_digest,
            params: &self.params,
            parse_rule: &self.parse_rule,
            seed_note: &self.seed_note,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_index: u32,
    pub raw_text: String,
    /// `None` is UNPARSED.
    pub parsed: Option<Label>,
    pub latency_ms: u64,
    pub usage: Usage,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    example_id: ExampleId,
    #[serde(flatten)]
    record: SampleRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StatusFile {
    status: RunStatus,
    started_at: String,
    finished_at: Option<String>,
    tool_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigFile {
    run_id: ContentHash,
    config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: ContentHash,
    pub config: RunConfig,
    pub samples: BTreeMap<ExampleId, Vec<SampleRecord>>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn n_samples(&self) -> u32 {
        self.config.params.n_samples
    }

    pub fn samples_for(&self, example_id: &str) -> Option<&[SampleRecord]> {
        self.samples.get(example_id).map(Vec::as_slice)
    }

    pub fn total_samples(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn label_set(&self) -> &crate::canonical::LabelSet {
        &self.config.parse_rule.label_set
    }

    /// Canonical `samples.recl` bytes.
    pub fn samples_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (id, records) in &self.samples {
            for r in records {
                out.extend(canonical_json(&SampleLine { example_id: id.clone(), record: r.clone() }));
                out.push(b'\n');
            }
        }
        out
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Everything an execution needs besides the config and dataset.
pub struct RunContext<'a> {
    pub provider: &'a dyn Provider,
    pub replay: &'a ReplayStore,
    pub execution: Execution,
    pub chunk_size: usize,
}

impl<'a> RunContext<'a> {
    pub fn new(provider: &'a dyn Provider, replay: &'a ReplayStore) -> Self {
        RunContext { provider, replay, execution: Execution::default(), chunk_size: DEFAULT_CHUNK }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }
}

fn check_inputs(config: &RunConfig, dataset: &Dataset, template: &PromptTemplate) -> Result<(), RunError> {
    if dataset.digest() != &config.dataset_digest {
        return Err(RunError::DigestMismatch {
            expected: config.dataset_digest.clone(),
            got: dataset.digest().clone(),
        });
    }
    if template.prompt_id != config.prompt_id || template.version != config.prompt_version {
        return Err(RunError::PromptMismatch {
            expected: format!("{}@{}", config.prompt_id, config.prompt_version),
            got: format!("{}@{}", template.prompt_id, template.version),
        });
    }
    Ok(())
}

fn sample_example(
    config: &RunConfig,
    dataset: &Dataset,
    template: &PromptTemplate,
    ctx: &RunContext<'_>,
    example_id: &str,
    indices: &[u32],
) -> Result<Vec<SampleRecord>, ProviderError> {
    let example = dataset.get(example_id).expect("example id taken from dataset");
    let prompt = render(template, &example.text);
    let responses =
        complete_indices(&config.model, &prompt, &config.params, indices, ctx.replay, ctx.provider, Some(example))?;
    Ok(responses
        .into_iter()
        .map(|r| SampleRecord {
            sample_index: r.sample_index,
            parsed: config.parse_rule.parse(&r.raw_text),
            raw_text: r.raw_text,
            latency_ms: r.latency_ms,
            usage: r.usage,
        })
        .collect())
}

/// Work list: for each example (dataset order) the sample indices not yet held.
fn missing_work(
    config: &RunConfig,
    dataset: &Dataset,
    have: &BTreeMap<ExampleId, Vec<SampleRecord>>,
) -> Vec<(String, Vec<u32>)> {
    let n = config.params.n_samples;
    dataset
        .examples()
        .iter()
        .filter_map(|ex| {
            let held: HashSet<u32> =
                have.get(&ex.id).map(|v| v.iter().map(|r| r.sample_index).collect()).unwrap_or_default();
            let missing: Vec<u32> = (0..n).filter(|i| !held.contains(i)).collect();
            (!missing.is_empty()).then(|| (ex.id.clone(), missing))
        })
        .collect()
}

fn merge(have: &mut BTreeMap<ExampleId, Vec<SampleRecord>>, id: &str, records: Vec<SampleRecord>) {
    let slot = have.entry(id.to_string()).or_default();
    for r in records {
        if !slot.iter().any(|x| x.sample_index == r.sample_index) {
            slot.push(r);
        }
    }
    slot.sort_by_key(|r| r.sample_index);
}

/// Runs `config` entirely in memory: nothing is persisted besides what the
/// replay store records.
pub fn collect_run(
    config: &RunConfig,
    dataset: &Dataset,
    template: &PromptTemplate,
    ctx: &RunContext<'_>,
) -> Result<RunRecord, RunError> {
    check_inputs(config, dataset, template)?;
    let started_at = now();
    let work = missing_work(config, dataset, &BTreeMap::new());
    let results = par::map(ctx.execution, &work, |(id, idx)| sample_example(config, dataset, template, ctx, id, idx));
    let mut samples = BTreeMap::new();
    for (done, ((id, _), res)) in work.iter().zip(results).enumerate() {
        let records = res.map_err(|source| RunError::ProviderFailure { completed: done, source })?;
        merge(&mut samples, id, records);
    }
    Ok(RunRecord {
        run_id: config.run_id(),
        config: config.clone(),
        samples,
        started_at,
        finished_at: Some(now()),
        status: RunStatus::Complete,
    })
}

/// Filesystem run store rooted at a store directory.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn open(store_root: &Path) -> Self {
        RunStore { root: store_root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &ContentHash) -> PathBuf {
        self.root.join("runs").join(run_id.hex())
    }

    pub fn samples_path(&self, run_id: &ContentHash) -> PathBuf {
        self.run_dir(run_id).join("samples.recl")
    }

    fn read_status(&self, run_id: &ContentHash) -> Result<Option<StatusFile>, RunError> {
        let path = self.run_dir(run_id).join("status");
        match fs::read(&path) {
            Ok(raw) => serde_json::from_slice(&raw).map(Some).map_err(|e| store_err(&path, e)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(store_err(&path, e)),
        }
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| store_err(path, e))
    }

    fn write_status(&self, run_id: &ContentHash, status: &StatusFile) -> Result<(), RunError> {
        let mut bytes = serde_json::to_vec_pretty(status).expect("status serializes");
        bytes.push(b'\n');
        Self::write_atomic(&self.run_dir(run_id).join("status"), &bytes)
    }

    fn read_samples(&self, run_id: &ContentHash) -> Result<BTreeMap<ExampleId, Vec<SampleRecord>>, RunError> {
        let path = self.samples_path(run_id);
        let raw = match fs::read_to_string(&path) {
            Ok(r) => r,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(BTreeMap::new()),
            Err(e) => return Err(store_err(&path, e)),
        };
        let mut out = BTreeMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SampleLine>(line) {
                Ok(l) => merge(&mut out, &l.example_id, vec![l.record]),
                // a torn final line from an interrupted append is dropped
                Err(_) if i + 1 == raw.lines().count() && !raw.ends_with('\n') => {}
                Err(e) => return Err(store_err(&path, format!("line {}: {e}", i + 1))),
            }
        }
        Ok(out)
    }

    fn append_samples(&self, run_id: &ContentHash, id: &str, records: &[SampleRecord]) -> Result<(), RunError> {
        let path = self.samples_path(run_id);
        let mut buf = Vec::new();
        for r in records {
            buf.extend(canonical_json(&SampleLine { example_id: id.to_string(), record: r.clone() }));
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| store_err(&path, e))?;
        f.write_all(&buf).map_err(|e| store_err(&path, e))
    }

    /// Loads a stored run, re-checking every stored parse against the rule.
    pub fn load(&self, run_id: &ContentHash) -> Result<RunRecord, RunError> {
        let cfg_path = self.run_dir(run_id).join("config.rec");
        let raw = match fs::read(&cfg_path) {
            Ok(r) => r,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(RunError::NotFound(run_id.hex().to_string())),
            Err(e) => return Err(store_err(&cfg_path, e)),
        };
        let cfg: ConfigFile = serde_json::from_slice(&raw).map_err(|e| store_err(&cfg_path, e))?;
        if cfg.config.run_id() != *run_id || cfg.run_id != *run_id {
            return Err(store_err(&cfg_path, "stored config does not hash to its run id"));
        }
        let status = self.read_status(run_id)?.unwrap_or(StatusFile {
            status: RunStatus::Partial,
            started_at: String::new(),
            finished_at: None,
            tool_version: TOOL_VERSION.to_string(),
        });
        let samples = self.read_samples(run_id)?;
        for (id, records) in &samples {
            for r in records {
                if cfg.config.parse_rule.parse(&r.raw_text) != r.parsed {
                    return Err(RunError::ParseMismatch {
                        run_id: run_id.hex().to_string(),
                        example_id: id.clone(),
                        sample_index: r.sample_index,
                    });
                }
            }
        }
        Ok(RunRecord {
            run_id: run_id.clone(),
            config: cfg.config,
            samples,
            started_at: status.started_at,
            finished_at: status.finished_at,
            status: status.status,
        })
    }

    /// Loads a run and requires it to be complete.
    pub fn load_complete(&self, run_id: &ContentHash) -> Result<RunRecord, RunError> {
        let run = self.load(run_id)?;
        if !run.is_complete() {
            return Err(RunError::Incomplete(run_id.hex().to_string()));
        }
        Ok(run)
    }

    /// Resolves a full hex run id or a unique prefix of at least 8 characters.
    pub fn resolve(&self, id_or_prefix: &str) -> Result<ContentHash, RunError> {
        if let Some(h) = ContentHash::parse_hex(id_or_prefix) {
            return Ok(h);
        }
        let prefix = id_or_prefix.strip_prefix("sha256:").unwrap_or(id_or_prefix).to_ascii_lowercase();
        if prefix.len() >= 8 {
            let matches: Vec<ContentHash> = self.list()?.into_iter().filter(|h| h.hex().starts_with(&prefix)).collect();
            if let [only] = matches.as_slice() {
                return Ok(only.clone());
            }
        }
        Err(RunError::NotFound(id_or_prefix.to_string()))
    }

    pub fn list(&self) -> Result<Vec<ContentHash>, RunError> {
        let dir = self.root.join("runs");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(store_err(&dir, e)),
        };
        let mut ids: Vec<ContentHash> = entries
            .filter_map(Result::ok)
            .filter_map(|e| ContentHash::parse_hex(&e.file_name().to_string_lossy()))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Complete runs whose config matches the predicate.
    pub fn find<F: Fn(&RunConfig) -> bool>(&self, pred: F) -> Result<Vec<RunRecord>, RunError> {
        let mut out = Vec::new();
        for id in self.list()? {
            let run = self.load(&id)?;
            if run.is_complete() && pred(&run.config) {
                out.push(run);
            }
        }
        Ok(out)
    }

    /// Executes or resumes `config`. Only (example, sample index) pairs missing
    /// from the store are fetched; a complete stored run is returned as-is.
    /// On provider failure everything fetched so far stays on disk with status
    /// `partial`.
    pub fn execute_run(
        &self,
        config: &RunConfig,
        dataset: &Dataset,
        template: &PromptTemplate,
        ctx: &RunContext<'_>,
    ) -> Result<RunRecord, RunError> {
        check_inputs(config, dataset, template)?;
        let run_id = config.run_id();
        let dir = self.run_dir(&run_id);
        fs::create_dir_all(&dir).map_err(|e| store_err(&dir, e))?;

        let cfg_path = dir.join("config.rec");
        if !cfg_path.exists() {
            let mut bytes = serde_json::to_vec_pretty(&ConfigFile { run_id: run_id.clone(), config: config.clone() })
                .expect("config serializes");
            bytes.push(b'\n');
            Self::write_atomic(&cfg_path, &bytes)?;
        }

        let prior = self.read_status(&run_id)?;
        if prior.as_ref().is_some_and(|s| s.status == RunStatus::Complete) {
            return self.load(&run_id);
        }
        let mut status = prior.unwrap_or(StatusFile {
            status: RunStatus::Partial,
            started_at: now(),
            finished_at: None,
            tool_version: TOOL_VERSION.to_string(),
        });
        status.status = RunStatus::Partial;
        self.write_status(&run_id, &status)?;

        let mut samples = self.read_samples(&run_id)?;
        let work = missing_work(config, dataset, &samples);
        let mut completed = 0;
        for chunk in work.chunks(ctx.chunk_size.max(1)) {
            let results =
                par::map(ctx.execution, chunk, |(id, idx)| sample_example(config, dataset, template, ctx, id, idx));
            let mut failure = None;
            for ((id, _), res) in chunk.iter().zip(results) {
                match res {
                    Ok(records) => {
                        self.append_samples(&run_id, id, &records)?;
                        merge(&mut samples, id, records);
                        completed += 1;
                    }
                    Err(e) => {
                        failure.get_or_insert(e);
                    }
                }
            }
            if let Some(source) = failure {
                return Err(RunError::ProviderFailure { completed, source });
            }
        }

        let record = RunRecord {
            run_id: run_id.clone(),
            config: config.clone(),
            samples,
            started_at: status.started_at.clone(),
            finished_at: Some(now()),
            status: RunStatus::Complete,
        };
        Self::write_atomic(&self.samples_path(&run_id), &record.samples_bytes())?;
        status.status = RunStatus::Complete;
        status.finished_at = record.finished_at.clone();
        self.write_status(&run_id, &status)?;
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Complete,
    Partial,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub model: ModelRef,
    pub prompt_id: String,
    pub prompt_version: u32,
    pub run_id: Option<ContentHash>,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixIndex {
    pub matrix_id: ContentHash,
    pub dataset_id: String,
    pub dataset_digest: ContentHash,
    pub params: SamplingParams,
    /// Row-major: models outer, prompts inner.
    pub cells: Vec<MatrixCell>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl MatrixIndex {
    pub fn models(&self) -> Vec<&ModelRef> {
        let mut out: Vec<&ModelRef> = Vec::new();
        for c in &self.cells {
            if !out.iter().any(|m| m.model_name == c.model.model_name && m.provider == c.model.provider) {
                out.push(&c.model);
            }
        }
        out
    }

    pub fn prompts(&self) -> Vec<(String, u32)> {
        let mut out: Vec<(String, u32)> = Vec::new();
        for c in &self.cells {
            let p = (c.prompt_id.clone(), c.prompt_version);
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }

    pub fn cell(&self, model_name: &str, prompt_id: &str, version: u32) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.model.model_name == model_name && c.prompt_id == prompt_id && c.prompt_version == version)
    }
}

#[derive(Serialize)]
struct MatrixIdView<'a> {
    models: Vec<ModelIdentity<'a>>,
    prompts: &'a [(String, u32)],
    dataset_digest: &'a ContentHash,
    params: &'a SamplingParams,
    seed_note: &'a str,
}

impl RunStore {
    pub fn matrix_path(&self, matrix_id: &ContentHash) -> PathBuf {
        self.root.join("matrices").join(matrix_id.hex()).join("index.rec")
    }

    pub fn load_matrix(&self, id_or_prefix: &str) -> Result<MatrixIndex, RunError> {
        let id = match ContentHash::parse_hex(id_or_prefix) {
            Some(h) => h,
            None => {
                let dir = self.root.join("matrices");
                let prefix = id_or_prefix.to_ascii_lowercase();
                let found: Vec<_> = fs::read_dir(&dir)
                    .map_err(|e| store_err(&dir, e))?
                    .filter_map(Result::ok)
                    .filter_map(|e| ContentHash::parse_hex(&e.file_name().to_string_lossy()))
                    .filter(|h| prefix.len() >= 8 && h.hex().starts_with(&prefix))
                    .collect();
                match found.as_slice() {
                    [only] => only.clone(),
                    _ => return Err(RunError::NotFound(id_or_prefix.to_string())),
                }
            }
        };
        let path = self.matrix_path(&id);
        let raw = fs::read(&path).map_err(|_| RunError::NotFound(id_or_prefix.to_string()))?;
        serde_json::from_slice(&raw).map_err(|e| store_err(&path, e))
    }

    /// Runs every (model, prompt) cell over one dataset and params profile.
    /// Cells are independent: a failing cell is recorded in the index and the
    /// others still complete.
    pub fn run_matrix(
        &self,
        models: &[ModelRef],
        prompts: &[(String, u32)],
        registry: &PromptRegistry,
        dataset: &Dataset,
        params: &SamplingParams,
        seed_note: &str,
        ctx: &RunContext<'_>,
    ) -> Result<(MatrixIndex, Vec<Option<RunRecord>>), RunError> {
        let started_at = now();
        let cells: Vec<(ModelRef, (String, u32))> =
            models.iter().flat_map(|m| prompts.iter().map(move |p| (m.clone(), p.clone()))).collect();
        let results = par::map(
            ctx.execution,
            &cells,
            |(model, (pid, ver))| -> Result<RunRecord, (Option<ContentHash>, RunError)> {
                let template = registry.get(pid, *ver).map_err(|e| (None, e.into()))?;
                let mut config = RunConfig::new(model.clone(), &template, dataset, params.clone());
                config.seed_note = seed_note.to_string();
                let run_id = config.run_id();
                self.execute_run(&config, dataset, &template, ctx).map_err(|e| (Some(run_id), e))
            },
        );

        let mut index_cells = Vec::with_capacity(cells.len());
        let mut records = Vec::with_capacity(cells.len());
        for ((model, (pid, ver)), res) in cells.into_iter().zip(results) {
            let (run_id, status, error, record) = match res {
                Ok(r) => (Some(r.run_id.clone()), CellStatus::Complete, None, Some(r)),
                Err((id, e @ RunError::ProviderFailure { .. })) => (id, CellStatus::Partial, Some(e.to_string()), None),
                Err((id, e)) => (id, CellStatus::Error, Some(e.to_string()), None),
            };
            index_cells.push(MatrixCell { model, prompt_id: pid, prompt_version: ver, run_id, status, error });
            records.push(record);
        }

        let matrix_id = hash_of(&MatrixIdView {
            models: models.iter().map(ModelRef::identity).collect(),
            prompts,
            dataset_digest: dataset.digest(),
            params,
            seed_note,
        });
        let index = MatrixIndex {
            matrix_id: matrix_id.clone(),
            dataset_id: dataset.id().to_string(),
            dataset_digest: dataset.digest().clone(),
            params: params.clone(),
            cells: index_cells,
            tool_version: TOOL_VERSION.to_string(),
            started_at,
            finished_at: now(),
        };
        let path = self.matrix_path(&matrix_id);
        let dir = path.parent().expect("index has a parent");
        fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
        let mut bytes = serde_json::to_vec_pretty(&index).expect("index serializes");
        bytes.push(b'\n');
        Self::write_atomic(&path, &bytes)?;
        Ok((index, records))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::LabelSet;
    use crate::datasets::Example;
    use crate::prompts::PromptMode;
    use crate::providers::ScriptedProvider;

    fn dataset(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example {
                id: format!("ex{i:03}"),
                text: format!("document {i}"),
                gold: Label::new(if i % 3 == 0 { "toxic" } else { "non-toxic" }).unwrap(),
                metadata: Default::default(),
            })
            .collect();
        Dataset::new("toy", LabelSet::from_names(&["toxic", "non-toxic"]).unwrap(), examples, "").unwrap()
    }

    fn scripted(d: &Dataset) -> ScriptedProvider {
        let mut p = ScriptedProvider::new();
        for ex in d.examples() {
            p.insert(&ex.id, vec![format!("Label: {}", ex.gold), "non-toxic".into(), "maybe".into()]);
        }
        p
    }

    fn template() -> PromptTemplate {
        PromptTemplate::new("tox", 1, PromptMode::Completion, "Classify: {text}")
    }

    fn config(d: &Dataset, params: SamplingParams) -> RunConfig {
        RunConfig::new(ModelRef::new("scripted", "m", PromptMode::Completion), &template(), d, params)
    }

    #[test]
    fn three_examples_one_sample_each() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path());
        let d = dataset(3);
        let p = scripted(&d);
        let replay = ReplayStore::passthrough();
        let ctx = RunContext::new(&p, &replay);
        let run = store.execute_run(&config(&d, SamplingParams::point()), &d, &template(), &ctx).unwrap();
        assert_eq!(run.samples.len(), 3);
        assert_eq!(run.total_samples(), 3);
        assert!(run.is_complete());
        assert_eq!(run.samples_for("ex000").unwrap()[0].parsed, Some(Label::new("toxic").unwrap()));
    }

    #[test]
    fn rerun_of_complete_config_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path());
        let d = dataset(5);
        let p = scripted(&d);
        let replay = ReplayStore::passthrough();
        let ctx = RunContext::new(&p, &replay);
        let cfg = config(&d, SamplingParams::confidence());
        let first = store.execute_run(&cfg, &d, &template(), &ctx).unwrap();
        let calls = p.calls();
        let second = store.execute_run(&cfg, &d, &template(), &ctx).unwrap();
        assert_eq!(p.calls(), calls);
        assert_eq!(first.run_id, second.run_id);
        assert_eq!(first.samples, second.samples);
        assert_eq!(store.load_complete(&first.run_id).unwrap().samples, first.samples);
    }

    #[test]
    fn interrupted_run_resumes_to_identical_bytes() {
        let d = dataset(30);
        let cfg = config(&d, SamplingParams::confidence());

        let clean_dir = tempfile::tempdir().unwrap();
        let clean = RunStore::open(clean_dir.path());
        let p = scripted(&d);
        let replay = ReplayStore::passthrough();
        clean.execute_run(&cfg, &d, &template(), &RunContext::new(&p, &replay)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path());
        let flaky = scripted(&d).failing_after(11);
        let mut ctx = RunContext::new(&flaky, &replay).with_execution(Execution::Sequential);
        ctx.chunk_size = 4;
        let err = store.execute_run(&cfg, &d, &template(), &ctx).unwrap_err();
        assert_eq!(err.code(), "PROVIDER_FAILURE");
        let partial = store.load(&cfg.run_id()).unwrap();
        assert_eq!(partial.status, RunStatus::Partial);
        assert_eq!(partial.samples.len(), 11);

        let good = scripted(&d);
        let resumed = store.execute_run(&cfg, &d, &template(), &RunContext::new(&good, &replay)).unwrap();
        assert_eq!(good.calls(), 19);
        assert_eq!(resumed.total_samples(), 600);
        assert_eq!(
            fs::read(store.samples_path(&cfg.run_id())).unwrap(),
            fs::read(clean.samples_path(&cfg.run_id())).unwrap()
        );
    }

    #[test]
    fn digest_mismatch_rejected() {
        let d = dataset(3);
        let other = dataset(4);
        let cfg = config(&d, SamplingParams::point());
        let p = scripted(&other);
        let replay = ReplayStore::passthrough();
        let err = collect_run(&cfg, &other, &template(), &RunContext::new(&p, &replay)).unwrap_err();
        assert_eq!(err.code(), "DIGEST_MISMATCH");
    }

    #[test]
    fn run_id_ignores_example_order_but_not_config_changes() {
        let d = dataset(6);
        let mut rev = d.examples().to_vec();
        rev.reverse();
        let r = Dataset::new("toy", d.label_set().clone(), rev, "").unwrap();
        assert_eq!(config(&d, SamplingParams::point()).run_id(), config(&r, SamplingParams::point()).run_id());
        let base = config(&d, SamplingParams::point());
        let mut t = base.clone();
        t.params.temperature = 0.7;
        assert_ne!(base.run_id(), t.run_id());
        let mut v = base.clone();
        v.prompt_version = 2;
        assert_ne!(base.run_id(), v.run_id());
        let mut note = base.clone();
        note.model.snapshot_note = "x".into();
        assert_eq!(base.run_id(), note.run_id());
    }

    #[test]
    fn tampered_parse_detected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path());
        let d = dataset(2);
        let p = scripted(&d);
        let replay = ReplayStore::passthrough();
        let cfg = config(&d, SamplingParams::point());
        store.execute_run(&cfg, &d, &template(), &RunContext::new(&p, &replay)).unwrap();
        let path = store.samples_path(&cfg.run_id());
        let raw = fs::read_to_string(&path).unwrap().replacen("\"parsed\":\"toxic\"", "\"parsed\":\"non-toxic\"", 1);
        fs::write(&path, raw).unwrap();
        assert_eq!(store.load(&cfg.run_id()).unwrap_err().code(), "PARSE_MISMATCH");
    }

    #[test]
    fn matrix_two_by_two() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path());
        let registry = PromptRegistry::open(dir.path());
        registry.register_next("a", PromptMode::Completion, "A {text}", "").unwrap();
        registry.register_next("b", PromptMode::Completion, "B {text}", "").unwrap();
        let d = dataset(10);
        let p = scripted(&d);
        let replay = ReplayStore::passthrough();
        let models = vec![
            ModelRef::new("scripted", "m1", PromptMode::Completion),
            ModelRef::new("scripted", "m2", PromptMode::Completion),
        ];
        let prompts = vec![("a".to_string(), 1), ("b".to_string(), 1)];
        let (index, runs) = store
            .run_matrix(&models, &prompts, &registry, &d, &SamplingParams::point(), "", &RunContext::new(&p, &replay))
            .unwrap();
        assert_eq!(index.cells.len(), 4);
        assert_eq!(runs.iter().flatten().map(RunRecord::total_samples).sum::<usize>(), 40);
        assert_eq!(store.load_matrix(index.matrix_id.hex()).unwrap(), index);
    }

    #[test]
    fn matrix_cell_failure_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path());
        let registry = PromptRegistry::open(dir.path());
        registry.register_next("a", PromptMode::Completion, "A {text}", "").unwrap();
        let d = dataset(4);
        let p = scripted(&d);
        let replay = ReplayStore::passthrough();
        let models = vec![
            ModelRef::new("scripted", "ok", PromptMode::Completion),
            ModelRef::new("scripted", "chat-only", PromptMode::Chat),
        ];
        let prompts = vec![("a".to_string(), 1), ("missing".to_string(), 3)];
        let (index, _) = store
            .run_matrix(&models, &prompts, &registry, &d, &SamplingParams::point(), "", &RunContext::new(&p, &replay))
            .unwrap();
        let statuses: Vec<CellStatus> = index.cells.iter().map(|c| c.status).collect();
        assert_eq!(statuses, vec![CellStatus::Complete, CellStatus::Error, CellStatus::Partial, CellStatus::Error]);
    }
}
