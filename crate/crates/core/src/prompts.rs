//! Versioned prompt registry, template rendering and label parsing.
//!
//! Registry layout under a store root: `prompts/<prompt_id>/<version>.rec`, one
//! JSON record per immutable version. Writers take `prompts/<prompt_id>/.lock`
//! (created exclusively) for the duration of a registration.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{hash_of, ContentHash, Label, LabelSet};

pub const PLACEHOLDER: &str = "{text}";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template body has no `{{text}}` placeholder")]
    PlaceholderMissing,
    #[error("template body has {0} `{{text}}` placeholders, expected exactly one")]
    PlaceholderDuplicate(usize),
    #[error("version conflict for `{prompt_id}`: expected version {expected}, got {got}")]
    VersionConflict { prompt_id: String, expected: u32, got: u32 },
    #[error("invalid lineage: parent version {parent} for version {version}")]
    InvalidParent { parent: u32, version: u32 },
    #[error("unknown prompt version `{prompt_id}` v{version}")]
    UnknownVersion { prompt_id: String, version: u32 },
    #[error("invalid prompt id `{0}`")]
    InvalidId(String),
    #[error("registry record {path} fails its hash check")]
    HashMismatch { path: String },
    #[error("registry record {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("timed out waiting for registry lock {0}")]
    LockTimeout(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PromptError {
    pub fn code(&self) -> &'static str {
        match self {
            PromptError::PlaceholderMissing => "PLACEHOLDER_MISSING",
            PromptError::PlaceholderDuplicate(_) => "PLACEHOLDER_DUPLICATE",
            PromptError::VersionConflict { .. } | PromptError::LockTimeout(_) => "VERSION_CONFLICT",
            PromptError::InvalidParent { .. } => "INVALID_PARENT",
            PromptError::UnknownVersion { .. } => "UNKNOWN_PROMPT_VERSION",
            PromptError::InvalidId(_) => "INVALID_PROMPT_ID",
            PromptError::HashMismatch { .. } => "HASH_MISMATCH",
            PromptError::Corrupt { .. } => "CORRUPT_RECORD",
            PromptError::Io { .. } => "IO_ERROR",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PromptError + '_ {
    move |source| PromptError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Completion,
    Chat,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "completion" => Ok(PromptMode::Completion),
            "chat" => Ok(PromptMode::Chat),
            other => Err(format!("unknown prompt mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prompt_id: String,
    pub version: u32,
    pub parent_version: Option<u32>,
    pub mode: PromptMode,
    pub body: String,
    pub system_preamble: Option<String>,
    pub created_at: String,
    pub notes: String,
}

impl PromptTemplate {
    pub fn new(prompt_id: &str, version: u32, mode: PromptMode, body: &str) -> Self {
        PromptTemplate {
            prompt_id: prompt_id.to_string(),
            version,
            parent_version: None,
            mode,
            body: body.to_string(),
            system_preamble: None,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            notes: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if !valid_id(&self.prompt_id) {
            return Err(PromptError::InvalidId(self.prompt_id.clone()));
        }
        match self.body.matches(PLACEHOLDER).count() {
            0 => return Err(PromptError::PlaceholderMissing),
            1 => {}
            n => return Err(PromptError::PlaceholderDuplicate(n)),
        }
        if self.version == 0 {
            return Err(PromptError::InvalidParent { parent: 0, version: 0 });
        }
        if let Some(parent) = self.parent_version {
            if parent == 0 || parent >= self.version {
                return Err(PromptError::InvalidParent { parent, version: self.version });
            }
        }
        Ok(())
    }

    pub fn content_hash(&self) -> ContentHash {
        hash_of(self)
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PromptRecord {
    #[serde(flatten)]
    template: PromptTemplate,
    content_hash: ContentHash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RenderedPrompt {
    Completion { text: String },
    Chat { messages: Vec<ChatMessage> },
}

impl RenderedPrompt {
    pub fn mode(&self) -> PromptMode {
        match self {
            RenderedPrompt::Completion { .. } => PromptMode::Completion,
            RenderedPrompt::Chat { .. } => PromptMode::Chat,
        }
    }
}

/// Substitutes `text` for the single placeholder. Chat templates become one
/// user message, preceded by a system message only when a preamble is set.
pub fn render(template: &PromptTemplate, text: &str) -> RenderedPrompt {
    let body = match template.body.split_once(PLACEHOLDER) {
        Some((head, tail)) => {
            let mut s = String::with_capacity(head.len() + text.len() + tail.len());
            s.push_str(head);
            s.push_str(text);
            s.push_str(tail);
            s
        }
        None => template.body.clone(),
    };
    match template.mode {
        PromptMode::Completion => RenderedPrompt::Completion { text: body },
        PromptMode::Chat => {
            let mut messages = Vec::with_capacity(2);
            if let Some(pre) = template.system_preamble.as_deref().filter(|p| !p.is_empty()) {
                messages.push(ChatMessage { role: Role::System, content: pre.to_string() });
            }
            messages.push(ChatMessage { role: Role::User, content: body });
            RenderedPrompt::Chat { messages }
        }
    }
}

/// Maps raw model output to a label. Only one strategy exists: lowercase the
/// output, match canonical labels as tokens bounded by characters that are
/// neither alphanumeric nor `-`, longest labels first with matched spans
/// consumed. Exactly one distinct match yields that label, anything else is
/// unparsed (`None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelParseRule {
    pub label_set: LabelSet,
    pub strategy: String,
}

pub const PARSE_STRATEGY: &str = "longest-first-token-boundary/v1";

impl LabelParseRule {
    pub fn new(label_set: LabelSet) -> Self {
        LabelParseRule { label_set, strategy: PARSE_STRATEGY.to_string() }
    }

    pub fn parse(&self, raw: &str) -> Option<Label> {
        parse_label(raw, self)
    }
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-'
}

pub fn parse_label(raw: &str, rule: &LabelParseRule) -> Option<Label> {
    let mut hay: Vec<char> = raw.to_lowercase().chars().collect();
    let mut order: Vec<(&Label, Vec<char>)> =
        rule.label_set.iter().map(|l| (l, l.as_str().chars().collect())).collect();
    order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(b.0)));

    let mut found: Option<&Label> = None;
    for (label, needle) in &order {
        let n = needle.len();
        if n == 0 || n > hay.len() {
            continue;
        }
        let mut hit = false;
        let mut i = 0;
        while i + n <= hay.len() {
            let before_ok = i == 0 || !is_token_char(hay[i - 1]);
            let after_ok = i + n == hay.len() || !is_token_char(hay[i + n]);
            if before_ok && after_ok && hay[i..i + n] == needle[..] {
                hit = true;
                // consumed spans can never match again
                hay[i..i + n].iter_mut().for_each(|c| *c = '\0');
                i += n;
            } else {
                i += 1;
            }
        }
        if hit {
            if found.is_some() {
                return None;
            }
            found = Some(label);
        }
    }
    found.cloned()
}

/// Filesystem-backed registry rooted at `<store>/prompts`.
#[derive(Debug, Clone)]
pub struct PromptRegistry {
    root: PathBuf,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

const LOCK_TIMEOUT: Duration = Duration::from_secs(10);

impl PromptRegistry {
    pub fn open(store_root: &Path) -> Self {
        PromptRegistry { root: store_root.join("prompts") }
    }

    fn dir(&self, prompt_id: &str) -> PathBuf {
        self.root.join(prompt_id)
    }

    fn record_path(&self, prompt_id: &str, version: u32) -> PathBuf {
        self.dir(prompt_id).join(format!("{version}.rec"))
    }

    fn lock(&self, prompt_id: &str) -> Result<LockGuard, PromptError> {
        let dir = self.dir(prompt_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(".lock");
        let start = Instant::now();
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(_) => return Ok(LockGuard(path)),
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    if start.elapsed() > LOCK_TIMEOUT {
                        return Err(PromptError::LockTimeout(path.display().to_string()));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
    }

    /// Registered versions of `prompt_id`, ascending.
    pub fn versions(&self, prompt_id: &str) -> Result<Vec<u32>, PromptError> {
        let dir = self.dir(prompt_id);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&dir)(e)),
        };
        let mut versions = Vec::new();
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(v) = name.strip_suffix(".rec").and_then(|s| s.parse::<u32>().ok()) {
                versions.push(v);
            }
        }
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn prompt_ids(&self) -> Result<Vec<String>, PromptError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        let mut ids: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn next_version(&self, prompt_id: &str) -> Result<u32, PromptError> {
        Ok(self.versions(prompt_id)?.last().copied().unwrap_or(0) + 1)
    }

    /// Persists a new immutable version. The template's version must be exactly
    /// one past the current maximum and its parent, if any, must exist.
    pub fn register(&self, template: &PromptTemplate) -> Result<u32, PromptError> {
        template.validate()?;
        let _guard = self.lock(&template.prompt_id)?;
        let existing = self.versions(&template.prompt_id)?;
        let expected = existing.last().copied().unwrap_or(0) + 1;
        if template.version != expected {
            return Err(PromptError::VersionConflict {
                prompt_id: template.prompt_id.clone(),
                expected,
                got: template.version,
            });
        }
        if let Some(parent) = template.parent_version {
            if !existing.contains(&parent) {
                return Err(PromptError::InvalidParent { parent, version: template.version });
            }
        }
        let record = PromptRecord { template: template.clone(), content_hash: template.content_hash() };
        let path = self.record_path(&template.prompt_id, template.version);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(PromptError::VersionConflict {
                    prompt_id: template.prompt_id.clone(),
                    expected,
                    got: template.version,
                })
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut bytes = serde_json::to_vec_pretty(&record).expect("record serializes");
        bytes.push(b'\n');
        file.write_all(&bytes).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        Ok(template.version)
    }

    /// Registers `body` as the next version of `prompt_id`, with the previous
    /// latest version (if any) as parent.
    pub fn register_next(
        &self,
        prompt_id: &str,
        mode: PromptMode,
        body: &str,
        notes: &str,
    ) -> Result<u32, PromptError> {
        let version = self.next_version(prompt_id)?;
        let mut t = PromptTemplate::new(prompt_id, version, mode, body);
        t.parent_version = (version > 1).then_some(version - 1);
        t.notes = notes.to_string();
        self.register(&t)
    }

    pub fn get(&self, prompt_id: &str, version: u32) -> Result<PromptTemplate, PromptError> {
        if !valid_id(prompt_id) {
            return Err(PromptError::InvalidId(prompt_id.to_string()));
        }
        let path = self.record_path(prompt_id, version);
        let raw = match fs::read(&path) {
            Ok(r) => r,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(PromptError::UnknownVersion { prompt_id: prompt_id.to_string(), version })
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let record: PromptRecord = serde_json::from_slice(&raw)
            .map_err(|e| PromptError::Corrupt { path: path.display().to_string(), reason: e.to_string() })?;
        if record.template.content_hash() != record.content_hash {
            return Err(PromptError::HashMismatch { path: path.display().to_string() });
        }
        Ok(record.template)
    }

    pub fn stored_hash(&self, prompt_id: &str, version: u32) -> Result<ContentHash, PromptError> {
        self.get(prompt_id, version).map(|t| t.content_hash())
    }

    /// Unified line diff of two versions' bodies.
    pub fn diff(&self, prompt_id: &str, from: u32, to: u32) -> Result<String, PromptError> {
        let a = self.get(prompt_id, from)?;
        let b = self.get(prompt_id, to)?;
        Ok(diff_bodies(&a, &b))
    }
}

pub fn diff_bodies(a: &PromptTemplate, b: &PromptTemplate) -> String {
    let diff = similar::TextDiff::from_lines(&a.body, &b.body);
    diff.unified_diff()
        .header(&format!("{}@{}", a.prompt_id, a.version), &format!("{}@{}", b.prompt_id, b.version))
        .to_string()
}

/// The shipped P1..P4 toxicity templates. `dataset` is `github` or `civil`;
/// the civil variants swap "GitHub discussion" for "comment", and the few-shot
/// documents in P4 are placeholders rather than the original examples.
pub fn builtin_template_body(dataset: &str, prompt: &str) -> Option<&'static str> {
    let body = match (dataset, prompt) {
        ("github", "p1") => include_str!("../fixtures/prompts/github/p1.txt"),
        ("github", "p2") => include_str!("../fixtures/prompts/github/p2.txt"),
        ("github", "p3") => include_str!("../fixtures/prompts/github/p3.txt"),
        ("github", "p4") => include_str!("../fixtures/prompts/github/p4.txt"),
        ("civil", "p1") => include_str!("../fixtures/prompts/civil/p1.txt"),
        ("civil", "p2") => include_str!("../fixtures/prompts/civil/p2.txt"),
        ("civil", "p3") => include_str!("../fixtures/prompts/civil/p3.txt"),
        ("civil", "p4") => include_str!("../fixtures/prompts/civil/p4.txt"),
        _ => return None,
    };
    Some(body)
}
