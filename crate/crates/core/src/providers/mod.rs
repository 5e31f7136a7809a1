//! Provider-agnostic endpoint clients with record/replay.
//!
//! A [`Provider`] turns one rendered prompt into up to `k` raw choices. The
//! [`complete`] entry point layers the replay store on top: each sample index
//! has its own replay key, so a request for `n` samples only reaches the
//! provider for indices the store does not already hold, and replay mode never
//! reaches it at all.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{hash_of, ContentHash};
use crate::datasets::Example;
use crate::prompts::{PromptMode, RenderedPrompt};

mod openai;
mod replay;
mod scripted;
pub mod wire;

pub use openai::{HttpClientConfig, OpenAiClient, RetryBudget, RetryPolicy};
pub use replay::{ReplayMode, ReplayStore};
pub use scripted::ScriptedProvider;

pub const API_KEY_ENV: &str = "LLMREGRESS_API_KEY";
pub const BASE_URL_ENV: &str = "LLMREGRESS_BASE_URL";

pub type EndpointType = PromptMode;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("model `{model}` serves {expected:?} requests but the prompt is {got:?}")]
    EndpointMismatch { model: String, expected: EndpointType, got: EndpointType },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("replay miss for key {key}")]
    ReplayMiss { key: ContentHash },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("provider returned no choices for {missing} outstanding samples")]
    ShortResponse { missing: usize },
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("replay store {path}: {reason}")]
    Store { path: String, reason: String },
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::EndpointMismatch { .. } => "ENDPOINT_MISMATCH",
            ProviderError::Http { .. } | ProviderError::Transport(_) => "HTTP_ERROR",
            ProviderError::RateLimited { .. } => "RATE_LIMITED",
            ProviderError::ReplayMiss { .. } => "REPLAY_MISS",
            ProviderError::Malformed(_) | ProviderError::ShortResponse { .. } => "MALFORMED_RESPONSE",
            ProviderError::InvalidParams(_) => "INVALID_PARAMS",
            ProviderError::Config(_) => "PROVIDER_CONFIG",
            ProviderError::Store { .. } => "REPLAY_STORE",
        }
    }
}

/// A model endpoint. `(provider, model_name)` is its identity; the endpoint
/// type is fixed per model and the snapshot note is descriptive only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub provider: String,
    pub model_name: String,
    pub endpoint_type: EndpointType,
    #[serde(default)]
    pub snapshot_note: String,
}

#[derive(Serialize)]
pub(crate) struct ModelIdentity<'a> {
    provider: &'a str,
    model_name: &'a str,
}

impl ModelRef {
    pub fn new(provider: &str, model_name: &str, endpoint_type: EndpointType) -> Self {
        ModelRef {
            provider: provider.to_string(),
            model_name: model_name.to_string(),
            endpoint_type,
            snapshot_note: String::new(),
        }
    }

    pub(crate) fn identity(&self) -> ModelIdentity<'_> {
        ModelIdentity { provider: &self.provider, model_name: &self.model_name }
    }
}

impl fmt::Display for ModelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.provider, self.model_name)
    }
}

/// The GPT-3.5 family used in the toxicity case study, oldest first.
pub fn openai_catalog() -> Vec<ModelRef> {
    [
        ("text-davinci-002", PromptMode::Completion, "Mar 2022, fine-tuning"),
        ("text-davinci-003", PromptMode::Completion, "Nov 2022, RLHF"),
        ("gpt-3.5-turbo-0301", PromptMode::Chat, "Mar 2023, RLHF"),
        ("gpt-3.5-turbo-0613", PromptMode::Chat, "June 2023, RLHF"),
        ("gpt-3.5-turbo-instruct", PromptMode::Completion, "Sep 2023, RLHF"),
    ]
    .into_iter()
    .map(|(name, ty, note)| ModelRef { snapshot_note: note.to_string(), ..ModelRef::new("openai", name, ty) })
    .collect()
}

pub const DEFAULT_MAX_TOKENS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub n_samples: u32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_sequences: Option<Vec<String>>,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl SamplingParams {
    /// Temperature 0, one sample: the most likely prediction.
    pub fn point() -> Self {
        SamplingParams { temperature: 0.0, n_samples: 1, max_tokens: DEFAULT_MAX_TOKENS, stop_sequences: None }
    }

    /// Temperature 0.7, twenty samples: the label distribution profile.
    pub fn confidence() -> Self {
        SamplingParams { temperature: 0.7, n_samples: 20, max_tokens: DEFAULT_MAX_TOKENS, stop_sequences: None }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ProviderError::InvalidParams(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.n_samples == 0 {
            return Err(ProviderError::InvalidParams("n_samples must be >= 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidParams("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

/// One raw choice as returned by a provider, before index assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub raw_text: String,
    pub finish_reason: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub sample_index: u32,
    pub raw_text: String,
    pub finish_reason: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

impl SampleResponse {
    fn from_choice(sample_index: u32, c: Choice) -> Self {
        SampleResponse {
            sample_index,
            raw_text: c.raw_text,
            finish_reason: c.finish_reason,
            usage: c.usage,
            latency_ms: c.latency_ms,
        }
    }
}

/// What a provider sees for one call. `example` is context for simulated
/// providers; network providers ignore it and it never enters a replay key.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub model: &'a ModelRef,
    pub prompt: &'a RenderedPrompt,
    pub params: &'a SamplingParams,
    pub sample_indices: &'a [u32],
    pub example: Option<&'a Example>,
}

pub trait Provider: Send + Sync {
    /// Returns at most `sample_indices.len()` choices, in index order. Returning
    /// fewer is allowed; the caller asks again for the remainder.
    fn fetch(&self, request: &SampleRequest<'_>) -> Result<Vec<Choice>, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn fetch(&self, request: &SampleRequest<'_>) -> Result<Vec<Choice>, ProviderError> {
        (**self).fetch(request)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn fetch(&self, request: &SampleRequest<'_>) -> Result<Vec<Choice>, ProviderError> {
        (**self).fetch(request)
    }
}

#[derive(Serialize)]
struct ReplayKeyView<'a> {
    model: ModelIdentity<'a>,
    prompt: &'a RenderedPrompt,
    params: &'a SamplingParams,
    sample_index: u32,
}

pub fn replay_key(
    model: &ModelRef,
    prompt: &RenderedPrompt,
    params: &SamplingParams,
    sample_index: u32,
) -> ContentHash {
    hash_of(&ReplayKeyView { model: model.identity(), prompt, params, sample_index })
}

/// Consecutive empty provider answers tolerated before giving up.
const MAX_EMPTY_ROUNDS: usize = 3;

/// Returns exactly `params.n_samples` responses ordered by sample index.
///
/// Indices already in the replay store are served from it (record and replay
/// modes). Missing indices are requested from `provider`, repeatedly if it
/// returns fewer choices than asked, and in record mode each response is
/// persisted before this returns.
pub fn complete(
    model: &ModelRef,
    prompt: &RenderedPrompt,
    params: &SamplingParams,
    replay: &ReplayStore,
    provider: &dyn Provider,
    example: Option<&Example>,
) -> Result<Vec<SampleResponse>, ProviderError> {
    let indices: Vec<u32> = (0..params.n_samples).collect();
    complete_indices(model, prompt, params, &indices, replay, provider, example)
}

/// Like [`complete`] but only for the given sample indices (each `< n_samples`),
/// returned in the order given.
pub fn complete_indices(
    model: &ModelRef,
    prompt: &RenderedPrompt,
    params: &SamplingParams,
    indices: &[u32],
    replay: &ReplayStore,
    provider: &dyn Provider,
    example: Option<&Example>,
) -> Result<Vec<SampleResponse>, ProviderError> {
    if prompt.mode() != model.endpoint_type {
        return Err(ProviderError::EndpointMismatch {
            model: model.model_name.clone(),
            expected: model.endpoint_type,
            got: prompt.mode(),
        });
    }
    params.validate()?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= params.n_samples) {
        return Err(ProviderError::InvalidParams(format!(
            "sample index {bad} out of range for n_samples={}",
            params.n_samples
        )));
    }

    let mut out: Vec<Option<SampleResponse>> = vec![None; indices.len()];
    // (position in `indices`, sample index)
    let mut missing: Vec<(usize, u32)> = Vec::new();
    for (pos, &idx) in indices.iter().enumerate() {
        if replay.mode() == ReplayMode::Passthrough {
            missing.push((pos, idx));
            continue;
        }
        let key = replay_key(model, prompt, params, idx);
        match replay.load(&key)? {
            Some(hit) => out[pos] = Some(SampleResponse::from_choice(idx, hit)),
            None if replay.mode() == ReplayMode::Replay => return Err(ProviderError::ReplayMiss { key }),
            None => missing.push((pos, idx)),
        }
    }

    let mut empty_rounds = 0;
    while !missing.is_empty() {
        let wanted: Vec<u32> = missing.iter().map(|&(_, idx)| idx).collect();
        let request = SampleRequest { model, prompt, params, sample_indices: &wanted, example };
        let choices = provider.fetch(&request)?;
        if choices.is_empty() {
            empty_rounds += 1;
            if empty_rounds >= MAX_EMPTY_ROUNDS {
                return Err(ProviderError::ShortResponse { missing: missing.len() });
            }
            continue;
        }
        empty_rounds = 0;
        let taken = choices.len().min(missing.len());
        for (&(pos, idx), choice) in missing.iter().zip(choices.into_iter().take(taken)) {
            if replay.mode() == ReplayMode::Record {
                let key = replay_key(model, prompt, params, idx);
                let view = ReplayKeyView { model: model.identity(), prompt, params, sample_index: idx };
                replay.store(&key, &view, &choice)?;
            }
            out[pos] = Some(SampleResponse::from_choice(idx, choice));
        }
        missing.drain(..taken);
    }

    Ok(out.into_iter().map(|r| r.expect("every index filled")).collect())
}
