use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Choice, Provider, ProviderError, SampleRequest, Usage};

/// Table-driven provider: answers for example `id` at sample index `i` with
/// `responses[id][i % len]`. Used to replay transcripts whose raw outputs are
/// known ahead of time.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    responses: HashMap<String, Vec<String>>,
    calls: AtomicUsize,
    fail_after: Option<usize>,
}

impl ScriptedProvider {
    pub fn new() -> Self {
        ScriptedProvider::default()
    }

    pub fn insert(&mut self, example_id: &str, outputs: Vec<String>) {
        self.responses.insert(example_id.to_string(), outputs);
    }

    pub fn with(mut self, example_id: &str, outputs: &[&str]) -> Self {
        self.insert(example_id, outputs.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Every call after the first `calls` fails with a transport error.
    pub fn failing_after(mut self, calls: usize) -> Self {
        self.fail_after = Some(calls);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Provider for ScriptedProvider {
    fn fetch(&self, request: &SampleRequest<'_>) -> Result<Vec<Choice>, ProviderError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| call >= limit) {
            return Err(ProviderError::Transport("scripted provider interrupted".into()));
        }
        let example = request
            .example
            .ok_or_else(|| ProviderError::Config("scripted provider needs the example context".into()))?;
        let outputs = self
            .responses
            .get(&example.id)
            .filter(|o| !o.is_empty())
            .ok_or_else(|| ProviderError::Config(format!("no scripted output for `{}`", example.id)))?;
        Ok(request
            .sample_indices
            .iter()
            .map(|&i| Choice {
                raw_text: outputs[i as usize % outputs.len()].clone(),
                finish_reason: "stop".into(),
                usage: Usage::default(),
                latency_ms: 0,
            })
            .collect())
    }
}
