//! OpenAI-compatible request and response bodies.
//!
//! Requests are serialized as canonical JSON (sorted keys, compact), so the
//! same logical request always produces the same bytes. `stop` is omitted when
//! no stop sequences are configured.

use serde::{Deserialize, Serialize};

use super::{Choice, ModelRef, ProviderError, SamplingParams, Usage};
use crate::canonical::canonical_json;
use crate::prompts::{ChatMessage, RenderedPrompt};

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

/// Path relative to the base URL for the prompt's endpoint.
pub fn endpoint_path(prompt: &RenderedPrompt) -> &'static str {
    match prompt {
        RenderedPrompt::Completion { .. } => "/completions",
        RenderedPrompt::Chat { .. } => "/chat/completions",
    }
}

/// Canonical request body asking for `n` choices.
pub fn request_body(model: &ModelRef, prompt: &RenderedPrompt, params: &SamplingParams, n: u32) -> Vec<u8> {
    let stop = params.stop_sequences.as_deref().filter(|s| !s.is_empty());
    match prompt {
        RenderedPrompt::Completion { text } => canonical_json(&CompletionBody {
            model: &model.model_name,
            prompt: text,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n,
            stop,
        }),
        RenderedPrompt::Chat { messages } => canonical_json(&ChatBody {
            model: &model.model_name,
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            n,
            stop,
        }),
    }
}

#[derive(Deserialize)]
struct ResponseBody {
    #[serde(default)]
    choices: Vec<RawChoice>,
    #[serde(default)]
    usage: Option<RawUsage>,
}

#[derive(Deserialize)]
struct RawChoice {
    #[serde(default)]
    index: Option<u32>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<RawMessage>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct RawMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct RawUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

/// Parses a completion or chat response. Choices are ordered by their `index`
/// field when present. Request-level usage is attached to every choice with
/// completion tokens split evenly.
pub fn parse_response(body: &[u8], latency_ms: u64) -> Result<Vec<Choice>, ProviderError> {
    let parsed: ResponseBody = serde_json::from_slice(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    let mut raw = parsed.choices;
    raw.sort_by_key(|c| c.index.unwrap_or(u32::MAX));
    let k = raw.len().max(1) as u32;
    let usage =
        parsed.usage.map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens / k });
    raw.into_iter()
        .map(|c| {
            let text = c
                .text
                .or_else(|| c.message.and_then(|m| m.content))
                .ok_or_else(|| ProviderError::Malformed("choice has neither `text` nor `message.content`".into()))?;
            Ok(Choice {
                raw_text: text,
                finish_reason: c.finish_reason.unwrap_or_default(),
                usage: usage.unwrap_or_default(),
                latency_ms,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{PromptMode, Role};

    #[test]
    fn completion_body_is_sorted_and_compact() {
        let m = ModelRef::new("openai", "text-davinci-003", PromptMode::Completion);
        let p = RenderedPrompt::Completion { text: "hi".into() };
        let body = request_body(&m, &p, &SamplingParams::point(), 1);
        assert_eq!(
            String::from_utf8(body).unwrap(),
            r#"{"max_tokens":8,"model":"text-davinci-003","n":1,"prompt":"hi","temperature":0.0}"#
        );
    }

    #[test]
    fn stop_sequences_serialized_when_present() {
        let m = ModelRef::new("openai", "x", PromptMode::Chat);
        let p = RenderedPrompt::Chat { messages: vec![ChatMessage { role: Role::User, content: "q".into() }] };
        let mut params = SamplingParams::point();
        params.stop_sequences = Some(vec!["\n".into()]);
        let body = String::from_utf8(request_body(&m, &p, &params, 1)).unwrap();
        assert!(body.contains(r#""stop":["\n"]"#));
        assert!(body.contains(r#""messages":[{"content":"q","role":"user"}]"#));
    }

    #[test]
    fn parses_both_shapes_and_tolerates_extra_fields() {
        let completion = br#"{"id":"x","object":"text_completion","choices":[{"index":1,"text":" b","finish_reason":"length","logprobs":null},{"index":0,"text":" a","finish_reason":"stop"}],"usage":{"prompt_tokens":10,"completion_tokens":4,"total_tokens":14}}"#;
        let choices = parse_response(completion, 7).unwrap();
        assert_eq!(choices[0].raw_text, " a");
        assert_eq!(choices[1].finish_reason, "length");
        assert_eq!(choices[0].usage, Usage { prompt_tokens: 10, completion_tokens: 2 });

        let chat =
            br#"{"choices":[{"index":0,"message":{"role":"assistant","content":"toxic"},"finish_reason":"stop"}]}"#;
        assert_eq!(parse_response(chat, 0).unwrap()[0].raw_text, "toxic");
        assert!(parse_response(b"not json", 0).is_err());
        assert!(parse_response(br#"{"choices":[{"index":0}]}"#, 0).is_err());
    }
}
