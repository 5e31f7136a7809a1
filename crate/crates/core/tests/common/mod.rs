#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use llmregress::canonical::Label;
use llmregress::datasets::{load_dataset, Dataset, Example};
use llmregress::prompts::{builtin_template_body, PromptMode, PromptTemplate};
use llmregress::providers::{ModelRef, ReplayStore, SamplingParams, ScriptedProvider};
use llmregress::runner::{RunConfig, RunContext, RunRecord, RunStore};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn dataset(name: &str) -> Dataset {
    load_dataset(&fixture(&format!("datasets/{name}.jsonl"))).expect("fixture dataset loads")
}

pub fn template(dataset: &str, prompt: &str) -> PromptTemplate {
    PromptTemplate::new(prompt, 1, PromptMode::Completion, builtin_template_body(dataset, prompt).unwrap())
}

pub fn model(name: &str) -> ModelRef {
    ModelRef::new("openai", name, PromptMode::Completion)
}

pub fn other_label(ds: &Dataset, label: &Label) -> Label {
    ds.label_set().iter().find(|l| *l != label).unwrap().clone()
}

/// Raw model text for `label`, in one of a few phrasings a completion model produces.
pub fn phrase(label: &Label, variant: usize) -> String {
    match variant % 4 {
        0 => label.as_str().to_string(),
        1 => format!(" {}.", capitalize(label.as_str())),
        2 => format!("Label: {}", label.as_str()),
        _ => format!("{}\n", label.as_str().to_uppercase()),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// One output per example: the gold label where `correct(i, ex)` holds, the other label elsewhere.
pub fn point_script(ds: &Dataset, correct: impl Fn(usize, &Example) -> bool) -> ScriptedProvider {
    let mut p = ScriptedProvider::new();
    for (i, ex) in ds.examples().iter().enumerate() {
        let label = if correct(i, ex) { ex.gold.clone() } else { other_label(ds, &ex.gold) };
        p.insert(&ex.id, vec![phrase(&label, i)]);
    }
    p
}

/// Twenty outputs per example, `minority(i)` of them the non-gold label.
pub fn sampling_script(ds: &Dataset, minority: impl Fn(usize) -> usize) -> ScriptedProvider {
    let mut p = ScriptedProvider::new();
    for (i, ex) in ds.examples().iter().enumerate() {
        let k = minority(i);
        let other = other_label(ds, &ex.gold);
        let outs = (0..20).map(|s| phrase(if s < 20 - k { &ex.gold } else { &other }, s)).collect();
        p.insert(&ex.id, outs);
    }
    p
}

/// Executes a run into `store` without a replay archive.
pub fn store_run(
    store: &RunStore,
    ds: &Dataset,
    template: &PromptTemplate,
    model_name: &str,
    params: SamplingParams,
    provider: &ScriptedProvider,
) -> RunRecord {
    let replay = ReplayStore::passthrough();
    let ctx = RunContext::new(provider, &replay);
    let config = RunConfig::new(model(model_name), template, ds, params);
    store.execute_run(&config, ds, template, &ctx).expect("scripted run completes")
}

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> CliOutput {
    let out = Command::new(env!("CARGO_BIN_EXE_llmregress")).args(args).output().expect("binary runs");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Exact binomial tail sum C(n, 0..=k) / 2^n as an integer ratio.
pub fn binomial_lower_half(k: u64, n: u64) -> f64 {
    let mut c: u128 = 1;
    let mut sum: u128 = 0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as u128 / i as u128;
        }
        sum += c;
    }
    sum as f64 / (1u128 << n) as f64
}

/// A local OpenAI-compatible server. `respond` gets the 0-based request
/// number and the parsed request body, and returns status and response body.
pub struct Stub {
    pub url: String,
    pub hits: std::sync::Arc<std::sync::atomic::AtomicUsize>,
    server: std::sync::Arc<tiny_http::Server>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Stub {
    pub fn hits(&self) -> usize {
        self.hits.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn stub<F>(respond: F) -> Stub
where
    F: Fn(usize, &serde_json::Value) -> (u16, String) + Send + 'static,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind stub"));
    let url = format!("http://{}/v1", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let (srv, counter) = (server.clone(), hits.clone());
    let thread = std::thread::spawn(move || {
        for mut req in srv.incoming_requests() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let parsed: serde_json::Value = serde_json::from_str(&body).unwrap_or(serde_json::Value::Null);
            let (status, text) = respond(n, &parsed);
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
            let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status).with_header(header));
        }
    });
    Stub { url, hits, server, thread: Some(thread) }
}

/// A deterministic completion response: "toxic" when the prompt's digits sum
/// to an even number, "non-toxic" otherwise, `n` choices.
pub fn completion_response(request: &serde_json::Value) -> String {
    let prompt = request["prompt"].as_str().unwrap_or("");
    let digits: u32 = prompt.chars().filter_map(|c| c.to_digit(10)).sum();
    let label = if digits % 2 == 0 { "toxic" } else { "non-toxic" };
    let n = request["n"].as_u64().unwrap_or(1);
    let choices: Vec<serde_json::Value> =
        (0..n).map(|i| serde_json::json!({"index": i, "text": format!(" {label}"), "finish_reason": "stop"})).collect();
    serde_json::json!({"choices": choices, "usage": {"prompt_tokens": 40, "completion_tokens": n * 2}}).to_string()
}

/// Prompt-swap pair on the civil fixture: prompt P3 at 733/1000 correct against
/// prompt P4 at 820/1000 correct, same model.
pub fn prompt_swap_pair(store: &RunStore) -> (RunRecord, RunRecord) {
    let ds = dataset("civil");
    let a = point_script(&ds, |i, _| (i * 7) % 1000 < 733);
    let b = point_script(&ds, |i, _| (i * 13) % 1000 < 820);
    let m = "gpt-3.5-turbo-instruct";
    (
        store_run(store, &ds, &template("civil", "p3"), m, SamplingParams::point(), &a),
        store_run(store, &ds, &template("civil", "p4"), m, SamplingParams::point(), &b),
    )
}

/// Entropy runs on the civil fixture: a point pair with 16 regressed, 93
/// improved and 891 unflipped examples, and a 20-sample run whose minority
/// counts put the group mean entropies at 0.251 / 0.296 / 0.137.
pub fn entropy_runs(store: &RunStore) -> (RunRecord, RunRecord, RunRecord) {
    let ds = dataset("civil");
    let rank = |i: usize| (i * 7) % 1000;
    let base_ok = |i: usize| rank(i) < 16 || (109..954).contains(&rank(i));
    let cand_ok = |i: usize| (16..954).contains(&rank(i));
    let minority = |i: usize| match rank(i) {
        r @ 0..16 => [0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 6, 6, 6][r],
        r @ 16..109 => match r - 16 {
            o if o < 47 => 0,
            o if o < 49 => 2,
            _ => 6,
        },
        r => match r - 109 {
            o if o < 306 => 0,
            o if o < 879 => 1,
            _ => 10,
        },
    };
    let t = template("civil", "p1");
    (
        store_run(store, &ds, &t, "text-davinci-002", SamplingParams::point(), &point_script(&ds, |i, _| base_ok(i))),
        store_run(store, &ds, &t, "text-davinci-003", SamplingParams::point(), &point_script(&ds, |i, _| cand_ok(i))),
        store_run(store, &ds, &t, "text-davinci-002", SamplingParams::confidence(), &sampling_script(&ds, minority)),
    )
}

/// Slice regression pair on the github fixture: the first 27 toxic discussions and the
/// first 3 non-toxic ones regress; 9, 9 and 18 of the 27 are politics, code
/// and severe.
pub fn slice_regression_pair(store: &RunStore) -> (RunRecord, RunRecord) {
    let ds = dataset("github");
    let toxic = Label::new("toxic").unwrap();
    let mut order = std::collections::HashMap::new();
    let (mut nt, mut nn) = (0, 0);
    for ex in ds.examples() {
        let k = if ex.gold == toxic { &mut nt } else { &mut nn };
        order.insert(ex.id.clone(), *k);
        *k += 1;
    }
    let pos = |ex: &Example| (ex.gold == toxic, order[&ex.id]);
    let base = point_script(&ds, |_, ex| match pos(ex) {
        (true, j) => j < 60,
        (false, m) => !(10..15).contains(&m),
    });
    let cand = point_script(&ds, |_, ex| match pos(ex) {
        (true, j) => (27..60).contains(&j),
        (false, m) => m >= 3,
    });
    let t = template("github", "p3");
    (
        store_run(store, &ds, &t, "text-davinci-003", SamplingParams::point(), &base),
        store_run(store, &ds, &t, "gpt-3.5-turbo-instruct", SamplingParams::point(), &cand),
    )
}
