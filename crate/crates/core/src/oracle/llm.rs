//! Exact-match scoring against an OpenAI-compatible chat completions endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PerformanceFn, Score};
use crate::error::{Error, Result};
use crate::text::{detokenize, TokenSeq};

pub const ENV_API_BASE: &str = "MASKPRESS_API_BASE";
pub const ENV_API_KEY: &str = "MASKPRESS_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub max_tokens: u32,
    /// Maximum requests in flight.
    pub concurrency: usize,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// First backoff delay; doubled on every retry.
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            max_tokens: 256,
            concurrency: 8,
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads the base URL and key from the environment.
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| Error::Config(format!("{ENV_API_BASE} is not set")))?;
        let mut cfg = Self::new(base, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question: String,
    pub gold: String,
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\$?\d[\d,]*(?:\.\d+)?").unwrap())
}

/// The final-answer part of a completion: text after the last "answer is"
/// or "####" marker, else the last non-empty line.
pub fn extract_answer(completion: &str) -> &str {
    let lower = completion.to_ascii_lowercase();
    let marker = [("answer is", 9), ("####", 4)]
        .iter()
        .filter_map(|(m, len)| lower.rfind(m).map(|at| at + len))
        .max();
    match marker {
        Some(at) => completion[at..].trim_start_matches([':', ' ']).trim(),
        None => completion.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or(""),
    }
}

/// Canonical decimal form of a numeric string: commas and `$` dropped,
/// integral values without a fractional part. `None` if not a number.
pub fn canonical_number(s: &str) -> Option<String> {
    let cleaned: String = s.chars().filter(|c| *c != ',' && *c != '$').collect();
    let v: f64 = cleaned.parse().ok()?;
    if !v.is_finite() {
        return None;
    }
    if v.fract() == 0.0 && v.abs() < 1e15 {
        Some(format!("{}", v as i64))
    } else {
        Some(format!("{v}"))
    }
}

/// Trim, lowercase, strip trailing punctuation, canonicalize numbers.
pub fn normalize_answer(s: &str) -> String {
    let t = s.trim().to_lowercase();
    let t = t.trim_end_matches(|c: char| c.is_ascii_punctuation() && c != '%').trim();
    canonical_number(t).unwrap_or_else(|| t.to_string())
}

/// Exact match after normalization. Numeric golds compare against the last
/// number in the extracted answer.
pub fn answers_match(completion: &str, gold: &str) -> bool {
    let gold_n = normalize_answer(gold);
    let answer = extract_answer(completion);
    if canonical_number(&gold_n).is_some() {
        let last = number_re().find_iter(answer).last();
        return last.and_then(|m| canonical_number(m.as_str())).is_some_and(|n| n == gold_n);
    }
    normalize_answer(answer) == gold_n
}

fn request_body(cfg: &EndpointConfig, content: &str) -> Value {
    json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": content}],
        "temperature": 0,
        "max_tokens": cfg.max_tokens,
    })
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

fn complete_once(client: &reqwest::blocking::Client, cfg: &EndpointConfig, content: &str) -> Result<String, Attempt> {
    let mut req = client.post(cfg.url()).json(&request_body(cfg, content));
    if let Some(key) = &cfg.api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(Attempt::Retry(format!("HTTP {status}")));
    }
    if !status.is_success() {
        return Err(Attempt::Fatal(Error::Protocol(format!("HTTP {status}"))));
    }
    let body = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
    let v: Value = serde_json::from_str(&body)
        .map_err(|e| Attempt::Fatal(Error::Protocol(format!("response is not JSON: {e}"))))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Attempt::Fatal(Error::Protocol("missing choices[0].message.content".into())))
}

/// One completion with exponential backoff on transport and 5xx/429 failures.
pub fn complete(client: &reqwest::blocking::Client, cfg: &EndpointConfig, content: &str) -> Result<String> {
    let mut delay = cfg.backoff_base;
    let mut retries = 0;
    loop {
        match complete_once(client, cfg, content) {
            Ok(s) => return Ok(s),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(msg)) if retries >= cfg.max_retries => {
                return Err(Error::Remote { retries, message: msg });
            }
            Err(Attempt::Retry(msg)) => {
                log::warn!("request failed ({msg}); retrying in {delay:?}");
                std::thread::sleep(delay);
                delay *= 2;
                retries += 1;
            }
        }
    }
}

fn build_client(cfg: &EndpointConfig) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(cfg.timeout)
        .build()
        .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))
}

/// Asks every question with `prompt_text` as context and scores exact matches.
pub fn llm_exact_match(prompt_text: &str, eval_set: &[EvalItem], cfg: &EndpointConfig) -> Result<Score> {
    if eval_set.is_empty() {
        return Err(Error::Scoring("eval set is empty".into()));
    }
    if cfg.concurrency == 0 {
        return Err(Error::Config("concurrency must be at least 1".into()));
    }
    let client = build_client(cfg)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<bool>>>> = Mutex::new((0..eval_set.len()).map(|_| None).collect());
    let workers = cfg.concurrency.min(eval_set.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = eval_set.get(i) else { break };
                let content = format!("{}\n\n{}", prompt_text.trim_end(), item.question);
                let r = complete(&client, cfg, &content).map(|c| answers_match(&c, &item.gold));
                let failed = r.is_err();
                results.lock().unwrap()[i] = Some(r);
                if failed {
                    // Stop handing out work; the first error is reported.
                    next.store(eval_set.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut detail = Vec::with_capacity(eval_set.len());
    for r in results.into_inner().unwrap() {
        match r {
            Some(Ok(b)) => detail.push(b),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    Score::from_detail(detail)
}

/// Remote exact-match evaluator usable as a search oracle.
#[derive(Debug, Clone)]
pub struct LlmOracle {
    pub endpoint: EndpointConfig,
    pub eval_set: Vec<EvalItem>,
}

impl PerformanceFn for LlmOracle {
    fn evaluate(&self, prompt: &TokenSeq) -> Result<Score> {
        llm_exact_match(&detokenize(prompt), &self.eval_set, &self.endpoint)
    }
}
