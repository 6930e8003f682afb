//! Textual explanations of saliency maps from a vision-language chat model.
//!
//! [`build_prompt`] packs the four sample images into a chat-completion request;
//! [`request_explanation`] sends it through a [`ChatBackend`] with retries.

use std::collections::VecDeque;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "XEDGE_API_KEY";
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 20 * 1024 * 1024;

/// The four views of a sample, in prompt order.
pub const IMAGE_PARTS: [&str; 4] = ["original", "ground_truth", "segmentation", "explanation"];

#[derive(Debug, Error)]
pub enum TextualError {
    #[error("missing {0} image")]
    MissingImage(&'static str),
    #[error("{part} image is {actual:?}, original is {expected:?}")]
    DimensionMismatch { part: &'static str, expected: (u32, u32), actual: (u32, u32) },
    #[error("{part} image is not a decodable PNG: {message}")]
    BadImage { part: &'static str, message: String },
    #[error("category name is empty")]
    EmptyCategory,
    #[error("{part} image is {bytes} bytes, over the {cap}-byte cap")]
    PayloadTooLarge { part: &'static str, bytes: usize, cap: usize },
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("backend failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: TransportError },
    #[error("malformed backend reply: {0}")]
    BadReply(String),
    #[error("empty explanation text")]
    EmptyText,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
}

/// A single failed exchange with the backend.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("timed out")]
    Timeout,
    #[error("connection: {0}")]
    Connection(String),
}

impl TransportError {
    fn is_auth(&self) -> bool {
        matches!(self, TransportError::Status { status: 401 | 403, .. })
    }

    fn is_transient(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            TransportError::Timeout | TransportError::Connection(_) => true,
        }
    }
}

/// PNG bytes for each view. `None` marks a view that has not been produced yet.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleImages {
    pub original: Option<Vec<u8>>,
    pub ground_truth: Option<Vec<u8>>,
    pub segmentation: Option<Vec<u8>>,
    pub explanation: Option<Vec<u8>>,
}

impl SampleImages {
    pub fn complete(original: Vec<u8>, ground_truth: Vec<u8>, segmentation: Vec<u8>, explanation: Vec<u8>) -> Self {
        Self {
            original: Some(original),
            ground_truth: Some(ground_truth),
            segmentation: Some(segmentation),
            explanation: Some(explanation),
        }
    }

    fn parts(&self) -> [(&'static str, Option<&Vec<u8>>); 4] {
        [
            (IMAGE_PARTS[0], self.original.as_ref()),
            (IMAGE_PARTS[1], self.ground_truth.as_ref()),
            (IMAGE_PARTS[2], self.segmentation.as_ref()),
            (IMAGE_PARTS[3], self.explanation.as_ref()),
        ]
    }
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}

fn default_model_name() -> String {
    "gpt-4o".into()
}

fn default_max_image_bytes() -> usize {
    DEFAULT_MAX_IMAGE_BYTES
}

fn default_concurrency() -> usize {
    2
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint_url: String,
    #[serde(default = "default_model_name")]
    pub model_name: String,
    #[serde(default = "default_max_image_bytes")]
    pub max_image_bytes: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TextConfig {
    pub fn load(path: &Path) -> Result<Self, TextualError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextualError::Io(path.to_path_buf(), e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| TextualError::Config(e.to_string()))?;
        if cfg.concurrency == 0 {
            return Err(TextualError::Config("concurrency must be at least 1".into()));
        }
        Ok(cfg)
    }
}

/// Image payload of a request, kept as raw PNG bytes until serialization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePart {
    pub name: &'static str,
    pub png: Vec<u8>,
}

impl ImagePart {
    pub fn data_url(&self) -> String {
        format!("data:image/png;base64,{}", STANDARD.encode(&self.png))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationRequest {
    pub system_text: String,
    pub user_text: String,
    pub images: Vec<ImagePart>,
    pub category: String,
    pub model_name: String,
}

impl ExplanationRequest {
    /// Chat-completion body: a system message and a user message whose content
    /// parts are the instruction text followed by the four images.
    pub fn body(&self) -> Value {
        let mut content = vec![json!({"type": "text", "text": self.user_text})];
        content.extend(
            self.images
                .iter()
                .map(|p| json!({"type": "image_url", "image_url": {"url": p.data_url()}})),
        );
        json!({
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": self.system_text},
                {"role": "user", "content": content},
            ],
        })
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.body()).expect("request serializes")
    }

    /// Hex SHA-256 of [`Self::body_bytes`]; the cache key.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.body_bytes()))
    }
}

/// Role, input layout, step-by-step instruction, where to look, answer format.
pub const SYSTEM_TEXT: &str = "\
You are an XAI expert who explains saliency maps produced for semantic segmentation models.

Input: four images of the same scene, in this order.
1. The original image.
2. The ground-truth image, with the annotated region of the target category highlighted.
3. The segmentation image, with the region the model predicted for the target category highlighted.
4. The explanation map image, a heatmap where warmer colors mark pixels that contributed more to the prediction.

Think step-by-step. First locate the target object in the original image. Then compare the ground-truth and segmentation images and note where they agree and where they differ. Finally read the explanation map.

Describe where the saliency concentrates: which parts of the object receive the most weight, which receive little, and whether background regions outside the object attract attention. Relate these regions to the differences between prediction and ground truth.

Answer format: start with a line `MOST focused: <region>`, then a line `LEAST focused: <region>`, then at most five short sentences of explanation in plain language. Do not speculate about model internals and do not repeat these instructions.";

fn png_dimensions(part: &'static str, bytes: &[u8]) -> Result<(u32, u32), TextualError> {
    image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| TextualError::BadImage { part, message: e.to_string() })
}

/// Assembles the request for one sample. Pure: the same inputs give the same bytes.
pub fn build_prompt(images: &SampleImages, category: &str, cfg: &TextConfig) -> Result<ExplanationRequest, TextualError> {
    let category = category.trim();
    if category.is_empty() {
        return Err(TextualError::EmptyCategory);
    }
    let mut parts = Vec::with_capacity(4);
    let mut expected = None;
    for (name, bytes) in images.parts() {
        let bytes = bytes.ok_or(TextualError::MissingImage(name))?;
        let dims = png_dimensions(name, bytes)?;
        match expected {
            None => expected = Some(dims),
            Some(e) if e != dims => return Err(TextualError::DimensionMismatch { part: name, expected: e, actual: dims }),
            _ => {}
        }
        parts.push(ImagePart { name, png: bytes.clone() });
    }
    Ok(ExplanationRequest {
        system_text: SYSTEM_TEXT.to_string(),
        user_text: format!(
            "Target category: {category}. Explain the explanation map for this category using the four images below."
        ),
        images: parts,
        category: category.to_string(),
        model_name: cfg.model_name.clone(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub total_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvlmResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
    pub latency_ms: u64,
    pub attempts: u32,
    #[serde(default)]
    pub cached: bool,
}

/// Transport for chat-completion bodies. Returns the raw reply body.
pub trait ChatBackend: Sync {
    fn send(&self, body: &[u8]) -> Result<Vec<u8>, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay: Duration::ZERO }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Value,
}

fn parse_reply(bytes: &[u8]) -> Result<(String, Usage), TextualError> {
    let reply: ChatReply = serde_json::from_slice(bytes).map_err(|e| TextualError::BadReply(e.to_string()))?;
    let choice = reply.choices.into_iter().next().ok_or_else(|| TextualError::BadReply("no choices".into()))?;
    let text = match choice.message.content {
        Value::String(s) => s,
        // content-part arrays: concatenate the text parts
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        other => return Err(TextualError::BadReply(format!("unexpected content {other}"))),
    };
    if text.trim().is_empty() {
        return Err(TextualError::EmptyText);
    }
    Ok((text, reply.usage.unwrap_or_default()))
}

/// Checks every image against `max_image_bytes` before anything is sent.
pub fn check_payload(req: &ExplanationRequest, max_image_bytes: usize) -> Result<(), TextualError> {
    for p in &req.images {
        if p.png.len() > max_image_bytes {
            return Err(TextualError::PayloadTooLarge { part: p.name, bytes: p.png.len(), cap: max_image_bytes });
        }
    }
    Ok(())
}

/// Sends `req`, retrying transient failures with exponential backoff.
/// Authentication failures are returned immediately.
pub fn request_explanation(
    req: &ExplanationRequest,
    backend: &dyn ChatBackend,
    max_image_bytes: usize,
    policy: RetryPolicy,
) -> Result<LvlmResponse, TextualError> {
    check_payload(req, max_image_bytes)?;
    let body = req.body_bytes();
    let start = Instant::now();
    let mut attempt = 0;
    loop {
        attempt += 1;
        match backend.send(&body) {
            Ok(reply) => {
                let (text, usage) = parse_reply(&reply)?;
                return Ok(LvlmResponse {
                    text,
                    usage,
                    latency_ms: start.elapsed().as_millis() as u64,
                    attempts: attempt,
                    cached: false,
                });
            }
            Err(e) if e.is_auth() => {
                let TransportError::Status { status, .. } = e else { unreachable!() };
                return Err(TextualError::Auth(status));
            }
            Err(e) if e.is_transient() && attempt < policy.max_attempts => std::thread::sleep(policy.delay(attempt)),
            Err(last) => return Err(TextualError::Transport { attempts: attempt, last }),
        }
    }
}

/// Response cache keyed by request digest, one JSON file per entry.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<LvlmResponse> {
        let bytes = std::fs::read(self.path(digest)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// Stores `resp` with its latency zeroed so entries depend only on the reply.
    pub fn put(&self, digest: &str, resp: &LvlmResponse) -> Result<(), TextualError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| TextualError::Io(self.dir.clone(), e))?;
        let path = self.path(digest);
        let tmp = path.with_extension("tmp");
        let stored = LvlmResponse { latency_ms: 0, cached: false, ..resp.clone() };
        let bytes = serde_json::to_vec_pretty(&stored).expect("response serializes");
        std::fs::write(&tmp, bytes).map_err(|e| TextualError::Io(tmp.clone(), e))?;
        std::fs::rename(&tmp, &path).map_err(|e| TextualError::Io(path, e))
    }
}

/// [`request_explanation`] behind a cache lookup.
pub fn request_cached(
    req: &ExplanationRequest,
    backend: &dyn ChatBackend,
    cfg: &TextConfig,
    policy: RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Result<LvlmResponse, TextualError> {
    let digest = req.digest();
    if let Some(hit) = cache.and_then(|c| c.get(&digest)) {
        return Ok(LvlmResponse { cached: true, ..hit });
    }
    let resp = request_explanation(req, backend, cfg.max_image_bytes, policy)?;
    if let Some(c) = cache {
        c.put(&digest, &resp)?;
    }
    Ok(resp)
}

/// Runs many requests with at most `cfg.concurrency` in flight. Results keep input order.
pub fn request_many(
    reqs: &[ExplanationRequest],
    backend: &dyn ChatBackend,
    cfg: &TextConfig,
    policy: RetryPolicy,
    cache: Option<&ResponseCache>,
) -> Vec<Result<LvlmResponse, TextualError>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| reqs.par_iter().map(|r| request_cached(r, backend, cfg, policy, cache)).collect())
}

/// Chat-completion endpoint over HTTPS with a bearer key.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: &TextConfig, api_key: Option<String>) -> Result<Self, TextualError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| TextualError::Config(e.to_string()))?;
        Ok(Self { endpoint: cfg.endpoint_url.clone(), api_key, client })
    }

    /// Reads the key from `XEDGE_API_KEY`.
    pub fn from_env(cfg: &TextConfig) -> Result<Self, TextualError> {
        Self::new(cfg, std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connection(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().map_err(|e| TransportError::Connection(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(TransportError::Status { status, body: String::from_utf8_lossy(&bytes).into_owned() });
        }
        Ok(bytes.to_vec())
    }
}

/// Offline backend. Replays scripted outcomes in order, then answers with the
/// fallback text forever.
pub struct MockBackend {
    script: Mutex<VecDeque<Result<String, TransportError>>>,
    fallback: String,
    calls: Mutex<Vec<Vec<u8>>>,
}

impl MockBackend {
    pub fn echo(text: impl Into<String>) -> Self {
        Self::scripted(Vec::new(), text)
    }

    pub fn scripted(script: Vec<Result<String, TransportError>>, fallback: impl Into<String>) -> Self {
        Self { script: Mutex::new(script.into()), fallback: fallback.into(), calls: Mutex::new(Vec::new()) }
    }

    /// Bodies received so far.
    pub fn calls(&self) -> Vec<Vec<u8>> {
        self.calls.lock().expect("mock lock").clone()
    }

    pub fn reply_body(text: &str) -> Vec<u8> {
        serde_json::to_vec(&json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 0, "completion_tokens": text.split_whitespace().count(), "total_tokens": text.split_whitespace().count()},
        }))
        .expect("reply serializes")
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.calls.lock().expect("mock lock").push(body.to_vec());
        let next = self.script.lock().expect("mock lock").pop_front();
        match next {
            Some(Ok(text)) => Ok(Self::reply_body(&text)),
            Some(Err(e)) => Err(e),
            None => Ok(Self::reply_body(&self.fallback)),
        }
    }
}
