//! Client for an external background-generation service.
//!
//! Wire contract: `POST <endpoint>/generate` with a JSON body
//!
//! ```json
//! {"prompt": "...", "image": "<base64 RGBA PNG>", "width": 224, "height": 224,
//!  "seed": 42, "steps": 30, "guidance": 7.0, "model": "sdxl"}
//! ```
//!
//! answered by `{"image": "<base64 RGB PNG>", "meta": {...}}`. The API key, if
//! any, travels as `Authorization: Bearer <key>`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio;
use crate::imgops::{BinaryMask, Image, ImageError};
use crate::scenarios::make_transparent;

pub const ENV_ENDPOINT: &str = "GEN_ENDPOINT";
pub const ENV_API_KEY: &str = "GEN_API_KEY";

// ---------------------------------------------------------------------------
// Prompts

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub class_label: String,
    /// Text with `{class}` placeholders.
    pub template: String,
    #[serde(default)]
    pub style_keywords: Vec<String>,
}

impl PromptTemplate {
    pub fn new(class_label: &str, template: &str) -> Self {
        Self {
            class_label: class_label.to_string(),
            template: template.to_string(),
            style_keywords: Vec::new(),
        }
    }

    pub fn render(&self, class_label: &str) -> Result<String, PromptError> {
        if self.template.trim().is_empty() {
            return Err(PromptError::EmptyTemplate(class_label.to_string()));
        }
        let mut prompt = self.template.replace("{class}", class_label);
        if !self.style_keywords.is_empty() {
            prompt.push(' ');
            prompt.push_str(&self.style_keywords.join(", "));
        }
        Ok(prompt)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("empty prompt template for class {0:?}")]
    EmptyTemplate(String),
    #[error("no prompt template for class {0:?} and no default template")]
    UnknownClass(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRegistry {
    #[serde(default)]
    pub templates: BTreeMap<String, PromptTemplate>,
    #[serde(default)]
    pub default: Option<PromptTemplate>,
}

impl PromptRegistry {
    /// Prompts for the twelve reference classes, plus a generic default.
    pub fn reference() -> Self {
        const PROMPTS: [(&str, &str); 12] = [
            ("lizard", "Generate high-definition pictures like those in the National Geographic magazine, keep the background unchanged."),
            ("airship", "Generate a realistic blue sky, and clouds background and please do not change the foreground {class} object."),
            ("crayfish", "Generate high resolution images in sea water."),
            ("dog", "Generate a picture with a foreground and the green grass in the background, similar to the official HD picture released by the state."),
            ("fox", "Generate high-resolution pictures like {class} in the lawn, National Geographic,  keep the background and foreground more simple and real."),
            ("anemone fish", "Generate a simple image more realistic in the style of ocean magazine."),
            ("cash machine", "Generate high-resolution pictures like those in National Financial Magazine, and keep the background and foreground consistent and the environment more real!"),
            ("car wheel", "Generate an image with the car in the background and similar to the HD image published by the state."),
            ("cello", "Please generate high-resolution pictures like those in the National Music Magazine and keep the background unchanged."),
            ("ice cream", "Generate high-resolution pictures in the style of those in National Food Magazine, and keep the background and foreground consistent and the environment more real!"),
            ("green lizard", "Generate high-definition pictures like those in the National Geographic magazine, keep the background unchanged."),
            ("whale", "Generate high-resolution pictures, such as National Marine Magazine's oceans and whales, to keep the background real."),
        ];
        let templates = PROMPTS
            .iter()
            .map(|(class, text)| (class.to_string(), PromptTemplate::new(class, text)))
            .collect();
        Self {
            templates,
            default: Some(Self::generic_default()),
        }
    }

    pub fn generic_default() -> PromptTemplate {
        PromptTemplate {
            class_label: String::new(),
            template: "Generate a high-resolution picture with a realistic environment around the {class}, and do not change the foreground {class} object.".to_string(),
            style_keywords: vec!["National Geographic Magazine".to_string()],
        }
    }
}

/// Renders the registered template for `class_label`, falling back to the default.
pub fn build_prompt(class_label: &str, registry: &PromptRegistry) -> Result<String, PromptError> {
    registry
        .templates
        .get(class_label)
        .or(registry.default.as_ref())
        .ok_or_else(|| PromptError::UnknownClass(class_label.to_string()))?
        .render(class_label)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Base URL; `/generate` is appended. Falls back to `GEN_ENDPOINT`.
    pub endpoint: Option<String>,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub model: String,
    pub steps: u32,
    pub guidance: f64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
    /// Deterministic local stub instead of network calls.
    pub offline: bool,
    pub area_threshold: f64,
    pub mad_threshold: f64,
    pub prompts: BTreeMap<String, PromptTemplate>,
    pub default_prompt: Option<PromptTemplate>,
}

impl Default for GenConfig {
    fn default() -> Self {
        let thresholds = FidelityThresholds::default();
        Self {
            endpoint: None,
            api_key: None,
            model: "stable-diffusion-xl".to_string(),
            steps: 30,
            guidance: 7.0,
            max_attempts: 4,
            backoff_ms: 500,
            max_backoff_ms: 8_000,
            requests_per_minute: 30,
            timeout_secs: 120,
            offline: false,
            area_threshold: thresholds.area_threshold,
            mad_threshold: thresholds.mad_threshold,
            prompts: BTreeMap::new(),
            default_prompt: None,
        }
    }
}

impl GenConfig {
    pub fn load(path: &Path) -> Result<Self, GenError> {
        let text = std::fs::read_to_string(path).map_err(|e| GenError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| GenError::Config(format!("{}: {e}", path.display())))
    }

    /// Fills the endpoint and API key from `GEN_ENDPOINT` / `GEN_API_KEY`.
    pub fn with_env(mut self) -> Self {
        if self.endpoint.is_none() {
            self.endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty());
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        }
        self
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if !self.offline && self.endpoint.is_none() {
            return Err(GenError::Config(format!(
                "no generation endpoint: set {ENV_ENDPOINT} or `endpoint`, or enable `offline`"
            )));
        }
        if self.max_attempts == 0 {
            return Err(GenError::Config("max_attempts must be >= 1".into()));
        }
        if self.requests_per_minute == 0 {
            return Err(GenError::Config("requests_per_minute must be >= 1".into()));
        }
        Ok(())
    }

    pub fn thresholds(&self) -> FidelityThresholds {
        FidelityThresholds {
            area_threshold: self.area_threshold,
            mad_threshold: self.mad_threshold,
        }
    }

    /// Reference prompts overlaid with any configured templates.
    pub fn prompt_registry(&self) -> PromptRegistry {
        let mut reg = PromptRegistry::reference();
        for (class, t) in &self.prompts {
            let mut t = t.clone();
            t.class_label = class.clone();
            reg.templates.insert(class.clone(), t);
        }
        if let Some(d) = &self.default_prompt {
            reg.default = Some(d.clone());
        }
        reg
    }
}

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("quota exceeded (HTTP {status})")]
    QuotaExceeded { status: u16 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

// ---------------------------------------------------------------------------
// Transport

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Connection-level failure; always treated as transient.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &[u8]) -> Result<HttpReply, TransportError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self { agent: config.into() }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &[u8]) -> Result<HttpReply, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(256 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| TransportError(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

// ---------------------------------------------------------------------------
// Clock and rate limiting

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only advances when slept on. Records every sleep.
#[derive(Default)]
pub struct VirtualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl VirtualClock {
    pub fn advance(&self, d: Duration) {
        self.state.lock().unwrap().0 += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }

    fn sleep(&self, d: Duration) {
        let mut s = self.state.lock().unwrap();
        s.0 += d;
        s.1.push(d);
    }
}

const WINDOW: Duration = Duration::from_secs(60);

/// Sliding-window limiter: at most `cap` permits in any 60 s window.
pub struct RateLimiter {
    cap: usize,
    issued: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        Self {
            cap: per_minute.max(1) as usize,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks on `clock` until a permit is free, then records it.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let mut issued = self.issued.lock().unwrap();
        loop {
            let now = clock.now();
            while issued.front().is_some_and(|&t| now >= t + WINDOW) {
                issued.pop_front();
            }
            if issued.len() < self.cap {
                issued.push_back(now);
                return now;
            }
            let wait = *issued.front().expect("window is full") + WINDOW - now;
            clock.sleep(wait);
        }
    }
}

// ---------------------------------------------------------------------------
// Client

#[derive(Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    image: String,
    width: usize,
    height: usize,
    seed: u64,
    steps: u32,
    guidance: f64,
    model: &'a str,
}

#[derive(Deserialize)]
struct GenerateReply {
    image: String,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// RGB at the request's dimensions.
    pub image: Image,
    pub attempts: u32,
    pub meta: serde_json::Value,
}

enum Attempt {
    Done(Generated),
    Retry(String, Option<u16>),
    Fail(GenError),
}

pub struct GenClient {
    config: GenConfig,
    transport: Option<Box<dyn Transport>>,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
}

impl GenClient {
    /// Builds a client over real HTTP (or the offline stub when configured).
    pub fn new(config: GenConfig) -> Result<Self, GenError> {
        config.validate()?;
        let transport: Option<Box<dyn Transport>> = if config.offline {
            None
        } else {
            Some(Box::new(HttpTransport::new(Duration::from_secs(config.timeout_secs))))
        };
        Ok(Self::with_parts(config, transport, Arc::new(SystemClock::default())))
    }

    pub fn with_parts(config: GenConfig, transport: Option<Box<dyn Transport>>, clock: Arc<dyn Clock>) -> Self {
        let limiter = RateLimiter::new(config.requests_per_minute);
        Self {
            config,
            transport,
            clock,
            limiter,
        }
    }

    pub fn config(&self) -> &GenConfig {
        &self.config
    }

    fn url(&self) -> String {
        let base = self.config.endpoint.as_deref().unwrap_or_default().trim_end_matches('/');
        format!("{base}/generate")
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_ms
            .saturating_mul(1u64 << (attempt - 1).min(20))
            .min(self.config.max_backoff_ms);
        Duration::from_millis(ms)
    }

    /// Sends one RGBA foreground and prompt; returns an RGB background image
    /// at the source dimensions.
    pub fn request_background(&self, transparent: &Image, prompt: &str, seed: u64) -> Result<Generated, GenError> {
        if transparent.channels() != 4 {
            return Err(GenError::Image(ImageError::Channels(transparent.channels())));
        }
        let Some(transport) = &self.transport else {
            return Ok(Generated {
                image: offline_stub(transparent, seed),
                attempts: 1,
                meta: serde_json::json!({ "offline": true }),
            });
        };
        let png = imageio::encode_png(transparent).map_err(|e| GenError::Malformed(format!("encode request: {e}")))?;
        let body = GenerateBody {
            prompt,
            image: BASE64.encode(png),
            width: transparent.width(),
            height: transparent.height(),
            seed,
            steps: self.config.steps,
            guidance: self.config.guidance,
            model: &self.config.model,
        };
        let body = serde_json::to_vec(&body).expect("request body serializes");
        let url = self.url();

        let max = self.config.max_attempts;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.acquire(self.clock.as_ref());
            let outcome = match transport.post_json(&url, self.config.api_key.as_deref(), &body) {
                Err(e) => Attempt::Retry(format!("transport: {e}"), None),
                Ok(reply) => self.classify(reply, transparent, attempt),
            };
            match outcome {
                Attempt::Done(g) => return Ok(g),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(reason, status) => {
                    log::warn!("generation attempt={attempt} max={max} transient={reason:?}");
                    if attempt >= max {
                        return Err(match status {
                            Some(429) => GenError::QuotaExceeded { status: 429 },
                            _ => GenError::RetriesExhausted {
                                attempts: attempt,
                                last: reason,
                            },
                        });
                    }
                    self.clock.sleep(self.backoff(attempt));
                }
            }
        }
    }

    fn classify(&self, reply: HttpReply, source: &Image, attempt: u32) -> Attempt {
        match reply.status {
            200..=299 => match decode_reply(&reply.body, source) {
                Ok((image, meta)) => Attempt::Done(Generated {
                    image,
                    attempts: attempt,
                    meta,
                }),
                Err(e) => Attempt::Fail(e),
            },
            401 | 403 => Attempt::Fail(GenError::Auth { status: reply.status }),
            402 => Attempt::Fail(GenError::QuotaExceeded { status: reply.status }),
            408 | 425 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {}", reply.status), Some(reply.status)),
            status => Attempt::Fail(GenError::Rejected {
                status,
                body: String::from_utf8_lossy(&reply.body).chars().take(200).collect(),
            }),
        }
    }
}

fn decode_reply(body: &[u8], source: &Image) -> Result<(Image, serde_json::Value), GenError> {
    let reply: GenerateReply =
        serde_json::from_slice(body).map_err(|e| GenError::Malformed(format!("json: {e}")))?;
    let bytes = BASE64
        .decode(reply.image.trim())
        .map_err(|e| GenError::Malformed(format!("base64: {e}")))?;
    let image = imageio::decode_rgb(&bytes).map_err(|e| GenError::Malformed(format!("image: {e}")))?;
    let image = imageio::resize_exact(&image, source.width(), source.height());
    Ok((image, reply.meta))
}

/// Deterministic stand-in for a generated background: a seeded two-tone
/// gradient behind the opaque foreground pixels.
pub fn offline_stub(transparent: &Image, seed: u64) -> Image {
    let (w, h) = (transparent.width(), transparent.height());
    let b = seed.to_le_bytes();
    let (c0, c1) = ([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
    Image::from_fn(w, h, |x, y| {
        let p = transparent.get(x, y);
        if p.len() == 4 && p[3] == 255 {
            return [p[0], p[1], p[2]];
        }
        let t = if w + h > 2 { (x + y) as f64 / (w + h - 2) as f64 } else { 0.0 };
        [0, 1, 2].map(|c| (f64::from(c0[c]) * (1.0 - t) + f64::from(c1[c]) * t).round() as u8)
    })
}

// ---------------------------------------------------------------------------
// Fidelity filter

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityThresholds {
    /// Minimum foreground share of the frame.
    pub area_threshold: f64,
    /// Maximum mean absolute foreground difference, in 8-bit levels.
    pub mad_threshold: f64,
}

impl Default for FidelityThresholds {
    fn default() -> Self {
        Self {
            area_threshold: 0.05,
            mad_threshold: 8.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FidelityVerdict {
    pub accept: bool,
    pub fg_mad: f64,
    pub fg_area_ratio: f64,
}

impl fmt::Display for FidelityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} fg_mad={:.3} fg_area_ratio={:.4}",
            if self.accept { "accepted" } else { "rejected" },
            self.fg_mad,
            self.fg_area_ratio
        )
    }
}

/// Compares the generated frame with the source over the foreground.
pub fn fidelity_filter(
    generated: &Image,
    source: &Image,
    mask: &BinaryMask,
    thresholds: &FidelityThresholds,
) -> Result<FidelityVerdict, ImageError> {
    let (generated, source) = (generated.to_rgb(), source.to_rgb());
    generated.same_shape(&source)?;
    mask.matches(&source)?;
    let total = mask.bits().len();
    let fg = mask.foreground_count();
    if fg == 0 || total == 0 {
        return Ok(FidelityVerdict {
            accept: false,
            fg_mad: 0.0,
            fg_area_ratio: 0.0,
        });
    }
    let mut sum = 0u64;
    for i in (0..total).filter(|&i| mask.is_fg(i)) {
        for (a, b) in generated.px(i).iter().zip(source.px(i)) {
            sum += u64::from(a.abs_diff(*b));
        }
    }
    let fg_mad = sum as f64 / (fg * 3) as f64;
    let fg_area_ratio = fg as f64 / total as f64;
    Ok(FidelityVerdict {
        accept: fg_mad <= thresholds.mad_threshold && fg_area_ratio >= thresholds.area_threshold,
        fg_mad,
        fg_area_ratio,
    })
}

// ---------------------------------------------------------------------------
// Scenario glue

#[derive(Debug, Error)]
pub enum AiSkip {
    #[error("generation failed: {0}")]
    Generation(#[from] GenError),
    #[error("fidelity filter {0}")]
    Rejected(FidelityVerdict),
}

/// Everything the AI-background scenario needs: client, prompts, thresholds.
pub struct AiBackground {
    pub client: GenClient,
    pub prompts: PromptRegistry,
    pub thresholds: FidelityThresholds,
}

impl AiBackground {
    pub fn from_config(client: GenClient) -> Self {
        let prompts = client.config().prompt_registry();
        let thresholds = client.config().thresholds();
        Self {
            client,
            prompts,
            thresholds,
        }
    }

    /// Transparent foreground, prompt, generation, then the fidelity filter.
    pub fn produce(&self, img: &Image, mask: &BinaryMask, class_label: &str, seed: u64) -> Result<Image, AiSkip> {
        let transparent = make_transparent(img, mask).map_err(GenError::from)?;
        let prompt = build_prompt(class_label, &self.prompts).map_err(GenError::from)?;
        let generated = self.client.request_background(&transparent, &prompt, seed)?;
        let verdict = fidelity_filter(&generated.image, img, mask, &self.thresholds).map_err(GenError::from)?;
        if verdict.accept {
            Ok(generated.image)
        } else {
            Err(AiSkip::Rejected(verdict))
        }
    }
}
