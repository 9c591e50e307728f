use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use crate::image::Image;

pub const CAPTION_PROMPT: &str = "What is in this picture? Describe in a few words.";

pub const REFINE_PROMPT: &str = "I extracted patches from images in my dataset where my model seems to focus on the most. I let an LLM caption these images for you. I am searching for potential shortcuts in the dataset. Can you identify one or more possible shortcuts in this dataset? Describe it in one sentence (only!) and pick the most significant. No other explanations are needed. Descriptions:";

pub const STUB_MARKER_CAPTION: &str = "a bright geometric marker on dark background";
pub const STUB_TEXTURE_CAPTION: &str = "noisy gray texture";
pub const STUB_MARKER_CONCEPT: &str = "The model may rely on a bright marker glyph rather than the texture.";
pub const STUB_TEXTURE_CONCEPT: &str = "The model may rely on the gray texture pattern of the images.";

/// Pixels at or above this value only occur where a glyph was drawn;
/// synthetic textures are clamped below it.
pub const BRIGHT_LEVEL: f32 = 0.95;
/// A patch counts as glyph-dominated when at least this share of its
/// pixels is bright.
pub const BRIGHT_SHARE: f64 = 0.25;

/// A failed provider call; transient failures are retried.
#[derive(Clone, Debug, PartialEq)]
pub struct ProviderError {
    pub transient: bool,
    pub message: String,
}

impl ProviderError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            transient: true,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            transient: false,
            message: message.into(),
        }
    }
}

pub type CallResult = std::result::Result<String, ProviderError>;

/// Multimodal endpoint that describes one image.
pub trait Captioner: Sync {
    fn id(&self) -> String;
    fn caption(&self, image: &Image, prompt: &str) -> CallResult;
}

/// Text endpoint that condenses captions. `captions` are the inputs the
/// prompt was built from, for providers that work on them directly.
pub trait Refiner: Sync {
    fn id(&self) -> String;
    fn refine(&self, prompt: &str, captions: &[String]) -> CallResult;
}

pub fn bright_share(image: &Image) -> f64 {
    let bright = image.pixels.iter().filter(|&&p| p >= BRIGHT_LEVEL).count();
    bright as f64 / image.pixels.len().max(1) as f64
}

/// Offline captioner keyed on the share of glyph-bright pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubCaptioner;

impl Captioner for StubCaptioner {
    fn id(&self) -> String {
        "stub".into()
    }

    fn caption(&self, image: &Image, _prompt: &str) -> CallResult {
        Ok(if bright_share(image) >= BRIGHT_SHARE {
            STUB_MARKER_CAPTION
        } else {
            STUB_TEXTURE_CAPTION
        }
        .into())
    }
}

/// Offline refiner: a marker concept when at least 60% of captions
/// mention a marker.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubRefiner;

impl Refiner for StubRefiner {
    fn id(&self) -> String {
        "stub".into()
    }

    fn refine(&self, _prompt: &str, captions: &[String]) -> CallResult {
        if captions.is_empty() {
            return Err(ProviderError::fatal("no captions to refine"));
        }
        let marker = captions.iter().filter(|c| c.contains("marker")).count();
        Ok(if 10 * marker >= 6 * captions.len() {
            STUB_MARKER_CONCEPT
        } else {
            STUB_TEXTURE_CONCEPT
        }
        .into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HttpSettings {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

/// Chat-completions client (`POST {base}/chat/completions`). Images are
/// sent inline as PNG data URLs.
pub struct HttpProvider {
    settings: HttpSettings,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(settings: HttpSettings) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build();
        Self {
            settings,
            agent: ureq::Agent::new_with_config(config),
        }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    pub fn call(&self, prompt: &str, image: Option<&Image>) -> CallResult {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        if let Some(img) = image {
            let png = img.to_png().map_err(|e| ProviderError::fatal(e.to_string()))?;
            let url = format!(
                "data:image/png;base64,{}",
                base64::engine::general_purpose::STANDARD.encode(png)
            );
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        let body = json!({
            "model": self.settings.model,
            "messages": [{"role": "user", "content": content}],
        });
        let url = format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.settings.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| ProviderError::transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::transient(e.to_string()))?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => return Err(ProviderError::transient(format!("HTTP {status}: {text}"))),
            _ => return Err(ProviderError::fatal(format!("HTTP {status}: {text}"))),
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| ProviderError::fatal(format!("bad JSON: {e}")))?;
        let content = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ProviderError::fatal("response has no message content"))?;
        Ok(content.trim().to_string())
    }
}

impl Captioner for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.settings.model)
    }

    fn caption(&self, image: &Image, prompt: &str) -> CallResult {
        self.call(prompt, Some(image))
    }
}

impl Refiner for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.settings.model)
    }

    fn refine(&self, prompt: &str, _captions: &[String]) -> CallResult {
        self.call(prompt, None)
    }
}
