//! Concept text for prototype patches: each patch crop is captioned by a
//! multimodal provider, and a text provider condenses a cluster's captions
//! into one candidate shortcut sentence. Stub providers make the stage
//! reproducible offline.

mod provider;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use provider::{
    bright_share, CallResult, Captioner, HttpProvider, HttpSettings, ProviderError, Refiner, StubCaptioner,
    StubRefiner, BRIGHT_LEVEL, BRIGHT_SHARE, CAPTION_PROMPT, REFINE_PROMPT, STUB_MARKER_CAPTION, STUB_MARKER_CONCEPT,
    STUB_TEXTURE_CAPTION, STUB_TEXTURE_CONCEPT,
};

use crate::detection::PrototypeBank;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::store::{Artifact, ArtifactReader, ArtifactWriter};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Stub,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConceptsConfig {
    pub provider: ProviderKind,
    pub max_in_flight: usize,
    pub retries: usize,
    /// First retry delay; doubled on every further retry.
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Refinement prompts are cut to this many characters.
    pub max_prompt_chars: usize,
    pub upscale: usize,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Stub,
            max_in_flight: 4,
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            max_prompt_chars: 24_000,
            upscale: 4,
        }
    }
}

pub const ENV_BASE: &str = "CONCEPT_API_BASE";
pub const ENV_KEY: &str = "CONCEPT_API_KEY";
pub const ENV_CAPTION_MODEL: &str = "CONCEPT_CAPTION_MODEL";
pub const ENV_REFINE_MODEL: &str = "CONCEPT_REFINE_MODEL";

/// Builds the HTTP captioner and refiner from the `CONCEPT_*` variables.
pub fn http_providers_from_env(config: &ConceptsConfig) -> Result<(HttpProvider, HttpProvider)> {
    let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
    let base = var(ENV_BASE).ok_or_else(|| Error::Config(format!("{ENV_BASE} is not set")))?;
    let key = var(ENV_KEY);
    let caption_model =
        var(ENV_CAPTION_MODEL).ok_or_else(|| Error::Config(format!("{ENV_CAPTION_MODEL} is not set")))?;
    let refine_model = var(ENV_REFINE_MODEL).ok_or_else(|| Error::Config(format!("{ENV_REFINE_MODEL} is not set")))?;
    let timeout = Duration::from_secs(config.timeout_secs);
    let make = |model: String| {
        HttpProvider::new(HttpSettings {
            base_url: base.clone(),
            api_key: key.clone(),
            model,
            timeout,
        })
    };
    Ok((make(caption_model), make(refine_model)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: Option<String>,
    /// Per-item error marker; set exactly when `text` is `None`.
    pub error: Option<String>,
    pub provider: String,
    pub latency_ms: u64,
    pub attempts: usize,
}

fn with_retries<F: FnMut() -> CallResult>(config: &ConceptsConfig, mut call: F) -> (CallResult, usize) {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match call() {
            Err(e) if e.transient && attempts <= config.retries => {
                let delay = config.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                log::debug!("transient provider failure (attempt {attempts}): {}", e.message);
                std::thread::sleep(Duration::from_millis(delay));
            }
            other => return (other, attempts),
        }
    }
}

/// One caption per patch, in input order, with at most `max_in_flight`
/// requests running at once. Failures become per-item error markers.
pub fn caption_patches(patches: &[Image], captioner: &dyn Captioner, config: &ConceptsConfig) -> Vec<Caption> {
    let slots: Mutex<Vec<Option<Caption>>> = Mutex::new(vec![None; patches.len()]);
    let next = AtomicUsize::new(0);
    let workers = config.max_in_flight.max(1).min(patches.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= patches.len() {
                    break;
                }
                let start = Instant::now();
                let (result, attempts) = with_retries(config, || captioner.caption(&patches[i], CAPTION_PROMPT));
                let (text, error) = match result {
                    Ok(t) if t.trim().is_empty() => (None, Some("empty caption".to_string())),
                    Ok(t) => (Some(t.trim().to_string()), None),
                    Err(e) => (None, Some(e.message)),
                };
                let caption = Caption {
                    text,
                    error,
                    provider: captioner.id(),
                    latency_ms: start.elapsed().as_millis() as u64,
                    attempts,
                };
                slots.lock().expect("caption slots")[i] = Some(caption);
            });
        }
    });
    slots
        .into_inner()
        .expect("caption slots")
        .into_iter()
        .map(|c| c.expect("every patch captioned"))
        .collect()
}

/// Refinement prompt: the fixed instruction followed by one caption per
/// line, cut to `max_chars`. Returns the prompt and how many captions fit.
pub fn refine_prompt(captions: &[String], max_chars: usize) -> (String, usize) {
    let mut prompt = REFINE_PROMPT.to_string();
    let mut used = 0;
    for c in captions {
        if prompt.len() + 1 + c.len() > max_chars && used > 0 {
            break;
        }
        prompt.push('\n');
        prompt.push_str(c);
        used += 1;
    }
    if used < captions.len() {
        log::info!("refinement prompt holds {used} of {} captions", captions.len());
    }
    (prompt, used)
}

/// Text up to and including the first sentence terminator.
pub fn first_sentence(text: &str) -> String {
    let t = text.trim();
    let chars: Vec<(usize, char)> = t.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let at_end = k + 1 == chars.len();
            if at_end || chars[k + 1].1.is_whitespace() {
                return t[..i + c.len_utf8()].to_string();
            }
        }
    }
    t.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSummary {
    pub cluster: usize,
    pub shortcut_candidate: Option<String>,
    /// Refiner output exactly as received.
    pub raw_response: Option<String>,
    pub error: Option<String>,
    pub captions: Vec<Caption>,
    pub captions_used: usize,
    pub caption_provider: String,
    pub refine_provider: String,
}

/// Condenses a cluster's successful captions into one sentence.
pub fn summarize_concepts(
    cluster: usize,
    captions: Vec<Caption>,
    refiner: &dyn Refiner,
    config: &ConceptsConfig,
) -> Result<ConceptSummary> {
    let texts: Vec<String> = captions.iter().filter_map(|c| c.text.clone()).collect();
    if texts.is_empty() {
        return Err(Error::invalid(format!(
            "cluster {cluster} has no captions to summarise"
        )));
    }
    let (prompt, used) = refine_prompt(&texts, config.max_prompt_chars);
    let (result, _) = with_retries(config, || refiner.refine(&prompt, &texts[..used]));
    let caption_provider = captions.first().map(|c| c.provider.clone()).unwrap_or_default();
    let (shortcut_candidate, raw_response, error) = match result {
        Ok(raw) if first_sentence(&raw).is_empty() => (None, Some(raw), Some("empty refinement".into())),
        Ok(raw) => (Some(first_sentence(&raw)), Some(raw), None),
        Err(e) => (None, None, Some(e.message)),
    };
    Ok(ConceptSummary {
        cluster,
        shortcut_candidate,
        raw_response,
        error,
        captions,
        captions_used: used,
        caption_provider,
        refine_provider: refiner.id(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptsReport {
    pub clusters: Vec<ConceptSummary>,
    /// Some caption or refinement failed.
    pub partial: bool,
    /// No cluster received a concept.
    pub failed: bool,
}

/// Captions the top prototypes of every cluster and summarises them.
/// `lookup` maps an image id to its source image.
pub fn describe_clusters<'a, F>(
    bank: &PrototypeBank,
    lookup: F,
    patch_size: usize,
    captioner: &dyn Captioner,
    refiner: &dyn Refiner,
    config: &ConceptsConfig,
) -> Result<ConceptsReport>
where
    F: Fn(u64) -> Option<&'a Image>,
{
    let mut clusters = Vec::with_capacity(bank.clusters.len());
    for c in 0..bank.clusters.len() {
        let crops = bank
            .top(c)
            .iter()
            .map(|p| {
                let img =
                    lookup(p.patch.image_id).ok_or_else(|| Error::NotFound(format!("image {}", p.patch.image_id)))?;
                Ok(img.crop_patch(patch_size, p.patch.position).upscale(config.upscale))
            })
            .collect::<Result<Vec<_>>>()?;
        let captions = caption_patches(&crops, captioner, config);
        let summary = match summarize_concepts(c, captions.clone(), refiner, config) {
            Ok(s) => s,
            Err(e) => ConceptSummary {
                cluster: c,
                shortcut_candidate: None,
                raw_response: None,
                error: Some(e.to_string()),
                captions,
                captions_used: 0,
                caption_provider: captioner.id(),
                refine_provider: refiner.id(),
            },
        };
        clusters.push(summary);
    }
    let partial = clusters
        .iter()
        .any(|s| s.error.is_some() || s.captions.iter().any(|c| c.error.is_some()));
    let failed = clusters.iter().all(|s| s.shortcut_candidate.is_none());
    Ok(ConceptsReport {
        clusters,
        partial,
        failed,
    })
}

impl Artifact for ConceptsReport {
    const KIND: &'static str = "concepts";

    fn write(&self, w: &mut ArtifactWriter) -> Result<()> {
        w.meta(self)
    }

    fn read(r: &ArtifactReader) -> Result<Self> {
        r.meta()
    }
}
