use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::ConceptsConfig;
use crate::detection::DetectionParams;
use crate::error::{Error, Result};
use crate::mitigation::HeadHyper;
use crate::rng::derive_seed;
use crate::synth::SynthConfig;
use crate::vit::{TrainHyper, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MitigationParams {
    /// Neighbours consulted per token.
    pub knn_k: usize,
    pub head: HeadHyper,
}

impl Default for MitigationParams {
    fn default() -> Self {
        Self {
            knn_k: 5,
            head: HeadHyper::default(),
        }
    }
}

/// Everything a run needs. Component seeds are derived from `seed` by
/// [`PipelineConfig::resolved`], so one number pins the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub vit: ViTConfig,
    pub train: TrainHyper,
    pub detection: DetectionParams,
    pub mitigation: MitigationParams,
    pub concepts: ConceptsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: SynthConfig::default(),
            vit: ViTConfig::default(),
            train: TrainHyper::default(),
            detection: DetectionParams::default(),
            mitigation: MitigationParams::default(),
            concepts: ConceptsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every component seed derived from the run seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = derive_seed(self.seed, "data");
        c.vit.seed = derive_seed(self.seed, "vit");
        c.train.seed = derive_seed(self.seed, "train");
        c.detection.seed = derive_seed(self.seed, "detection");
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.vit.validate()?;
        if self.vit.image_size != self.data.image_size
            || self.vit.patch_size != self.data.patch_size
            || self.vit.channels != self.data.channels
        {
            return Err(Error::invalid(
                "model and dataset disagree on image size, patch size or channels",
            ));
        }
        if self.vit.classes != 2 {
            return Err(Error::invalid("only binary classification is supported"));
        }
        self.detection.validate()?;
        if self.mitigation.knn_k == 0 {
            return Err(Error::invalid("knn_k must be positive"));
        }
        if self.concepts.max_in_flight == 0 || self.concepts.upscale == 0 {
            return Err(Error::invalid("max_in_flight and upscale must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = PipelineConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        let partial = PipelineConfig::from_toml_str("seed = 7\n[detection]\nclusters = 3\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.detection.clusters, 3);
        assert_eq!(partial.detection.n, 20);
        let vit = PipelineConfig::from_toml_str("[vit]\nheads = 2\n").unwrap();
        assert_eq!(vit.vit.heads, 2);
        assert_eq!(vit.vit.embed_dim, PipelineConfig::default().vit.embed_dim);
        assert_eq!(vit.vit.blocks, PipelineConfig::default().vit.blocks);
        assert!(PipelineConfig::from_toml_str("seed = \"x\"").is_err());
    }
}
