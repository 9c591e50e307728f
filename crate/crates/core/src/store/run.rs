use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pipeline stages in dependency order. `concepts` is a side stage: it
/// needs `prototyped` but nothing downstream needs it.
pub const STAGES: [&str; 8] = [
    "generated",
    "trained",
    "exported",
    "clustered",
    "prototyped",
    "concepts",
    "selected",
    "mitigated",
];

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub generated: bool,
    pub trained: bool,
    pub exported: bool,
    pub clustered: bool,
    pub prototyped: bool,
    pub concepts: bool,
    /// Set when some caption or refinement calls failed.
    pub concepts_partial: bool,
    pub selected: bool,
    pub mitigated: bool,
}

impl StageFlags {
    fn chain(&self) -> [(&'static str, bool); 7] {
        [
            ("generated", self.generated),
            ("trained", self.trained),
            ("exported", self.exported),
            ("clustered", self.clustered),
            ("prototyped", self.prototyped),
            ("selected", self.selected),
            ("mitigated", self.mitigated),
        ]
    }

    /// A later stage implies every earlier one.
    pub fn validate(&self) -> Result<()> {
        let chain = self.chain();
        for w in chain.windows(2) {
            if w[1].1 && !w[0].1 {
                return Err(Error::InvalidState(format!(
                    "stage '{}' is set but '{}' is not",
                    w[1].0, w[0].0
                )));
            }
        }
        if self.concepts && !self.prototyped {
            return Err(Error::InvalidState("concepts recorded before prototypes".into()));
        }
        if self.concepts_partial && !self.concepts {
            return Err(Error::InvalidState("partial concepts flag without concepts".into()));
        }
        Ok(())
    }

    pub fn get(&self, stage: &str) -> bool {
        match stage {
            "concepts" => self.concepts,
            other => self.chain().iter().any(|(n, v)| *n == other && *v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub config: serde_json::Value,
    pub flags: StageFlags,
    /// Artifact name to run-relative path.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunRecord {
    pub fn new(config: serde_json::Value) -> Self {
        let now = now_ms();
        Self {
            run_id: ulid::Ulid::new().to_string(),
            created_ms: now,
            updated_ms: now,
            config,
            flags: StageFlags::default(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn touch(&mut self) {
        self.updated_ms = now_ms();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_must_be_monotone() {
        let mut f = StageFlags {
            generated: true,
            trained: true,
            ..Default::default()
        };
        f.validate().unwrap();
        f.clustered = true;
        assert!(f.validate().is_err());
        f.exported = true;
        f.validate().unwrap();
        f.concepts = true;
        assert!(f.validate().is_err());
    }
}
