//! Versioned JSON checkpoints of trained models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{Settings, TrainState, TrainedModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub settings: Settings,
    pub model: TrainedModel,
    /// Optimizer state for resuming; absent in final checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(model: TrainedModel, settings: Settings) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            settings,
            model,
            state: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionOnly {
            version: u32,
        }
        let v: VersionOnly = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if v.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: v.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Writes via a temporary file so a crash never leaves a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
