//! Self-describing fold checkpoints.
//!
//! A checkpoint is one JSON object:
//!
//! | key | content |
//! |---|---|
//! | `format`, `version` | `"dimaf.checkpoint"`, `1` |
//! | `fold` | fold index |
//! | `config` | full run configuration echo |
//! | `model` | config, dims and named parameter arrays (`rows`, `cols`, row-major `data`) |
//! | `features` | pathway membership, gene standardization, global prototypes, EM settings |
//! | `baseline` | four pooled baseline vectors for attribution |
//! | `test_ids` | held-out patient ids |
//! | `cohort_signature` | sha256 of gene panel, gene sets and patch width |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{cohort_signature, Cohort};
use crate::error::{Error, Result};
use crate::explain::Blocks;
use crate::model::{FeatureSpace, Model};
use crate::train_eval::FoldOutcome;

pub const CHECKPOINT_FORMAT: &str = "dimaf.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fold: usize,
    pub config: RunConfig,
    pub model: Model,
    pub features: FeatureSpace,
    pub baseline: Blocks,
    pub test_ids: Vec<String>,
    pub cohort_signature: String,
}

impl Checkpoint {
    pub fn from_outcome(cfg: &RunConfig, cohort: &Cohort, o: &FoldOutcome) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            fold: o.fold,
            config: cfg.clone(),
            model: o.model.clone(),
            features: o.features.clone(),
            baseline: o.baseline.clone(),
            test_ids: o.test_ids.clone(),
            cohort_signature: cohort_signature(cohort),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::train_eval::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        #[derive(Deserialize)]
        struct Head {
            format: String,
            version: u32,
        }
        let head: Head = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: not a checkpoint: {e}", path.display())))?;
        if head.format != CHECKPOINT_FORMAT || head.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "{}: checkpoint {} v{} is not readable by this build ({CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                path.display(),
                head.format,
                head.version
            )));
        }
        let ck: Checkpoint = serde_json::from_str(&text)?;
        ck.model.validate()?;
        Ok(ck)
    }

    /// The cohort must be the one the checkpoint was trained against.
    pub fn check_cohort(&self, cohort: &Cohort) -> Result<()> {
        let sig = cohort_signature(cohort);
        if sig != self.cohort_signature {
            return Err(Error::Version(format!(
                "checkpoint was trained on cohort {} but the given cohort is {sig}",
                self.cohort_signature
            )));
        }
        Ok(())
    }
}
