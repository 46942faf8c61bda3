//! Self-describing checkpoint container: full config snapshot, all
//! parameters (including batch-norm buffers and the loss scalars) at
//! 64-bit precision, and a metrics summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::Archive;
use crate::params::ParamStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricsSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub seed: u64,
    pub metrics: MetricsSummary,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: ExperimentConfig,
    epoch: usize,
    seed: u64,
    metrics: MetricsSummary,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    trainable: bool,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = Meta {
            format_version: self.format_version,
            config: self.config.clone(),
            epoch: self.epoch,
            seed: self.seed,
            metrics: self.metrics.clone(),
            entries: self
                .store
                .iter()
                .map(|e| EntryMeta { name: e.name.clone(), trainable: e.trainable })
                .collect(),
        };
        let arc = Archive {
            meta: serde_json::to_value(&meta).map_err(|e| Error::Format(e.to_string()))?,
            arrays: self
                .store
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        };
        arc.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let arc = Archive::load(&path)?;
        let meta: Meta =
            serde_json::from_value(arc.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {})",
                meta.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        if meta.entries.len() != arc.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "metadata lists {} entries but archive holds {}",
                meta.entries.len(),
                arc.arrays.len()
            )));
        }
        let mut store = ParamStore::new();
        for (em, (name, value)) in meta.entries.iter().zip(arc.arrays.into_iter()) {
            if em.name != name {
                return Err(Error::Checkpoint(format!(
                    "entry order mismatch: {} vs {}",
                    em.name, name
                )));
            }
            store.add(name, value, em.trainable);
        }
        Ok(Checkpoint {
            format_version: meta.format_version,
            config: meta.config,
            epoch: meta.epoch,
            seed: meta.seed,
            metrics: meta.metrics,
            store,
        })
    }

    pub fn tau(&self) -> f64 {
        let idx = self.store.index_of("loss.tau").expect("checkpoint has loss.tau");
        self.store.value(idx).iter().next().copied().unwrap()
    }

    pub fn beta(&self) -> f64 {
        let idx = self.store.index_of("loss.beta").expect("checkpoint has loss.beta");
        self.store.value(idx).iter().next().copied().unwrap()
    }
}
