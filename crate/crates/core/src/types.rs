//! Shared domain types: EEG trial sets, embedding matrices, similarity
//! matrices, and loss parameterization. All are immutable value objects
//! once constructed; validation happens in the constructors.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A subject's preprocessed EEG trials: (n_trials, n_electrodes, n_timepoints)
/// in microvolts, with one class label and one image id per trial.
#[derive(Debug, Clone)]
pub struct EegTrialSet {
    pub data: Array3<f64>,
    pub labels: Vec<i64>,
    pub image_ids: Vec<String>,
    pub subject_id: String,
    pub sampling_rate_hz: f64,
    pub split: Split,
}

impl EegTrialSet {
    pub fn new(
        data: Array3<f64>,
        labels: Vec<i64>,
        image_ids: Vec<String>,
        subject_id: impl Into<String>,
        sampling_rate_hz: f64,
        split: Split,
    ) -> Result<Self> {
        let n_trials = data.shape()[0];
        if labels.len() != n_trials || image_ids.len() != n_trials {
            return Err(Error::data(format!(
                "trial count mismatch: data has {n_trials} trials, {} labels, {} image ids",
                labels.len(),
                image_ids.len()
            )));
        }
        if sampling_rate_hz <= 0.0 {
            return Err(Error::data("sampling_rate_hz must be positive"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("EEG data contains non-finite values"));
        }
        Ok(EegTrialSet {
            data,
            labels,
            image_ids,
            subject_id: subject_id.into(),
            sampling_rate_hz,
            split,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_electrodes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_timepoints(&self) -> usize {
        self.data.shape()[2]
    }

    /// Distinct class labels, ascending.
    pub fn classes(&self) -> Vec<i64> {
        let mut c: Vec<i64> = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Rows of d-dimensional embeddings. `normalized` asserts every row has
/// unit L2 norm (exact-zero rows are exempt).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(values: Array2<f64>, normalized: bool) -> Result<Self> {
        if normalized {
            for (i, row) in values.rows().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if n != 0.0 && (n - 1.0).abs() > 1e-6 {
                    return Err(Error::data(format!(
                        "row {i} marked normalized but has norm {n}"
                    )));
                }
            }
        }
        Ok(EmbeddingMatrix { values, normalized })
    }

    /// L2-normalize rows with a 1e-12 epsilon guard; zero rows stay zero.
    pub fn normalize(mut values: Array2<f64>) -> Self {
        for mut row in values.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / (n + 1e-12));
        }
        EmbeddingMatrix { values, normalized: true }
    }

    pub fn n_rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
}

/// Loss parameterization: log-temperature and the similarity-keeping
/// weight, with their training-time constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossParams {
    /// Log-temperature; the logit scale is exp(tau).
    pub tau: f64,
    /// Similarity-keeping weight.
    pub beta: f64,
    /// Upper clamp on exp(tau).
    pub tau_scale_cap: f64,
    pub beta_trainable: bool,
    /// Lower clamp applied to beta after every optimizer step.
    pub beta_min: Option<f64>,
}

impl LossParams {
    pub fn logit_scale(&self) -> f64 {
        self.tau.exp().min(self.tau_scale_cap)
    }

    /// Clamp tau so exp(tau) <= tau_scale_cap, and beta to its floor.
    pub fn clamp(&mut self) {
        let cap = self.tau_scale_cap.ln();
        if self.tau > cap {
            self.tau = cap;
        }
        if let Some(lo) = self.beta_min {
            if self.beta < lo {
                self.beta = lo;
            }
        }
    }
}

/// Per-step loss record. `total` always satisfies
/// total = (loss_e + loss_i)/2 + beta * loss_sk.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub loss_e: f64,
    pub loss_i: f64,
    pub loss_sk: f64,
    pub beta: f64,
    pub tau: f64,
}
