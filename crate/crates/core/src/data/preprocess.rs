//! Trial preprocessing: per-channel baseline correction using the
//! pre-stimulus mean, then segmentation to the post-onset window.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::{EegTrialSet, Split};

/// Subtract each channel's mean over the first `n_pre` samples from the
/// whole window. Applying this twice is the identity: after one pass the
/// pre-stimulus mean is zero.
pub fn baseline_correct(raw: &Array3<f64>, n_pre: usize) -> Result<Array3<f64>> {
    if n_pre == 0 {
        return Err(Error::data(
            "pre-stimulus window is empty; baseline undefined",
        ));
    }
    if raw.shape()[2] < n_pre {
        return Err(Error::data(format!(
            "window of {} samples shorter than pre-stimulus {n_pre}",
            raw.shape()[2]
        )));
    }
    let mut out = raw.clone();
    for mut trial in out.outer_iter_mut() {
        for mut chan in trial.outer_iter_mut() {
            let baseline: f64 = chan.iter().take(n_pre).sum::<f64>() / n_pre as f64;
            chan.mapv_inplace(|v| v - baseline);
        }
    }
    Ok(out)
}

/// Baseline-correct and keep exactly the 0..post_stimulus_ms segment.
/// The raw window must start `pre_stimulus_ms` before stimulus onset.
pub fn preprocess_trials(
    raw: &Array3<f64>,
    labels: Vec<i64>,
    image_ids: Vec<String>,
    subject_id: &str,
    split: Split,
    pre_stimulus_ms: f64,
    post_stimulus_ms: f64,
    sampling_rate_hz: f64,
) -> Result<EegTrialSet> {
    if sampling_rate_hz <= 0.0 {
        return Err(Error::data("sampling_rate_hz must be positive"));
    }
    let n_pre = (pre_stimulus_ms / 1000.0 * sampling_rate_hz).round() as usize;
    let n_post = (post_stimulus_ms / 1000.0 * sampling_rate_hz).round() as usize;
    let corrected = baseline_correct(raw, n_pre)?;
    let total = corrected.shape()[2];
    if total < n_pre + n_post {
        return Err(Error::data(format!(
            "window of {total} samples cannot hold {n_pre} pre + {n_post} post samples"
        )));
    }
    let segment = corrected
        .slice(ndarray::s![.., .., n_pre..n_pre + n_post])
        .to_owned();
    EegTrialSet::new(segment, labels, image_ids, subject_id, sampling_rate_hz, split)
}
