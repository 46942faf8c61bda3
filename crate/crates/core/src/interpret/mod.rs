//! Model interpretation: gradient-weighted activation attribution over the
//! electrode x time plane, window-averaged topomap values, and band-limited
//! time-frequency maps.
//!
//! The attributed scalar is the cosine similarity between a trial's EEG
//! embedding and its paired image embedding (the alignment term of the
//! training objective). Maps are rectified, upsampled to the input plane,
//! and taken in absolute value.

pub mod montage;
pub mod render;
pub mod timefreq;

use ndarray::{Array2, Array4, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::training::{model_from_checkpoint, AlignedEmbeddings, Checkpoint};
use crate::types::EegTrialSet;

pub use montage::Montage;
pub use render::{save_heatmap, save_topomap};
pub use timefreq::{time_frequency_map, Band, BandSpec, TimeFrequencyMap};

/// Nonnegative attribution over (electrodes x timepoints).
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub source_layer: String,
    /// Which trial (or aggregate) this map describes.
    pub scope: String,
}

impl SaliencyMap {
    fn check_nonnegative(&self) {
        debug_assert!(self.values.iter().all(|&v| v >= 0.0));
    }
}

/// Core attribution arithmetic: channel weights are the spatial mean of
/// the gradient, the map is the rectified weighted activation sum,
/// upsampled to (E, T) and taken in absolute value.
pub fn cam_from_activation(
    activation: &Array4<f64>, // (1, C, H, W)
    gradient: &Array4<f64>,
    out_shape: (usize, usize),
) -> Array2<f64> {
    let (c, h, w) = (activation.shape()[1], activation.shape()[2], activation.shape()[3]);
    let spatial = (h * w) as f64;
    let mut map = Array2::<f64>::zeros((h, w));
    for ci in 0..c {
        let mut weight = 0.0;
        for hi in 0..h {
            for wi in 0..w {
                weight += gradient[[0, ci, hi, wi]];
            }
        }
        weight /= spatial;
        for hi in 0..h {
            for wi in 0..w {
                map[[hi, wi]] += weight * activation[[0, ci, hi, wi]];
            }
        }
    }
    map.mapv_inplace(|v| v.max(0.0)); // rectify
    let up = bilinear_resize(&map, out_shape.0, out_shape.1);
    up.mapv(f64::abs)
}

/// Bilinear resize with endpoint alignment.
fn bilinear_resize(src: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (sr, sc) = (src.shape()[0], src.shape()[1]);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let fr = if rows > 1 { r as f64 * (sr - 1) as f64 / (rows - 1) as f64 } else { 0.0 };
        let fc = if cols > 1 { c as f64 * (sc - 1) as f64 / (cols - 1) as f64 } else { 0.0 };
        let r0 = fr.floor() as usize;
        let c0 = fc.floor() as usize;
        let r1 = (r0 + 1).min(sr - 1);
        let c1 = (c0 + 1).min(sc - 1);
        let ar = fr - r0 as f64;
        let ac = fc - c0 as f64;
        src[[r0, c0]] * (1.0 - ar) * (1.0 - ac)
            + src[[r1, c0]] * ar * (1.0 - ac)
            + src[[r0, c1]] * (1.0 - ar) * ac
            + src[[r1, c1]] * ar * ac
    })
}

/// Attribution maps for every trial in a set. `target_layer` defaults to
/// the last convolution before flattening.
pub fn grad_cam(
    ckpt: &Checkpoint,
    trials: &EegTrialSet,
    embeddings: &AlignedEmbeddings,
    target_layer: Option<&str>,
) -> Result<Vec<SaliencyMap>> {
    let (model, store) = model_from_checkpoint(ckpt)?;
    let layer = target_layer.unwrap_or_else(|| model.default_target_layer());
    if !model.layer_names().contains(&layer) {
        return Err(Error::Evaluation(format!(
            "layer '{layer}' has no spatial activation; valid layers: {}",
            model.layer_names().join(", ")
        )));
    }
    let (e, t) = (trials.n_electrodes(), trials.n_timepoints());
    let mut out = Vec::with_capacity(trials.n_trials());
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in inference mode
    for i in 0..trials.n_trials() {
        let mut g = Graph::new(false);
        let bound = store.bind(&mut g);
        let eeg = crate::training::batch_eeg(trials, &[i]);
        let x = g.constant(eeg.into_dyn());
        let mut store_copy = store.clone();
        let (emb, fwd) = model.embed(&mut g, &bound, &mut store_copy, x, &mut rng);
        let tap = fwd
            .taps
            .iter()
            .find(|tp| tp.name == layer)
            .ok_or_else(|| Error::Evaluation(format!("layer '{layer}' not found in forward taps")))?;
        let tap_node = tap.node;

        let i_row = embeddings.rows_for(trials, &[i])?;
        let i_node = g.constant(i_row.into_dyn());
        // cosine of normalized vectors: elementwise product, summed
        let prod = g.mul(emb, i_node);
        let score = g.sum_all(prod);
        g.backward(score);

        let activation = g
            .value(tap_node)
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Evaluation(format!("layer '{layer}' has no spatial extent")))?
            .to_owned();
        let gradient = match g.grad(tap_node) {
            Some(gr) => gr.view().into_dimensionality::<Ix4>().unwrap().to_owned(),
            None => Array4::zeros(activation.raw_dim()),
        };
        let map = cam_from_activation(&activation, &gradient, (e, t));
        let sm = SaliencyMap {
            values: map,
            source_layer: layer.to_string(),
            scope: format!("trial:{i}"),
        };
        sm.check_nonnegative();
        out.push(sm);
    }
    Ok(out)
}

/// Elementwise mean of equal-shape maps.
pub fn aggregate_saliency(maps: &[SaliencyMap], scope: &str) -> Result<SaliencyMap> {
    if maps.is_empty() {
        return Err(Error::Evaluation("no saliency maps to aggregate".into()));
    }
    let shape = maps[0].values.raw_dim();
    let mut acc = Array2::<f64>::zeros(shape.clone());
    for m in maps {
        if m.values.raw_dim() != shape {
            return Err(Error::shape(
                format!("{:?}", shape),
                format!("{:?}", m.values.raw_dim()),
            ));
        }
        acc += &m.values;
    }
    acc /= maps.len() as f64;
    Ok(SaliencyMap {
        values: acc,
        source_layer: maps[0].source_layer.clone(),
        scope: scope.to_string(),
    })
}

/// Per-window per-electrode means of a saliency map.
#[derive(Debug, Clone)]
pub struct WindowedSaliency {
    /// (n_windows, n_electrodes)
    pub values: Array2<f64>,
    pub samples_per_window: usize,
    pub window_ms: f64,
    /// Trailing samples that did not fill a whole window.
    pub dropped_samples: usize,
}

/// Average a map over consecutive time windows (default 100 ms). The
/// trailing remainder is dropped.
pub fn topomap_windows(
    map: &SaliencyMap,
    window_ms: f64,
    sampling_rate_hz: f64,
) -> Result<WindowedSaliency> {
    let (e, t) = (map.values.shape()[0], map.values.shape()[1]);
    let ws = (window_ms / 1000.0 * sampling_rate_hz).round() as usize;
    if ws == 0 || ws > t {
        return Err(Error::data(format!(
            "window of {window_ms} ms is {ws} samples; map has {t}"
        )));
    }
    let n_windows = t / ws;
    let dropped = t - n_windows * ws;
    let mut values = Array2::<f64>::zeros((n_windows, e));
    for w in 0..n_windows {
        for ei in 0..e {
            let mut acc = 0.0;
            for s in 0..ws {
                acc += map.values[[ei, w * ws + s]];
            }
            values[[w, ei]] = acc / ws as f64;
        }
    }
    Ok(WindowedSaliency {
        values,
        samples_per_window: ws,
        window_ms,
        dropped_samples: dropped,
    })
}

/// Render one scalp image per window; returns the written paths.
pub fn render_topomap_windows(
    windows: &WindowedSaliency,
    montage: &Montage,
    out_dir: impl AsRef<std::path::Path>,
    prefix: &str,
) -> Result<Vec<std::path::PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    let mut paths = Vec::new();
    for w in 0..windows.values.shape()[0] {
        let row: Vec<f64> = windows.values.row(w).to_vec();
        let path = dir.join(format!("{prefix}_window{w:02}.png"));
        render::save_topomap(&row, montage, 96, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
