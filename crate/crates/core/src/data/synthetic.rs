//! Synthetic paired EEG/embedding generator for desk-scale verification.
//!
//! Each class gets a latent vector on the unit sphere. Its image embedding
//! is the zero-padded latent plus noise, re-normalized. Each EEG trial
//! mixes the latent through a fixed random electrode matrix and per-latent
//! smooth temporal envelopes, plus sensor noise:
//!
//! ```text
//! eeg(e, t) = sum_j A[e, j] · z_k[j] · g_j(t) + sigma_E · noise(e, t)
//! ```
//!
//! Classes are partitioned into disjoint train/test sets so retrieval on
//! the test classes is genuinely zero-shot.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::seed::SeedStream;
use crate::types::{EegTrialSet, EmbeddingMatrix, Split};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_train_classes: usize,
    pub trials_per_class_train: usize,
    pub trials_per_class_test: usize,
    pub latent_dim: usize,
    pub n_electrodes: usize,
    pub n_timepoints: usize,
    pub embedding_dim: usize,
    pub mixing_seed: u64,
    pub sigma_eeg: f64,
    pub sigma_emb: f64,
    pub sampling_rate_hz: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 100,
            n_train_classes: 80,
            trials_per_class_train: 8,
            trials_per_class_test: 8,
            latent_dim: 8,
            n_electrodes: 16,
            n_timepoints: 64,
            embedding_dim: 32,
            mixing_seed: 7,
            sigma_eeg: 0.1,
            sigma_emb: 0.05,
            sampling_rate_hz: 250.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim > self.embedding_dim {
            return Err(Error::data(format!(
                "latent_dim {} exceeds embedding_dim {}",
                self.latent_dim, self.embedding_dim
            )));
        }
        if self.n_train_classes < 2 || self.n_classes < self.n_train_classes + 2 {
            return Err(Error::data(format!(
                "need at least 2 train and 2 test classes, got {} of {}",
                self.n_train_classes, self.n_classes
            )));
        }
        Ok(())
    }
}

pub struct SyntheticData {
    pub train: EegTrialSet,
    pub test: EegTrialSet,
    /// One embedding per train class, in class order.
    pub train_embeddings: EmbeddingMatrix,
    pub train_image_ids: Vec<String>,
    /// One embedding per test class, in class order.
    pub test_embeddings: EmbeddingMatrix,
    pub test_image_ids: Vec<String>,
    pub train_classes: Vec<i64>,
    pub test_classes: Vec<i64>,
}

pub fn synthetic_image_id(class: usize) -> String {
    format!("synth_{class:05}")
}

/// Per-latent temporal envelopes: Gaussian bumps with staggered centers.
pub fn envelopes(latent_dim: usize, n_timepoints: usize) -> Array2<f64> {
    let t = n_timepoints as f64;
    let width = 0.75 * t / latent_dim as f64;
    Array2::from_shape_fn((latent_dim, n_timepoints), |(j, ti)| {
        let center = (j as f64 + 0.5) * t / latent_dim as f64;
        let d = ti as f64 - center;
        (-d * d / (2.0 * width * width)).exp()
    })
}

/// The fixed electrode mixing matrix; a function of the mixing seed only.
pub fn mixing_matrix(spec: &SyntheticSpec) -> Array2<f64> {
    let mut rng = SeedStream::new(spec.mixing_seed).derive("synthetic.mixing");
    Array2::from_shape_simple_fn((spec.n_electrodes, spec.latent_dim), || {
        StandardNormal.sample(&mut rng)
    })
}

fn unit_sphere_vector(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Noiseless EEG trial for class latent `z`: (A diag(z) G) as (E, T).
pub fn clean_trial(a: &Array2<f64>, g: &Array2<f64>, z: &Array1<f64>) -> Array2<f64> {
    let e = a.shape()[0];
    let t = g.shape()[1];
    let latent = z.len();
    let mut out = Array2::<f64>::zeros((e, t));
    for j in 0..latent {
        for ei in 0..e {
            let w = a[[ei, j]] * z[j];
            for ti in 0..t {
                out[[ei, ti]] += w * g[[j, ti]];
            }
        }
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let stream = SeedStream::new(seed);
    let mut latent_rng = stream.derive("synthetic.latents");
    let mut emb_rng = stream.derive("synthetic.emb_noise");
    let mut eeg_rng = stream.derive("synthetic.eeg_noise");

    let a = mixing_matrix(spec);
    let g = envelopes(spec.latent_dim, spec.n_timepoints);

    // per-class latents and embeddings, quantized to the f32 disk format
    let mut latents = Vec::with_capacity(spec.n_classes);
    let mut emb = Array2::<f64>::zeros((spec.n_classes, spec.embedding_dim));
    for k in 0..spec.n_classes {
        let z = unit_sphere_vector(spec.latent_dim, &mut latent_rng);
        for j in 0..spec.latent_dim {
            emb[[k, j]] = z[j];
        }
        for j in 0..spec.embedding_dim {
            let noise: f64 = StandardNormal.sample(&mut emb_rng);
            emb[[k, j]] += spec.sigma_emb * noise;
        }
        latents.push(z);
    }
    let mut emb = EmbeddingMatrix::normalize(emb).values;
    emb.mapv_inplace(|v| (v as f32) as f64);

    let make_split = |classes: std::ops::Range<usize>,
                      trials_per_class: usize,
                      split: Split,
                      eeg_rng: &mut rand_chacha::ChaCha8Rng|
     -> Result<EegTrialSet> {
        let n_trials = classes.len() * trials_per_class;
        let mut data = Array3::<f64>::zeros((n_trials, spec.n_electrodes, spec.n_timepoints));
        let mut labels = Vec::with_capacity(n_trials);
        let mut image_ids = Vec::with_capacity(n_trials);
        let mut idx = 0;
        for k in classes {
            let clean = clean_trial(&a, &g, &latents[k]);
            for _ in 0..trials_per_class {
                let mut trial = clean.clone();
                if spec.sigma_eeg > 0.0 {
                    for v in trial.iter_mut() {
                        let noise: f64 = StandardNormal.sample(eeg_rng);
                        *v += spec.sigma_eeg * noise;
                    }
                }
                data.slice_mut(ndarray::s![idx, .., ..]).assign(&trial);
                labels.push(k as i64);
                image_ids.push(synthetic_image_id(k));
                idx += 1;
            }
        }
        EegTrialSet::new(data, labels, image_ids, "synthetic", spec.sampling_rate_hz, split)
    };

    let train = make_split(0..spec.n_train_classes, spec.trials_per_class_train, Split::Train, &mut eeg_rng)?;
    let test = make_split(
        spec.n_train_classes..spec.n_classes,
        spec.trials_per_class_test,
        Split::Test,
        &mut eeg_rng,
    )?;

    let train_embeddings = EmbeddingMatrix::new(
        emb.slice(ndarray::s![..spec.n_train_classes, ..]).to_owned(),
        true,
    )?;
    let test_embeddings = EmbeddingMatrix::new(
        emb.slice(ndarray::s![spec.n_train_classes.., ..]).to_owned(),
        true,
    )?;

    Ok(SyntheticData {
        train,
        test,
        train_embeddings,
        train_image_ids: (0..spec.n_train_classes).map(synthetic_image_id).collect(),
        test_embeddings,
        test_image_ids: (spec.n_train_classes..spec.n_classes).map(synthetic_image_id).collect(),
        train_classes: (0..spec.n_train_classes as i64).collect(),
        test_classes: (spec.n_train_classes as i64..spec.n_classes as i64).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 6,
            n_train_classes: 4,
            trials_per_class_train: 3,
            trials_per_class_test: 2,
            latent_dim: 4,
            n_electrodes: 8,
            n_timepoints: 32,
            embedding_dim: 12,
            mixing_seed: 1,
            sigma_eeg: 0.1,
            sigma_emb: 0.05,
            sampling_rate_hz: 250.0,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = tiny_spec();
        let a = generate_synthetic(&spec, 42).unwrap();
        let b = generate_synthetic(&spec, 42).unwrap();
        for (x, y) in a.train.data.iter().zip(b.train.data.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a
            .test_embeddings
            .values
            .iter()
            .zip(b.test_embeddings.values.iter())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn noiseless_trials_of_a_class_are_identical() {
        let mut spec = tiny_spec();
        spec.sigma_eeg = 0.0;
        spec.sigma_emb = 0.0;
        let d = generate_synthetic(&spec, 0).unwrap();
        // first two trials share class 0
        assert_eq!(d.train.labels[0], d.train.labels[1]);
        for e in 0..spec.n_electrodes {
            for t in 0..spec.n_timepoints {
                assert_eq!(d.train.data[[0, e, t]], d.train.data[[1, e, t]]);
            }
        }
        assert_eq!(d.train.image_ids[0], d.train.image_ids[1]);
    }

    #[test]
    fn class_splits_are_disjoint() {
        let d = generate_synthetic(&tiny_spec(), 5).unwrap();
        let train: std::collections::HashSet<i64> = d.train.labels.iter().copied().collect();
        let test: std::collections::HashSet<i64> = d.test.labels.iter().copied().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let d = generate_synthetic(&tiny_spec(), 9).unwrap();
        for row in d.train_embeddings.values.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn latent_is_recoverable_from_noiseless_trial() {
        // Least-squares decode of z from one clean trial using the known
        // mixing matrix and envelopes. vec(eeg) = G_big z with
        // G_big[(e,t), j] = A[e,j] g_j(t).
        let mut spec = tiny_spec();
        spec.sigma_eeg = 0.0;
        let d = generate_synthetic(&spec, 3).unwrap();
        let a = mixing_matrix(&spec);
        let g = envelopes(spec.latent_dim, spec.n_timepoints);

        let (e, t, l) = (spec.n_electrodes, spec.n_timepoints, spec.latent_dim);
        let mut big = Array2::<f64>::zeros((e * t, l));
        for ei in 0..e {
            for ti in 0..t {
                for j in 0..l {
                    big[[ei * t + ti, j]] = a[[ei, j]] * g[[j, ti]];
                }
            }
        }
        let trial = d.train.data.slice(ndarray::s![0, .., ..]);
        let y = Array1::from_iter(trial.iter().copied());

        // normal equations solved by Gaussian elimination
        let ata = big.t().dot(&big);
        let aty = big.t().dot(&y);
        let mut m = ata.clone();
        let mut rhs = aty.clone();
        for col in 0..l {
            let mut piv = col;
            for r in col + 1..l {
                if m[[r, col]].abs() > m[[piv, col]].abs() {
                    piv = r;
                }
            }
            for c in 0..l {
                let tmp = m[[col, c]];
                m[[col, c]] = m[[piv, c]];
                m[[piv, c]] = tmp;
            }
            let tmp = rhs[col];
            rhs[col] = rhs[piv];
            rhs[piv] = tmp;
            for r in col + 1..l {
                let f = m[[r, col]] / m[[col, col]];
                for c in col..l {
                    m[[r, c]] -= f * m[[col, c]];
                }
                rhs[r] -= f * rhs[col];
            }
        }
        let mut z_hat = Array1::<f64>::zeros(l);
        for r in (0..l).rev() {
            let mut acc = rhs[r];
            for c in r + 1..l {
                acc -= m[[r, c]] * z_hat[c];
            }
            z_hat[r] = acc / m[[r, r]];
        }

        // reconstruct the clean trial from the decoded latent
        let rebuilt = clean_trial(&a, &g, &z_hat);
        let mut err = 0.0f64;
        for (x, y) in rebuilt.iter().zip(trial.iter()) {
            err = err.max((x - y).abs());
        }
        assert!(err < 1e-8, "reconstruction error {err}");
    }
}
