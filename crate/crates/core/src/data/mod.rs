//! Dataset ingest: the on-disk layout, its manifest, repetition averaging,
//! train/val splitting, and zero-shot hygiene checks.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/manifest.toml
//! root/{subject}/{split}/eeg.bin        (trials x electrodes x time, f32)
//! root/{subject}/{split}/labels.bin     (i64 class index per trial)
//! root/{subject}/{split}/image_ids.txt  (one id per line)
//! root/embeddings/{provider}/{split}.bin + .ids.txt
//! ```

pub mod preprocess;
pub mod provider;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::types::{EegTrialSet, Split};

pub use preprocess::{baseline_correct, preprocess_trials};
pub use provider::{EmbeddingProvider, ProviderKind};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SplitCounts {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// "thingseeg" for the real corpus (strict count checks) or "synthetic".
    pub dataset_kind: String,
    pub subjects: Vec<String>,
    pub n_electrodes: usize,
    pub sampling_rate_hz: f64,
    pub pre_stimulus_ms: f64,
    pub post_stimulus_ms: f64,
    #[serde(default)]
    pub splits: BTreeMap<String, SplitCounts>,
    /// image id -> file path, relative to the root.
    #[serde(default)]
    pub images: BTreeMap<String, String>,
    /// Synthetic generation parameters, present when dataset_kind is
    /// "synthetic".
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("manifest.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        m.root = root;
        m.check_declared_counts()?;
        Ok(m)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        std::fs::create_dir_all(root).map_err(|e| Error::io_at(root, e))?;
        let path = root.join("manifest.toml");
        let text = toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io_at(&path, e))
    }

    fn check_declared_counts(&self) -> Result<()> {
        if self.dataset_kind == "thingseeg" {
            let train = self.splits.get("train").ok_or_else(|| {
                Error::data("thingseeg manifest must declare a train split")
            })?;
            let test = self.splits.get("test").ok_or_else(|| {
                Error::data("thingseeg manifest must declare a test split")
            })?;
            if train.n_classes != 1654 || train.images_per_class != 10 {
                return Err(Error::data(format!(
                    "thingseeg train split must be 1654 classes x 10 images, got {} x {}",
                    train.n_classes, train.images_per_class
                )));
            }
            if test.n_classes != 200 || test.images_per_class != 1 {
                return Err(Error::data(format!(
                    "thingseeg test split must be 200 classes x 1 image, got {} x {}",
                    test.n_classes, test.images_per_class
                )));
            }
        }
        Ok(())
    }

    pub fn subject_split_dir(&self, subject: &str, split: Split) -> PathBuf {
        self.root.join(subject).join(split.to_string())
    }

    pub fn embeddings_dir(&self, provider_name: &str) -> PathBuf {
        self.root.join("embeddings").join(provider_name)
    }
}

/// Write a trial set into `dir` (eeg.bin, labels.bin, image_ids.txt).
pub fn save_trial_set(dir: impl AsRef<Path>, set: &EegTrialSet) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    io::save_array_f32(dir.join("eeg.bin"), &set.data.clone().into_dyn())?;
    let labels = ndarray::Array1::from_vec(set.labels.clone()).into_dyn();
    io::save_array_i64(dir.join("labels.bin"), &labels)?;
    std::fs::write(dir.join("image_ids.txt"), set.image_ids.join("\n"))
        .map_err(|e| Error::io_at(dir.join("image_ids.txt"), e))?;
    Ok(())
}

/// Load a trial set; any non-finite sample is a hard error.
pub fn load_trial_set(
    dir: impl AsRef<Path>,
    subject: &str,
    split: Split,
    sampling_rate_hz: f64,
) -> Result<EegTrialSet> {
    let dir = dir.as_ref();
    let data = io::load_array_f64(dir.join("eeg.bin"))?
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format(format!("eeg.bin is not 3-D: {e}")))?;
    let labels_arr = io::load_array_i64(dir.join("labels.bin"))?;
    let labels: Vec<i64> = labels_arr.iter().copied().collect();
    let ids_path = dir.join("image_ids.txt");
    let ids_text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io_at(&ids_path, e))?;
    let image_ids: Vec<String> = ids_text.lines().map(|s| s.to_string()).collect();
    EegTrialSet::new(data, labels, image_ids, subject, sampling_rate_hz, split)
}

/// Load train and test for one subject and assert class disjointness.
pub fn load_subject(
    manifest: &DatasetManifest,
    subject: &str,
) -> Result<(EegTrialSet, EegTrialSet)> {
    let train = load_trial_set(
        manifest.subject_split_dir(subject, Split::Train),
        subject,
        Split::Train,
        manifest.sampling_rate_hz,
    )?;
    let test = load_trial_set(
        manifest.subject_split_dir(subject, Split::Test),
        subject,
        Split::Test,
        manifest.sampling_rate_hz,
    )?;
    assert_zero_shot_hygiene(&train, &test)?;
    Ok((train, test))
}

/// Train and test class sets must be disjoint for zero-shot evaluation.
pub fn assert_zero_shot_hygiene(train: &EegTrialSet, test: &EegTrialSet) -> Result<()> {
    let train_classes: HashSet<i64> = train.labels.iter().copied().collect();
    let overlap: Vec<i64> = test
        .labels
        .iter()
        .copied()
        .filter(|c| train_classes.contains(c))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    if !overlap.is_empty() {
        return Err(Error::data(format!(
            "train and test share classes (zero-shot hygiene violated): {overlap:?}"
        )));
    }
    Ok(())
}

/// Mean across repetitions: one output trial per image id, in first-seen
/// order. All repetitions of an image must carry the same label.
pub fn average_repetitions(set: &EegTrialSet, expected_ids: Option<&[String]>) -> Result<EegTrialSet> {
    let mut order: Vec<&String> = Vec::new();
    let mut groups: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
    for (i, id) in set.image_ids.iter().enumerate() {
        if !groups.contains_key(id) {
            order.push(id);
        }
        groups.entry(id).or_default().push(i);
    }
    if let Some(expect) = expected_ids {
        let missing: Vec<String> = expect
            .iter()
            .filter(|id| !groups.contains_key(id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingImageIds { ids: missing });
        }
    }
    let (e, t) = (set.n_electrodes(), set.n_timepoints());
    let mut data = Array3::<f64>::zeros((order.len(), e, t));
    let mut labels = Vec::with_capacity(order.len());
    let mut image_ids = Vec::with_capacity(order.len());
    for (out_idx, id) in order.iter().enumerate() {
        let idxs = &groups[*id];
        let label = set.labels[idxs[0]];
        for &i in idxs {
            if set.labels[i] != label {
                return Err(Error::data(format!(
                    "image id {id} maps to labels {label} and {}",
                    set.labels[i]
                )));
            }
        }
        let inv = 1.0 / idxs.len() as f64;
        for &i in idxs {
            let trial = set.data.slice(ndarray::s![i, .., ..]);
            let mut acc = data.slice_mut(ndarray::s![out_idx, .., ..]);
            acc.zip_mut_with(&trial, |a, &b| *a += b * inv);
        }
        labels.push(label);
        image_ids.push((*id).clone());
    }
    EegTrialSet::new(
        data,
        labels,
        image_ids,
        set.subject_id.clone(),
        set.sampling_rate_hz,
        set.split,
    )
}

/// Hold out a validation fraction from a training set. When a class has
/// several images, whole images are held out; with one image per class,
/// a fraction of its trials is held out instead.
pub fn split_train_val(
    set: &EegTrialSet,
    val_fraction: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(EegTrialSet, EegTrialSet)> {
    use rand::seq::SliceRandom;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::data("val_fraction must be in [0, 1)"));
    }
    // class -> image id -> trial indices
    let mut per_class: BTreeMap<i64, BTreeMap<&String, Vec<usize>>> = BTreeMap::new();
    for (i, (&label, id)) in set.labels.iter().zip(set.image_ids.iter()).enumerate() {
        per_class.entry(label).or_default().entry(id).or_default().push(i);
    }
    let mut val_idx: HashSet<usize> = HashSet::new();
    for (_, images) in per_class.iter() {
        if images.len() > 1 {
            let mut ids: Vec<&&String> = images.keys().collect();
            let n_val = ((images.len() as f64) * val_fraction).round() as usize;
            let n_val = n_val.min(images.len() - 1);
            ids.shuffle(rng);
            for id in ids.into_iter().take(n_val) {
                val_idx.extend(images[*id].iter().copied());
            }
        } else {
            let trials = images.values().next().unwrap();
            let n_val = ((trials.len() as f64) * val_fraction).round() as usize;
            let n_val = n_val.min(trials.len().saturating_sub(1));
            let mut order: Vec<usize> = trials.clone();
            order.shuffle(rng);
            val_idx.extend(order.into_iter().take(n_val));
        }
    }
    let take = |keep_val: bool| -> Result<EegTrialSet> {
        let idxs: Vec<usize> = (0..set.n_trials())
            .filter(|i| val_idx.contains(i) == keep_val)
            .collect();
        let mut data = Array3::<f64>::zeros((idxs.len(), set.n_electrodes(), set.n_timepoints()));
        let mut labels = Vec::with_capacity(idxs.len());
        let mut image_ids = Vec::with_capacity(idxs.len());
        for (o, &i) in idxs.iter().enumerate() {
            data.slice_mut(ndarray::s![o, .., ..])
                .assign(&set.data.slice(ndarray::s![i, .., ..]));
            labels.push(set.labels[i]);
            image_ids.push(set.image_ids[i].clone());
        }
        EegTrialSet::new(
            data,
            labels,
            image_ids,
            set.subject_id.clone(),
            set.sampling_rate_hz,
            if keep_val { Split::Val } else { Split::Train },
        )
    };
    Ok((take(false)?, take(true)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn set_with(ids: &[&str], labels: &[i64]) -> EegTrialSet {
        let n = ids.len();
        let mut data = Array3::<f64>::zeros((n, 2, 4));
        for (i, mut trial) in data.outer_iter_mut().enumerate() {
            trial.mapv_inplace(|_| i as f64 + 1.0);
        }
        EegTrialSet::new(
            data,
            labels.to_vec(),
            ids.iter().map(|s| s.to_string()).collect(),
            "s1",
            250.0,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn averaging_identical_repetitions_is_identity() {
        let mut set = set_with(&["a", "a"], &[0, 0]);
        let first = set.data.slice(ndarray::s![0, .., ..]).to_owned();
        set.data.slice_mut(ndarray::s![1, .., ..]).assign(&first);
        let avg = average_repetitions(&set, None).unwrap();
        assert_eq!(avg.n_trials(), 1);
        for (a, b) in avg.data.iter().zip(set.data.slice(ndarray::s![0, .., ..]).iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn opposite_repetitions_average_to_zero() {
        let mut set = set_with(&["a", "a"], &[0, 0]);
        let first = set.data.slice(ndarray::s![0, .., ..]).to_owned();
        set.data.slice_mut(ndarray::s![1, .., ..]).assign(&first.mapv(|v| -v));
        let avg = average_repetitions(&set, None).unwrap();
        assert!(avg.data.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn four_repetitions_match_loop_oracle() {
        use rand::Rng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut set = set_with(&["a", "a", "a", "a"], &[0, 0, 0, 0]);
        set.data.mapv_inplace(|_| r.gen_range(-1.0..1.0));
        let avg = average_repetitions(&set, None).unwrap();
        for e in 0..2 {
            for t in 0..4 {
                let mut acc = 0.0;
                for i in 0..4 {
                    acc += set.data[[i, e, t]];
                }
                assert!((avg.data[[0, e, t]] - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_group_lists_absent_ids() {
        let set = set_with(&["a", "b"], &[0, 1]);
        let expected = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let err = average_repetitions(&set, Some(&expected)).unwrap_err().to_string();
        assert!(err.contains('c'), "{err}");
    }

    #[test]
    fn conflicting_labels_rejected() {
        let set = set_with(&["a", "a"], &[0, 1]);
        assert!(average_repetitions(&set, None).is_err());
    }

    #[test]
    fn hygiene_rejects_class_overlap() {
        let train = set_with(&["a", "b"], &[0, 1]);
        let test = set_with(&["c", "d"], &[1, 2]);
        assert!(assert_zero_shot_hygiene(&train, &test).is_err());
        let test_ok = set_with(&["c", "d"], &[2, 3]);
        assert!(assert_zero_shot_hygiene(&train, &test_ok).is_ok());
    }

    #[test]
    fn trial_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let set = set_with(&["a", "b", "c"], &[0, 1, 2]);
        save_trial_set(dir.path(), &set).unwrap();
        let back = load_trial_set(dir.path(), "s1", Split::Train, 250.0).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.image_ids, set.image_ids);
        assert_eq!(back.data, set.data); // integer-valued, f32-exact
    }

    #[test]
    fn nan_on_disk_is_a_hard_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = set_with(&["a"], &[0]);
        set.data[[0, 0, 0]] = 1.0;
        save_trial_set(dir.path(), &set).unwrap();
        // corrupt the payload with a NaN
        let eeg_path = dir.path().join("eeg.bin");
        let mut bytes = std::fs::read(&eeg_path).unwrap();
        let nan = f32::NAN.to_le_bytes();
        let off = bytes.len() - 4;
        bytes[off..].copy_from_slice(&nan);
        std::fs::write(&eeg_path, bytes).unwrap();
        assert!(load_trial_set(dir.path(), "s1", Split::Train, 250.0).is_err());
    }

    #[test]
    fn manifest_roundtrip_and_thingseeg_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest {
            dataset_kind: "synthetic".into(),
            subjects: vec!["synthetic".into()],
            n_electrodes: 16,
            sampling_rate_hz: 250.0,
            pre_stimulus_ms: 200.0,
            post_stimulus_ms: 1000.0,
            splits: BTreeMap::new(),
            images: BTreeMap::new(),
            synthetic: Some(SyntheticSpec::default()),
            root: PathBuf::new(),
        };
        m.save(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back.dataset_kind, "synthetic");
        assert_eq!(back.n_electrodes, 16);

        // real-corpus counts are enforced
        m.dataset_kind = "thingseeg".into();
        m.splits.insert(
            "train".into(),
            SplitCounts { n_classes: 10, images_per_class: 10, n_trials: 100 },
        );
        m.splits.insert(
            "test".into(),
            SplitCounts { n_classes: 200, images_per_class: 1, n_trials: 200 },
        );
        m.save(dir.path()).unwrap();
        assert!(DatasetManifest::load(dir.path()).is_err());
    }

    #[test]
    fn train_val_split_single_image_classes() {
        let ids: Vec<String> = (0..20).map(|i| format!("c{}", i / 10)).collect();
        let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let labels: Vec<i64> = (0..20).map(|i| (i / 10) as i64).collect();
        let set = set_with(&id_refs, &labels);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (train, val) = split_train_val(&set, 0.2, &mut rng).unwrap();
        assert_eq!(train.n_trials() + val.n_trials(), 20);
        assert_eq!(val.n_trials(), 4); // 20% of 10 trials per class, 2 classes
        assert_eq!(val.split, Split::Val);
    }

    #[test]
    fn train_val_split_multi_image_classes_holds_out_whole_images() {
        // one class, 10 images, 2 trials each
        let ids: Vec<String> = (0..20).map(|i| format!("img{}", i / 2)).collect();
        let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let labels = vec![0i64; 20];
        let set = set_with(&id_refs, &labels);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (train, val) = split_train_val(&set, 0.1, &mut rng).unwrap();
        assert_eq!(val.n_trials(), 2); // one whole image held out
        let val_ids: HashSet<&String> = val.image_ids.iter().collect();
        for id in &train.image_ids {
            assert!(!val_ids.contains(id), "image {id} leaked across the split");
        }
    }
}
