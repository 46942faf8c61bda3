//! Frozen image-embedding providers.
//!
//! Three kinds: a precomputed file (the reproduction path), an external
//! encoder command (transport for an off-the-shelf image model), and a
//! deterministic random-projection stub for desk-scale runs. All outputs
//! are L2-normalized, quantized through the 32-bit disk format so that
//! in-memory values are always bitwise equal to the cache file, and
//! deterministic per image id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::types::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderKind {
    PrecomputedFile,
    ExternalEncoder { command: String },
    RandomProjectionStub,
}

#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    pub kind: ProviderKind,
    pub embedding_dim: usize,
    /// Directory holding `{tag}.bin` and `{tag}.ids.txt` cache files.
    pub cache_dir: Option<PathBuf>,
    /// image id -> image file path, needed by the external encoder.
    pub image_paths: HashMap<String, PathBuf>,
}

impl EmbeddingProvider {
    pub fn stub(embedding_dim: usize) -> Self {
        EmbeddingProvider {
            kind: ProviderKind::RandomProjectionStub,
            embedding_dim,
            cache_dir: None,
            image_paths: HashMap::new(),
        }
    }

    pub fn precomputed(embedding_dim: usize, cache_dir: impl Into<PathBuf>) -> Self {
        EmbeddingProvider {
            kind: ProviderKind::PrecomputedFile,
            embedding_dim,
            cache_dir: Some(cache_dir.into()),
            image_paths: HashMap::new(),
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    fn cache_paths(&self, tag: &str) -> Option<(PathBuf, PathBuf)> {
        self.cache_dir
            .as_ref()
            .map(|d| (d.join(format!("{tag}.bin")), d.join(format!("{tag}.ids.txt"))))
    }

    /// Embeddings for `image_ids` in order, cached under `tag` on first
    /// computation. Rows are unit-norm within 1e-6.
    pub fn get_image_embeddings(&self, image_ids: &[String], tag: &str) -> Result<EmbeddingMatrix> {
        if let Some((bin, ids)) = self.cache_paths(tag) {
            if bin.exists() && ids.exists() {
                if let Some(m) = self.read_cache(&bin, &ids, image_ids)? {
                    return Ok(m);
                }
            }
        }
        let values = match &self.kind {
            ProviderKind::RandomProjectionStub => self.stub_rows(image_ids),
            ProviderKind::PrecomputedFile => {
                let (bin, ids) = self.cache_paths(tag).ok_or_else(|| {
                    Error::data("precomputed provider needs a cache directory")
                })?;
                return self
                    .read_cache(&bin, &ids, image_ids)?
                    .ok_or_else(|| Error::data(format!(
                        "precomputed embeddings at {} do not cover the requested ids",
                        bin.display()
                    )));
            }
            ProviderKind::ExternalEncoder { command } => self.external_rows(command, image_ids)?,
        };
        let mut m = EmbeddingMatrix::normalize(values).values;
        // quantize through the disk format so memory and cache agree bitwise
        m.mapv_inplace(|v| (v as f32) as f64);
        if let Some((bin, ids)) = self.cache_paths(tag) {
            if let Some(dir) = bin.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
            }
            io::save_array_f32(&bin, &m.clone().into_dyn())?;
            std::fs::write(&ids, image_ids.join("\n")).map_err(|e| Error::io_at(&ids, e))?;
        }
        EmbeddingMatrix::new(m, true)
    }

    fn read_cache(
        &self,
        bin: &Path,
        ids_path: &Path,
        image_ids: &[String],
    ) -> Result<Option<EmbeddingMatrix>> {
        let stored_ids = std::fs::read_to_string(ids_path).map_err(|e| Error::io_at(ids_path, e))?;
        let stored: Vec<&str> = stored_ids.lines().collect();
        let index: HashMap<&str, usize> =
            stored.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let mut rows = Vec::with_capacity(image_ids.len());
        for id in image_ids {
            match index.get(id.as_str()) {
                Some(&r) => rows.push(r),
                None => return Ok(None),
            }
        }
        let all = io::load_array_f64(bin)?;
        let all = all
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Format(format!("embedding cache is not 2-D: {e}")))?;
        if all.shape()[0] != stored.len() {
            return Err(Error::Format(format!(
                "embedding cache rows {} do not match id list {}",
                all.shape()[0],
                stored.len()
            )));
        }
        if all.shape()[1] != self.embedding_dim {
            return Err(Error::shape(
                format!("embedding_dim {}", self.embedding_dim),
                format!("{}", all.shape()[1]),
            ));
        }
        let mut out = Array2::<f64>::zeros((image_ids.len(), self.embedding_dim));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&all.row(r));
        }
        Ok(Some(EmbeddingMatrix::new(out, true)?))
    }

    fn stub_rows(&self, image_ids: &[String]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((image_ids.len(), self.embedding_dim));
        for (i, id) in image_ids.iter().enumerate() {
            let mut h = Sha256::new();
            h.update(b"embedding-stub:");
            h.update(id.as_bytes());
            let digest = h.finalize();
            let mut key = [0u8; 32];
            key.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(key);
            for j in 0..self.embedding_dim {
                out[[i, j]] = StandardNormal.sample(&mut rng);
            }
        }
        out
    }

    /// Contract: the command is run as `sh -c "<command> <request> <output>"`,
    /// where the request file lists one image path per line and the output
    /// must be an (n x d) float array container.
    fn external_rows(&self, command: &str, image_ids: &[String]) -> Result<Array2<f64>> {
        let missing: Vec<String> = image_ids
            .iter()
            .filter(|id| !self.image_paths.contains_key(*id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingImageIds { ids: missing });
        }
        let dir = tempfile_dir()?;
        let request = dir.join("images.txt");
        let output = dir.join("embeddings.bin");
        let lines: Vec<String> = image_ids
            .iter()
            .map(|id| self.image_paths[id].display().to_string())
            .collect();
        std::fs::write(&request, lines.join("\n")).map_err(|e| Error::io_at(&request, e))?;
        let status = std::process::Command::new("sh")
            .arg("-c")
            .arg(format!("{command} {} {}", request.display(), output.display()))
            .status()?;
        if !status.success() {
            return Err(Error::data(format!(
                "external encoder command failed with {status}"
            )));
        }
        let arr = io::load_array_f64(&output)?;
        let arr = arr
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Format(format!("external encoder output is not 2-D: {e}")))?;
        if arr.shape() != [image_ids.len(), self.embedding_dim] {
            return Err(Error::shape(
                format!("({}, {})", image_ids.len(), self.embedding_dim),
                format!("{:?}", arr.shape()),
            ));
        }
        Ok(arr)
    }
}

fn tempfile_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("muse-embed-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    Ok(dir)
}
