//! The training loop: mini-batch descent on the symmetric contrastive
//! objective with adaptive-moment updates, per-epoch validation, and
//! best-validation checkpointing. Image embeddings enter as constants;
//! only the encoder, projection head, tau, and beta receive gradients.

pub mod checkpoint;
pub mod optimizer;
pub mod seed;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::ExperimentConfig;
use crate::data::provider::EmbeddingProvider;
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::losses::{sk_infonce_node, sk_infonce_with, LossNodes, SkOptions};
use crate::params::ParamStore;
use crate::registry::LossKind;
use crate::types::{EegTrialSet, EmbeddingMatrix, LossParams, LossValue};

pub use checkpoint::{Checkpoint, MetricsSummary, CHECKPOINT_FORMAT_VERSION};
pub use optimizer::AdamW;
pub use seed::SeedStream;

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_e: f64,
    pub loss_i: f64,
    pub loss_sk: f64,
    pub tau: f64,
    pub beta: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepRecord>,
    /// (epoch, val loss) per epoch, in order.
    pub val_history: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
}

/// Mutable training state: architecture handle, parameters, optimizer
/// moments, and the clamps applied after every step.
pub struct TrainState {
    pub model: EncoderModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub seeds: SeedStream,
    cfg: ExperimentConfig,
    tau_idx: usize,
    beta_idx: usize,
    sk_opts: SkOptions,
}

impl TrainState {
    /// Initialize parameters, tau, and beta from the config seed. For a
    /// plain InfoNCE run beta is frozen at zero on the same code path.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let cfg = cfg.clone().validate()?;
        let seeds = SeedStream::new(cfg.seed);
        let mut init_rng = seeds.derive("param_init");
        let mut store = ParamStore::new();
        let model = EncoderModel::from_config(&cfg, &mut store, &mut init_rng)?;
        let loss_kind = cfg.effective_loss()?;
        let (beta_init, beta_trainable) = match loss_kind {
            LossKind::InfoNce => (0.0, false),
            LossKind::SkInfoNce => (cfg.beta_init, cfg.loss.beta_trainable),
        };
        let tau_idx = store.add(
            "loss.tau",
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), cfg.tau_init),
            true,
        );
        let beta_idx = store.add(
            "loss.beta",
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), beta_init),
            beta_trainable,
        );
        let opt = AdamW::new(cfg.optimizer.clone(), &store);
        let sk_opts = SkOptions::from(&cfg.loss);
        Ok(TrainState {
            model,
            store,
            opt,
            epoch: 0,
            best_val_loss: f64::INFINITY,
            seeds,
            cfg,
            tau_idx,
            beta_idx,
            sk_opts,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.tau_idx).iter().next().copied().unwrap()
    }

    pub fn beta(&self) -> f64 {
        self.store.value(self.beta_idx).iter().next().copied().unwrap()
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            tau: self.tau(),
            beta: self.beta(),
            tau_scale_cap: self.cfg.loss.tau_scale_cap,
            beta_trainable: self.store.entry(self.beta_idx).trainable,
            beta_min: self.cfg.loss.beta_min,
        }
    }

    /// Clamp tau so exp(tau) stays under the cap, and beta to its floor.
    fn clamp_scalars(&mut self) {
        let cap = self.cfg.loss.tau_scale_cap.ln();
        let tau = self.store.value_mut(self.tau_idx);
        if tau[ndarray::IxDyn(&[])] > cap {
            tau[ndarray::IxDyn(&[])] = cap;
        }
        if self.store.entry(self.beta_idx).trainable {
            if let Some(lo) = self.cfg.loss.beta_min {
                let beta = self.store.value_mut(self.beta_idx);
                if beta[ndarray::IxDyn(&[])] < lo {
                    beta[ndarray::IxDyn(&[])] = lo;
                }
            }
        }
    }

    /// One optimizer step on a batch. Returns the loss components measured
    /// at the pre-step parameters.
    pub fn step(
        &mut self,
        eeg: &Array4<f64>,
        image_emb: &Array2<f64>,
        dropout_rng: &mut rand_chacha::ChaCha8Rng,
    ) -> LossValue {
        let (tau, beta) = (self.tau(), self.beta());
        let mut g = Graph::new(true);
        let bound = self.store.bind(&mut g);
        let x = g.constant(eeg.clone().into_dyn());
        let i_f = g.constant(image_emb.clone().into_dyn());
        let (e_f, _fwd) = self.model.embed(&mut g, &bound, &mut self.store, x, dropout_rng);
        let LossNodes { total, loss_e, loss_i, loss_sk } = sk_infonce_node(
            &mut g,
            e_f,
            i_f,
            bound.node(self.tau_idx),
            bound.node(self.beta_idx),
            &self.sk_opts,
        );
        g.backward(total);
        let value = LossValue {
            total: g.scalar(total),
            loss_e: g.scalar(loss_e),
            loss_i: g.scalar(loss_i),
            loss_sk: g.scalar(loss_sk),
            tau,
            beta,
        };
        let grads = bound.gradients(&g, &self.store);
        self.opt.step(&mut self.store, &grads);
        self.clamp_scalars();
        value
    }

    /// Full-pass mean loss in inference mode; no parameter updates.
    pub fn validate(&self, set: &EegTrialSet, embeddings: &AlignedEmbeddings) -> Result<f64> {
        validate_model(
            &self.model,
            &self.store,
            set,
            embeddings,
            self.tau(),
            self.beta(),
            &self.sk_opts,
            self.cfg.batch_size,
        )
    }
}

/// Image embeddings resolved to per-trial rows.
pub struct AlignedEmbeddings {
    matrix: EmbeddingMatrix,
    row_of: HashMap<String, usize>,
}

impl AlignedEmbeddings {
    /// Fetch embeddings for all unique ids in the given sets, in first-seen
    /// order, under one cache tag.
    pub fn fetch(provider: &EmbeddingProvider, sets: &[&EegTrialSet], tag: &str) -> Result<Self> {
        let mut ids: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for set in sets {
            for id in &set.image_ids {
                if seen.insert(id.clone()) {
                    ids.push(id.clone());
                }
            }
        }
        let matrix = provider.get_image_embeddings(&ids, tag)?;
        let row_of = ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        Ok(AlignedEmbeddings { matrix, row_of })
    }

    pub fn from_matrix(ids: &[String], matrix: EmbeddingMatrix) -> Self {
        let row_of = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        AlignedEmbeddings { matrix, row_of }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Rows for the chosen trials of a set.
    pub fn rows_for(&self, set: &EegTrialSet, trial_idx: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((trial_idx.len(), self.matrix.dim()));
        for (o, &i) in trial_idx.iter().enumerate() {
            let id = &set.image_ids[i];
            let row = self
                .row_of
                .get(id)
                .ok_or_else(|| Error::MissingImageIds { ids: vec![id.clone()] })?;
            out.row_mut(o).assign(&self.matrix.values.row(*row));
        }
        Ok(out)
    }
}

/// Gather chosen trials into a (B, 1, E, T) input batch.
pub fn batch_eeg(set: &EegTrialSet, idx: &[usize]) -> Array4<f64> {
    let (e, t) = (set.n_electrodes(), set.n_timepoints());
    let mut out = Array4::<f64>::zeros((idx.len(), 1, e, t));
    for (o, &i) in idx.iter().enumerate() {
        out.slice_mut(ndarray::s![o, 0, .., ..])
            .assign(&set.data.slice(ndarray::s![i, .., ..]));
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn validate_model(
    model: &EncoderModel,
    store: &ParamStore,
    set: &EegTrialSet,
    embeddings: &AlignedEmbeddings,
    tau: f64,
    beta: f64,
    sk_opts: &SkOptions,
    batch_size: usize,
) -> Result<f64> {
    if set.n_trials() < 2 {
        return Err(Error::data("validation set needs at least 2 trials"));
    }
    let bsz = batch_size.max(2).min(set.n_trials());
    let mut total = 0.0;
    let mut weight = 0usize;
    let idx: Vec<usize> = (0..set.n_trials()).collect();
    for chunk in idx.chunks(bsz) {
        if chunk.len() < 2 {
            continue;
        }
        let eeg = batch_eeg(set, chunk);
        let e_f = model.embed_batch(store, &eeg)?;
        let i_rows = embeddings.rows_for(set, chunk)?;
        let i_f = EmbeddingMatrix { values: i_rows, normalized: true };
        let params = LossParams {
            tau,
            beta,
            tau_scale_cap: f64::INFINITY,
            beta_trainable: false,
            beta_min: None,
        };
        let v = sk_infonce_with(&e_f, &i_f, &params, sk_opts)?;
        total += v.total * chunk.len() as f64;
        weight += chunk.len();
    }
    Ok(total / weight as f64)
}

/// Train up to `cfg.epochs` epochs, checkpointing whenever the validation
/// loss improves. `ckpt_path`, when given, always holds the best state.
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &EegTrialSet,
    val_set: &EegTrialSet,
    provider: &EmbeddingProvider,
    ckpt_path: Option<&Path>,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = cfg.clone().validate()?;
    let embeddings = AlignedEmbeddings::fetch(provider, &[train_set, val_set], "train")?;
    if embeddings.dim() != cfg.embedding_dim {
        return Err(Error::shape(
            format!("embedding_dim {}", cfg.embedding_dim),
            format!("{}", embeddings.dim()),
        ));
    }
    train_with_embeddings(&cfg, train_set, val_set, &embeddings, ckpt_path, metrics_path)
}

/// Training entry point with embeddings already resolved.
pub fn train_with_embeddings(
    cfg: &ExperimentConfig,
    train_set: &EegTrialSet,
    val_set: &EegTrialSet,
    embeddings: &AlignedEmbeddings,
    ckpt_path: Option<&Path>,
    metrics_path: Option<&Path>,
) -> Result<TrainOutcome> {
    if train_set.n_trials() == 0 {
        return Err(Error::data("training set is empty"));
    }
    if val_set.n_trials() == 0 {
        return Err(Error::data("validation set is empty"));
    }
    let mut state = TrainState::new(cfg)?;
    let cfg = state.cfg.clone();
    let mut warnings = Vec::new();

    let mut batch_size = cfg.batch_size;
    if batch_size > train_set.n_trials() {
        warnings.push(format!(
            "batch_size {} exceeds {} training trials; clamped",
            batch_size,
            train_set.n_trials()
        ));
        batch_size = train_set.n_trials();
    }
    if batch_size < 2 {
        return Err(Error::data("need a batch size of at least 2"));
    }

    let mut metrics_file = match metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
            }
            Some(std::io::BufWriter::new(
                std::fs::File::create(p).map_err(|e| Error::io_at(p, e))?,
            ))
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut final_train_loss = f64::NAN;
    let mut steps_done = 0usize;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..train_set.n_trials()).collect();
        let mut shuffle_rng = state.seeds.derive_indexed("shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = state.seeds.derive_indexed("dropout", epoch as u64);

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for (step, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // a trailing singleton cannot form a contrastive batch
            }
            let eeg = batch_eeg(train_set, chunk);
            let i_rows = embeddings.rows_for(train_set, chunk)?;
            let value = state.step(&eeg, &i_rows, &mut dropout_rng);
            let rec = StepRecord {
                epoch,
                step,
                loss_total: value.total,
                loss_e: value.loss_e,
                loss_i: value.loss_i,
                loss_sk: value.loss_sk,
                tau: value.tau,
                beta: value.beta,
            };
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(f, "{line}")?;
            }
            metrics.push(rec);
            epoch_loss += value.total;
            epoch_batches += 1;
            steps_done += 1;
        }
        if epoch_batches > 0 {
            final_train_loss = epoch_loss / epoch_batches as f64;
        }

        let val_loss = state.validate(val_set, embeddings)?;
        val_history.push((epoch, val_loss));
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            let ckpt = Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                config: cfg.clone(),
                epoch,
                seed: cfg.seed,
                metrics: MetricsSummary {
                    epochs_run: epoch + 1,
                    best_epoch: epoch,
                    best_val_loss: val_loss,
                    final_train_loss,
                    steps: steps_done,
                },
                store: state.store.clone(),
            };
            if let Some(p) = ckpt_path {
                ckpt.save(p)?;
            }
            best = Some(ckpt);
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }

    let checkpoint = best.ok_or_else(|| Error::data("no epoch produced a checkpoint"))?;
    Ok(TrainOutcome { checkpoint, metrics, val_history, warnings })
}

/// Rebuild a model and its parameters from a checkpoint. The architecture
/// is re-derived from the stored config; values are verified by name and
/// shape before being swapped in.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(EncoderModel, ParamStore)> {
    let cfg = ckpt.config.clone().validate()?;
    let seeds = SeedStream::new(cfg.seed);
    let mut init_rng = seeds.derive("param_init");
    let mut store = ParamStore::new();
    let model = EncoderModel::from_config(&cfg, &mut store, &mut init_rng)?;
    store.add("loss.tau", ndarray::ArrayD::zeros(ndarray::IxDyn(&[])), true);
    store.add("loss.beta", ndarray::ArrayD::zeros(ndarray::IxDyn(&[])), false);
    if store.len() != ckpt.store.len() {
        return Err(Error::Checkpoint(format!(
            "architecture expects {} parameter entries, checkpoint has {}",
            store.len(),
            ckpt.store.len()
        )));
    }
    for i in 0..store.len() {
        let (want, got) = (store.entry(i), ckpt.store.entry(i));
        if want.name != got.name || want.value.shape() != got.value.shape() {
            return Err(Error::Checkpoint(format!(
                "entry {i}: expected {} {:?}, found {} {:?}",
                want.name,
                want.value.shape(),
                got.name,
                got.value.shape()
            )));
        }
        *store.value_mut(i) = got.value.clone();
    }
    Ok((model, store))
}

/// Validation loss of a stored checkpoint on a set, reproducing the value
/// recorded at save time when given the same validation data.
pub fn validate_checkpoint(
    ckpt: &Checkpoint,
    set: &EegTrialSet,
    embeddings: &AlignedEmbeddings,
) -> Result<f64> {
    let (model, store) = model_from_checkpoint(ckpt)?;
    let cfg = &ckpt.config;
    validate_model(
        &model,
        &store,
        set,
        embeddings,
        ckpt.tau(),
        ckpt.beta(),
        &SkOptions::from(&cfg.loss),
        cfg.batch_size,
    )
}

/// Embed every trial of a set with a trained model, in inference mode.
pub fn embed_trials(
    model: &EncoderModel,
    store: &ParamStore,
    set: &EegTrialSet,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    let bsz = batch_size.max(1).min(set.n_trials().max(1));
    let mut rows = Array2::<f64>::zeros((set.n_trials(), model.embedding_dim));
    let idx: Vec<usize> = (0..set.n_trials()).collect();
    for chunk in idx.chunks(bsz) {
        let eeg = batch_eeg(set, chunk);
        let emb = model.embed_batch(store, &eeg)?;
        for (o, &i) in chunk.iter().enumerate() {
            rows.row_mut(i).assign(&emb.values.row(o));
        }
    }
    EmbeddingMatrix::new(rows, true)
}
