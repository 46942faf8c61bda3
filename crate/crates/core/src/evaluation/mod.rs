//! N-way zero-shot retrieval evaluation: ranking by cross-modal cosine
//! similarity, top-k accuracy, multi-seed aggregation, and paired
//! significance testing between methods.

pub mod wilcoxon;

use std::collections::HashMap;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::average_repetitions;
use crate::error::{Error, Result};
use crate::training::{embed_trials, model_from_checkpoint, Checkpoint};
use crate::types::{EegTrialSet, EmbeddingMatrix};

pub use wilcoxon::{standard_normal_cdf, wilcoxon_signed_rank, WilcoxonResult, EXACT_LIMIT};

/// One trial's ranked candidates. `ranking[0]` is the best match.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranking: Vec<usize>,
    pub ground_truth: usize,
    pub n_candidates: usize,
}

impl RetrievalResult {
    /// Position of the ground truth in the ranking (0 = retrieved first).
    pub fn rank_of_truth(&self) -> usize {
        self.ranking
            .iter()
            .position(|&c| c == self.ground_truth)
            .expect("ranking is a permutation of candidates")
    }
}

/// Accuracy for one (method, subject) cell, optionally aggregated over
/// seeds. Percentages are in [0, 100] and top5 >= top1 by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub method: String,
    pub subject_id: String,
    pub top1: f64,
    pub top5: f64,
    pub top1_std: f64,
    pub top5_std: f64,
    pub per_seed: Vec<SeedAccuracy>,
    pub n_candidates: usize,
    pub n_trials: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub top1: f64,
    pub top5: f64,
}

/// Rank candidates by descending cosine similarity to one EEG embedding;
/// ties break toward the lower candidate index.
pub fn zero_shot_rank(
    eeg_embedding: ArrayView1<f64>,
    candidates: &EmbeddingMatrix,
    ground_truth: usize,
) -> Result<RetrievalResult> {
    let n = candidates.n_rows();
    if n < 1 {
        return Err(Error::Evaluation("no candidates to rank".into()));
    }
    if eeg_embedding.len() != candidates.dim() {
        return Err(Error::shape(
            format!("candidate dim {}", candidates.dim()),
            format!("{}", eeg_embedding.len()),
        ));
    }
    if ground_truth >= n {
        return Err(Error::Evaluation(format!(
            "ground truth index {ground_truth} out of {n} candidates"
        )));
    }
    let sims: Vec<f64> = (0..n)
        .map(|i| candidates.values.row(i).dot(&eeg_embedding))
        .collect();
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(RetrievalResult { ranking, ground_truth, n_candidates: n })
}

/// Percentage of trials whose ground truth appears in the first k ranks.
pub fn topk_accuracy(results: &[RetrievalResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Evaluation("no retrieval results".into()));
    }
    let n_candidates = results[0].n_candidates;
    if k == 0 || k > n_candidates {
        return Err(Error::Evaluation(format!(
            "top-k {k} out of range for {n_candidates} candidates"
        )));
    }
    let hits = results.iter().filter(|r| r.rank_of_truth() < k).count();
    Ok(hits as f64 / results.len() as f64 * 100.0)
}

/// Mean and sample standard deviation across per-seed reports of one
/// (method, subject) cell.
pub fn aggregate_seeds(reports: &[AccuracyReport]) -> Result<AccuracyReport> {
    if reports.is_empty() {
        return Err(Error::Evaluation("no reports to aggregate".into()));
    }
    let method = &reports[0].method;
    let subject = &reports[0].subject_id;
    for r in reports {
        if &r.method != method || &r.subject_id != subject {
            return Err(Error::Evaluation(format!(
                "cannot aggregate across cells: {}/{} vs {}/{}",
                method, subject, r.method, r.subject_id
            )));
        }
    }
    let per_seed: Vec<SeedAccuracy> = reports.iter().flat_map(|r| r.per_seed.clone()).collect();
    let top1s: Vec<f64> = per_seed.iter().map(|s| s.top1).collect();
    let top5s: Vec<f64> = per_seed.iter().map(|s| s.top5).collect();
    let (m1, s1) = mean_std(&top1s);
    let (m5, s5) = mean_std(&top5s);
    Ok(AccuracyReport {
        method: method.clone(),
        subject_id: subject.clone(),
        top1: m1,
        top5: m5,
        top1_std: s1,
        top5_std: s5,
        per_seed,
        n_candidates: reports[0].n_candidates,
        n_trials: reports[0].n_trials,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Embed every test trial with a trained checkpoint and rank it against
/// the candidate set. `candidate_labels[i]` is the class of candidate i;
/// every test label must appear exactly once among them.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    test_set: &EegTrialSet,
    candidates: &EmbeddingMatrix,
    candidate_labels: &[i64],
) -> Result<AccuracyReport> {
    let results = rank_test_set(ckpt, test_set, candidates, candidate_labels)?;
    let top1 = topk_accuracy(&results, 1)?;
    let k5 = 5.min(candidates.n_rows());
    let top5 = topk_accuracy(&results, k5)?;
    Ok(AccuracyReport {
        method: ckpt.config.encoder_name.clone(),
        subject_id: test_set.subject_id.clone(),
        top1,
        top5,
        top1_std: 0.0,
        top5_std: 0.0,
        per_seed: vec![SeedAccuracy { seed: ckpt.seed, top1, top5 }],
        n_candidates: candidates.n_rows(),
        n_trials: results.len(),
    })
}

/// Per-trial rankings for a checkpoint on a test set.
pub fn rank_test_set(
    ckpt: &Checkpoint,
    test_set: &EegTrialSet,
    candidates: &EmbeddingMatrix,
    candidate_labels: &[i64],
) -> Result<Vec<RetrievalResult>> {
    if candidate_labels.len() != candidates.n_rows() {
        return Err(Error::Evaluation(format!(
            "{} candidate labels for {} candidates",
            candidate_labels.len(),
            candidates.n_rows()
        )));
    }
    let truth_of: HashMap<i64, usize> = candidate_labels
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    if truth_of.len() != candidate_labels.len() {
        return Err(Error::Evaluation("duplicate class among candidates".into()));
    }
    let eval_set = if ckpt.config.eval.average_repetitions {
        average_repetitions(test_set, None)?
    } else {
        test_set.clone()
    };
    for label in &eval_set.labels {
        if !truth_of.contains_key(label) {
            return Err(Error::Evaluation(format!(
                "test label {label} has no candidate embedding"
            )));
        }
    }
    let (model, store) = model_from_checkpoint(ckpt)?;
    let emb = embed_trials(&model, &store, &eval_set, ckpt.config.batch_size)?;
    let mut results = Vec::with_capacity(eval_set.n_trials());
    for i in 0..eval_set.n_trials() {
        let truth = truth_of[&eval_set.labels[i]];
        results.push(zero_shot_rank(emb.values.row(i), candidates, truth)?);
    }
    Ok(results)
}
