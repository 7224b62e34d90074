//! AUROC computation, per-task evaluation, and the zero-shot harness.

use super::dataset::{prepare_sample, AudioSource, InstructionRecord};
use super::sample::ClassifierModel;
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Probability that a uniformly random positive outranks a random negative,
/// ties counted one half. Rank-sum formulation, O(n log n).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUROC needs both classes; got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN score"));

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEval {
    pub auroc: f64,
    pub n: usize,
    pub positive_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, TaskEval>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn mean_auroc(&self) -> f64 {
        if self.per_task.is_empty() {
            return f64::NAN;
        }
        self.per_task.values().map(|t| t.auroc).sum::<f64>() / self.per_task.len() as f64
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>10} {:>10}", "task", "n", "pos_rate", "auroc");
        for (task, e) in &self.per_task {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>10.4} {:>10.4}",
                task, e.n, e.positive_rate, e.auroc
            );
        }
        let _ = writeln!(out, "{:<16} {:>8} {:>10} {:>10.4}", "mean", "", "", self.mean_auroc());
        out
    }
}

/// Hex SHA-256 over every parameter's name, flag, shape, and exact bits.
pub fn store_hash(store: &crate::nn::ParamStore) -> String {
    let mut hasher = Sha256::new();
    for (_, p) in store.iter() {
        hasher.update(p.name.as_bytes());
        hasher.update([p.trainable as u8]);
        hasher.update((p.value.rows() as u64).to_le_bytes());
        hasher.update((p.value.cols() as u64).to_le_bytes());
        for v in p.value.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex(&hasher.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

/// Score every record and report per-task AUROC. Deterministic given the
/// model; evaluation is parallel over samples with ordered aggregation.
pub fn evaluate<M: ClassifierModel>(
    model: &M,
    records: &[&InstructionRecord],
    source: &AudioSource,
    seed: u64,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let scores: Vec<f64> = records
        .par_iter()
        .map(|rec| {
            let s = prepare_sample(model, rec, source)?;
            model.predict(&s)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_task: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for (rec, &score) in records.iter().zip(&scores) {
        let e = by_task.entry(rec.task_id.clone()).or_default();
        e.0.push(score);
        e.1.push(rec.label);
    }
    let mut per_task = BTreeMap::new();
    for (task, (scores, labels)) in by_task {
        let n = scores.len();
        let positive_rate = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        per_task.insert(
            task,
            TaskEval {
                auroc: auroc(&scores, &labels)?,
                n,
                positive_rate,
            },
        );
    }
    Ok(EvalReport {
        per_task,
        config_hash: config_hash_of(model),
        seed,
    })
}

fn config_hash_of<M: ClassifierModel>(model: &M) -> String {
    // Parameter identities pin the configuration; hashing names and shapes
    // keeps the hash stable across value updates.
    let mut hasher = Sha256::new();
    hasher.update(model.kind().as_str().as_bytes());
    for (_, p) in model.store().iter() {
        hasher.update(p.name.as_bytes());
        hasher.update((p.value.rows() as u64).to_le_bytes());
        hasher.update((p.value.cols() as u64).to_le_bytes());
    }
    hex(&hasher.finalize())[..16].to_string()
}

/// Evaluate on tasks the checkpoint never trained on. Enforces task
/// disjointness and verifies, by hashing, that no parameter moves during
/// inference.
pub fn zero_shot<M: ClassifierModel>(
    model: &M,
    records: &[&InstructionRecord],
    source: &AudioSource,
    trained_task_ids: &[String],
    seed: u64,
) -> Result<EvalReport> {
    for rec in records {
        if trained_task_ids.contains(&rec.task_id) {
            return Err(Error::Contract(format!(
                "task '{}' was in the training set; zero-shot requires unseen tasks",
                rec.task_id
            )));
        }
    }
    let before = store_hash(model.store());
    let report = evaluate(model, records, source, seed)?;
    let after = store_hash(model.store());
    if before != after {
        return Err(Error::Contract(
            "parameters changed during zero-shot inference".into(),
        ));
    }
    Ok(report)
}
