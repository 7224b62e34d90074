//! Minibatch instruction tuning shared by every model.
//!
//! Per-sample forward/backward passes run in parallel; gradients are summed
//! in sample order, so results are bit-identical for a fixed seed regardless
//! of thread count.

use super::dataset::{prepare_sample, AudioSource, InstructionRecord};
use super::sample::{AudioNeed, ClassifierModel, PreparedSample};
use crate::error::{Error, Result};
use crate::nn::{OptimizerConfig, OptimizerState, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Interval (in steps) at which the last-good snapshot is refreshed for
    /// divergence recovery.
    pub snapshot_every: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            snapshot_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    /// Final state of the training RNG, recorded into checkpoints.
    pub rng: super::checkpoint::RngState,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,lr\n");
        for p in &self.curve {
            let _ = writeln!(out, "{},{},{:.12},{}", p.step, p.epoch, p.loss, p.lr);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.curve.last().map(|p| p.loss)
    }
}

/// Instruction-tune on the given records (callers pass the train split).
/// Features are prepared once and cached across epochs unless the model
/// consumes raw patch grids, which are too large to keep around.
pub fn train<M: ClassifierModel>(
    model: &mut M,
    records: &[&InstructionRecord],
    source: &AudioSource,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let cache_all = model.audio_need() != AudioNeed::Patches;
    let cached: Vec<Option<PreparedSample>> = if cache_all {
        let immutable: &M = model;
        records
            .par_iter()
            .map(|rec| prepare_sample(immutable, rec, source).map(Some))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; records.len()]
    };

    let fetch = |model: &M, indices: &[usize]| -> Result<Vec<PreparedSample>> {
        indices
            .par_iter()
            .map(|&i| match &cached[i] {
                Some(s) => Ok(s.clone()),
                None => prepare_sample(model, records[i], source),
            })
            .collect()
    };

    run_loop(model, records.len(), fetch, hyper, seed)
}

/// Train directly on prepared samples (used by encoder pretraining and
/// small unit-scale experiments).
pub fn train_prepared<M: ClassifierModel>(
    model: &mut M,
    samples: &[PreparedSample],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let fetch = |_model: &M, indices: &[usize]| -> Result<Vec<PreparedSample>> {
        Ok(indices.iter().map(|&i| samples[i].clone()).collect())
    };
    run_loop(model, samples.len(), fetch, hyper, seed)
}

fn run_loop<M: ClassifierModel>(
    model: &mut M,
    n: usize,
    fetch: impl Fn(&M, &[usize]) -> Result<Vec<PreparedSample>>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new(
        OptimizerConfig {
            learning_rate: hyper.learning_rate,
            weight_decay: hyper.weight_decay,
            ..Default::default()
        },
        model.store(),
    );
    let mut snapshot: ParamStore = model.store().clone();
    let mut snapshot_step = 0usize;
    let mut curve = Vec::new();
    let mut step = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..hyper.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(hyper.batch_size) {
            let samples = fetch(model, chunk)?;
            let immutable: &M = model;
            let results: Vec<(f64, Vec<_>)> = samples
                .par_iter()
                .map(|s| immutable.loss_and_grads(s))
                .collect::<Result<Vec<_>>>()?;

            let batch_loss =
                results.iter().map(|(l, _)| *l).sum::<f64>() / results.len() as f64;
            if !batch_loss.is_finite() {
                // Divergence: roll back to the last good snapshot and abort.
                *model.store_mut() = snapshot;
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "loss became non-finite; restored snapshot from step {snapshot_step}"
                    ),
                });
            }

            let scale = 1.0 / results.len() as f64;
            let store = model.store_mut();
            store.zero_grads();
            for (_, grads) in &results {
                for (id, g) in grads {
                    store.accumulate_grad(*id, g, scale);
                }
            }
            opt.step(store);
            step += 1;
            curve.push(CurvePoint {
                step,
                epoch,
                loss: batch_loss,
                lr: hyper.learning_rate,
            });
            if step % hyper.snapshot_every == 0 {
                snapshot = model.store().clone();
                snapshot_step = step;
            }
        }
    }
    Ok(TrainOutcome {
        curve,
        steps: step,
        rng: super::checkpoint::RngState::from_rng(&rng),
    })
}
