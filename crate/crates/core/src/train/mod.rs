//! Training loop, evaluation and run outputs.

mod config;
mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{ClassWeighting, DataConfig, RunConfig, Selection, TrainConfig};
pub use metrics::{
    balanced_accuracy, f1, inverse_frequency_weights, weighted_bce, weighted_bce_graph,
    MetricsReport, DECISION_THRESHOLD, P_CLAMP,
};

use crate::encoder::{Dropout, InputDims};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ENCODER_PREFIX, LOGITS};
use crate::psp::{project_onto, Candidate};
use crate::surface::{build_partition, patchify, Dataset, PatchPartition, Split, SurfaceSample};
use crate::tensor::{AdamW, Graph, Tensor};
use crate::{parallel, seed};

/// Patch sequences of one split, in manifest order.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub subject_ids: Vec<String>,
    pub labels: Vec<u8>,
    /// One `[H·N, M, F]` tensor per sample.
    pub patches: Vec<Tensor<f32>>,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn from_samples(
        samples: &[SurfaceSample],
        partition: &PatchPartition,
        hemispheres: usize,
    ) -> Result<Self> {
        Ok(PreparedSplit {
            subject_ids: samples.iter().map(|s| s.subject_id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            patches: parallel::try_map(samples, |s| patchify(s, partition, hemispheres))?,
        })
    }
}

/// A dataset cut into patches, ready for the model.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub partition: PatchPartition,
    pub dims: InputDims,
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
}

impl PreparedData {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let m = &dataset.manifest;
        let partition = build_partition(m.mesh_order, m.patch_order)?;
        let h = m.hemispheres;
        let prep = |s: Split| PreparedSplit::from_samples(dataset.split(s), &partition, h);
        let (train, val, test) = (prep(Split::Train)?, prep(Split::Val)?, prep(Split::Test)?);
        Ok(PreparedData {
            dims: InputDims {
                seq_len: h * partition.n_patches(),
                patch_vertices: partition.patch_size(),
                channels: m.n_channels(),
            },
            partition,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &PreparedSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn model_config(&self, run: &RunConfig) -> ModelConfig {
        ModelConfig {
            encoder: run.encoder.clone(),
            psp: run.psp.clone(),
            dims: self.dims,
        }
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bacc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model after the final projection.
    pub model: Model,
    /// Epoch the best model was taken from; 0 for an untrained model.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Validation metrics of [`TrainOutcome::model`]; absent without training.
    pub final_val: Option<MetricsReport>,
}

/// Inference-mode metrics over a split.
pub fn evaluate(model: &Model, split: &PreparedSplit) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let scores = model.predict_all(&split.patches)?;
    MetricsReport::from_predictions(
        split.subject_ids.clone(),
        split.labels.clone(),
        scores.iter().map(|s| s.probability as f64).collect(),
    )
}

/// Replace every prototype with the closest training patch at its location.
/// Candidates are the positive training samples, or all of them when the
/// model is configured without class restriction.
pub fn project_prototypes(model: &mut Model, train: &PreparedSplit, epoch: usize) -> Result<Vec<usize>> {
    let restricted = model.config.psp.class_restricted_projection;
    let pool: Vec<usize> = (0..train.len())
        .filter(|&i| !restricted || train.labels[i] == 1)
        .collect();
    let inputs: Vec<Tensor<f32>> = pool.iter().map(|&i| train.patches[i].clone()).collect();
    let embeddings = model.embed_all(&inputs)?;
    let candidates: Vec<Candidate<'_>> = pool
        .iter()
        .zip(&embeddings)
        .map(|(&i, e)| Candidate {
            subject_id: &train.subject_ids[i],
            embeddings: e,
        })
        .collect();
    let rectify = model.config.psp.rectify_prototypes;
    let chosen = project_onto(&mut model.bank, &candidates, epoch, rectify)?;
    Ok(chosen.into_iter().map(|c| pool[c]).collect())
}

/// [`train_run_with`] without a progress callback.
pub fn train_run(config: &RunConfig, data: &PreparedData) -> Result<TrainOutcome> {
    train_run_with(config, data, |_| {})
}

/// Train from a fresh model seeded by `config.train.seed`.
///
/// After every epoch the model is scored on the validation split; the best
/// one (earliest on ties) is kept, projected once more and re-scored.
pub fn train_run_with(
    config: &RunConfig,
    data: &PreparedData,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let mut model = Model::init(data.model_config(config), tc.seed)?;
    if tc.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            best_epoch: 0,
            history: Vec::new(),
            final_val: None,
        });
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Dataset(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let class_weights = match tc.class_weighting {
        ClassWeighting::InverseFrequency => inverse_frequency_weights(&data.train.labels)?,
        ClassWeighting::Uniform => [1.0, 1.0],
    };
    let named = model.named();
    let mut opt = AdamW::with_groups(named.iter().map(|(n, t)| (n.as_str(), *t)), |name| {
        if name == LOGITS {
            tc.scaler_optimizer()
        } else {
            tc.optimizer()
        }
    });
    drop(named);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(tc.seed, &[1, epoch as u64])));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let loss = train_step(&mut model, &mut opt, data, batch, class_weights, config, epoch, b)
                .map_err(|e| match e {
                    Error::NonFinite(m) => {
                        Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}"))
                    }
                    e => e,
                })?;
            loss_sum += loss * batch.len() as f64;
        }
        let projected = epoch % tc.projection_period == 0;
        if projected {
            project_prototypes(&mut model, &data.train, epoch)?;
        }
        let val = evaluate(&model, &data.val)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_bacc: val.balanced_accuracy,
            val_f1: val.f1,
        };
        on_epoch(&record);
        let warm = epoch <= tc.encoder_warmup_epochs.max(tc.scaler_warmup_epochs);
        let candidate = epoch == tc.epochs
            || !warm
                && match tc.selection {
                    Selection::EveryEpoch => true,
                    Selection::ProjectionEpochs => projected,
                };
        if candidate && best.as_ref().is_none_or(|(_, _, b)| record.val_bacc > *b) {
            best = Some((model.clone(), epoch, record.val_bacc));
        }
        history.push(record);
    }

    let (mut model, best_epoch, _) = best.expect("at least one epoch ran");
    project_prototypes(&mut model, &data.train, best_epoch)?;
    let final_val = evaluate(&model, &data.val)?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        final_val: Some(final_val),
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    data: &PreparedData,
    batch: &[usize],
    class_weights: [f64; 2],
    config: &RunConfig,
    epoch: usize,
    b: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true)?;
    let inputs: Vec<&Tensor<f32>> = batch.iter().map(|&i| &data.train.patches[i]).collect();
    let x = g.constant(Tensor::stack(&inputs)?)?;
    let labels: Vec<u8> = batch.iter().map(|&i| data.train.labels[i]).collect();
    let mut dropout = Dropout::new(
        config.encoder.dropout,
        seed::derive(config.train.seed, &[2, epoch as u64, b as u64]),
    );
    let fwd = model.forward(&mut g, &vars, x, Some(&mut dropout))?;
    let loss = weighted_bce_graph(&mut g, fwd.probability, &labels, class_weights)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    g.backward(loss)?;
    model.collect_grads(&g, &vars)?;
    let frozen_scaler = epoch <= config.train.scaler_warmup_epochs;
    let frozen_encoder = epoch <= config.train.encoder_warmup_epochs;
    opt.step_except(
        model.named_mut().iter_mut().map(|(n, t)| (n.as_str(), &mut **t)),
        |name| {
            (frozen_scaler && name == LOGITS)
                || (frozen_encoder && name.starts_with(ENCODER_PREFIX))
        },
    )?;
    Ok(value)
}

/// `epoch,train_loss,val_bacc,val_f1` with one row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_bacc,val_f1\n");
    for r in history {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_bacc, r.val_f1).unwrap();
    }
    s
}

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Whether a checkpoint's model was trained on z-scored features, read from
/// the metadata written by [`write_outputs`]. Defaults to `true`.
pub fn trained_normalized(extra: &serde_json::Value) -> bool {
    extra.get("normalize").and_then(|v| v.as_bool()).unwrap_or(true)
}

/// Write `best.ckpt` (with provenance sidecar), `metrics.csv` and
/// `config.resolved.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    let extra = json!({
        "best_epoch": outcome.best_epoch,
        "normalize": config.data.normalize,
        "seed": config.train.seed,
        "val_bacc": outcome.final_val.as_ref().map(|m| m.balanced_accuracy),
        "val_f1": outcome.final_val.as_ref().map(|m| m.f1),
    });
    outcome.model.save(&dir.join(CHECKPOINT_FILE), extra)?;
    crate::io::write_atomic(&dir.join(METRICS_FILE), history_csv(&outcome.history).as_bytes())?;
    crate::io::write_json_atomic(&dir.join(RESOLVED_CONFIG_FILE), config)
}
