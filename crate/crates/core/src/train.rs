//! Supervised fine-tuning and evaluation of the classification head.

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::{Tape, TensorError};
use crate::data::SequenceInput;
use crate::model::{Model, ModelError};
use crate::params::{Adam, AdamConfig, CheckpointError, ParamStore};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no sequences to {0}")]
    Empty(&'static str),
    #[error("sequence {id} has no label")]
    Unlabeled { id: String },
    #[error("sequence {id}: label {label} outside 0..{classes}")]
    LabelRange { id: String, label: usize, classes: usize },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once a full pass over the training set reaches this top-1.
    pub target_accuracy: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction correct on the forward passes taken during the epoch, while
    /// parameters were still moving.
    pub running_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
    pub mean_loss: f64,
}

impl Metrics {
    /// `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        format!(
            "count={}\ntop1={}\ntop5={}\nmean_loss={}\n",
            self.count, self.top1, self.top5, self.mean_loss
        )
    }
}

fn label_of(input: &SequenceInput, classes: usize) -> Result<usize> {
    let label = input.label.ok_or_else(|| TrainError::Unlabeled { id: input.id.clone() })?;
    if label >= classes {
        return Err(TrainError::LabelRange {
            id: input.id.clone(),
            label,
            classes,
        });
    }
    Ok(label)
}

/// Rank of the true class among the logits: the number of classes scoring
/// strictly higher, ties resolved in favor of the lower index.
pub fn rank_of(logits: &[f64], label: usize) -> usize {
    let y = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > y || (v == y && i < label))
        .count()
}

pub fn evaluate(model: &Model, inputs: &[SequenceInput]) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(TrainError::Empty("evaluate"));
    }
    let classes = model.config.num_classes;
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0);
    for input in inputs {
        let label = label_of(input, classes)?;
        let mut tape = Tape::new();
        let logits = model.net().logits(&mut tape, input)?;
        let ce = tape.cross_entropy(logits, label)?;
        loss += tape.value(ce).item();
        let rank = rank_of(tape.value(logits).data(), label);
        top1 += (rank < 1) as usize;
        top5 += (rank < 5) as usize;
    }
    let n = inputs.len() as f64;
    Ok(Metrics {
        count: inputs.len(),
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        mean_loss: loss / n,
    })
}

/// Cross-entropy training with Adam over shuffled mini-batches.
pub fn finetune(
    model: &mut Model,
    train: &[SequenceInput],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(TrainError::Empty("fine-tune"));
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be >= 1".into()));
    }
    let classes = model.config.num_classes;
    let labels = train.iter().map(|s| label_of(s, classes)).collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[0xf1e, epoch as u64]));
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            for &i in batch {
                let mut tape = Tape::new();
                let logits = model.net().logits(&mut tape, &train[i])?;
                let ce = tape.cross_entropy(logits, labels[i])?;
                loss += tape.value(ce).item();
                correct += (rank_of(tape.value(logits).data(), labels[i]) == 0) as usize;
                tape.backward_into(ce, &mut model.params)?;
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            opt.step(&mut model.params);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss / train.len() as f64,
            running_accuracy: correct as f64 / train.len() as f64,
        };
        log::debug!("finetune epoch {epoch}: loss {:.6} acc {:.3}", stats.mean_loss, stats.running_accuracy);
        on_epoch(&stats);
        history.push(stats);
        if let Some(target) = cfg.target_accuracy {
            // the running figure lags the weights; confirm with a clean pass
            if stats.running_accuracy >= target && evaluate(model, train)?.top1 >= target {
                break;
            }
        }
    }
    Ok(history)
}

/// Copies encoder weights from a pretraining checkpoint; the decoder, mask
/// queries and head keep their current values. Returns the number copied.
pub fn load_pretrained_encoder(model: &mut Model, checkpoint: &ParamStore) -> Result<usize> {
    Ok(model.params.load_matching(checkpoint, Model::is_encoder_param)?)
}
