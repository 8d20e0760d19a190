//! Objectives, optimizer and the two training procedures.
//!
//! [`train_from_scratch`] optimizes the joint loss on speech quadruples.
//! [`train_with_pretrain`] first pretrains the decoder on text pairs with a
//! zero memory (acoustic weights frozen), then trains the acoustic side on
//! CTC alone (decoder frozen), then fine-tunes everything on the joint loss.

mod augment;
mod batch;
mod loss;
mod optim;
mod runner;

pub use augment::{spec_augment, SpecAugment};
pub use batch::{plan_epoch, BatchStream};
pub use loss::{
    ctc_term, joint_loss, masked_pretrain_loss, masked_pretrain_term, mix, reduce_terms, tt_ce_loss, tt_ce_term,
    JointLoss, LossNorm, LossOptions, LossTerm,
};
pub use optim::{clip_factor, learning_rate, Adam, AdamConfig};
pub use runner::{
    dev_loss, encode_corpus, encode_text, train_from_scratch, train_stages, train_with_pretrain, Example, RunOptions,
    TextExample, ValLosses,
};

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::ctc::CtcError;
use crate::model::{ModelError, ParamStore};
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{logits} logit rows do not fit a gold sequence of {gold} tokens")]
    LengthMismatch { logits: usize, gold: usize },
    #[error("{what} is empty")]
    EmptyCorpus { what: &'static str },
    #[error("{infeasible} of {total} training samples have too few frames for their phonemes")]
    TooManyInfeasible { infeasible: usize, total: usize },
    #[error("loss became non-finite at {stage} step {step}")]
    NonFinite { stage: Stage, step: usize },
    #[error("cannot average checkpoints: {0}")]
    Average(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Which procedure or phase produced a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Joint training from scratch.
    Scratch,
    /// Decoder pretraining on text pairs.
    Condec,
    /// Acoustic pretraining on CTC.
    Am,
    /// Joint fine-tuning after both pretraining stages.
    St,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Scratch => "scratch",
            Stage::Condec => "condec",
            Stage::Am => "am",
            Stage::St => "st",
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Stage::Scratch => 0,
            Stage::Condec => 1,
            Stage::Am => 2,
            Stage::St => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the CTC loss in `alpha·L_AS + (1-alpha)·L_TT`.
    pub alpha: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    /// Raw feature frames per speech batch.
    pub batch_frames: usize,
    /// Sequence tokens per text batch during decoder pretraining.
    pub text_batch_tokens: usize,
    /// Step budget for scratch training and for fine-tuning.
    pub max_steps: usize,
    /// Step budget for decoder pretraining.
    pub pretrain_steps: usize,
    /// Step budget for acoustic pretraining.
    pub am_steps: usize,
    pub label_smoothing: f64,
    pub loss_norm: LossNorm,
    pub spec_augment: SpecAugment,
    /// Mask features during joint training.
    pub augment: bool,
    /// Mask features during acoustic pretraining.
    pub am_augment: bool,
    /// Checkpoints averaged into the final weights.
    pub average_last: usize,
    /// Steps between validations; each validation also takes a checkpoint.
    pub validate_every: usize,
    /// Validations without improvement before a stage stops.
    pub patience: usize,
    /// Global gradient-norm ceiling; 0 turns clipping off.
    pub clip_norm: f64,
    pub max_infeasible_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            peak_lr: 1e-3,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            batch_frames: 2000,
            text_batch_tokens: 600,
            max_steps: 5000,
            pretrain_steps: 2000,
            am_steps: 1000,
            label_smoothing: 0.1,
            loss_norm: LossNorm::Mean,
            spec_augment: SpecAugment::default(),
            augment: true,
            am_augment: true,
            average_last: 10,
            validate_every: 100,
            patience: 10,
            clip_norm: 5.0,
            max_infeasible_fraction: 0.5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Full-scale batch, warmup and masking widths.
    pub fn full_scale() -> Self {
        Self {
            batch_frames: 20_000,
            warmup_steps: 4000,
            max_steps: 400_000,
            spec_augment: SpecAugment::FULL,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be finite and non-negative, got {}", self.peak_lr));
        }
        for (name, v) in [
            ("warmup_steps", self.warmup_steps),
            ("batch_frames", self.batch_frames),
            ("text_batch_tokens", self.text_batch_tokens),
            ("max_steps", self.max_steps),
            ("average_last", self.average_last),
            ("validate_every", self.validate_every),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if !(0.0..=1.0).contains(&self.max_infeasible_fraction) {
            return bad("max_infeasible_fraction must be in [0, 1]".into());
        }
        Ok(())
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            label_smoothing: self.label_smoothing,
            norm: self.loss_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    /// Absent when the stage does not use the term or every sample in the batch was infeasible.
    pub l_as: Option<f64>,
    pub l_tt: Option<f64>,
    pub loss: f64,
    pub lr: f64,
    pub samples: usize,
    /// Samples whose CTC target was infeasible in this batch.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub stage: Stage,
    pub step: usize,
    pub l_as: Option<f64>,
    pub l_tt: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Step(StepRecord),
    Val(ValRecord),
    /// A stage ended; `early` when patience ran out before the budget.
    End {
        stage: Stage,
        step: usize,
        early: bool,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<Record>,
    /// Samples skipped over the whole run because CTC could not align them.
    pub skipped_infeasible: usize,
    /// Batches with no feasible sample during acoustic pretraining.
    pub skipped_batches: usize,
    /// Seconds spent; kept out of the serialized report so reruns compare byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn validations(&self) -> impl Iterator<Item = &ValRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Val(v) => Some(v),
            _ => None,
        })
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("plain data"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(TrainError::io(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(TrainError::io(path))
    }
}

/// Element-wise mean of parameter sets with identical names and shapes.
pub fn average_checkpoints(checkpoints: &[ParamStore]) -> Result<ParamStore, TrainError> {
    let first = checkpoints
        .first()
        .ok_or_else(|| TrainError::Average("no checkpoints given".into()))?;
    let mut out = first.clone();
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        if c.len() != first.len() {
            return Err(TrainError::Average(format!(
                "checkpoint {k} has {} tensors, expected {}",
                c.len(),
                first.len()
            )));
        }
        for id in 0..c.len() {
            if c.name(id) != first.name(id) || c.value(id).shape() != first.value(id).shape() {
                return Err(TrainError::Average(format!(
                    "checkpoint {k} tensor `{}` {:?} does not match `{}` {:?}",
                    c.name(id),
                    c.value(id).shape(),
                    first.name(id),
                    first.value(id).shape()
                )));
            }
            for (o, v) in out.value_mut(id).data_mut().iter_mut().zip(c.value(id).data()) {
                *o += v;
            }
        }
    }
    if checkpoints.len() > 1 {
        let k = checkpoints.len() as f64;
        for id in 0..out.len() {
            out.value_mut(id).data_mut().iter_mut().for_each(|v| *v /= k);
        }
    }
    Ok(out)
}
