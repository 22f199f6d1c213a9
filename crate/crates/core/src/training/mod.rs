//! Pretraining, supervised and episodic fine-tuning, few-shot and zero-shot
//! inference, checkpoints, and metrics logging.

mod checkpoint;
mod fewshot;
mod metrics;
mod model;
mod pretrain;
mod schedule;
mod supervised;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedArray, OptimizerState, FORMAT_VERSION};
pub use fewshot::{
    episode_loss, evaluate_fewshot, finetune_fewshot, predict_zeroshot, score_episode, Ablation, EvalReport,
    FewShotConfig, FewShotStep,
};
pub use metrics::{MetricRecord, MetricsWriter};
pub use model::{
    FewShotHead, MapreModel, MlmHead, ModelConfig, SupervisedHeadL, SupervisedHeadR, ALPHA_INIT, BETA_INIT,
};
pub use pretrain::{pretrain, PretrainConfig};
pub use schedule::lr_schedule;
pub use supervised::{
    finetune_supervised, predict_supervised, subsample_per_relation, supervised_accuracy, SupervisedConfig,
    SupervisedReport, Variant,
};

use crate::error::{Error, Result};
use crate::tensor::{clip_global_norm, AdamW, AdamWConfig, ParamStore, Tape, Var};

/// Converts numeric blow-ups into a training abort tagged with the step.
pub(crate) fn abort_at(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::TrainingAborted { step, message: e.to_string() },
        other => other,
    }
}

/// AdamW plus global-norm clipping, with gradients gathered from one or
/// more tapes between updates.
pub(crate) struct Optimizer {
    adam: AdamW,
    clip_norm: f64,
}

impl Optimizer {
    pub(crate) fn new(store: &mut ParamStore, lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        store.zero_grads();
        let config = AdamWConfig { lr, weight_decay, ..Default::default() };
        Self { adam: AdamW::new(config, store), clip_norm }
    }

    pub(crate) fn accumulate(&mut self, store: &mut ParamStore, tape: &Tape, loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        store.accumulate(tape, &grads)
    }

    /// Clips, updates at `lr`, and clears the gradients. Returns the
    /// pre-clipping norm.
    pub(crate) fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<f64> {
        let norm = clip_global_norm(store, self.clip_norm)?;
        self.adam.step(store, lr)?;
        store.zero_grads();
        Ok(norm)
    }
}
