//! Adam training loop over the summed per-head sigmoid cross-entropy, and
//! checkpoints.

mod checkpoint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::dataset::{batch_iterator, Dataset, DatasetError};
use crate::metrics::{self, MetricsError, MetricsTable};
use crate::model::{Model, ModelError, Thresholds};
use crate::tensor::{adam_step, AdamConfig, AdamState, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}; first offending tensor: {tensor}")]
    NonFinite { epoch: usize, step: u64, tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Overrides the model's own coefficient for the run.
    pub l2_lambda: f64,
    /// Batch-order seed.
    pub seed: u64,
    /// Validation cadence in epochs; 0 disables validation. The last epoch is
    /// always evaluated when validation is on.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 96,
            batch_size: 32,
            adam: AdamConfig::default(),
            l2_lambda: 1e-4,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return fail(format!("l2_lambda must be finite and >= 0, got {}", self.l2_lambda));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", a.learning_rate));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(a.epsilon > 0.0) {
            return fail(format!("Adam epsilon must be positive, got {}", a.epsilon));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub metrics: MetricsTable,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss (cross-entropy plus L2 penalty) per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean cross-entropy alone per epoch, summed over heads.
    pub epoch_ce: Vec<f64>,
    pub validation: Vec<EvalPoint>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.epoch_losses.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    /// Cross-entropy summed over heads, averaged over the batch.
    pub ce: f64,
    pub penalty: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.penalty
    }
}

/// Model plus optimizer state; resumable between epochs.
pub struct Trainer<T> {
    model: Model<T>,
    adam: AdamState<T>,
    config: TrainConfig,
    history: TrainHistory,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.set_l2_lambda(config.l2_lambda);
        let lengths: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        Ok(Self {
            adam: AdamState::new(config.adam, &lengths),
            model,
            config,
            history: TrainHistory::default(),
        })
    }

    /// Continues from saved state. `config` replaces the stored one when given
    /// (typically to raise `epochs`).
    pub fn resume(checkpoint: Checkpoint<T>, config: Option<TrainConfig>) -> Result<Self> {
        let Checkpoint {
            mut model,
            adam,
            train_config,
            history,
        } = checkpoint;
        let config = config
            .or(train_config)
            .ok_or_else(|| TrainError::Config("checkpoint carries no training config".into()))?;
        config.validate()?;
        model.set_l2_lambda(config.l2_lambda);
        let lengths: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
        let mut adam = adam.unwrap_or_else(|| AdamState::new(config.adam, &lengths));
        adam.config = config.adam;
        Ok(Self {
            model,
            adam,
            config,
            history,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn adam_state(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs()
    }

    pub fn into_parts(self) -> (Model<T>, AdamState<T>, TrainHistory) {
        (self.model, self.adam, self.history)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            train_config: Some(self.config.clone()),
            history: self.history.clone(),
        }
    }

    /// One forward/backward pass and Adam update on a prepared batch.
    pub fn step(&mut self, batch: &Tensor<T>, labels: &Tensor<T>) -> Result<StepLoss> {
        let penalty = self.model.l2_penalty().data()[0].as_f64();
        let mut tape = Tape::new();
        let pass = self.model.forward_train(&mut tape, batch)?;
        let loss = tape.sigmoid_ce_loss(pass.logits, labels)?;
        let ce = tape.value(loss).data()[0].as_f64();
        if !ce.is_finite() {
            return Err(TrainError::NonFinite {
                epoch: self.epochs_done() + 1,
                step: self.adam.step_count + 1,
                tensor: tape.first_non_finite().unwrap_or_else(|| "loss".into()),
            });
        }
        tape.backward(loss)?;
        let zeros: Vec<Vec<T>>;
        let grads: Vec<&[T]> = {
            let missing: Vec<usize> = pass
                .params
                .iter()
                .enumerate()
                .filter(|(_, &v)| tape.grad(v).is_none())
                .map(|(i, _)| i)
                .collect();
            zeros = missing
                .iter()
                .map(|&i| vec![T::zero(); self.model.params()[i].value.len()])
                .collect();
            let mut z = zeros.iter();
            pass.params
                .iter()
                .map(|&v| tape.grad(v).unwrap_or_else(|| z.next().expect("one zero buffer per missing grad")))
                .collect()
        };
        let decay = self.model.decay_mask();
        let mut slices: Vec<&mut [T]> = self.model.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
        adam_step(&mut slices, &grads, &decay, &mut self.adam, self.config.l2_lambda)?;
        Ok(StepLoss { ce, penalty })
    }

    /// One pass over `train` in the seeded order for the next epoch; returns
    /// the record-weighted mean loss.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<StepLoss> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset("training"));
        }
        let classes = metrics::head_classes(&self.model, train.vocabulary())?;
        let epoch = self.epochs_done() as u64;
        let batches = batch_iterator::<T>(train, &classes, self.config.batch_size, self.config.seed, epoch)?;
        let (mut ce, mut penalty) = (0.0, 0.0);
        for (x, y) in batches {
            let b = x.shape()[0] as f64;
            let l = self.step(&x, &y)?;
            ce += b * l.ce;
            penalty += b * l.penalty;
        }
        let n = train.len() as f64;
        let mean = StepLoss {
            ce: ce / n,
            penalty: penalty / n,
        };
        self.history.epoch_losses.push(mean.total());
        self.history.epoch_ce.push(mean.ce);
        Ok(mean)
    }

    /// Runs the remaining epochs up to `config.epochs`, validating on `val`
    /// at the configured cadence.
    pub fn train(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<()> {
        if val.is_some_and(Dataset::is_empty) {
            return Err(TrainError::EmptyDataset("validation"));
        }
        while self.epochs_done() < self.config.epochs {
            self.run_epoch(train)?;
            self.validate_if_due(val)?;
        }
        Ok(())
    }

    /// Like [`Trainer::train`] but stops after `epochs` more epochs.
    pub fn train_for(&mut self, epochs: usize, train: &Dataset, val: Option<&Dataset>) -> Result<()> {
        let stop = (self.epochs_done() + epochs).min(self.config.epochs);
        while self.epochs_done() < stop {
            self.run_epoch(train)?;
            self.validate_if_due(val)?;
        }
        Ok(())
    }

    fn validate_if_due(&mut self, val: Option<&Dataset>) -> Result<()> {
        let Some(val) = val else { return Ok(()) };
        let e = self.epochs_done();
        let every = self.config.eval_every;
        if every > 0 && (e % every == 0 || e == self.config.epochs) {
            let m = metrics::evaluate_model(&self.model, val, &Thresholds::default())?;
            self.history.validation.push(EvalPoint { epoch: e, metrics: m });
        }
        Ok(())
    }
}

/// Trains a fresh optimizer for `config.epochs` epochs.
pub fn run_training<T: Scalar>(
    model: Model<T>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(Model<T>, TrainHistory)> {
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let mut t = Trainer::new(model, config.clone())?;
    t.train(train, Some(val))?;
    let (model, _, history) = t.into_parts();
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::L2Scope;

    fn tiny() -> Model<f32> {
        let config = ModelConfig {
            input_channels: 2,
            input_length: 16,
            conv_layers: 4,
            kernel_size: 3,
            pool_every: 2,
            channel_double_every: 2,
            base_channels: 3,
            channel_cap: Some(6),
            head_names: vec!["a".into(), "b".into()],
            l2_lambda: 0.0,
            l2_scope: L2Scope::Weights,
        };
        Model::build(config, 3).unwrap()
    }

    fn batch() -> (Tensor<f32>, Tensor<f32>) {
        let x: Vec<f32> = (0..4 * 2 * 16).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
        let x = Tensor::new(&[4, 2, 16], x).unwrap();
        let y = Tensor::new(&[4, 2], vec![1., 0., 0., 1., 1., 1., 0., 0.]).unwrap();
        (x, y)
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.l2_lambda), (96, 32, 1e-4));
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { l2_lambda: -1.0, ..c }.validate().is_err());
    }

    #[test]
    fn steps_reduce_loss_and_are_deterministic() {
        let (x, y) = batch();
        let run = || {
            let mut t = Trainer::new(tiny(), TrainConfig::default()).unwrap();
            (0..60).map(|_| t.step(&x, &y).unwrap().ce).collect::<Vec<_>>()
        };
        let a = run();
        assert!(a[59] < a[0] * 0.5, "{} -> {}", a[0], a[59]);
        assert_eq!(a, run());
    }

    #[test]
    fn non_finite_input_aborts_with_tensor_name() {
        let (mut x, y) = batch();
        x.data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(tiny(), TrainConfig::default()).unwrap();
        match t.step(&x, &y) {
            Err(TrainError::NonFinite { tensor, .. }) => assert!(!tensor.is_empty()),
            other => panic!("expected NonFinite, got {:?}", other.map(|l| l.ce)),
        }
    }

    #[test]
    fn l2_config_overrides_model() {
        let t = Trainer::new(tiny(), TrainConfig { l2_lambda: 0.5, ..Default::default() }).unwrap();
        assert_eq!(t.model().config().l2_lambda, 0.5);
    }
}
