//! Adam optimization over one sample per step, with validation-based
//! best-epoch retention and resumable state.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Sample;
use crate::inference::{self, InferenceConfig, InferenceError, KMode};
pub use crate::inference::Evaluation;
use crate::linalg::Matrix;
use crate::losses::{Loss, LossError};
use crate::math;
use crate::net::{EmbedNet, Embedding, NetConfig, NetError};
use crate::seed;

/// Seed stream for network initialization.
const INIT_STREAM: u64 = 0x1;
/// Seed stream for per-epoch shuffles; the epoch index is mixed in.
const SHUFFLE_STREAM: u64 = 0x2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("parameter/gradient shape mismatch at tensor {tensor}: {expected} vs {got}")]
    ShapeMismatch { tensor: usize, expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("sample {id}: non-finite gradient")]
    NonFiniteGradient { id: String },
    #[error("every sample in epoch {0} was skipped")]
    AllSkipped(usize),
    #[error("sample {id}: {source}")]
    Net { id: String, source: NetError },
    #[error("sample {id}: {source}")]
    Loss { id: String, source: LossError },
    #[error("sample {id}: {source}")]
    Inference { id: String, source: InferenceError },
    #[error("{0} embeddings for {1} samples")]
    CountMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for tensors of the given lengths.
    pub fn new(shapes: &[usize], lr: f64, config: AdamConfig) -> Self {
        Self {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_net(net: &EmbedNet, lr: f64, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes, lr, config)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch {
                tensor: usize::MAX,
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let expected = self.m[i].len();
            if p.len() != expected || g.len() != expected {
                return Err(TrainError::ShapeMismatch {
                    tensor: i,
                    expected,
                    got: if p.len() != expected { p.len() } else { g.len() },
                });
            }
        }
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - math::pow(self.beta1, t);
        let c2 = 1.0 - math::pow(self.beta2, t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub loss: Loss,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub shuffle: bool,
    pub net: NetConfig,
    pub adam: AdamConfig,
    /// Inference settings for validation. Validation always uses the true K.
    pub validation: InferenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 1e-4,
            loss: Loss::default(),
            seed: 0,
            checkpoint_every: 10,
            shuffle: true,
            net: NetConfig::default(),
            adam: AdamConfig::default(),
            validation: InferenceConfig {
                model_selection: false,
                ..InferenceConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be > 0"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(TrainError::InvalidConfig("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam.eps > 0.0) {
            return Err(TrainError::InvalidConfig("Adam eps must be > 0"));
        }
        self.loss
            .validate()
            .map_err(|_| TrainError::InvalidConfig("loss parameters must be positive"))?;
        self.net
            .validate()
            .map_err(|_| TrainError::InvalidConfig("network dimensions must be positive"))?;
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the steps taken this epoch.
    pub train_loss: f64,
    pub val_error: Option<f64>,
    pub val_nmi: Option<f64>,
    pub steps: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestNet {
    pub epoch: usize,
    pub val_error: f64,
    pub net: EmbedNet,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub net: EmbedNet,
    pub adam: AdamState,
    pub best: Option<BestNet>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    net: EmbedNet,
    adam: AdamState,
    epochs_done: usize,
    best: Option<BestNet>,
    history: Vec<EpochRecord>,
}

/// Final result of [`Trainer::finish`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best validation net, or the last one when no validation set was given.
    pub net: EmbedNet,
    pub best_epoch: Option<usize>,
    pub final_net: EmbedNet,
    pub history: Vec<EpochRecord>,
}

pub(crate) fn point_matrix(sample: &Sample) -> Matrix {
    Matrix::from_vec(sample.points.len(), 2, sample.coords())
}

impl Trainer {
    /// Starts from a freshly initialized network.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let net = EmbedNet::init(config.net, seed::derive(config.seed, INIT_STREAM))
            .map_err(|_| TrainError::InvalidConfig("network dimensions must be positive"))?;
        Self::with_net(config, net)
    }

    pub fn with_net(config: TrainConfig, net: EmbedNet) -> Result<Self, TrainError> {
        config.validate()?;
        if net.config.input_dim != 2 {
            return Err(TrainError::InvalidConfig("network input_dim must be 2"));
        }
        let adam = AdamState::for_net(&net, config.lr, config.adam);
        Ok(Self {
            config,
            net,
            adam,
            epochs_done: 0,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        ck.config.validate()?;
        if ck.adam.m.len() != ck.net.tensors().len() {
            return Err(TrainError::ShapeMismatch {
                tensor: usize::MAX,
                expected: ck.net.tensors().len(),
                got: ck.adam.m.len(),
            });
        }
        Ok(Self {
            config: ck.config,
            net: ck.net,
            adam: ck.adam,
            epochs_done: ck.epochs_done,
            best: ck.best,
            history: ck.history,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epochs_done: self.epochs_done,
            net: self.net.clone(),
            adam: self.adam.clone(),
            best: self.best.clone(),
            history: self.history.clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn net(&self) -> &EmbedNet {
        &self.net
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    /// Forward, loss, backward and one Adam update. Returns `None` when the
    /// sample was skipped because its loss was degenerate.
    pub fn step(&mut self, sample: &Sample) -> Result<Option<f64>, TrainError> {
        let id = || sample.id.clone();
        let x = point_matrix(sample);
        let cache = self.net.forward(&x).map_err(|source| TrainError::Net { id: id(), source })?;
        let out = match self.config.loss.evaluate(cache.embedding(), &sample.labels) {
            Ok(out) => out,
            Err(LossError::EmptyCluster(c)) => {
                log::warn!("skipping sample {}: cluster {} is empty", sample.id, c);
                return Ok(None);
            }
            Err(source) => return Err(TrainError::Loss { id: id(), source }),
        };
        let grads = self
            .net
            .backward(&cache, &out.grad)
            .map_err(|source| TrainError::Net { id: id(), source })?;
        if !grads.is_finite() || !out.value.is_finite() {
            return Err(TrainError::NonFiniteGradient { id: id() });
        }
        let g = grads.as_slices();
        self.adam.step(&mut self.net.tensors_mut(), &g)?;
        Ok(Some(out.value))
    }

    /// Sample order for a 0-based epoch index.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle {
            let mut rng = seed::rng(seed::derive(seed::derive(self.config.seed, SHUFFLE_STREAM), epoch as u64));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Runs the next epoch and validates on `val` when it is non-empty.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let epoch = self.epochs_done;
        let mut total = 0.0;
        let (mut steps, mut skipped) = (0, 0);
        for i in self.epoch_order(epoch, train.len()) {
            match self.step(&train[i])? {
                Some(v) => {
                    total += v;
                    steps += 1;
                }
                None => skipped += 1,
            }
        }
        if steps == 0 {
            return Err(TrainError::AllSkipped(epoch + 1));
        }
        let (val_error, val_nmi) = if val.is_empty() {
            (None, None)
        } else {
            let eval = evaluate(&self.net, val, KMode::GroundTruthK, &self.config.validation)?;
            (Some(eval.summary.mean_error), Some(eval.summary.mean_nmi))
        };
        self.epochs_done += 1;
        if let Some(err) = val_error {
            if self.best.as_ref().map_or(true, |b| err < b.val_error) {
                self.best = Some(BestNet {
                    epoch: self.epochs_done,
                    val_error: err,
                    net: self.net.clone(),
                });
            }
        }
        let record = EpochRecord {
            epoch: self.epochs_done,
            train_loss: total / steps as f64,
            val_error,
            val_nmi,
            steps,
            skipped,
        };
        log::info!(
            "epoch {} loss {:.6} val_error {:?} skipped {}",
            record.epoch,
            record.train_loss,
            record.val_error,
            record.skipped
        );
        self.history.push(record);
        Ok(record)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &[Sample], val: &[Sample]) -> Result<(), TrainError> {
        while !self.is_finished() {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let (net, best_epoch) = match &self.best {
            Some(b) => (b.net.clone(), Some(b.epoch)),
            None => (self.net.clone(), None),
        };
        TrainOutcome {
            net,
            best_epoch,
            final_net: self.net,
            history: self.history,
        }
    }
}

/// Trains `net` on `train` for `config.epochs` epochs.
pub fn train(net: EmbedNet, train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::with_net(config.clone(), net)?;
    trainer.run(train, val)?;
    Ok(trainer.finish())
}

/// Embeds every sample with `net` and scores the clustering.
pub fn evaluate(net: &EmbedNet, dataset: &[Sample], k_mode: KMode, config: &InferenceConfig) -> Result<Evaluation, TrainError> {
    let embeddings = embed_dataset(net, dataset)?;
    evaluate_embeddings(dataset, &embeddings, k_mode, config)
}

pub fn embed_dataset(net: &EmbedNet, dataset: &[Sample]) -> Result<Vec<Embedding>, TrainError> {
    dataset
        .iter()
        .map(|s| {
            net.embed(&point_matrix(s)).map_err(|source| TrainError::Net {
                id: s.id.clone(),
                source,
            })
        })
        .collect()
}

/// Scores precomputed embeddings, one per sample.
pub fn evaluate_embeddings(
    dataset: &[Sample],
    embeddings: &[Embedding],
    k_mode: KMode,
    config: &InferenceConfig,
) -> Result<Evaluation, TrainError> {
    if dataset.len() != embeddings.len() {
        return Err(TrainError::CountMismatch(embeddings.len(), dataset.len()));
    }
    let rows = dataset
        .iter()
        .zip(embeddings)
        .map(|(s, z)| {
            if z.rows() != s.labels.len() {
                return Err(TrainError::InvalidSample {
                    id: s.id.clone(),
                    reason: alloc::format!("{} embedding rows for {} labels", z.rows(), s.labels.len()),
                });
            }
            inference::evaluate_embedding(&s.id, z, &s.labels, s.k, k_mode, config).map_err(|source| {
                TrainError::Inference {
                    id: s.id.clone(),
                    source,
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = inference::summarize(&rows);
    Ok(Evaluation { rows, summary })
}
