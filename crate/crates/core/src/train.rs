//! SGD training harness: Nesterov momentum, a step learning-rate schedule,
//! per-epoch metric records, and head-comparison runs.
//!
//! Every run is a pure function of its seed: weight init, data generation and
//! per-epoch shuffles each draw from their own named stream, samples are
//! accumulated in a fixed order, and the batch gradient is the mean over
//! samples. After each optimizer step on a capsule head, sigma maintenance
//! runs according to the configured mode: an exact refresh, or one hyper-power
//! step with a periodic exact re-initialization (and an exact re-init whenever
//! a step diverges).

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{zero_gradients, BackboneError, Mlp};
use crate::capsule::{SigmaMode, DEFAULT_EPS};
use crate::data::{
    self, DataError, DatasetSplit, IsotropicConfig, Sample, SynthConfig,
};
use crate::heads::{
    softmax_loss, CapsuleHead, GroupNeuronHead, Head, HeadError, HeadGrads, HeadKind, LinearHead,
};
use crate::model::{Model, ModelError};
use crate::seed::{child_seed, stream_rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Capsule(#[from] crate::capsule::CapsuleError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: u64 },
    #[error("cannot evaluate on an empty sample set")]
    EmptyEvalSet,
    #[error("dataset has no test split to report a final error on")]
    NoTestSet,
}

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    SynthLowRank(SynthConfig),
    SynthIsotropic(IsotropicConfig),
    Csv {
        path: String,
        label_column: String,
    },
    Idx {
        images: String,
        labels: String,
    },
}

/// Full experiment configuration. `lr_schedule` entries are
/// `(epoch, multiplier)`; from each listed epoch onward the base learning
/// rate is multiplied by the product of all multipliers reached so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: Vec<(usize, f64)>,
    pub head_kind: HeadKind,
    pub capsule_dim: usize,
    pub sigma_mode: SigmaMode,
    pub eps: f64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub dataset: DatasetSpec,
    pub normalize: bool,
    /// Fraction of the train split held out for validation; 0 disables.
    pub val_fraction: f64,
    /// In HyperPower mode, do an exact sigma re-init every this many steps.
    pub sigma_reinit_every: usize,
}

/// The default schedule: one x0.1 drop at the halfway epoch.
pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
    if epochs >= 2 {
        vec![(epochs / 2, 0.1)]
    } else {
        Vec::new()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 20;
        Self {
            seed: 0,
            epochs,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_schedule: default_schedule(epochs),
            head_kind: HeadKind::Capsule,
            capsule_dim: 4,
            sigma_mode: SigmaMode::Exact,
            eps: DEFAULT_EPS,
            hidden_dims: vec![128],
            feature_dim: 64,
            dataset: DatasetSpec::SynthLowRank(SynthConfig::default()),
            normalize: false,
            val_fraction: 0.0,
            sigma_reinit_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate {} must be >= 0", self.learning_rate));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.capsule_dim == 0 {
            return fail("capsule_dim must be >= 1".into());
        }
        if self.feature_dim < 2 {
            return fail("feature_dim must be >= 2".into());
        }
        if self.head_kind == HeadKind::Capsule && self.capsule_dim >= self.feature_dim {
            return fail(format!(
                "capsule_dim {} must be < feature_dim {}",
                self.capsule_dim, self.feature_dim
            ));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return fail(format!("eps {} must be >= 0", self.eps));
        }
        if !(self.val_fraction.is_finite() && (0.0..1.0).contains(&self.val_fraction)) {
            return fail(format!("val_fraction {} must lie in [0, 1)", self.val_fraction));
        }
        if self.sigma_reinit_every == 0 {
            return fail("sigma_reinit_every must be >= 1".into());
        }
        let mut prev: Option<usize> = None;
        for &(epoch, mult) in &self.lr_schedule {
            if let Some(p) = prev {
                if epoch <= p {
                    return fail(format!(
                        "lr_schedule epochs must be strictly increasing, saw {p} then {epoch}"
                    ));
                }
            }
            if !(mult.is_finite() && mult > 0.0) {
                return fail(format!("lr_schedule multiplier {mult} must be > 0"));
            }
            prev = Some(epoch);
        }
        Ok(())
    }

    fn effective_lr(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &(e, m) in &self.lr_schedule {
            if epoch >= e {
                lr *= m;
            }
        }
        lr
    }
}

/// True when an error is a non-finite-value overflow from the numeric core,
/// which the trainer reports as divergence at the current step.
fn is_overflow(e: &TrainError) -> bool {
    use crate::capsule::CapsuleError;
    use crate::linalg::LinalgError;
    let non_finite = |l: &LinalgError| matches!(l, LinalgError::NonFinite { .. });
    match e {
        TrainError::Linalg(l) => non_finite(l),
        TrainError::Backbone(BackboneError::Linalg(l)) => non_finite(l),
        TrainError::Capsule(CapsuleError::Linalg(l)) => non_finite(l),
        TrainError::Capsule(CapsuleError::SigmaDiverged) => true,
        TrainError::Head(HeadError::Linalg(l)) => non_finite(l),
        TrainError::Head(HeadError::Subspace { source, .. }) => match source {
            CapsuleError::Linalg(l) => non_finite(l),
            CapsuleError::SigmaDiverged => true,
            _ => false,
        },
        _ => false,
    }
}

/// Builds the dataset a config describes. Generation seeds derive from the
/// run seed, so a dataset is part of the run's reproducibility envelope.
pub fn build_dataset(config: &TrainConfig) -> Result<DatasetSplit, TrainError> {
    let data_seed = child_seed(config.seed, "data");
    let mut split = match &config.dataset {
        DatasetSpec::SynthLowRank(cfg) => data::synth_blobs(data_seed, cfg)?,
        DatasetSpec::SynthIsotropic(cfg) => data::synth_isotropic(data_seed, cfg)?,
        DatasetSpec::Csv { path, label_column } => {
            data::load_csv(std::path::Path::new(path), label_column)?
        }
        DatasetSpec::Idx { images, labels } => data::load_idx(
            std::path::Path::new(images),
            std::path::Path::new(labels),
        )?,
    };
    if config.normalize {
        split.normalize()?;
    }
    if config.val_fraction > 0.0 {
        split = data::split(&split, config.val_fraction, child_seed(config.seed, "data/split"))?;
    }
    Ok(split)
}

/// Per-epoch metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub mean_step_seconds: f64,
}

/// Everything a run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub final_test_error: Option<f64>,
    pub mean_step_seconds: f64,
    pub steps: u64,
    /// Number of exact refreshes that needed the eps ridge.
    pub eps_fallbacks: u64,
    /// Exact re-initializations performed in HyperPower mode.
    pub sigma_reinits: u64,
}

/// A trained model plus its run record.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
}

fn build_head(config: &TrainConfig, num_classes: usize) -> Result<Head, TrainError> {
    if num_classes < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 classes, dataset has {num_classes}"
        )));
    }
    let mut rng = stream_rng(config.seed, "init/head");
    let d = config.feature_dim;
    Ok(match config.head_kind {
        HeadKind::Capsule => Head::Capsule(CapsuleHead::random(
            num_classes,
            d,
            config.capsule_dim,
            config.sigma_mode,
            config.eps,
            &mut rng,
        )?),
        HeadKind::Linear => Head::Linear(LinearHead::random(num_classes, d, &mut rng)?),
        HeadKind::GroupNeuron => Head::GroupNeuron(GroupNeuronHead::random(
            num_classes,
            d,
            config.capsule_dim,
            &mut rng,
        )?),
    })
}

/// Trains a model on the given data. Deterministic given the config seed.
pub fn train(config: &TrainConfig, data: &DatasetSplit) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Config("train split is empty".into()));
    }
    if data.input_dim < 1 {
        return Err(TrainError::Config("input_dim must be >= 1".into()));
    }

    let mut dims = vec![data.input_dim];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(config.feature_dim);
    let mut backbone = Mlp::random(&dims, &mut stream_rng(config.seed, "init/backbone"))?;
    let mut head = build_head(config, data.num_classes)?;

    let mut vel_layers = zero_gradients(&backbone);
    let mut vel_head = HeadGrads::zeros_like(&head);

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut step_index: u64 = 0;
    let mut eps_fallbacks: u64 = 0;
    let mut sigma_reinits: u64 = 0;
    let mut total_step_seconds = 0.0;

    for epoch in 0..config.epochs {
        let lr = config.effective_lr(epoch);
        let mut rng = stream_rng(config.seed, &format!("shuffle/{epoch}"));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut miss = 0usize;
        let mut epoch_steps = 0usize;
        let mut epoch_seconds = 0.0;

        for batch in order.chunks(config.batch_size) {
            let started = Instant::now();
            let inv = 1.0 / batch.len() as f64;
            let mut grad_layers = zero_gradients(&backbone);
            let mut grad_head = HeadGrads::zeros_like(&head);
            let mut batch_loss = 0.0;

            let batch_result = (|| -> Result<(), TrainError> {
                for &idx in batch {
                    let (x, y) = &data.train[idx];
                    let (features, tape) = backbone.forward(x)?;
                    let out = head.forward(&features)?;
                    let loss = softmax_loss(out.scores(), *y)?;
                    batch_loss += loss;
                    if out.predicted() != *y {
                        miss += 1;
                    }
                    let hb = head.backward(&features, *y, &out)?;
                    let (layer_grads, _) = backbone.backward(&tape, &hb.input)?;
                    grad_head.add_scaled(&hb.weights, inv)?;
                    for (acc, g) in grad_layers.iter_mut().zip(&layer_grads) {
                        acc.weight.add_scaled(&g.weight, inv)?;
                        acc.bias.add_scaled(&g.bias, inv)?;
                    }
                }
                Ok(())
            })();
            if let Err(e) = batch_result {
                return Err(if is_overflow(&e) {
                    TrainError::Diverged { step: step_index }
                } else {
                    e
                });
            }

            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { step: step_index });
            }
            loss_sum += batch_loss;

            // Nesterov momentum: v <- mu v + g; theta <- theta - lr (g + mu v).
            let mu = config.momentum;
            for (v, g) in vel_layers.iter_mut().zip(&grad_layers) {
                v.weight.scale_in_place(mu);
                v.weight.add_scaled(&g.weight, 1.0)?;
                v.bias.as_mut_slice().iter_mut().for_each(|x| *x *= mu);
                v.bias.add_scaled(&g.bias, 1.0)?;
            }
            vel_head.scale_in_place(mu);
            vel_head.add_scaled(&grad_head, 1.0)?;

            for ((layer, g), v) in backbone
                .layers_mut()
                .iter_mut()
                .zip(&grad_layers)
                .zip(&vel_layers)
            {
                layer.weight.add_scaled(&g.weight, -lr)?;
                layer.weight.add_scaled(&v.weight, -lr * mu)?;
                layer.bias.add_scaled(&g.bias, -lr)?;
                layer.bias.add_scaled(&v.bias, -lr * mu)?;
            }
            head.apply_update(&grad_head, -lr)?;
            head.apply_update(&vel_head, -lr * mu)?;

            // Sigma maintenance after every weight update.
            let maintenance = (|| -> Result<(), TrainError> {
                match config.sigma_mode {
                    SigmaMode::Exact => {
                        eps_fallbacks += head.refresh_sigmas()? as u64;
                    }
                    SigmaMode::HyperPower => {
                        if (step_index + 1) % config.sigma_reinit_every as u64 == 0 {
                            eps_fallbacks += head.refresh_sigmas()? as u64;
                            sigma_reinits += 1;
                        } else {
                            head.hyperpower_sigmas()?;
                        }
                    }
                }
                Ok(())
            })();
            if let Err(e) = maintenance {
                return Err(if is_overflow(&e) {
                    TrainError::Diverged { step: step_index }
                } else {
                    e
                });
            }

            step_index += 1;
            epoch_steps += 1;
            epoch_seconds += started.elapsed().as_secs_f64();
        }

        total_step_seconds += epoch_seconds;
        let model_view = Model::new(backbone.clone(), head.clone())?;
        let val_error = if data.validation.is_empty() {
            None
        } else {
            Some(evaluate(&model_view, &data.validation)?.error_rate)
        };
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_error: miss as f64 / n as f64,
            val_error,
            mean_step_seconds: epoch_seconds / epoch_steps.max(1) as f64,
        });
    }

    let model = Model::new(backbone, head)?;
    let final_test_error = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.test)?.error_rate)
    };
    let record = RunRecord {
        epochs: records,
        final_test_error,
        mean_step_seconds: total_step_seconds / step_index.max(1) as f64,
        steps: step_index,
        eps_fallbacks,
        sigma_reinits,
    };
    Ok(TrainOutcome { model, record })
}

/// Per-class prediction counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub correct: usize,
    pub total: usize,
}

impl ClassStats {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub error_rate: f64,
    pub per_class: Vec<ClassStats>,
}

/// Classifies every sample by the argmax score and reports the error rate.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let mut per_class = vec![
        ClassStats {
            correct: 0,
            total: 0
        };
        model.num_classes()
    ];
    let mut miss = 0usize;
    for (x, y) in samples {
        let predicted = model.predict(x)?;
        if *y < per_class.len() {
            per_class[*y].total += 1;
            if predicted == *y {
                per_class[*y].correct += 1;
            }
        }
        if predicted != *y {
            miss += 1;
        }
    }
    Ok(EvalReport {
        error_rate: miss as f64 / samples.len() as f64,
        per_class,
    })
}

/// One head variant in a comparison run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Capsule or group dimension; ignored for linear heads.
    pub capsule_dim: usize,
}

impl HeadSpec {
    pub fn label(&self) -> String {
        match self.kind {
            HeadKind::Linear => "linear".to_string(),
            kind => format!("{kind}(c={})", self.capsule_dim),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub kind: HeadKind,
    pub capsule_dim: usize,
    pub test_errors: Vec<f64>,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_step_seconds: f64,
    /// `(t_head - t_linear) / t_linear` against the linear row, when present.
    /// Hardware-dependent; reported, never asserted.
    pub overhead_vs_linear: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

/// Trains every head variant over every seed on identical data (the dataset
/// and backbone init streams do not depend on the head), and reports
/// mean +/- std of the final test error per head.
pub fn compare_heads(
    base: &TrainConfig,
    heads: &[HeadSpec],
    seeds: &[u64],
) -> Result<ComparisonTable, TrainError> {
    if heads.is_empty() {
        return Err(TrainError::Config("no heads to compare".into()));
    }
    if seeds.is_empty() {
        return Err(TrainError::Config("no seeds to compare over".into()));
    }
    let mut rows = Vec::with_capacity(heads.len());
    for spec in heads {
        let mut errors = Vec::with_capacity(seeds.len());
        let mut step_seconds = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            config.seed = seed;
            config.head_kind = spec.kind;
            if spec.kind != HeadKind::Linear {
                config.capsule_dim = spec.capsule_dim;
            }
            let data = build_dataset(&config)?;
            let outcome = train(&config, &data)?;
            errors.push(outcome.record.final_test_error.ok_or(TrainError::NoTestSet)?);
            step_seconds.push(outcome.record.mean_step_seconds);
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let std = if errors.len() > 1 {
            (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                / (errors.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(ComparisonRow {
            label: spec.label(),
            kind: spec.kind,
            capsule_dim: if spec.kind == HeadKind::Linear {
                0
            } else {
                spec.capsule_dim
            },
            test_errors: errors,
            mean_error: mean,
            std_error: std,
            mean_step_seconds: step_seconds.iter().sum::<f64>() / step_seconds.len() as f64,
            overhead_vs_linear: None,
        });
    }
    if let Some(linear_time) = rows
        .iter()
        .find(|r| r.kind == HeadKind::Linear)
        .map(|r| r.mean_step_seconds)
    {
        for row in &mut rows {
            if row.kind != HeadKind::Linear && linear_time > 0.0 {
                row.overhead_vs_linear =
                    Some((row.mean_step_seconds - linear_time) / linear_time);
            }
        }
    }
    Ok(ComparisonTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
