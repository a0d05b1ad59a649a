//! Full-network offline training: backprop through the whole residual
//! net, Adam, early stopping on validation loss, and optional class
//! weighting for imbalanced label distributions.
//!
//! Training always runs in 32-bit arithmetic; numeric narrowing is a
//! deployment step, not a training concern. Everything is deterministic
//! given the config seed.

mod backprop;

pub use backprop::{
    backprop_full, batch_loss, pack_trainable, unpack_trainable, BackpropOutput, BnBatchStats,
    DropoutMasks, ParamLayout,
};

use alloc::vec;
use alloc::vec::Vec;

use crate::data::WindowedDataset;
use crate::error::Error;
use crate::model::{ExecMode, ForwardWorkspace, ModelParams, Topology};
use crate::rng::StreamRng;
use crate::tensor::argmax;
use crate::Result;

/// Momentum of the running-statistics update:
/// `running <- 0.9 * running + 0.1 * batch`.
pub const BN_RUNNING_MOMENTUM: f32 = 0.1;

/// Offline-training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_epsilon: f32,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub class_weighting: bool,
    pub validation_fraction: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            patience: 100,
            max_epochs: 1000,
            batch_size: 32,
            class_weighting: false,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::domain("learning rate must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::domain("patience must be at least 1"));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::domain("max_epochs and batch_size must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::domain("validation fraction outside (0, 1)"));
        }
        Ok(())
    }
}

/// One line of the per-epoch loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
}

/// Summary of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f32,
    pub final_train_accuracy: f64,
    pub curve: Vec<EpochRecord>,
}

/// Inverse-frequency class weights: `w_c = N / (C * N_c)`. Balanced
/// labels give weight 1 everywhere. Every class must appear at least
/// once.
pub fn class_weights(labels: &[u16], num_classes: usize) -> Result<Vec<f32>> {
    if num_classes == 0 {
        return Err(Error::domain("class_weights: no classes"));
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if usize::from(y) >= num_classes {
            return Err(Error::domain(alloc::format!(
                "class_weights: label {y} out of range"
            )));
        }
        counts[usize::from(y)] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::domain(alloc::format!(
            "class_weights: class {missing} has no samples"
        )));
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| (n / (num_classes as f64 * c as f64)) as f32)
        .collect())
}

// Flat Adam state over the trainable parameter vector.
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], cfg: &TrainConfig) {
        self.t += 1;
        let bias1 = 1.0 - libm::powf(cfg.beta1, self.t as f32);
        let bias2 = 1.0 - libm::powf(cfg.beta2, self.t as f32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= cfg.learning_rate * m_hat / (libm::sqrtf(v_hat) + cfg.adam_epsilon);
        }
    }
}

// Mean inference-mode cross-entropy over an index set.
fn eval_loss(
    model: &ModelParams,
    ds: &WindowedDataset,
    indices: &[usize],
    ws: &mut ForwardWorkspace,
) -> Result<f64> {
    let mut acc = 0.0f64;
    for &i in indices {
        let s = &ds.samples()[i];
        model.forward_into(&s.window, ExecMode::Infer, ws)?;
        let p_raw = ws.probabilities()[usize::from(s.label)];
        let p = if p_raw.is_finite() {
            p_raw.max(f32::MIN_POSITIVE)
        } else {
            p_raw
        };
        acc += f64::from(-libm::logf(p));
    }
    Ok(acc / indices.len() as f64)
}

fn eval_accuracy(
    model: &ModelParams,
    ds: &WindowedDataset,
    indices: &[usize],
    ws: &mut ForwardWorkspace,
) -> Result<f64> {
    let mut hits = 0usize;
    for &i in indices {
        let s = &ds.samples()[i];
        model.forward_into(&s.window, ExecMode::Infer, ws)?;
        if argmax(ws.probabilities()) == usize::from(s.label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Train a fresh model on `train_idx`, early-stopping on the validation
/// loss over `val_idx`, and return the parameters of the best validation
/// epoch. Deterministic given `config.seed`.
pub fn train(
    ds: &WindowedDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    topology: Topology,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::domain("train: empty train or validation set"));
    }

    let weights_per_class = if config.class_weighting {
        let labels: Vec<u16> = train_idx.iter().map(|&i| ds.samples()[i].label).collect();
        class_weights(&labels, topology.num_classes)?
    } else {
        vec![1.0; topology.num_classes]
    };

    let mut model = ModelParams::build(topology, config.seed)?;
    let layout = ParamLayout::new(&topology);
    let mut flat = pack_trainable(&model);
    let mut adam = Adam::new(layout.len());
    let mut ws = ForwardWorkspace::new(&topology);

    let root = StreamRng::seed(config.seed).derive(0x5452_4149);
    let mut order: Vec<usize> = train_idx.to_vec();

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut bad_epochs = 0usize;
    let mut curve = Vec::new();
    let mut epochs_run = 0usize;

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let mut epoch_rng = root.derive(epoch as u64);
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let windows: Vec<&crate::tensor::Tensor> =
                chunk.iter().map(|&i| &ds.samples()[i].window).collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| usize::from(ds.samples()[i].label))
                .collect();
            let sample_weights: Vec<f32> =
                labels.iter().map(|&y| weights_per_class[y]).collect();
            let masks = DropoutMasks::sample(&topology, chunk.len(), &mut epoch_rng);

            let out = backprop_full(&model, &windows, &labels, &sample_weights, &masks)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam.step(&mut flat, &out.gradients, config);
            unpack_trainable(&mut model, &flat);

            // Fold batch statistics into the running estimates.
            for (layer, stats) in model.backbone.iter_mut().zip(&out.batch_stats) {
                for c in 0..layer.bn.running_mean.len() {
                    layer.bn.running_mean[c] = (1.0 - BN_RUNNING_MOMENTUM)
                        * layer.bn.running_mean[c]
                        + BN_RUNNING_MOMENTUM * stats.mean[c];
                    layer.bn.running_var[c] = (1.0 - BN_RUNNING_MOMENTUM)
                        * layer.bn.running_var[c]
                        + BN_RUNNING_MOMENTUM * stats.var[c];
                }
            }

            loss_sum += f64::from(out.loss) * chunk.len() as f64;
            loss_n += chunk.len();
        }

        let val_loss = eval_loss(&model, ds, val_idx, &mut ws)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        curve.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / loss_n as f64) as f32,
            val_loss: val_loss as f32,
        });

        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                break;
            }
        }
    }

    let (best_loss, best_epoch, best_model) = best.expect("at least one epoch ran");
    let final_train_accuracy = eval_accuracy(&best_model, ds, train_idx, &mut ws)?;
    Ok((
        best_model,
        TrainReport {
            epochs_run,
            best_epoch,
            best_validation_loss: best_loss as f32,
            final_train_accuracy,
            curve,
        },
    ))
}
