//! Experiment orchestration and metrics.
//!
//! A full experiment runs, per split round: offline training on the
//! round's train/validation sets, accuracy on the test set, and — when a
//! schedule is given — a streaming pass over the round's post-deployment
//! training set followed by accuracy on the *same* test set. Aggregates
//! are unweighted means over successful rounds.
//!
//! Rounds are independent: each derives its own seeds from the round id,
//! so results do not depend on execution order and callers may fan rounds
//! out across threads and reassemble the same report.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::{SplitPlan, SplitRound, SplitStrategy, WindowedDataset};
use crate::error::Error;
use crate::model::{ExecMode, ForwardWorkspace, ModelParams, Topology};
use crate::odtl::{OdtlConfig, OdtlEngine, TileSize};
use crate::rng::StreamRng;
use crate::tensor::{argmax, NumericMode};
use crate::train::{train, TrainConfig};
use crate::Result;

/// Streaming-pass schedule for the post-deployment training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdtlSchedule {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub shuffle_seed: u64,
}

impl OdtlSchedule {
    pub fn new(epochs: usize, learning_rate: f32, momentum: f32) -> Self {
        OdtlSchedule {
            epochs,
            learning_rate,
            momentum,
            shuffle_seed: 0,
        }
    }

    pub fn with_shuffle_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::domain("odtl schedule needs at least 1 epoch"));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::domain("odtl schedule hyperparameters out of range"));
        }
        Ok(())
    }

    /// Named hyperparameter presets: `recgym` (lr 0.002, momentum 0.9,
    /// 1 epoch), `qvar` (0.002, 0.5, 5 epochs), `ultra` (0.002, 0.5,
    /// 1 epoch).
    pub fn preset(name: &str) -> Option<OdtlSchedule> {
        match name {
            "recgym" => Some(OdtlSchedule::new(1, 0.002, 0.9)),
            "qvar" => Some(OdtlSchedule::new(5, 0.002, 0.5)),
            "ultra" => Some(OdtlSchedule::new(1, 0.002, 0.5)),
            _ => None,
        }
    }

    pub const PRESET_NAMES: [&'static str; 3] = ["recgym", "qvar", "ultra"];
}

/// Drift loss: mean session-out accuracy minus mean person-out accuracy.
/// May be negative; reported as-is.
pub fn uicd_loss(acc_l1so: f64, acc_l1po: f64) -> f64 {
    acc_l1so - acc_l1po
}

/// Multiply-accumulate count of one inference pass: all convolutions plus
/// the dense layer (batch norm and activations excluded).
pub fn count_macs(topo: &Topology) -> u64 {
    let w = topo.input_width as u64;
    let h = topo.hidden_channels as u64;
    let stem = 3 * topo.input_channels as u64 * h * w;
    let blocks = 3 * topo.num_blocks as u64 * (3 * h * h * w);
    let dense = topo.num_classes as u64 * h * w;
    stem + blocks + dense
}

/// Parameters touched by one streaming update: the dense weights plus
/// bias. Independent of the input channel count.
pub fn count_update_params(topo: &Topology) -> u64 {
    (topo.classifier_param_count()) as u64
}

/// One row of an embedding export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub user_id: u16,
    pub label: u16,
    pub embedding: Vec<f32>,
}

/// Capture the flattened backbone output for each listed sample.
pub fn export_embeddings(
    model: &ModelParams,
    ds: &WindowedDataset,
    indices: &[usize],
) -> Result<Vec<EmbeddingRow>> {
    let mut ws = ForwardWorkspace::new(&model.topology);
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &ds.samples()[i];
        model.forward_into(&s.window, ExecMode::Infer, &mut ws)?;
        rows.push(EmbeddingRow {
            user_id: s.user_id,
            label: s.label,
            embedding: ws.dense_input().to_vec(),
        });
    }
    Ok(rows)
}

/// Fraction of correctly classified samples over an index set.
pub fn evaluate_accuracy(
    model: &ModelParams,
    ds: &WindowedDataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::domain("accuracy over an empty index set"));
    }
    let mut ws = ForwardWorkspace::new(&model.topology);
    let mut hits = 0usize;
    for &i in indices {
        let s = &ds.samples()[i];
        model.forward_into(&s.window, ExecMode::Infer, &mut ws)?;
        if argmax(ws.probabilities()) == usize::from(s.label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Offline-train a model for one round (always 32-bit), using a train
/// seed derived from the config seed and the round id.
pub fn train_round(
    ds: &WindowedDataset,
    round: &SplitRound,
    topology: Topology,
    config: &TrainConfig,
    round_id: usize,
) -> Result<ModelParams> {
    let mut cfg = *config;
    cfg.seed = StreamRng::seed(config.seed)
        .derive_path(&[0x524F_554E, round_id as u64])
        .next_u64();
    let (model, _) = train(ds, &round.offline_train, &round.offline_val, topology, &cfg)?;
    Ok(model)
}

/// Stream the round's post-deployment set through an engine for
/// `schedule.epochs` passes (reshuffled each epoch from a per-round
/// derived seed) and return the updated deployment plus the update count.
pub fn odtl_round(
    deployed: &ModelParams,
    ds: &WindowedDataset,
    round: &SplitRound,
    schedule: &OdtlSchedule,
    tile_size: TileSize,
    round_id: usize,
) -> Result<(ModelParams, u64)> {
    schedule.validate()?;
    let config = OdtlConfig::new(schedule.learning_rate, schedule.momentum)
        .with_tile_size(tile_size);
    let mut engine = OdtlEngine::new(deployed, config)?;
    let mut order: Vec<usize> = round.odtl_train.clone();
    for epoch in 0..schedule.epochs {
        let mut rng = StreamRng::seed(schedule.shuffle_seed)
            .derive_path(&[round_id as u64, epoch as u64]);
        rng.shuffle(&mut order);
        for &i in &order {
            let s = &ds.samples()[i];
            engine.learn_one(deployed, &s.window, usize::from(s.label))?;
        }
    }
    let mut updated = deployed.clone();
    engine.write_back(&mut updated)?;
    Ok((updated, engine.state().step_count))
}

/// Outcome of one round. A failed round carries its error text and is
/// excluded from aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub acc_oft: Option<f64>,
    pub acc_odtl: Option<f64>,
    pub updates_performed: u64,
    pub error: Option<String>,
}

impl RoundRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Deterministic operation counters carried in every report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    pub macs_per_inference: u64,
    pub params_per_update: u64,
    pub updates_performed: u64,
}

/// Per-round records plus aggregates for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub strategy: SplitStrategy,
    pub numeric_mode: NumericMode,
    pub rounds: Vec<RoundRecord>,
    pub mean_acc_oft: Option<f64>,
    pub mean_acc_odtl: Option<f64>,
    /// `mean_acc_odtl - mean_acc_oft`, when the streaming pass ran.
    pub odtl_gain: Option<f64>,
    /// Populated externally when comparing against a session-out
    /// baseline; a single experiment cannot compute it.
    pub uicd_loss: Option<f64>,
    pub counters: Counters,
}

impl ExperimentReport {
    pub fn failed_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.failed()).count()
    }
}

#[allow(clippy::too_many_arguments)]
fn run_round_inner(
    ds: &WindowedDataset,
    round: &SplitRound,
    topology: Topology,
    train_cfg: &TrainConfig,
    odtl: Option<&OdtlSchedule>,
    tile_size: TileSize,
    mode: NumericMode,
    round_id: usize,
) -> Result<RoundRecord> {
    let trained = train_round(ds, round, topology, train_cfg, round_id)?;
    let deployed = trained.deployed(mode);
    let acc_oft = evaluate_accuracy(&deployed, ds, &round.test)?;

    let mut record = RoundRecord {
        round: round_id,
        acc_oft: Some(acc_oft),
        acc_odtl: None,
        updates_performed: 0,
        error: None,
    };
    if let Some(schedule) = odtl {
        let (updated, updates) =
            odtl_round(&deployed, ds, round, schedule, tile_size, round_id)?;
        // Both conditions score the identical test index set.
        record.acc_odtl = Some(evaluate_accuracy(&updated, ds, &round.test)?);
        record.updates_performed = updates;
    }
    Ok(record)
}

/// Run one round to completion, capturing any error in the record. Round
/// results depend only on the round id and the seeds, never on execution
/// order, so callers may run rounds concurrently and reassemble with
/// [`assemble_report`].
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    ds: &WindowedDataset,
    round: &SplitRound,
    topology: Topology,
    train_cfg: &TrainConfig,
    odtl: Option<&OdtlSchedule>,
    tile_size: TileSize,
    mode: NumericMode,
    round_id: usize,
) -> RoundRecord {
    run_round_inner(ds, round, topology, train_cfg, odtl, tile_size, mode, round_id)
        .unwrap_or_else(|e| RoundRecord {
            round: round_id,
            acc_oft: None,
            acc_odtl: None,
            updates_performed: 0,
            error: Some(e.to_string()),
        })
}

/// Execute every round of a split plan: offline training, deployment in
/// `mode`, optional streaming adaptation, and test accuracy. A round that
/// errors is recorded as failed and excluded from the aggregates; the
/// experiment continues.
pub fn run_experiment(
    ds: &WindowedDataset,
    topology: Topology,
    train_cfg: &TrainConfig,
    plan: &SplitPlan,
    odtl: Option<&OdtlSchedule>,
    tile_size: TileSize,
    mode: NumericMode,
) -> ExperimentReport {
    let records: Vec<RoundRecord> = plan
        .rounds
        .iter()
        .enumerate()
        .map(|(round_id, round)| {
            run_round(ds, round, topology, train_cfg, odtl, tile_size, mode, round_id)
        })
        .collect();
    assemble_report(plan.strategy, mode, topology, records)
}

/// Build a report (aggregates included) from per-round records; exposed
/// so parallel drivers can reassemble rounds they ran themselves.
pub fn assemble_report(
    strategy: SplitStrategy,
    mode: NumericMode,
    topology: Topology,
    mut rounds: Vec<RoundRecord>,
) -> ExperimentReport {
    rounds.sort_by_key(|r| r.round);
    let ok = |f: fn(&RoundRecord) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = rounds.iter().filter(|r| !r.failed()).filter_map(f).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let mean_acc_oft = ok(|r| r.acc_oft);
    let mean_acc_odtl = ok(|r| r.acc_odtl);
    let odtl_gain = match (mean_acc_oft, mean_acc_odtl) {
        (Some(oft), Some(odtl)) => Some(odtl - oft),
        _ => None,
    };
    let updates_performed = rounds
        .iter()
        .filter(|r| !r.failed())
        .map(|r| r.updates_performed)
        .sum();
    ExperimentReport {
        strategy,
        numeric_mode: mode,
        rounds,
        mean_acc_oft,
        mean_acc_odtl,
        odtl_gain,
        uicd_loss: None,
        counters: Counters {
            macs_per_inference: count_macs(&topology),
            params_per_update: count_update_params(&topology),
            updates_performed,
        },
    }
}
