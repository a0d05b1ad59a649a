//! Line-oriented report rendering.
//!
//! Experiment reports are emitted as one `key=value` record per round
//! followed by a single `aggregate` record:
//!
//! ```text
//! round=<id> status=<ok|failed> [acc_oft=<f>] [acc_odtl=<f>] [updates=<n>] [error="<text>"]
//! aggregate strategy=<l1so|l1po|l1po2> numeric=<f32|bf16> rounds=<n> failed=<n>
//!     [mean_acc_oft=<f>] [mean_acc_odtl=<f>] [odtl_gain=<f>] [uicd_loss=<f>]
//!     macs_per_inference=<n> params_per_update=<n> updates_performed=<n>
//! ```
//!
//! (The aggregate record is one line; it is wrapped here for reading.)
//! Accuracies carry six decimals, so byte-identical inputs render
//! byte-identical reports. Training logs are JSON lines with `epoch`,
//! `train_loss`, and `val_loss` fields.

use std::fmt::Write;

use odtl_core::data::SplitStrategy;
use odtl_core::harness::ExperimentReport;
use odtl_core::tensor::NumericMode;
use odtl_core::train::TrainReport;

pub fn strategy_name(strategy: SplitStrategy) -> &'static str {
    match strategy {
        SplitStrategy::L1so { .. } => "l1so",
        SplitStrategy::L1po => "l1po",
        SplitStrategy::L1po2 { .. } => "l1po2",
    }
}

pub fn numeric_name(mode: NumericMode) -> &'static str {
    match mode {
        NumericMode::Full32 => "f32",
        NumericMode::Truncated16 => "bf16",
    }
}

/// Render a full experiment report.
pub fn render_experiment(report: &ExperimentReport) -> String {
    let mut out = String::new();
    for r in &report.rounds {
        write!(out, "round={} status={}", r.round, if r.failed() { "failed" } else { "ok" })
            .unwrap();
        if let Some(acc) = r.acc_oft {
            write!(out, " acc_oft={acc:.6}").unwrap();
        }
        if let Some(acc) = r.acc_odtl {
            write!(out, " acc_odtl={acc:.6}").unwrap();
        }
        if r.acc_odtl.is_some() {
            write!(out, " updates={}", r.updates_performed).unwrap();
        }
        if let Some(err) = &r.error {
            write!(out, " error=\"{}\"", err.replace('"', "'")).unwrap();
        }
        out.push('\n');
    }

    write!(
        out,
        "aggregate strategy={} numeric={} rounds={} failed={}",
        strategy_name(report.strategy),
        numeric_name(report.numeric_mode),
        report.rounds.len(),
        report.failed_rounds()
    )
    .unwrap();
    if let Some(v) = report.mean_acc_oft {
        write!(out, " mean_acc_oft={v:.6}").unwrap();
    }
    if let Some(v) = report.mean_acc_odtl {
        write!(out, " mean_acc_odtl={v:.6}").unwrap();
    }
    if let Some(v) = report.odtl_gain {
        write!(out, " odtl_gain={v:.6}").unwrap();
    }
    if let Some(v) = report.uicd_loss {
        write!(out, " uicd_loss={v:.6}").unwrap();
    }
    writeln!(
        out,
        " macs_per_inference={} params_per_update={} updates_performed={}",
        report.counters.macs_per_inference,
        report.counters.params_per_update,
        report.counters.updates_performed
    )
    .unwrap();
    out
}

/// Render a training run as JSON lines plus a final summary line.
pub fn render_training_log(report: &TrainReport) -> String {
    let mut out = String::new();
    for rec in &report.curve {
        writeln!(
            out,
            "{{\"epoch\":{},\"train_loss\":{:.6},\"val_loss\":{:.6}}}",
            rec.epoch, rec.train_loss, rec.val_loss
        )
        .unwrap();
    }
    writeln!(
        out,
        "{{\"epochs_run\":{},\"best_epoch\":{},\"best_val_loss\":{:.6},\"train_accuracy\":{:.6}}}",
        report.epochs_run,
        report.best_epoch,
        report.best_validation_loss,
        report.final_train_accuracy
    )
    .unwrap();
    out
}
