//! Machine-readable reports written by every subcommand.
//!
//! Every report is one JSON object with `schema_version`, `generated_at_unix`
//! and a `command` tag; the remaining fields depend on the command.

use ehdl_core::accel_sim::{Component, Device, OpKind};
use ehdl_core::inference::DataflowPlan;
use ehdl_core::intermittent::{CheckpointStats, WastedWorkMeter};
use ehdl_core::model::{FitReport, Model};
use ehdl_train::export::CalibrationReport;
use ehdl_train::EpochStats;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema_version: u32,
    pub generated_at_unix: u64,
    #[serde(flatten)]
    pub report: Report,
}

impl Envelope {
    pub fn now(report: Report) -> Self {
        let generated_at_unix =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Envelope { schema_version: SCHEMA_VERSION, generated_at_unix, report }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Report {
    Train(TrainReport),
    Prune(PruneSummary),
    Export(ExportReport),
    Infer(RunReport),
    Simulate(RunReport),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub learning_rate: f64,
}

impl From<&EpochStats> for EpochEntry {
    fn from(s: &EpochStats) -> Self {
        EpochEntry { epoch: s.epoch, loss: s.loss, train_accuracy: s.train_accuracy, learning_rate: s.learning_rate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: String,
    pub dataset: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub parameters: usize,
    pub epochs: Vec<EpochEntry>,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedLayer {
    pub layer: usize,
    pub filters: usize,
    pub retained: Vec<usize>,
    pub residuals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub dataset: String,
    pub layers: Vec<PrunedLayer>,
    pub epochs: Vec<EpochEntry>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCompression {
    pub layer: usize,
    pub kind: String,
    pub original_bytes: u64,
    pub compressed_bytes: u64,
    pub reduction_percent: String,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub layer: usize,
    pub kind: String,
    pub max_abs: f64,
    pub scale: Option<f64>,
    pub weight_exp: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub pass: bool,
    pub fram_capacity: usize,
    pub fram_required: usize,
    pub sram_capacity: usize,
    pub sram_required: usize,
    pub failures: Vec<String>,
}

impl From<&FitReport> for FitSummary {
    fn from(f: &FitReport) -> Self {
        FitSummary {
            pass: f.pass(),
            fram_capacity: f.fram_capacity,
            fram_required: f.fram_required,
            sram_capacity: f.sram_capacity,
            sram_required: f.sram_required,
            failures: f.failures.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportReport {
    pub block_size: Option<usize>,
    pub freq_domain: bool,
    pub model_bytes: usize,
    pub compression: Vec<LayerCompression>,
    /// Original over compressed bytes, summed over FC layers.
    pub fc_factor: f64,
    pub calibration_samples: usize,
    pub calibration: Vec<CalibrationEntry>,
    pub fit: FitSummary,
}

impl ExportReport {
    pub fn calibration_entries(r: &CalibrationReport) -> Vec<CalibrationEntry> {
        r.layers
            .iter()
            .map(|l| CalibrationEntry {
                layer: l.layer,
                kind: l.kind.to_string(),
                max_abs: l.max_abs,
                scale: l.scale,
                weight_exp: l.weight_exp,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub energy_fj: u64,
    pub latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    pub energy_fj: u64,
    pub latency_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub commits: u64,
    pub cursor_saves: u64,
    pub energy_fj: u64,
    pub max_checkpoint_fj: u64,
    pub restores: u64,
    pub restore_fj: u64,
    /// Checkpoint plus restore energy over run energy.
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WastedWork {
    pub ops_started: u64,
    pub reexecuted_ops: u64,
    pub reexecuted_completed: u64,
    pub failures: usize,
    pub hibernations: usize,
    pub max_per_failure: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub model_bytes: usize,
    pub fram_allocated_bytes: usize,
    pub activation_high_water_bytes: usize,
    pub checkpoint_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub source: String,
    pub boots: u64,
    pub time_us: Option<f64>,
    pub off_time_us: Option<f64>,
    pub harvested_j: Option<f64>,
    pub capacitance_f: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub input: String,
    pub scheme: Option<String>,
    pub seed: Option<u64>,
    pub status: String,
    pub dnf_reason: Option<String>,
    pub overflow: bool,
    pub output: Option<Vec<f64>>,
    pub output_q15: Option<Vec<i16>>,
    pub predicted_class: Option<usize>,
    pub total: Cost,
    pub components: BTreeMap<String, Cost>,
    pub layers: Vec<LayerCost>,
    pub ops: BTreeMap<String, u64>,
    pub checkpoints: CheckpointSummary,
    pub wasted_work: WastedWork,
    pub memory: MemorySummary,
    pub power: Option<PowerSummary>,
}

/// Fields shared by continuous and intermittent runs.
pub struct RunFacts<'a> {
    pub model_path: String,
    pub input_path: String,
    pub model: &'a Model,
    pub device: &'a Device,
    pub plan: &'a DataflowPlan,
    pub output: Option<&'a [ehdl_core::fxp::Q15]>,
    pub overflow: bool,
}

impl RunReport {
    pub fn build(facts: RunFacts<'_>, checkpoints: CheckpointStats, meter: &WastedWorkMeter, share: f64) -> Self {
        let ledger = &facts.device.ledger;
        let total = ledger.total();
        let components = Component::ALL
            .iter()
            .map(|&c| {
                let b = ledger.component(c);
                (c.name().to_string(), Cost { energy_fj: b.energy_fj, latency_ns: b.latency_ns })
            })
            .collect();
        let layers = ledger
            .per_layer()
            .iter()
            .enumerate()
            .map(|(i, b)| LayerCost {
                layer: i,
                kind: facts.model.layers.get(i).map_or("?", |l| l.kind().name()).to_string(),
                energy_fj: b.energy_fj,
                latency_us: b.latency_ns as f64 / 1000.0,
            })
            .collect();
        let ops = OpKind::ALL.iter().map(|&k| (k.name().to_string(), ledger.ops(k))).collect();
        let output = facts.output.map(|o| o.iter().map(|q| q.to_f64()).collect::<Vec<f64>>());
        RunReport {
            model: facts.model_path,
            input: facts.input_path,
            scheme: None,
            seed: None,
            status: if facts.output.is_some() { "completed" } else { "did_not_finish" }.to_string(),
            dnf_reason: None,
            overflow: facts.overflow,
            predicted_class: output.as_deref().map(ehdl_core::inference::argmax),
            output_q15: facts.output.map(|o| o.iter().map(|q| q.raw()).collect()),
            output,
            total: Cost { energy_fj: total.energy_fj, latency_ns: total.latency_ns },
            components,
            layers,
            ops,
            checkpoints: CheckpointSummary {
                commits: checkpoints.commits,
                cursor_saves: checkpoints.cursor_saves,
                energy_fj: checkpoints.checkpoint_fj,
                max_checkpoint_fj: checkpoints.max_checkpoint_fj,
                restores: checkpoints.restores,
                restore_fj: checkpoints.restore_fj,
                share,
            },
            wasted_work: WastedWork {
                ops_started: meter.ops_started,
                reexecuted_ops: meter.reexecuted_ops,
                reexecuted_completed: meter.reexecuted_completed,
                failures: meter.failure_count(),
                hibernations: meter.hibernations(),
                max_per_failure: meter.max_per_failure(),
            },
            memory: MemorySummary {
                model_bytes: facts.plan.model_bytes,
                fram_allocated_bytes: facts.plan.allocations.iter().map(|a| a.offset + a.len).max().unwrap_or(0),
                activation_high_water_bytes: facts.plan.activation_high_water,
                checkpoint_bytes: facts.plan.checkpoint.bytes(),
            },
            power: None,
        }
    }
}

/// Output flavour of the `report` subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Csv,
    PlotData,
}

fn fj_to_uj(fj: u64) -> f64 {
    fj as f64 * 1e-9
}

pub fn render(env: &Envelope, format: Format) -> String {
    match format {
        Format::Text => render_text(&env.report),
        Format::Csv => render_csv(&env.report),
        Format::PlotData => {
            let v = plot_data(&env.report);
            serde_json::to_string_pretty(&v).expect("json values serialize") + "\n"
        }
    }
}

fn render_text(r: &Report) -> String {
    let mut s = String::new();
    match r {
        Report::Train(t) => {
            let _ = writeln!(s, "train {} on {} ({} samples, {} parameters)", t.arch, t.dataset, t.train_samples, t.parameters);
            for e in &t.epochs {
                let _ = writeln!(s, "  epoch {:>3}  loss {:.4}  train acc {:.4}", e.epoch, e.loss, e.train_accuracy);
            }
            let _ = writeln!(s, "test accuracy {:.4} on {} samples", t.test_accuracy, t.test_samples);
        }
        Report::Prune(p) => {
            for l in &p.layers {
                let _ = writeln!(s, "layer {}: kept {} of {} filters {:?}", l.layer, l.retained.len(), l.filters, l.retained);
            }
            let _ = writeln!(s, "accuracy {:.4} -> {:.4}", p.accuracy_before, p.accuracy_after);
        }
        Report::Export(e) => {
            let _ = writeln!(s, "{:>5}  {:<9} {:>10} {:>10} {:>9} {:>8}", "layer", "kind", "original", "stored", "reduction", "factor");
            for c in &e.compression {
                let _ = writeln!(
                    s,
                    "{:>5}  {:<9} {:>10} {:>10} {:>9} {:>7.2}x",
                    c.layer, c.kind, c.original_bytes, c.compressed_bytes, c.reduction_percent, c.factor
                );
            }
            let _ = writeln!(s, "fc parameter reduction {:.2}x, model {} bytes", e.fc_factor, e.model_bytes);
            let peak = e.calibration.iter().map(|c| c.max_abs).fold(0.0, f64::max);
            let _ = writeln!(s, "calibration: {} samples, max |intermediate| {:.4}", e.calibration_samples, peak);
            let _ = writeln!(s, "resource fit: {}", if e.fit.pass { "pass".to_string() } else { e.fit.failures.join("; ") });
        }
        Report::Infer(run) | Report::Simulate(run) => {
            let _ = writeln!(s, "status {}{}", run.status, run.dnf_reason.as_ref().map_or(String::new(), |d| format!(" ({d})")));
            if let Some(scheme) = &run.scheme {
                let _ = writeln!(s, "scheme {scheme}");
            }
            if let Some(c) = run.predicted_class {
                let _ = writeln!(s, "predicted class {c}");
            }
            let _ = writeln!(s, "energy {:.3} uJ, latency {:.1} us", fj_to_uj(run.total.energy_fj), run.total.latency_ns as f64 / 1000.0);
            for (name, c) in &run.components {
                let _ = writeln!(s, "  {:<11} {:>12.3} uJ {:>12.1} us", name, fj_to_uj(c.energy_fj), c.latency_ns as f64 / 1000.0);
            }
            for l in &run.layers {
                let _ = writeln!(s, "  layer {:>2} {:<9} {:>12.3} uJ {:>12.1} us", l.layer, l.kind, fj_to_uj(l.energy_fj), l.latency_us);
            }
            let c = &run.checkpoints;
            let _ = writeln!(
                s,
                "checkpoints {} ({:.3} uJ, max {:.3} uJ), restores {}, share {:.3}%",
                c.commits,
                fj_to_uj(c.energy_fj),
                fj_to_uj(c.max_checkpoint_fj),
                c.restores,
                c.share * 100.0
            );
            let w = &run.wasted_work;
            let _ = writeln!(s, "failures {}, hibernations {}, re-executed ops {}", w.failures, w.hibernations, w.reexecuted_ops);
            let _ = writeln!(s, "activation high water {} bytes", run.memory.activation_high_water_bytes);
        }
    }
    s
}

fn render_csv(r: &Report) -> String {
    let mut s = String::new();
    match r {
        Report::Train(t) => {
            s.push_str("epoch,loss,train_accuracy,learning_rate\n");
            for e in &t.epochs {
                let _ = writeln!(s, "{},{},{},{}", e.epoch, e.loss, e.train_accuracy, e.learning_rate);
            }
        }
        Report::Prune(p) => {
            s.push_str("layer,filters,retained\n");
            for l in &p.layers {
                let _ = writeln!(s, "{},{},{}", l.layer, l.filters, l.retained.len());
            }
        }
        Report::Export(e) => {
            s.push_str("layer,kind,original_bytes,compressed_bytes,reduction_percent,factor\n");
            for c in &e.compression {
                let _ = writeln!(s, "{},{},{},{},{},{}", c.layer, c.kind, c.original_bytes, c.compressed_bytes, c.reduction_percent, c.factor);
            }
        }
        Report::Infer(run) | Report::Simulate(run) => {
            s.push_str("section,name,energy_fj,latency_ns\n");
            for (name, c) in &run.components {
                let _ = writeln!(s, "component,{name},{},{}", c.energy_fj, c.latency_ns);
            }
            for l in &run.layers {
                let _ = writeln!(s, "layer,{}:{},{},{}", l.layer, l.kind, l.energy_fj, (l.latency_us * 1000.0).round() as u64);
            }
            let _ = writeln!(s, "total,total,{},{}", run.total.energy_fj, run.total.latency_ns);
        }
    }
    s
}

fn plot_data(r: &Report) -> serde_json::Value {
    use serde_json::json;
    match r {
        Report::Train(t) => json!({
            "epoch": t.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(),
            "loss": t.epochs.iter().map(|e| e.loss).collect::<Vec<_>>(),
            "train_accuracy": t.epochs.iter().map(|e| e.train_accuracy).collect::<Vec<_>>(),
        }),
        Report::Prune(p) => json!({
            "layer": p.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
            "residuals": p.layers.iter().map(|l| l.residuals.clone()).collect::<Vec<_>>(),
        }),
        Report::Export(e) => json!({
            "layer": e.compression.iter().map(|c| c.layer).collect::<Vec<_>>(),
            "original_bytes": e.compression.iter().map(|c| c.original_bytes).collect::<Vec<_>>(),
            "compressed_bytes": e.compression.iter().map(|c| c.compressed_bytes).collect::<Vec<_>>(),
            "max_abs": e.calibration.iter().map(|c| c.max_abs).collect::<Vec<_>>(),
        }),
        Report::Infer(run) | Report::Simulate(run) => json!({
            "components": {
                "name": run.components.keys().collect::<Vec<_>>(),
                "energy_uj": run.components.values().map(|c| fj_to_uj(c.energy_fj)).collect::<Vec<_>>(),
                "latency_us": run.components.values().map(|c| c.latency_ns as f64 / 1000.0).collect::<Vec<_>>(),
            },
            "layers": {
                "index": run.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
                "kind": run.layers.iter().map(|l| l.kind.clone()).collect::<Vec<_>>(),
                "energy_uj": run.layers.iter().map(|l| fj_to_uj(l.energy_fj)).collect::<Vec<_>>(),
                "latency_us": run.layers.iter().map(|l| l.latency_us).collect::<Vec<_>>(),
            },
        }),
    }
}
