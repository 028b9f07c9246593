//! Subcommand implementations behind the `ehdl` binary.

pub mod report;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ehdl_core::accel_sim::{CostModel, DeviceConfig, Supply};
use ehdl_core::fxp::Q15;
use ehdl_core::inference::{parse_input, run_inference, InputFormat};
use ehdl_core::intermittent::{
    run_intermittent, CheckpointStats, DnfReason, InjectedFailures, IntermittentOptions, Outcome, PowerConfig,
    PowerEnvironment, PowerTrace, Scheme, TraceSupply, WastedWorkMeter,
};
use ehdl_core::model::{compression_report, validate_resource_fit, LayerKind, Model};
use ehdl_train::data::{self, Dataset};
use ehdl_train::{Arch, ExportOptions, Network, TrainConfig, TrainError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use report::{Envelope, ExportReport, Format, LayerCompression, PruneSummary, PrunedLayer, Report, RunFacts, RunReport};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_DID_NOT_FINISH: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    /// `summary` is the run report text, printed on stdout.
    #[error("inference did not finish: {reason}")]
    DidNotFinish { reason: String, summary: String },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::DidNotFinish { .. } => EXIT_DID_NOT_FINISH,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::DatasetMissing(_) | TrainError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_report(path: Option<&Path>, report: Report) -> Result<(), CliError> {
    if let Some(p) = path {
        let mut json = serde_json::to_string_pretty(&Envelope::now(report)).expect("reports serialize");
        json.push('\n');
        write(p, json.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "ehdl", version, about = "Train, compress and run DNNs on a simulated energy-harvesting device")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a float network for one of the reference architectures.
    Train(TrainArgs),
    /// Prune CONV filters of a trained network with ADMM, then retrain.
    Prune(PruneArgs),
    /// Fold, quantize and serialize a network into a model file.
    Export(ExportArgs),
    /// Run a model file under continuous power.
    Infer(InferArgs),
    /// Run a model file under intermittent power.
    Simulate(SimulateArgs),
    /// Render a report as text, CSV or plot series.
    Report(ReportArgs),
    /// Write one dataset image as a text input file.
    Sample(SampleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Use N synthetic samples per split instead of the real dataset.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub arch: Arch,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Block size for every FC layer that tiles it (1 trains dense FCs).
    #[arg(long, value_name = "K")]
    pub fc_block: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Config file with `retain.<layer> = N` lines and ADMM settings.
    #[arg(long)]
    pub target_spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_name = "K")]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub freq_domain: bool,
    /// Calibration images taken from the test split.
    #[arg(long, default_value_t = 256)]
    pub calibration: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DeviceArgs {
    /// Cost model overrides (`key = value` lines).
    #[arg(long)]
    pub cost: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `.txt`/`.csv`: one value per line; otherwise raw little-endian Q15.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub device: DeviceArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Flex,
    Baseline,
    None,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Flex => Scheme::Flex,
            SchemeArg::Baseline => Scheme::Baseline,
            SchemeArg::None => Scheme::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Harvest trace, one `time_us,power_uW` pair per line.
    #[arg(long, required_unless_present = "failure_density", conflicts_with = "failure_density")]
    pub trace: Option<PathBuf>,
    /// Inject power failures at this rate per accelerator-op unit instead of
    /// using a trace.
    #[arg(long, value_name = "RATE")]
    pub failure_density: Option<f64>,
    /// With --failure-density: warn this many units before each failure.
    #[arg(long, value_name = "UNITS")]
    pub warning_lead: Option<u64>,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "UF", default_value_t = 100.0)]
    pub capacitor_uf: f64,
    /// Starting capacitor charge as a fraction of the turn-on energy.
    #[arg(long, default_value_t = 0.0)]
    pub initial_charge: f64,
    #[arg(long)]
    pub no_monitor: bool,
    #[arg(long, default_value_t = 100)]
    pub restart_cap: u32,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub device: DeviceArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, conflicts_with = "plot_data")]
    pub csv: bool,
    #[arg(long)]
    pub plot_data: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value = "mnist")]
    pub arch: Arch,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

/// Train and test splits for `arch`. HAR and OKG always use synthetic data.
pub fn load_data(arch: Arch, data: &DataArgs, seed: u64) -> Result<(Dataset, Dataset, String), CliError> {
    let spec = arch.spec();
    let synthetic = |n: usize| {
        (
            data::synthetic(spec.input, spec.classes, n, seed),
            data::synthetic(spec.input, spec.classes, n.div_ceil(4).max(1), seed.wrapping_add(1)),
            "synthetic".to_string(),
        )
    };
    match (arch, data.synthetic) {
        (_, Some(n)) => Ok(synthetic(n)),
        (Arch::Mnist, None) => {
            let (tr, te) = data::load_mnist(&data::data_root())?;
            Ok((tr, te, "mnist".to_string()))
        }
        (Arch::Har | Arch::Okg, None) => Ok(synthetic(512)),
    }
}

fn network_arch(net: &Network) -> Result<Arch, CliError> {
    net.arch.ok_or_else(|| validation("network file has no architecture"))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        Some(p) => {
            let text = String::from_utf8(read(p)?).map_err(|_| validation(format!("{}: not UTF-8", p.display())))?;
            Ok(TrainConfig::parse(&text)?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    serde_json::from_slice(&read(path)?).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn save_network(net: &Network, path: &Path) -> Result<(), CliError> {
    write(path, &serde_json::to_vec(net).expect("networks serialize"))
}

fn train_cmd(a: &TrainArgs) -> Result<String, CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec = a.arch.spec();
    if let Some(k) = a.fc_block {
        if k == 0 {
            return Err(validation("--fc-block must be positive"));
        }
        spec = spec.with_fc_block(k);
    }
    let (train, test, dataset) = load_data(a.arch, &a.data, cfg.seed)?;
    let mut net = Network::init(&spec, cfg.seed);
    let stats = ehdl_train::train(&mut net, &train, &cfg)?;
    let acc = net.accuracy(&test);
    save_network(&net, &a.out)?;
    let train_samples = cfg.train_limit.map_or(train.len(), |n| n.min(train.len()));
    write_report(
        a.report.as_deref(),
        Report::Train(report::TrainReport {
            arch: a.arch.to_string(),
            dataset: dataset.clone(),
            train_samples,
            test_samples: test.len(),
            parameters: net.param_count(),
            epochs: stats.iter().map(Into::into).collect(),
            test_accuracy: acc,
        }),
    )?;
    Ok(format!("trained {} on {dataset} for {} epochs: test accuracy {acc:.4}\n", a.arch, stats.len()))
}

fn prune_cmd(a: &PruneArgs) -> Result<String, CliError> {
    let mut net = load_network(&a.model)?;
    let arch = network_arch(&net)?;
    let cfg = load_config(Some(&a.target_spec))?;
    let targets = if cfg.retain.is_empty() { arch.default_prune_targets() } else { cfg.retain.clone() };
    if targets.is_empty() {
        return Err(validation("no pruning targets: add retain.<layer> = N lines"));
    }
    let (train, test, dataset) = load_data(arch, &a.data, cfg.seed)?;
    let before = net.accuracy(&test);
    let rep = ehdl_train::admm_prune(&mut net, &train, &cfg, &targets)?;
    let after = net.accuracy(&test);
    save_network(&net, &a.out)?;
    let mut msg = String::new();
    for l in &rep.layers {
        msg.push_str(&format!("layer {}: kept {} of {} filters\n", l.layer, l.retained.len(), l.filters));
    }
    msg.push_str(&format!("test accuracy {before:.4} -> {after:.4}\n"));
    write_report(
        a.report.as_deref(),
        Report::Prune(PruneSummary {
            dataset,
            layers: rep
                .layers
                .iter()
                .map(|l| PrunedLayer { layer: l.layer, filters: l.filters, retained: l.retained.clone(), residuals: l.residuals.clone() })
                .collect(),
            epochs: rep.admm.iter().chain(&rep.retrain).map(Into::into).collect(),
            accuracy_before: before,
            accuracy_after: after,
        }),
    )?;
    Ok(msg)
}

/// Compression rows for a model, with FC layers summed into one factor.
pub fn compression_rows(model: &Model) -> Result<(Vec<LayerCompression>, f64), CliError> {
    let rows = compression_report(model, 2).map_err(validation)?;
    let (mut orig, mut comp) = (0u64, 0u64);
    let out = rows
        .iter()
        .enumerate()
        .filter(|(_, (kind, _))| !matches!(kind, LayerKind::MaxPool | LayerKind::Relu))
        .map(|(i, (kind, e))| {
            if matches!(kind, LayerKind::FcDense | LayerKind::FcBcm) {
                orig += e.original_bytes;
                comp += e.compressed_bytes;
            }
            LayerCompression {
                layer: i,
                kind: kind.name().to_string(),
                original_bytes: e.original_bytes,
                compressed_bytes: e.compressed_bytes,
                reduction_percent: e.reduction_percent(),
                factor: e.factor(),
            }
        })
        .collect();
    Ok((out, if comp == 0 { 1.0 } else { orig as f64 / comp as f64 }))
}

fn export_cmd(a: &ExportArgs) -> Result<String, CliError> {
    let net = load_network(&a.model)?;
    let arch = network_arch(&net)?;
    if a.block_size == Some(0) {
        return Err(validation("--block-size must be positive"));
    }
    let (_, test, _) = load_data(arch, &a.data, 1)?;
    let calib = test.take(a.calibration.max(1));
    let ex = ehdl_train::export_quantized(&net, &calib, &ExportOptions { block_size: a.block_size, freq_domain: a.freq_domain })?;
    let bytes = ex.model.serialize().map_err(validation)?;
    write(&a.out, &bytes)?;
    let (compression, fc_factor) = compression_rows(&ex.model)?;
    let fit = validate_resource_fit(&ex.model, &DeviceConfig::default());
    let rep = ExportReport {
        block_size: a.block_size,
        freq_domain: a.freq_domain,
        model_bytes: bytes.len(),
        compression,
        fc_factor,
        calibration_samples: ex.report.samples,
        calibration: ExportReport::calibration_entries(&ex.report),
        fit: (&fit).into(),
    };
    let env = Envelope::now(Report::Export(rep));
    let text = report::render(&env, Format::Text);
    write_report(a.report.as_deref(), env.report)?;
    Ok(text)
}

fn device_config(d: &DeviceArgs) -> Result<DeviceConfig, CliError> {
    let mut cfg = DeviceConfig::default();
    if let Some(p) = &d.cost {
        let text = String::from_utf8(read(p)?).map_err(|_| validation(format!("{}: not UTF-8", p.display())))?;
        cfg.cost = CostModel::parse(&text).map_err(validation)?;
    }
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &DeviceConfig) -> Result<Model, CliError> {
    Model::deserialize_with_capacity(&read(path)?, cfg.fram_bytes).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn load_input(path: &Path) -> Result<Vec<Q15>, CliError> {
    parse_input(&read(path)?, InputFormat::from_path(path)).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn infer_cmd(a: &InferArgs) -> Result<String, CliError> {
    let cfg = device_config(&a.device)?;
    let model = load_model(&a.model, &cfg)?;
    let input = load_input(&a.input)?;
    let run = run_inference(&model, &input, &cfg).map_err(validation)?;
    let rep = RunReport::build(
        RunFacts {
            model_path: a.model.display().to_string(),
            input_path: a.input.display().to_string(),
            model: &model,
            device: &run.device,
            plan: &run.plan,
            output: Some(&run.output),
            overflow: !run.flag.is_clean(),
        },
        CheckpointStats::default(),
        &WastedWorkMeter::new(),
        0.0,
    );
    let env = Envelope::now(Report::Infer(rep));
    let text = report::render(&env, Format::Text);
    write_report(a.report.as_deref(), env.report)?;
    Ok(text)
}

/// Failure points with exponential gaps of mean `1 / rate` units, up to `horizon`.
pub fn failure_schedule(rate: f64, horizon: u64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut at = 0.0f64;
    loop {
        let u: f64 = rng.random();
        at += -(1.0 - u).ln() / rate;
        if at >= horizon as f64 {
            return points;
        }
        points.push(at as u64);
    }
}

fn simulate_cmd(a: &SimulateArgs) -> Result<String, CliError> {
    let cfg = device_config(&a.device)?;
    let model = load_model(&a.model, &cfg)?;
    let input = load_input(&a.input)?;
    let (supply, source): (Box<dyn Supply>, String) = match (&a.trace, a.failure_density) {
        (Some(t), _) => {
            let text = String::from_utf8(read(t)?).map_err(|_| validation(format!("{}: not UTF-8", t.display())))?;
            let trace = PowerTrace::parse(&text).map_err(|e| validation(format!("{}: {e}", t.display())))?;
            if !(a.capacitor_uf > 0.0 && a.capacitor_uf.is_finite()) {
                return Err(validation("--capacitor-uf must be positive"));
            }
            let mut pc = PowerConfig { capacitance_f: a.capacitor_uf * 1e-6, ..PowerConfig::for_cost(&cfg) };
            pc.initial_energy_j = a.initial_charge.clamp(0.0, 1.0) * pc.energy_at(pc.v_on);
            (Box::new(TraceSupply { env: PowerEnvironment::new(pc, trace) }), t.display().to_string())
        }
        (None, Some(rate)) => {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(validation("--failure-density must be positive"));
            }
            let clean = run_inference(&model, &input, &cfg).map_err(validation)?;
            let horizon = clean.device.units().saturating_mul(50).max(1);
            let mut f = InjectedFailures::new(failure_schedule(rate, horizon, a.seed));
            if let Some(lead) = a.warning_lead {
                f = f.with_warning(lead);
            }
            (Box::new(f), format!("injected failures, density {rate}"))
        }
        (None, None) => return Err(validation("one of --trace or --failure-density is required")),
    };
    let opts = IntermittentOptions { restart_cap: a.restart_cap, monitor: !a.no_monitor, ..Default::default() };
    let run = run_intermittent(&model, &input, &cfg, supply, a.scheme.into(), opts).map_err(validation)?;
    let share = run.checkpoint_share();
    let mut rep = RunReport::build(
        RunFacts {
            model_path: a.model.display().to_string(),
            input_path: a.input.display().to_string(),
            model: &model,
            device: &run.device,
            plan: &run.plan,
            output: run.output(),
            overflow: !run.flag.is_clean(),
        },
        run.checkpoints,
        &run.meter,
        share,
    );
    rep.scheme = Some(run.scheme.name().to_string());
    rep.seed = Some(a.seed);
    let dnf = match &run.outcome {
        Outcome::DidNotFinish(r) => Some(dnf_text(r)),
        Outcome::Completed(_) => None,
    };
    rep.dnf_reason = dnf.clone();
    let env = run.trace_env();
    rep.power = Some(report::PowerSummary {
        source,
        boots: run.boots,
        time_us: env.map(|e| e.time_us),
        off_time_us: env.map(|e| e.off_time_us),
        harvested_j: env.map(|e| e.harvested_j),
        capacitance_f: env.map(|e| e.config.capacitance_f),
    });
    let env = Envelope::now(Report::Simulate(rep));
    let text = report::render(&env, Format::Text);
    write_report(a.report.as_deref(), env.report)?;
    match dnf {
        Some(reason) => Err(CliError::DidNotFinish { reason, summary: text }),
        None => Ok(text),
    }
}

fn dnf_text(r: &DnfReason) -> String {
    match r {
        DnfReason::TraceExhausted => "harvest trace exhausted".to_string(),
        DnfReason::RestartCap { restarts } => format!("restart cap reached after {restarts} restarts"),
        DnfReason::BootCap { boots } => format!("boot cap reached after {boots} boots"),
    }
}

fn report_cmd(a: &ReportArgs) -> Result<String, CliError> {
    let env: Envelope =
        serde_json::from_slice(&read(&a.input)?).map_err(|e| validation(format!("{}: {e}", a.input.display())))?;
    if env.schema_version != report::SCHEMA_VERSION {
        return Err(validation(format!("unsupported report schema version {}", env.schema_version)));
    }
    let format = match (a.csv, a.plot_data) {
        (true, _) => Format::Csv,
        (_, true) => Format::PlotData,
        _ => Format::Text,
    };
    Ok(report::render(&env, format))
}

fn sample_cmd(a: &SampleArgs) -> Result<String, CliError> {
    let (_, test, dataset) = load_data(a.arch, &a.data, 1)?;
    if a.index >= test.len() {
        return Err(validation(format!("index {} out of range for {} test images", a.index, test.len())));
    }
    let mut text = format!("# {dataset} test image {} label {}\n", a.index, test.labels[a.index]);
    for v in test.sample(a.index) {
        text.push_str(&format!("{v}\n"));
    }
    write(&a.out, text.as_bytes())?;
    Ok(format!("wrote {} (label {})\n", a.out.display(), test.labels[a.index]))
}

/// Runs one subcommand and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Train(a) => train_cmd(a),
        Command::Prune(a) => prune_cmd(a),
        Command::Export(a) => export_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Sample(a) => sample_cmd(a),
    }
}
