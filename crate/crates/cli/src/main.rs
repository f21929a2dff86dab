//! `ontopipe` command-line driver.
//!
//! Exit status: 0 on success, 1 on usage or validation errors (bad flags,
//! unreadable or invalid inputs, unknown versions), 2 when a stage fails on
//! valid input or a scenario/oracle run does not hold.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ontopipe::checkpoint::{self, CheckpointError};
use ontopipe::circuit_breaker::{self, PeriodRatio};
use ontopipe::compliance::{self, AdapterRuleSet, DataOperation, OpKind};
use ontopipe::dormancy::{self, ActivationCondition, ActivationEvent, DormancyError, DormantStore, FeatureClass};
use ontopipe::dual_ontology::{self, Scope};
use ontopipe::harness::{self, HarnessError, Scenario};
use ontopipe::model::{read_jsonl, write_jsonl};
use ontopipe::synthgen::{self, DistortionSpec, SynthError};
use ontopipe::version_gate::{self, GateError};
use ontopipe::{bundled, oracle, sentinel};
use ontopipe::{CodeSystem, CodedRecord, Layer, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "ontopipe",
    version,
    about = "Ontology-aware pipeline stages for coded clinical data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic batch generation.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Route a batch onto a target terminology version.
    Gate(GateArgs),
    /// Annotate a batch with fidelity scores and write the per-institution report.
    FidelityReport(FidelityArgs),
    /// Populate the clinical layer and report layer divergence.
    InferClinical(InferArgs),
    /// Dormant feature store.
    #[command(subcommand)]
    Dormancy(DormancyCmd),
    /// Compare semantic fingerprints of two batches.
    DriftScan(DriftArgs),
    /// Retraining circuit breaker.
    #[command(subcommand)]
    Breaker(BreakerCmd),
    /// Evaluate an operation against compliance adapters.
    ComplyCheck(ComplyArgs),
    /// End-to-end scenario runs.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Independent reference computations.
    #[command(subcommand)]
    Oracle(OracleCmd),
}

#[derive(Args)]
struct SystemArg {
    /// Code system JSON file; the bundled syn-icd system when omitted.
    #[arg(long)]
    system: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration JSON; defaults for every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LayerArg {
    /// Code layer to read.
    #[arg(long, default_value = "administrative")]
    layer: Layer,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Write `qN.jsonl` record batches with `qN.truth.jsonl` ground truth.
    Generate(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario (bundled name or scenario file) whose distortion settings to use.
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    scenario: Option<String>,
    /// Distortion spec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Records per quarter; the scenario's size when omitted.
    #[arg(long)]
    n: Option<usize>,
    /// Number of consecutive quarters; the scenario's count when omitted.
    #[arg(long)]
    quarters: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Also write `history.jsonl`, a clean reference history of this size.
    #[arg(long)]
    history: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    system: SystemArg,
}

#[derive(Args)]
struct GateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target_version: String,
    /// Directory for accepted.jsonl, reconciled.jsonl and quarantine.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    system: SystemArg,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ReferenceArgs {
    /// Clean history the reference distributions are fitted on.
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Version of the reference model; the latest version when omitted.
    #[arg(long)]
    target_version: Option<String>,
    #[command(flatten)]
    system: SystemArg,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct FidelityArgs {
    #[command(flatten)]
    reference: ReferenceArgs,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the annotated records here.
    #[arg(long)]
    annotated: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    reference: ReferenceArgs,
    /// Records with both layers.
    #[arg(long)]
    out: PathBuf,
    /// Divergence CSV (population and per institution).
    #[arg(long)]
    divergence: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DormancyCmd {
    /// Classify codes and store the dormant ones.
    Classify(ClassifyArgs),
    /// Check stored activation conditions against a batch and events.
    Activate(ActivateArgs),
}

/// Significant codes with their notes and activation conditions.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SignificanceFile {
    significance: BTreeMap<String, String>,
    #[serde(default)]
    activation_conditions: BTreeMap<String, Vec<ActivationCondition>>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    input: PathBuf,
    /// JSON with `significance` (code to note) and `activation_conditions`.
    #[arg(long)]
    significance: PathBuf,
    /// Store file; updated in place when it exists.
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    prune_log: Option<PathBuf>,
    #[command(flatten)]
    layer: LayerArg,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ActivateArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// JSON array of events, e.g. `[{"kind":"OutbreakSignal","code":"S-J09"}]`.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    layer: LayerArg,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    current: PathBuf,
    /// Alerts JSON; printed to stdout only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layer: LayerArg,
    #[command(flatten)]
    system: SystemArg,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Subcommand)]
enum BreakerCmd {
    /// Compute the influence ratio of a cohort and evaluate the breaker.
    Check(BreakerArgs),
    /// Evaluate the same cohort at a range of thresholds (CSV on stdout).
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cohort: BreakerArgs,
    #[arg(long, default_value_t = 0.05)]
    from: f64,
    #[arg(long, default_value_t = 0.30)]
    to: f64,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
}

#[derive(Args)]
struct BreakerArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "cohort")]
    cohort: String,
    #[arg(long)]
    period: String,
    /// Earlier periods as `PERIOD=RATIO`, repeatable.
    #[arg(long = "prior", value_parser = parse_prior)]
    prior: Vec<PeriodRatio>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ComplyArgs {
    #[arg(long)]
    op: OpKind,
    /// Context entries as `key=value`, repeatable.
    #[arg(long = "context", num_args = 1..)]
    context: Vec<String>,
    /// Adapter rule files; the three bundled demo adapters when omitted.
    #[arg(long = "adapter")]
    adapters: Vec<PathBuf>,
    /// Operation time stamped on the audit entries. Defaults to the Unix
    /// epoch so that repeated checks are reproducible.
    #[arg(long)]
    timestamp: Option<DateTime<Utc>>,
    /// Write the full composition (verdict, audit entries, notes) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run every quarter of a scenario and write the run directory.
    Run(ScenarioArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Bundled scenario name or path to a scenario file.
    name: String,
    #[arg(long)]
    seed: u64,
    /// Run directory; `runs/<name>-seed<seed>` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Run a named oracle suite, or `all`.
    Run(OracleArgs),
    /// List the oracle names.
    List,
}

#[derive(Args)]
struct OracleArgs {
    name: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Scratch directory; a temporary one when omitted.
    #[arg(long)]
    scratch: Option<PathBuf>,
}

fn parse_prior(s: &str) -> Result<PeriodRatio, String> {
    let (period, ratio) = s.split_once('=').ok_or("expected PERIOD=RATIO")?;
    let ratio: f64 = ratio.parse().map_err(|e| format!("ratio: {e}"))?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(format!("ratio {ratio} outside [0, 1]"));
    }
    Ok(PeriodRatio {
        period: period.to_string(),
        ratio,
    })
}

enum Failure {
    Validation(String),
    Stage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Stage(_) => 2,
        }
    }
}

fn invalid(e: impl Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn stage(e: impl Display) -> Failure {
    Failure::Stage(e.to_string())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(SynthCmd::Generate(a)) => synth_generate(a),
        Command::Gate(a) => gate(a),
        Command::FidelityReport(a) => fidelity_report(a),
        Command::InferClinical(a) => infer_clinical(a),
        Command::Dormancy(DormancyCmd::Classify(a)) => dormancy_classify(a),
        Command::Dormancy(DormancyCmd::Activate(a)) => dormancy_activate(a),
        Command::DriftScan(a) => drift_scan(a),
        Command::Breaker(BreakerCmd::Check(a)) => breaker_check(a),
        Command::Breaker(BreakerCmd::Sweep(a)) => breaker_sweep(a),
        Command::ComplyCheck(a) => comply_check(a),
        Command::Scenario(ScenarioCmd::Run(a)) => scenario_run(a),
        Command::Oracle(OracleCmd::Run(a)) => oracle_run(a),
        Command::Oracle(OracleCmd::List) => {
            oracle::NAMES.iter().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(m) => eprintln!("error: {m}"),
                Failure::Stage(m) => eprintln!("stage error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

// ---------------------------------------------------------------------------
// Input helpers
// ---------------------------------------------------------------------------

fn load_system(arg: &SystemArg) -> Result<CodeSystem, Failure> {
    match &arg.system {
        Some(p) => ontopipe::load_code_system(p).map_err(invalid),
        None => Ok(bundled::syn_icd()),
    }
}

fn load_config(arg: &ConfigArg) -> Result<PipelineConfig, Failure> {
    match &arg.config {
        Some(p) => ontopipe::load_config(p).map_err(invalid),
        None => Ok(PipelineConfig::default()),
    }
}

fn records(path: &Path) -> Result<Vec<CodedRecord>, Failure> {
    read_jsonl(path).map_err(invalid)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| stage(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| stage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(stage)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_records(path: &Path, items: &[impl Serialize]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| stage(format!("{}: {e}", dir.display())))?;
    }
    write_jsonl(path, items).map_err(|e| stage(format!("{}: {e}", path.display())))
}

fn print_layer(layer: Layer) {
    println!("layer: {layer}");
}

fn synth_err(e: SynthError) -> Failure {
    invalid(e)
}

fn harness_err(e: HarnessError) -> Failure {
    match e {
        HarnessError::Spec(_) | HarnessError::MissingFile(_) => invalid(e),
        HarnessError::Stage { .. } | HarnessError::Io(_) => stage(e),
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn synth_generate(a: SynthArgs) -> Outcome {
    let scenario = a
        .scenario
        .as_deref()
        .map(Scenario::load)
        .transpose()
        .map_err(harness_err)?;
    let (system, spec, n, quarters) = match &scenario {
        Some(s) => {
            let system = match &a.system.system {
                Some(_) => load_system(&a.system)?,
                None => s.code_system().map_err(harness_err)?,
            };
            (
                system,
                s.spec.distortion.clone(),
                a.n.unwrap_or(s.spec.n_per_quarter),
                a.quarters.unwrap_or(s.spec.quarters),
            )
        }
        None => {
            let path = a.spec.as_ref().expect("clap requires --spec without --scenario");
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let spec: DistortionSpec =
                serde_json::from_str(&text).map_err(|e| invalid(format!("distortion spec: {e}")))?;
            (
                load_system(&a.system)?,
                spec,
                a.n.unwrap_or(1000),
                a.quarters.unwrap_or(1),
            )
        }
    };
    if n == 0 || quarters == 0 {
        return Err(invalid("--n and --quarters must be positive"));
    }
    let series = synthgen::generate_quarter_series(&system, &spec, quarters, n, a.seed).map_err(synth_err)?;
    for q in &series {
        let name = format!("q{}", q.quarter + 1);
        write_records(&a.out.join(format!("{name}.jsonl")), &q.records)?;
        write_records(&a.out.join(format!("{name}.truth.jsonl")), &q.truth.entries)?;
        let tagged = q.records.iter().filter(|r| r.is_ai_influenced()).count();
        println!(
            "{name}: {} records, {} AI-influenced, window {} .. {}",
            q.records.len(),
            tagged,
            q.window.start.format("%Y-%m-%d"),
            q.window.end.format("%Y-%m-%d")
        );
    }
    if let Some(size) = a.history {
        let mut hist_spec = match scenario {
            Some(s) => s.spec,
            None => {
                return Err(invalid(
                    "--history needs --scenario (it reuses the scenario's target version)",
                ));
            }
        };
        hist_spec.history_size = Some(size);
        let history = harness::history_batch(&hist_spec, &system, a.seed).map_err(harness_err)?;
        write_records(&a.out.join("history.jsonl"), &history)?;
        println!("history: {} records", history.len());
    }
    Ok(())
}

fn gate(a: GateArgs) -> Outcome {
    let system = load_system(&a.system)?;
    let cfg = load_config(&a.config)?;
    let batch = records(&a.input)?;
    print_layer(Layer::Administrative);
    let outcome = version_gate::gate_batch(&batch, &system, &a.target_version, &cfg).map_err(|e| match e {
        GateError::UnknownVersion(_) | GateError::Unvalidated(_) => invalid(e),
        GateError::Blocked(..) => stage(e),
    })?;
    outcome
        .write_all(&a.out)
        .map_err(|e| stage(format!("{}: {e}", a.out.display())))?;
    println!("input: {}", batch.len());
    println!("accepted: {}", outcome.accepted.len());
    println!("reconciled: {}", outcome.reconciled.len());
    println!("quarantined: {}", outcome.quarantined.len());
    for (reason, n) in outcome.reason_counts() {
        println!("  {reason:?}: {n}");
    }
    Ok(())
}

struct Annotated {
    system: CodeSystem,
    cfg: PipelineConfig,
    reference: checkpoint::ReferenceModel,
    batch: Vec<CodedRecord>,
}

fn annotate(a: &ReferenceArgs) -> Result<Annotated, Failure> {
    let system = load_system(&a.system)?;
    let cfg = load_config(&a.config)?;
    let version = match &a.target_version {
        Some(v) => v.clone(),
        None => system
            .latest_version()
            .ok_or_else(|| invalid("code system has no versions"))?
            .label
            .clone(),
    };
    let history = records(&a.history)?;
    let input = records(&a.input)?;
    let reference =
        checkpoint::build_reference_model(&history, &system, &version, Layer::Administrative).map_err(|e| match e {
            CheckpointError::UnknownVersion(_) => invalid(e),
            _ => stage(e),
        })?;
    let batch = if input.iter().all(|r| r.fidelity.is_some()) {
        input
    } else {
        checkpoint::annotate_batch(&input, &reference, &cfg)
    };
    Ok(Annotated {
        system,
        cfg,
        reference,
        batch,
    })
}

fn fidelity_report(a: FidelityArgs) -> Outcome {
    print_layer(Layer::Administrative);
    let ann = annotate(&a.reference)?;
    let rows = checkpoint::fidelity_report(&ann.batch).map_err(stage)?;
    write_text(&a.out, &checkpoint::fidelity_report_csv(&rows))?;
    if let Some(p) = &a.annotated {
        write_records(p, &ann.batch)?;
    }
    for r in &rows {
        println!("{}: n={} mean={:.4}", r.institution, r.n, r.mean);
    }
    Ok(())
}

fn infer_clinical(a: InferArgs) -> Outcome {
    let ann = annotate(&a.reference)?;
    let both = dual_ontology::infer_clinical_layer(&ann.batch, &ann.reference, &ann.system, &ann.cfg).map_err(stage)?;
    write_records(&a.out, &both)?;
    let mut reports = dual_ontology::divergence(&both, Scope::Population).map_err(stage)?;
    reports.extend(dual_ontology::divergence(&both, Scope::Institution).map_err(stage)?);
    if let Some(p) = &a.divergence {
        write_text(p, &dual_ontology::divergence_csv(&reports))?;
    }
    println!("layers: Administrative and Clinical written");
    println!("records: {}", both.len());
    println!("population disagreement: {:.6}", reports[0].disagreement_rate);
    Ok(())
}

fn dormancy_err(e: DormancyError) -> Failure {
    match e {
        DormancyError::NoCondition(_) | DormancyError::InvalidCondition(..) | DormancyError::Parse(_) => invalid(e),
        _ => stage(e),
    }
}

fn dormancy_classify(a: ClassifyArgs) -> Outcome {
    let layer = a.layer.layer;
    print_layer(layer);
    let cfg = load_config(&a.config)?;
    let text =
        std::fs::read_to_string(&a.significance).map_err(|e| invalid(format!("{}: {e}", a.significance.display())))?;
    let sig: SignificanceFile = serde_json::from_str(&text).map_err(|e| invalid(format!("significance file: {e}")))?;
    let batch = records(&a.input)?;
    let mut store = if a.store.is_file() {
        DormantStore::load(&a.store).map_err(dormancy_err)?
    } else {
        DormantStore::new()
    };
    let classes = dormancy::classify_features(&batch, &sig.significance, &cfg, layer).map_err(dormancy_err)?;
    dormancy::store_dormant(
        &mut store,
        &classes,
        &batch,
        &sig.activation_conditions,
        &sig.significance,
        layer,
    )
    .map_err(dormancy_err)?;
    if let Some(dir) = a.store.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(stage)?;
    }
    store.save(&a.store).map_err(dormancy_err)?;
    if let Some(p) = &a.prune_log {
        write_text(p, &store.prune_log_csv().map_err(dormancy_err)?)?;
    }
    for class in [FeatureClass::Active, FeatureClass::Dormant, FeatureClass::Pruned] {
        println!("{class:?}: {}", classes.values().filter(|c| **c == class).count());
    }
    for e in store.entries() {
        println!(
            "dormant {}: count {} with {} activation condition(s)",
            e.code,
            e.representation.count,
            e.activation_conditions.len()
        );
    }
    Ok(())
}

fn dormancy_activate(a: ActivateArgs) -> Outcome {
    let layer = a.layer.layer;
    print_layer(layer);
    let store = DormantStore::load(&a.store).map_err(|e| invalid(format!("{}: {e}", a.store.display())))?;
    let batch = records(&a.input)?;
    let events: Vec<ActivationEvent> = match &a.events {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(format!("events file: {e}")))?
        }
        None => Vec::new(),
    };
    let fired = dormancy::check_activation(&store, &batch, &events, layer).map_err(dormancy_err)?;
    write_json(&a.out, &fired)?;
    println!("activations: {}", fired.len());
    for f in &fired {
        println!("  {}: {:?}", f.code, f.condition);
    }
    Ok(())
}

fn drift_scan(a: DriftArgs) -> Outcome {
    let layer = a.layer.layer;
    print_layer(layer);
    let system = load_system(&a.system)?;
    let cfg = load_config(&a.config)?;
    let baseline = records(&a.baseline)?;
    let current = records(&a.current)?;
    let alerts = sentinel::scan_batches(&baseline, &current, &system, &cfg, layer).map_err(stage)?;
    if let Some(p) = &a.out {
        write_json(p, &alerts)?;
    }
    println!("alerts: {}", alerts.len());
    for al in &alerts {
        println!(
            "  {} {:?} divergence {:.4} confidence {:.2}",
            al.code, al.drift_type, al.divergence, al.confidence
        );
    }
    Ok(())
}

fn breaker_check(a: BreakerArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let cohort = records(&a.input)?;
    let stats = circuit_breaker::compute_stats(&a.cohort, &a.period, &cohort, &a.prior);
    let state = circuit_breaker::evaluate(&stats, &cfg);
    if let Some(p) = &a.out {
        write_json(p, &serde_json::json!({ "stats": stats, "state": state }))?;
    }
    println!(
        "ratio: {:.4} ({} of {})",
        stats.ratio, stats.tagged_count, stats.total_count
    );
    println!("state: {:?}", state.state);
    println!("reason: {}", state.reason);
    Ok(())
}

fn breaker_sweep(a: SweepArgs) -> Outcome {
    if !(a.step > 0.0 && 0.0 < a.from && a.from <= a.to && a.to < 1.0) {
        return Err(invalid("need 0 < from <= to < 1 and step > 0"));
    }
    let cfg = load_config(&a.cohort.config)?;
    let cohort = records(&a.cohort.input)?;
    let stats = circuit_breaker::compute_stats(&a.cohort.cohort, &a.cohort.period, &cohort, &a.cohort.prior);
    let steps = ((a.to - a.from) / a.step + 1e-9).floor() as usize;
    let thresholds: Vec<f64> = (0..=steps).map(|i| a.from + i as f64 * a.step).collect();
    let states = circuit_breaker::threshold_sweep(&stats, &thresholds, &cfg);
    let mut csv = String::from("threshold,ratio,state\n");
    for (t, s) in thresholds.iter().zip(&states) {
        csv.push_str(&format!("{t:.4},{:.6},{:?}\n", stats.ratio, s.state));
    }
    if let Some(p) = &a.cohort.out {
        write_text(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn comply_check(a: ComplyArgs) -> Outcome {
    let adapters: Vec<AdapterRuleSet> = if a.adapters.is_empty() {
        compliance::demo_adapters()
    } else {
        a.adapters
            .iter()
            .map(|p| compliance::load_adapter(p).map_err(invalid))
            .collect::<Result<_, _>>()?
    };
    let ts = a.timestamp.unwrap_or(DateTime::<Utc>::UNIX_EPOCH);
    let op = DataOperation::new(a.op, ts)
        .with_pairs(a.context.iter().map(String::as_str))
        .map_err(invalid)?;
    let comp = compliance::compose(&adapters, &op).map_err(invalid)?;
    if let Some(p) = &a.out {
        write_json(p, &comp)?;
    }
    println!("verdict: {}", serde_json::to_string(&comp.verdict).map_err(stage)?);
    for e in &comp.audit {
        println!(
            "audit {} [{}]: {:?} ({})",
            e.adapter_id,
            e.provision,
            e.verdict.kind(),
            e.reasoning
        );
    }
    for n in &comp.notes {
        println!("note: {n}");
    }
    Ok(())
}

fn scenario_run(a: ScenarioArgs) -> Outcome {
    let scn = Scenario::load(&a.name).map_err(harness_err)?;
    let dir = a
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", scn.spec.name, a.seed)));
    print_layer(scn.spec.layer);
    let report = harness::run_scenario(&scn, a.seed, &dir).map_err(harness_err)?;
    print!("{}", report.summary_text());
    println!("run directory: {}", dir.display());
    if report.passed() {
        Ok(())
    } else {
        Err(stage(format!(
            "scenario `{}` did not meet its expectations",
            report.scenario
        )))
    }
}

fn oracle_run(a: OracleArgs) -> Outcome {
    let names: Vec<&str> = if a.name == "all" {
        oracle::NAMES.to_vec()
    } else {
        vec![a.name.as_str()]
    };
    let tmp;
    let scratch = match &a.scratch {
        Some(p) => {
            std::fs::create_dir_all(p).map_err(stage)?;
            p.clone()
        }
        None => {
            tmp = std::env::temp_dir().join(format!("ontopipe-oracle-{}", std::process::id()));
            std::fs::create_dir_all(&tmp).map_err(stage)?;
            tmp
        }
    };
    let mut failed = 0usize;
    for name in names {
        let results = oracle::run_named(name, a.seed, &scratch).map_err(|e| match e {
            oracle::OracleError::Unknown(_) => invalid(e),
            _ => stage(e),
        })?;
        let bad = results.iter().filter(|r| !r.pass).count();
        failed += bad;
        println!("{name}: {} checks, {} failed", results.len(), bad);
        for r in results.iter().filter(|r| !r.pass) {
            println!(
                "  FAIL {}: expected {} observed {} tolerance {}",
                r.oracle_name, r.expected, r.observed, r.tolerance
            );
        }
    }
    if a.scratch.is_none() {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(stage(format!("{failed} oracle check(s) failed")))
    }
}
