//! Quarterly scenario runner.
//!
//! A scenario names a code system, a distortion spec, the compliance
//! adapters and a pipeline config. [`run_scenario`] generates each quarter,
//! pushes it through ingestion, storage, training and monitoring in that
//! order, wraps every outward-facing step in a compliance check, and writes
//! the per-stage artifacts plus a JSON report into a run directory.
//!
//! Quarters depend on one another: the breaker carries the influence-ratio
//! history forward and drift alerts from one quarter become activation
//! events for the dormant store in the next, so quarters run strictly in
//! sequence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{Duration, Months};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, FidelityRow};
use crate::circuit_breaker::{
    self, BreakerState, BreakerStateKind, InfluenceStats, PeriodRatio, RetrainOutcome, ToyRiskModel,
};
use crate::compliance::{self, AdapterRuleSet, Composition, ContextValue, DataOperation, OpKind, Verdict, VerdictKind};
use crate::dormancy::{
    self, Activation, ActivationCondition, ActivationEvent, DormantEntry, DormantStore, FeatureClass, SignificanceList,
};
use crate::dual_ontology::{self, Scope};
use crate::model::{write_jsonl, CodeSystem, CodedRecord, Layer, PipelineConfig, Window};
use crate::sentinel::{self, DriftAlert, DriftType};
use crate::synthgen::{self, DistortionSpec, GroundTruth};
use crate::{bundled, version_gate};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario spec: {0}")]
    Spec(String),
    #[error("referenced file `{0}` not found")]
    MissingFile(String),
    #[error("quarter {quarter}, stage {stage}: {detail}")]
    Stage {
        stage: &'static str,
        quarter: usize,
        detail: String,
    },
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_err(stage: &'static str, quarter: usize) -> impl Fn(&dyn std::fmt::Display) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        quarter,
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRequest {
    pub quarter: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconciledExpectation {
    pub quarter: usize,
    pub count: usize,
    pub of: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DormantExpectation {
    pub quarter: usize,
    pub code: String,
    pub count: usize,
    pub conditions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakerExpectation {
    pub quarter: usize,
    pub ratio: f64,
    pub state: BreakerStateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertExpectation {
    pub code: String,
    pub drift_type: DriftType,
    /// The alert must name a billing category with a non-zero overlap.
    #[serde(default)]
    pub billing_evidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployExpectation {
    pub verdict: VerdictKind,
    #[serde(default)]
    pub condition_contains: Option<String>,
}

/// Outcomes a scenario asserts about its own run. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expectations {
    pub reconciled: Option<ReconciledExpectation>,
    pub dormant: Option<DormantExpectation>,
    pub breaker: Vec<BreakerExpectation>,
    pub alert: Option<AlertExpectation>,
    pub deploy: Option<DeployExpectation>,
    pub refusal_quarter: Option<usize>,
    pub no_alerts: bool,
    pub closed_breaker: bool,
    pub zero_divergence: bool,
}

fn default_layer() -> Layer {
    Layer::Administrative
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    /// Path relative to the scenario file, or the name of a bundled fixture.
    pub code_system: String,
    pub target_version: String,
    pub distortion: DistortionSpec,
    pub quarters: usize,
    pub n_per_quarter: usize,
    /// Size of the clean history the reference model is fitted on;
    /// defaults to `n_per_quarter`.
    #[serde(default)]
    pub history_size: Option<usize>,
    #[serde(default)]
    pub config: PipelineConfig,
    pub adapters: Vec<String>,
    #[serde(default)]
    pub compliance_context: BTreeMap<String, ContextValue>,
    /// Layer read by dormancy, the breaker's model and the sentinel.
    #[serde(default = "default_layer")]
    pub layer: Layer,
    #[serde(default)]
    pub significance: SignificanceList,
    #[serde(default)]
    pub activation_conditions: BTreeMap<String, Vec<ActivationCondition>>,
    #[serde(default)]
    pub domain_requests: Vec<DomainRequest>,
    #[serde(default)]
    pub outcome_codes: BTreeSet<String>,
    #[serde(default)]
    pub expect: Expectations,
}

/// A spec plus the directory its relative paths resolve against. Bundled
/// specs have no directory and resolve against the bundled fixtures.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json(text: &str, base_dir: Option<PathBuf>) -> Result<Self, HarnessError> {
        let spec = serde_json::from_str(text).map_err(|e| HarnessError::Spec(e.to_string()))?;
        Ok(Self { spec, base_dir })
    }

    /// A bundled scenario name, or a path to a scenario file.
    pub fn load(name_or_path: &str) -> Result<Self, HarnessError> {
        let path = Path::new(name_or_path);
        if path.is_file() {
            let text = std::fs::read_to_string(path)?;
            return Self::from_json(&text, Some(path.parent().unwrap_or(Path::new(".")).to_path_buf()));
        }
        match bundled::file(name_or_path) {
            Some(text) => Self::from_json(text, None),
            None => Err(HarnessError::MissingFile(name_or_path.to_string())),
        }
    }

    /// The code system the scenario names, resolved like every other reference.
    pub fn code_system(&self) -> Result<CodeSystem, HarnessError> {
        CodeSystem::from_json(&self.read(&self.spec.code_system)?)
            .map_err(|e| HarnessError::Spec(format!("code system: {e}")))
    }

    fn read(&self, reference: &str) -> Result<String, HarnessError> {
        if let Some(dir) = &self.base_dir {
            let p = dir.join(reference);
            if p.is_file() {
                return Ok(std::fs::read_to_string(p)?);
            }
        }
        bundled::file(reference)
            .map(str::to_string)
            .ok_or_else(|| HarnessError::MissingFile(reference.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: usize,
    pub quarter: usize,
    pub layer: u8,
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<OpKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<VerdictKind>,
    /// Quarters whose data this entry reads, for monitoring entries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<usize>,
}

/// Stages that act outside the pipeline and the operation each is
/// checked as.
pub const EXTERNAL_STAGES: [(&str, OpKind); 4] = [
    ("ingest", OpKind::Ingest),
    ("retrain", OpKind::Train),
    ("deploy", OpKind::Deploy),
    ("export", OpKind::Export),
];

/// Required order between stages of one quarter, as (earlier, later).
pub const STAGE_ORDER: [(&str, &str); 9] = [
    ("ingest", "checkpoint"),
    ("checkpoint", "dual_ontology"),
    ("dual_ontology", "dormancy"),
    ("checkpoint", "breaker"),
    ("dormancy", "breaker"),
    ("breaker", "retrain"),
    ("retrain", "deploy"),
    ("breaker", "sentinel"),
    ("sentinel", "export"),
];

/// Checks a trace against the stage order, the layer order, the
/// monitoring references and compliance wrapping. Returns one message per
/// violation.
pub fn check_trace(trace: &[TraceEntry]) -> Vec<String> {
    let mut out = Vec::new();
    let quarters: BTreeSet<usize> = trace.iter().map(|t| t.quarter).collect();
    for q in quarters {
        let entries: Vec<&TraceEntry> = trace.iter().filter(|t| t.quarter == q).collect();
        let first = |stage: &str| entries.iter().find(|t| t.stage == stage).map(|t| t.seq);
        let last = |stage: &str| entries.iter().filter(|t| t.stage == stage).map(|t| t.seq).max();
        for (a, b) in STAGE_ORDER {
            if let (Some(a_seq), Some(b_seq)) = (last(a), first(b)) {
                if a_seq > b_seq {
                    out.push(format!("quarter {q}: `{a}` ran after `{b}`"));
                }
            }
        }
        let mut top = 0u8;
        for t in entries.iter().filter(|t| t.layer <= 3) {
            if t.layer < top {
                out.push(format!(
                    "quarter {q}: layer {} stage `{}` after layer {top}",
                    t.layer, t.stage
                ));
            }
            top = top.max(t.layer);
        }
        for t in &entries {
            for &r in &t.references {
                let done = trace
                    .iter()
                    .any(|e| e.quarter == r && e.stage == "breaker" && e.seq < t.seq);
                if r > q || !done {
                    out.push(format!(
                        "quarter {q}: `{}` reads quarter {r} before it completed",
                        t.stage
                    ));
                }
            }
            if let Some((_, op)) = EXTERNAL_STAGES.iter().find(|(s, _)| *s == t.stage) {
                let wrapped = entries.iter().any(|c| {
                    c.stage == "compliance"
                        && c.op == Some(*op)
                        && c.seq < t.seq
                        && c.verdict.is_some_and(|v| v != VerdictKind::Deny)
                });
                if !wrapped {
                    out.push(format!(
                        "quarter {q}: `{}` ran without a permitting {op:?} check",
                        t.stage
                    ));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub input: usize,
    pub accepted: usize,
    pub reconciled: usize,
    pub quarantined: usize,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub report: String,
    pub mean_by_institution: BTreeMap<String, f64>,
    /// Mean score per ground-truth distortion label.
    pub mean_by_label: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub report: String,
    pub population_rate: f64,
    pub by_institution: BTreeMap<String, f64>,
}

/// Share of records whose layer code equals the generator's true code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracy {
    pub administrative: f64,
    pub clinical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DormancySummary {
    pub active: usize,
    pub dormant: Vec<String>,
    pub pruned: usize,
    pub store: Vec<DormantEntry>,
    pub events: Vec<ActivationEvent>,
    pub activations: Vec<Activation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainSummary {
    /// `retrained`, `refused` or `skipped`.
    pub outcome: String,
    pub model_version: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRecord {
    pub op: OpKind,
    pub verdict: Verdict,
    pub notes: Vec<String>,
    pub audit_entries: usize,
    pub audit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarterReport {
    pub quarter: usize,
    pub period: String,
    pub window: Window,
    pub gate: GateSummary,
    pub fidelity: FidelitySummary,
    pub divergence: DivergenceSummary,
    pub layer_accuracy: LayerAccuracy,
    pub dormancy: DormancySummary,
    pub influence: InfluenceStats,
    pub breaker: BreakerState,
    pub retrain: RetrainSummary,
    pub deployed_model: Option<String>,
    pub alerts: Vec<DriftAlert>,
    pub compliance: Vec<ComplianceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub layer: Layer,
    pub target_version: String,
    pub history_size: usize,
    pub quarters: Vec<QuarterReport>,
    pub trace: Vec<TraceEntry>,
    pub trace_violations: Vec<String>,
    pub assertions: Vec<AssertionResult>,
}

impl RunReport {
    /// True when the trace is clean and every assertion holds.
    pub fn passed(&self) -> bool {
        self.trace_violations.is_empty() && self.assertions.iter().all(|a| a.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "scenario {} seed {} layer {} target version {}\n",
            self.scenario, self.seed, self.layer, self.target_version
        );
        for q in &self.quarters {
            s.push_str(&format!("\n[{}] quarter {}\n", q.period, q.quarter));
            s.push_str(&format!(
                "  gate: {} in, {} accepted, {} reconciled, {} quarantined\n",
                q.gate.input, q.gate.accepted, q.gate.reconciled, q.gate.quarantined
            ));
            let (low_inst, low_mean) = q
                .fidelity
                .mean_by_institution
                .iter()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map_or(("-", 0.0), |(k, v)| (k.as_str(), *v));
            s.push_str(&format!(
                "  fidelity: lowest institution mean {low_inst} {low_mean:.3}\n"
            ));
            s.push_str(&format!(
                "  layers: divergence {:.4}; accuracy administrative {:.4}, clinical {:.4}\n",
                q.divergence.population_rate, q.layer_accuracy.administrative, q.layer_accuracy.clinical
            ));
            for e in &q.dormancy.store {
                s.push_str(&format!(
                    "  dormant: {} count {} with {} activation condition(s)\n",
                    e.code,
                    e.representation.count,
                    e.activation_conditions.len()
                ));
            }
            for a in &q.dormancy.activations {
                s.push_str(&format!("  activated: {} by {:?}\n", a.code, a.condition));
            }
            s.push_str(&format!(
                "  breaker: ratio {:.4} -> {:?} ({}); retrain {} {}\n",
                q.influence.ratio, q.breaker.state, q.breaker.reason, q.retrain.outcome, q.retrain.model_version
            ));
            for a in &q.alerts {
                s.push_str(&format!(
                    "  drift: {} d={:.4} {:?} confidence {:.2}\n",
                    a.code, a.divergence, a.drift_type, a.confidence
                ));
            }
            for c in &q.compliance {
                let detail = match &c.verdict {
                    Verdict::Permit => String::new(),
                    Verdict::PermitWithConditions { conditions } => format!(": {}", conditions.join("; ")),
                    Verdict::Deny { reason } => format!(": {reason}"),
                };
                s.push_str(&format!(
                    "  compliance {:?}: {:?}{detail} ({} audit entries)\n",
                    c.op,
                    c.verdict.kind(),
                    c.audit_entries
                ));
            }
        }
        s.push_str(&format!(
            "\ntrace: {} entries, {} violations\n",
            self.trace.len(),
            self.trace_violations.len()
        ));
        for v in &self.trace_violations {
            s.push_str(&format!("  violation: {v}\n"));
        }
        for a in &self.assertions {
            s.push_str(&format!(
                "{} {}: {}\n",
                if a.pass { "PASS" } else { "FAIL" },
                a.name,
                a.detail
            ));
        }
        s
    }
}

struct Loaded {
    system: CodeSystem,
    adapters: Vec<AdapterRuleSet>,
}

fn load_inputs(scn: &Scenario) -> Result<Loaded, HarnessError> {
    let spec = &scn.spec;
    let system = scn.code_system()?;
    let mut adapters = Vec::new();
    for a in &spec.adapters {
        adapters.push(AdapterRuleSet::from_json(&scn.read(a)?).map_err(|e| HarnessError::Spec(e.to_string()))?);
    }
    if adapters.is_empty() {
        return Err(HarnessError::Spec("at least one compliance adapter is required".into()));
    }
    spec.config.validate().map_err(|e| HarnessError::Spec(e.to_string()))?;
    spec.distortion
        .validate(&system)
        .map_err(|e| HarnessError::Spec(e.to_string()))?;
    if spec.quarters == 0 || spec.n_per_quarter == 0 {
        return Err(HarnessError::Spec("quarters and n_per_quarter must be positive".into()));
    }
    if system.version(&spec.target_version).is_none() {
        return Err(HarnessError::Spec(format!("unknown version `{}`", spec.target_version)));
    }
    for code in spec.significance.keys() {
        let conds = spec.activation_conditions.get(code).filter(|c| !c.is_empty());
        let conds = conds
            .ok_or_else(|| HarnessError::Spec(format!("significant code `{code}` has no activation condition")))?;
        for c in conds {
            c.validate().map_err(|m| HarnessError::Spec(format!("`{code}`: {m}")))?;
        }
    }
    Ok(Loaded { system, adapters })
}

fn period_label(window: &Window) -> String {
    use chrono::Datelike;
    let d = window.start.date_naive();
    format!("{}Q{}", d.year(), (d.month0() / 3) + 1)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct Runner<'a> {
    scn: &'a Scenario,
    loaded: &'a Loaded,
    run_dir: &'a Path,
    trace: Vec<TraceEntry>,
}

impl Runner<'_> {
    fn log(&mut self, quarter: usize, layer: u8, stage: &str) {
        self.push(TraceEntry {
            seq: 0,
            quarter,
            layer,
            stage: stage.to_string(),
            op: None,
            verdict: None,
            references: Vec::new(),
        });
    }

    fn push(&mut self, mut e: TraceEntry) {
        e.seq = self.trace.len();
        self.trace.push(e);
    }

    fn comply(&mut self, quarter: usize, op: OpKind, window: &Window) -> Result<ComplianceRecord, HarnessError> {
        let timestamp = if op == OpKind::Ingest {
            window.start
        } else {
            window.end - Duration::seconds(1)
        };
        let mut data_op = DataOperation::new(op, timestamp);
        data_op.context = self.scn.spec.compliance_context.clone();
        let Composition { verdict, audit, notes } =
            compliance::compose(&self.loaded.adapters, &data_op).map_err(|e| stage_err("compliance", quarter)(&e))?;
        let rel = format!("q{quarter}/compliance-{}.json", format!("{op:?}").to_lowercase());
        let body = serde_json::json!({ "op": op, "verdict": verdict, "notes": notes, "audit": audit });
        std::fs::write(
            self.run_dir.join(&rel),
            serde_json::to_string_pretty(&body).expect("json"),
        )?;
        self.push(TraceEntry {
            seq: 0,
            quarter,
            layer: 5,
            stage: "compliance".into(),
            op: Some(op),
            verdict: Some(verdict.kind()),
            references: Vec::new(),
        });
        Ok(ComplianceRecord {
            op,
            verdict,
            notes,
            audit_entries: audit.len(),
            audit: rel,
        })
    }
}

/// The clean history a scenario's reference model is fitted on: the
/// quarter before the first one, same institutions and catch-all habits.
pub fn history_batch(spec: &ScenarioSpec, system: &CodeSystem, seed: u64) -> Result<Vec<CodedRecord>, HarnessError> {
    let d = &spec.distortion;
    let start = d
        .start_date
        .checked_sub_months(Months::new(3))
        .ok_or_else(|| HarnessError::Spec("start_date out of range".into()))?;
    // Standing institutional habits (catch-all coding) belong to the
    // history; dated effects, AI influence and version lag do not.
    let mut clean = DistortionSpec::clean(1, &spec.target_version, start);
    clean.institutions = d.institutions.clone();
    clean.catch_all = d.catch_all.clone();
    let n = spec.history_size.unwrap_or(spec.n_per_quarter);
    synthgen::generate_batch(system, &clean, n, synthgen::derive_seed(seed, u64::MAX))
        .map(|(records, _)| records)
        .map_err(|e| stage_err("history", 0)(&e))
}

fn label_means(batch: &[CodedRecord], truth: &GroundTruth) -> BTreeMap<String, f64> {
    let by_id = truth.by_id();
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in batch {
        let (Some(f), Some(t)) = (&r.fidelity, by_id.get(r.record_id.as_str())) else {
            continue;
        };
        for l in &t.distortion_labels {
            scores.entry(format!("{l:?}")).or_default().push(f.score());
        }
    }
    scores.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

fn accuracy(batch: &[CodedRecord], truth: &GroundTruth) -> LayerAccuracy {
    let by_id = truth.by_id();
    let (mut admin, mut clinical, mut n) = (0usize, 0usize, 0usize);
    for r in batch {
        let Some(t) = by_id.get(r.record_id.as_str()) else {
            continue;
        };
        n += 1;
        admin += usize::from(r.primary_code == t.true_clinical_code);
        clinical += usize::from(r.clinical_code.as_deref() == Some(t.true_clinical_code.as_str()));
    }
    let n = n.max(1) as f64;
    LayerAccuracy {
        administrative: admin as f64 / n,
        clinical: clinical as f64 / n,
    }
}

/// Runs every quarter of `scn` and writes the artifacts under `run_dir`.
///
/// Layout: `report.json`, `summary.txt`, `dashboard.csv` at the top, and per
/// quarter `qN/` with `input.jsonl`, `truth.jsonl`, `accepted.jsonl`,
/// `reconciled.jsonl`, `quarantine.jsonl`, `records.jsonl` (annotated, both
/// layers), `fidelity.csv`, `divergence.csv`, `dormant_store.json`,
/// `prune_log.csv`, `breaker.json`, `refusal.json` (when refused),
/// `model.json` (when deployed), `alerts.json` and one
/// `compliance-<op>.json` per checked operation.
pub fn run_scenario(scn: &Scenario, seed: u64, run_dir: &Path) -> Result<RunReport, HarnessError> {
    let loaded = load_inputs(scn)?;
    let spec = &scn.spec;
    let system = &loaded.system;
    let cfg = &spec.config;
    let layer = spec.layer;
    std::fs::create_dir_all(run_dir)?;

    let history = history_batch(spec, system, seed)?;
    let reference = checkpoint::build_reference_model(&history, system, &spec.target_version, Layer::Administrative)
        .map_err(|e| stage_err("checkpoint", 0)(&e))?;

    let mut runner = Runner {
        scn,
        loaded: &loaded,
        run_dir,
        trace: Vec::new(),
    };
    let mut quarters = Vec::new();
    let mut store = DormantStore::new();
    let mut ratio_history: Vec<PeriodRatio> = Vec::new();
    let mut dashboard: Vec<(InfluenceStats, BreakerState)> = Vec::new();
    let mut model = ToyRiskModel::untrained(spec.outcome_codes.clone());
    let mut deployed: Option<String> = None;
    let mut pending_events: Vec<ActivationEvent> = Vec::new();
    let mut previous: Option<(Window, Vec<CodedRecord>)> = None;

    for qi in 0..spec.quarters {
        let q = qi + 1;
        let qdir = run_dir.join(format!("q{q}"));
        std::fs::create_dir_all(&qdir)?;
        let window = synthgen::quarter_window(spec.distortion.start_date, qi);
        let period = period_label(&window);
        let mut compliance_log = Vec::new();

        // Layer 1: ingestion.
        let c = runner.comply(q, OpKind::Ingest, &window)?;
        let ingest_ok = c.verdict.kind() != VerdictKind::Deny;
        compliance_log.push(c);
        if !ingest_ok {
            return Err(HarnessError::Stage {
                stage: "ingest",
                quarter: q,
                detail: "ingestion denied by compliance".into(),
            });
        }
        let generated = synthgen::generate_quarter(system, &spec.distortion, spec.n_per_quarter, seed, qi)
            .map_err(|e| stage_err("ingest", q)(&e))?;
        write_jsonl(&qdir.join("input.jsonl"), &generated.records)?;
        write_jsonl(&qdir.join("truth.jsonl"), &generated.truth.entries)?;
        let outcome = version_gate::gate_batch(&generated.records, system, &spec.target_version, cfg)
            .map_err(|e| stage_err("ingest", q)(&e))?;
        outcome.write_all(&qdir)?;
        runner.log(q, 1, "ingest");
        let gate = GateSummary {
            input: generated.records.len(),
            accepted: outcome.accepted.len(),
            reconciled: outcome.reconciled.len(),
            quarantined: outcome.quarantined.len(),
            reasons: outcome
                .reason_counts()
                .into_iter()
                .map(|(k, v)| (format!("{k:?}"), v))
                .collect(),
        };
        let passed = outcome.passed();
        if passed.is_empty() {
            return Err(HarnessError::Stage {
                stage: "ingest",
                quarter: q,
                detail: "every record was quarantined".into(),
            });
        }

        let annotated = checkpoint::annotate_batch(&passed, &reference, cfg);
        let rows: Vec<FidelityRow> =
            checkpoint::fidelity_report(&annotated).map_err(|e| stage_err("checkpoint", q)(&e))?;
        std::fs::write(qdir.join("fidelity.csv"), checkpoint::fidelity_report_csv(&rows))?;
        runner.log(q, 1, "checkpoint");
        let fidelity = FidelitySummary {
            report: format!("q{q}/fidelity.csv"),
            mean_by_institution: rows.iter().map(|r| (r.institution.clone(), r.mean)).collect(),
            mean_by_label: label_means(&annotated, &generated.truth),
        };

        // Layer 2: storage.
        let records = dual_ontology::infer_clinical_layer(&annotated, &reference, system, cfg)
            .map_err(|e| stage_err("dual_ontology", q)(&e))?;
        write_jsonl(&qdir.join("records.jsonl"), &records)?;
        let mut div =
            dual_ontology::divergence(&records, Scope::Population).map_err(|e| stage_err("dual_ontology", q)(&e))?;
        let by_inst =
            dual_ontology::divergence(&records, Scope::Institution).map_err(|e| stage_err("dual_ontology", q)(&e))?;
        let divergence = DivergenceSummary {
            report: format!("q{q}/divergence.csv"),
            population_rate: div.first().map_or(0.0, |d| d.disagreement_rate),
            by_institution: by_inst.iter().map(|d| (d.key.clone(), d.disagreement_rate)).collect(),
        };
        div.extend(by_inst);
        std::fs::write(qdir.join("divergence.csv"), dual_ontology::divergence_csv(&div))?;
        runner.log(q, 2, "dual_ontology");
        let layer_accuracy = accuracy(&records, &generated.truth);

        let classes = dormancy::classify_features(&records, &spec.significance, cfg, layer)
            .map_err(|e| stage_err("dormancy", q)(&e))?;
        dormancy::store_dormant(
            &mut store,
            &classes,
            &records,
            &spec.activation_conditions,
            &spec.significance,
            layer,
        )
        .map_err(|e| stage_err("dormancy", q)(&e))?;
        let mut events = std::mem::take(&mut pending_events);
        events.extend(spec.domain_requests.iter().filter(|d| d.quarter == q).map(|d| {
            ActivationEvent::DomainTransferRequest {
                domain: d.domain.clone(),
            }
        }));
        let activations =
            dormancy::check_activation(&store, &records, &events, layer).map_err(|e| stage_err("dormancy", q)(&e))?;
        store
            .save(&qdir.join("dormant_store.json"))
            .map_err(|e| stage_err("dormancy", q)(&e))?;
        std::fs::write(
            qdir.join("prune_log.csv"),
            store.prune_log_csv().map_err(|e| stage_err("dormancy", q)(&e))?,
        )?;
        runner.log(q, 2, "dormancy");
        let count_of = |k: FeatureClass| classes.values().filter(|c| **c == k).count();
        let dormancy_summary = DormancySummary {
            active: count_of(FeatureClass::Active),
            dormant: classes
                .iter()
                .filter(|(_, c)| **c == FeatureClass::Dormant)
                .map(|(k, _)| k.clone())
                .collect(),
            pruned: count_of(FeatureClass::Pruned),
            store: store.entries().cloned().collect(),
            events,
            activations: activations.clone(),
        };

        // Layer 3: training.
        let stats =
            circuit_breaker::compute_stats(&format!("{}-{period}", spec.name), &period, &records, &ratio_history);
        ratio_history = stats.history.clone();
        let state = circuit_breaker::evaluate(&stats, cfg);
        std::fs::write(
            qdir.join("breaker.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "stats": stats, "state": state })).expect("json"),
        )?;
        dashboard.push((stats.clone(), state.clone()));
        runner.log(q, 3, "breaker");
        let features: BTreeSet<String> = classes
            .iter()
            .filter(|(_, c)| **c == FeatureClass::Active)
            .map(|(k, _)| k.clone())
            .chain(activations.iter().map(|a| a.code.clone()))
            .collect();
        let retrain = if state.state == BreakerStateKind::Open {
            match circuit_breaker::retrain_gate(&state, &stats, &records, &model, Some(&features), layer)
                .map_err(|e| stage_err("retrain", q)(&e))?
            {
                RetrainOutcome::Refused(r) => {
                    std::fs::write(
                        qdir.join("refusal.json"),
                        serde_json::to_string_pretty(&r).expect("json"),
                    )?;
                    RetrainSummary {
                        outcome: "refused".into(),
                        model_version: r.model_version.clone(),
                        note: r.note,
                    }
                }
                RetrainOutcome::Retrained(_) => unreachable!("an open breaker never retrains"),
            }
        } else {
            let c = runner.comply(q, OpKind::Train, &window)?;
            let allowed = c.verdict.kind() != VerdictKind::Deny;
            compliance_log.push(c);
            if allowed {
                let outcome = circuit_breaker::retrain_gate(&state, &stats, &records, &model, Some(&features), layer)
                    .map_err(|e| stage_err("retrain", q)(&e))?;
                runner.log(q, 3, "retrain");
                let RetrainOutcome::Retrained(new_model) = outcome else {
                    unreachable!("a closed or warning breaker retrains")
                };
                model = new_model;
                let c = runner.comply(q, OpKind::Deploy, &window)?;
                let deploy_ok = c.verdict.kind() != VerdictKind::Deny;
                compliance_log.push(c);
                if deploy_ok {
                    std::fs::write(
                        qdir.join("model.json"),
                        serde_json::to_string_pretty(&model).expect("json"),
                    )?;
                    deployed = Some(model.model_version.clone());
                    runner.log(q, 3, "deploy");
                }
                RetrainSummary {
                    outcome: "retrained".into(),
                    model_version: model.model_version.clone(),
                    note: if deploy_ok {
                        "deployed".into()
                    } else {
                        "deployment denied".into()
                    },
                }
            } else {
                RetrainSummary {
                    outcome: "skipped".into(),
                    model_version: model.model_version.clone(),
                    note: "training denied by compliance".into(),
                }
            }
        };

        // Layer 4: monitoring, over completed quarters only.
        let alerts = match &previous {
            Some((prev_window, prev_records)) => {
                let mut scan_cfg = cfg.clone();
                scan_cfg.baseline_window = Some(*prev_window);
                scan_cfg.current_window = Some(window);
                let alerts = sentinel::scan_batches(prev_records, &records, system, &scan_cfg, layer)
                    .map_err(|e| stage_err("sentinel", q)(&e))?;
                runner.push(TraceEntry {
                    seq: 0,
                    quarter: q,
                    layer: 4,
                    stage: "sentinel".into(),
                    op: None,
                    verdict: None,
                    references: vec![q - 1, q],
                });
                alerts
            }
            None => Vec::new(),
        };
        std::fs::write(
            qdir.join("alerts.json"),
            serde_json::to_string_pretty(&alerts).expect("json"),
        )?;
        pending_events = sentinel::outbreak_events(&alerts, system);

        let c = runner.comply(q, OpKind::Export, &window)?;
        let export_ok = c.verdict.kind() != VerdictKind::Deny;
        compliance_log.push(c);
        if export_ok {
            std::fs::write(
                run_dir.join("dashboard.csv"),
                circuit_breaker::dashboard_csv(&dashboard),
            )?;
            runner.log(q, 4, "export");
        }

        quarters.push(QuarterReport {
            quarter: q,
            period,
            window,
            gate,
            fidelity,
            divergence,
            layer_accuracy,
            dormancy: dormancy_summary,
            influence: stats,
            breaker: state,
            retrain,
            deployed_model: deployed.clone(),
            alerts,
            compliance: compliance_log,
        });
        previous = Some((window, records));
    }

    let trace = runner.trace;
    let trace_violations = check_trace(&trace);
    let mut report = RunReport {
        scenario: spec.name.clone(),
        seed,
        layer,
        target_version: spec.target_version.clone(),
        history_size: history.len(),
        quarters,
        trace,
        trace_violations,
        assertions: Vec::new(),
    };
    report.assertions = check_expectations(&spec.expect, &report, loaded.adapters.len());
    std::fs::write(run_dir.join("report.json"), report.to_json())?;
    std::fs::write(run_dir.join("summary.txt"), report.summary_text())?;
    Ok(report)
}

fn quarter(report: &RunReport, q: usize) -> Option<&QuarterReport> {
    report.quarters.iter().find(|r| r.quarter == q)
}

/// Evaluates a scenario's expectations against its report.
pub fn check_expectations(expect: &Expectations, report: &RunReport, adapters: usize) -> Vec<AssertionResult> {
    let mut out = Vec::new();
    let mut add = |name: String, pass: bool, detail: String| out.push(AssertionResult { name, pass, detail });
    if let Some(e) = &expect.reconciled {
        let got = quarter(report, e.quarter).map(|q| (q.gate.reconciled, q.gate.input));
        add(
            format!("quarter {} reconciled {} of {}", e.quarter, e.count, e.of),
            got == Some((e.count, e.of)),
            format!("observed {got:?}"),
        );
    }
    if let Some(e) = &expect.dormant {
        let entry = quarter(report, e.quarter).and_then(|q| q.dormancy.store.iter().find(|d| d.code == e.code));
        let got = entry.map(|d| (d.representation.count, d.activation_conditions.len()));
        add(
            format!("dormant {} count {} with {} conditions", e.code, e.count, e.conditions),
            got == Some((e.count, e.conditions)),
            format!("observed {got:?}"),
        );
    }
    for e in &expect.breaker {
        let got = quarter(report, e.quarter).map(|q| (q.influence.ratio, q.breaker.state));
        let pass = got.is_some_and(|(r, s)| (r - e.ratio).abs() <= 1e-12 && s == e.state);
        add(
            format!("quarter {} ratio {} state {:?}", e.quarter, e.ratio, e.state),
            pass,
            format!("observed {got:?}"),
        );
    }
    if let Some(e) = &expect.alert {
        let hit = report
            .quarters
            .iter()
            .flat_map(|q| q.alerts.iter().map(move |a| (q.quarter, a)))
            .find(|(_, a)| {
                a.code == e.code
                    && a.drift_type == e.drift_type
                    && (!e.billing_evidence
                        || (a.evidence.billing_category.is_some() && a.evidence.billing_overlap > 0.0))
            });
        add(
            format!("{:?} alert on {}", e.drift_type, e.code),
            hit.is_some(),
            match hit {
                Some((q, a)) => format!(
                    "quarter {q}: d={:.4}, billing category {:?} overlap {:.3}",
                    a.divergence, a.evidence.billing_category, a.evidence.billing_overlap
                ),
                None => "no matching alert".into(),
            },
        );
    }
    if let Some(e) = &expect.deploy {
        let first = report
            .quarters
            .iter()
            .flat_map(|q| q.compliance.iter())
            .find(|c| c.op == OpKind::Deploy);
        let pass = first.is_some_and(|c| {
            let has_condition = match (&e.condition_contains, &c.verdict) {
                (None, _) => true,
                (Some(s), Verdict::PermitWithConditions { conditions }) => conditions.iter().any(|x| x.contains(s)),
                _ => false,
            };
            c.verdict.kind() == e.verdict && has_condition && c.audit_entries == adapters
        });
        add(
            format!("deploy verdict {:?}", e.verdict),
            pass,
            format!("observed {:?}", first.map(|c| (&c.verdict, c.audit_entries))),
        );
    }
    if let Some(q) = expect.refusal_quarter {
        let got = quarter(report, q).map(|r| r.retrain.outcome.clone());
        add(
            format!("retraining refused in quarter {q}"),
            got.as_deref() == Some("refused"),
            format!("observed {got:?}"),
        );
    }
    if expect.no_alerts {
        let n: usize = report.quarters.iter().map(|q| q.alerts.len()).sum();
        add("no drift alerts".into(), n == 0, format!("{n} alerts"));
    }
    if expect.closed_breaker {
        let states: Vec<BreakerStateKind> = report.quarters.iter().map(|q| q.breaker.state).collect();
        add(
            "breaker closed throughout".into(),
            states.iter().all(|s| *s == BreakerStateKind::Closed),
            format!("{states:?}"),
        );
    }
    if expect.zero_divergence {
        let rates: Vec<f64> = report.quarters.iter().map(|q| q.divergence.population_rate).collect();
        add(
            "zero layer divergence".into(),
            rates.iter().all(|r| *r == 0.0),
            format!("{rates:?}"),
        );
    }
    out
}

/// Ground-truth labels attached to a record id, read back from a run's
/// `truth.jsonl`. Used by tests that want labels without regenerating.
pub fn read_truth(path: &Path) -> Result<GroundTruth, HarnessError> {
    let entries = crate::model::read_jsonl(path).map_err(|e| HarnessError::Spec(e.to_string()))?;
    Ok(GroundTruth { entries })
}
