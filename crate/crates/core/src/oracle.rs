//! Naive reference computations for checking the pipeline stages.
//!
//! Nothing here reuses a stage's internals. Divergences are computed from
//! the entropy identity rather than the KL form the sentinel uses, and gate
//! conservation is checked by re-reading the JSONL files the gate wrote
//! with an untyped JSON parser. [`run_named`] bundles the checks that the
//! `oracle run <name>` command exposes.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{NaiveDate, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bundled::syn_icd;
use crate::circuit_breaker::{self, BreakerStateKind, PeriodRatio, RetrainOutcome, ToyRiskModel};
use crate::compliance::{self, AdapterRuleSet, DataOperation, OpKind, Predicate, Rule, VerdictKind};
use crate::model::{CodeSystem, CodedRecord, Layer, PipelineConfig};
use crate::synthgen::{self, DistortionSpec, ExactCount, Outbreak};
use crate::{sentinel, version_gate};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("not a probability vector: {0}")]
    NotADistribution(String),
    #[error("unknown oracle `{0}`; known: {known}", known = NAMES.join(", "))]
    Unknown(String),
    #[error("oracle `{name}` could not run: {detail}")]
    Setup { name: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub oracle_name: String,
    pub expected: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    pub fn within(name: impl Into<String>, expected: f64, observed: f64, tolerance: f64) -> Self {
        Self {
            oracle_name: name.into(),
            expected,
            observed,
            tolerance,
            pass: (expected - observed).abs() <= tolerance,
        }
    }

    /// Discrete check: exact equality.
    pub fn exact(name: impl Into<String>, expected: f64, observed: f64) -> Self {
        Self {
            oracle_name: name.into(),
            expected,
            observed,
            tolerance: 0.0,
            pass: expected == observed,
        }
    }

    /// Pass/fail check reported as 1 for true.
    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::exact(name, 1.0, if ok { 1.0 } else { 0.0 })
    }

    /// Interval check: `expected` is the midpoint and `tolerance` the
    /// half-width.
    pub fn in_range(name: impl Into<String>, lo: f64, hi: f64, observed: f64) -> Self {
        let mut r = Self::within(name, (lo + hi) / 2.0, observed, (hi - lo) / 2.0);
        r.pass = (lo..=hi).contains(&observed);
        r
    }
}

fn check_distribution(p: &[f64]) -> Result<(), OracleError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(OracleError::NotADistribution(format!(
            "{p:?} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(OracleError::NotADistribution(format!("sums to {s}")));
    }
    Ok(())
}

fn entropy_bits(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.log2();
        }
    }
    h
}

/// Base-2 Jensen-Shannon divergence as `H(m) - (H(p) + H(q)) / 2`.
pub fn jsd_oracle(p: &[f64], q: &[f64]) -> Result<f64, OracleError> {
    if p.len() != q.len() {
        return Err(OracleError::NotADistribution(format!(
            "lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut m = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        m.push((p[i] + q[i]) / 2.0);
    }
    Ok(entropy_bits(&m) - (entropy_bits(p) + entropy_bits(q)) / 2.0)
}

fn record_id_of(line: &Value) -> Option<String> {
    line.get("record_id")
        .or_else(|| line.get("record").and_then(|r| r.get("record_id")))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn ids_in(path: &Path) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut ids = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).ok()?;
        ids.push(record_id_of(&v)?);
    }
    Some(ids)
}

/// Recounts the gate's files in `outcome_dir` (`accepted.jsonl`,
/// `reconciled.jsonl`, `quarantine.jsonl`) against the input file: every
/// input record id must appear exactly once across the three. A missing or
/// unreadable file fails the check.
pub fn partition_oracle(input: &Path, outcome_dir: &Path) -> bool {
    let Some(input_ids) = ids_in(input) else { return false };
    let mut want: BTreeMap<String, i64> = BTreeMap::new();
    for id in input_ids {
        *want.entry(id).or_insert(0) += 1;
    }
    for name in ["accepted.jsonl", "reconciled.jsonl", "quarantine.jsonl"] {
        let Some(ids) = ids_in(&outcome_dir.join(name)) else {
            return false;
        };
        for id in ids {
            *want.entry(id).or_insert(0) -= 1;
        }
    }
    want.values().all(|&n| n == 0)
}

/// Normal-approximation two-sided interval for a binomial count, widened
/// by one on each side for the continuity correction.
pub fn binomial_interval(n: usize, p: f64, z: f64) -> (f64, f64) {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    ((mean - z * sd - 1.0).max(0.0), mean + z * sd + 1.0)
}

/// z for a two-sided 99% interval.
pub const Z99: f64 = 2.5758;

/// Counts JSONL lines whose `primary_code` equals `code`.
pub fn count_code_in_file(path: &Path, code: &str) -> Option<usize> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut n = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).ok()?;
        if v.get("primary_code").and_then(Value::as_str) == Some(code) {
            n += 1;
        }
    }
    Some(n)
}

/// Share of JSONL records whose `influence_tag` is set.
pub fn influence_ratio_in_file(path: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(path).ok()?;
    let (mut total, mut tagged) = (0usize, 0usize);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).ok()?;
        total += 1;
        if v.get("influence_tag").is_some_and(|t| !t.is_null()) {
            tagged += 1;
        }
    }
    (total > 0).then(|| tagged as f64 / total as f64)
}

/// Combined class for a list of per-adapter classes, read off a lookup
/// table: 0 Permit, 1 PermitWithConditions, 2 Deny.
pub fn restrictive_class(classes: &[u8]) -> u8 {
    let mut seen = [false; 3];
    for &c in classes {
        seen[usize::from(c.min(2))] = true;
    }
    match seen {
        [_, _, true] => 2,
        [_, true, false] => 1,
        _ => 0,
    }
}

/// The breaker rule restated: open exactly when ratio is above threshold.
pub fn breaker_opens(ratio: f64, threshold: f64) -> bool {
    ratio > threshold
}

/// A single-rule adapter that always returns the verdict class `class`.
pub fn constant_adapter(id: &str, class: u8) -> AdapterRuleSet {
    let verdict = match class {
        0 => VerdictKind::Permit,
        1 => VerdictKind::PermitWithConditions,
        _ => VerdictKind::Deny,
    };
    AdapterRuleSet {
        adapter_id: id.to_string(),
        regulation_id: format!("{id} regulation"),
        jurisdiction: "TEST".into(),
        regulation_version: "1".into(),
        demo: true,
        context_defaults: BTreeMap::new(),
        rules: vec![Rule {
            when: Predicate::Always,
            verdict,
            conditions: if class == 1 {
                vec![format!("condition from {id}")]
            } else {
                Vec::new()
            },
            reason: if class == 2 {
                format!("denied by {id}")
            } else {
                String::new()
            },
            provision: format!("{id} sole provision"),
        }],
    }
}

/// A randomized gate input: a small synthetic batch with some records
/// lagged to the older release, some unmappable, some with unknown codes
/// and some with an unknown version tag.
pub fn randomized_gate_batch(system: &CodeSystem, seed: u64) -> Vec<CodedRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(0..120);
    let mut spec = DistortionSpec::clean(3, "2025", NaiveDate::from_ymd_opt(2025, 1, 1).expect("date"));
    spec.version_mix.insert("P02".into(), "2024".into());
    let (mut batch, _) = synthgen::generate_batch(system, &spec, n, seed).expect("clean spec");
    for r in batch.iter_mut() {
        match rng.gen_range(0..10) {
            0 => r.primary_code = "X-NOT-A-CODE".into(),
            1 => r.version_tag = "2019".into(),
            2 => {
                r.version_tag = "2024".into();
                r.primary_code = "S-R73".into();
            }
            _ => {}
        }
    }
    batch.shuffle(&mut rng);
    batch
}

pub const NAMES: [&str; 7] = [
    "jsd",
    "partition",
    "breaker-boundary",
    "compliance-lattice",
    "e13-binomial",
    "outbreak-ratio",
    "reference-prevalence",
];

fn setup(name: &str, e: impl std::fmt::Display) -> OracleError {
    OracleError::Setup {
        name: name.to_string(),
        detail: e.to_string(),
    }
}

/// Runs the named oracle at `seed`. `scratch` is a directory the oracle
/// may write into.
pub fn run_named(name: &str, seed: u64, scratch: &Path) -> Result<Vec<OracleResult>, OracleError> {
    match name {
        "jsd" => Ok(jsd_suite(seed, 1000)),
        "partition" => partition_suite(seed, 200, scratch),
        "breaker-boundary" => Ok(breaker_suite(seed, 1000)),
        "compliance-lattice" => Ok(compliance_suite()),
        "e13-binomial" => e13_suite(seed, scratch),
        "outbreak-ratio" => outbreak_suite(seed),
        "reference-prevalence" => reference_suite(seed),
        other => Err(OracleError::Unknown(other.to_string())),
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Closed-form cases plus `pairs` random pairs checked against the
/// sentinel's divergence: agreement within 1e-9, bounds, symmetry and zero
/// on identical inputs.
pub fn jsd_suite(seed: u64, pairs: usize) -> Vec<OracleResult> {
    let mut out = vec![
        OracleResult::within(
            "jsd disjoint points = 1",
            1.0,
            sentinel::jsd(&[1.0, 0.0], &[0.0, 1.0]),
            1e-12,
        ),
        OracleResult::within("jsd equal = 0", 0.0, sentinel::jsd(&[0.5, 0.5], &[0.5, 0.5]), 1e-12),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut bounded, mut symmetric, mut zero_iff_equal) = (0.0f64, true, true, true);
    for _ in 0..pairs {
        let k = rng.gen_range(1..12);
        let p = random_distribution(&mut rng, k);
        let q = if rng.gen_bool(0.1) {
            p.clone()
        } else {
            random_distribution(&mut rng, k)
        };
        let oracle = jsd_oracle(&p, &q).expect("normalized");
        let d = sentinel::jsd(&p, &q);
        worst = worst.max((d - oracle).abs());
        bounded &= (0.0..=1.0).contains(&d);
        symmetric &= (d - sentinel::jsd(&q, &p)).abs() <= 1e-12;
        let equal = p == q;
        zero_iff_equal &= if equal { d == 0.0 } else { d > 0.0 };
    }
    out.push(OracleResult::within("jsd max |sentinel - oracle|", 0.0, worst, 1e-9));
    out.push(OracleResult::holds("jsd bounded in [0,1]", bounded));
    out.push(OracleResult::holds("jsd symmetric", symmetric));
    out.push(OracleResult::holds("jsd zero iff equal", zero_iff_equal));
    out
}

/// Gates `batches` randomized batches and recounts each from its files.
pub fn partition_suite(seed: u64, batches: usize, scratch: &Path) -> Result<Vec<OracleResult>, OracleError> {
    let system = syn_icd();
    let cfg = PipelineConfig {
        acknowledged_unmapped_codes: vec!["S-R73".into()],
        ..PipelineConfig::default()
    };
    let mut failures = 0;
    let mut quarantined = 0;
    for b in 0..batches {
        let batch = randomized_gate_batch(&system, synthgen::derive_seed(seed, b as u64));
        let dir = scratch.join(format!("partition-{b:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| setup("partition", e))?;
        let input = dir.join("input.jsonl");
        crate::model::write_jsonl(&input, &batch).map_err(|e| setup("partition", e))?;
        let outcome = version_gate::gate_batch(&batch, &system, "2025", &cfg).map_err(|e| setup("partition", e))?;
        outcome.write_all(&dir).map_err(|e| setup("partition", e))?;
        quarantined += outcome.quarantined.len();
        if !partition_oracle(&input, &dir) {
            failures += 1;
        }
    }
    Ok(vec![
        OracleResult::exact("partition failures", 0.0, failures as f64),
        OracleResult::holds("partition exercised quarantine", quarantined > 0),
    ])
}

/// Boundary cases at the default threshold plus `states` random states
/// checking that an open breaker never retrains.
pub fn breaker_suite(seed: u64, states: usize) -> Vec<OracleResult> {
    let cfg = PipelineConfig::default();
    let at = |ratio: f64| {
        let stats = circuit_breaker::InfluenceStats {
            cohort_id: "c".into(),
            period: "p".into(),
            ratio,
            tagged_count: 0,
            total_count: 0,
            history: vec![PeriodRatio {
                period: "p".into(),
                ratio,
            }],
        };
        circuit_breaker::evaluate(&stats, &cfg).state
    };
    let mut out = vec![
        OracleResult::holds("ratio 0.15 not open", at(0.15) != BreakerStateKind::Open),
        OracleResult::holds("ratio 0.150001 open", at(0.150001) == BreakerStateKind::Open),
    ];
    let cohort: Vec<CodedRecord> = {
        let spec = DistortionSpec::clean(2, "2025", NaiveDate::from_ymd_opt(2025, 1, 1).expect("date"));
        synthgen::generate_batch(&syn_icd(), &spec, 200, seed).expect("clean").0
    };
    let model = ToyRiskModel::untrained(["S-E11.65".to_string()].into_iter().collect());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut agree, mut sound) = (true, true);
    for i in 0..states {
        let ratio = if rng.gen_bool(0.2) {
            cfg.breaker_threshold
        } else {
            rng.gen::<f64>() * 0.3
        };
        let history: Vec<PeriodRatio> = (0..rng.gen_range(0..4))
            .map(|h| PeriodRatio {
                period: format!("h{h}"),
                ratio: rng.gen::<f64>() * 0.3,
            })
            .chain(std::iter::once(PeriodRatio {
                period: "z".into(),
                ratio,
            }))
            .collect();
        let stats = circuit_breaker::InfluenceStats {
            cohort_id: format!("c{i}"),
            period: "z".into(),
            ratio,
            tagged_count: 0,
            total_count: cohort.len(),
            history,
        };
        let state = circuit_breaker::evaluate(&stats, &cfg);
        agree &= (state.state == BreakerStateKind::Open) == breaker_opens(ratio, cfg.breaker_threshold);
        if state.state == BreakerStateKind::Open {
            match circuit_breaker::retrain_gate(&state, &stats, &cohort, &model, None, Layer::Administrative) {
                Ok(RetrainOutcome::Refused(r)) => sound &= r.model_version == model.model_version,
                _ => sound = false,
            }
        }
    }
    out.push(OracleResult::holds("breaker open iff ratio > threshold", agree));
    out.push(OracleResult::holds("no retraining while open", sound));
    out
}

/// All 27 verdict-class combinations of three adapters.
pub fn compliance_suite() -> Vec<OracleResult> {
    let op = DataOperation::new(
        OpKind::Deploy,
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).single().expect("time"),
    );
    let (mut class_ok, mut audit_ok) = (0usize, 0usize);
    for a in 0..3u8 {
        for b in 0..3u8 {
            for c in 0..3u8 {
                let adapters = [
                    constant_adapter("a", a),
                    constant_adapter("b", b),
                    constant_adapter("c", c),
                ];
                let comp = compliance::compose(&adapters, &op).expect("three adapters");
                if comp.verdict.restrictiveness() == restrictive_class(&[a, b, c]) {
                    class_ok += 1;
                }
                if comp.audit.len() == adapters.len() {
                    audit_ok += 1;
                }
            }
        }
    }
    vec![
        OracleResult::exact("most restrictive composition (27 cases)", 27.0, class_ok as f64),
        OracleResult::exact("one audit entry per adapter (27 cases)", 27.0, audit_ok as f64),
    ]
}

fn walkthrough_like_spec() -> DistortionSpec {
    let mut spec = DistortionSpec::clean(8, "2025", NaiveDate::from_ymd_opt(2025, 4, 1).expect("date"));
    spec.exact_code_counts.clear();
    spec
}

/// Unpinned E13 count at n = 50,000, recounted from the written file,
/// against a 99% binomial interval around the code's base rate.
pub fn e13_suite(seed: u64, scratch: &Path) -> Result<Vec<OracleResult>, OracleError> {
    let system = syn_icd();
    let n = 50_000;
    let spec = walkthrough_like_spec();
    let (batch, _) = synthgen::generate_batch(&system, &spec, n, seed).map_err(|e| setup("e13-binomial", e))?;
    let path = scratch.join("e13-batch.jsonl");
    crate::model::write_jsonl(&path, &batch).map_err(|e| setup("e13-binomial", e))?;
    let observed = count_code_in_file(&path, "S-E13").ok_or_else(|| setup("e13-binomial", "unreadable batch"))?;
    let rate = marginal_rate(&system, "S-E13").ok_or_else(|| setup("e13-binomial", "S-E13 has no profile"))?;
    let (lo, hi) = binomial_interval(n, rate, Z99);
    let mut out = vec![OracleResult::in_range(
        "E13 count in 99% binomial interval",
        lo,
        hi,
        observed as f64,
    )];
    let mut pinned = spec.clone();
    pinned.exact_code_counts.push(ExactCount {
        code: "S-E13".into(),
        count: 47,
    });
    let (batch, _) = synthgen::generate_batch(&system, &pinned, n, seed).map_err(|e| setup("e13-binomial", e))?;
    let pinned_count = batch.iter().filter(|r| r.primary_code == "S-E13").count();
    out.push(OracleResult::exact("E13 pinned count", 47.0, pinned_count as f64));
    Ok(out)
}

/// Marginal rate of `code` from the raw profile JSON, read with an untyped
/// parser: the sum over age-by-sex cells of the cell's population share
/// times the code's share of that cell's total weight.
pub fn marginal_rate(system: &CodeSystem, code: &str) -> Option<f64> {
    let raw: Value = serde_json::from_str(&system.to_json()).ok()?;
    let profiles = raw.get("profiles")?;
    let floats = |v: Option<&Value>| -> Vec<f64> {
        v.and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default()
    };
    let ages = floats(profiles.get("population").and_then(|p| p.get("age_bands")));
    let sexes = floats(profiles.get("population").and_then(|p| p.get("sex")));
    let (age_total, sex_total): (f64, f64) = (ages.iter().sum(), sexes.iter().sum());
    let codes = profiles.get("codes")?.as_array()?;
    let mut found = false;
    let mut rate = 0.0;
    for (a, age_share) in ages.iter().enumerate() {
        for (s, sex_share) in sexes.iter().enumerate() {
            let mut own = 0.0;
            let mut total = 0.0;
            for p in codes {
                let base = p.get("base_rate").and_then(Value::as_f64).unwrap_or(0.0);
                let am = floats(p.get("age_multipliers"));
                let sm = floats(p.get("sex_multipliers"));
                let w = base * am.get(a).copied().unwrap_or(0.0) * sm.get(s).copied().unwrap_or(0.0);
                total += w;
                if p.get("code").and_then(Value::as_str) == Some(code) {
                    own = w;
                    found = true;
                }
            }
            if total > 0.0 {
                rate += age_share / age_total * sex_share / sex_total * own / total;
            }
        }
    }
    found.then_some(rate)
}

/// Outbreak at 3x on one code from the start of the second quarter: the
/// recounted prevalence ratio q2/q1 lands in [2.5, 3.5].
pub fn outbreak_suite(seed: u64) -> Result<Vec<OracleResult>, OracleError> {
    let system = syn_icd();
    let mut spec = DistortionSpec::clean(4, "2025", NaiveDate::from_ymd_opt(2025, 1, 1).expect("date"));
    spec.outbreak = Some(Outbreak {
        code: "S-J10".into(),
        start_time: synthgen::quarter_window(spec.start_date, 1).start,
        prevalence_multiplier: 3.0,
        group_spillover: 0.0,
    });
    let series =
        synthgen::generate_quarter_series(&system, &spec, 2, 50_000, seed).map_err(|e| setup("outbreak-ratio", e))?;
    let prevalence = |recs: &[CodedRecord]| {
        let hits = recs.iter().filter(|r| r.primary_code == "S-J10").count();
        hits as f64 / recs.len() as f64
    };
    let ratio = prevalence(&series[1].records) / prevalence(&series[0].records);
    Ok(vec![OracleResult::in_range(
        "outbreak prevalence ratio q2/q1",
        2.5,
        3.5,
        ratio,
    )])
}

/// Reference-model overall prevalences against the profile marginals at
/// n = 50,000, within 0.02.
pub fn reference_suite(seed: u64) -> Result<Vec<OracleResult>, OracleError> {
    let system = syn_icd();
    let spec = DistortionSpec::clean(4, "2025", NaiveDate::from_ymd_opt(2025, 1, 1).expect("date"));
    let (batch, _) =
        synthgen::generate_batch(&system, &spec, 50_000, seed).map_err(|e| setup("reference-prevalence", e))?;
    let model = crate::checkpoint::build_reference_model(&batch, &system, "2025", Layer::Administrative)
        .map_err(|e| setup("reference-prevalence", e))?;
    let mut worst = 0.0f64;
    for code in system.codes("2025").into_iter().flat_map(|m| m.keys()) {
        if let Some(rate) = marginal_rate(&system, code.as_str()) {
            worst = worst.max((model.overall_prevalence(code.as_str()) - rate).abs());
        }
    }
    Ok(vec![OracleResult::within(
        "max |model prevalence - profile rate|",
        0.0,
        worst,
        0.02,
    )])
}
