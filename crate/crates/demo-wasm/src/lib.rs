//! Browser bindings for three pipeline operations: comparing two code
//! distributions, evaluating the retraining breaker over a ratio history,
//! and composing the bundled demo compliance adapters.
//!
//! Every binding takes plain strings and returns a JSON string; failures come
//! back as `{"error": "..."}` so the page can render both the same way.

use chrono::{DateTime, Utc};
use ontopipe::circuit_breaker::{self, InfluenceStats, PeriodRatio};
use ontopipe::compliance::{self, DataOperation, OpKind};
use ontopipe::{sentinel, PipelineConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

fn respond(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn numbers(field: &str, text: &str) -> Result<Vec<f64>, String> {
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("{field}: `{s}` is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(format!("{field}: no values"));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(format!("{field}: values must be non-negative"));
    }
    Ok(values)
}

fn normalise(field: &str, counts: &[f64]) -> Result<Vec<f64>, String> {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(format!("{field}: counts sum to zero"));
    }
    Ok(counts.iter().map(|c| c / total).collect())
}

/// Jensen-Shannon divergence (base 2) between two histograms given as
/// comma-separated counts over the same bins.
#[wasm_bindgen]
pub fn compare_distributions(baseline: &str, current: &str) -> String {
    respond((|| {
        let p = normalise("baseline", &numbers("baseline", baseline)?)?;
        let q = normalise("current", &numbers("current", current)?)?;
        if p.len() != q.len() {
            return Err(format!("baseline has {} bins, current has {}", p.len(), q.len()));
        }
        Ok(json!({ "divergence": sentinel::jsd(&p, &q), "baseline": p, "current": q }))
    })())
}

/// Breaker state for the last of `ratios` (comma-separated influence
/// ratios, oldest first) against `threshold`.
#[wasm_bindgen]
pub fn evaluate_breaker(ratios: &str, threshold: f64) -> String {
    respond((|| {
        let values = numbers("ratios", ratios)?;
        if values.iter().any(|r| *r > 1.0) {
            return Err("ratios must lie in [0, 1]".into());
        }
        let cfg = PipelineConfig {
            breaker_threshold: threshold,
            ..PipelineConfig::default()
        };
        cfg.validate().map_err(|e| e.to_string())?;
        let history: Vec<PeriodRatio> = values
            .iter()
            .enumerate()
            .map(|(i, r)| PeriodRatio {
                period: format!("P{:03}", i + 1),
                ratio: *r,
            })
            .collect();
        let last = history.last().expect("non-empty").clone();
        let stats = InfluenceStats {
            cohort_id: "demo".into(),
            period: last.period,
            ratio: last.ratio,
            tagged_count: 0,
            total_count: 0,
            history,
        };
        let state = circuit_breaker::evaluate(&stats, &cfg);
        Ok(json!({ "state": state.state, "reason": state.reason, "threshold": state.threshold_used }))
    })())
}

/// Composes the three demo adapters for an operation (`ingest`, `train`,
/// `deploy`, `export` or `predict`) with `key=value` context entries, one
/// per line or separated by commas.
#[wasm_bindgen]
pub fn check_compliance(op: &str, context: &str) -> String {
    respond((|| {
        let kind: OpKind = op.parse().map_err(|e: compliance::ComplianceError| e.to_string())?;
        let pairs = context.split(['\n', ',']).map(str::trim).filter(|s| !s.is_empty());
        let operation = DataOperation::new(kind, DateTime::<Utc>::UNIX_EPOCH)
            .with_pairs(pairs)
            .map_err(|e| e.to_string())?;
        let composed = compliance::compose(&compliance::demo_adapters(), &operation).map_err(|e| e.to_string())?;
        serde_json::to_value(&composed).map_err(|e| e.to_string())
    })())
}
