//! Semantic drift sentinel.
//!
//! A fingerprint summarises how a code is used inside one time window: which
//! co-codes come with it, which demographic strata carry it, how its
//! prevalence moves across sub-windows, and which institutions emit it.
//! Two fingerprints of the same code are compared with base-2
//! Jensen-Shannon divergence, and codes whose usage moved past the
//! configured threshold are raised as alerts with a probable cause.
//!
//! The reported confidence is the winning cause score over the sum of all
//! three scores. It orders alerts; it is not a probability.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dormancy::ActivationEvent;
use crate::model::{CodeDef, CodeSystem, CodedRecord, Layer, PipelineConfig, Stratum, Window};

#[derive(Debug, Error, PartialEq)]
pub enum SentinelError {
    #[error("cannot fingerprint an empty batch")]
    EmptyBatch,
    #[error("fingerprints describe different codes: `{0}` and `{1}`")]
    CodeMismatch(String, String),
    #[error("record {0} has no {1} layer code")]
    MissingLayer(String, Layer),
}

/// Co-occurrence bucket for records that carry no co-codes at all.
pub const NO_CO_CODE: &str = "(none)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticFingerprint {
    pub code: String,
    pub support: usize,
    pub cooccurrence_dist: BTreeMap<String, f64>,
    /// Indexed by [`Stratum::index`].
    pub demographic_dist: Vec<f64>,
    /// Per-sub-window prevalence, normalised to sum to one.
    pub temporal_profile: Vec<f64>,
    pub institutional_dist: BTreeMap<String, f64>,
    pub window: Window,
}

/// Base-2 Jensen-Shannon divergence of two distributions on the same
/// support, via the mean Kullback-Leibler divergence to their midpoint.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            d += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            d += 0.5 * b * (b / m).log2();
        }
    }
    d.clamp(0.0, 1.0)
}

/// [`jsd`] over keyed distributions; a key missing on one side has mass 0.
pub fn jsd_keyed(p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>) -> f64 {
    let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let a: Vec<f64> = keys.iter().map(|k| p.get(*k).copied().unwrap_or(0.0)).collect();
    let b: Vec<f64> = keys.iter().map(|k| q.get(*k).copied().unwrap_or(0.0)).collect();
    jsd(&a, &b)
}

/// JSD of each component, in the order co-occurrence, demographic,
/// temporal, institutional.
pub fn component_divergences(a: &SemanticFingerprint, b: &SemanticFingerprint) -> Result<[f64; 4], SentinelError> {
    if a.code != b.code {
        return Err(SentinelError::CodeMismatch(a.code.clone(), b.code.clone()));
    }
    let temporal = if a.temporal_profile.len() == b.temporal_profile.len() {
        jsd(&a.temporal_profile, &b.temporal_profile)
    } else {
        1.0
    };
    Ok([
        jsd_keyed(&a.cooccurrence_dist, &b.cooccurrence_dist),
        jsd(&a.demographic_dist, &b.demographic_dist),
        temporal,
        jsd_keyed(&a.institutional_dist, &b.institutional_dist),
    ])
}

/// Weighted mean of the component divergences.
pub fn compare(
    baseline: &SemanticFingerprint,
    current: &SemanticFingerprint,
    weights: [f64; 4],
) -> Result<f64, SentinelError> {
    let parts = component_divergences(baseline, current)?;
    let total: f64 = weights.iter().sum();
    Ok((parts.iter().zip(weights).map(|(d, w)| d * w).sum::<f64>() / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FingerprintSet {
    pub window: Window,
    pub fingerprints: BTreeMap<String, SemanticFingerprint>,
    /// Codes seen fewer than `min_support` times, with their counts.
    pub low_support: BTreeMap<String, usize>,
    /// Records outside the window, which are ignored.
    pub outside_window: usize,
}

impl FingerprintSet {
    fn support(&self, code: &str) -> usize {
        self.fingerprints
            .get(code)
            .map(|f| f.support)
            .or_else(|| self.low_support.get(code).copied())
            .unwrap_or(0)
    }
}

fn normalise(counts: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = counts.collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / v.len().max(1) as f64; v.len()]
    }
}

fn normalise_map(counts: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let total: f64 = counts.values().sum();
    counts.into_iter().map(|(k, v)| (k, v / total)).collect()
}

#[derive(Default)]
struct Tally {
    support: usize,
    co: BTreeMap<String, f64>,
    demo: Vec<f64>,
    bins: Vec<f64>,
    inst: BTreeMap<String, f64>,
}

/// Fingerprints every code of `layer` with at least `cfg.min_support`
/// records inside `window`.
pub fn build_fingerprints(
    batch: &[CodedRecord],
    window: Window,
    cfg: &PipelineConfig,
    layer: Layer,
) -> Result<FingerprintSet, SentinelError> {
    if batch.is_empty() {
        return Err(SentinelError::EmptyBatch);
    }
    let bins = cfg.temporal_bins.max(1);
    let span = (window.end - window.start).num_milliseconds().max(1) as f64;
    let bin_of = |r: &CodedRecord| {
        let offset = (r.encounter_time - window.start).num_milliseconds() as f64;
        ((offset / span * bins as f64) as usize).min(bins - 1)
    };
    let mut bin_totals = vec![0.0; bins];
    let mut tallies: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut outside = 0;
    for r in batch {
        if !window.contains(r.encounter_time) {
            outside += 1;
            continue;
        }
        let code = r
            .code(layer)
            .ok_or_else(|| SentinelError::MissingLayer(r.record_id.clone(), layer))?;
        let b = bin_of(r);
        bin_totals[b] += 1.0;
        let t = tallies.entry(code).or_insert_with(|| Tally {
            demo: vec![0.0; Stratum::COUNT],
            bins: vec![0.0; bins],
            ..Tally::default()
        });
        t.support += 1;
        if r.co_codes.is_empty() {
            *t.co.entry(NO_CO_CODE.to_string()).or_default() += 1.0;
        }
        for c in &r.co_codes {
            *t.co.entry(c.clone()).or_default() += 1.0;
        }
        t.demo[r.stratum().index()] += 1.0;
        t.bins[b] += 1.0;
        *t.inst.entry(r.institution_id.clone()).or_default() += 1.0;
    }
    if tallies.is_empty() {
        return Err(SentinelError::EmptyBatch);
    }
    let mut set = FingerprintSet {
        window,
        fingerprints: BTreeMap::new(),
        low_support: BTreeMap::new(),
        outside_window: outside,
    };
    for (code, t) in tallies {
        if t.support < cfg.min_support {
            set.low_support.insert(code.to_string(), t.support);
            continue;
        }
        let prevalence = t
            .bins
            .iter()
            .zip(&bin_totals)
            .map(|(c, n)| if *n > 0.0 { c / n } else { 0.0 });
        set.fingerprints.insert(
            code.to_string(),
            SemanticFingerprint {
                code: code.to_string(),
                support: t.support,
                cooccurrence_dist: normalise_map(t.co),
                demographic_dist: normalise(t.demo.into_iter()),
                temporal_profile: normalise(prevalence),
                institutional_dist: normalise_map(t.inst),
                window,
            },
        );
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftType {
    TypeA,
    TypeB,
    TypeC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvidence {
    /// Every code that alerted in the same scan.
    pub co_drifting: Vec<String>,
    pub billing_category: Option<String>,
    pub billing_overlap: f64,
    pub clinical_group: Option<String>,
    pub group_overlap: f64,
    /// Version whose release date falls near the current window and whose
    /// transition table changed this code.
    pub release_match: Option<ReleaseMatch>,
    /// Co-occurrence, demographic, temporal and institutional divergences.
    pub components: [f64; 4],
    pub baseline_support: usize,
    pub current_support: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseMatch {
    pub version: String,
    pub release_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAlert {
    pub code: String,
    pub divergence: f64,
    pub drift_type: DriftType,
    /// Ordinal, not a probability.
    pub confidence: f64,
    pub evidence: DriftEvidence,
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// The newest definition of `code` across all versions.
fn latest_def<'a>(system: &'a CodeSystem, code: &str) -> Option<(&'a str, &'a CodeDef)> {
    system
        .versions()
        .iter()
        .rev()
        .find_map(|v| system.code(&v.label, code).map(|d| (v.label.as_str(), d)))
}

fn release_match(system: &CodeSystem, code: &str, current: Window, days: u32) -> Option<ReleaseMatch> {
    let start = current.start.date_naive();
    system.versions().iter().find_map(|v| {
        let near = (start - v.release_date).num_days().abs() <= i64::from(days);
        let changed = system
            .transitions()
            .iter()
            .any(|t| t.to == v.label && t.changed_codes().contains(code));
        (near && changed).then(|| ReleaseMatch {
            version: v.label.clone(),
            release_date: v.release_date,
        })
    })
}

/// Compares two fingerprint sets and classifies every alert.
pub fn scan(
    baseline: &FingerprintSet,
    current: &FingerprintSet,
    system: &CodeSystem,
    cfg: &PipelineConfig,
) -> Vec<DriftAlert> {
    let mut raw: Vec<(String, f64, [f64; 4])> = Vec::new();
    let codes: BTreeSet<&String> = baseline
        .fingerprints
        .keys()
        .chain(current.fingerprints.keys())
        .collect();
    for code in codes {
        let parts = match (baseline.fingerprints.get(code), current.fingerprints.get(code)) {
            (Some(a), Some(b)) => component_divergences(a, b).expect("same code"),
            // Usage appearing from nothing, or vanishing entirely.
            (Some(_), None) if current.support(code) == 0 => [1.0; 4],
            (None, Some(_)) if baseline.support(code) == 0 => [1.0; 4],
            _ => continue,
        };
        let w = cfg.fingerprint_weights;
        let d = (parts.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / w.iter().sum::<f64>()).clamp(0.0, 1.0);
        if d >= cfg.drift_threshold {
            raw.push((code.clone(), d, parts));
        }
    }
    let drifting: BTreeSet<&str> = raw.iter().map(|(c, _, _)| c.as_str()).collect();
    let mut alerts: Vec<DriftAlert> = raw
        .iter()
        .map(|(code, d, parts)| {
            let def = latest_def(system, code);
            let (category, category_overlap) = match def {
                Some((v, def)) => {
                    let members: BTreeSet<&str> = system
                        .billing_category_members(v, &def.billing_category)
                        .into_iter()
                        .collect();
                    (Some(def.billing_category.clone()), jaccard(&drifting, &members))
                }
                None => (None, 0.0),
            };
            let (group, group_overlap) = match def {
                Some((v, def)) => {
                    let members: BTreeSet<&str> = system
                        .clinical_group_members(v, &def.clinical_group)
                        .into_iter()
                        .collect();
                    (Some(def.clinical_group.clone()), jaccard(&drifting, &members))
                }
                None => (None, 0.0),
            };
            let release = release_match(system, code, current.window, cfg.release_correlation_window_days);
            let c_score = if release.is_some() { 1.0 } else { 0.0 };
            let (drift_type, confidence) = classify(group_overlap, category_overlap, c_score);
            DriftAlert {
                code: code.clone(),
                divergence: *d,
                drift_type,
                confidence,
                evidence: DriftEvidence {
                    co_drifting: drifting.iter().map(|s| s.to_string()).collect(),
                    billing_category: category,
                    billing_overlap: category_overlap,
                    clinical_group: group,
                    group_overlap,
                    release_match: release,
                    components: *parts,
                    baseline_support: baseline.support(code),
                    current_support: current.support(code),
                },
            }
        })
        .collect();
    alerts.sort_by(|a, b| b.divergence.total_cmp(&a.divergence).then(a.code.cmp(&b.code)));
    alerts
}

/// Picks the highest of the three cause scores. Any tie at the top goes to
/// `TypeB`, which sends the alert to a coding-practice review.
pub fn classify(a: f64, b: f64, c: f64) -> (DriftType, f64) {
    let sum = a + b + c;
    let top = a.max(b).max(c);
    let winners = [a, b, c].iter().filter(|&&s| s == top).count();
    let kind = if winners > 1 || b == top {
        DriftType::TypeB
    } else if a == top {
        DriftType::TypeA
    } else {
        DriftType::TypeC
    };
    (kind, if sum > 0.0 { top / sum } else { 0.0 })
}

/// Fingerprints both batches over the configured windows (or the windows
/// covering each batch) and scans them.
pub fn scan_batches(
    baseline: &[CodedRecord],
    current: &[CodedRecord],
    system: &CodeSystem,
    cfg: &PipelineConfig,
    layer: Layer,
) -> Result<Vec<DriftAlert>, SentinelError> {
    let bw = cfg
        .baseline_window
        .or_else(|| Window::covering(baseline))
        .ok_or(SentinelError::EmptyBatch)?;
    let cw = cfg
        .current_window
        .or_else(|| Window::covering(current))
        .ok_or(SentinelError::EmptyBatch)?;
    let b = build_fingerprints(baseline, bw, cfg, layer)?;
    let c = build_fingerprints(current, cw, cfg, layer)?;
    Ok(scan(&b, &c, system, cfg))
}

/// Type A alerts become outbreak signals for the dormant store: one for
/// the alerting code and one for every member of its clinical group, so a
/// rare relative parked in the store hears about an outbreak it is too
/// sparse to show by itself.
pub fn outbreak_events(alerts: &[DriftAlert], system: &CodeSystem) -> Vec<ActivationEvent> {
    let mut codes = BTreeSet::new();
    for a in alerts.iter().filter(|a| a.drift_type == DriftType::TypeA) {
        codes.insert(a.code.clone());
        if let Some((v, def)) = latest_def(system, &a.code) {
            codes.extend(
                system
                    .clinical_group_members(v, &def.clinical_group)
                    .into_iter()
                    .map(String::from),
            );
        }
    }
    codes
        .into_iter()
        .map(|code| ActivationEvent::OutbreakSignal { code })
        .collect()
}
