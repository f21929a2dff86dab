//! Dormant feature store.
//!
//! Codes too rare for primary training are either pruned or, when listed as
//! clinically significant, parked with a compact summary and the conditions
//! under which they should come back.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodedRecord, Layer, PipelineConfig};

#[derive(Debug, Error)]
pub enum DormancyError {
    #[error("cannot classify an empty batch")]
    EmptyBatch,
    #[error("dormant code `{0}` has no activation condition configured")]
    NoCondition(String),
    #[error("invalid activation condition for `{0}`: {1}")]
    InvalidCondition(String, String),
    #[error("record {0} has no {1} layer code")]
    MissingLayer(String, Layer),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("prune log: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureClass {
    Active,
    Dormant,
    Pruned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortWindow {
    Quarterly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ActivationCondition {
    PrevalenceExceeds { threshold: f64, window: CohortWindow },
    DomainTransferRequest { domain: String },
    OutbreakSignal { code: String },
}

impl ActivationCondition {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::PrevalenceExceeds { threshold, .. } if !(*threshold > 0.0 && *threshold < 1.0) => {
                Err(format!("threshold {threshold} outside (0, 1)"))
            }
            Self::DomainTransferRequest { domain } if domain.is_empty() => Err("empty domain".into()),
            Self::OutbreakSignal { code } if code.is_empty() => Err("empty code".into()),
            _ => Ok(()),
        }
    }
}

/// External triggers checked against stored conditions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ActivationEvent {
    DomainTransferRequest { domain: String },
    OutbreakSignal { code: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub count: usize,
    pub frequency: f64,
    /// Most frequent companion codes with their counts, at most five.
    pub top_cooccurring: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DormantEntry {
    pub code: String,
    pub representation: FeatureSummary,
    pub significance_note: String,
    pub activation_conditions: Vec<ActivationCondition>,
    pub last_observed: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEntry {
    pub code: String,
    pub count: usize,
    pub last_observed: DateTime<Utc>,
}

/// Codes the operator considers clinically significant, with a note each.
pub type SignificanceList = BTreeMap<String, String>;

fn codes_of(record: &CodedRecord, layer: Layer) -> Result<BTreeSet<&str>, DormancyError> {
    let main = record
        .code(layer)
        .ok_or_else(|| DormancyError::MissingLayer(record.record_id.clone(), layer))?;
    Ok(std::iter::once(main)
        .chain(record.co_codes.iter().map(String::as_str))
        .collect())
}

/// Number of records mentioning each code, as main code or co-code.
pub fn code_counts(batch: &[CodedRecord], layer: Layer) -> Result<BTreeMap<String, usize>, DormancyError> {
    let mut counts = BTreeMap::new();
    for r in batch {
        for c in codes_of(r, layer)? {
            *counts.entry(c.to_string()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Classifies every code mentioned in `batch` by the share of records it
/// appears in.
pub fn classify_features(
    batch: &[CodedRecord],
    significance: &SignificanceList,
    cfg: &PipelineConfig,
    layer: Layer,
) -> Result<BTreeMap<String, FeatureClass>, DormancyError> {
    if batch.is_empty() {
        return Err(DormancyError::EmptyBatch);
    }
    let n = batch.len() as f64;
    Ok(code_counts(batch, layer)?
        .into_iter()
        .map(|(code, count)| {
            let class = if count as f64 / n >= cfg.dormancy_frequency_threshold {
                FeatureClass::Active
            } else if significance.contains_key(&code) {
                FeatureClass::Dormant
            } else {
                FeatureClass::Pruned
            };
            (code, class)
        })
        .collect())
}

/// Dormant entries and the prune log, keyed by code. Writes replace the
/// entry for a code, so storing the same batch twice is a no-op.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DormantStore {
    entries: BTreeMap<String, DormantEntry>,
    pruned: BTreeMap<String, PruneEntry>,
}

impl DormantStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DormantEntry> {
        self.entries.values()
    }

    pub fn entry(&self, code: &str) -> Option<&DormantEntry> {
        self.entries.get(code)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prune_log(&self) -> impl Iterator<Item = &PruneEntry> {
        self.pruned.values()
    }

    pub fn save(&self, path: &Path) -> Result<(), DormancyError> {
        let entries: Vec<&DormantEntry> = self.entries.values().collect();
        let mut text = serde_json::to_string_pretty(&entries)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DormancyError> {
        let entries: Vec<DormantEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Self {
            entries: entries.into_iter().map(|e| (e.code.clone(), e)).collect(),
            pruned: BTreeMap::new(),
        })
    }

    pub fn prune_log_csv(&self) -> Result<String, DormancyError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["code", "count", "last_observed"])?;
        for p in self.pruned.values() {
            w.write_record([p.code.clone(), p.count.to_string(), p.last_observed.to_rfc3339()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }
}

/// Writes one entry per dormant code and logs every pruned code.
pub fn store_dormant(
    store: &mut DormantStore,
    classification: &BTreeMap<String, FeatureClass>,
    batch: &[CodedRecord],
    conditions_by_code: &BTreeMap<String, Vec<ActivationCondition>>,
    significance: &SignificanceList,
    layer: Layer,
) -> Result<(), DormancyError> {
    for (code, class) in classification {
        if *class == FeatureClass::Dormant {
            let conds = conditions_by_code
                .get(code)
                .filter(|c| !c.is_empty())
                .ok_or_else(|| DormancyError::NoCondition(code.clone()))?;
            for c in conds {
                c.validate()
                    .map_err(|m| DormancyError::InvalidCondition(code.clone(), m))?;
            }
        }
    }
    let n = batch.len().max(1) as f64;
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    let mut last: BTreeMap<&str, DateTime<Utc>> = BTreeMap::new();
    let mut companions: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in batch {
        let codes = codes_of(r, layer)?;
        for &c in &codes {
            if !matches!(
                classification.get(c),
                Some(FeatureClass::Dormant | FeatureClass::Pruned)
            ) {
                continue;
            }
            *count.entry(c).or_default() += 1;
            let t = last.entry(c).or_insert(r.encounter_time);
            *t = (*t).max(r.encounter_time);
            let comp = companions.entry(c).or_default();
            for &other in codes.iter().filter(|&&o| o != c) {
                *comp.entry(other).or_default() += 1;
            }
        }
    }
    for (code, class) in classification {
        let (Some(&k), Some(&seen)) = (count.get(code.as_str()), last.get(code.as_str())) else {
            continue;
        };
        match class {
            FeatureClass::Dormant => {
                let mut top: Vec<(String, usize)> = companions
                    .get(code.as_str())
                    .map(|m| m.iter().map(|(c, n)| (c.to_string(), *n)).collect())
                    .unwrap_or_default();
                top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                top.truncate(5);
                let last_observed = store.entries.get(code).map_or(seen, |e| e.last_observed.max(seen));
                store.entries.insert(
                    code.clone(),
                    DormantEntry {
                        code: code.clone(),
                        representation: FeatureSummary {
                            count: k,
                            frequency: k as f64 / n,
                            top_cooccurring: top,
                        },
                        significance_note: significance.get(code).cloned().unwrap_or_default(),
                        activation_conditions: conditions_by_code[code].clone(),
                        last_observed,
                    },
                );
            }
            FeatureClass::Pruned => {
                let last_observed = store.pruned.get(code).map_or(seen, |e| e.last_observed.max(seen));
                store.pruned.insert(
                    code.clone(),
                    PruneEntry {
                        code: code.clone(),
                        count: k,
                        last_observed,
                    },
                );
            }
            FeatureClass::Active => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub code: String,
    pub condition: ActivationCondition,
}

/// Every (code, condition) pair that holds for this quarter's batch or
/// the supplied events.
pub fn check_activation(
    store: &DormantStore,
    quarterly_batch: &[CodedRecord],
    events: &[ActivationEvent],
    layer: Layer,
) -> Result<Vec<Activation>, DormancyError> {
    let counts = code_counts(quarterly_batch, layer)?;
    let n = quarterly_batch.len();
    let mut out = Vec::new();
    for entry in store.entries() {
        let prevalence = if n == 0 {
            0.0
        } else {
            counts.get(&entry.code).copied().unwrap_or(0) as f64 / n as f64
        };
        for cond in &entry.activation_conditions {
            let fired = match cond {
                ActivationCondition::PrevalenceExceeds { threshold, .. } => prevalence > *threshold,
                ActivationCondition::DomainTransferRequest { domain } => events
                    .iter()
                    .any(|e| matches!(e, ActivationEvent::DomainTransferRequest { domain: d } if d == domain)),
                ActivationCondition::OutbreakSignal { code } => events
                    .iter()
                    .any(|e| matches!(e, ActivationEvent::OutbreakSignal { code: c } if c == code)),
            };
            if fired {
                out.push(Activation {
                    code: entry.code.clone(),
                    condition: cond.clone(),
                });
            }
        }
    }
    Ok(out)
}
