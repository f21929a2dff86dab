//! Shared domain types: the versioned code system, coded encounter records,
//! and the pipeline configuration every stage reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config key `{key}` out of range: {detail}")]
    OutOfRange { key: &'static str, detail: String },
    #[error("weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("invalid code system: {0}")]
    CodeSystem(String),
    #[error("invalid record {record_id}: {detail}")]
    Record { record_id: String, detail: String },
}

pub(crate) fn read_file(path: &Path) -> Result<String, ModelError> {
    std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Demographics
// ---------------------------------------------------------------------------

/// Decade age bands. The last band is open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "0-9")]
    A0to9,
    #[serde(rename = "10-19")]
    A10to19,
    #[serde(rename = "20-29")]
    A20to29,
    #[serde(rename = "30-39")]
    A30to39,
    #[serde(rename = "40-49")]
    A40to49,
    #[serde(rename = "50-59")]
    A50to59,
    #[serde(rename = "60-69")]
    A60to69,
    #[serde(rename = "70-79")]
    A70to79,
    #[serde(rename = "80+")]
    A80Plus,
}

impl AgeBand {
    pub const ALL: [AgeBand; 9] = [
        AgeBand::A0to9,
        AgeBand::A10to19,
        AgeBand::A20to29,
        AgeBand::A30to39,
        AgeBand::A40to49,
        AgeBand::A50to59,
        AgeBand::A60to69,
        AgeBand::A70to79,
        AgeBand::A80Plus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
    Other,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::Female, Sex::Male, Sex::Other];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The demographic profile used for expected-prevalence lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub age_band: AgeBand,
    pub sex: Sex,
}

impl Stratum {
    pub const COUNT: usize = 27;

    pub fn new(age_band: AgeBand, sex: Sex) -> Self {
        Self { age_band, sex }
    }

    /// Dense index in `0..27`, age-major.
    pub fn index(self) -> usize {
        self.age_band.index() * 3 + self.sex.index()
    }

    pub fn all() -> impl Iterator<Item = Stratum> {
        AgeBand::ALL
            .into_iter()
            .flat_map(|a| Sex::ALL.into_iter().map(move |s| Stratum::new(a, s)))
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Which code layer an analytical operation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    Administrative,
    Clinical,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Administrative => f.write_str("Administrative"),
            Layer::Clinical => f.write_str("Clinical"),
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "administrative" | "admin" => Ok(Layer::Administrative),
            "clinical" => Ok(Layer::Clinical),
            other => Err(format!("unknown layer `{other}`")),
        }
    }
}

// ---------------------------------------------------------------------------
// Code system
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDef {
    pub code: String,
    pub clinical_group: String,
    pub billing_category: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminologyVersion {
    #[serde(skip)]
    pub system_id: String,
    pub label: String,
    pub release_date: NaiveDate,
    pub validated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMapping {
    pub from_code: String,
    pub to_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub from: String,
    pub to: String,
    pub mappings: Vec<CodeMapping>,
    #[serde(default)]
    pub unmappable: Vec<String>,
}

/// Result of looking a code up in a transition table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mapped<'a> {
    Code(&'a str),
    /// Listed unmappable, absent, or mapped to several targets.
    Unmappable,
}

impl TransitionTable {
    pub fn map(&self, code: &str) -> Mapped<'_> {
        if self.unmappable.iter().any(|c| c == code) {
            return Mapped::Unmappable;
        }
        let mut targets = self.mappings.iter().filter(|m| m.from_code == code);
        match (targets.next(), targets.next()) {
            (Some(m), None) => Mapped::Code(&m.to_code),
            _ => Mapped::Unmappable,
        }
    }

    /// Codes on either side of a mapping whose identifier changes, plus the
    /// unmappable set.
    pub fn changed_codes(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self
            .mappings
            .iter()
            .filter(|m| m.from_code != m.to_code)
            .flat_map(|m| [m.from_code.clone(), m.to_code.clone()])
            .collect();
        out.extend(self.unmappable.iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Taxonomies {
    pub clinical_groups: Vec<String>,
    pub billing_categories: Vec<String>,
}

/// Co-code inclusion probability for a clinical profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoCodeRate {
    pub code: String,
    pub p: f64,
}

/// Generator-side base prevalence for one diagnosis: a base rate scaled by
/// per-age-band and per-sex multipliers, plus independent co-code rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeProfile {
    pub code: String,
    pub base_rate: f64,
    pub age_multipliers: [f64; 9],
    pub sex_multipliers: [f64; 3],
    #[serde(default)]
    pub co_codes: Vec<CoCodeRate>,
}

impl CodeProfile {
    pub fn weight(&self, stratum: Stratum) -> f64 {
        self.base_rate * self.age_multipliers[stratum.age_band.index()] * self.sex_multipliers[stratum.sex.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub age_bands: [f64; 9],
    pub sex: [f64; 3],
}

/// Clinical reference profiles declared alongside the code system; the
/// generator samples from them and tests compare against them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalProfiles {
    /// Version whose codes the profiles are written in.
    pub version: String,
    pub population: Population,
    pub codes: Vec<CodeProfile>,
}

impl ClinicalProfiles {
    pub fn profile(&self, code: &str) -> Option<&CodeProfile> {
        self.codes.iter().find(|p| p.code == code)
    }

    pub fn stratum_weight(&self, stratum: Stratum) -> f64 {
        let a: f64 = self.population.age_bands.iter().sum();
        let s: f64 = self.population.sex.iter().sum();
        self.population.age_bands[stratum.age_band.index()] / a * self.population.sex[stratum.sex.index()] / s
    }

    /// P(code | stratum) under the declared profiles.
    pub fn conditional_prevalence(&self, code: &str, stratum: Stratum) -> f64 {
        let total: f64 = self.codes.iter().map(|p| p.weight(stratum)).sum();
        match self.profile(code) {
            Some(p) if total > 0.0 => p.weight(stratum) / total,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodeSystemFile {
    system_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taxonomies: Option<Taxonomies>,
    versions: Vec<TerminologyVersion>,
    codes: BTreeMap<String, Vec<CodeDef>>,
    #[serde(default)]
    transitions: Vec<TransitionTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profiles: Option<ClinicalProfiles>,
}

/// A versioned terminology with its transition tables. Immutable once
/// loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSystem {
    system_id: String,
    taxonomies: Option<Taxonomies>,
    versions: Vec<TerminologyVersion>,
    codes_by_version: BTreeMap<String, BTreeMap<String, CodeDef>>,
    transitions: Vec<TransitionTable>,
    profiles: Option<ClinicalProfiles>,
}

impl CodeSystem {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: CodeSystemFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    fn from_file(file: CodeSystemFile) -> Result<Self, ModelError> {
        let err = |m: String| Err(ModelError::CodeSystem(m));
        if file.system_id.trim().is_empty() {
            return err("empty system_id".into());
        }
        let mut labels = BTreeSet::new();
        for v in &file.versions {
            if !labels.insert(v.label.clone()) {
                return err(format!("duplicate version label `{}`", v.label));
            }
        }
        for pair in file.versions.windows(2) {
            if pair[0].release_date >= pair[1].release_date {
                return err(format!(
                    "versions not strictly ordered by release date: `{}` then `{}`",
                    pair[0].label, pair[1].label
                ));
            }
        }
        let mut codes_by_version = BTreeMap::new();
        for (label, defs) in &file.codes {
            if !labels.contains(label) {
                return err(format!("codes listed for undeclared version `{label}`"));
            }
            let mut set = BTreeMap::new();
            for d in defs {
                if d.code.is_empty() || d.clinical_group.is_empty() || d.billing_category.is_empty() {
                    return err(format!("code entry `{}` has empty fields", d.code));
                }
                if let Some(tax) = &file.taxonomies {
                    if !tax.clinical_groups.contains(&d.clinical_group) {
                        return err(format!(
                            "code `{}` uses undeclared clinical group `{}`",
                            d.code, d.clinical_group
                        ));
                    }
                    if !tax.billing_categories.contains(&d.billing_category) {
                        return err(format!(
                            "code `{}` uses undeclared billing category `{}`",
                            d.code, d.billing_category
                        ));
                    }
                }
                if set.insert(d.code.clone(), d.clone()).is_some() {
                    return err(format!("duplicate code `{}` in version `{label}`", d.code));
                }
            }
            codes_by_version.insert(label.clone(), set);
        }
        for label in &labels {
            codes_by_version.entry(label.clone()).or_default();
        }
        for t in &file.transitions {
            let (Some(from), Some(to)) = (codes_by_version.get(&t.from), codes_by_version.get(&t.to)) else {
                return err(format!("transition `{}`->`{}` names an unknown version", t.from, t.to));
            };
            for m in &t.mappings {
                if !from.contains_key(&m.from_code) {
                    return err(format!(
                        "transition `{}`->`{}` maps unknown code `{}` (absent from `{}`)",
                        t.from, t.to, m.from_code, t.from
                    ));
                }
                if !to.contains_key(&m.to_code) {
                    return err(format!(
                        "transition `{}`->`{}` maps to unknown code `{}` (absent from `{}`)",
                        t.from, t.to, m.to_code, t.to
                    ));
                }
            }
            for c in &t.unmappable {
                if !from.contains_key(c) {
                    return err(format!(
                        "transition `{}`->`{}` lists unknown unmappable code `{c}`",
                        t.from, t.to
                    ));
                }
            }
        }
        if let Some(p) = &file.profiles {
            let Some(set) = codes_by_version.get(&p.version) else {
                return err(format!("profiles reference unknown version `{}`", p.version));
            };
            for cp in &p.codes {
                if !set.contains_key(&cp.code) {
                    return err(format!("profile for unknown code `{}`", cp.code));
                }
                if cp.base_rate < 0.0 || cp.age_multipliers.iter().chain(&cp.sex_multipliers).any(|m| *m < 0.0) {
                    return err(format!("profile for `{}` has negative weights", cp.code));
                }
                for cc in &cp.co_codes {
                    if !set.contains_key(&cc.code) || !(0.0..=1.0).contains(&cc.p) {
                        return err(format!("profile for `{}` has invalid co-code `{}`", cp.code, cc.code));
                    }
                }
            }
        }
        let versions = file
            .versions
            .into_iter()
            .map(|mut v| {
                v.system_id = file.system_id.clone();
                v
            })
            .collect();
        Ok(Self {
            system_id: file.system_id,
            taxonomies: file.taxonomies,
            versions,
            codes_by_version,
            transitions: file.transitions,
            profiles: file.profiles,
        })
    }

    /// Canonical JSON form (pretty-printed, trailing newline).
    pub fn to_json(&self) -> String {
        let file = CodeSystemFile {
            system_id: self.system_id.clone(),
            taxonomies: self.taxonomies.clone(),
            versions: self.versions.clone(),
            codes: self
                .codes_by_version
                .iter()
                .map(|(k, v)| (k.clone(), v.values().cloned().collect()))
                .collect(),
            transitions: self.transitions.clone(),
            profiles: self.profiles.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("code system serializes");
        s.push('\n');
        s
    }

    pub fn system_id(&self) -> &str {
        &self.system_id
    }

    pub fn versions(&self) -> &[TerminologyVersion] {
        &self.versions
    }

    pub fn version(&self, label: &str) -> Option<&TerminologyVersion> {
        self.versions.iter().find(|v| v.label == label)
    }

    pub fn version_index(&self, label: &str) -> Option<usize> {
        self.versions.iter().position(|v| v.label == label)
    }

    pub fn codes(&self, version: &str) -> Option<&BTreeMap<String, CodeDef>> {
        self.codes_by_version.get(version)
    }

    pub fn code(&self, version: &str, code: &str) -> Option<&CodeDef> {
        self.codes_by_version.get(version)?.get(code)
    }

    pub fn has_code(&self, version: &str, code: &str) -> bool {
        self.code(version, code).is_some()
    }

    pub fn transitions(&self) -> &[TransitionTable] {
        &self.transitions
    }

    pub fn transition(&self, from: &str, to: &str) -> Option<&TransitionTable> {
        self.transitions.iter().find(|t| t.from == from && t.to == to)
    }

    pub fn profiles(&self) -> Option<&ClinicalProfiles> {
        self.profiles.as_ref()
    }

    pub fn latest_version(&self) -> Option<&TerminologyVersion> {
        self.versions.last()
    }

    /// Codes of `version` sharing the clinical group of `code`, sorted.
    pub fn clinical_group_members(&self, version: &str, group: &str) -> Vec<&str> {
        self.codes(version)
            .map(|set| {
                set.values()
                    .filter(|d| d.clinical_group == group)
                    .map(|d| d.code.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn billing_category_members(&self, version: &str, category: &str) -> Vec<&str> {
        self.codes(version)
            .map(|set| {
                set.values()
                    .filter(|d| d.billing_category == category)
                    .map(|d| d.code.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn load_code_system(path: &Path) -> Result<CodeSystem, ModelError> {
    CodeSystem::from_json(&read_file(path)?)
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InfluenceTagRaw")]
pub struct InfluenceTag {
    model_version: String,
    model_confidence: f64,
    clinician_modified: bool,
}

#[derive(Deserialize)]
struct InfluenceTagRaw {
    model_version: String,
    model_confidence: f64,
    clinician_modified: bool,
}

impl TryFrom<InfluenceTagRaw> for InfluenceTag {
    type Error = String;

    fn try_from(r: InfluenceTagRaw) -> Result<Self, Self::Error> {
        InfluenceTag::new(r.model_version, r.model_confidence, r.clinician_modified)
    }
}

impl InfluenceTag {
    pub fn new(
        model_version: impl Into<String>,
        model_confidence: f64,
        clinician_modified: bool,
    ) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&model_confidence) {
            return Err(format!("model_confidence {model_confidence} outside [0,1]"));
        }
        Ok(Self {
            model_version: model_version.into(),
            model_confidence,
            clinician_modified,
        })
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn model_confidence(&self) -> f64 {
        self.model_confidence
    }

    pub fn clinician_modified(&self) -> bool {
        self.clinician_modified
    }
}

/// Coding-fidelity annotation. The score is an ordinal index in `[0, 1]`,
/// the weighted mean of the three sub-scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FidelityRaw")]
pub struct FidelityAnnotation {
    score: f64,
    prevalence_subscore: f64,
    cooccurrence_subscore: f64,
    institutional_subscore: f64,
    rationale: String,
}

#[derive(Deserialize)]
struct FidelityRaw {
    score: f64,
    prevalence_subscore: f64,
    cooccurrence_subscore: f64,
    institutional_subscore: f64,
    rationale: String,
}

impl TryFrom<FidelityRaw> for FidelityAnnotation {
    type Error = String;

    fn try_from(r: FidelityRaw) -> Result<Self, Self::Error> {
        for (name, v) in [
            ("score", r.score),
            ("prevalence_subscore", r.prevalence_subscore),
            ("cooccurrence_subscore", r.cooccurrence_subscore),
            ("institutional_subscore", r.institutional_subscore),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} {v} outside [0,1]"));
            }
        }
        Ok(Self {
            score: r.score,
            prevalence_subscore: r.prevalence_subscore,
            cooccurrence_subscore: r.cooccurrence_subscore,
            institutional_subscore: r.institutional_subscore,
            rationale: r.rationale,
        })
    }
}

impl FidelityAnnotation {
    /// Builds the annotation from sub-scores; the score is their weighted
    /// mean. Sub-scores are clamped to `[0, 1]`.
    pub fn from_subscores(subscores: [f64; 3], weights: [f64; 3], rationale: impl Into<String>) -> Self {
        let s = subscores.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        let score = (s[0] * weights[0] + s[1] * weights[1] + s[2] * weights[2]).clamp(0.0, 1.0);
        Self {
            score,
            prevalence_subscore: s[0],
            cooccurrence_subscore: s[1],
            institutional_subscore: s[2],
            rationale: rationale.into(),
        }
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn prevalence_subscore(&self) -> f64 {
        self.prevalence_subscore
    }

    pub fn cooccurrence_subscore(&self) -> f64 {
        self.cooccurrence_subscore
    }

    pub fn institutional_subscore(&self) -> f64 {
        self.institutional_subscore
    }

    pub fn subscores(&self) -> [f64; 3] {
        [
            self.prevalence_subscore,
            self.cooccurrence_subscore,
            self.institutional_subscore,
        ]
    }

    pub fn rationale(&self) -> &str {
        &self.rationale
    }
}

/// One coded clinical encounter. `primary_code` is the administrative layer,
/// `clinical_code` the clinical layer once populated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodedRecord {
    pub record_id: String,
    pub patient_age_band: AgeBand,
    pub patient_sex: Sex,
    pub institution_id: String,
    pub encounter_time: DateTime<Utc>,
    pub primary_code: String,
    pub co_codes: BTreeSet<String>,
    pub version_tag: String,
    #[serde(default)]
    pub influence_tag: Option<InfluenceTag>,
    #[serde(default)]
    pub fidelity: Option<FidelityAnnotation>,
    #[serde(default)]
    pub clinical_code: Option<String>,
}

impl CodedRecord {
    pub fn stratum(&self) -> Stratum {
        Stratum::new(self.patient_age_band, self.patient_sex)
    }

    /// The code on the requested layer. `None` when the clinical layer has
    /// not been populated.
    pub fn code(&self, layer: Layer) -> Option<&str> {
        match layer {
            Layer::Administrative => Some(&self.primary_code),
            Layer::Clinical => self.clinical_code.as_deref(),
        }
    }

    pub fn is_ai_influenced(&self) -> bool {
        self.influence_tag.is_some()
    }
}

/// Reads a JSON Lines file of `T`, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ModelError> {
    parse_jsonl(&read_file(path)?)
}

pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, ModelError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ModelError::from))
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    std::fs::write(path, to_jsonl(items))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl Window {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        t >= self.start && t < self.end
    }

    /// Smallest window covering every record, `None` for an empty batch.
    pub fn covering(records: &[CodedRecord]) -> Option<Window> {
        let start = records.iter().map(|r| r.encounter_time).min()?;
        let end = records.iter().map(|r| r.encounter_time).max()?;
        Some(Window {
            start,
            end: end + chrono::Duration::seconds(1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Weights for (prevalence, co-occurrence, institutional) sub-scores.
    pub fidelity_weights: [f64; 3],
    pub drift_threshold: f64,
    pub breaker_threshold: f64,
    pub dormancy_frequency_threshold: f64,
    pub activation_prevalence_threshold: f64,
    pub release_correlation_window_days: u32,
    pub baseline_window: Option<Window>,
    pub current_window: Option<Window>,
    /// Records scoring below this get an inferred clinical layer.
    pub fidelity_cutoff: f64,
    pub cooccurrence_top_k: usize,
    pub min_support: usize,
    /// Weights for (co-occurrence, demographic, temporal, institutional)
    /// fingerprint components.
    pub fingerprint_weights: [f64; 4],
    pub temporal_bins: usize,
    /// Codes a migration may leave uncovered without blocking.
    pub acknowledged_unmapped_codes: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fidelity_weights: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            drift_threshold: 0.02,
            breaker_threshold: 0.15,
            dormancy_frequency_threshold: 0.002,
            activation_prevalence_threshold: 0.005,
            release_correlation_window_days: 30,
            baseline_window: None,
            current_window: None,
            fidelity_cutoff: 0.5,
            cooccurrence_top_k: 10,
            min_support: 20,
            fingerprint_weights: [0.25; 4],
            temporal_bins: 6,
            acknowledged_unmapped_codes: Vec::new(),
        }
    }
}

fn check_weights(key: &'static str, w: &[f64]) -> Result<(), ModelError> {
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ModelError::OutOfRange {
            key,
            detail: "weights must be non-negative".into(),
        });
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ModelError::WeightSum(sum));
    }
    Ok(())
}

fn open_unit(key: &'static str, v: f64) -> Result<(), ModelError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(ModelError::OutOfRange {
            key,
            detail: format!("{v} not in (0,1)"),
        })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_weights("fidelity_weights", &self.fidelity_weights)?;
        check_weights("fingerprint_weights", &self.fingerprint_weights)?;
        if !(self.drift_threshold > 0.0 && self.drift_threshold.is_finite()) {
            return Err(ModelError::OutOfRange {
                key: "drift_threshold",
                detail: format!("{} must be > 0", self.drift_threshold),
            });
        }
        open_unit("breaker_threshold", self.breaker_threshold)?;
        open_unit("dormancy_frequency_threshold", self.dormancy_frequency_threshold)?;
        open_unit("activation_prevalence_threshold", self.activation_prevalence_threshold)?;
        if self.release_correlation_window_days == 0 {
            return Err(ModelError::OutOfRange {
                key: "release_correlation_window_days",
                detail: "must be a positive integer".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.fidelity_cutoff) {
            return Err(ModelError::OutOfRange {
                key: "fidelity_cutoff",
                detail: format!("{} not in [0,1]", self.fidelity_cutoff),
            });
        }
        if self.cooccurrence_top_k == 0 {
            return Err(ModelError::OutOfRange {
                key: "cooccurrence_top_k",
                detail: "must be positive".into(),
            });
        }
        if self.temporal_bins == 0 {
            return Err(ModelError::OutOfRange {
                key: "temporal_bins",
                detail: "must be positive".into(),
            });
        }
        for (key, w) in [
            ("baseline_window", self.baseline_window),
            ("current_window", self.current_window),
        ] {
            if let Some(w) = w {
                if w.start >= w.end {
                    return Err(ModelError::OutOfRange {
                        key,
                        detail: "start must precede end".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ModelError> {
    PipelineConfig::from_json(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_system() -> &'static str {
        r#"{
          "system_id": "MINI",
          "versions": [{"label": "v1", "release_date": "2024-01-01", "validated": true}],
          "codes": {"v1": [{"code": "A1", "clinical_group": "g", "billing_category": "b", "description": "a"}]},
          "transitions": []
        }"#
    }

    #[test]
    fn config_defaults_fill_absent_keys() {
        let cfg = PipelineConfig::from_json(r#"{"drift_threshold": 0.05}"#).unwrap();
        assert_eq!(cfg.breaker_threshold, 0.15);
        assert_eq!(cfg.activation_prevalence_threshold, 0.005);
        assert_eq!(cfg.drift_threshold, 0.05);
    }

    #[test]
    fn config_rejects_bad_weight_sum() {
        let err = PipelineConfig::from_json(r#"{"fidelity_weights": [0.5, 0.3, 0.3]}"#).unwrap_err();
        assert!(err.to_string().contains("weights must sum to 1"), "{err}");
    }

    #[test]
    fn config_out_of_range_names_key() {
        let err = PipelineConfig::from_json(r#"{"breaker_threshold": 1.5}"#).unwrap_err();
        assert!(err.to_string().contains("breaker_threshold"), "{err}");
        let err = PipelineConfig::from_json(r#"{"release_correlation_window_days": 0}"#).unwrap_err();
        assert!(err.to_string().contains("release_correlation_window_days"));
    }

    #[test]
    fn config_parse_failure() {
        assert!(matches!(
            PipelineConfig::from_json("{not json"),
            Err(ModelError::Parse(_))
        ));
    }

    #[test]
    fn single_version_system_is_valid() {
        let sys = CodeSystem::from_json(minimal_system()).unwrap();
        assert_eq!(sys.versions().len(), 1);
        assert_eq!(sys.versions()[0].system_id, "MINI");
        assert!(sys.transitions().is_empty());
        assert!(sys.has_code("v1", "A1"));
    }

    #[test]
    fn transition_with_unknown_code_is_rejected() {
        let text = r#"{
          "system_id": "MINI",
          "versions": [{"label": "v1", "release_date": "2024-01-01", "validated": true},
                       {"label": "v2", "release_date": "2025-01-01", "validated": true}],
          "codes": {"v1": [{"code": "A1", "clinical_group": "g", "billing_category": "b", "description": "a"}],
                    "v2": [{"code": "A1", "clinical_group": "g", "billing_category": "b", "description": "a"}]},
          "transitions": [{"from": "v1", "to": "v2", "mappings": [{"from_code": "ZZ", "to_code": "A1"}], "unmappable": []}]
        }"#;
        let err = CodeSystem::from_json(text).unwrap_err();
        assert!(err.to_string().contains("unknown code `ZZ`"), "{err}");
    }

    #[test]
    fn duplicate_version_label_is_rejected() {
        let text = r#"{
          "system_id": "MINI",
          "versions": [{"label": "v1", "release_date": "2024-01-01", "validated": true},
                       {"label": "v1", "release_date": "2025-01-01", "validated": true}],
          "codes": {}, "transitions": []
        }"#;
        let err = CodeSystem::from_json(text).unwrap_err();
        assert!(err.to_string().contains("duplicate version label"));
    }

    #[test]
    fn unordered_versions_are_rejected() {
        let text = r#"{
          "system_id": "MINI",
          "versions": [{"label": "v2", "release_date": "2025-01-01", "validated": true},
                       {"label": "v1", "release_date": "2024-01-01", "validated": true}],
          "codes": {}, "transitions": []
        }"#;
        assert!(CodeSystem::from_json(text).is_err());
    }

    #[test]
    fn one_to_many_mapping_is_unmappable() {
        let t = TransitionTable {
            from: "a".into(),
            to: "b".into(),
            mappings: vec![
                CodeMapping {
                    from_code: "X".into(),
                    to_code: "X1".into(),
                },
                CodeMapping {
                    from_code: "X".into(),
                    to_code: "X2".into(),
                },
                CodeMapping {
                    from_code: "Y".into(),
                    to_code: "Y".into(),
                },
            ],
            unmappable: vec!["Z".into()],
        };
        assert_eq!(t.map("X"), Mapped::Unmappable);
        assert_eq!(t.map("Y"), Mapped::Code("Y"));
        assert_eq!(t.map("Z"), Mapped::Unmappable);
        assert_eq!(t.map("W"), Mapped::Unmappable);
    }

    #[test]
    fn fidelity_rejects_out_of_range_on_parse() {
        let bad = r#"{"score": 1.2, "prevalence_subscore": 0.5, "cooccurrence_subscore": 0.5, "institutional_subscore": 0.5, "rationale": ""}"#;
        assert!(serde_json::from_str::<FidelityAnnotation>(bad).is_err());
    }

    #[test]
    fn influence_tag_confidence_range() {
        assert!(InfluenceTag::new("m1", 1.01, false).is_err());
        assert!(InfluenceTag::new("m1", 0.7, true).is_ok());
    }

    #[test]
    fn stratum_index_is_dense() {
        let idx: Vec<usize> = Stratum::all().map(Stratum::index).collect();
        assert_eq!(idx, (0..27).collect::<Vec<_>>());
    }
}
