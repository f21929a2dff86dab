//! Synthetic encounter generator with labelled distortions.
//!
//! Every batch is a pure function of `(system, spec, n, seed, quarter)`.
//! Clinical truth is sampled from the code system's declared profiles; the
//! administrative code is then derived from it by the configured distortion
//! mechanisms, each of which leaves a label in the ground truth.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Months, NaiveDate, TimeZone, Utc};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodeSystem, CodedRecord, InfluenceTag, Stratum, Window};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("distortion spec invalid: {0}")]
    InvalidSpec(String),
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("unknown institution `{0}`")]
    UnknownInstitution(String),
    #[error("code system has no clinical profiles")]
    NoProfiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstitutionShare {
    pub institution_id: String,
    pub weight: f64,
}

/// Rewrites a fraction of an institution's records whose true code is one
/// of `sources` to `target_code`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatchAll {
    pub institution_id: String,
    pub target_code: String,
    pub excess_rate: f64,
    /// Defaults to the target's clinical-group siblings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

/// From `start_time` on, the billing category's share of its clinical
/// group(s) is scaled by `rate_multiplier`, by recoding records from the
/// rest of the group into the category (or out of it when below 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillingInflation {
    pub billing_category: String,
    pub start_time: DateTime<Utc>,
    pub rate_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiInfluence {
    pub model_version: String,
    /// Fraction of each quarter's records carrying an influence tag.
    pub fractions: Vec<f64>,
    #[serde(default = "default_modified")]
    pub clinician_modified_rate: f64,
}

fn default_modified() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outbreak {
    pub code: String,
    pub start_time: DateTime<Utc>,
    pub prevalence_multiplier: f64,
    /// Share of the excess applied to clinical-group siblings.
    #[serde(default = "default_spillover")]
    pub group_spillover: f64,
}

fn default_spillover() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactCount {
    pub code: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub institutions: Vec<InstitutionShare>,
    /// Version records are coded under unless `version_mix` says otherwise.
    pub current_version: String,
    /// First day of the first generated quarter.
    pub start_date: NaiveDate,
    #[serde(default)]
    pub catch_all: Vec<CatchAll>,
    #[serde(default)]
    pub billing_inflation: Vec<BillingInflation>,
    #[serde(default)]
    pub version_mix: BTreeMap<String, String>,
    #[serde(default)]
    pub ai_influence: Option<AiInfluence>,
    #[serde(default)]
    pub outbreak: Option<Outbreak>,
    /// Codes whose true-code count per batch is fixed exactly.
    #[serde(default)]
    pub exact_code_counts: Vec<ExactCount>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistortionLabel {
    CatchAll,
    BillingInflation,
    VersionLag,
    AIInfluenced,
    Outbreak,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub record_id: String,
    pub true_clinical_code: String,
    pub distortion_labels: Vec<DistortionLabel>,
}

impl GroundTruthEntry {
    pub fn has(&self, label: DistortionLabel) -> bool {
        self.distortion_labels.contains(&label)
    }

    pub fn is_clean(&self) -> bool {
        self.distortion_labels == [DistortionLabel::None]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub entries: Vec<GroundTruthEntry>,
}

impl GroundTruth {
    pub fn by_id(&self) -> BTreeMap<&str, &GroundTruthEntry> {
        self.entries.iter().map(|e| (e.record_id.as_str(), e)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuarterBatch {
    pub quarter: usize,
    pub window: Window,
    pub records: Vec<CodedRecord>,
    pub truth: GroundTruth,
}

pub fn quarter_window(start: NaiveDate, quarter: usize) -> Window {
    let day = |d: NaiveDate| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).expect("midnight"));
    let s = start + Months::new(3 * quarter as u32);
    let e = start + Months::new(3 * (quarter as u32 + 1));
    Window {
        start: day(s),
        end: day(e),
    }
}

/// Mixes the run seed with a stream index so quarters draw independent
/// streams from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splits `n` by weights with the largest-remainder rule so the parts sum
/// to exactly `n`.
pub fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

impl DistortionSpec {
    /// A spec with `k` equally weighted institutions `P01..` and no
    /// distortions at all.
    pub fn clean(k: usize, current_version: &str, start_date: NaiveDate) -> Self {
        Self {
            institutions: (1..=k)
                .map(|i| InstitutionShare {
                    institution_id: format!("P{i:02}"),
                    weight: 1.0 / k as f64,
                })
                .collect(),
            current_version: current_version.to_string(),
            start_date,
            catch_all: Vec::new(),
            billing_inflation: Vec::new(),
            version_mix: BTreeMap::new(),
            ai_influence: None,
            outbreak: None,
            exact_code_counts: Vec::new(),
        }
    }

    pub fn validate(&self, system: &CodeSystem) -> Result<(), SynthError> {
        let profiles = system.profiles().ok_or(SynthError::NoProfiles)?;
        let invalid = |m: String| Err(SynthError::InvalidSpec(m));
        if system.version(&self.current_version).is_none() {
            return invalid(format!("unknown version `{}`", self.current_version));
        }
        if profiles.version != self.current_version {
            return invalid(format!(
                "profiles are written for version `{}`, spec generates `{}`",
                profiles.version, self.current_version
            ));
        }
        if self.institutions.is_empty() {
            return invalid("no institutions".into());
        }
        let mut seen = BTreeSet::new();
        for i in &self.institutions {
            if !(i.weight >= 0.0 && i.weight.is_finite()) {
                return invalid(format!("institution `{}` has invalid weight", i.institution_id));
            }
            if !seen.insert(i.institution_id.as_str()) {
                return invalid(format!("duplicate institution `{}`", i.institution_id));
            }
        }
        if self.institutions.iter().map(|i| i.weight).sum::<f64>() <= 0.0 {
            return invalid("institution weights sum to zero".into());
        }
        let known_code = |c: &str| -> Result<(), SynthError> {
            if profiles.profile(c).is_some() {
                Ok(())
            } else {
                Err(SynthError::UnknownCode(c.to_string()))
            }
        };
        let known_inst = |i: &str| -> Result<(), SynthError> {
            if seen.contains(i) {
                Ok(())
            } else {
                Err(SynthError::UnknownInstitution(i.to_string()))
            }
        };
        for c in &self.catch_all {
            known_inst(&c.institution_id)?;
            known_code(&c.target_code)?;
            for s in &c.sources {
                known_code(s)?;
            }
            if !(0.0..=1.0).contains(&c.excess_rate) {
                return invalid(format!("catch-all excess_rate {} outside [0,1]", c.excess_rate));
            }
        }
        for b in &self.billing_inflation {
            if system
                .billing_category_members(&self.current_version, &b.billing_category)
                .is_empty()
            {
                return invalid(format!("unknown billing category `{}`", b.billing_category));
            }
            if !(b.rate_multiplier > 0.0 && b.rate_multiplier.is_finite()) {
                return invalid(format!("rate_multiplier {} must be > 0", b.rate_multiplier));
            }
        }
        for (inst, v) in &self.version_mix {
            known_inst(inst)?;
            if system.version(v).is_none() {
                return invalid(format!("version_mix names unknown version `{v}`"));
            }
        }
        if let Some(ai) = &self.ai_influence {
            if ai.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                return invalid("ai_influence fractions must lie in [0,1]".into());
            }
            if !(0.0..=1.0).contains(&ai.clinician_modified_rate) {
                return invalid("clinician_modified_rate must lie in [0,1]".into());
            }
        }
        if let Some(o) = &self.outbreak {
            known_code(&o.code)?;
            if !(o.prevalence_multiplier > 0.0 && o.prevalence_multiplier.is_finite()) {
                return invalid("outbreak prevalence_multiplier must be > 0".into());
            }
            if !(0.0..=1.0).contains(&o.group_spillover) {
                return invalid("outbreak group_spillover must lie in [0,1]".into());
            }
        }
        let mut pinned = BTreeSet::new();
        for e in &self.exact_code_counts {
            known_code(&e.code)?;
            if !pinned.insert(e.code.as_str()) {
                return invalid(format!("code `{}` pinned twice", e.code));
            }
        }
        Ok(())
    }

    fn pinned(&self) -> BTreeSet<&str> {
        self.exact_code_counts.iter().map(|e| e.code.as_str()).collect()
    }

    fn influence_fraction(&self, quarter: usize) -> f64 {
        self.ai_influence
            .as_ref()
            .and_then(|ai| ai.fractions.get(quarter).copied())
            .unwrap_or(0.0)
    }
}

/// One batch: the first quarter of the distortion timeline.
pub fn generate_batch(
    system: &CodeSystem,
    spec: &DistortionSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<CodedRecord>, GroundTruth), SynthError> {
    let q = generate_quarter(system, spec, n, seed, 0)?;
    Ok((q.records, q.truth))
}

pub fn generate_quarter_series(
    system: &CodeSystem,
    spec: &DistortionSpec,
    quarters: usize,
    n_per_quarter: usize,
    seed: u64,
) -> Result<Vec<QuarterBatch>, SynthError> {
    (0..quarters)
        .map(|q| generate_quarter(system, spec, n_per_quarter, seed, q))
        .collect()
}

struct Slot {
    time: DateTime<Utc>,
    institution: usize,
    stratum: Stratum,
    true_code: String,
    primary: String,
    co_codes: BTreeSet<String>,
    version: String,
    labels: BTreeSet<DistortionLabel>,
    influence: Option<InfluenceTag>,
}

/// Generates quarter `quarter` (0-based) of the distortion timeline.
pub fn generate_quarter(
    system: &CodeSystem,
    spec: &DistortionSpec,
    n: usize,
    seed: u64,
    quarter: usize,
) -> Result<QuarterBatch, SynthError> {
    spec.validate(system)?;
    let profiles = system.profiles().ok_or(SynthError::NoProfiles)?;
    let window = quarter_window(spec.start_date, quarter);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, quarter as u64));
    let version = &spec.current_version;
    let pinned = spec.pinned();
    let pinned_total: usize = spec.exact_code_counts.iter().map(|e| e.count).sum();
    if pinned_total > n {
        return Err(SynthError::InvalidSpec(format!(
            "exact counts ({pinned_total}) exceed batch size ({n})"
        )));
    }
    let group_of = |code: &str| system.code(version, code).map(|d| d.clinical_group.clone());

    // Institutions: exact allocation, random order.
    let weights: Vec<f64> = spec.institutions.iter().map(|i| i.weight).collect();
    let mut institutions: Vec<usize> = largest_remainder(&weights, n)
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| std::iter::repeat_n(i, c))
        .collect();
    institutions.shuffle(&mut rng);

    let span = (window.end - window.start).num_seconds().max(1);
    let times: Vec<DateTime<Utc>> = (0..n)
        .map(|_| window.start + chrono::Duration::seconds(rng.gen_range(0..span)))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pinned_code: Vec<Option<&str>> = vec![None; n];
    let mut cursor = 0;
    for e in &spec.exact_code_counts {
        for &slot in &order[cursor..cursor + e.count] {
            pinned_code[slot] = Some(e.code.as_str());
        }
        cursor += e.count;
    }

    // Outbreak multipliers per code.
    let mut outbreak_factor: BTreeMap<&str, f64> = BTreeMap::new();
    if let Some(o) = &spec.outbreak {
        let excess = o.prevalence_multiplier - 1.0;
        if let Some(g) = group_of(&o.code) {
            for sib in system.clinical_group_members(version, &g) {
                outbreak_factor.insert(sib, 1.0 + excess * o.group_spillover);
            }
        }
        outbreak_factor.insert(o.code.as_str(), o.prevalence_multiplier);
    }
    let sampled_codes: Vec<&crate::model::CodeProfile> = profiles
        .codes
        .iter()
        .filter(|p| !pinned.contains(p.code.as_str()))
        .collect();
    let code_table = |stratum: Stratum, outbreak: bool| -> Option<WeightedIndex<f64>> {
        let w: Vec<f64> = sampled_codes
            .iter()
            .map(|p| {
                let f = if outbreak {
                    outbreak_factor.get(p.code.as_str()).copied().unwrap_or(1.0)
                } else {
                    1.0
                };
                p.weight(stratum) * f
            })
            .collect();
        WeightedIndex::new(w).ok()
    };
    let strata: Vec<Stratum> = Stratum::all().collect();
    let mut tables: Vec<[Option<WeightedIndex<f64>>; 2]> = strata
        .iter()
        .map(|&s| [code_table(s, false), code_table(s, true)])
        .collect();
    let population = WeightedIndex::new(strata.iter().map(|&s| profiles.stratum_weight(s)))
        .map_err(|e| SynthError::InvalidSpec(format!("population weights: {e}")))?;
    let mut pinned_strata: BTreeMap<&str, WeightedIndex<f64>> = BTreeMap::new();
    for e in &spec.exact_code_counts {
        let p = profiles.profile(&e.code).expect("validated");
        let w = strata.iter().map(|&s| profiles.stratum_weight(s) * p.weight(s));
        let dist = WeightedIndex::new(w)
            .map_err(|_| SynthError::InvalidSpec(format!("code `{}` has zero weight everywhere", e.code)))?;
        pinned_strata.insert(e.code.as_str(), dist);
    }

    let mut slots = Vec::with_capacity(n);
    for i in 0..n {
        let time = times[i];
        let (stratum, true_code) = match pinned_code[i] {
            Some(code) => (strata[pinned_strata[code].sample(&mut rng)], code.to_string()),
            None => {
                let mut stratum = strata[population.sample(&mut rng)];
                let outbreak = spec.outbreak.as_ref().is_some_and(|o| time >= o.start_time);
                // A stratum whose codes are all pinned has no table; resample.
                let mut guard = 0;
                while tables[stratum.index()][usize::from(outbreak)].is_none() && guard < 64 {
                    stratum = strata[population.sample(&mut rng)];
                    guard += 1;
                }
                let table = tables[stratum.index()][usize::from(outbreak)]
                    .as_mut()
                    .ok_or_else(|| SynthError::InvalidSpec("no sampleable codes".into()))?;
                (stratum, sampled_codes[table.sample(&mut rng)].code.clone())
            }
        };
        let profile = profiles.profile(&true_code).expect("profiled code");
        let co_codes: BTreeSet<String> = profile
            .co_codes
            .iter()
            .filter(|c| rng.gen::<f64>() < c.p)
            .map(|c| c.code.clone())
            .collect();
        let mut labels = BTreeSet::new();
        if let Some(o) = &spec.outbreak {
            if time >= o.start_time && outbreak_factor.get(true_code.as_str()).is_some_and(|f| *f != 1.0) {
                labels.insert(DistortionLabel::Outbreak);
            }
        }
        slots.push(Slot {
            time,
            institution: institutions[i],
            stratum,
            primary: true_code.clone(),
            true_code,
            co_codes,
            version: version.clone(),
            labels,
            influence: None,
        });
    }

    apply_catch_all(system, spec, &pinned, &mut slots, &mut rng);
    apply_billing_inflation(system, spec, &pinned, &mut slots, &mut rng);
    apply_version_lag(system, spec, &mut slots);

    let k = (spec.influence_fraction(quarter) * n as f64).round() as usize;
    if k > 0 {
        let ai = spec.ai_influence.as_ref().expect("fraction implies spec");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        for i in chosen {
            let confidence = rng.gen_range(0.5..0.99);
            let modified = rng.gen::<f64>() < ai.clinician_modified_rate;
            slots[i].influence =
                Some(InfluenceTag::new(ai.model_version.clone(), confidence, modified).expect("in range"));
            slots[i].labels.insert(DistortionLabel::AIInfluenced);
        }
    }

    // Stable ids in time order.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&i| (slots[i].time, i));
    let mut records = Vec::with_capacity(n);
    let mut truth = GroundTruth::default();
    for (seq, &i) in perm.iter().enumerate() {
        let s = &slots[i];
        let record_id = format!("Q{}-{:06}", quarter + 1, seq + 1);
        records.push(CodedRecord {
            record_id: record_id.clone(),
            patient_age_band: s.stratum.age_band,
            patient_sex: s.stratum.sex,
            institution_id: spec.institutions[s.institution].institution_id.clone(),
            encounter_time: s.time,
            primary_code: s.primary.clone(),
            co_codes: s.co_codes.clone(),
            version_tag: s.version.clone(),
            influence_tag: s.influence.clone(),
            fidelity: None,
            clinical_code: None,
        });
        let mut labels: Vec<DistortionLabel> = s.labels.iter().copied().collect();
        if labels.is_empty() {
            labels.push(DistortionLabel::None);
        }
        truth.entries.push(GroundTruthEntry {
            record_id,
            true_clinical_code: s.true_code.clone(),
            distortion_labels: labels,
        });
    }
    Ok(QuarterBatch {
        quarter,
        window,
        records,
        truth,
    })
}

fn apply_catch_all(
    system: &CodeSystem,
    spec: &DistortionSpec,
    pinned: &BTreeSet<&str>,
    slots: &mut [Slot],
    rng: &mut ChaCha8Rng,
) {
    let version = &spec.current_version;
    for ca in &spec.catch_all {
        let Some(inst) = spec
            .institutions
            .iter()
            .position(|i| i.institution_id == ca.institution_id)
        else {
            continue;
        };
        let sources: BTreeSet<String> = if ca.sources.is_empty() {
            let group = system
                .code(version, &ca.target_code)
                .map(|d| d.clinical_group.clone())
                .unwrap_or_default();
            system
                .clinical_group_members(version, &group)
                .into_iter()
                .filter(|c| *c != ca.target_code && !pinned.contains(c))
                .map(str::to_string)
                .collect()
        } else {
            ca.sources.iter().cloned().collect()
        };
        for s in slots.iter_mut().filter(|s| s.institution == inst) {
            if sources.contains(&s.primary) && rng.gen::<f64>() < ca.excess_rate {
                s.primary = ca.target_code.clone();
                s.labels.insert(DistortionLabel::CatchAll);
            }
        }
    }
}

fn apply_billing_inflation(
    system: &CodeSystem,
    spec: &DistortionSpec,
    pinned: &BTreeSet<&str>,
    slots: &mut [Slot],
    rng: &mut ChaCha8Rng,
) {
    let version = &spec.current_version;
    let Some(profiles) = system.profiles() else { return };
    let mean_weight = |code: &str| -> f64 {
        profiles
            .profile(code)
            .map(|p| Stratum::all().map(|s| profiles.stratum_weight(s) * p.weight(s)).sum())
            .unwrap_or(0.0)
    };
    for bi in &spec.billing_inflation {
        let category: Vec<&str> = system
            .billing_category_members(version, &bi.billing_category)
            .into_iter()
            .filter(|c| !pinned.contains(c) && profiles.profile(c).is_some())
            .collect();
        let groups: BTreeSet<String> = category
            .iter()
            .filter_map(|c| system.code(version, c).map(|d| d.clinical_group.clone()))
            .collect();
        let pool: Vec<&str> = groups
            .iter()
            .flat_map(|g| system.clinical_group_members(version, g))
            .filter(|c| !category.contains(c) && !pinned.contains(c) && profiles.profile(c).is_some())
            .collect();
        let w_cat: Vec<f64> = category.iter().map(|c| mean_weight(c)).collect();
        let w_pool: Vec<f64> = pool.iter().map(|c| mean_weight(c)).collect();
        let (sum_cat, sum_pool) = (w_cat.iter().sum::<f64>(), w_pool.iter().sum::<f64>());
        if sum_cat <= 0.0 || sum_pool <= 0.0 {
            continue;
        }
        let m = bi.rate_multiplier;
        let (from, to, rate, to_weights) = if m >= 1.0 {
            (&pool, &category, ((m - 1.0) * sum_cat / sum_pool).min(1.0), &w_cat)
        } else {
            (&category, &pool, 1.0 - m, &w_pool)
        };
        let pick = WeightedIndex::new(to_weights.iter().copied()).expect("positive weights");
        for s in slots.iter_mut() {
            if s.time < bi.start_time
                || s.labels.contains(&DistortionLabel::CatchAll)
                || !from.contains(&s.primary.as_str())
            {
                continue;
            }
            if rng.gen::<f64>() < rate {
                s.primary = to[pick.sample(rng)].to_string();
                s.labels.insert(DistortionLabel::BillingInflation);
            }
        }
    }
}

/// Maps a current-version code back to an older version by inverting the
/// transition chain. `None` when the code has no unique preimage.
pub fn back_map(system: &CodeSystem, code: &str, from_version: &str, to_version: &str) -> Option<String> {
    let hi = system.version_index(from_version)?;
    let lo = system.version_index(to_version)?;
    if lo > hi {
        return None;
    }
    let versions = system.versions();
    let mut current = code.to_string();
    for i in (lo..hi).rev() {
        let table = system.transition(&versions[i].label, &versions[i + 1].label)?;
        let pre: Vec<&str> = table
            .mappings
            .iter()
            .filter(|m| m.to_code == current)
            .map(|m| m.from_code.as_str())
            .collect();
        match pre.as_slice() {
            [one] => current = one.to_string(),
            _ => return None,
        }
    }
    Some(current)
}

fn apply_version_lag(system: &CodeSystem, spec: &DistortionSpec, slots: &mut [Slot]) {
    for (inst_id, lag_version) in &spec.version_mix {
        if *lag_version == spec.current_version {
            continue;
        }
        let Some(inst) = spec.institutions.iter().position(|i| &i.institution_id == inst_id) else {
            continue;
        };
        for s in slots.iter_mut().filter(|s| s.institution == inst) {
            if let Some(old) = back_map(system, &s.primary, &spec.current_version, lag_version) {
                s.primary = old;
            }
            s.co_codes = s
                .co_codes
                .iter()
                .map(|c| back_map(system, c, &spec.current_version, lag_version).unwrap_or_else(|| c.clone()))
                .collect();
            s.version = lag_version.clone();
            s.labels.insert(DistortionLabel::VersionLag);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        let parts = largest_remainder(&[0.064, 0.936], 50_000);
        assert_eq!(parts, vec![3200, 46_800]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 0), vec![0, 0, 0]);
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn quarter_windows_are_contiguous() {
        let start = NaiveDate::from_ymd_opt(2025, 4, 1).unwrap();
        let q0 = quarter_window(start, 0);
        let q1 = quarter_window(start, 1);
        assert_eq!(q0.end, q1.start);
        assert_eq!(q1.start.date_naive(), NaiveDate::from_ymd_opt(2025, 7, 1).unwrap());
    }
}
