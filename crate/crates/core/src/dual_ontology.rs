//! Administrative and clinical code layers.
//!
//! The administrative layer is whatever the source system emitted. The
//! clinical layer is filled either from a structured annotation file or by
//! inference: records whose fidelity falls below the configured cutoff get
//! the candidate code that best explains their co-codes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::ReferenceModel;
use crate::model::{read_jsonl, CodeSystem, CodedRecord, Layer, ModelError, PipelineConfig};

#[derive(Debug, Error)]
pub enum DualError {
    #[error("record {0} has no fidelity annotation")]
    Unannotated(String),
    #[error("record {0} has no {1} layer code")]
    MissingLayer(String, Layer),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Candidate codes for `code`: members of its clinical group in `version`,
/// or the code alone when it has no group there.
pub fn candidates<'a>(system: &'a CodeSystem, version: &str, code: &'a str) -> Vec<&'a str> {
    match system.code(version, code) {
        Some(def) => system.clinical_group_members(version, &def.clinical_group),
        None => vec![code],
    }
}

/// `log P(c | stratum) + sum over co-codes of log P(co | c)` under the
/// reference model.
pub fn candidate_score(reference: &ReferenceModel, record: &CodedRecord, candidate: &str) -> f64 {
    let prior = reference.expected_prevalence(candidate, record.stratum()).ln();
    prior
        + record
            .co_codes
            .iter()
            .map(|co| reference.cooccurrence(candidate, co).ln())
            .sum::<f64>()
}

/// How much more likely (in log odds) a sibling must be than the recorded
/// code before inference replaces it: ten to one.
pub const OVERRIDE_LOG_ODDS: f64 = std::f64::consts::LN_10;

/// Most likely code for a record from its co-codes. The recorded code is
/// kept unless a sibling beats it by [`OVERRIDE_LOG_ODDS`]; ties between
/// siblings go to the lexicographically smallest code.
pub fn most_likely_code(reference: &ReferenceModel, system: &CodeSystem, record: &CodedRecord) -> String {
    if record.co_codes.is_empty() {
        return record.primary_code.clone();
    }
    let mut best: Option<(f64, &str)> = None;
    let mut pool = candidates(system, reference.version(), &record.primary_code);
    pool.sort_unstable();
    for c in pool {
        let s = candidate_score(reference, record, c);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, c));
        }
    }
    let own = candidate_score(reference, record, &record.primary_code);
    match best {
        Some((s, c)) if s > own + OVERRIDE_LOG_ODDS => c.to_string(),
        _ => record.primary_code.clone(),
    }
}

/// Populates `clinical_code` on every record. High-fidelity records copy
/// their administrative code.
pub fn infer_clinical_layer(
    batch: &[CodedRecord],
    reference: &ReferenceModel,
    system: &CodeSystem,
    cfg: &PipelineConfig,
) -> Result<Vec<CodedRecord>, DualError> {
    batch
        .iter()
        .map(|r| {
            let f = r
                .fidelity
                .as_ref()
                .ok_or_else(|| DualError::Unannotated(r.record_id.clone()))?;
            let mut out = r.clone();
            out.clinical_code = Some(if f.score() >= cfg.fidelity_cutoff {
                r.primary_code.clone()
            } else {
                most_likely_code(reference, system, r)
            });
            Ok(out)
        })
        .collect()
}

/// One line of a clinical-layer annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalOverride {
    pub record_id: String,
    pub clinical_code: String,
}

pub fn load_overrides(path: &Path) -> Result<Vec<ClinicalOverride>, DualError> {
    Ok(read_jsonl(path)?)
}

/// Replaces the clinical layer for every record named in `overrides`.
/// Returns the number of records touched.
pub fn apply_overrides(batch: &mut [CodedRecord], overrides: &[ClinicalOverride]) -> usize {
    let by_id: BTreeMap<&str, &str> = overrides
        .iter()
        .map(|o| (o.record_id.as_str(), o.clinical_code.as_str()))
        .collect();
    let mut touched = 0;
    for r in batch.iter_mut() {
        if let Some(c) = by_id.get(r.record_id.as_str()) {
            r.clinical_code = Some(c.to_string());
            touched += 1;
        }
    }
    touched
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Record,
    Institution,
    Population,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub scope: Scope,
    /// Record or institution id; empty at population scope.
    pub key: String,
    pub n: usize,
    pub disagreement_rate: f64,
    #[serde(serialize_with = "confusion_as_list")]
    pub per_code_confusion: BTreeMap<(String, String), usize>,
}

fn confusion_as_list<S: serde::Serializer>(m: &BTreeMap<(String, String), usize>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.len()))?;
    for ((a, c), n) in m {
        seq.serialize_element(&(a, c, n))?;
    }
    seq.end()
}

/// Divergence between the administrative (rows) and clinical (columns)
/// layers.
pub fn divergence(batch: &[CodedRecord], scope: Scope) -> Result<Vec<DivergenceReport>, DualError> {
    divergence_between(batch, scope, Layer::Administrative, Layer::Clinical)
}

/// Divergence with an explicit choice of which layer indexes the rows of
/// the confusion table.
pub fn divergence_between(
    batch: &[CodedRecord],
    scope: Scope,
    rows: Layer,
    cols: Layer,
) -> Result<Vec<DivergenceReport>, DualError> {
    let mut groups: BTreeMap<String, Vec<(&str, &str)>> = BTreeMap::new();
    for r in batch {
        let a = r
            .code(rows)
            .ok_or_else(|| DualError::MissingLayer(r.record_id.clone(), rows))?;
        let c = r
            .code(cols)
            .ok_or_else(|| DualError::MissingLayer(r.record_id.clone(), cols))?;
        let key = match scope {
            Scope::Record => r.record_id.clone(),
            Scope::Institution => r.institution_id.clone(),
            Scope::Population => String::new(),
        };
        groups.entry(key).or_default().push((a, c));
    }
    if groups.is_empty() && scope == Scope::Population {
        groups.insert(String::new(), Vec::new());
    }
    Ok(groups
        .into_iter()
        .map(|(key, pairs)| {
            let mut confusion = BTreeMap::new();
            let mut differ = 0usize;
            for (a, c) in &pairs {
                if a != c {
                    differ += 1;
                }
                *confusion.entry((a.to_string(), c.to_string())).or_insert(0) += 1;
            }
            let n = pairs.len();
            DivergenceReport {
                scope,
                key,
                n,
                disagreement_rate: if n == 0 { 0.0 } else { differ as f64 / n as f64 },
                per_code_confusion: confusion,
            }
        })
        .collect())
}

pub fn divergence_csv(reports: &[DivergenceReport]) -> String {
    let mut out = String::from("scope,key,n,disagreement_rate,admin_code,clinical_code,count\n");
    for r in reports {
        for ((a, c), count) in &r.per_code_confusion {
            out.push_str(&format!(
                "{:?},{},{},{:.6},{},{},{}\n",
                r.scope, r.key, r.n, r.disagreement_rate, a, c, count
            ));
        }
    }
    out
}

/// Codes whose clinical-layer count differs from their administrative count,
/// with (administrative, clinical) counts.
pub fn layer_count_shift(batch: &[CodedRecord]) -> BTreeMap<String, (usize, usize)> {
    let mut m: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in batch {
        m.entry(r.primary_code.clone()).or_default().0 += 1;
        if let Some(c) = &r.clinical_code {
            m.entry(c.clone()).or_default().1 += 1;
        }
    }
    m.retain(|_, (a, c)| a != c);
    m
}

/// Distinct codes present in either layer.
pub fn codes_in_use(batch: &[CodedRecord]) -> BTreeSet<String> {
    batch
        .iter()
        .flat_map(|r| std::iter::once(r.primary_code.clone()).chain(r.clinical_code.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled::syn_icd;
    use crate::checkpoint::{annotate_batch, build_reference_model};
    use crate::synthgen::{generate_batch, DistortionSpec};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn clean_reference() -> (CodeSystem, ReferenceModel, Vec<CodedRecord>) {
        static CACHE: OnceLock<(CodeSystem, ReferenceModel, Vec<CodedRecord>)> = OnceLock::new();
        CACHE
            .get_or_init(|| {
                let sys = syn_icd();
                let spec = DistortionSpec::clean(4, "2025", NaiveDate::from_ymd_opt(2025, 1, 1).unwrap());
                let (history, _) = generate_batch(&sys, &spec, 20_000, 11).unwrap();
                let m = build_reference_model(&history, &sys, "2025", Layer::Administrative).unwrap();
                (sys, m, history)
            })
            .clone()
    }

    fn with_layers(pairs: &[(&str, &str)]) -> Vec<CodedRecord> {
        let (_, _, history) = clean_reference();
        pairs
            .iter()
            .zip(history)
            .map(|((a, c), mut r)| {
                r.primary_code = a.to_string();
                r.clinical_code = Some(c.to_string());
                r
            })
            .collect()
    }

    #[test]
    fn high_fidelity_records_copy_the_primary_code() {
        let (sys, m, history) = clean_reference();
        let cfg = PipelineConfig {
            fidelity_cutoff: 0.0,
            ..PipelineConfig::default()
        };
        let annotated = annotate_batch(&history[..200], &m, &cfg);
        let out = infer_clinical_layer(&annotated, &m, &sys, &cfg).unwrap();
        assert!(out
            .iter()
            .all(|r| r.clinical_code.as_deref() == Some(r.primary_code.as_str())));
    }

    #[test]
    fn catch_all_record_with_marker_codes_is_recovered() {
        let (sys, m, history) = clean_reference();
        let mut r = history[0].clone();
        r.primary_code = "S-E11.9".into();
        r.co_codes = ["L-HBA1C-HIGH", "L-GLU-HIGH", "M-INSULIN"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(most_likely_code(&m, &sys, &r), "S-E11.65");

        let cfg = PipelineConfig {
            fidelity_cutoff: 1.0,
            ..PipelineConfig::default()
        };
        let annotated = annotate_batch(&[r], &m, &cfg);
        let out = infer_clinical_layer(&annotated, &m, &sys, &cfg).unwrap();
        assert_eq!(out[0].clinical_code.as_deref(), Some("S-E11.65"));
    }

    #[test]
    fn record_without_co_codes_keeps_its_code() {
        let (sys, m, history) = clean_reference();
        let mut r = history[0].clone();
        r.primary_code = "S-E11.9".into();
        r.co_codes.clear();
        assert_eq!(most_likely_code(&m, &sys, &r), "S-E11.9");
    }

    #[test]
    fn replacement_needs_the_full_margin() {
        let (sys, m, history) = clean_reference();
        for r in &history[..3000] {
            let own = candidate_score(&m, r, &r.primary_code);
            let top = candidates(&sys, "2025", &r.primary_code)
                .into_iter()
                .map(|c| candidate_score(&m, r, c))
                .fold(f64::NEG_INFINITY, f64::max);
            let chosen = most_likely_code(&m, &sys, r);
            if r.co_codes.is_empty() || top <= own + OVERRIDE_LOG_ODDS {
                assert_eq!(chosen, r.primary_code);
            } else {
                assert_ne!(chosen, r.primary_code);
                assert_eq!(candidate_score(&m, r, &chosen), top);
            }
        }
    }

    #[test]
    fn unannotated_record_is_an_error() {
        let (sys, m, history) = clean_reference();
        assert!(matches!(
            infer_clinical_layer(&history[..1], &m, &sys, &PipelineConfig::default()),
            Err(DualError::Unannotated(_))
        ));
    }

    #[test]
    fn overrides_replace_the_clinical_layer() {
        let mut batch = with_layers(&[("S-E11.9", "S-E11.9"), ("S-I10", "S-I10")]);
        let id = batch[1].record_id.clone();
        let n = apply_overrides(
            &mut batch,
            &[
                ClinicalOverride {
                    record_id: id,
                    clinical_code: "S-I25".into(),
                },
                ClinicalOverride {
                    record_id: "nope".into(),
                    clinical_code: "S-I25".into(),
                },
            ],
        );
        assert_eq!(n, 1);
        assert_eq!(batch[1].clinical_code.as_deref(), Some("S-I25"));
    }

    #[test]
    fn identical_layers_have_zero_divergence() {
        let batch = with_layers(&[("S-E11.9", "S-E11.9"), ("S-I10", "S-I10")]);
        let r = divergence(&batch, Scope::Population).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].disagreement_rate, 0.0);
        assert_eq!(r[0].per_code_confusion.values().sum::<usize>(), 2);
    }

    #[test]
    fn fully_rewritten_batch_has_full_divergence() {
        let batch = with_layers(&[("S-E11.9", "S-E11.65"), ("S-I10", "S-I25")]);
        assert_eq!(divergence(&batch, Scope::Population).unwrap()[0].disagreement_rate, 1.0);
        let per_record = divergence(&batch, Scope::Record).unwrap();
        assert_eq!(per_record.len(), 2);
        assert!(per_record.iter().all(|r| r.n == 1 && r.disagreement_rate == 1.0));
    }

    #[test]
    fn unpopulated_clinical_layer_is_an_error() {
        let (_, _, history) = clean_reference();
        assert!(matches!(
            divergence(&history[..1], Scope::Institution),
            Err(DualError::MissingLayer(_, Layer::Clinical))
        ));
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let batch = with_layers(&[("S-E11.9", "S-E11.65"), ("S-E11.9", "S-E11.65"), ("S-I10", "S-I10")]);
        let csv = divergence_csv(&divergence(&batch, Scope::Population).unwrap());
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("S-E11.9,S-E11.65,2"));
    }

    proptest! {
        #[test]
        fn swapping_layers_transposes_confusion(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let codes = ["S-E11.9", "S-E11.65", "S-E11.69", "S-I10"];
            let named: Vec<(&str, &str)> = pairs.iter().map(|(a, c)| (codes[*a], codes[*c])).collect();
            let batch = with_layers(&named);
            for scope in [Scope::Population, Scope::Institution] {
                let ac = divergence_between(&batch, scope, Layer::Administrative, Layer::Clinical).unwrap();
                let ca = divergence_between(&batch, scope, Layer::Clinical, Layer::Administrative).unwrap();
                prop_assert_eq!(ac.len(), ca.len());
                for (x, y) in ac.iter().zip(&ca) {
                    prop_assert_eq!(x.disagreement_rate, y.disagreement_rate);
                    prop_assert_eq!(x.per_code_confusion.values().sum::<usize>(), x.n);
                    let transposed: BTreeMap<(String, String), usize> = y
                        .per_code_confusion
                        .iter()
                        .map(|((a, c), n)| ((c.clone(), a.clone()), *n))
                        .collect();
                    prop_assert_eq!(&x.per_code_confusion, &transposed);
                }
            }
        }
    }
}
