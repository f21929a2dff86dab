//! Coding-fidelity checkpoint.
//!
//! Every ingested record is annotated with a fidelity score built from three
//! comparisons against a reference model: the demographic plausibility of
//! its code, how well its co-codes match the code's usual companions, and
//! how far its institution's use of the code sits from the peer median.
//! Records are never rejected here.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::model::{CodeSystem, CodedRecord, FidelityAnnotation, Layer, PipelineConfig, Stratum};

pub use crate::model::FidelityAnnotation as Annotation;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("reference history is empty")]
    EmptyHistory,
    #[error("unknown version `{0}`")]
    UnknownVersion(String),
    #[error("record {0} has no {1} layer code")]
    MissingLayer(String, Layer),
    #[error("record {0} is not annotated")]
    Unannotated(String),
}

/// Empirical reference distributions with add-one smoothing over the
/// version's code set. Read-only after construction.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    version: String,
    vocabulary: usize,
    n: usize,
    stratum_totals: [usize; Stratum::COUNT],
    code_strata: BTreeMap<String, [usize; Stratum::COUNT]>,
    code_counts: BTreeMap<String, usize>,
    co_counts: BTreeMap<String, BTreeMap<String, usize>>,
    co_totals: BTreeMap<String, usize>,
    institution_totals: BTreeMap<String, usize>,
    institution_code: BTreeMap<(String, String), usize>,
    peer_median: BTreeMap<String, f64>,
}

pub fn build_reference_model(
    history: &[CodedRecord],
    system: &CodeSystem,
    version: &str,
    layer: Layer,
) -> Result<ReferenceModel, CheckpointError> {
    if history.is_empty() {
        return Err(CheckpointError::EmptyHistory);
    }
    let vocabulary = system
        .codes(version)
        .ok_or_else(|| CheckpointError::UnknownVersion(version.to_string()))?
        .len()
        .max(1);
    let mut m = ReferenceModel {
        version: version.to_string(),
        vocabulary,
        n: 0,
        stratum_totals: [0; Stratum::COUNT],
        code_strata: BTreeMap::new(),
        code_counts: BTreeMap::new(),
        co_counts: BTreeMap::new(),
        co_totals: BTreeMap::new(),
        institution_totals: BTreeMap::new(),
        institution_code: BTreeMap::new(),
        peer_median: BTreeMap::new(),
    };
    for r in history {
        let code = r
            .code(layer)
            .ok_or_else(|| CheckpointError::MissingLayer(r.record_id.clone(), layer))?;
        let s = r.stratum().index();
        m.n += 1;
        m.stratum_totals[s] += 1;
        m.code_strata.entry(code.to_string()).or_insert([0; Stratum::COUNT])[s] += 1;
        *m.code_counts.entry(code.to_string()).or_default() += 1;
        let co = m.co_counts.entry(code.to_string()).or_default();
        for c in &r.co_codes {
            *co.entry(c.clone()).or_default() += 1;
        }
        *m.co_totals.entry(code.to_string()).or_default() += r.co_codes.len();
        *m.institution_totals.entry(r.institution_id.clone()).or_default() += 1;
        *m.institution_code
            .entry((r.institution_id.clone(), code.to_string()))
            .or_default() += 1;
    }
    let codes: Vec<String> = m.code_counts.keys().cloned().collect();
    for code in codes {
        let median = m.median_rate(&code);
        m.peer_median.insert(code, median);
    }
    Ok(m)
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

impl ReferenceModel {
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn history_size(&self) -> usize {
        self.n
    }

    pub fn knows(&self, code: &str) -> bool {
        self.code_counts.contains_key(code)
    }

    /// Smoothed P(code | stratum).
    pub fn expected_prevalence(&self, code: &str, stratum: Stratum) -> f64 {
        let c = self.code_strata.get(code).map_or(0, |a| a[stratum.index()]);
        (c + 1) as f64 / (self.stratum_totals[stratum.index()] + self.vocabulary) as f64
    }

    /// Smoothed P(code) over the whole history.
    pub fn overall_prevalence(&self, code: &str) -> f64 {
        let c = self.code_counts.get(code).copied().unwrap_or(0);
        (c + 1) as f64 / (self.n + self.vocabulary) as f64
    }

    /// Smoothed share of `co` among the co-code mentions recorded with `code`.
    pub fn cooccurrence(&self, code: &str, co: &str) -> f64 {
        let c = self.co_counts.get(code).and_then(|m| m.get(co)).copied().unwrap_or(0);
        let total = self.co_totals.get(code).copied().unwrap_or(0);
        (c + 1) as f64 / (total + self.vocabulary) as f64
    }

    /// Observed co-codes of `code` with their smoothed probabilities, plus
    /// the per-entry floor shared by every unobserved code. Observed mass
    /// plus `floor * (vocabulary - observed)` is 1.
    pub fn cooccurrence_distribution(&self, code: &str) -> (BTreeMap<String, f64>, f64) {
        let total = self.co_totals.get(code).copied().unwrap_or(0);
        let denom = (total + self.vocabulary) as f64;
        let dist = self
            .co_counts
            .get(code)
            .map(|m| m.iter().map(|(k, c)| (k.clone(), (c + 1) as f64 / denom)).collect())
            .unwrap_or_default();
        (dist, 1.0 / denom)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary
    }

    /// The `k` most frequent observed co-codes of `code`, ties by code.
    pub fn top_cooccurring(&self, code: &str, k: usize) -> Vec<&str> {
        let Some(m) = self.co_counts.get(code) else {
            return Vec::new();
        };
        let mut v: Vec<(&String, &usize)> = m.iter().collect();
        v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        v.into_iter().take(k).map(|(c, _)| c.as_str()).collect()
    }

    /// Smoothed historical rate of `code` at `institution`.
    pub fn institution_rate(&self, institution: &str, code: &str) -> f64 {
        let total = self.institution_totals.get(institution).copied().unwrap_or(0);
        let c = self
            .institution_code
            .get(&(institution.to_string(), code.to_string()))
            .copied()
            .unwrap_or(0);
        (c + 1) as f64 / (total + self.vocabulary) as f64
    }

    fn median_rate(&self, code: &str) -> f64 {
        median(
            self.institution_totals
                .keys()
                .map(|i| self.institution_rate(i, code))
                .collect(),
        )
    }

    /// Median institutional rate of `code` across all institutions seen.
    pub fn peer_median_rate(&self, code: &str) -> f64 {
        self.peer_median
            .get(code)
            .copied()
            .unwrap_or_else(|| self.median_rate(code))
    }

    pub fn institutions(&self) -> impl Iterator<Item = &str> {
        self.institution_totals.keys().map(String::as_str)
    }
}

/// `min(1, 2x / (1 + x))` of the demographic likelihood ratio
/// `x = P(code | stratum) / P(code)`. A code exactly as common in the
/// record's stratum as overall scores 1.
pub fn prevalence_subscore(reference: &ReferenceModel, code: &str, stratum: Stratum) -> (f64, f64) {
    let x = reference.expected_prevalence(code, stratum) / reference.overall_prevalence(code);
    ((2.0 * x / (1.0 + x)).min(1.0), x)
}

/// Overlap coefficient between the record's co-codes and the code's top-k
/// reference co-codes. A record without co-codes carries no evidence either
/// way and scores 0.5.
pub fn cooccurrence_subscore(
    reference: &ReferenceModel,
    code: &str,
    co_codes: &BTreeSet<String>,
    k: usize,
) -> (f64, usize, usize) {
    if co_codes.is_empty() {
        return (0.5, 0, 0);
    }
    let top: BTreeSet<&str> = reference.top_cooccurring(code, k).into_iter().collect();
    if top.is_empty() {
        return (0.0, 0, co_codes.len());
    }
    let hits = co_codes.iter().filter(|c| top.contains(c.as_str())).count();
    let denom = co_codes.len().min(top.len());
    (hits as f64 / denom as f64, hits, co_codes.len())
}

/// `1 - min(1, |rate - peer median| / peer median)`.
pub fn institutional_subscore(reference: &ReferenceModel, institution: &str, code: &str) -> (f64, f64, f64) {
    let rate = reference.institution_rate(institution, code);
    let med = reference.peer_median_rate(code);
    let s = if med > 0.0 {
        1.0 - ((rate - med).abs() / med).min(1.0)
    } else {
        1.0
    };
    (s, rate, med)
}

/// Returns `record` with its fidelity annotation (re)computed.
pub fn annotate(record: &CodedRecord, reference: &ReferenceModel, cfg: &PipelineConfig) -> CodedRecord {
    let code = record.primary_code.as_str();
    let (s_prev, ratio) = prevalence_subscore(reference, code, record.stratum());
    let (s_co, hits, n_co) = cooccurrence_subscore(reference, code, &record.co_codes, cfg.cooccurrence_top_k);
    let (s_inst, rate, med) = institutional_subscore(reference, &record.institution_id, code);
    let rationale = format!(
        "prevalence ratio {ratio:.3}; co-codes {hits}/{n_co} in top-{}; institution rate {rate:.4} vs peer median {med:.4}",
        cfg.cooccurrence_top_k
    );
    let mut out = record.clone();
    out.fidelity = Some(FidelityAnnotation::from_subscores(
        [s_prev, s_co, s_inst],
        cfg.fidelity_weights,
        rationale,
    ));
    out
}

pub fn annotate_batch(batch: &[CodedRecord], reference: &ReferenceModel, cfg: &PipelineConfig) -> Vec<CodedRecord> {
    batch.iter().map(|r| annotate(r, reference, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidelityRow {
    pub institution: String,
    pub n: usize,
    pub mean: f64,
    pub deciles: [f64; 9],
}

/// Per-institution score distribution, institutions in sorted order.
pub fn fidelity_report(batch: &[CodedRecord]) -> Result<Vec<FidelityRow>, CheckpointError> {
    let mut scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in batch {
        let f = r
            .fidelity
            .as_ref()
            .ok_or_else(|| CheckpointError::Unannotated(r.record_id.clone()))?;
        scores.entry(&r.institution_id).or_default().push(f.score());
    }
    Ok(scores
        .into_iter()
        .map(|(inst, mut s)| {
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            let mean = s.iter().sum::<f64>() / n as f64;
            let mut deciles = [0.0; 9];
            for (i, d) in deciles.iter_mut().enumerate() {
                let rank = ((i + 1) as f64 / 10.0 * n as f64).ceil() as usize;
                *d = s[rank.clamp(1, n) - 1];
            }
            FidelityRow {
                institution: inst.to_string(),
                n,
                mean,
                deciles,
            }
        })
        .collect())
}

pub fn fidelity_report_csv(rows: &[FidelityRow]) -> String {
    let mut out = String::from("# fidelity score is an ordinal index, not a calibrated probability\n");
    out.push_str("institution,n,mean,d1,d2,d3,d4,d5,d6,d7,d8,d9\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}", r.institution, r.n, r.mean));
        for d in r.deciles {
            out.push_str(&format!(",{d:.6}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgeBand, Sex};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn tiny_system() -> CodeSystem {
        CodeSystem::from_json(
            r#"{"system_id":"T","versions":[{"label":"v","release_date":"2025-01-01","validated":true}],
            "codes":{"v":[
              {"code":"X","clinical_group":"g","billing_category":"b","description":""},
              {"code":"Y","clinical_group":"g","billing_category":"b","description":""},
              {"code":"L1","clinical_group":"lab","billing_category":"l","description":""},
              {"code":"L2","clinical_group":"lab","billing_category":"l","description":""}]},
            "transitions":[]}"#,
        )
        .unwrap()
    }

    fn rec(id: usize, inst: &str, code: &str, age: AgeBand, co: &[&str]) -> CodedRecord {
        CodedRecord {
            record_id: format!("r{id}"),
            patient_age_band: age,
            patient_sex: Sex::Female,
            institution_id: inst.into(),
            encounter_time: Utc.with_ymd_and_hms(2025, 4, 1, 0, 0, 0).unwrap(),
            primary_code: code.into(),
            co_codes: co.iter().map(|s| s.to_string()).collect(),
            version_tag: "v".into(),
            influence_tag: None,
            fidelity: None,
            clinical_code: None,
        }
    }

    #[test]
    fn hand_counted_prevalence() {
        // 100 records in one stratum, 60 coded X: (60 + 1) / (100 + 4).
        let history: Vec<_> = (0..100)
            .map(|i| rec(i, "I1", if i < 60 { "X" } else { "Y" }, AgeBand::A50to59, &[]))
            .collect();
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let p = m.expected_prevalence("X", Stratum::new(AgeBand::A50to59, Sex::Female));
        assert!((p - 61.0 / 104.0).abs() < 1e-12);
        assert!((p - 0.6).abs() < 0.02);
    }

    #[test]
    fn single_record_history_puts_mass_on_its_stratum() {
        let history = vec![rec(0, "I1", "X", AgeBand::A20to29, &["L1"])];
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let own = Stratum::new(AgeBand::A20to29, Sex::Female);
        let other = Stratum::new(AgeBand::A70to79, Sex::Male);
        assert!((m.expected_prevalence("X", own) - 2.0 / 5.0).abs() < 1e-12);
        assert!((m.expected_prevalence("X", other) - 1.0 / 4.0).abs() < 1e-12);
        assert!(m.expected_prevalence("X", own) > m.expected_prevalence("Y", own));
    }

    #[test]
    fn empty_history_is_an_error() {
        assert_eq!(
            build_reference_model(&[], &tiny_system(), "v", Layer::Administrative).unwrap_err(),
            CheckpointError::EmptyHistory
        );
    }

    #[test]
    fn clinical_layer_must_be_populated() {
        let history = vec![rec(0, "I1", "X", AgeBand::A20to29, &[])];
        assert!(matches!(
            build_reference_model(&history, &tiny_system(), "v", Layer::Clinical),
            Err(CheckpointError::MissingLayer(_, Layer::Clinical))
        ));
    }

    #[test]
    fn cooccurrence_distribution_sums_to_one() {
        let history = vec![
            rec(0, "I1", "X", AgeBand::A20to29, &["L1", "L2"]),
            rec(1, "I1", "X", AgeBand::A20to29, &["L1"]),
        ];
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let (dist, floor) = m.cooccurrence_distribution("X");
        let mass: f64 = dist.values().sum::<f64>() + floor * (m.vocabulary_size() - dist.len()) as f64;
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn best_case_record_scores_high() {
        // Every institution uses X at the same rate; the record's co-codes
        // are the reference modes.
        let mut history = Vec::new();
        for (k, inst) in ["I1", "I2", "I3"].iter().enumerate() {
            for i in 0..30 {
                let id = k * 100 + i;
                let code = if i < 20 { "X" } else { "Y" };
                let age = if i % 2 == 0 { AgeBand::A50to59 } else { AgeBand::A60to69 };
                history.push(rec(id, inst, code, age, if code == "X" { &["L1"] } else { &["L2"] }));
            }
        }
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let cfg = PipelineConfig::default();
        let out = annotate(&rec(999, "I2", "X", AgeBand::A50to59, &["L1"]), &m, &cfg);
        let f = out.fidelity.unwrap();
        for s in f.subscores() {
            assert!(s >= 0.9, "{f:?}");
        }
        assert!(f.score() >= 0.9);
    }

    #[test]
    fn institution_at_three_times_peer_rate_scores_low() {
        let mut history = Vec::new();
        let mut id = 0;
        // Peers code X in 10% of records; I4 in 30%.
        for (inst, xs) in [("I1", 10), ("I2", 10), ("I3", 10), ("I4", 30)] {
            for i in 0..100 {
                let code = if i < xs { "X" } else { "Y" };
                history.push(rec(id, inst, code, AgeBand::A50to59, &["L1"]));
                id += 1;
            }
        }
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let cfg = PipelineConfig::default();
        let (s, rate, med) = institutional_subscore(&m, "I4", "X");
        assert!(rate > 2.5 * med);
        assert!(s < 0.5);
        let batch = annotate_batch(&history, &m, &cfg);
        let mut scores: Vec<f64> = batch.iter().map(|r| r.fidelity.as_ref().unwrap().score()).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = scores[scores.len() / 2];
        let flagged = annotate(&rec(9999, "I4", "X", AgeBand::A50to59, &["L1"]), &m, &cfg);
        assert!(flagged.fidelity.unwrap().score() < median);
    }

    #[test]
    fn annotate_is_idempotent_and_preserves_fields() {
        let history = vec![
            rec(0, "I1", "X", AgeBand::A20to29, &["L1"]),
            rec(1, "I2", "Y", AgeBand::A30to39, &[]),
        ];
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let cfg = PipelineConfig::default();
        let once = annotate(&history[0], &m, &cfg);
        let twice = annotate(&once, &m, &cfg);
        assert_eq!(once, twice);
        let mut stripped = once.clone();
        stripped.fidelity = None;
        assert_eq!(stripped, history[0]);
    }

    #[test]
    fn report_rows() {
        assert!(fidelity_report(&[]).unwrap().is_empty());
        let history = vec![
            rec(0, "I1", "X", AgeBand::A20to29, &["L1"]),
            rec(1, "I1", "Y", AgeBand::A30to39, &[]),
        ];
        assert!(matches!(
            fidelity_report(&history),
            Err(CheckpointError::Unannotated(_))
        ));
        let m = build_reference_model(&history, &tiny_system(), "v", Layer::Administrative).unwrap();
        let rows = fidelity_report(&annotate_batch(&history, &m, &PipelineConfig::default())).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n, 2);
        assert!((0.0..=1.0).contains(&rows[0].mean));
        let csv = fidelity_report_csv(&rows);
        assert!(csv.starts_with("# fidelity score is an ordinal index"));
        assert_eq!(csv.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn score_is_monotone_in_each_subscore(
            base in prop::array::uniform3(0.0f64..=1.0),
            raw_w in prop::array::uniform3(0.0f64..=1.0),
            which in 0usize..3,
            bump in 0.0f64..=1.0,
        ) {
            let total: f64 = raw_w.iter().sum::<f64>() + 1e-9;
            let w = raw_w.map(|x| (x + 1e-9 / 3.0) / total);
            let lo = FidelityAnnotation::from_subscores(base, w, "");
            let mut raised = base;
            raised[which] = (raised[which] + bump).min(1.0);
            let hi = FidelityAnnotation::from_subscores(raised, w, "");
            prop_assert!(hi.score() + 1e-12 >= lo.score());
            prop_assert!((0.0..=1.0).contains(&hi.score()));
            let expected: f64 = (0..3).map(|i| raised[i] * w[i]).sum();
            prop_assert!((hi.score() - expected).abs() < 1e-9);
        }
    }
}
