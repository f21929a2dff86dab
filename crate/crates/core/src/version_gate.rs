//! Version-tag enforcement at ingestion.
//!
//! Records coded under an older terminology version are rewritten through
//! the chain of adjacent transition tables when every hop has a single,
//! explicit image. Anything else goes to quarantine with its original code
//! and version intact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{write_jsonl, CodeSystem, CodedRecord, Mapped, PipelineConfig};

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("unknown version `{0}`")]
    UnknownVersion(String),
    #[error("target version `{0}` is not validated")]
    Unvalidated(String),
    #[error("target version `{0}` is blocked by a failed migration check from `{1}`")]
    Blocked(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuarantineReason {
    UnmappableCode,
    UnvalidatedVersion,
    UnknownCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconciled {
    pub record: CodedRecord,
    pub original_code: String,
    pub original_version: String,
}

/// One line of the quarantine side file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub record: CodedRecord,
    pub reason: QuarantineReason,
    pub original_code: String,
    pub original_version: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateOutcome {
    pub accepted: Vec<CodedRecord>,
    pub reconciled: Vec<Reconciled>,
    pub quarantined: Vec<Quarantined>,
}

impl GateOutcome {
    pub fn len(&self) -> usize {
        self.accepted.len() + self.reconciled.len() + self.quarantined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accepted and reconciled records in their original batch order.
    pub fn passed(&self) -> Vec<CodedRecord> {
        let mut out: Vec<CodedRecord> = self
            .accepted
            .iter()
            .cloned()
            .chain(self.reconciled.iter().map(|r| r.record.clone()))
            .collect();
        out.sort_by(|a, b| {
            a.encounter_time
                .cmp(&b.encounter_time)
                .then(a.record_id.cmp(&b.record_id))
        });
        out
    }

    pub fn reason_counts(&self) -> BTreeMap<QuarantineReason, usize> {
        let mut m = BTreeMap::new();
        for q in &self.quarantined {
            *m.entry(q.reason).or_insert(0) += 1;
        }
        m
    }

    pub fn write_quarantine(&self, path: &Path) -> std::io::Result<()> {
        write_jsonl(path, &self.quarantined)
    }

    /// Writes `accepted.jsonl`, `reconciled.jsonl` and `quarantine.jsonl`
    /// into `dir`.
    pub fn write_all(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("accepted.jsonl"), &self.accepted)?;
        write_jsonl(&dir.join("reconciled.jsonl"), &self.reconciled)?;
        self.write_quarantine(&dir.join("quarantine.jsonl"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MigrationVerdict {
    Validated,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub from_version: String,
    pub to_version: String,
    pub mapping_coverage: f64,
    pub changed_codes: Vec<String>,
    pub unmappable_codes: Vec<String>,
    pub verdict: MigrationVerdict,
}

/// Follows `code` from `from` forward to `to` through every adjacent table.
/// `None` when a hop has no table, lists the code as unmappable, or is
/// ambiguous.
pub fn map_forward(system: &CodeSystem, code: &str, from: &str, to: &str) -> Option<String> {
    let i = system.version_index(from)?;
    let j = system.version_index(to)?;
    if i > j {
        return None;
    }
    let versions = system.versions();
    let mut current = code.to_string();
    for w in versions[i..=j].windows(2) {
        let table = system.transition(&w[0].label, &w[1].label)?;
        match table.map(&current) {
            Mapped::Code(c) => current = c.to_string(),
            Mapped::Unmappable => return None,
        }
    }
    Some(current)
}

/// Checks that moving from `from_version` to `to_version` covers every code
/// observed in the candidate history. Uncovered codes listed in
/// `acknowledged` do not block.
pub fn validate_migration(
    system: &CodeSystem,
    from_version: &str,
    to_version: &str,
    observed_codes: &BTreeSet<String>,
    acknowledged: &[String],
) -> Result<MigrationReport, GateError> {
    for v in [from_version, to_version] {
        if system.version(v).is_none() {
            return Err(GateError::UnknownVersion(v.to_string()));
        }
    }
    let chain_complete = chain_has_tables(system, from_version, to_version);
    let mut changed = Vec::new();
    let mut unmappable = Vec::new();
    let mut covered = 0usize;
    for code in observed_codes {
        match map_forward(system, code, from_version, to_version).filter(|_| chain_complete) {
            Some(image) => {
                covered += 1;
                if &image != code {
                    changed.push(code.clone());
                }
            }
            None => unmappable.push(code.clone()),
        }
    }
    let mapping_coverage = if !chain_complete {
        0.0
    } else if observed_codes.is_empty() {
        1.0
    } else {
        covered as f64 / observed_codes.len() as f64
    };
    let acknowledged: BTreeSet<&str> = acknowledged.iter().map(String::as_str).collect();
    let verdict = if chain_complete && unmappable.iter().all(|c| acknowledged.contains(c.as_str())) {
        MigrationVerdict::Validated
    } else {
        MigrationVerdict::Blocked
    };
    Ok(MigrationReport {
        from_version: from_version.to_string(),
        to_version: to_version.to_string(),
        mapping_coverage,
        changed_codes: changed,
        unmappable_codes: unmappable,
        verdict,
    })
}

fn chain_has_tables(system: &CodeSystem, from: &str, to: &str) -> bool {
    let (Some(i), Some(j)) = (system.version_index(from), system.version_index(to)) else {
        return false;
    };
    if i > j {
        return false;
    }
    system.versions()[i..=j]
        .windows(2)
        .all(|w| system.transition(&w[0].label, &w[1].label).is_some())
}

/// A gate bound to a code system, optionally constrained by migration
/// reports. A `Blocked` report stops the gate from targeting its
/// `to_version`.
#[derive(Debug, Clone)]
pub struct VersionGate<'a> {
    system: &'a CodeSystem,
    blocked: BTreeMap<String, String>,
}

impl<'a> VersionGate<'a> {
    pub fn new(system: &'a CodeSystem) -> Self {
        Self {
            system,
            blocked: BTreeMap::new(),
        }
    }

    pub fn with_migration(mut self, report: &MigrationReport) -> Self {
        match report.verdict {
            MigrationVerdict::Blocked => {
                self.blocked
                    .insert(report.to_version.clone(), report.from_version.clone());
            }
            MigrationVerdict::Validated => {
                self.blocked.remove(&report.to_version);
            }
        }
        self
    }

    pub fn gate_batch(&self, batch: &[CodedRecord], target_version: &str) -> Result<GateOutcome, GateError> {
        let target = self
            .system
            .version(target_version)
            .ok_or_else(|| GateError::UnknownVersion(target_version.to_string()))?;
        if !target.validated {
            return Err(GateError::Unvalidated(target_version.to_string()));
        }
        if let Some(from) = self.blocked.get(target_version) {
            return Err(GateError::Blocked(target_version.to_string(), from.clone()));
        }
        let mut out = GateOutcome::default();
        for r in batch {
            match self.route(r, target_version) {
                Route::Accept => out.accepted.push(r.clone()),
                Route::Reconcile(rec) => out.reconciled.push(Reconciled {
                    record: *rec,
                    original_code: r.primary_code.clone(),
                    original_version: r.version_tag.clone(),
                }),
                Route::Quarantine(reason) => out.quarantined.push(Quarantined {
                    record: r.clone(),
                    reason,
                    original_code: r.primary_code.clone(),
                    original_version: r.version_tag.clone(),
                }),
            }
        }
        Ok(out)
    }

    fn route(&self, r: &CodedRecord, target: &str) -> Route {
        let Some(version) = self.system.version(&r.version_tag) else {
            return Route::Quarantine(QuarantineReason::UnvalidatedVersion);
        };
        if !version.validated {
            return Route::Quarantine(QuarantineReason::UnvalidatedVersion);
        }
        if !self.system.has_code(&r.version_tag, &r.primary_code) {
            return Route::Quarantine(QuarantineReason::UnknownCode);
        }
        if r.version_tag == target {
            return Route::Accept;
        }
        let from = r.version_tag.as_str();
        let Some(primary) = map_forward(self.system, &r.primary_code, from, target) else {
            return Route::Quarantine(QuarantineReason::UnmappableCode);
        };
        let clinical = match &r.clinical_code {
            Some(c) => match map_forward(self.system, c, from, target) {
                Some(m) => Some(m),
                None => return Route::Quarantine(QuarantineReason::UnmappableCode),
            },
            None => None,
        };
        let mut rec = r.clone();
        rec.primary_code = primary;
        rec.clinical_code = clinical;
        // Co-codes follow their table image when one exists and are kept
        // as-is otherwise; they never decide the record's route.
        rec.co_codes = r
            .co_codes
            .iter()
            .map(|c| map_forward(self.system, c, from, target).unwrap_or_else(|| c.clone()))
            .collect();
        rec.version_tag = target.to_string();
        Route::Reconcile(Box::new(rec))
    }
}

enum Route {
    Accept,
    Reconcile(Box<CodedRecord>),
    Quarantine(QuarantineReason),
}

/// Gates `batch` onto `target_version`, honouring the acknowledged-code list
/// in `cfg` for every older version observed in the batch.
pub fn gate_batch(
    batch: &[CodedRecord],
    system: &CodeSystem,
    target_version: &str,
    cfg: &PipelineConfig,
) -> Result<GateOutcome, GateError> {
    let mut gate = VersionGate::new(system);
    let target_idx = system
        .version_index(target_version)
        .ok_or_else(|| GateError::UnknownVersion(target_version.to_string()))?;
    let mut observed: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for r in batch {
        if let Some(i) = system.version_index(&r.version_tag) {
            if i < target_idx && system.has_code(&r.version_tag, &r.primary_code) {
                observed
                    .entry(&r.version_tag)
                    .or_default()
                    .insert(r.primary_code.clone());
            }
        }
    }
    for (from, codes) in &observed {
        let report = validate_migration(system, from, target_version, codes, &cfg.acknowledged_unmapped_codes)?;
        gate = gate.with_migration(&report);
    }
    gate.gate_batch(batch, target_version)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled::syn_icd;
    use crate::model::{AgeBand, Sex};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn rec(id: usize, code: &str, version: &str) -> CodedRecord {
        CodedRecord {
            record_id: format!("r{id:04}"),
            patient_age_band: AgeBand::A50to59,
            patient_sex: Sex::Male,
            institution_id: "P01".into(),
            encounter_time: Utc.with_ymd_and_hms(2025, 5, 1, 0, 0, 0).unwrap() + chrono::Duration::seconds(id as i64),
            primary_code: code.into(),
            co_codes: ["L-HBA1C-HIGH".to_string()].into(),
            version_tag: version.into(),
            influence_tag: None,
            fidelity: None,
            clinical_code: None,
        }
    }

    fn lenient() -> PipelineConfig {
        PipelineConfig {
            acknowledged_unmapped_codes: vec!["S-R73".into()],
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn target_batch_is_accepted_unchanged() {
        let sys = syn_icd();
        let batch: Vec<_> = (0..5).map(|i| rec(i, "S-E11.9", "2025")).collect();
        let out = gate_batch(&batch, &sys, "2025", &PipelineConfig::default()).unwrap();
        assert_eq!(out.accepted, batch);
        assert!(out.reconciled.is_empty() && out.quarantined.is_empty());
    }

    #[test]
    fn old_version_is_reconciled_through_the_table() {
        let sys = syn_icd();
        let batch = vec![rec(0, "S-E11.6", "2024"), rec(1, "S-E11.9", "2024")];
        let out = gate_batch(&batch, &sys, "2025", &PipelineConfig::default()).unwrap();
        assert_eq!(out.reconciled.len(), 2);
        let r = &out.reconciled[0];
        assert_eq!(r.record.primary_code, "S-E11.69");
        assert_eq!(r.record.version_tag, "2025");
        assert_eq!(r.original_code, "S-E11.6");
        assert_eq!(r.original_version, "2024");
    }

    #[test]
    fn listed_unmappable_code_is_quarantined() {
        let sys = syn_icd();
        let batch = vec![rec(0, "S-R73", "2024"), rec(1, "S-E11.9", "2024")];
        let out = gate_batch(&batch, &sys, "2025", &lenient()).unwrap();
        assert_eq!(out.quarantined.len(), 1);
        assert_eq!(out.quarantined[0].reason, QuarantineReason::UnmappableCode);
        assert_eq!(out.quarantined[0].original_code, "S-R73");
        assert_eq!(out.reconciled.len(), 1);
    }

    #[test]
    fn unacknowledged_gap_blocks_the_gate() {
        let sys = syn_icd();
        let batch = vec![rec(0, "S-R73", "2024")];
        assert_eq!(
            gate_batch(&batch, &sys, "2025", &PipelineConfig::default()).unwrap_err(),
            GateError::Blocked("2025".into(), "2024".into())
        );
    }

    #[test]
    fn unknown_code_and_version_are_quarantined() {
        let sys = syn_icd();
        let batch = vec![rec(0, "S-NOPE", "2025"), rec(1, "S-E11.9", "2019")];
        let out = gate_batch(&batch, &sys, "2025", &PipelineConfig::default()).unwrap();
        let reasons: Vec<_> = out.quarantined.iter().map(|q| q.reason).collect();
        assert_eq!(
            reasons,
            vec![QuarantineReason::UnknownCode, QuarantineReason::UnvalidatedVersion]
        );
    }

    #[test]
    fn newer_than_target_is_unmappable() {
        let sys = syn_icd();
        let out = gate_batch(&[rec(0, "S-E11.69", "2025")], &sys, "2024", &PipelineConfig::default()).unwrap();
        assert_eq!(out.quarantined[0].reason, QuarantineReason::UnmappableCode);
    }

    #[test]
    fn gate_refuses_unknown_or_unvalidated_target() {
        let sys = CodeSystem::from_json(
            r#"{"system_id":"T","versions":[
              {"label":"a","release_date":"2024-01-01","validated":true},
              {"label":"b","release_date":"2025-01-01","validated":false}],
            "codes":{"a":[{"code":"X","clinical_group":"g","billing_category":"c","description":""}],
                     "b":[{"code":"X","clinical_group":"g","billing_category":"c","description":""}]},
            "transitions":[]}"#,
        )
        .unwrap();
        let cfg = PipelineConfig::default();
        assert_eq!(
            gate_batch(&[], &sys, "zz", &cfg).unwrap_err(),
            GateError::UnknownVersion("zz".into())
        );
        assert_eq!(
            gate_batch(&[], &sys, "b", &cfg).unwrap_err(),
            GateError::Unvalidated("b".into())
        );
    }

    fn forty_code_system(mapped: usize) -> CodeSystem {
        let defs = |prefix: &str| -> String {
            (0..40)
                .map(|i| {
                    format!(
                        r#"{{"code":"{prefix}{i:02}","clinical_group":"g","billing_category":"c","description":""}}"#
                    )
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        let maps = (0..mapped)
            .map(|i| format!(r#"{{"from_code":"A{i:02}","to_code":"B{i:02}"}}"#))
            .collect::<Vec<_>>()
            .join(",");
        CodeSystem::from_json(&format!(
            r#"{{"system_id":"T","versions":[
              {{"label":"v1","release_date":"2024-01-01","validated":true}},
              {{"label":"v2","release_date":"2025-01-01","validated":true}}],
            "codes":{{"v1":[{}],"v2":[{}]}},
            "transitions":[{{"from":"v1","to":"v2","mappings":[{maps}],"unmappable":[]}}]}}"#,
            defs("A"),
            defs("B")
        ))
        .unwrap()
    }

    #[test]
    fn migration_coverage_counts() {
        let observed: BTreeSet<String> = (0..40).map(|i| format!("A{i:02}")).collect();
        let full = validate_migration(&forty_code_system(40), "v1", "v2", &observed, &[]).unwrap();
        assert_eq!(full.mapping_coverage, 1.0);
        assert_eq!(full.verdict, MigrationVerdict::Validated);
        assert_eq!(full.changed_codes.len(), 40);

        let partial = validate_migration(&forty_code_system(38), "v1", "v2", &observed, &[]).unwrap();
        // 38 of 40 observed codes have an image.
        assert!((partial.mapping_coverage - 38.0 / 40.0).abs() < 1e-12);
        assert_eq!(partial.unmappable_codes, vec!["A38".to_string(), "A39".to_string()]);
        assert_eq!(partial.verdict, MigrationVerdict::Blocked);

        let acked = validate_migration(
            &forty_code_system(38),
            "v1",
            "v2",
            &observed,
            &["A38".into(), "A39".into()],
        )
        .unwrap();
        assert_eq!(acked.verdict, MigrationVerdict::Validated);
    }

    #[test]
    fn missing_table_blocks_with_zero_coverage() {
        let sys = CodeSystem::from_json(
            r#"{"system_id":"T","versions":[
              {"label":"a","release_date":"2024-01-01","validated":true},
              {"label":"b","release_date":"2025-01-01","validated":true}],
            "codes":{"a":[{"code":"X","clinical_group":"g","billing_category":"c","description":""}],
                     "b":[{"code":"X","clinical_group":"g","billing_category":"c","description":""}]},
            "transitions":[]}"#,
        )
        .unwrap();
        let observed: BTreeSet<String> = ["X".to_string()].into();
        let report = validate_migration(&sys, "a", "b", &observed, &[]).unwrap();
        assert_eq!(report.mapping_coverage, 0.0);
        assert_eq!(report.verdict, MigrationVerdict::Blocked);
        let gate = VersionGate::new(&sys).with_migration(&report);
        assert!(matches!(gate.gate_batch(&[], "b"), Err(GateError::Blocked(..))));
    }

    #[test]
    fn tables_compose_across_versions() {
        let sys = CodeSystem::from_json(
            r#"{"system_id":"T","versions":[
              {"label":"a","release_date":"2023-01-01","validated":true},
              {"label":"b","release_date":"2024-01-01","validated":true},
              {"label":"c","release_date":"2025-01-01","validated":true}],
            "codes":{"a":[{"code":"X","clinical_group":"g","billing_category":"k","description":""}],
                     "b":[{"code":"Y","clinical_group":"g","billing_category":"k","description":""}],
                     "c":[{"code":"Z","clinical_group":"g","billing_category":"k","description":""}]},
            "transitions":[
              {"from":"a","to":"b","mappings":[{"from_code":"X","to_code":"Y"}],"unmappable":[]},
              {"from":"b","to":"c","mappings":[{"from_code":"Y","to_code":"Z"}],"unmappable":[]}]}"#,
        )
        .unwrap();
        assert_eq!(map_forward(&sys, "X", "a", "c").as_deref(), Some("Z"));
        let mut r = rec(0, "X", "a");
        r.co_codes.clear();
        let out = VersionGate::new(&sys).gate_batch(&[r], "c").unwrap();
        assert_eq!(out.reconciled[0].record.primary_code, "Z");
    }

    #[test]
    fn quarantine_file_round_trips() {
        let sys = syn_icd();
        let out = gate_batch(&[rec(0, "S-R73", "2024")], &sys, "2025", &lenient()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quarantine.jsonl");
        out.write_quarantine(&path).unwrap();
        let back: Vec<Quarantined> = crate::model::read_jsonl(&path).unwrap();
        assert_eq!(back, out.quarantined);
    }

    proptest! {
        #[test]
        fn gate_partitions_its_input(picks in prop::collection::vec((0usize..6, 0usize..4), 0..60)) {
            let sys = syn_icd();
            let codes = ["S-E11.9", "S-E11.6", "S-E11.69", "S-R73", "S-I10", "S-BOGUS"];
            let versions = ["2024", "2025", "1999", "2024"];
            let batch: Vec<_> = picks.iter().enumerate().map(|(i, (c, v))| rec(i, codes[*c], versions[*v])).collect();
            let out = gate_batch(&batch, &sys, "2025", &lenient()).unwrap();
            prop_assert_eq!(out.len(), batch.len());
            let mut ids: Vec<&str> = out.accepted.iter().map(|r| r.record_id.as_str())
                .chain(out.reconciled.iter().map(|r| r.record.record_id.as_str()))
                .chain(out.quarantined.iter().map(|r| r.record.record_id.as_str()))
                .collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), batch.len());
            for r in &out.reconciled {
                let image = map_forward(&sys, &r.original_code, &r.original_version, "2025");
                prop_assert_eq!(image.as_deref(), Some(r.record.primary_code.as_str()));
            }
        }
    }
}
