//! Feedback-loop circuit breaker.
//!
//! Tracks what share of a training cohort came from AI-influenced
//! documentation and refuses retraining once that share passes the
//! threshold. A small per-code risk model stands in for the production
//! model so the loop (predict, document, retrain) can be exercised end to
//! end.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodedRecord, InfluenceTag, Layer, PipelineConfig};

#[derive(Debug, Error, PartialEq)]
pub enum BreakerError {
    #[error("cannot retrain on an empty cohort")]
    EmptyCohort,
    #[error("record {0} has no {1} layer code")]
    MissingLayer(String, Layer),
    #[error("fraction {0} outside [0, 1]")]
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRatio {
    pub period: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceStats {
    pub cohort_id: String,
    pub period: String,
    pub ratio: f64,
    pub tagged_count: usize,
    pub total_count: usize,
    /// Ordered by period, current period included.
    pub history: Vec<PeriodRatio>,
}

/// Ratio of AI-influenced records in `cohort`, with `period` recorded in
/// the returned history (replacing an earlier entry for the same period).
pub fn compute_stats(cohort_id: &str, period: &str, cohort: &[CodedRecord], history: &[PeriodRatio]) -> InfluenceStats {
    let tagged = cohort.iter().filter(|r| r.is_ai_influenced()).count();
    let ratio = if cohort.is_empty() {
        0.0
    } else {
        tagged as f64 / cohort.len() as f64
    };
    let mut h: Vec<PeriodRatio> = history.iter().filter(|p| p.period != period).cloned().collect();
    h.push(PeriodRatio {
        period: period.to_string(),
        ratio,
    });
    h.sort_by(|a, b| a.period.cmp(&b.period));
    InfluenceStats {
        cohort_id: cohort_id.to_string(),
        period: period.to_string(),
        ratio,
        tagged_count: tagged,
        total_count: cohort.len(),
        history: h,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BreakerStateKind {
    Closed,
    Warning,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakerState {
    pub state: BreakerStateKind,
    pub reason: String,
    pub threshold_used: f64,
}

/// The next-period ratio implied by the last two deltas, when the last
/// three periods rise strictly.
fn projected_ratio(history: &[PeriodRatio]) -> Option<f64> {
    let [.., a, b, c] = history else {
        return None;
    };
    (a.ratio < b.ratio && b.ratio < c.ratio).then(|| c.ratio + ((b.ratio - a.ratio) + (c.ratio - b.ratio)) / 2.0)
}

/// Open when the ratio strictly exceeds the threshold. Below that, Warning
/// when the last three periods rise strictly and their average step would
/// carry the next period past the threshold.
pub fn evaluate(stats: &InfluenceStats, cfg: &PipelineConfig) -> BreakerState {
    let t = cfg.breaker_threshold;
    if stats.ratio > t {
        return BreakerState {
            state: BreakerStateKind::Open,
            reason: format!(
                "AI influence ratio {:.4} exceeds threshold {t}; retraining paused",
                stats.ratio
            ),
            threshold_used: t,
        };
    }
    if let Some(next) = projected_ratio(&stats.history).filter(|n| *n > t) {
        let trail: Vec<String> = stats
            .history
            .iter()
            .rev()
            .take(3)
            .rev()
            .map(|p| format!("{:.2}", p.ratio))
            .collect();
        return BreakerState {
            state: BreakerStateKind::Warning,
            reason: format!(
                "ratio rose over three periods ({}); projected {next:.2} may breach the threshold {t} next cycle",
                trail.join(" -> ")
            ),
            threshold_used: t,
        };
    }
    BreakerState {
        state: BreakerStateKind::Closed,
        reason: format!("AI influence ratio {:.4} within threshold {t}", stats.ratio),
        threshold_used: t,
    }
}

/// Per-feature outcome rates. A record's score is the mean weight of the
/// features it carries, or the base rate when it carries none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRiskModel {
    pub model_version: String,
    pub weights: BTreeMap<String, f64>,
    pub base_rate: f64,
    pub training_cohort_id: String,
    /// Codes that count as the outcome; never used as features.
    pub outcome_codes: BTreeSet<String>,
}

fn version_string(n: u32) -> String {
    format!("risk-v{n:04}")
}

impl ToyRiskModel {
    pub fn untrained(outcome_codes: BTreeSet<String>) -> Self {
        Self {
            model_version: version_string(0),
            weights: BTreeMap::new(),
            base_rate: 0.0,
            training_cohort_id: String::new(),
            outcome_codes,
        }
    }

    pub fn version_number(&self) -> u32 {
        self.model_version
            .strip_prefix("risk-v")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }

    fn features_of<'a>(&self, r: &'a CodedRecord, layer: Layer) -> Result<BTreeSet<&'a str>, BreakerError> {
        let main = r
            .code(layer)
            .ok_or_else(|| BreakerError::MissingLayer(r.record_id.clone(), layer))?;
        Ok(std::iter::once(main)
            .chain(r.co_codes.iter().map(String::as_str))
            .filter(|c| !self.outcome_codes.contains(*c))
            .collect())
    }

    fn outcome(&self, r: &CodedRecord) -> bool {
        r.co_codes.iter().any(|c| self.outcome_codes.contains(c))
    }

    pub fn score(&self, r: &CodedRecord, layer: Layer) -> Result<f64, BreakerError> {
        let ws: Vec<f64> = self
            .features_of(r, layer)?
            .into_iter()
            .filter_map(|f| self.weights.get(f).copied())
            .collect();
        Ok(if ws.is_empty() {
            self.base_rate
        } else {
            ws.iter().sum::<f64>() / ws.len() as f64
        })
    }

    /// Fits a successor model on `cohort`. With `features` given, only
    /// those codes receive weights.
    fn fit(
        &self,
        cohort: &[CodedRecord],
        cohort_id: &str,
        features: Option<&BTreeSet<String>>,
        layer: Layer,
    ) -> Result<Self, BreakerError> {
        let mut seen: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut positives = 0usize;
        for r in cohort {
            let y = self.outcome(r);
            positives += usize::from(y);
            for f in self.features_of(r, layer)? {
                if features.is_none_or(|s| s.contains(f)) {
                    let e = seen.entry(f).or_default();
                    e.0 += 1;
                    e.1 += usize::from(y);
                }
            }
        }
        Ok(Self {
            model_version: version_string(self.version_number() + 1),
            weights: seen
                .into_iter()
                .map(|(f, (n, k))| (f.to_string(), k as f64 / n as f64))
                .collect(),
            base_rate: positives as f64 / cohort.len().max(1) as f64,
            training_cohort_id: cohort_id.to_string(),
            outcome_codes: self.outcome_codes.clone(),
        })
    }
}

/// Audit packet emitted instead of a model when the breaker is open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refusal {
    pub cohort_id: String,
    pub period: String,
    pub model_version: String,
    pub stats: InfluenceStats,
    pub state: BreakerState,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetrainOutcome {
    Retrained(ToyRiskModel),
    Refused(Refusal),
}

/// Retrains unless the breaker is open. `features` restricts the model to
/// an expanded or reduced feature set (for example active codes plus
/// reactivated dormant ones).
pub fn retrain_gate(
    state: &BreakerState,
    stats: &InfluenceStats,
    cohort: &[CodedRecord],
    model: &ToyRiskModel,
    features: Option<&BTreeSet<String>>,
    layer: Layer,
) -> Result<RetrainOutcome, BreakerError> {
    if state.state == BreakerStateKind::Open {
        return Ok(RetrainOutcome::Refused(Refusal {
            cohort_id: stats.cohort_id.clone(),
            period: stats.period.clone(),
            model_version: model.model_version.clone(),
            stats: stats.clone(),
            state: state.clone(),
            note: "retraining refused; cohort held for human audit of AI-influenced records".into(),
        }));
    }
    if cohort.is_empty() {
        return Err(BreakerError::EmptyCohort);
    }
    Ok(RetrainOutcome::Retrained(model.fit(
        cohort,
        &stats.cohort_id,
        features,
        layer,
    )?))
}

/// Two-parameter clinician response: the share of predictions accepted
/// into documentation, and the share of accepted ones the clinician edits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceModel {
    pub accept_fraction: f64,
    pub modify_fraction: f64,
}

/// Applies predictions on `encounters` to documentation. Exactly
/// `round(accept * n)` encounters (chosen by `seed`) yield a new tagged
/// record; exactly `round(modify * accepted)` of those are marked as
/// clinician-modified.
pub fn tag_outputs(
    encounters: &[CodedRecord],
    model: &ToyRiskModel,
    acceptance: AcceptanceModel,
    seed: u64,
    layer: Layer,
) -> Result<Vec<CodedRecord>, BreakerError> {
    for f in [acceptance.accept_fraction, acceptance.modify_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(BreakerError::Fraction(f));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..encounters.len()).collect();
    idx.shuffle(&mut rng);
    let accepted = (acceptance.accept_fraction * encounters.len() as f64).round() as usize;
    let mut chosen = idx[..accepted].to_vec();
    let modified = (acceptance.modify_fraction * accepted as f64).round() as usize;
    let modified_set: BTreeSet<usize> = chosen.iter().take(modified).copied().collect();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| {
            let src = &encounters[i];
            let confidence = model.score(src, layer)?.clamp(0.0, 1.0);
            let mut out = src.clone();
            out.record_id = format!("{}-ai", src.record_id);
            out.fidelity = None;
            out.influence_tag = Some(
                InfluenceTag::new(model.model_version.clone(), confidence, modified_set.contains(&i))
                    .expect("confidence clamped to [0, 1]"),
            );
            Ok(out)
        })
        .collect()
}

pub fn dashboard_csv(rows: &[(InfluenceStats, BreakerState)]) -> String {
    let mut out = String::from("period,cohort,ratio,state\n");
    for (s, b) in rows {
        out.push_str(&format!("{},{},{:.6},{:?}\n", s.period, s.cohort_id, s.ratio, b.state));
    }
    out
}

/// Breaker state for the same stats at each candidate threshold. Purely
/// descriptive: it shows where the state changes, not which threshold is
/// right.
pub fn threshold_sweep(stats: &InfluenceStats, thresholds: &[f64], cfg: &PipelineConfig) -> Vec<BreakerState> {
    thresholds
        .iter()
        .map(|&t| {
            let cfg = PipelineConfig {
                breaker_threshold: t,
                ..cfg.clone()
            };
            evaluate(stats, &cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgeBand, Sex};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn rec(id: usize, code: &str, co: &[&str], tagged: bool) -> CodedRecord {
        CodedRecord {
            record_id: format!("r{id:05}"),
            patient_age_band: AgeBand::A60to69,
            patient_sex: Sex::Male,
            institution_id: "P01".into(),
            encounter_time: Utc.with_ymd_and_hms(2025, 4, 1, 0, 0, 0).unwrap(),
            primary_code: code.into(),
            co_codes: co.iter().map(|s| s.to_string()).collect(),
            version_tag: "2025".into(),
            influence_tag: tagged.then(|| InfluenceTag::new("risk-v0001", 0.7, false).unwrap()),
            fidelity: None,
            clinical_code: None,
        }
    }

    fn cohort(n: usize, tagged: usize) -> Vec<CodedRecord> {
        (0..n)
            .map(|i| rec(i, "S-E11.9", &["L-HBA1C-MOD"], i < tagged))
            .collect()
    }

    fn hist(values: &[f64]) -> Vec<PeriodRatio> {
        values
            .iter()
            .enumerate()
            .map(|(i, r)| PeriodRatio {
                period: format!("2025Q{}", i + 1),
                ratio: *r,
            })
            .collect()
    }

    fn stats_with(values: &[f64]) -> InfluenceStats {
        InfluenceStats {
            cohort_id: "c".into(),
            period: "x".into(),
            ratio: *values.last().unwrap(),
            tagged_count: 0,
            total_count: 0,
            history: hist(values),
        }
    }

    #[test]
    fn ratio_counts_tagged_records() {
        let s = compute_stats("c", "2025Q3", &cohort(50, 6), &[]);
        assert_eq!(s.ratio, 0.12);
        assert_eq!((s.tagged_count, s.total_count), (6, 50));
        assert_eq!(s.history.len(), 1);
        let zero = compute_stats("c", "2025Q3", &cohort(50, 0), &[]);
        assert_eq!(zero.ratio, 0.0);
        assert_eq!(
            evaluate(&zero, &PipelineConfig::default()).state,
            BreakerStateKind::Closed
        );
        let empty = compute_stats("c", "2025Q3", &[], &[]);
        assert_eq!((empty.ratio, empty.total_count), (0.0, 0));
    }

    #[test]
    fn history_is_kept_in_period_order() {
        let s = compute_stats("c", "2025Q2", &cohort(10, 1), &hist(&[0.04, 0.5, 0.9]));
        let periods: Vec<&str> = s.history.iter().map(|p| p.period.as_str()).collect();
        assert_eq!(periods, vec!["2025Q1", "2025Q2", "2025Q3"]);
        assert_eq!(s.history[1].ratio, 0.1);
    }

    #[test]
    fn rising_history_warns() {
        let st = evaluate(&stats_with(&[0.04, 0.08, 0.12]), &PipelineConfig::default());
        assert_eq!(st.state, BreakerStateKind::Warning);
        assert!(st.reason.contains("may breach the threshold"));
    }

    #[test]
    fn flat_history_stays_closed() {
        let st = evaluate(&stats_with(&[0.12, 0.12, 0.12]), &PipelineConfig::default());
        assert_eq!(st.state, BreakerStateKind::Closed);
        // Rising but too slowly to cross next period.
        let slow = evaluate(&stats_with(&[0.10, 0.11, 0.12]), &PipelineConfig::default());
        assert_eq!(slow.state, BreakerStateKind::Closed);
        // Two periods are not a trend.
        let short = evaluate(&stats_with(&[0.06, 0.12]), &PipelineConfig::default());
        assert_eq!(short.state, BreakerStateKind::Closed);
    }

    #[test]
    fn threshold_is_strict() {
        let cfg = PipelineConfig::default();
        assert_ne!(evaluate(&stats_with(&[0.15]), &cfg).state, BreakerStateKind::Open);
        assert_eq!(evaluate(&stats_with(&[0.150001]), &cfg).state, BreakerStateKind::Open);
        assert_eq!(evaluate(&stats_with(&[0.16]), &cfg).state, BreakerStateKind::Open);
    }

    fn outcome() -> BTreeSet<String> {
        ["C-NEPHRO".to_string()].into()
    }

    #[test]
    fn closed_state_retrains_with_a_newer_version() {
        let c = vec![
            rec(0, "S-E11.69", &["C-NEPHRO", "M-SGLT2"], false),
            rec(1, "S-E11.69", &["M-SGLT2"], false),
            rec(2, "S-E11.9", &["M-METFORMIN"], false),
            rec(3, "S-E11.9", &["M-METFORMIN"], false),
        ];
        let stats = compute_stats("q1", "2025Q1", &c, &[]);
        let st = evaluate(&stats, &PipelineConfig::default());
        let m0 = ToyRiskModel::untrained(outcome());
        let RetrainOutcome::Retrained(m1) = retrain_gate(&st, &stats, &c, &m0, None, Layer::Administrative).unwrap()
        else {
            panic!("expected a model");
        };
        assert!(m1.model_version > m0.model_version);
        assert_eq!(m1.training_cohort_id, "q1");
        // Hand count: S-E11.69 appears twice, once with the outcome.
        assert_eq!(m1.weights["S-E11.69"], 0.5);
        assert_eq!(m1.weights["S-E11.9"], 0.0);
        assert!(!m1.weights.contains_key("C-NEPHRO"));
        assert_eq!(m1.base_rate, 0.25);
        let RetrainOutcome::Retrained(m2) = retrain_gate(&st, &stats, &c, &m1, None, Layer::Administrative).unwrap()
        else {
            panic!("expected a model");
        };
        assert!(m2.model_version > m1.model_version);
        let only: BTreeSet<String> = ["M-SGLT2".to_string()].into();
        let RetrainOutcome::Retrained(m3) =
            retrain_gate(&st, &stats, &c, &m2, Some(&only), Layer::Administrative).unwrap()
        else {
            panic!("expected a model");
        };
        assert_eq!(m3.weights.keys().collect::<Vec<_>>(), vec!["M-SGLT2"]);
    }

    #[test]
    fn open_state_refuses_and_keeps_the_model() {
        let c = cohort(100, 20);
        let stats = compute_stats("q4", "2025Q4", &c, &[]);
        let st = evaluate(&stats, &PipelineConfig::default());
        assert_eq!(st.state, BreakerStateKind::Open);
        let m = ToyRiskModel::untrained(outcome());
        let RetrainOutcome::Refused(r) = retrain_gate(&st, &stats, &c, &m, None, Layer::Administrative).unwrap() else {
            panic!("expected a refusal");
        };
        assert_eq!(r.model_version, m.model_version);
        assert_eq!(r.stats.tagged_count, 20);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"Open\""));
    }

    #[test]
    fn empty_cohort_cannot_be_trained_on() {
        let stats = compute_stats("q", "p", &[], &[]);
        let st = evaluate(&stats, &PipelineConfig::default());
        assert_eq!(
            retrain_gate(
                &st,
                &stats,
                &[],
                &ToyRiskModel::untrained(outcome()),
                None,
                Layer::Administrative
            )
            .unwrap_err(),
            BreakerError::EmptyCohort
        );
    }

    #[test]
    fn tagging_fractions() {
        let enc = cohort(1000, 0);
        let m = ToyRiskModel {
            model_version: "risk-v0007".into(),
            ..ToyRiskModel::untrained(outcome())
        };
        let none = tag_outputs(
            &enc,
            &m,
            AcceptanceModel {
                accept_fraction: 0.0,
                modify_fraction: 0.5,
            },
            1,
            Layer::Administrative,
        )
        .unwrap();
        assert!(none.is_empty());
        let all = tag_outputs(
            &enc,
            &m,
            AcceptanceModel {
                accept_fraction: 1.0,
                modify_fraction: 0.25,
            },
            1,
            Layer::Administrative,
        )
        .unwrap();
        assert_eq!(all.len(), 1000);
        let modified = all
            .iter()
            .filter(|r| r.influence_tag.as_ref().unwrap().clinician_modified())
            .count();
        assert!((modified as f64 / 1000.0 - 0.25).abs() <= 0.02);
        assert!(all
            .iter()
            .all(|r| r.influence_tag.as_ref().unwrap().model_version() == "risk-v0007"));
        let again = tag_outputs(
            &enc,
            &m,
            AcceptanceModel {
                accept_fraction: 1.0,
                modify_fraction: 0.25,
            },
            1,
            Layer::Administrative,
        )
        .unwrap();
        assert_eq!(all, again);
    }

    #[test]
    fn dashboard_rows() {
        let s = compute_stats("cohort-1", "2025Q3", &cohort(50, 6), &hist(&[0.04, 0.08]));
        let b = evaluate(&s, &PipelineConfig::default());
        let csv = dashboard_csv(&[(s, b)]);
        assert_eq!(csv, "period,cohort,ratio,state\n2025Q3,cohort-1,0.120000,Warning\n");
    }

    proptest! {
        #[test]
        fn open_never_retrains(ratio in 0.0f64..1.0, threshold in 0.01f64..0.99, tagged in 0usize..50) {
            let cfg = PipelineConfig { breaker_threshold: threshold, ..PipelineConfig::default() };
            let c = cohort(50, tagged);
            let mut stats = compute_stats("c", "p", &c, &[]);
            stats.ratio = ratio;
            let st = evaluate(&stats, &cfg);
            prop_assert_eq!(st.state == BreakerStateKind::Open, ratio > threshold);
            let out = retrain_gate(&st, &stats, &c, &ToyRiskModel::untrained(outcome()), None, Layer::Administrative).unwrap();
            prop_assert_eq!(matches!(out, RetrainOutcome::Refused(_)), st.state == BreakerStateKind::Open);
        }

        #[test]
        fn adding_tagged_records_never_lowers_the_ratio(n in 1usize..200, tagged in 0usize..200, extra in 0usize..50) {
            let tagged = tagged.min(n);
            let c = cohort(n, tagged);
            let before = compute_stats("c", "p", &c, &[]).ratio;
            let mut grown = c.clone();
            grown.extend((0..extra).map(|i| rec(10_000 + i, "S-E11.9", &[], true)));
            prop_assert!(compute_stats("c", "p", &grown, &[]).ratio >= before);
        }
    }
    #[test]
    fn sweep_moves_from_open_to_closed_as_the_threshold_rises() {
        let history: Vec<PeriodRatio> = [("a", 0.04), ("b", 0.08), ("c", 0.12)]
            .iter()
            .map(|(p, r)| PeriodRatio {
                period: p.to_string(),
                ratio: *r,
            })
            .collect();
        let stats = InfluenceStats {
            cohort_id: "c".into(),
            period: "c".into(),
            ratio: 0.12,
            tagged_count: 12,
            total_count: 100,
            history,
        };
        let kinds: Vec<BreakerStateKind> =
            threshold_sweep(&stats, &[0.10, 0.12, 0.15, 0.20], &PipelineConfig::default())
                .into_iter()
                .map(|b| b.state)
                .collect();
        assert_eq!(
            kinds,
            [
                BreakerStateKind::Open,
                BreakerStateKind::Warning,
                BreakerStateKind::Warning,
                BreakerStateKind::Closed
            ]
        );
    }
}
