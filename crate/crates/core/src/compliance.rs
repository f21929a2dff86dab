//! Regulatory compliance adapters.
//!
//! An adapter is a versioned, jurisdiction-tagged list of rules loaded from
//! JSON. Each rule pairs a predicate over the operation's context with a
//! verdict and the provision it rests on. The first matching rule decides,
//! and the final rule must match everything. Several adapters compose by
//! keeping the most restrictive verdict, and every adapter leaves an audit
//! entry whatever it decided.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ComplianceError {
    #[error("adapter file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("adapter `{adapter}`: {detail}")]
    Invalid { adapter: String, detail: String },
    #[error("no adapters to compose")]
    NoAdapters,
    #[error("unknown operation `{0}` (expected ingest, train, deploy, export or predict)")]
    UnknownOp(String),
    #[error("context entry `{0}` is not of the form key=value")]
    BadContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Ingest,
    Train,
    Deploy,
    Export,
    Predict,
}

impl std::str::FromStr for OpKind {
    type Err = ComplianceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ingest" => Self::Ingest,
            "train" => Self::Train,
            "deploy" => Self::Deploy,
            "export" => Self::Export,
            "predict" => Self::Predict,
            _ => return Err(ComplianceError::UnknownOp(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContextValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl ContextValue {
    /// Reads a command-line value: `true`/`false`, a number, or text.
    pub fn parse(s: &str) -> Self {
        match s {
            "true" => Self::Bool(true),
            "false" => Self::Bool(false),
            _ => s
                .parse::<f64>()
                .map_or_else(|_| Self::Text(s.to_string()), Self::Number),
        }
    }

    fn as_number(&self) -> Option<f64> {
        match self {
            Self::Number(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for ContextValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bool(b) => write!(f, "{b}"),
            Self::Number(n) => write!(f, "{n}"),
            Self::Text(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataOperation {
    pub op_kind: OpKind,
    pub context: BTreeMap<String, ContextValue>,
    /// Stamped into audit entries; supplied by the caller so evaluation
    /// stays reproducible.
    pub timestamp: DateTime<Utc>,
}

impl DataOperation {
    pub fn new(op_kind: OpKind, timestamp: DateTime<Utc>) -> Self {
        Self {
            op_kind,
            context: BTreeMap::new(),
            timestamp,
        }
    }

    pub fn with(mut self, key: &str, value: ContextValue) -> Self {
        self.context.insert(key.to_string(), value);
        self
    }

    /// Builds the context from `key=value` strings.
    pub fn with_pairs<'a>(mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<Self, ComplianceError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| ComplianceError::BadContext(p.to_string()))?;
            self.context.insert(k.to_string(), ContextValue::parse(v));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyValue {
    pub key: String,
    pub value: ContextValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBound {
    pub key: String,
    pub value: f64,
}

/// Rule condition language. In JSON: `"always"`, `{"op_is": ["Deploy"]}`,
/// `{"eq": {"key": k, "value": v}}`, `{"ne": ...}`, `{"gt"|"ge"|"lt"|"le":
/// {"key": k, "value": number}}`, `{"present": k}`, `{"absent": k}`,
/// `{"all": [..]}`, `{"any": [..]}`, `{"not": p}`.
///
/// A missing key makes `eq` and the numeric comparisons false and `ne`
/// true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Always,
    OpIs(Vec<OpKind>),
    Eq(KeyValue),
    Ne(KeyValue),
    Gt(KeyBound),
    Ge(KeyBound),
    Lt(KeyBound),
    Le(KeyBound),
    Present(String),
    Absent(String),
    All(Vec<Predicate>),
    Any(Vec<Predicate>),
    Not(Box<Predicate>),
}

impl Predicate {
    pub fn holds(&self, op: &DataOperation) -> bool {
        let ctx = &op.context;
        let num = |k: &KeyBound, f: fn(f64, f64) -> bool| {
            ctx.get(&k.key)
                .and_then(ContextValue::as_number)
                .is_some_and(|x| f(x, k.value))
        };
        match self {
            Self::Always => true,
            Self::OpIs(kinds) => kinds.contains(&op.op_kind),
            Self::Eq(kv) => ctx.get(&kv.key) == Some(&kv.value),
            Self::Ne(kv) => ctx.get(&kv.key) != Some(&kv.value),
            Self::Gt(k) => num(k, |x, y| x > y),
            Self::Ge(k) => num(k, |x, y| x >= y),
            Self::Lt(k) => num(k, |x, y| x < y),
            Self::Le(k) => num(k, |x, y| x <= y),
            Self::Present(k) => ctx.contains_key(k),
            Self::Absent(k) => !ctx.contains_key(k),
            Self::All(ps) => ps.iter().all(|p| p.holds(op)),
            Self::Any(ps) => ps.iter().any(|p| p.holds(op)),
            Self::Not(p) => !p.holds(op),
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            Self::OpIs(k) if k.is_empty() => Err("op_is needs at least one operation".into()),
            Self::All(ps) | Self::Any(ps) if ps.is_empty() => Err("all/any needs at least one predicate".into()),
            Self::All(ps) | Self::Any(ps) => ps.iter().try_for_each(Predicate::check),
            Self::Not(p) => p.check(),
            Self::Eq(kv) | Self::Ne(kv) if kv.key.is_empty() => Err("empty context key".into()),
            Self::Gt(k) | Self::Ge(k) | Self::Lt(k) | Self::Le(k) if k.key.is_empty() || !k.value.is_finite() => {
                Err(format!("bad numeric comparison on `{}`", k.key))
            }
            Self::Present(k) | Self::Absent(k) if k.is_empty() => Err("empty context key".into()),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |ps: &[Predicate], sep: &str| ps.iter().map(|p| format!("({p})")).collect::<Vec<_>>().join(sep);
        match self {
            Self::Always => write!(f, "always"),
            Self::OpIs(k) => write!(f, "op in {k:?}"),
            Self::Eq(kv) => write!(f, "{} == {}", kv.key, kv.value),
            Self::Ne(kv) => write!(f, "{} != {}", kv.key, kv.value),
            Self::Gt(k) => write!(f, "{} > {}", k.key, k.value),
            Self::Ge(k) => write!(f, "{} >= {}", k.key, k.value),
            Self::Lt(k) => write!(f, "{} < {}", k.key, k.value),
            Self::Le(k) => write!(f, "{} <= {}", k.key, k.value),
            Self::Present(k) => write!(f, "{k} present"),
            Self::Absent(k) => write!(f, "{k} absent"),
            Self::All(ps) => write!(f, "{}", join(ps, " and ")),
            Self::Any(ps) => write!(f, "{}", join(ps, " or ")),
            Self::Not(p) => write!(f, "not ({p})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    Permit,
    PermitWithConditions,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict")]
pub enum Verdict {
    Permit,
    PermitWithConditions { conditions: Vec<String> },
    Deny { reason: String },
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Self::Permit => VerdictKind::Permit,
            Self::PermitWithConditions { .. } => VerdictKind::PermitWithConditions,
            Self::Deny { .. } => VerdictKind::Deny,
        }
    }

    /// 0 for Permit, 1 for PermitWithConditions, 2 for Deny.
    pub fn restrictiveness(&self) -> u8 {
        match self.kind() {
            VerdictKind::Permit => 0,
            VerdictKind::PermitWithConditions => 1,
            VerdictKind::Deny => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub when: Predicate,
    pub verdict: VerdictKind,
    /// Templates; `{key}` is replaced by the context value.
    #[serde(default)]
    pub conditions: Vec<String>,
    #[serde(default)]
    pub reason: String,
    pub provision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterRuleSet {
    pub adapter_id: String,
    pub regulation_id: String,
    pub jurisdiction: String,
    pub regulation_version: String,
    /// Demonstration rule sets carry no legal weight.
    #[serde(default)]
    pub demo: bool,
    /// Values used for `{key}` templates when the context lacks the key.
    #[serde(default)]
    pub context_defaults: BTreeMap<String, ContextValue>,
    pub rules: Vec<Rule>,
}

impl AdapterRuleSet {
    pub fn from_json(text: &str) -> Result<Self, ComplianceError> {
        let a: Self = serde_json::from_str(text)?;
        a.check()?;
        Ok(a)
    }

    fn check(&self) -> Result<(), ComplianceError> {
        let bad = |detail: String| {
            Err(ComplianceError::Invalid {
                adapter: self.adapter_id.clone(),
                detail,
            })
        };
        for (name, v) in [
            ("adapter_id", &self.adapter_id),
            ("regulation_id", &self.regulation_id),
            ("jurisdiction", &self.jurisdiction),
            ("regulation_version", &self.regulation_version),
        ] {
            if v.trim().is_empty() {
                return bad(format!("{name} is empty"));
            }
        }
        match self.rules.last() {
            None => return bad("no rules".into()),
            Some(r) if r.when != Predicate::Always => return bad("last rule must be `always`".into()),
            _ => {}
        }
        for (i, r) in self.rules.iter().enumerate() {
            if let Err(e) = r.when.check() {
                return bad(format!("rule {}: {e}", i + 1));
            }
            if r.provision.trim().is_empty() {
                return bad(format!("rule {}: provision is empty", i + 1));
            }
            match r.verdict {
                VerdictKind::PermitWithConditions if r.conditions.is_empty() => {
                    return bad(format!("rule {}: PermitWithConditions without conditions", i + 1))
                }
                VerdictKind::Deny if r.reason.trim().is_empty() => {
                    return bad(format!("rule {}: Deny without a reason", i + 1))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn fill(&self, template: &str, op: &DataOperation) -> String {
        let mut out = String::new();
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else { break };
            let key = &rest[open + 1..open + close];
            out.push_str(&rest[..open]);
            match op.context.get(key).or_else(|| self.context_defaults.get(key)) {
                Some(v) => out.push_str(&v.to_string()),
                None => out.push_str(&rest[open..=open + close]),
            }
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        out
    }
}

pub fn load_adapter(path: &Path) -> Result<AdapterRuleSet, ComplianceError> {
    AdapterRuleSet::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub regulation_id: String,
    pub regulation_version: String,
    pub provision: String,
    pub reasoning: String,
    pub adapter_id: String,
    pub timestamp: DateTime<Utc>,
    pub verdict: Verdict,
}

/// First matching rule wins.
pub fn evaluate(adapter: &AdapterRuleSet, op: &DataOperation) -> (Verdict, AuditEntry) {
    let (i, rule) = adapter
        .rules
        .iter()
        .enumerate()
        .find(|(_, r)| r.when.holds(op))
        .expect("rule sets end with an `always` rule");
    let verdict = match rule.verdict {
        VerdictKind::Permit => Verdict::Permit,
        VerdictKind::PermitWithConditions => Verdict::PermitWithConditions {
            conditions: rule.conditions.iter().map(|c| adapter.fill(c, op)).collect(),
        },
        VerdictKind::Deny => Verdict::Deny {
            reason: adapter.fill(&rule.reason, op),
        },
    };
    let entry = AuditEntry {
        regulation_id: adapter.regulation_id.clone(),
        regulation_version: adapter.regulation_version.clone(),
        provision: rule.provision.clone(),
        reasoning: format!(
            "{:?} operation matched rule {} of {} [{}] -> {:?}",
            op.op_kind,
            i + 1,
            adapter.rules.len(),
            rule.when,
            rule.verdict
        ),
        adapter_id: adapter.adapter_id.clone(),
        timestamp: op.timestamp,
        verdict: verdict.clone(),
    };
    (verdict, entry)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub verdict: Verdict,
    pub audit: Vec<AuditEntry>,
    pub notes: Vec<String>,
}

/// Merges already-computed adapter verdicts, most restrictive first.
pub fn combine(verdicts: &[(String, Verdict)]) -> (Verdict, Vec<String>) {
    let mut notes = Vec::new();
    let denials: Vec<&(String, Verdict)> = verdicts.iter().filter(|(_, v)| v.kind() == VerdictKind::Deny).collect();
    if let Some((_, Verdict::Deny { reason })) = denials.first() {
        if denials.len() > 1 {
            let ids: Vec<&str> = denials.iter().map(|(id, _)| id.as_str()).collect();
            notes.push(format!("denied by {} adapters: {}", denials.len(), ids.join(", ")));
        }
        return (Verdict::Deny { reason: reason.clone() }, notes);
    }
    let mut seen = BTreeSet::new();
    let mut conditions = Vec::new();
    let mut contributors = Vec::new();
    for (id, v) in verdicts {
        if let Verdict::PermitWithConditions { conditions: cs } = v {
            contributors.push(id.as_str());
            for c in cs {
                if seen.insert(c.clone()) {
                    conditions.push(c.clone());
                }
            }
        }
    }
    if conditions.is_empty() {
        return (Verdict::Permit, notes);
    }
    if contributors.len() > 1 {
        notes.push(format!(
            "conditions from {} concatenated; any conflict between them is left for review",
            contributors.join(", ")
        ));
    }
    (Verdict::PermitWithConditions { conditions }, notes)
}

/// Runs every adapter (a denial does not stop the rest) and keeps the
/// most restrictive verdict.
pub fn compose(adapters: &[AdapterRuleSet], op: &DataOperation) -> Result<Composition, ComplianceError> {
    if adapters.is_empty() {
        return Err(ComplianceError::NoAdapters);
    }
    let mut audit = Vec::with_capacity(adapters.len());
    let mut verdicts = Vec::with_capacity(adapters.len());
    for a in adapters {
        let (v, e) = evaluate(a, op);
        verdicts.push((a.adapter_id.clone(), v));
        audit.push(e);
    }
    let (verdict, notes) = combine(&verdicts);
    Ok(Composition { verdict, audit, notes })
}

/// The three bundled demonstration adapters.
pub fn demo_adapters() -> Vec<AdapterRuleSet> {
    crate::bundled::demo_adapters()
        .iter()
        .map(|t| AdapterRuleSet::from_json(t).expect("bundled adapters are valid"))
        .collect()
}
