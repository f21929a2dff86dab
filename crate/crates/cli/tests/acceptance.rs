//! Acceptance criteria A1 to A8. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.
//!
//! Walkthrough checks re-read the run directory written by the CLI with
//! untyped JSON, so they do not go through the report structs the harness
//! uses for its own assertions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ontopipe");
const SEED: &str = "42";

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_default()).unwrap_or(Value::Null)
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap_or(Value::Null))
        .collect()
}

/// Collects failed sub-checks so a criterion reports all of them.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn verdict(self) -> Verdict {
        if self.failures.is_empty() {
            Verdict::new(true, self.notes.join("; "))
        } else {
            Verdict::fail(self.failures.join("; "))
        }
    }
}

// ---------------------------------------------------------------------------
// A1
// ---------------------------------------------------------------------------

fn a1(run_dir: &Path, elapsed: Duration, out: &Output) -> Verdict {
    let mut c = Checks::default();
    c.check(
        out.status.code() == Some(0),
        format!("exit status {:?}", out.status.code()),
    );
    c.check(
        elapsed < Duration::from_secs(60),
        format!("{:.1}s", elapsed.as_secs_f64()),
    );

    let q1 = run_dir.join("q1");
    let input = jsonl(&q1.join("input.jsonl")).len();
    let reconciled = jsonl(&q1.join("reconciled.jsonl")).len();
    c.check(
        input == 50_000 && reconciled == 3200,
        format!("reconciled {reconciled} of {input}"),
    );

    let store = json(&q1.join("dormant_store.json"));
    let e13 = store
        .as_array()
        .and_then(|a| a.iter().find(|e| e["code"] == "S-E13"))
        .cloned()
        .unwrap_or(Value::Null);
    let count = e13["representation"]["count"].as_u64();
    let kinds: Vec<&str> = e13["activation_conditions"]
        .as_array()
        .map(|a| a.iter().filter_map(|c| c["kind"].as_str()).collect())
        .unwrap_or_default();
    c.check(
        count == Some(47) && kinds == ["PrevalenceExceeds", "DomainTransferRequest"],
        format!("dormant S-E13 count {count:?} conditions {kinds:?}"),
    );

    let breaker = json(&run_dir.join("q3").join("breaker.json"));
    let ratio = breaker["stats"]["ratio"].as_f64();
    let history: Vec<f64> = breaker["stats"]["history"]
        .as_array()
        .map(|h| h.iter().filter_map(|p| p["ratio"].as_f64()).collect())
        .unwrap_or_default();
    let state = breaker["state"]["state"].as_str();
    c.check(
        ratio == Some(0.12) && history == [0.04, 0.08, 0.12] && state == Some("Warning"),
        format!("q3 ratio {ratio:?} history {history:?} state {state:?}"),
    );

    let mut type_b = None;
    for q in 1..=4 {
        let alerts = json(&run_dir.join(format!("q{q}")).join("alerts.json"));
        let hit = alerts.as_array().into_iter().flatten().find(|a| {
            a["code"] == "S-E11.65"
                && a["drift_type"] == "TypeB"
                && a["evidence"]["billing_category"].is_string()
                && a["evidence"]["billing_overlap"].as_f64().unwrap_or(0.0) > 0.0
        });
        if let Some(h) = hit {
            type_b = Some((q, h["evidence"]["billing_category"].as_str().unwrap_or("").to_string()));
            break;
        }
    }
    c.check(type_b.is_some(), format!("TypeB alert on S-E11.65 {type_b:?}"));

    let deploy = json(&q1.join("compliance-deploy.json"));
    let conditions: Vec<&str> = deploy["verdict"]["conditions"]
        .as_array()
        .map(|a| a.iter().filter_map(Value::as_str).collect())
        .unwrap_or_default();
    let audit = deploy["audit"].as_array().map_or(0, Vec::len);
    c.check(
        deploy["verdict"]["verdict"] == "PermitWithConditions"
            && conditions.iter().any(|s| s.contains("90th percentile"))
            && audit == 3,
        format!(
            "deploy {} with {} condition(s), {audit} audit entries",
            deploy["verdict"]["verdict"],
            conditions.len()
        ),
    );
    c.verdict()
}

// ---------------------------------------------------------------------------
// A2, A7: recomputed from records.jsonl against truth.jsonl
// ---------------------------------------------------------------------------

fn truth_by_id(path: &Path) -> BTreeMap<String, Value> {
    jsonl(path)
        .into_iter()
        .filter_map(|t| Some((t["record_id"].as_str()?.to_string(), t)))
        .collect()
}

fn a2(run_dir: &Path) -> Verdict {
    let q1 = run_dir.join("q1");
    let truth = truth_by_id(&q1.join("truth.jsonl"));
    let (mut catch_all, mut clean) = (Vec::new(), Vec::new());
    for r in jsonl(&q1.join("records.jsonl")) {
        let (Some(score), Some(t)) = (
            r["fidelity"]["score"].as_f64(),
            r["record_id"].as_str().and_then(|id| truth.get(id)),
        ) else {
            return Verdict::fail(format!("record without score or truth: {}", r["record_id"]));
        };
        let labels: Vec<&str> = t["distortion_labels"]
            .as_array()
            .unwrap()
            .iter()
            .filter_map(Value::as_str)
            .collect();
        if labels.contains(&"CatchAll") {
            catch_all.push(score);
        } else if labels == ["None"] {
            clean.push(score);
        }
    }
    if catch_all.is_empty() || clean.is_empty() {
        return Verdict::fail("no CatchAll or no unlabelled records");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_ca, m_clean) = (mean(&catch_all), mean(&clean));
    Verdict::new(
        m_clean - m_ca >= 0.05,
        format!(
            "CatchAll mean {m_ca:.4} (n={}) vs unlabelled {m_clean:.4} (n={}); gap {:.4}",
            catch_all.len(),
            clean.len(),
            m_clean - m_ca
        ),
    )
}

fn a7(run_dir: &Path) -> Verdict {
    let mut c = Checks::default();
    for q in 1..=4 {
        let dir = run_dir.join(format!("q{q}"));
        let truth = truth_by_id(&dir.join("truth.jsonl"));
        let records = jsonl(&dir.join("records.jsonl"));
        let (mut admin, mut clinical) = (0usize, 0usize);
        for r in &records {
            let t = r["record_id"]
                .as_str()
                .and_then(|id| truth.get(id))
                .map(|t| &t["true_clinical_code"]);
            admin += usize::from(t == Some(&r["primary_code"]));
            clinical += usize::from(t == Some(&r["clinical_code"]));
        }
        let n = records.len() as f64;
        let (a, cl) = (admin as f64 / n, clinical as f64 / n);
        c.check(
            !records.is_empty() && cl > a,
            format!("q{q} clinical {cl:.4} > administrative {a:.4}"),
        );
    }
    c.verdict()
}

// ---------------------------------------------------------------------------
// A3 to A6: named oracle suites through the library and the CLI
// ---------------------------------------------------------------------------

fn oracle_suite(name: &str, scratch: &Path) -> Verdict {
    let mut c = Checks::default();
    match ontopipe::oracle::run_named(name, 42, scratch) {
        Ok(results) => {
            let bad: Vec<&str> = results
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.oracle_name.as_str())
                .collect();
            c.check(
                bad.is_empty(),
                format!("{name}: {} checks, failed {bad:?}", results.len()),
            );
        }
        Err(e) => c.check(false, format!("{name}: {e}")),
    }
    let out = run(&["oracle", "run", name, "--seed", SEED], scratch);
    c.check(
        out.status.code() == Some(0),
        format!("`oracle run {name}` exit {:?}", out.status.code()),
    );
    c.verdict()
}

fn a3(scratch: &Path) -> Verdict {
    let mut c = Checks::default();
    let v = oracle_suite("jsd", scratch);
    c.check(v.pass, v.detail);
    // Hand-verifiable closed forms against the sentinel directly.
    let disjoint = ontopipe::sentinel::jsd(&[1.0, 0.0], &[0.0, 1.0]);
    c.check((disjoint - 1.0).abs() < 1e-12, format!("disjoint {disjoint}"));
    let half = ontopipe::sentinel::jsd(&[1.0, 0.0], &[0.5, 0.5]);
    // Midpoint (0.75, 0.25); half of each KL term against it.
    let closed = 0.5 * (1.0f64 / 0.75).log2() + 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2());
    c.check((half - closed).abs() < 1e-12, format!("(1,0) vs (.5,.5) {half:.6}"));
    c.verdict()
}

fn a4(run_dir: &Path, scratch: &Path) -> Verdict {
    let mut c = Checks::default();
    let v = oracle_suite("partition", scratch);
    c.check(v.pass, v.detail);
    for q in 1..=4 {
        let dir = run_dir.join(format!("q{q}"));
        c.check(
            ontopipe::oracle::partition_oracle(&dir.join("input.jsonl"), &dir),
            format!("walkthrough q{q} partitions"),
        );
    }
    c.verdict()
}

// ---------------------------------------------------------------------------
// A8: every subcommand twice, outputs compared byte for byte
// ---------------------------------------------------------------------------

/// Runs `args` in two fresh directories (after `prepare` seeds each) and
/// compares stdout plus every file named in `outputs`.
fn twice(label: &str, args: &[&str], outputs: &[&str], prepare: &dyn Fn(&Path)) -> Result<String, String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs = Vec::new();
    for d in &dirs {
        prepare(d.path());
        let out = run(args, d.path());
        if out.status.code() != Some(0) {
            return Err(format!(
                "{label}: exit {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        let files: Vec<Option<Vec<u8>>> = outputs.iter().map(|f| std::fs::read(d.path().join(f)).ok()).collect();
        runs.push((out.stdout, files));
    }
    if runs[0].0 != runs[1].0 {
        return Err(format!("{label}: stdout differs"));
    }
    for (i, f) in outputs.iter().enumerate() {
        if runs[0].1[i].is_none() {
            return Err(format!("{label}: {f} missing"));
        }
        if runs[0].1[i] != runs[1].1[i] {
            return Err(format!("{label}: {f} differs"));
        }
    }
    Ok(label.to_string())
}

/// Label, arguments, output files to compare, and per-directory setup.
type Case<'a> = (&'a str, Vec<&'a str>, Vec<&'a str>, &'a dyn Fn(&Path));

fn a8(fixtures: &Path) -> Verdict {
    let fx = fixtures.to_path_buf();
    let copy_inputs = move |d: &Path| {
        for f in std::fs::read_dir(&fx).unwrap() {
            let f = f.unwrap();
            std::fs::copy(f.path(), d.join(f.file_name())).unwrap();
        }
    };
    let nothing = |_: &Path| {};
    let cases: Vec<Case> = vec![
        (
            "synth generate",
            vec![
                "synth",
                "generate",
                "--scenario",
                "diabetes-walkthrough",
                "--n",
                "4000",
                "--quarters",
                "2",
                "--seed",
                SEED,
                "--history",
                "4000",
                "--out",
                "d",
            ],
            vec!["d/q1.jsonl", "d/q1.truth.jsonl", "d/q2.jsonl", "d/history.jsonl"],
            &nothing,
        ),
        (
            "gate",
            vec!["gate", "--input", "q1.jsonl", "--target-version", "2025", "--out", "g"],
            vec!["g/accepted.jsonl", "g/reconciled.jsonl", "g/quarantine.jsonl"],
            &copy_inputs,
        ),
        (
            "fidelity-report",
            vec![
                "fidelity-report",
                "--history",
                "history.jsonl",
                "--input",
                "q1.jsonl",
                "--out",
                "f.csv",
                "--annotated",
                "a.jsonl",
            ],
            vec!["f.csv", "a.jsonl"],
            &copy_inputs,
        ),
        (
            "infer-clinical",
            vec![
                "infer-clinical",
                "--history",
                "history.jsonl",
                "--input",
                "q1.jsonl",
                "--out",
                "b.jsonl",
                "--divergence",
                "d.csv",
            ],
            vec!["b.jsonl", "d.csv"],
            &copy_inputs,
        ),
        (
            "dormancy classify",
            vec![
                "dormancy",
                "classify",
                "--input",
                "q1.jsonl",
                "--significance",
                "sig.json",
                "--store",
                "s.json",
                "--prune-log",
                "p.csv",
            ],
            vec!["s.json", "p.csv"],
            &copy_inputs,
        ),
        (
            "dormancy activate",
            vec![
                "dormancy",
                "activate",
                "--store",
                "store.json",
                "--input",
                "q2.jsonl",
                "--events",
                "events.json",
                "--out",
                "act.json",
            ],
            vec!["act.json"],
            &copy_inputs,
        ),
        (
            "drift-scan",
            vec![
                "drift-scan",
                "--baseline",
                "q1.jsonl",
                "--current",
                "q2.jsonl",
                "--out",
                "alerts.json",
            ],
            vec!["alerts.json"],
            &copy_inputs,
        ),
        (
            "breaker check",
            vec![
                "breaker",
                "check",
                "--input",
                "q2.jsonl",
                "--period",
                "2025Q3",
                "--prior",
                "2025Q2=0.04",
                "--out",
                "b.json",
            ],
            vec!["b.json"],
            &copy_inputs,
        ),
        (
            "breaker sweep",
            vec![
                "breaker",
                "sweep",
                "--input",
                "q2.jsonl",
                "--period",
                "2025Q3",
                "--prior",
                "2025Q2=0.04",
                "--out",
                "s.csv",
            ],
            vec!["s.csv"],
            &copy_inputs,
        ),
        (
            "comply-check",
            vec![
                "comply-check",
                "--op",
                "deploy",
                "--context",
                "model_card_present=true",
                "training_data_documented=true",
                "risk_class=high",
                "--out",
                "c.json",
            ],
            vec!["c.json"],
            &nothing,
        ),
        (
            "scenario run",
            vec!["scenario", "run", "clean-null", "--seed", SEED, "--out", "r"],
            vec![
                "r/report.json",
                "r/summary.txt",
                "r/dashboard.csv",
                "r/q2/alerts.json",
                "r/q2/records.jsonl",
            ],
            &nothing,
        ),
        (
            "oracle run",
            vec!["oracle", "run", "compliance-lattice"],
            vec![],
            &nothing,
        ),
    ];
    let mut c = Checks::default();
    for (label, args, outputs, prepare) in cases {
        match twice(label, &args, &outputs, prepare) {
            Ok(l) => c.check(true, l),
            Err(e) => c.check(false, e),
        }
    }
    let v = c.verdict();
    if v.pass {
        Verdict::new(true, format!("identical outputs for {}", v.detail))
    } else {
        v
    }
}

/// Inputs for the A8 runs: two small quarters, a history, a dormant store
/// and an event list.
fn a8_fixtures(root: &Path) -> PathBuf {
    let dir = root.join("a8-inputs");
    let gen = run(
        &[
            "synth",
            "generate",
            "--scenario",
            "diabetes-walkthrough",
            "--n",
            "4000",
            "--quarters",
            "2",
            "--seed",
            SEED,
            "--history",
            "4000",
            "--out",
            dir.to_str().unwrap(),
        ],
        root,
    );
    assert!(
        gen.status.success(),
        "fixture generation failed: {}",
        String::from_utf8_lossy(&gen.stderr)
    );
    for f in ["q1.truth.jsonl", "q2.truth.jsonl"] {
        std::fs::remove_file(dir.join(f)).unwrap();
    }
    std::fs::write(
        dir.join("sig.json"),
        r#"{"significance": {"S-E13": "secondary diabetes", "S-J09": "novel influenza"},
            "activation_conditions": {
              "S-E13": [{"kind": "PrevalenceExceeds", "threshold": 0.005, "window": "quarterly"}],
              "S-J09": [{"kind": "OutbreakSignal", "code": "S-J09"}]}}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("events.json"),
        r#"[{"kind": "OutbreakSignal", "code": "S-J09"}]"#,
    )
    .unwrap();
    let store = run(
        &[
            "dormancy",
            "classify",
            "--input",
            "q1.jsonl",
            "--significance",
            "sig.json",
            "--store",
            "store.json",
        ],
        &dir,
    );
    assert!(
        store.status.success(),
        "store setup failed: {}",
        String::from_utf8_lossy(&store.stderr)
    );
    dir
}

fn main() {
    // libtest flags such as --nocapture or a filter are accepted and ignored.
    let root = tempfile::tempdir().unwrap();
    let scratch = root.path().join("scratch");
    std::fs::create_dir_all(&scratch).unwrap();
    let run_dir = root.path().join("walkthrough");

    let start = Instant::now();
    let out = run(
        &[
            "scenario",
            "run",
            "diabetes-walkthrough",
            "--seed",
            SEED,
            "--out",
            run_dir.to_str().unwrap(),
        ],
        root.path(),
    );
    let elapsed = start.elapsed();

    let results = [
        ("A1", "walkthrough reproduction", a1(&run_dir, elapsed, &out)),
        ("A2", "checkpoint separation", a2(&run_dir)),
        ("A3", "JSD correctness", a3(&scratch)),
        ("A4", "gate conservation", a4(&run_dir, &scratch)),
        ("A5", "breaker boundary", oracle_suite("breaker-boundary", &scratch)),
        ("A6", "compliance algebra", oracle_suite("compliance-lattice", &scratch)),
        ("A7", "dual-layer lift", a7(&run_dir)),
        ("A8", "determinism", a8(&a8_fixtures(root.path()))),
    ];
    let mut failed = 0;
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{id} {tag} {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
