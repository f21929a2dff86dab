//! Fixtures compiled into the library so the CLI and tests can refer to
//! them by name.

use crate::model::CodeSystem;

pub const SYN_ICD: &str = include_str!("../fixtures/syn-icd.json");
pub const AI_ACT_DEMO: &str = include_str!("../fixtures/adapters/ai-act-demo.json");
pub const MDR_DEMO: &str = include_str!("../fixtures/adapters/mdr-demo.json");
pub const EHDS_DEMO: &str = include_str!("../fixtures/adapters/ehds-demo.json");
pub const DIABETES_WALKTHROUGH: &str = include_str!("../fixtures/scenarios/diabetes-walkthrough.json");
pub const NULL_SCENARIO: &str = include_str!("../fixtures/scenarios/clean-null.json");

/// Looks up a bundled file by the name used in scenario specs.
pub fn file(name: &str) -> Option<&'static str> {
    match name {
        "syn-icd" | "syn-icd.json" => Some(SYN_ICD),
        "ai-act-demo" | "ai-act-demo.json" | "adapters/ai-act-demo.json" => Some(AI_ACT_DEMO),
        "mdr-demo" | "mdr-demo.json" | "adapters/mdr-demo.json" => Some(MDR_DEMO),
        "ehds-demo" | "ehds-demo.json" | "adapters/ehds-demo.json" => Some(EHDS_DEMO),
        "diabetes-walkthrough" | "diabetes-walkthrough.json" => Some(DIABETES_WALKTHROUGH),
        "clean-null" | "clean-null.json" => Some(NULL_SCENARIO),
        _ => None,
    }
}

pub fn syn_icd() -> CodeSystem {
    CodeSystem::from_json(SYN_ICD).expect("bundled code system is valid")
}

pub fn demo_adapters() -> [&'static str; 3] {
    [AI_ACT_DEMO, MDR_DEMO, EHDS_DEMO]
}
