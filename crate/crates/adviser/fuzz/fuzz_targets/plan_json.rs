//! Fuzzes the plan JSON decoder and pins the canonical-form guarantee
//! the deterministic-replay contract depends on: emit → parse → emit is
//! byte-identical.

#![no_main]

use adviser::pipeline::plan_to_json;
use adviser::solver::Plan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(plan) = serde_json::from_str::<Plan>(text) else {
        return;
    };
    let first = plan_to_json(&plan);
    let reparsed: Plan = serde_json::from_str(&first).expect("emitted plan must parse");
    let second = plan_to_json(&reparsed);
    assert_eq!(first, second, "plan emit → parse → emit is not byte-stable");
});
