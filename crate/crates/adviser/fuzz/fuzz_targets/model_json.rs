//! Fuzzes the trained-model-set JSON decoder and pins its round trip:
//! an accepted model set must re-serialize to a form that parses back
//! and serializes identically (the emit side is the fixpoint).

#![no_main]

use adviser::estimate::ModelSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(set) = ModelSet::from_json_str(text) else {
        return;
    };
    let emitted = set.to_json();
    let again = ModelSet::from_json_str(&emitted).expect("emitted model set must parse");
    assert_eq!(
        emitted,
        again.to_json(),
        "model set serialization is not a fixpoint"
    );
});
