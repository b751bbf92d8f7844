//! Fuzzes the beneficiary registry CSV parser, then round-trips whatever
//! it accepted: records that survive row validation must re-emit and
//! re-parse to the same records with zero malformed rows.

#![no_main]

use adviser::ingest::{emit_registry, parse_registry_bytes, HeaderSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let spec = HeaderSpec::standard();
    let Ok((records, _malformed)) = parse_registry_bytes(data, &spec) else {
        return;
    };
    let bytes = emit_registry(&records, &spec).expect("parsed records must emit");
    let (again, malformed) =
        parse_registry_bytes(&bytes, &spec).expect("emitted registry must parse");
    assert!(malformed.is_empty(), "emitted registry has malformed rows");
    assert_eq!(records, again, "registry round trip changed records");
});
