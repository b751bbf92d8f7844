//! Fuzzes the geocode-cache file parser. The file is machine-written and
//! the parser is strict, so acceptance must imply finite coordinates.

#![no_main]

use adviser::ingest::parse_cache_text;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(entries) = parse_cache_text(text) else {
        return;
    };
    for e in &entries {
        assert!(
            e.lat.is_finite() && e.lon.is_finite(),
            "accepted a non-finite cached coordinate"
        );
    }
});
