//! Fuzzes the route-pool JSONL decoder and pins its round trip: an
//! accepted pool re-emits and re-parses to an equal pool.

#![no_main]

use adviser::routing::RoutePool;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(pool) = RoutePool::from_jsonl_str(text) else {
        return;
    };
    let emitted = pool.to_jsonl();
    let again = RoutePool::from_jsonl_str(&emitted).expect("emitted pool must parse");
    assert_eq!(pool, again, "route pool round trip changed routes");
});
