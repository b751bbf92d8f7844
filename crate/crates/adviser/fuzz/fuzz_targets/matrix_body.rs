//! Fuzzes the binary travel-matrix body decoder: magic, version,
//! lengths, checksum, and cell-list ordering are all attacker-controlled
//! here, and acceptance must imply the invariants the lookup path
//! assumes (sorted unique cells, minute and known-bit arrays sized n²).

#![no_main]

use adviser::travel::decode_matrix_body;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(body) = decode_matrix_body(data) else {
        return;
    };
    let n = body.cells.len();
    assert!(
        body.cells.windows(2).all(|w| w[0] < w[1]),
        "accepted unsorted or duplicate cell list"
    );
    assert_eq!(body.minutes.len(), n * n, "minute table not n²");
    assert_eq!(
        body.known.len(),
        (n * n).div_ceil(8),
        "known bitmap wrongly sized"
    );
});
