//! Fuzzes both training-data CSV parsers: the multi-target outcome rows
//! (with their lossless emit round trip) and the single-outcome survey
//! reader.

#![no_main]

use adviser::estimate::{
    emit_training_rows, parse_training_csv, parse_training_rows, FeatureSchema,
};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let schema = FeatureSchema::standard();

    if let Ok(rows) = parse_training_rows(data, &schema) {
        let emitted = emit_training_rows(&rows, &schema).expect("parsed rows must emit");
        let again = parse_training_rows(&emitted, &schema).expect("emitted rows must parse");
        assert_eq!(rows.len(), again.len(), "round trip changed the row count");
        for ((t1, x1, y1), (t2, x2, y2)) in rows.iter().zip(&again) {
            assert_eq!(t1, t2, "round trip changed a target");
            assert_eq!(y1, y2, "round trip changed an outcome");
            assert_eq!(x1.values(), x2.values(), "round trip changed features");
        }
    }

    let _ = parse_training_csv(data, &schema, "outcome");
});
