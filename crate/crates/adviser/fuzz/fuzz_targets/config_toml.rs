//! Fuzzes the deployment config TOML parser. Accepted configs must hash
//! deterministically — the run directory name is derived from the hash,
//! so instability here would silently fork run state.

#![no_main]

use std::path::Path;

use adviser::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let base = Path::new("/fuzz/base");
    let Ok(cfg) = PipelineConfig::from_toml_str(text, base) else {
        return;
    };
    let _ = cfg.check();
    assert_eq!(
        cfg.config_hash(),
        cfg.config_hash(),
        "config hash is unstable"
    );
    let reparsed = PipelineConfig::from_toml_str(text, base).expect("same text must parse again");
    assert_eq!(
        cfg.config_hash(),
        reparsed.config_hash(),
        "same text hashed differently on a second parse"
    );
});
