#![no_main]

use libfuzzer_sys::fuzz_target;
use multibisage::config::PipelineConfig;

// Whatever JSON deserializes must also survive seed resolution and
// validation without panicking; errors are fine.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(mut cfg) = PipelineConfig::from_json(text) else {
        return;
    };
    cfg.resolve_seeds();
    let _ = cfg.validate();
});
