#![no_main]

use confood_core::probe::ProbeResponse;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(resp) = ProbeResponse::from_json_line(data) {
        assert!(!resp.ok || resp.result.is_some());
        ProbeResponse::from_json_line(&resp.to_json_line()).expect("written response parses back");
    }
});
