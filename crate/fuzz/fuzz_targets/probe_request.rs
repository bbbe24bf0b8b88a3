#![no_main]

use confood_core::probe::ProbeRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(req) = ProbeRequest::from_json_line(data) {
        let back = ProbeRequest::from_json_line(&req.to_json_line()).unwrap();
        assert_eq!(back, req);
    }
});
