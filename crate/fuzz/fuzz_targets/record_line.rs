#![no_main]

use confood_core::dropout::RecordLine;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(line) = RecordLine::from_json_line(data) {
        let _ = line.to_tolerance_record();
        RecordLine::from_json_line(&line.to_json_line()).expect("written line parses back");
    }
});
