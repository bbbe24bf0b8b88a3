#![no_main]

use confood_core::conformal::CalibrationSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(set) = CalibrationSet::from_json_str(data) {
        CalibrationSet::from_json_str(&set.to_json()).expect("written set parses back");
    }
});
