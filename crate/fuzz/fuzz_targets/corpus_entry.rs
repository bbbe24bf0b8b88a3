#![no_main]

use confood_core::synthetic::CorpusEntry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(entry) = CorpusEntry::from_json_line(data) {
        CorpusEntry::from_json_line(&entry.to_json_line()).expect("written entry parses back");
    }
});
