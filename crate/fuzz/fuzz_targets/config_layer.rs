#![no_main]

use confood_cli::ConfigLayer;
use confood_core::MergingMethod;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(layer) = ConfigLayer::from_json_str(data) {
        if let Some(method) = layer.method {
            let _ = method.parse::<MergingMethod>();
        }
    }
});
