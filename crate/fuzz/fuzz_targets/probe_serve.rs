#![no_main]

use std::collections::BTreeMap;
use std::io::Cursor;
use std::sync::OnceLock;

use confood_core::probe::{serve, ProbeResponse};
use confood_core::synthetic::CorpusEntry;
use confood_core::{ExactJudge, SyntheticModel};
use libfuzzer_sys::fuzz_target;

fn model() -> &'static SyntheticModel {
    static MODEL: OnceLock<SyntheticModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let entry = CorpusEntry {
            query_id: "id-00000".into(),
            rho: 0.5,
            layer_widths: BTreeMap::from([(7, 48), (15, 48)]),
            background: 0.5,
            seed: 1,
        };
        SyntheticModel::new([&entry]).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    let mut out = Vec::new();
    serve(model(), &ExactJudge, Cursor::new(data), &mut out).unwrap();
    for line in String::from_utf8(out).unwrap().lines() {
        ProbeResponse::from_json_line(line).expect("server speaks the protocol");
    }
});
