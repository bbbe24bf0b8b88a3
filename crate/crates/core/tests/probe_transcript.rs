//! Record/replay of the stdio probe protocol against a fixed synthetic model.
//!
//! Set `CONFOOD_BLESS=1` to re-record the fixtures.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::PathBuf;

use confood_core::probe::{serve, ProbeRequest, ProbeResponse};
use confood_core::synthetic::{CorpusEntry, RhoDistribution};
use confood_core::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/probe")
        .join(name)
}

fn corpus() -> Vec<CorpusEntry> {
    let text = fs::read_to_string(fixture("corpus.jsonl")).unwrap();
    text.lines()
        .map(|l| CorpusEntry::from_json_line(l).unwrap())
        .collect()
}

fn record() {
    let c = generate(&SyntheticSpec {
        seed: 77,
        n_id: 1,
        n_ood: 1,
        rho_ood: RhoDistribution::new(0.1, 0.05),
        layer_widths: BTreeMap::from([(7, 48), (15, 48)]),
        ..SyntheticSpec::default()
    })
    .unwrap();
    let entries: Vec<&CorpusEntry> = c.all_entries().collect();
    let lines: String = entries.iter().map(|e| e.to_json_line() + "\n").collect();
    fs::create_dir_all(fixture("")).unwrap();
    fs::write(fixture("corpus.jsonl"), lines).unwrap();

    let model = SyntheticModel::new(entries.iter().copied()).unwrap();
    let mut requests = vec![
        ProbeRequest::LayerWidth { layer_id: 7 }.to_json_line(),
        ProbeRequest::LayerWidth { layer_id: 99 }.to_json_line(),
    ];
    for e in &entries {
        let q = e.query();
        let text = q.text.clone();
        requests.push(
            ProbeRequest::Answer {
                query: text.clone(),
            }
            .to_json_line(),
        );
        for layer in [7, 15] {
            let top = model.top_activated(&q, layer, 30).unwrap();
            let t = model.oracle_tolerance(&q, layer).unwrap().min(top.len());
            requests.push(
                ProbeRequest::TopActivated {
                    query: text.clone(),
                    layer_id: layer,
                    m: 30,
                }
                .to_json_line(),
            );
            for neurons in [vec![], top[top.len() - t..].to_vec()] {
                requests.push(
                    ProbeRequest::AnswerWithDropout {
                        query: text.clone(),
                        layer_id: layer,
                        neurons,
                    }
                    .to_json_line(),
                );
            }
        }
    }
    requests.extend([
        ProbeRequest::Judge {
            a: "A".into(),
            b: "A".into(),
        }
        .to_json_line(),
        ProbeRequest::Judge {
            a: "A".into(),
            b: "B".into(),
        }
        .to_json_line(),
        ProbeRequest::Answer {
            query: "no-such-query".into(),
        }
        .to_json_line(),
        r#"{"op":"answer_with_dropout","query":"id-00000","layer_id":7,"neurons":[48]}"#.into(),
        r#"{"op":"shutdown"}"#.into(),
        "not json".into(),
    ]);
    let requests = requests.join("\n") + "\n";
    fs::write(fixture("requests.jsonl"), &requests).unwrap();
    fs::write(fixture("responses.jsonl"), replay(&model, &requests)).unwrap();
}

fn replay(model: &SyntheticModel, requests: &str) -> Vec<u8> {
    let mut out = Vec::new();
    serve(
        model,
        &ExactJudge,
        Cursor::new(requests.as_bytes()),
        &mut out,
    )
    .unwrap();
    out
}

#[test]
fn replay_is_byte_identical() {
    if std::env::var_os("CONFOOD_BLESS").is_some() {
        record();
    }
    let entries = corpus();
    let model = SyntheticModel::new(&entries).unwrap();
    let requests = fs::read_to_string(fixture("requests.jsonl")).unwrap();
    let golden = fs::read(fixture("responses.jsonl")).unwrap();
    let got = replay(&model, &requests);
    assert_eq!(
        String::from_utf8(got).unwrap(),
        String::from_utf8(golden).unwrap()
    );
}

#[test]
fn recorded_responses_obey_the_protocol() {
    let requests = fs::read_to_string(fixture("requests.jsonl")).unwrap();
    let responses = fs::read_to_string(fixture("responses.jsonl")).unwrap();
    assert_eq!(requests.lines().count(), responses.lines().count());
    let mut answers = BTreeMap::new();
    for (req, resp) in requests.lines().zip(responses.lines()) {
        let resp = ProbeResponse::from_json_line(resp).unwrap();
        let Ok(req) = ProbeRequest::from_json_line(req) else {
            assert!(!resp.ok && resp.error.is_some());
            continue;
        };
        match req {
            ProbeRequest::Answer { query } if resp.ok => {
                answers.insert(query, resp.result.clone().unwrap());
            }
            ProbeRequest::AnswerWithDropout { query, neurons, .. } if neurons.is_empty() => {
                // an empty mask is the plain answer
                assert_eq!(resp.result.as_ref(), answers.get(&query));
            }
            ProbeRequest::AnswerWithDropout { neurons, .. } if resp.ok => {
                // the recorded masks are exactly the oracle flip sets
                assert!(neurons.len() <= 30);
                assert!(resp.result.unwrap() == "B" || neurons.len() == 30);
            }
            ProbeRequest::TopActivated { m, .. } => {
                assert_eq!(resp.result.unwrap().as_array().unwrap().len(), m);
            }
            _ => {}
        }
    }
    assert_eq!(answers.len(), 2);
}
