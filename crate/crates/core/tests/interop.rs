//! Files produced outside this crate, following only the documented layouts.
//! `fixtures/generate.py` writes them.

use std::path::PathBuf;

use numprobe::dataset::{annotate_problem, Side};
use numprobe::numerals::parse_numeral;
use numprobe::probes::{self, ProbeKind};
use numprobe::tensorio::{self, HiddenStateMatrix, RowLabel, TensorIoError, TokenRole};
use numprobe::toylm::{parse_response, read_responses, score_responses, write_responses, ParsedAnswer, ResponseRecord};

fn fixture(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name].iter().collect()
}

fn same_matrix_built_here() -> HiddenStateMatrix {
    let rows: [([f32; 3], u8, f64, u64); 6] = [
        ([0.5, -1.25, 3.0], 1, 0.75, 11),
        ([1.5, 0.25, -2.0], 0, -0.5, 12),
        ([-0.5, 2.0, 0.125], 1, 1.5, 13),
        ([2.5, -0.75, 1.0], 0, -1.25, 14),
        ([0.0, 1.0, -1.0], 1, 0.25, 15),
        ([-1.5, -0.5, 0.5], 0, -2.0, 16),
    ];
    let data = rows.iter().flat_map(|r| r.0).collect();
    let labels = rows
        .iter()
        .map(|&(_, gold, ratio, id)| RowLabel {
            gold: Some(gold),
            log_ratio: Some(ratio),
            ..RowLabel::new(id)
        })
        .collect();
    HiddenStateMatrix::new(data, 6, 3, 3, TokenRole::LastPromptToken, labels, "ext-model").unwrap()
}

#[test]
fn extractor_tensor_file_reads_identically() {
    let path = fixture("extractor_layer3.hstn");
    let header = tensorio::validate_file(&path).unwrap();
    assert_eq!((header.n, header.d, header.layer), (6, 3, 3));
    let external = tensorio::read_matrix(&path).unwrap();
    let local = same_matrix_built_here();
    assert_eq!(external, local);
    // byte-identical when written back
    assert_eq!(local.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    for kind in [ProbeKind::Classifier, ProbeKind::LogRatioReg] {
        let a = probes::fit_probe(&external, kind, 1.0).unwrap();
        let b = probes::fit_probe(&local, kind, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            probes::evaluate_probe(&a, &external).unwrap(),
            probes::evaluate_probe(&b, &local).unwrap()
        );
    }
}

#[test]
fn damaged_tensor_files() {
    let bytes = std::fs::read(fixture("extractor_layer3.hstn")).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        HiddenStateMatrix::from_bytes(&bad_magic),
        Err(TensorIoError::BadMagic)
    ));
    assert!(matches!(
        HiddenStateMatrix::from_bytes(&bytes[..bytes.len() - 1]),
        Err(TensorIoError::TruncatedPayload { .. })
    ));
    let text = String::from_utf8_lossy(&bytes).replace("dtype=f32", "dtype=f64");
    assert!(matches!(
        HiddenStateMatrix::from_bytes(text.as_bytes()),
        Err(TensorIoError::UnsupportedDtype(d)) if d == "f64"
    ));
}

#[test]
fn extractor_responses_score_through_parse_response() {
    let records = read_responses(&fixture("extractor_responses.jsonl")).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.parsed.is_none() && r.correct.is_none()));

    let p = annotate_problem(parse_numeral("570").unwrap(), parse_numeral("580").unwrap()).unwrap();
    let parsed: Vec<ParsedAnswer> = records.iter().map(|r| parse_response(&r.response, &p)).collect();
    assert_eq!(
        parsed,
        [
            ParsedAnswer::First,
            ParsedAnswer::Second,
            ParsedAnswer::Unparsed,
            ParsedAnswer::Unparsed
        ]
    );
    let scored = score_responses(records.iter().map(|r| (&p, r.response.clone())));
    assert_eq!(p.gold, Side::Second);
    assert_eq!((scored.accuracy, scored.unparsed), (0.25, 2));

    // scored records keep the verbatim response and add the parse
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    write_responses(&out, &scored.to_records()).unwrap();
    let back: Vec<ResponseRecord> = read_responses(&out).unwrap();
    assert_eq!(back, scored.to_records());
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["parsed"], "first");
    assert_eq!(first["response"], " 5.7 × 10^2");
}

#[test]
fn scientific_answers_match_plain_operands() {
    let p = annotate_problem(parse_numeral("5.8 × 10^2").unwrap(), parse_numeral("571").unwrap()).unwrap();
    assert_eq!(parse_response("580", &p), ParsedAnswer::First);
    assert_eq!(parse_response(" 5.71 × 10^2\n", &p), ParsedAnswer::Second);
    assert_eq!(parse_response("", &p), ParsedAnswer::Unparsed);
}
