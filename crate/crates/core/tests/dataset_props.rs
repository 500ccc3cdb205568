use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::PathBuf;

use numprobe::dataset::{
    self, generate_cross_notation, generate_same_notation, ingest_corpus, make_prompt, make_prompt_from_surfaces,
    DatasetError, DemoOrder, DocumentMode, PromptMode, PromptSpec, Side, Variant,
};
use numprobe::numerals::Notation;

#[test]
fn sizes_and_structure() {
    for variant in [Variant::IntSci, Variant::DecSci] {
        let data = generate_cross_notation(7, variant);
        assert_eq!(
            (data.train.len(), data.validation.len(), data.test.len()),
            (8_000, 1_600, 1_600)
        );

        let mut per_len = BTreeMap::new();
        let mut ids = HashSet::new();
        for (_, p) in data.iter_all() {
            *per_len.entry(p.digit_len).or_insert(0) += 1;
            assert!(ids.insert(p.id), "duplicate id {}", p.id);
            let sci = [&p.a, &p.b]
                .iter()
                .filter(|n| n.notation() == Notation::Scientific)
                .count();
            assert_eq!(sci, 1, "{} vs {}", p.a, p.b);
            assert_eq!(p.gold == Side::First, p.a > p.b);
            assert_eq!(p.log_ratio > 0.0, p.gold == Side::First);
            assert_ne!(p.log_ratio, 0.0);
            assert_eq!(p.a.integer_digit_count(), p.digit_len as usize);
            assert_eq!(p.b.integer_digit_count(), p.digit_len as usize);
            assert_eq!(p.variant, variant);
        }
        assert_eq!(ids.len(), 11_200);
        assert_eq!(per_len.len(), 8);
        assert!(per_len.values().all(|&c| c == 1_400), "{per_len:?}");
    }
}

#[test]
fn label_balance() {
    let data = generate_cross_notation(11, Variant::IntSci);
    let first = data.iter_all().filter(|(_, p)| p.gold == Side::First).count();
    assert!((first as f64 / 11_200.0 - 0.5).abs() < 0.03);
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    dataset::write_dataset(a.path(), &generate_cross_notation(3, Variant::DecSci)).unwrap();
    dataset::write_dataset(b.path(), &generate_cross_notation(3, Variant::DecSci)).unwrap();
    dataset::write_dataset(c.path(), &generate_cross_notation(4, Variant::DecSci)).unwrap();
    for name in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name}");
        assert_ne!(x, fs::read(c.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn serialization_round_trip() {
    let data = generate_cross_notation(5, Variant::DecSci);
    let dir = tempfile::tempdir().unwrap();
    dataset::write_dataset(dir.path(), &data).unwrap();
    let back = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(back.train, data.train);
    assert_eq!(back.validation, data.validation);
    assert_eq!(back.test, data.test);
    for p in back.iter_all().map(|(_, p)| p) {
        // surfaces survive exactly, not only values
        let orig = data.iter_all().find(|(_, q)| q.id == p.id).unwrap().1;
        assert_eq!((p.a.surface(), p.b.surface()), (orig.a.surface(), orig.b.surface()));
    }
    let line = fs::read_to_string(dir.path().join("test.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in [
        "a_surface",
        "b_surface",
        "gold",
        "log_ratio",
        "digit_len",
        "log_sum",
        "variant",
        "split",
    ] {
        assert!(record.get(key).is_some(), "missing {key}");
    }
    assert_eq!(record["split"], "test");
}

/// Decimal places on the plain operand of dec-sci problems. A draw of zero
/// places renders as `.0`, the same text as one place whose digit is 0, so
/// the observable counts are 1 (p = 2/5) and 2, 3, 4 (p = 1/5 each).
#[test]
fn decimal_places_are_uniform() {
    let data = generate_cross_notation(21, Variant::DecSci);
    let mut observed = [0usize; 5];
    for (_, p) in data.iter_all() {
        let plain = if p.a.notation() == Notation::PlainDec {
            &p.a
        } else {
            &p.b
        };
        let places = plain.surface().split_once('.').unwrap().1.len();
        observed[places] += 1;
    }
    assert_eq!(observed[0], 0);
    let n = 11_200.0;
    let expected = [0.4 * n, 0.2 * n, 0.2 * n, 0.2 * n];
    let stat: f64 = observed[1..]
        .iter()
        .zip(expected)
        .map(|(&o, e)| (o as f64 - e).powi(2) / e)
        .sum();
    // scipy.stats.chi2.ppf(0.99, 3)
    let critical = 11.344866730144373;
    assert!(stat < critical, "chi-square {stat} with counts {observed:?}");
}

fn golden(name: &str) -> String {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "prompts", name].iter().collect();
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn prompts_match_golden_files() {
    let pairs = [
        (Variant::IntSci, "int-sci", "570", "5.8 × 10^2"),
        (Variant::DecSci, "dec-sci", "57.25", "5.8 × 10^1"),
    ];
    let mut checked = 0;
    for (variant, tag, a, b) in pairs {
        let zero = make_prompt_from_surfaces(a, b, &PromptSpec::zero_shot(variant)).unwrap();
        assert_eq!(zero, golden(&format!("{tag}_zero_shot.txt")));
        for k in 1..=5 {
            let got = make_prompt_from_surfaces(a, b, &PromptSpec::k_shot(variant, k)).unwrap();
            assert_eq!(got, golden(&format!("{tag}_{k}_shot.txt")), "{tag} k={k}");
        }
        let swapped = PromptSpec {
            mode: PromptMode::KShot(1),
            demo_order: DemoOrder::SwappedFirstDemo,
            variant,
        };
        let got = make_prompt_from_surfaces(a, b, &swapped).unwrap();
        assert_eq!(got, golden(&format!("{tag}_1_shot_swapped.txt")));
        checked += 7;
    }
    assert_eq!(checked, 14);
}

#[test]
fn prompt_examples_and_errors() {
    let data = generate_cross_notation(1, Variant::IntSci);
    let p = &data.test[0];
    let zero = make_prompt(p, &PromptSpec::zero_shot(Variant::IntSci)).unwrap();
    assert_eq!(
        zero,
        format!("Q: Which is larger, {} or {}? A:", p.a.surface(), p.b.surface())
    );
    let five = make_prompt(p, &PromptSpec::k_shot(Variant::IntSci, 5)).unwrap();
    assert!(five.lines().nth(4).unwrap().contains("20834 or 6.5 × 10^3"));
    // demonstrated answers alternate position: first, second, first, second, first
    let answers_first: Vec<bool> = dataset::INT_SCI_DEMOS.iter().map(|(a, _, ans)| a == ans).collect();
    assert_eq!(answers_first, [true, false, true, false, true]);
    for k in [0u8, 6] {
        assert!(matches!(
            make_prompt(p, &PromptSpec::k_shot(Variant::IntSci, k)),
            Err(DatasetError::InvalidK(_))
        ));
    }
}

#[test]
fn same_notation_corpus() {
    let corpus = generate_same_notation(9, Variant::IntSci, 2_000);
    assert_eq!(corpus.len(), 2_000);
    let sci = corpus.iter().filter(|p| p.a.notation() == Notation::Scientific).count();
    assert!(corpus.iter().all(|p| p.a.notation() == p.b.notation()));
    assert!((800..1_200).contains(&sci), "{sci}");
}

#[test]
fn corpus_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let docs = [
        ("a.txt", "mass 9.1 × 10 -31 kg".to_string()),
        ("b.txt", "we measure 3.14 and 2.71".to_string()),
        ("c.txt", "x ".repeat(100)),
    ];
    let paths: Vec<PathBuf> = docs
        .iter()
        .map(|(name, text)| {
            let p = dir.path().join(name);
            fs::write(&p, text).unwrap();
            p
        })
        .collect();
    let out = ingest_corpus(&paths, 50, DocumentMode::PerFile).unwrap();
    assert_eq!((out.kept, out.skipped), (2, 1));
    assert_eq!(out.documents[0].numerals.len(), 1);
    assert_eq!(out.documents[0].numerals[0].numeral.notation(), Notation::Scientific);
    assert_eq!(out.numeral_count(), 3);

    let mut with_missing = paths.clone();
    with_missing.insert(1, dir.path().join("missing.txt"));
    let out = ingest_corpus(&with_missing, 50, DocumentMode::PerFile).unwrap();
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.kept, 2);

    assert!(matches!(
        ingest_corpus(&[], 50, DocumentMode::PerFile),
        Err(DatasetError::EmptyCorpus)
    ));
}
