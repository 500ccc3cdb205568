use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numprobe::dataset;
use numprobe::planted;
use numprobe::tensorio;

mod common;
use common::{kv, numprobe, ok, p, toy_pipeline, tree_hashes};

#[test]
fn exit_codes() {
    assert_eq!(numprobe(&["--help"]).code, 0);
    assert_eq!(numprobe(&["--version"]).code, 0);
    assert_eq!(numprobe(&["gen-data", "--help"]).code, 0);
    assert_eq!(numprobe::<&str>(&[]).code, 1);
    assert_eq!(numprobe(&["frobnicate"]).code, 1);
    assert_eq!(numprobe(&["gen-data", "--out", "/tmp/x"]).code, 1, "missing --seed");
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(
        numprobe(&["gen-data", "--seed", "1", "--variant", "hex", "--out", p(&out)]).code,
        1
    );
    assert_eq!(
        numprobe(&[
            "fit-probe",
            "--train",
            "missing.bin",
            "--kind",
            "magnitude",
            "--out",
            p(&out)
        ])
        .code,
        2
    );
    assert_eq!(
        numprobe(&[
            "fit-probe",
            "--train",
            "missing.bin",
            "--kind",
            "cubic",
            "--out",
            p(&out)
        ])
        .code,
        1
    );

    let garbage = tmp.path().join("g.bin");
    fs::write(&garbage, b"not a tensor").unwrap();
    let r = numprobe(&["validate-tensors", p(&garbage)]);
    assert_eq!(r.code, 2);
    assert!(r.stdout.contains("invalid"));
    assert_eq!(
        numprobe(&[
            "gen-data",
            "--config",
            p(&tmp.path().join("nope.cfg")),
            "--out",
            p(&out)
        ])
        .code,
        2
    );
}

#[test]
fn gen_data_is_byte_identical_and_configurable() {
    let tmp = tempfile::tempdir().unwrap();
    let [a, b, c, d] = ["a", "b", "c", "d"].map(|n| tmp.path().join(n));
    ok(&["gen-data", "--seed", "5", "--variant", "dec-sci", "--out", p(&a)]);
    ok(&["gen-data", "--seed", "5", "--variant", "dec-sci", "--out", p(&b)]);
    assert_eq!(tree_hashes(&a), tree_hashes(&b));
    assert_eq!(tree_hashes(&a).len(), 4);

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# same run from a file\nseed = 5\nvariant = dec-sci\n").unwrap();
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&c)]);
    assert_eq!(tree_hashes(&a), tree_hashes(&c));
    // explicit flags override the file
    ok(&["gen-data", "--config", p(&cfg), "--seed", "6", "--out", p(&d)]);
    assert_ne!(
        kv(&a.join("manifest.txt"))["run_id"],
        kv(&d.join("manifest.txt"))["run_id"]
    );
    assert_eq!(kv(&d.join("manifest.txt"))["config.seed"], "6");

    let data = dataset::read_dataset(&a).unwrap();
    assert_eq!(
        (data.train.len(), data.validation.len(), data.test.len()),
        (8_000, 1_600, 1_600)
    );
}

/// Planted per-layer states for the generated dataset, layer 2 carrying the cleanest signal.
fn planted_sweep(dir: &Path, data_dir: &Path) {
    let data = dataset::read_dataset(data_dir).unwrap();
    let problems: Vec<_> = data.iter_all().map(|(_, p)| p.clone()).step_by(4).collect();
    fs::create_dir_all(dir).unwrap();
    for (layer, noise) in [(1, 0.6), (2, 0.01), (3, 0.3)] {
        let mut m = planted::planted_comparison_states(&problems, 40 + layer as u64, 16, noise);
        m.layer = layer;
        tensorio::write_matrix(&m, &dir.join(format!("layer{layer}.hstn"))).unwrap();
    }
}

#[test]
fn probe_and_metric_commands_on_planted_data() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |n: &str| tmp.path().join(n);
    ok(&["gen-data", "--seed", "2", "--out", p(&t("data"))]);
    planted_sweep(&t("layers"), &t("data"));

    let r = ok(&[
        "validate-tensors",
        p(&t("layers/layer1.hstn")),
        p(&t("layers/layer2.hstn")),
    ]);
    assert!(
        r.stdout.contains("ok n=2800 d=16 layer=2 token_role=last_prompt_token"),
        "{}",
        r.stdout
    );

    ok(&[
        "sweep",
        "--dir",
        p(&t("layers")),
        "--dataset",
        p(&t("data")),
        "--kind",
        "log-ratio",
        "--out",
        p(&t("sweep")),
    ]);
    let summary = kv(&t("sweep/summary.txt"));
    assert_eq!(summary["best_layer"], "2");
    assert_eq!(summary["selection_metric"], "r2");
    assert!(summary["test.r_squared"].parse::<f64>().unwrap() > 0.99);
    assert_eq!(fs::read_to_string(t("sweep/layers.csv")).unwrap().lines().count(), 4);

    let r = ok(&["metrics", "--predictions", p(&t("sweep/test_predictions.csv"))]);
    let m: BTreeMap<_, _> = r.stdout.lines().filter_map(|l| l.split_once('=')).collect();
    assert_eq!(m["r_squared"], summary["test.r_squared"]);

    ok(&[
        "fit-probe",
        "--train",
        p(&t("layers/layer2.hstn")),
        "--kind",
        "classifier",
        "--dataset",
        p(&t("data")),
        "--out",
        p(&t("cls")),
    ]);
    let fitted = kv(&t("cls/metrics.txt"));
    assert!(fitted["test.accuracy"].parse::<f64>().unwrap() > 0.97);
    let pred = t("cls/predictions.csv");
    ok(&[
        "metrics",
        "--predictions",
        p(&pred),
        "--dataset",
        p(&t("data")),
        "--out",
        p(&t("acc")),
    ]);
    assert_eq!(kv(&t("acc/metrics.txt"))["accuracy"], fitted["test.accuracy"]);
    assert_eq!(
        numprobe(&["metrics", "--predictions", p(&pred)]).code,
        1,
        "needs --dataset"
    );

    ok(&[
        "bin",
        "--predictions",
        p(&pred),
        "--dataset",
        p(&t("data")),
        "--edges",
        "-1,0,1",
        "--out",
        p(&t("bins")),
    ]);
    let bins = fs::read_to_string(t("bins/bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 1 + 4);
    let counted: usize = bins
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counted, fs::read_to_string(&pred).unwrap().lines().count() - 1);
    let bad = numprobe(&[
        "bin",
        "--predictions",
        p(&pred),
        "--dataset",
        p(&t("data")),
        "--edges",
        "1,0",
        "--out",
        p(&t("b2")),
    ]);
    assert_eq!(bad.code, 1);

    let points = t("points.csv");
    fs::write(
        &points,
        "tag,early_probe_metric,verbal_accuracy\na,0.1,0.5\nb,0.2,0.6\nc,0.3,0.7\n",
    )
    .unwrap();
    ok(&["correlate", "--points", p(&points), "--out", p(&t("corr"))]);
    assert_eq!(kv(&t("corr/correlation.txt"))["pearson_rho"], "1");
    fs::write(
        &points,
        "tag,early_probe_metric,verbal_accuracy\na,0.1,0.5\nb,0.2,0.5\nc,0.3,0.5\n",
    )
    .unwrap();
    assert_eq!(
        numprobe(&["correlate", "--points", p(&points), "--out", p(&t("corr2"))]).code,
        2
    );
}

#[test]
fn extract_numerals_from_text() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = tmp.path().join("doc.txt");
    fs::write(&doc, "a constant of 6.02 × 10^23 and 3.14\nversion 1.2.3\n").unwrap();
    let out = tmp.path().join("ex");
    let r = ok(&[
        "extract",
        "--input",
        p(&doc),
        p(&tmp.path().join("missing.txt")),
        "--out",
        p(&out),
    ]);
    assert!(r.stderr.contains("missing.txt"));
    let summary = kv(&out.join("summary.txt"));
    assert_eq!(
        (summary["numerals"].as_str(), summary["unreadable_inputs"].as_str()),
        ("2", "1")
    );
    assert_eq!(
        fs::read_to_string(out.join("numerals.jsonl")).unwrap().lines().count(),
        2
    );
    assert_eq!(
        numprobe(&[
            "extract",
            "--input",
            p(&tmp.path().join("missing.txt")),
            "--out",
            p(&out)
        ])
        .code,
        2
    );
}

const PLANTED: &str = "tag,early_probe_metric,verbal_accuracy\nplanted/strong,0.95,0.9\nplanted/weak,0.4,0.55\n";

/// Every stage re-run from the same seeds gives the same bytes.
#[test]
fn toy_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let report = toy_pipeline(a.path(), PLANTED);
    toy_pipeline(b.path(), PLANTED);
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    assert_eq!(ha.keys().collect::<Vec<_>>(), hb.keys().collect::<Vec<_>>());
    // outputs live under different temp roots; only the files' contents are compared
    assert_eq!(ha, hb);
    assert!(ha.keys().filter(|k| k.ends_with("manifest.txt")).count() >= 8);

    for f in [
        "figure2_scatter.csv",
        "figure3.csv",
        "figure9.csv",
        "figure10.csv",
        "figure4_5.csv",
        "table2.csv",
    ] {
        assert!(report.join(f).exists(), "{f}");
    }
    let fig45 = fs::read_to_string(report.join("figure4_5.csv")).unwrap();
    let tags: Vec<&str> = fig45.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        tags,
        ["base", "finetuned", "finetuned_probe", "planted/strong", "planted/weak"]
    );
    let table = fs::read_to_string(report.join("table2.csv")).unwrap();
    assert!(table.starts_with("variant,base,finetuned,finetuned_probe,"));
    assert!(table.lines().nth(1).unwrap().starts_with("int-sci,"));
    let fig3 = fs::read_to_string(report.join("figure3.csv")).unwrap();
    for method in [
        "base/verbal",
        "finetuned_probe/probe_head",
        "finetuned/regression_probe",
    ] {
        assert!(
            fig3.lines().any(|l| l.starts_with(&format!("{method},log_ratio,"))),
            "{method}"
        );
    }
}
