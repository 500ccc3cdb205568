use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use super::manifest::RunManifest;
use super::report::{self, read_table};
use super::*;
use crate::dataset::{self, ComparisonProblem, DemoOrder, DocumentMode, PromptSpec, Side, Split, Variant};
use crate::metrics::{self, BinAxis, MetricsReport};
use crate::probes::{self, ProbeKind, ProbeModel, SelectionMetric};
use crate::tensorio::{self, HiddenStateMatrix, TokenRole};
use crate::toylm::{self, Example, FinetuneConfig, ToyConfig, ToyModel, TrainConfig};

/// Marks an error as a usage problem (exit status 1) rather than a data problem.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub(super) struct Usage(pub String);

fn parse_arg<T: FromStr>(flag: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Usage(format!("--{flag}: {e}")).into())
}

pub(super) fn run(command: Command) -> CliResult {
    let result = match command {
        Command::GenData(a) => gen_data(a),
        Command::Extract(a) => extract(a),
        Command::ValidateTensors(a) => validate_tensors(a),
        Command::FitProbe(a) => fit_probe(a),
        Command::Sweep(a) => sweep(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Bin(a) => bin(a),
        Command::Correlate(a) => correlate(a),
        Command::ToylmTrain(a) => toylm_train(a),
        Command::ToylmFinetune(a) => toylm_finetune(a),
        Command::ToylmEval(a) => toylm_eval(a),
        Command::Report(a) => report::run(a),
    };
    result.map_err(|e| match e.downcast::<Usage>() {
        Ok(u) => CliError::Usage(u.0),
        Err(e) => CliError::Data(e),
    })
}

pub(super) fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub(super) fn write_file(path: &Path, contents: impl AsRef<[u8]>, manifest: &mut RunManifest) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)?;
    Ok(())
}

pub(super) fn finish(manifest: &RunManifest, dir: &Path) -> Result<()> {
    manifest
        .write(dir)
        .with_context(|| format!("writing manifest in {}", dir.display()))?;
    Ok(())
}

pub(super) fn load_dataset(dir: &Path, manifest: &mut RunManifest) -> Result<dataset::DatasetSplit> {
    let data = dataset::read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    manifest.input_dir(dir)?;
    Ok(data)
}

fn read_matrix(path: &Path, manifest: &mut RunManifest) -> Result<HiddenStateMatrix> {
    let m = tensorio::read_matrix(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.input(path)?;
    Ok(m)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

// ---------------------------------------------------------------------------
// Data

fn gen_data(a: GenDataArgs) -> Result<()> {
    let variant: Variant = parse_arg("variant", &a.variant)?;
    let mut manifest = RunManifest::new("gen-data");
    manifest.set("variant", variant).set("seed", a.seed);
    create_out(&a.out)?;
    let data = dataset::generate_cross_notation(a.seed, variant);
    for path in dataset::write_dataset(&a.out, &data)? {
        manifest.output(&path)?;
    }
    finish(&manifest, &a.out)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let mode = if a.per_line {
        DocumentMode::PerLine
    } else {
        DocumentMode::PerFile
    };
    let mut manifest = RunManifest::new("extract");
    manifest.set("max_chars", a.max_chars).set("per_line", a.per_line);
    let corpus = dataset::ingest_corpus(&a.inputs, a.max_chars, mode)?;
    for (path, err) in &corpus.errors {
        eprintln!("warning: {}: {err}", path.display());
    }
    if corpus.kept + corpus.skipped == 0 && !corpus.errors.is_empty() {
        bail!("none of the {} inputs could be read", a.inputs.len());
    }
    for path in &a.inputs {
        if path.is_file() {
            manifest.input(path)?;
        }
    }
    create_out(&a.out)?;
    let mut lines = String::new();
    for doc in &corpus.documents {
        for n in &doc.numerals {
            lines.push_str(&serde_json::to_string(&n.to_record())?);
            lines.push('\n');
        }
    }
    write_file(&a.out.join("numerals.jsonl"), lines, &mut manifest)?;
    let summary = format!(
        "documents_kept={}\ndocuments_skipped={}\nnumerals={}\nunreadable_inputs={}\n",
        corpus.kept,
        corpus.skipped,
        corpus.numeral_count(),
        corpus.errors.len()
    );
    write_file(&a.out.join("summary.txt"), summary, &mut manifest)?;
    finish(&manifest, &a.out)
}

fn validate_tensors(a: ValidateArgs) -> Result<()> {
    let mut failures = 0;
    for path in &a.files {
        match tensorio::validate_file(path) {
            Ok(h) => println!("{}: ok {h}", path.display()),
            Err(e) => {
                println!("{}: invalid: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} files are invalid", a.files.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Probes

/// `problem_id,predicted,gold` for regression probes (log2 units);
/// `problem_id,predicted,score` for classifiers (`first` / `second`).
fn prediction_csv(probe: &ProbeModel, h: &HiddenStateMatrix) -> Result<String> {
    let scores = probe.projection(h)?;
    let mut out = String::new();
    if probe.kind == ProbeKind::Classifier {
        out.push_str("problem_id,predicted,score\n");
        for (label, s) in h.labels.iter().zip(&scores) {
            let side = if *s > 0.0 { Side::First } else { Side::Second };
            let _ = writeln!(out, "{},{},{s}", label.problem_id, side.as_str());
        }
    } else {
        let gold = probes::regression_targets(h, probe.kind)?;
        out.push_str("problem_id,predicted,gold\n");
        for ((label, s), g) in h.labels.iter().zip(&scores).zip(&gold) {
            let _ = writeln!(out, "{},{s},{g}", label.problem_id);
        }
    }
    Ok(out)
}

fn prefixed(prefix: &str, report: &MetricsReport) -> String {
    report.to_kv().lines().map(|l| format!("{prefix}.{l}\n")).collect()
}

fn fit_probe(a: FitProbeArgs) -> Result<()> {
    let kind: ProbeKind = parse_arg("kind", &a.kind)?;
    if a.dataset.is_some() && a.eval.is_some() {
        return Err(Usage("--dataset and --eval are mutually exclusive".into()).into());
    }
    let mut manifest = RunManifest::new("fit-probe");
    manifest.set("kind", kind).set("reg", a.reg);
    let h = read_matrix(&a.train, &mut manifest)?;

    // (name, fit rows, evaluation sets)
    let (fit_on, evals): (HiddenStateMatrix, Vec<(&str, HiddenStateMatrix)>) = if let Some(dir) = &a.dataset {
        let index = load_dataset(dir, &mut manifest)?.split_index();
        let rows = |s| probes::rows_in_split(&h, &index, s);
        let train = rows(Split::Train);
        if train.is_empty() {
            bail!("no rows of {} belong to the training split", a.train.display());
        }
        let mut evals = Vec::new();
        for (name, split) in [("validation", Split::Validation), ("test", Split::Test)] {
            let r = rows(split);
            if !r.is_empty() {
                evals.push((name, h.select_rows(&r)));
            }
        }
        (h.select_rows(&train), evals)
    } else if let Some(path) = &a.eval {
        let e = read_matrix(path, &mut manifest)?;
        (h, vec![("eval", e)])
    } else {
        (h.clone(), vec![("train", h)])
    };

    let probe = probes::fit_probe(&fit_on, kind, a.reg)?;
    create_out(&a.out)?;
    write_file(&a.out.join("probe.bin"), probe.to_bytes(), &mut manifest)?;
    let mut metrics_txt = prefixed("train", &probes::evaluate_probe(&probe, &fit_on)?);
    let mut predictions = None;
    for (name, m) in &evals {
        metrics_txt.push_str(&prefixed(name, &probes::evaluate_probe(&probe, m)?));
        predictions = Some(prediction_csv(&probe, m)?);
    }
    write_file(&a.out.join("metrics.txt"), metrics_txt, &mut manifest)?;
    if let Some(csv) = predictions {
        write_file(&a.out.join("predictions.csv"), csv, &mut manifest)?;
    }
    finish(&manifest, &a.out)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let kind: ProbeKind = parse_arg("kind", &a.kind)?;
    let select = match &a.select {
        Some(s) => parse_arg("select", s)?,
        None => SelectionMetric::default_for(kind),
    };
    let mut manifest = RunManifest::new("sweep");
    manifest.set("kind", kind).set("select", select).set("reg", a.reg);
    let data = load_dataset(&a.dataset, &mut manifest)?;
    let matrices = probes::load_sweep_dir(&a.dir)?;
    manifest.input_dir(&a.dir)?;
    let result = probes::sweep_layers(&matrices, &data.split_index(), kind, select, a.reg)?;

    create_out(&a.out)?;
    let mut layers = String::from("layer,n,r2,mse,accuracy\n");
    for (layer, r) in &result.per_layer {
        let _ = writeln!(
            layers,
            "{layer},{},{},{},{}",
            r.n,
            opt(r.r_squared()),
            opt(r.regression.map(|g| g.mse)),
            opt(r.accuracy)
        );
    }
    write_file(&a.out.join("layers.csv"), layers, &mut manifest)?;
    write_file(
        &a.out.join("best_probe.bin"),
        result.best_probe.to_bytes(),
        &mut manifest,
    )?;
    let mut summary = format!(
        "best_layer={}\nselection_metric={}\n",
        result.best_layer, result.selection_metric
    );
    if let Some(test) = &result.test {
        summary.push_str(&prefixed("test", test));
    }
    write_file(&a.out.join("summary.txt"), summary, &mut manifest)?;
    let best = matrices
        .iter()
        .find(|m| m.layer == result.best_layer)
        .expect("best layer comes from the inputs");
    let test_rows = probes::rows_in_split(best, &data.split_index(), Split::Test);
    if !test_rows.is_empty() {
        let csv = prediction_csv(&result.best_probe, &best.select_rows(&test_rows))?;
        write_file(&a.out.join("test_predictions.csv"), csv, &mut manifest)?;
    }
    finish(&manifest, &a.out)
}

// ---------------------------------------------------------------------------
// Metrics

pub(super) fn problem_map(data: &dataset::DatasetSplit) -> BTreeMap<u64, &ComparisonProblem> {
    data.iter_all().map(|(_, p)| (p.id, p)).collect()
}

/// Reads `problem_id,predicted` rows and joins them to their problems.
pub(super) fn side_predictions(
    path: &Path,
    problems: &BTreeMap<u64, &ComparisonProblem>,
) -> Result<(Vec<ComparisonProblem>, Vec<Option<Side>>)> {
    let table = read_table(path)?;
    let ids = table.column("problem_id")?;
    let preds = table.column("predicted")?;
    let mut ps = Vec::with_capacity(ids.len());
    let mut sides = Vec::with_capacity(ids.len());
    for (row, (id, pred)) in ids.iter().zip(preds).enumerate() {
        let id: u64 = id
            .parse()
            .with_context(|| format!("{} row {}: bad problem_id {id:?}", path.display(), row + 1))?;
        let p = problems
            .get(&id)
            .with_context(|| format!("{}: problem {id} is not in the dataset", path.display()))?;
        let side = match pred.as_str() {
            "first" => Some(Side::First),
            "second" => Some(Side::Second),
            "unparsed" | "" => None,
            other => bail!(
                "{} row {}: prediction {other:?} is not first/second/unparsed",
                path.display(),
                row + 1
            ),
        };
        ps.push((*p).clone());
        sides.push(side);
    }
    Ok((ps, sides))
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let mut manifest = RunManifest::new("metrics");
    let table = read_table(&a.predictions)?;
    manifest.input(&a.predictions)?;
    let report = if table.has("gold") {
        let parse = |col: &str| -> Result<Vec<f64>> {
            table
                .column(col)?
                .iter()
                .map(|v| v.parse::<f64>().with_context(|| format!("{col} value {v:?}")))
                .collect()
        };
        let pred = parse("predicted")?;
        let gold = parse("gold")?;
        MetricsReport {
            n: pred.len(),
            regression: Some(metrics::regression_metrics_log2(&pred, &gold)?),
            accuracy: None,
        }
    } else {
        let dir = a
            .dataset
            .as_ref()
            .ok_or_else(|| Usage("comparison predictions need --dataset".into()))?;
        let data = load_dataset(dir, &mut manifest)?;
        let (problems, sides) = side_predictions(&a.predictions, &problem_map(&data))?;
        let gold: Vec<Option<Side>> = problems.iter().map(|p| Some(p.gold)).collect();
        MetricsReport {
            n: problems.len(),
            regression: None,
            accuracy: Some(metrics::comparison_accuracy(&sides, &gold)?),
        }
    };
    let text = report.to_kv();
    match &a.out {
        Some(dir) => {
            create_out(dir)?;
            write_file(&dir.join("metrics.txt"), text, &mut manifest)?;
            finish(&manifest, dir)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn bin(a: BinArgs) -> Result<()> {
    let axis: BinAxis = parse_arg("axis", &a.axis)?;
    let edges = a.edges.clone().unwrap_or_else(|| axis.default_edges());
    let mut manifest = RunManifest::new("bin");
    let edge_text: Vec<String> = edges.iter().map(f64::to_string).collect();
    manifest
        .set("axis", axis.as_str())
        .set("edges", edge_text.join(","))
        .set("method", &a.method);
    let data = load_dataset(&a.dataset, &mut manifest)?;
    let (problems, sides) = side_predictions(&a.predictions, &problem_map(&data))?;
    manifest.input(&a.predictions)?;
    let curve =
        metrics::binned_accuracy(&problems, &sides, axis, &edges).map_err(|e| Usage(format!("--edges: {e}")))?;
    create_out(&a.out)?;
    write_file(
        &a.out.join("bins.csv"),
        metrics::curves_to_csv(&[(a.method.clone(), curve)]),
        &mut manifest,
    )?;
    finish(&manifest, &a.out)
}

pub(super) fn read_points(path: &Path) -> Result<Vec<metrics::CorrelationPoint>> {
    let table = read_table(path)?;
    let tags = table.column("tag")?;
    let x = table.column("early_probe_metric")?;
    let y = table.column("verbal_accuracy")?;
    tags.iter()
        .zip(x)
        .zip(y)
        .map(|((t, x), y)| {
            Ok(metrics::CorrelationPoint {
                tag: t.clone(),
                early_probe_metric: x
                    .parse()
                    .with_context(|| format!("{}: bad value {x:?}", path.display()))?,
                verbal_accuracy: y
                    .parse()
                    .with_context(|| format!("{}: bad value {y:?}", path.display()))?,
            })
        })
        .collect()
}

fn correlate(a: CorrelateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("correlate");
    let points = read_points(&a.points)?;
    manifest.input(&a.points)?;
    let rho = metrics::cross_model_correlation(&points)?;
    create_out(&a.out)?;
    write_file(
        &a.out.join("correlation.txt"),
        format!("n={}\npearson_rho={rho}\n", points.len()),
        &mut manifest,
    )?;
    finish(&manifest, &a.out)
}

// ---------------------------------------------------------------------------
// Toy model

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<ToyModel> {
    let model = toylm::load_checkpoint(path)?;
    manifest.input(path)?;
    Ok(model)
}

fn toylm_train(a: ToyTrainArgs) -> Result<()> {
    let variant: Variant = parse_arg("variant", &a.variant)?;
    let config = ToyConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        context_len: a.context,
        seed: a.seed,
    };
    config.validate().map_err(|e| Usage(e.to_string()))?;
    let train = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut manifest = RunManifest::new("toylm-train");
    manifest
        .set("seed", a.seed)
        .set("variant", variant)
        .set("base_size", a.base_size)
        .set("layers", a.layers)
        .set("d_model", a.d_model)
        .set("heads", a.heads)
        .set("context", a.context)
        .set("epochs", a.epochs)
        .set("lr", a.lr)
        .set("batch_size", a.batch_size);
    let problems = dataset::generate_same_notation(a.seed, variant, a.base_size);
    let corpus = Example::from_problems(&problems, &PromptSpec::zero_shot(variant))?;
    let (model, log) = toylm::train_lm(&config, &train, &corpus)?;
    create_out(&a.out)?;
    let ckpt = a.out.join("base.ckpt");
    toylm::save_checkpoint(&model, &ckpt)?;
    manifest.output(&ckpt)?;
    write_file(&a.out.join("train_log.csv"), log.to_csv(), &mut manifest)?;
    finish(&manifest, &a.out)
}

fn toylm_finetune(a: ToyFinetuneArgs) -> Result<()> {
    let mut manifest = RunManifest::new("toylm-finetune");
    manifest
        .set("seed", a.seed)
        .set("alpha", a.alpha)
        .set("beta", a.beta)
        .set("depth", a.depth)
        .set("lr", a.lr)
        .set("epochs", a.epochs)
        .set("batch_size", a.batch_size)
        .set("gamma", a.gamma)
        .set("lambda", a.lambda);
    let mut model = load_model(&a.checkpoint, &mut manifest)?;
    let data = load_dataset(&a.dataset, &mut manifest)?;
    let examples = Example::from_problems(&data.train, &PromptSpec::zero_shot(data.variant))?;
    // Both arms start from the same fitted head so they differ only in β and α.
    let init = toylm::init_probe_head(&mut model, &examples, a.depth, a.gamma, a.lambda)?;
    let cfg = FinetuneConfig {
        alpha: a.alpha,
        beta: a.beta,
        probe_depth_fraction: a.depth,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        ..FinetuneConfig::default()
    };
    let (tuned, log) = toylm::finetune(&model, &examples, &cfg)?;
    create_out(&a.out)?;
    let ckpt = a.out.join("finetuned.ckpt");
    toylm::save_checkpoint(&tuned, &ckpt)?;
    manifest.output(&ckpt)?;
    write_file(&a.out.join("finetune_log.csv"), log.to_csv(), &mut manifest)?;
    let init_txt = format!(
        "layer={}\ntrain_accuracy={}\nlogistic_iterations={}\n",
        init.layer, init.train_accuracy, init.logistic_iterations
    );
    write_file(&a.out.join("probe_init.txt"), init_txt, &mut manifest)?;
    finish(&manifest, &a.out)
}

/// Per-layer probes fitted on this model's own states: magnitude (ridge on
/// the numeral-final token) and comparison (logistic on the last prompt token).
struct LayerProbes {
    csv: String,
    magnitude_csv: String,
    regression_csv: String,
}

fn layer_probes(
    model: &ToyModel,
    train: &[ComparisonProblem],
    eval: &[ComparisonProblem],
    spec: &PromptSpec,
) -> Result<LayerProbes> {
    let layers: Vec<usize> = (1..=model.config.n_layers).collect();
    let mag_train = toylm::export_hidden_states(model, train, spec, &layers, TokenRole::LastNumeralToken)?;
    let mag_eval = toylm::export_hidden_states(model, eval, spec, &layers, TokenRole::LastNumeralToken)?;
    let cls_train = toylm::export_hidden_states(model, train, spec, &layers, TokenRole::LastPromptToken)?;
    let cls_eval = toylm::export_hidden_states(model, eval, spec, &layers, TokenRole::LastPromptToken)?;
    let mut csv = String::from("layer,magnitude_r2,classifier_accuracy\n");
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for (i, &layer) in layers.iter().enumerate() {
        let mag = probes::fit_probe(&mag_train[i], ProbeKind::MagnitudeReg, probes::DEFAULT_LAMBDA)?;
        let r2 = probes::evaluate_probe(&mag, &mag_eval[i])?
            .r_squared()
            .unwrap_or(f64::NAN);
        let cls = probes::fit_probe(&cls_train[i], ProbeKind::Classifier, probes::DEFAULT_GAMMA)?;
        let acc = probes::evaluate_probe(&cls, &cls_eval[i])?.accuracy.unwrap_or(f64::NAN);
        let _ = writeln!(csv, "{layer},{r2},{acc}");
        if best.as_ref().is_none_or(|(b, _, _)| r2 > *b) {
            best = Some((r2, i, mag.projection(&mag_eval[i])?));
        }
    }
    let (_, best_i, preds) = best.expect("at least two layers");
    let rows = &mag_eval[best_i];
    let mut magnitude_csv = String::from("layer,problem_id,operand,predicted,gold\n");
    let mut regression_csv = String::from("problem_id,predicted\n");
    for (k, pair) in preds.chunks_exact(2).enumerate() {
        let id = rows.labels[2 * k].problem_id;
        for (j, operand) in ["a", "b"].iter().enumerate() {
            let gold = rows.labels[2 * k + j].value_log2.expect("magnitude rows are labelled");
            let _ = writeln!(magnitude_csv, "{},{id},{operand},{},{gold}", layers[best_i], pair[j]);
        }
        let side = if pair[0] > pair[1] { Side::First } else { Side::Second };
        let _ = writeln!(regression_csv, "{id},{}", side.as_str());
    }
    Ok(LayerProbes {
        csv,
        magnitude_csv,
        regression_csv,
    })
}

fn toylm_eval(a: ToyEvalArgs) -> Result<()> {
    let split: Split = parse_arg("split", &a.split)?;
    if a.shots > 5 {
        return Err(Usage(format!("--shots {} must be between 0 and 5", a.shots)).into());
    }
    let mut manifest = RunManifest::new("toylm-eval");
    manifest
        .set("split", split.as_str())
        .set("shots", a.shots)
        .set("swap_demo", a.swap_demo)
        .set("layer_probes", a.layer_probes)
        .set("probe_train_size", a.probe_train_size);
    let model = load_model(&a.checkpoint, &mut manifest)?;
    let data = load_dataset(&a.dataset, &mut manifest)?;
    let problems = data.split(split);
    let mut spec = if a.shots == 0 {
        PromptSpec::zero_shot(data.variant)
    } else {
        PromptSpec::k_shot(data.variant, a.shots)
    };
    if a.swap_demo {
        spec.demo_order = DemoOrder::SwappedFirstDemo;
    }
    let eval = toylm::verbal_eval(&model, problems, &spec)?;

    create_out(&a.out)?;
    let responses = a.out.join("responses.jsonl");
    toylm::write_responses(&responses, &eval.to_records())?;
    manifest.output(&responses)?;
    let mut preds = String::from("problem_id,predicted\n");
    for r in &eval.records {
        let _ = writeln!(preds, "{},{}", r.problem_id, r.parsed.as_str());
    }
    write_file(&a.out.join("predictions.csv"), preds, &mut manifest)?;

    let mut metrics_txt = format!(
        "split={}\nvariant={}\nn={}\naccuracy={}\nunparsed={}\n",
        split.as_str(),
        data.variant,
        eval.records.len(),
        eval.accuracy,
        eval.unparsed
    );
    if let Some(layer) = model.probe_layer {
        let examples = Example::from_problems(problems, &spec)?;
        let scores = toylm::probe_head_scores(&model, &examples)?;
        let mut csv = String::from("problem_id,predicted,score\n");
        let mut correct = 0;
        for (p, s) in problems.iter().zip(&scores) {
            let side = if *s > 0.0 { Side::First } else { Side::Second };
            correct += usize::from(side == p.gold);
            let _ = writeln!(csv, "{},{},{s}", p.id, side.as_str());
        }
        write_file(&a.out.join("probe_predictions.csv"), csv, &mut manifest)?;
        let _ = write!(
            metrics_txt,
            "probe_layer={layer}\nprobe_head_accuracy={}\n",
            correct as f64 / problems.len().max(1) as f64
        );
    }
    if a.layer_probes {
        let n = a.probe_train_size.min(data.train.len());
        let lp = layer_probes(&model, &data.train[..n], problems, &spec)?;
        write_file(&a.out.join("layer_metrics.csv"), lp.csv, &mut manifest)?;
        write_file(
            &a.out.join("magnitude_predictions.csv"),
            lp.magnitude_csv,
            &mut manifest,
        )?;
        write_file(
            &a.out.join("regression_predictions.csv"),
            lp.regression_csv,
            &mut manifest,
        )?;
    }
    write_file(&a.out.join("metrics.txt"), metrics_txt, &mut manifest)?;
    finish(&manifest, &a.out)
}
