//! Assembles plot-data CSVs and the accuracy table from `toylm-eval` outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use super::commands::{
    create_out, finish, load_dataset, problem_map, read_points, side_predictions, write_file, Usage,
};
use super::manifest::RunManifest;
use super::ReportArgs;
use crate::dataset::{ComparisonProblem, Side};
use crate::metrics::{self, BinAxis, BinnedCurve, CorrelationPoint};

/// Tags that fill the three accuracy-table columns, in order.
pub const TABLE_TAGS: [&str; 3] = ["base", "finetuned", "finetuned_probe"];

/// A headed CSV file held as strings.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    source: PathBuf,
}

impl Table {
    pub fn has(&self, column: &str) -> bool {
        self.headers.iter().any(|h| h == column)
    }

    pub fn column(&self, column: &str) -> Result<Vec<String>> {
        let idx = self
            .headers
            .iter()
            .position(|h| h == column)
            .with_context(|| format!("{} has no {column:?} column", self.source.display()))?;
        Ok(self.rows.iter().map(|r| r[idx].clone()).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader
        .headers()
        .with_context(|| format!("reading {}", path.display()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(|f| f.trim().to_string()).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(Table {
        headers,
        rows,
        source: path.to_path_buf(),
    })
}

fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn kv_f64(kv: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<f64> {
    kv.get(key)
        .with_context(|| format!("{} has no {key}", path.display()))?
        .parse()
        .with_context(|| format!("{}: {key} is not a number", path.display()))
}

struct EvalRun {
    tag: String,
    dir: PathBuf,
    accuracy: f64,
    /// (method suffix, problems, predictions)
    methods: Vec<(&'static str, Vec<ComparisonProblem>, Vec<Option<Side>>)>,
}

fn load_eval(spec: &str, problems: &BTreeMap<u64, &ComparisonProblem>, manifest: &mut RunManifest) -> Result<EvalRun> {
    let (tag, dir) = spec
        .split_once('=')
        .filter(|(t, d)| !t.is_empty() && !d.is_empty())
        .ok_or_else(|| Usage(format!("--eval {spec:?} is not TAG=DIR")))?;
    let dir = PathBuf::from(dir);
    let metrics_path = dir.join("metrics.txt");
    let accuracy = kv_f64(&read_kv(&metrics_path)?, "accuracy", &metrics_path)?;
    let mut methods = Vec::new();
    for (suffix, file, required) in [
        ("verbal", "predictions.csv", true),
        ("probe_head", "probe_predictions.csv", false),
        ("regression_probe", "regression_predictions.csv", false),
    ] {
        let path = dir.join(file);
        if !path.exists() {
            if required {
                bail!("{} is missing", path.display());
            }
            continue;
        }
        let (ps, sides) = side_predictions(&path, problems)?;
        manifest
            .inputs
            .push((format!("{tag}/{file}"), super::manifest::hash_file(&path)?));
        methods.push((suffix, ps, sides));
    }
    manifest
        .inputs
        .push((format!("{tag}/metrics.txt"), super::manifest::hash_file(&metrics_path)?));
    Ok(EvalRun {
        tag: tag.to_string(),
        dir,
        accuracy,
        methods,
    })
}

fn curves(runs: &[EvalRun], axis: BinAxis) -> Result<Vec<(String, BinnedCurve)>> {
    let edges = axis.default_edges();
    let mut out = Vec::new();
    for run in runs {
        for (suffix, ps, sides) in &run.methods {
            out.push((
                format!("{}/{suffix}", run.tag),
                metrics::binned_accuracy(ps, sides, axis, &edges)?,
            ));
        }
    }
    Ok(out)
}

fn scatter(runs: &[EvalRun], manifest: &mut RunManifest) -> Result<String> {
    let mut out = String::from("tag,layer,problem_id,operand,predicted_log2,gold_log2\n");
    for run in runs {
        let path = run.dir.join("magnitude_predictions.csv");
        if !path.exists() {
            continue;
        }
        let t = read_table(&path)?;
        let cols = ["layer", "problem_id", "operand", "predicted", "gold"]
            .iter()
            .map(|c| t.column(c))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..t.rows.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                run.tag, cols[0][i], cols[1][i], cols[2][i], cols[3][i], cols[4][i]
            );
        }
        manifest.inputs.push((
            format!("{}/magnitude_predictions.csv", run.tag),
            super::manifest::hash_file(&path)?,
        ));
    }
    Ok(out)
}

/// Early-layer magnitude R² against verbal accuracy, one point per run that has layer probes.
fn run_points(runs: &[EvalRun], manifest: &mut RunManifest) -> Result<Vec<CorrelationPoint>> {
    let mut points = Vec::new();
    for run in runs {
        let path = run.dir.join("layer_metrics.csv");
        if !path.exists() {
            continue;
        }
        let t = read_table(&path)?;
        let mut per_layer = BTreeMap::new();
        for (layer, r2) in t.column("layer")?.iter().zip(t.column("magnitude_r2")?) {
            let layer: i32 = layer
                .parse()
                .with_context(|| format!("{}: bad layer {layer:?}", path.display()))?;
            let r2: f64 = r2
                .parse()
                .with_context(|| format!("{}: bad r2 {r2:?}", path.display()))?;
            per_layer.insert(layer, r2);
        }
        manifest.inputs.push((
            format!("{}/layer_metrics.csv", run.tag),
            super::manifest::hash_file(&path)?,
        ));
        if let Some(early) = metrics::early_layer_mean(&per_layer) {
            points.push(CorrelationPoint {
                tag: run.tag.clone(),
                early_probe_metric: early,
                verbal_accuracy: run.accuracy,
            });
        }
    }
    Ok(points)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Base, finetuned, and finetuned-with-probe-loss accuracies (percent) with
/// error-rate reductions of both finetuned columns relative to base.
pub fn table2_csv(variant: &str, accuracies: [Option<f64>; 3]) -> String {
    let [base, ft, ftp] = accuracies;
    let err = |after: Option<f64>| match (base, after) {
        (Some(b), Some(a)) if b < 1.0 => pct(Some(metrics::error_rate_reduction(b, a))),
        _ => "NA".to_string(),
    };
    format!(
        "variant,base,finetuned,finetuned_probe,error_rate_reduction_finetuned,error_rate_reduction_finetuned_probe\n\
         {variant},{},{},{},{},{}\n",
        pct(base),
        pct(ft),
        pct(ftp),
        err(ft),
        err(ftp)
    )
}

pub(super) fn run(a: ReportArgs) -> Result<()> {
    let mut manifest = RunManifest::new("report");
    // tags only: directories differ between machines, their contents are hashed as inputs
    let tags: Vec<&str> = a
        .evals
        .iter()
        .map(|e| e.split_once('=').map_or(e.as_str(), |(t, _)| t))
        .collect();
    manifest.set("evals", tags.join(" "));
    let data = load_dataset(&a.dataset, &mut manifest)?;
    let problems = problem_map(&data);
    let runs = a
        .evals
        .iter()
        .map(|spec| load_eval(spec, &problems, &mut manifest))
        .collect::<Result<Vec<_>>>()?;

    let mut points = run_points(&runs, &mut manifest)?;
    if let Some(path) = &a.points {
        points.extend(read_points(path)?);
        manifest.input(path)?;
    }
    let scatter = scatter(&runs, &mut manifest)?;

    create_out(&a.out)?;
    write_file(&a.out.join("figure2_scatter.csv"), scatter, &mut manifest)?;
    for (file, axis) in [
        ("figure3.csv", BinAxis::LogRatio),
        ("figure9.csv", BinAxis::DigitCount),
        ("figure10.csv", BinAxis::LogSum),
    ] {
        write_file(
            &a.out.join(file),
            metrics::curves_to_csv(&curves(&runs, axis)?),
            &mut manifest,
        )?;
    }
    write_file(
        &a.out.join("figure4_5.csv"),
        metrics::correlation_to_csv(&points),
        &mut manifest,
    )?;
    let correlation = match metrics::cross_model_correlation(&points) {
        Ok(rho) => format!("n={}\npearson_rho={rho}\n", points.len()),
        Err(e) => format!("n={}\npearson_rho=NA\nreason={e}\n", points.len()),
    };
    write_file(&a.out.join("correlation.txt"), correlation, &mut manifest)?;

    let accuracy_of = |tag: &str| runs.iter().find(|r| r.tag == tag).map(|r| r.accuracy);
    let table = table2_csv(data.variant.as_str(), TABLE_TAGS.map(accuracy_of));
    write_file(&a.out.join("table2.csv"), table, &mut manifest)?;
    finish(&manifest, &a.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_reduction_column() {
        let csv = table2_csv("int-sci", [Some(0.5733), Some(0.9161), None]);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "int-sci,57.33,91.61,NA,80.34,NA");
    }
}
