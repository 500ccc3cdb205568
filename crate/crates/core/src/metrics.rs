//! Probe and comparison metrics: log-space regression scores, accuracy,
//! binned accuracy curves, and cross-model correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{ComparisonProblem, Side};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("gold value at index {0} is not positive")]
    NonPositiveGold(usize),
    #[error("bin edges must be finite and strictly increasing")]
    UnsortedEdges,
    #[error("correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("a coordinate has zero variance; correlation is undefined")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub relative_error: f64,
    pub aacc: f64,
    /// NaN when either side has zero variance.
    pub pearson_rho: f64,
    /// Coefficient of determination `1 − SS_res / SS_tot`.
    pub r_squared: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub regression: Option<RegressionMetrics>,
    pub accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn r_squared(&self) -> Option<f64> {
        self.regression.map(|r| r.r_squared)
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = format!("n={}\n", self.n);
        if let Some(r) = &self.regression {
            let _ = writeln!(out, "mse={}", r.mse);
            let _ = writeln!(out, "relative_error={}", r.relative_error);
            let _ = writeln!(out, "aacc={}", r.aacc);
            let _ = writeln!(out, "pearson_rho={}", r.pearson_rho);
            let _ = writeln!(out, "r_squared={}", r.r_squared);
        }
        if let Some(acc) = self.accuracy {
            let _ = writeln!(out, "accuracy={acc}");
        }
        out
    }
}

fn check_lengths(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Median; even lengths average the two central order statistics.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pearson correlation, or NaN when a side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    // collinear inputs come out a few ulp short of ±1 from rounding alone
    if 1.0 - rho.abs() <= 8.0 * f64::EPSILON {
        rho.signum()
    } else {
        rho
    }
}

/// Regression metrics for log2-space predictions against positive gold values.
pub fn regression_metrics(pred: &[f64], gold: &[f64]) -> Result<RegressionMetrics, MetricsError> {
    check_lengths(pred.len(), gold.len())?;
    if let Some(i) = gold.iter().position(|&x| !(x > 0.0)) {
        return Err(MetricsError::NonPositiveGold(i));
    }
    let gold_log2: Vec<f64> = gold.iter().map(|x| x.log2()).collect();
    Ok(score(pred, &gold_log2, gold))
}

/// Same as [`regression_metrics`] with targets already in log2 space
/// (log-ratio probes); AAcc compares against `2^target`.
pub fn regression_metrics_log2(pred: &[f64], gold_log2: &[f64]) -> Result<RegressionMetrics, MetricsError> {
    check_lengths(pred.len(), gold_log2.len())?;
    let gold: Vec<f64> = gold_log2.iter().map(|g| g.exp2()).collect();
    Ok(score(pred, gold_log2, &gold))
}

fn score(pred: &[f64], gold_log2: &[f64], gold: &[f64]) -> RegressionMetrics {
    let n = pred.len() as f64;
    let residuals: Vec<f64> = pred.iter().zip(gold_log2).map(|(p, g)| p - g).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let within = pred
        .iter()
        .zip(gold)
        .filter(|(p, x)| (p.exp2() - **x).abs() < 0.01 * **x)
        .count();
    let gold_mean = mean(gold_log2);
    let ss_tot: f64 = gold_log2.iter().map(|g| (g - gold_mean).powi(2)).sum();
    RegressionMetrics {
        mse: ss_res / n,
        relative_error: median(&abs).exp2() - 1.0,
        aacc: within as f64 / n,
        pearson_rho: pearson(pred, gold_log2),
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN },
    }
}

/// Fraction of positions where prediction and gold agree.
pub fn comparison_accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, MetricsError> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinAxis {
    LogRatio,
    DigitCount,
    LogSum,
}

impl BinAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            BinAxis::LogRatio => "log_ratio",
            BinAxis::DigitCount => "digit_count",
            BinAxis::LogSum => "log_sum",
        }
    }

    pub fn value(self, p: &ComparisonProblem) -> f64 {
        match self {
            BinAxis::LogRatio => p.log_ratio,
            BinAxis::DigitCount => p.digit_len as f64,
            BinAxis::LogSum => p.log_sum,
        }
    }

    /// Log-ratio: 21 uniform bins on [-2, 2]; digits: one bin per length 2-9;
    /// log-sum: unit bins on [4, 32].
    pub fn default_edges(self) -> Vec<f64> {
        match self {
            BinAxis::LogRatio => (0..=21).map(|i| -2.0 + 4.0 * i as f64 / 21.0).collect(),
            BinAxis::DigitCount => (2..=10).map(f64::from).collect(),
            BinAxis::LogSum => (4..=32).map(f64::from).collect(),
        }
    }
}

impl std::str::FromStr for BinAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "log-ratio" | "log_ratio" => Ok(BinAxis::LogRatio),
            "digit-count" | "digit_count" => Ok(BinAxis::DigitCount),
            "log-sum" | "log_sum" => Ok(BinAxis::LogSum),
            other => Err(format!("unknown axis {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    /// Inclusive lower edge (`-inf` for the underflow bin).
    pub lower: f64,
    /// Exclusive upper edge (`+inf` for the overflow bin).
    pub upper: f64,
    pub count: usize,
    pub correct: usize,
}

impl Bin {
    /// `None` for empty bins.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCurve {
    pub axis: BinAxis,
    pub bin_edges: Vec<f64>,
    /// Underflow bin, one bin per consecutive edge pair, overflow bin.
    pub bins: Vec<Bin>,
}

impl BinnedCurve {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Bins strictly inside the edge range.
    pub fn interior(&self) -> &[Bin] {
        &self.bins[1..self.bins.len() - 1]
    }
}

/// Accuracy per half-open bin `[e_i, e_{i+1})`, plus two overflow bins so
/// every sample lands in exactly one bin. `None` predictions count as wrong.
pub fn binned_accuracy(
    problems: &[ComparisonProblem],
    predictions: &[Option<Side>],
    axis: BinAxis,
    bin_edges: &[f64],
) -> Result<BinnedCurve, MetricsError> {
    if problems.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch(predictions.len(), problems.len()));
    }
    if bin_edges.is_empty() || bin_edges.iter().any(|e| !e.is_finite()) || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::UnsortedEdges);
    }
    let mut bins: Vec<Bin> = std::iter::once(f64::NEG_INFINITY)
        .chain(bin_edges.iter().copied())
        .zip(bin_edges.iter().copied().chain(std::iter::once(f64::INFINITY)))
        .map(|(lower, upper)| Bin {
            lower,
            upper,
            count: 0,
            correct: 0,
        })
        .collect();
    for (p, pred) in problems.iter().zip(predictions) {
        let v = axis.value(p);
        // number of edges <= v is the bin index
        let idx = bin_edges.partition_point(|&e| e <= v);
        bins[idx].count += 1;
        if *pred == Some(p.gold) {
            bins[idx].correct += 1;
        }
    }
    Ok(BinnedCurve {
        axis,
        bin_edges: bin_edges.to_vec(),
        bins,
    })
}

/// CSV with one row per (method, bin); empty bins print `NA` accuracy.
pub fn curves_to_csv(curves: &[(String, BinnedCurve)]) -> String {
    let mut out = String::from("method,axis,lower,upper,count,correct,accuracy\n");
    for (method, curve) in curves {
        for bin in &curve.bins {
            let acc = bin.accuracy().map_or_else(|| "NA".to_string(), |a| a.to_string());
            let _ = writeln!(
                out,
                "{method},{},{},{},{},{},{acc}",
                curve.axis.as_str(),
                bin.lower,
                bin.upper,
                bin.count,
                bin.correct
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPoint {
    pub tag: String,
    /// Probe metric averaged over layers 1-3.
    pub early_probe_metric: f64,
    pub verbal_accuracy: f64,
}

/// Mean of the layer 1, 2, and 3 entries, if all are present.
pub fn early_layer_mean(per_layer: &BTreeMap<i32, f64>) -> Option<f64> {
    let values: Option<Vec<f64>> = (1..=3).map(|l| per_layer.get(&l).copied()).collect();
    values.map(|v| mean(&v))
}

/// Pearson correlation between early-layer probe quality and verbal accuracy across models.
pub fn cross_model_correlation(points: &[CorrelationPoint]) -> Result<f64, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::TooFewPoints(points.len()));
    }
    let x: Vec<f64> = points.iter().map(|p| p.early_probe_metric).collect();
    let y: Vec<f64> = points.iter().map(|p| p.verbal_accuracy).collect();
    let rho = pearson(&x, &y);
    if rho.is_nan() {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(rho)
}

pub fn correlation_to_csv(points: &[CorrelationPoint]) -> String {
    let mut out = String::from("tag,early_probe_metric,verbal_accuracy\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.tag, p.early_probe_metric, p.verbal_accuracy);
    }
    out
}

/// `(err_before − err_after) / err_before` for accuracies in [0, 1].
pub fn error_rate_reduction(acc_before: f64, acc_after: f64) -> f64 {
    let before = 1.0 - acc_before;
    let after = 1.0 - acc_after;
    (before - after) / before
}
