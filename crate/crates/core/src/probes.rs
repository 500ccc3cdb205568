//! Linear probes on hidden states: ridge regression for log-magnitudes and
//! log-ratios, L2-regularized logistic regression for pairwise comparison,
//! and per-layer sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::{Split, SplitIndex};
use crate::linalg::{self, cholesky_solve};
use crate::metrics::{self, MetricsReport};
use crate::tensorio::{self, HiddenStateMatrix, TensorIoError, TokenRole};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_GAMMA: f64 = 1.0;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 1_000;

const PROBE_MAGIC: &[u8; 7] = b"PROBE1\n";

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("probe kind {actual} cannot be used for {wanted}")]
    KindMismatch { actual: ProbeKind, wanted: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("rows lack {0} labels")]
    MissingLabels(&'static str),
    #[error("inconsistent sweep files: {0}")]
    InconsistentFiles(String),
    #[error("no layer files to sweep")]
    EmptySweep,
    #[error("selection metric {metric} does not apply to {kind} probes")]
    BadSelection { metric: SelectionMetric, kind: ProbeKind },
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error("{path}: {message}")]
    BadProbeFile { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeKind {
    MagnitudeReg,
    LogRatioReg,
    Classifier,
}

impl ProbeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeKind::MagnitudeReg => "magnitude",
            ProbeKind::LogRatioReg => "log-ratio",
            ProbeKind::Classifier => "classifier",
        }
    }

    pub fn is_regression(self) -> bool {
        self != ProbeKind::Classifier
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "magnitude" => Ok(ProbeKind::MagnitudeReg),
            "log-ratio" => Ok(ProbeKind::LogRatioReg),
            "classifier" => Ok(ProbeKind::Classifier),
            other => Err(format!("unknown probe kind {other:?}")),
        }
    }
}

/// A trained linear readout `h ↦ h·w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub kind: ProbeKind,
    /// λ for regression probes, γ for the classifier.
    pub reg_strength: f64,
    pub trained_layer: i32,
    pub token_role: TokenRole,
}

impl ProbeModel {
    pub fn projection(&self, h: &HiddenStateMatrix) -> Result<Vec<f64>, ProbeError> {
        if h.d != self.w.len() {
            return Err(ProbeError::DimensionMismatch(format!(
                "probe expects {} columns, matrix has {}",
                self.w.len(),
                h.d
            )));
        }
        Ok((0..h.n)
            .map(|i| h.row(i).iter().zip(&self.w).map(|(&x, w)| x as f64 * w).sum::<f64>() + self.b)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "kind={}\nd={}\nlayer={}\ntoken_role={}\nreg_strength={}\n",
            self.kind,
            self.w.len(),
            self.trained_layer,
            self.token_role,
            self.reg_strength
        );
        let mut out = PROBE_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for w in &self.w {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.b.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let rest = bytes.strip_prefix(PROBE_MAGIC.as_slice()).ok_or("bad magic")?;
        let len = u32::from_le_bytes(rest.get(..4).ok_or("truncated")?.try_into().unwrap()) as usize;
        let header =
            std::str::from_utf8(rest.get(4..4 + len).ok_or("truncated header")?).map_err(|_| "header is not UTF-8")?;
        let fields: BTreeMap<&str, &str> = header.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| fields.get(k).copied().ok_or(format!("missing {k}"));
        let kind: ProbeKind = get("kind")?.parse()?;
        let d: usize = get("d")?.parse().map_err(|_| "bad d")?;
        let trained_layer: i32 = get("layer")?.parse().map_err(|_| "bad layer")?;
        let token_role: TokenRole = get("token_role")?.parse()?;
        let reg_strength: f64 = get("reg_strength")?.parse().map_err(|_| "bad reg_strength")?;
        let body = &rest[4 + len..];
        if body.len() != 8 * (d + 1) {
            return Err(format!(
                "expected {} parameter bytes, found {}",
                8 * (d + 1),
                body.len()
            ));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ProbeModel {
            w: values[..d].to_vec(),
            b: values[d],
            kind,
            reg_strength,
            trained_layer,
            token_role,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        fs::write(path, self.to_bytes()).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let bytes = fs::read(path).map_err(|source| ProbeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|message| ProbeError::BadProbeFile {
            path: path.to_path_buf(),
            message,
        })
    }
}

fn to_f64_checked(h: &HiddenStateMatrix) -> Result<Vec<f64>, ProbeError> {
    if h.data.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("hidden states"));
    }
    Ok(h.data.iter().map(|&v| v as f64).collect())
}

/// Closed-form ridge solution with an unpenalized intercept.
///
/// Returns `(w, b)` minimizing `‖y − Xw − b‖² + λ‖w‖²` by centering `X` and
/// `y` and solving `(XcᵀXc + λI) w = Xcᵀyc`. `λ = 0` is ordinary least squares
/// and needs a full-rank centered design.
pub fn ridge_solve(x: &[f64], n: usize, d: usize, y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64), ProbeError> {
    if x.len() != n * d || y.len() != n {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} targets for an {n}×{d} matrix",
            y.len()
        )));
    }
    if n == 0 {
        return Err(ProbeError::DegenerateInput("no samples".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(ProbeError::DegenerateInput(format!("lambda {lambda} must be >= 0")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("targets"));
    }
    let inv_n = 1.0 / n as f64;
    let mut col_mean = vec![0.0; d];
    for row in x.chunks_exact(d.max(1)).take(n) {
        for (m, v) in col_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    col_mean.iter_mut().for_each(|m| *m *= inv_n);
    let y_mean = y.iter().sum::<f64>() * inv_n;

    let mut centered = x.to_vec();
    if d > 0 {
        for row in centered.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&col_mean) {
                *v -= m;
            }
        }
    }
    let y_centered: Vec<f64> = y.iter().map(|v| v - y_mean).collect();

    let mut system = linalg::gram(&centered, n, d);
    for j in 0..d {
        system[j * d + j] += lambda;
    }
    let mut w = linalg::xt_vec(&centered, n, d, &y_centered);
    cholesky_solve(&mut system, d, &mut w)
        .map_err(|_| ProbeError::DegenerateInput("regularized normal equations are singular".into()))?;
    let b = y_mean - linalg::dot(&col_mean, &w);
    Ok((w, b))
}

/// Relative norm of the ridge objective's gradient at `(w, b)`; zero at the optimum.
pub fn ridge_stationarity_residual(x: &[f64], n: usize, d: usize, y: &[f64], lambda: f64, w: &[f64], b: f64) -> f64 {
    let residual: Vec<f64> = linalg::x_vec(x, d, w).iter().zip(y).map(|(p, t)| p + b - t).collect();
    let mut grad = linalg::xt_vec(x, n, d, &residual);
    for (g, wj) in grad.iter_mut().zip(w) {
        *g += lambda * wj;
    }
    grad.push(residual.iter().sum());
    let mut scale = linalg::xt_vec(x, n, d, y);
    scale.push(y.iter().sum());
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    norm(&grad) / norm(&scale).max(f64::MIN_POSITIVE)
}

/// Fits a ridge probe on a hidden-state matrix.
pub fn fit_ridge(
    h: &HiddenStateMatrix,
    targets: &[f64],
    lambda: f64,
    kind: ProbeKind,
) -> Result<ProbeModel, ProbeError> {
    if !kind.is_regression() {
        return Err(ProbeError::KindMismatch {
            actual: kind,
            wanted: "ridge regression",
        });
    }
    if targets.len() != h.n {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            h.n
        )));
    }
    let x = to_f64_checked(h)?;
    let (w, b) = ridge_solve(&x, h.n, h.d, targets, lambda)?;
    Ok(ProbeModel {
        w,
        b,
        kind,
        reg_strength: lambda,
        trained_layer: h.layer,
        token_role: h.token_role,
    })
}

pub fn predict_regression(m: &ProbeModel, h: &HiddenStateMatrix) -> Result<Vec<f64>, ProbeError> {
    if !m.kind.is_regression() {
        return Err(ProbeError::KindMismatch {
            actual: m.kind,
            wanted: "regression prediction",
        });
    }
    m.projection(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Gradient ∞-norm fell below the tolerance.
    GradientTolerance,
    MaxIterations,
    /// Line search could not decrease the objective further (precision floor).
    NoProgress,
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: ProbeModel,
    pub iterations: usize,
    pub stop: StopReason,
    pub gradient_norm: f64,
    /// Penalized negative log-likelihood after each accepted step, starting at `w = 0, b = 0`.
    pub objective_trace: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^z)
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Penalized negative log-likelihood `Σ softplus(z) − y·z + ‖w‖² / (2γ)`.
pub fn logistic_objective(x: &[f64], d: usize, labels: &[f64], gamma: f64, w: &[f64], b: f64) -> f64 {
    let data: f64 = x
        .chunks_exact(d.max(1))
        .zip(labels)
        .map(|(row, y)| {
            let z = linalg::dot(row, w) + b;
            softplus(z) - y * z
        })
        .sum();
    data + linalg::dot(w, w) / (2.0 * gamma)
}

/// Newton's method with backtracking on the penalized logistic objective.
///
/// The intercept is unpenalized. Starts from zero, so results are seed-free.
pub fn logistic_solve(
    x: &[f64],
    n: usize,
    d: usize,
    labels: &[u8],
    gamma: f64,
) -> Result<(Vec<f64>, f64, usize, StopReason, f64, Vec<f64>), ProbeError> {
    if x.len() != n * d || labels.len() != n {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} labels for an {n}×{d} matrix",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(ProbeError::DegenerateInput("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == n {
        return Err(ProbeError::SingleClass);
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(ProbeError::DegenerateInput(format!("gamma {gamma} must be > 0")));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let p = d + 1;
    let mut theta = vec![0.0; p];
    let objective = |theta: &[f64]| logistic_objective(x, d, &y, gamma, &theta[..d], theta[d]);
    let mut f = objective(&theta);
    let mut trace = vec![f];
    let mut weighted = vec![0.0; n * p];

    for iter in 0..MAX_ITERATIONS {
        let (w, b) = (&theta[..d], theta[d]);
        let probs: Vec<f64> = x
            .chunks_exact(d.max(1))
            .map(|row| sigmoid(linalg::dot(row, w) + b))
            .collect();
        let mut grad = vec![0.0; p];
        for ((row, pi), yi) in x.chunks_exact(d.max(1)).zip(&probs).zip(&y) {
            let r = pi - yi;
            for (g, xj) in grad.iter_mut().zip(row) {
                *g += r * xj;
            }
            grad[d] += r;
        }
        for j in 0..d {
            grad[j] += theta[j] / gamma;
        }
        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf <= GRADIENT_TOLERANCE {
            return Ok((
                theta[..d].to_vec(),
                theta[d],
                iter,
                StopReason::GradientTolerance,
                grad_inf,
                trace,
            ));
        }

        // Hessian AᵀSA + diag(1/γ, …, 1/γ, 0) with A = [X | 1].
        for (i, (row, pi)) in x.chunks_exact(d.max(1)).zip(&probs).enumerate() {
            let s = (pi * (1.0 - pi)).sqrt();
            let out = &mut weighted[i * p..(i + 1) * p];
            for (o, xj) in out.iter_mut().zip(row) {
                *o = s * xj;
            }
            out[d] = s;
        }
        let hessian = linalg::gram(&weighted, n, p);
        let mut damping = 0.0;
        let step = loop {
            let mut h = hessian.clone();
            for j in 0..d {
                h[j * p + j] += 1.0 / gamma + damping;
            }
            h[d * p + d] += damping;
            let mut step = grad.clone();
            if cholesky_solve(&mut h, p, &mut step).is_ok() {
                break step;
            }
            damping = if damping == 0.0 { 1e-10 } else { damping * 10.0 };
        };

        let slope: f64 = linalg::dot(&grad, &step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let fc = objective(&candidate);
            if fc <= f - 1e-4 * t * slope {
                accepted = Some((candidate, fc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            // at the rounding floor the Armijo test can accept fc == f forever
            Some((_, fc)) if fc >= f => {
                return Ok((
                    theta[..d].to_vec(),
                    theta[d],
                    iter,
                    StopReason::NoProgress,
                    grad_inf,
                    trace,
                ));
            }
            Some((candidate, fc)) => {
                theta = candidate;
                f = fc;
                trace.push(f);
            }
            None => {
                return Ok((
                    theta[..d].to_vec(),
                    theta[d],
                    iter,
                    StopReason::NoProgress,
                    grad_inf,
                    trace,
                ));
            }
        }
    }
    let (w, b) = (&theta[..d], theta[d]);
    let mut grad_inf = 0.0f64;
    let mut grad_b = 0.0;
    let mut grad_w = vec![0.0; d];
    for (row, yi) in x.chunks_exact(d.max(1)).zip(&y) {
        let r = sigmoid(linalg::dot(row, w) + b) - yi;
        for (g, xj) in grad_w.iter_mut().zip(row) {
            *g += r * xj;
        }
        grad_b += r;
    }
    for (g, wj) in grad_w.iter().zip(w) {
        grad_inf = grad_inf.max((g + wj / gamma).abs());
    }
    grad_inf = grad_inf.max(grad_b.abs());
    Ok((
        w.to_vec(),
        b,
        MAX_ITERATIONS,
        StopReason::MaxIterations,
        grad_inf,
        trace,
    ))
}

/// Fits the L2-regularized logistic comparison probe (`labels[i] = 1` iff a > b).
pub fn fit_logistic(h: &HiddenStateMatrix, labels: &[u8], gamma: f64) -> Result<LogisticFit, ProbeError> {
    if labels.len() != h.n {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            h.n
        )));
    }
    let x = to_f64_checked(h)?;
    let (w, b, iterations, stop, gradient_norm, objective_trace) = logistic_solve(&x, h.n, h.d, labels, gamma)?;
    Ok(LogisticFit {
        model: ProbeModel {
            w,
            b,
            kind: ProbeKind::Classifier,
            reg_strength: gamma,
            trained_layer: h.layer,
            token_role: h.token_role,
        },
        iterations,
        stop,
        gradient_norm,
        objective_trace,
    })
}

/// `σ(Hw + b)` per row.
pub fn predict_proba(m: &ProbeModel, h: &HiddenStateMatrix) -> Result<Vec<f64>, ProbeError> {
    if m.kind != ProbeKind::Classifier {
        return Err(ProbeError::KindMismatch {
            actual: m.kind,
            wanted: "probability prediction",
        });
    }
    Ok(m.projection(h)?.into_iter().map(sigmoid).collect())
}

/// 1 iff the first operand is predicted larger (`Hw + b > 0`).
pub fn predict_labels(m: &ProbeModel, h: &HiddenStateMatrix) -> Result<Vec<u8>, ProbeError> {
    if m.kind != ProbeKind::Classifier {
        return Err(ProbeError::KindMismatch {
            actual: m.kind,
            wanted: "class prediction",
        });
    }
    Ok(m.projection(h)?.into_iter().map(|z| u8::from(z > 0.0)).collect())
}

// ---------------------------------------------------------------------------
// Labels and evaluation

/// Training targets for `kind`, read from the matrix label block.
pub fn regression_targets(h: &HiddenStateMatrix, kind: ProbeKind) -> Result<Vec<f64>, ProbeError> {
    match kind {
        ProbeKind::MagnitudeReg => h
            .labels
            .iter()
            .map(|l| l.value_log2)
            .collect::<Option<Vec<_>>>()
            .ok_or(ProbeError::MissingLabels("value_log2")),
        ProbeKind::LogRatioReg => h
            .labels
            .iter()
            .map(|l| l.log_ratio)
            .collect::<Option<Vec<_>>>()
            .ok_or(ProbeError::MissingLabels("log_ratio")),
        ProbeKind::Classifier => Err(ProbeError::KindMismatch {
            actual: kind,
            wanted: "regression targets",
        }),
    }
}

pub fn class_labels(h: &HiddenStateMatrix) -> Result<Vec<u8>, ProbeError> {
    h.labels
        .iter()
        .map(|l| l.gold)
        .collect::<Option<Vec<_>>>()
        .ok_or(ProbeError::MissingLabels("gold"))
}

/// Fits a probe of `kind` with regularization `reg` on the matrix's own labels.
pub fn fit_probe(h: &HiddenStateMatrix, kind: ProbeKind, reg: f64) -> Result<ProbeModel, ProbeError> {
    match kind {
        ProbeKind::Classifier => Ok(fit_logistic(h, &class_labels(h)?, reg)?.model),
        _ => fit_ridge(h, &regression_targets(h, kind)?, reg, kind),
    }
}

/// Scores a probe against the matrix's labels.
///
/// Regression probes report log-space metrics; log-ratio probes additionally
/// report sign accuracy when gold labels are present. Classifiers report accuracy.
pub fn evaluate_probe(m: &ProbeModel, h: &HiddenStateMatrix) -> Result<MetricsReport, ProbeError> {
    let scores = m.projection(h)?;
    let empty = |e: metrics::MetricsError| ProbeError::DegenerateInput(e.to_string());
    match m.kind {
        ProbeKind::Classifier => {
            let gold = class_labels(h)?;
            let pred: Vec<u8> = scores.iter().map(|&z| u8::from(z > 0.0)).collect();
            Ok(MetricsReport {
                n: h.n,
                regression: None,
                accuracy: Some(metrics::comparison_accuracy(&pred, &gold).map_err(empty)?),
            })
        }
        kind => {
            let targets = regression_targets(h, kind)?;
            let regression = metrics::regression_metrics_log2(&scores, &targets).map_err(empty)?;
            let accuracy = match (kind, class_labels(h)) {
                (ProbeKind::LogRatioReg, Ok(gold)) => {
                    let pred: Vec<u8> = scores.iter().map(|&z| u8::from(z > 0.0)).collect();
                    Some(metrics::comparison_accuracy(&pred, &gold).map_err(empty)?)
                }
                _ => None,
            };
            Ok(MetricsReport {
                n: h.n,
                regression: Some(regression),
                accuracy,
            })
        }
    }
}

/// Row indices belonging to `split`.
pub fn rows_in_split(h: &HiddenStateMatrix, index: &SplitIndex, split: Split) -> Vec<usize> {
    h.labels
        .iter()
        .enumerate()
        .filter(|(_, l)| index.get(l.problem_id) == Some(split))
        .map(|(i, _)| i)
        .collect()
}

// ---------------------------------------------------------------------------
// Layer sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    R2,
    Accuracy,
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMetric::R2 => "r2",
            SelectionMetric::Accuracy => "accuracy",
        })
    }
}

impl FromStr for SelectionMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "r2" => Ok(SelectionMetric::R2),
            "accuracy" => Ok(SelectionMetric::Accuracy),
            other => Err(format!("unknown selection metric {other:?}")),
        }
    }
}

impl SelectionMetric {
    pub fn default_for(kind: ProbeKind) -> Self {
        if kind == ProbeKind::Classifier {
            SelectionMetric::Accuracy
        } else {
            SelectionMetric::R2
        }
    }

    fn value(self, report: &MetricsReport) -> Option<f64> {
        match self {
            SelectionMetric::R2 => report.r_squared(),
            SelectionMetric::Accuracy => report.accuracy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerSweepResult {
    /// Validation metrics per layer.
    pub per_layer: BTreeMap<i32, MetricsReport>,
    pub best_layer: i32,
    pub selection_metric: SelectionMetric,
    pub best_probe: ProbeModel,
    /// Test metrics of the best layer's probe, when test rows exist.
    pub test: Option<MetricsReport>,
}

/// Reads every `*.hstn` file in `dir`, ordered by layer.
pub fn load_sweep_dir(dir: &Path) -> Result<Vec<HiddenStateMatrix>, ProbeError> {
    let entries = fs::read_dir(dir).map_err(|source| ProbeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "hstn"))
        .collect();
    paths.sort();
    let mut matrices = paths
        .iter()
        .map(|p| tensorio::read_matrix(p))
        .collect::<Result<Vec<_>, _>>()?;
    matrices.sort_by_key(|m| m.layer);
    Ok(matrices)
}

/// Fits one probe per layer on training rows, scores it on validation rows,
/// and keeps the layer with the best validation metric (ties go to the lower
/// layer). Only the selected layer is scored on test rows.
pub fn sweep_layers(
    matrices: &[HiddenStateMatrix],
    splits: &SplitIndex,
    kind: ProbeKind,
    selection_metric: SelectionMetric,
    reg: f64,
) -> Result<LayerSweepResult, ProbeError> {
    let first = matrices.first().ok_or(ProbeError::EmptySweep)?;
    if selection_metric == SelectionMetric::R2 && !kind.is_regression()
        || selection_metric == SelectionMetric::Accuracy && kind == ProbeKind::MagnitudeReg
    {
        return Err(ProbeError::BadSelection {
            metric: selection_metric,
            kind,
        });
    }
    let mut seen_layers = std::collections::BTreeSet::new();
    for m in matrices {
        if m.token_role != first.token_role || m.n != first.n {
            return Err(ProbeError::InconsistentFiles(format!(
                "layer {} has role {} and n={}, layer {} has role {} and n={}",
                m.layer, m.token_role, m.n, first.layer, first.token_role, first.n
            )));
        }
        if m.labels
            .iter()
            .zip(&first.labels)
            .any(|(a, b)| a.problem_id != b.problem_id)
        {
            return Err(ProbeError::InconsistentFiles(format!(
                "layer {} has different problem ids",
                m.layer
            )));
        }
        if !seen_layers.insert(m.layer) {
            return Err(ProbeError::InconsistentFiles(format!(
                "layer {} appears twice",
                m.layer
            )));
        }
    }
    let train_rows = rows_in_split(first, splits, Split::Train);
    let val_rows = rows_in_split(first, splits, Split::Validation);
    let test_rows = rows_in_split(first, splits, Split::Test);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(ProbeError::DegenerateInput(
            "sweep needs train and validation rows".into(),
        ));
    }

    let mut per_layer = BTreeMap::new();
    let mut best: Option<(f64, &HiddenStateMatrix, ProbeModel)> = None;
    for m in matrices {
        let probe = fit_probe(&m.select_rows(&train_rows), kind, reg)?;
        let report = evaluate_probe(&probe, &m.select_rows(&val_rows))?;
        let score = selection_metric
            .value(&report)
            .filter(|v| !v.is_nan())
            .unwrap_or(f64::NEG_INFINITY);
        let better = |(s, b, _): &(f64, &HiddenStateMatrix, ProbeModel)| score > *s || score == *s && m.layer < b.layer;
        if best.as_ref().is_none_or(better) {
            best = Some((score, m, probe));
        }
        per_layer.insert(m.layer, report);
    }
    let (_, best_matrix, best_probe) = best.expect("at least one layer");
    let test = if test_rows.is_empty() {
        None
    } else {
        Some(evaluate_probe(&best_probe, &best_matrix.select_rows(&test_rows))?)
    };
    Ok(LayerSweepResult {
        per_layer,
        best_layer: best_matrix.layer,
        selection_metric,
        best_probe,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::RowLabel;

    fn matrix(data: Vec<f32>, n: usize, d: usize) -> HiddenStateMatrix {
        let labels = (0..n).map(|i| RowLabel::new(i as u64)).collect();
        HiddenStateMatrix::new(data, n, d, 0, TokenRole::LastNumeralToken, labels, "t").unwrap()
    }

    #[test]
    fn zero_features_give_mean_intercept() {
        let h = matrix(vec![0.0; 12], 4, 3);
        let y = [1.0, 2.0, 3.0, 6.0];
        let m = fit_ridge(&h, &y, 1.0, ProbeKind::MagnitudeReg).unwrap();
        assert!(m.w.iter().all(|&w| w == 0.0));
        assert_eq!(m.b, 3.0);
    }

    #[test]
    fn single_sample_is_intercept_only() {
        let h = matrix(vec![1.0], 1, 1);
        let m = fit_ridge(&h, &[2.0], 1.0, ProbeKind::MagnitudeReg).unwrap();
        assert_eq!((m.w[0], m.b), (0.0, 2.0));
        let empty = matrix(vec![], 0, 1);
        assert!(matches!(
            fit_ridge(&empty, &[], 1.0, ProbeKind::MagnitudeReg),
            Err(ProbeError::DegenerateInput(_))
        ));
    }

    #[test]
    fn ridge_errors() {
        let h = matrix(vec![1.0, 2.0], 2, 1);
        assert!(matches!(
            fit_ridge(&h, &[1.0], 1.0, ProbeKind::MagnitudeReg),
            Err(ProbeError::DimensionMismatch(_))
        ));
        assert!(matches!(
            fit_ridge(&h, &[1.0, 2.0], 1.0, ProbeKind::Classifier),
            Err(ProbeError::KindMismatch { .. })
        ));
    }

    #[test]
    fn constant_prediction() {
        let m = ProbeModel {
            w: vec![0.0; 3],
            b: 3.0,
            kind: ProbeKind::MagnitudeReg,
            reg_strength: 1.0,
            trained_layer: 0,
            token_role: TokenRole::LastNumeralToken,
        };
        let h = matrix((0..9).map(|v| v as f32).collect(), 3, 3);
        assert_eq!(predict_regression(&m, &h).unwrap(), vec![3.0; 3]);
        assert!(matches!(predict_proba(&m, &h), Err(ProbeError::KindMismatch { .. })));
        let wrong = matrix(vec![0.0; 4], 2, 2);
        assert!(matches!(
            predict_regression(&m, &wrong),
            Err(ProbeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn zero_classifier_is_half() {
        let m = ProbeModel {
            w: vec![0.0; 2],
            b: 0.0,
            kind: ProbeKind::Classifier,
            reg_strength: 1.0,
            trained_layer: 0,
            token_role: TokenRole::LastPromptToken,
        };
        let h = matrix(vec![1.0, -2.0, 3.5, 0.25], 2, 2);
        assert_eq!(predict_proba(&m, &h).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            predict_regression(&m, &h),
            Err(ProbeError::KindMismatch { .. })
        ));
    }

    #[test]
    fn logistic_errors() {
        let h = matrix(vec![1.0, 2.0, 3.0], 3, 1);
        assert!(matches!(
            fit_logistic(&h, &[1, 1, 1], 1.0),
            Err(ProbeError::SingleClass)
        ));
        assert!(matches!(
            fit_logistic(&h, &[1, 0], 1.0),
            Err(ProbeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn symmetric_data_has_zero_intercept() {
        // mirror-image features with flipped labels
        let rows = [[1.0f32, 0.5], [2.0, -1.0], [0.3, 0.7], [1.5, 1.5]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            data.extend_from_slice(r);
            labels.push((i % 2) as u8);
            data.extend(r.iter().map(|v| -v));
            labels.push(1 - (i % 2) as u8);
        }
        let h = matrix(data, 8, 2);
        let fit = fit_logistic(&h, &labels, 1.0).unwrap();
        assert!(fit.model.b.abs() <= 1e-6, "b = {}", fit.model.b);
        assert_eq!(fit.stop, StopReason::GradientTolerance);
    }

    #[test]
    fn probe_file_round_trip() {
        let m = ProbeModel {
            w: vec![0.1, -2.5, 1e-300],
            b: std::f64::consts::PI,
            kind: ProbeKind::LogRatioReg,
            reg_strength: 0.3,
            trained_layer: 17,
            token_role: TokenRole::LastPromptToken,
        };
        assert_eq!(ProbeModel::from_bytes(&m.to_bytes()).unwrap(), m);
        assert!(ProbeModel::from_bytes(b"nope").is_err());
    }
}
