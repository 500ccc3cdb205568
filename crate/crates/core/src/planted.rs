//! Synthetic hidden states and comparators with known structure, used as
//! ground truth for probe correctness and for the regression-vs-classification
//! accuracy gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{annotate_problem, ComparisonProblem, Side};
use crate::metrics::{self, CorrelationPoint};
use crate::numerals::parse_numeral;
use crate::probes::{self, ProbeError, ProbeKind};
use crate::tensorio::{HiddenStateMatrix, RowLabel, TokenRole};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Accuracy of comparing two log2 magnitudes that each carry independent
/// Gaussian noise of std `noise_std`: `Φ(|Δ| / (σ√2))`.
pub fn comparator_closed_form(log_ratio: f64, noise_std: f64) -> f64 {
    normal_cdf(log_ratio.abs() / (noise_std * std::f64::consts::SQRT_2))
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `h = v · s + ε` for scalar signals `s`, with `ε` i.i.d. Gaussian whose std
/// is `noise_fraction` times the std of the noiseless entries.
fn plant(signal: &[f64], d: usize, noise_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let v = random_direction(rng, d);
    let clean: Vec<f64> = signal.iter().flat_map(|s| v.iter().map(move |vj| vj * s)).collect();
    let sigma = noise_fraction * std_dev(clean.iter().copied());
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite std");
    clean.into_iter().map(|c| (c + noise.sample(rng)) as f32).collect()
}

/// `n` rows of `d`-dimensional states linearly encoding the log2 magnitude of
/// random integers with 2 to 9 digits.
pub fn planted_magnitude_states(seed: u64, n: usize, d: usize, noise_fraction: f64) -> HiddenStateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets: Vec<f64> = (0..n)
        .map(|_| {
            let digits = rng.gen_range(2..=9u32);
            let x = rng.gen_range(10u64.pow(digits - 1)..10u64.pow(digits));
            (x as f64).log2()
        })
        .collect();
    let data = plant(&targets, d, noise_fraction, &mut rng);
    let labels = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| RowLabel {
            value_log2: Some(t),
            ..RowLabel::new(i as u64)
        })
        .collect();
    HiddenStateMatrix::new(data, n, d, 0, TokenRole::LastNumeralToken, labels, "planted").expect("consistent shape")
}

/// States linearly encoding `log2(a/b)` of each problem, labelled with gold
/// side and log-ratio.
pub fn planted_comparison_states(
    problems: &[ComparisonProblem],
    seed: u64,
    d: usize,
    noise_fraction: f64,
) -> HiddenStateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signal: Vec<f64> = problems.iter().map(|p| p.log_ratio).collect();
    let data = plant(&signal, d, noise_fraction, &mut rng);
    comparison_matrix(data, problems, d)
}

fn comparison_matrix(data: Vec<f32>, problems: &[ComparisonProblem], d: usize) -> HiddenStateMatrix {
    let labels = problems
        .iter()
        .map(|p| RowLabel {
            gold: Some(p.gold.label()),
            log_ratio: Some(p.log_ratio),
            ..RowLabel::new(p.id)
        })
        .collect();
    HiddenStateMatrix::new(
        data,
        problems.len(),
        d,
        0,
        TokenRole::LastPromptToken,
        labels,
        "planted",
    )
    .expect("consistent shape")
}

/// States that encode only which side is larger: `h = ±m·u + N(0, I)`.
/// The answer bit is equally readable at every log-ratio.
pub fn planted_answer_states(problems: &[ComparisonProblem], seed: u64, d: usize, margin: f64) -> HiddenStateMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_direction(&mut rng, d);
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut data = Vec::with_capacity(problems.len() * d);
    for p in problems {
        let s = if p.gold == Side::First { margin } else { -margin };
        for uj in &u {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((s * uj / norm + noise) as f32);
        }
    }
    comparison_matrix(data, problems, d)
}

/// Integer pairs whose log-ratios fall roughly uniformly inside each bin,
/// `per_bin` pairs per bin. Ids are consecutive from 0.
pub fn problems_by_log_ratio(seed: u64, edges: &[f64], per_bin: usize) -> Vec<ComparisonProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_bin * edges.len().saturating_sub(1));
    for w in edges.windows(2) {
        let mut made = 0;
        while made < per_bin {
            let delta = rng.gen_range(w[0]..w[1]);
            let a: u64 = rng.gen_range(100_000..1_000_000);
            let b = (a as f64 * (-delta).exp2()).round() as u64;
            if b == 0 || b == a {
                continue;
            }
            let pa = parse_numeral(&a.to_string()).expect("integer");
            let pb = parse_numeral(&b.to_string()).expect("integer");
            let mut p = annotate_problem(pa, pb).expect("distinct");
            if p.log_ratio < w[0] || p.log_ratio >= w[1] {
                continue;
            }
            p.id = out.len() as u64;
            out.push(p);
            made += 1;
        }
    }
    out
}

/// Compares `log2 a + ε_a` with `log2 b + ε_b`, each `ε ~ N(0, noise_std²)`.
pub fn noisy_comparator(problems: &[ComparisonProblem], noise_std: f64, seed: u64) -> Vec<Option<Side>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    problems
        .iter()
        .map(|p| {
            let ea = noise.sample(&mut rng);
            let eb = noise.sample(&mut rng);
            Some(if p.log_ratio + ea - eb > 0.0 {
                Side::First
            } else {
                Side::Second
            })
        })
        .collect()
}

/// Side predictions of a fitted classifier probe.
pub fn classifier_sides(model: &probes::ProbeModel, h: &HiddenStateMatrix) -> Result<Vec<Option<Side>>, ProbeError> {
    Ok(probes::predict_labels(model, h)?
        .into_iter()
        .map(|l| Some(Side::from_label(l)))
        .collect())
}

/// One synthetic "model": a magnitude representation with relative noise
/// `noise_fraction`, read out by a ridge probe (held-out R²), and verbalized
/// by a noisy comparator whose noise grows with the same fraction.
pub fn planted_model_point(
    tag: &str,
    seed: u64,
    noise_fraction: f64,
    problems: &[ComparisonProblem],
) -> Result<CorrelationPoint, ProbeError> {
    let h = planted_magnitude_states(seed, 2_000, 32, noise_fraction);
    let train: Vec<usize> = (0..1_500).collect();
    let held: Vec<usize> = (1_500..2_000).collect();
    let probe = probes::fit_probe(&h.select_rows(&train), ProbeKind::MagnitudeReg, 1.0)?;
    let r2 = probes::evaluate_probe(&probe, &h.select_rows(&held))?
        .r_squared()
        .unwrap_or(f64::NAN);
    // noise in log2 units: the fraction times the spread of the magnitudes
    let preds = noisy_comparator(problems, noise_fraction * 6.0 + 1e-9, seed ^ 0x5eed);
    let gold: Vec<Option<Side>> = problems.iter().map(|p| Some(p.gold)).collect();
    let verbal = metrics::comparison_accuracy(&preds, &gold).map_err(|e| ProbeError::DegenerateInput(e.to_string()))?;
    Ok(CorrelationPoint {
        tag: tag.to_string(),
        early_probe_metric: r2,
        verbal_accuracy: verbal,
    })
}
