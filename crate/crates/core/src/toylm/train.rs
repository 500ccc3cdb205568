use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{self, Layout, LossParts, LossWeights, ProbeTarget, Sequence};
use super::{probe_layer, Example, ToyConfig, ToyError, ToyModel};
use crate::dataset::Side;
use crate::probes;
use crate::tensorio::{HiddenStateMatrix, RowLabel, TokenRole};

/// Which positions contribute to the language-model loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Every next-token prediction in the sequence.
    AllTokens,
    /// Only the answer tokens that follow the prompt.
    AnswerOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Linear warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub loss_mode: LossMode,
    /// Seeds the example order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epochs: 1,
            batch_size: 16,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            grad_clip: 1.0,
            loss_mode: LossMode::AllTokens,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ToyError> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(ToyError::InvalidConfig(
                "learning_rate, batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    /// Weight of the log-ratio regression head loss.
    pub alpha: f64,
    /// Weight of the comparison classifier head loss.
    pub beta: f64,
    pub probe_depth_fraction: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            alpha: 0.0,
            beta: 0.02,
            probe_depth_fraction: 0.9,
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// One optimizer step. Probe losses are `None` when no head is attached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_lm: f64,
    pub l_cls: Option<f64>,
    pub l_reg: Option<f64>,
    pub l_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        let mut out = String::from("step,l_lm,l_cls,l_reg,l_total\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.l_lm,
                opt(r.l_cls),
                opt(r.l_reg),
                r.l_total
            );
        }
        out
    }

    fn epoch_mean(&self, epoch: usize, f: impl Fn(&LogRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn epochs(&self) -> usize {
        self.rows.last().map_or(0, |r| r.epoch + 1)
    }

    /// Mean total loss of each epoch.
    pub fn epoch_total(&self) -> Vec<f64> {
        (0..self.epochs())
            .filter_map(|e| self.epoch_mean(e, |r| Some(r.l_total)))
            .collect()
    }

    /// Mean classifier-head loss of each epoch.
    pub fn epoch_cls(&self) -> Vec<f64> {
        (0..self.epochs())
            .filter_map(|e| self.epoch_mean(e, |r| r.l_cls))
            .collect()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(decay: Vec<bool>, weight_decay: f64) -> Self {
        let n = decay.len();
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            decay,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 / (1.0 - self.beta1.powi(self.t)) as f32;
        let c2 = 1.0 / (1.0 - self.beta2.powi(self.t)) as f32;
        let (lr, eps) = (lr as f32, self.eps as f32);
        let shrink = 1.0 - lr * self.weight_decay as f32;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.decay[i] {
                params[i] *= shrink;
            }
            params[i] -= lr * (self.m[i] * c1) / ((self.v[i] * c2).sqrt() + eps);
        }
    }
}

fn schedule(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let warmup = ((total as f64 * warmup_fraction).ceil() as usize).max(1);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    // cosine decay to a tenth of the peak
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    peak * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub(crate) fn to_sequence(model: &ToyModel, ex: &Example, mode: Option<LossMode>) -> Result<Sequence, ToyError> {
    let prompt = model.tokenizer.encode(&ex.prompt)?;
    let answer = model.tokenizer.encode(&ex.answer)?;
    let prompt_len = prompt.len();
    let mut tokens = prompt;
    if mode.is_some() {
        tokens.extend(answer);
    }
    if tokens.len() > model.config.context_len {
        return Err(ToyError::ContextOverflow {
            len: tokens.len(),
            max: model.config.context_len,
        });
    }
    if prompt_len == 0 {
        return Err(ToyError::InvalidConfig("empty prompt".into()));
    }
    let target_start = match mode {
        Some(LossMode::AllTokens) => 0,
        Some(LossMode::AnswerOnly) => prompt_len - 1,
        None => tokens.len(),
    };
    Ok(Sequence {
        tokens,
        target_start,
        probe: Some(ProbeTarget {
            pos: prompt_len - 1,
            label: if ex.gold == Side::First { 1.0 } else { 0.0 },
            log_ratio: ex.log_ratio,
        }),
    })
}

struct RunSpec<'a> {
    lr: f64,
    epochs: usize,
    batch_size: usize,
    warmup_fraction: f64,
    grad_clip: f64,
    weight_decay: f64,
    seed: u64,
    weights: LossWeights,
    seqs: &'a [Sequence],
}

fn run_training(model: &mut ToyModel, spec: RunSpec<'_>) -> Result<TrainLog, ToyError> {
    if spec.seqs.is_empty() {
        return Err(ToyError::EmptyCorpus);
    }
    let layout = model.layout();
    let mut opt = AdamW::new(layout.decay_mask(), spec.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let per_epoch = spec.seqs.len().div_ceil(spec.batch_size);
    let total = per_epoch * spec.epochs;
    let mut grad = vec![0.0f32; layout.total];
    let mut order: Vec<usize> = (0..spec.seqs.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut batch = Vec::with_capacity(spec.batch_size);
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| spec.seqs[i].clone()));
            grad.fill(0.0);
            let parts = model::loss_and_grad(&layout, &model.params, &batch, spec.weights, Some(&mut grad)).map_err(
                |e| match e {
                    ToyError::NonFiniteLoss { .. } => ToyError::NonFiniteLoss { step },
                    other => other,
                },
            )?;
            if spec.grad_clip > 0.0 {
                let norm = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(ToyError::NonFiniteLoss { step });
                }
                if norm > spec.grad_clip {
                    let s = (spec.grad_clip / norm) as f32;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            let lr = schedule(step, total, spec.warmup_fraction, spec.lr);
            opt.step(&mut model.params, &grad, lr);
            let probed = spec.weights.probe_layer.is_some();
            log.rows.push(LogRow {
                step,
                epoch,
                l_lm: parts.l_lm,
                l_cls: probed.then_some(parts.l_cls),
                l_reg: probed.then_some(parts.l_reg),
                l_total: parts.l_total,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Trains a fresh model on `corpus` with next-token cross-entropy.
pub fn train_lm(config: &ToyConfig, train: &TrainConfig, corpus: &[Example]) -> Result<(ToyModel, TrainLog), ToyError> {
    train.validate()?;
    let mut model = ToyModel::new(config.clone())?;
    let seqs = corpus
        .iter()
        .map(|ex| to_sequence(&model, ex, Some(train.loss_mode)))
        .collect::<Result<Vec<_>, _>>()?;
    let log = run_training(
        &mut model,
        RunSpec {
            lr: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            warmup_fraction: train.warmup_fraction,
            grad_clip: train.grad_clip,
            weight_decay: train.weight_decay,
            seed: train.seed,
            weights: LossWeights::lm_only(),
            seqs: &seqs,
        },
    )?;
    Ok((model, log))
}

/// Mean language-model loss per target token over `examples`, without updating.
pub fn mean_lm_loss(model: &ToyModel, examples: &[Example], mode: LossMode) -> Result<f64, ToyError> {
    let layout = model.layout();
    let mut nll = 0.0;
    let mut tokens = 0;
    for chunk in examples.chunks(32) {
        let batch = chunk
            .iter()
            .map(|ex| to_sequence(model, ex, Some(mode)))
            .collect::<Result<Vec<_>, _>>()?;
        let parts = model::loss_and_grad(&layout, &model.params, &batch, LossWeights::lm_only(), None)?;
        nll += parts.l_lm * parts.lm_tokens as f64;
        tokens += parts.lm_tokens;
    }
    Ok(if tokens > 0 { nll / tokens as f64 } else { 0.0 })
}

/// Probe-layer states at the last prompt token of every example, as a
/// matrix labelled with gold side and log-ratio.
pub fn prompt_states(model: &ToyModel, examples: &[Example], layer: usize) -> Result<HiddenStateMatrix, ToyError> {
    let layout = model.layout();
    let n_layers = layout.n_layers();
    if !(1..=n_layers).contains(&layer) {
        return Err(ToyError::LayerOutOfRange { layer, n_layers });
    }
    let mut tokens = Vec::with_capacity(examples.len());
    let mut positions = Vec::with_capacity(examples.len());
    for ex in examples {
        let t = model.encode_fitting(&ex.prompt)?;
        positions.push(vec![t.len() - 1]);
        tokens.push(t);
    }
    let data = states_at(&layout, &model.params, &tokens, &positions, &[layer])?.remove(0);
    let labels = examples
        .iter()
        .enumerate()
        .map(|(i, ex)| RowLabel {
            gold: Some(ex.gold.label()),
            log_ratio: Some(ex.log_ratio),
            ..RowLabel::new(i as u64)
        })
        .collect();
    HiddenStateMatrix::new(
        data,
        examples.len(),
        layout.d,
        layer as i32,
        TokenRole::LastPromptToken,
        labels,
        "toylm",
    )
    .map_err(|e| ToyError::InvalidConfig(e.to_string()))
}

/// Hidden states of `layers` at the given positions of each sequence, one
/// row-major matrix per layer with rows ordered by (sequence, position).
pub(crate) fn states_at(
    layout: &Layout,
    params: &[f32],
    tokens: &[Vec<u32>],
    positions: &[Vec<usize>],
    layers: &[usize],
) -> Result<Vec<Vec<f32>>, ToyError> {
    let d = layout.d;
    let mut out = vec![Vec::new(); layers.len()];
    for (toks, pos) in tokens.chunks(32).zip(positions.chunks(32)) {
        let (starts, streams) = model::residual_streams(layout, params, toks)?;
        for (o, &layer) in out.iter_mut().zip(layers) {
            for (&start, ps) in starts.iter().zip(pos) {
                for &p in ps {
                    let row = start + p;
                    o.extend_from_slice(&streams[layer][row * d..(row + 1) * d]);
                }
            }
        }
    }
    Ok(out)
}

/// Summary of the closed-form probe-head fit done before finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInit {
    pub layer: usize,
    pub train_accuracy: f64,
    pub logistic_iterations: usize,
}

/// Fits the classifier head (logistic, `gamma`) and log-ratio head (ridge,
/// `lambda`) on the model's current probe-layer states and installs them.
pub fn init_probe_head(
    model: &mut ToyModel,
    examples: &[Example],
    depth_fraction: f64,
    gamma: f64,
    lambda: f64,
) -> Result<ProbeInit, ToyError> {
    let layer = probe_layer(depth_fraction, model.config.n_layers);
    let h = prompt_states(model, examples, layer)?;
    let labels = probes::class_labels(&h)?;
    let fit = probes::fit_logistic(&h, &labels, gamma)?;
    let reg = probes::fit_ridge(
        &h,
        &probes::regression_targets(&h, probes::ProbeKind::LogRatioReg)?,
        lambda,
        probes::ProbeKind::LogRatioReg,
    )?;
    let layout = model.layout();
    for j in 0..layout.d {
        model.params[layout.w_cls + j] = fit.model.w[j] as f32;
        model.params[layout.w_reg + j] = reg.w[j] as f32;
    }
    model.params[layout.b_cls] = fit.model.b as f32;
    model.params[layout.b_reg] = reg.b as f32;
    model.probe_layer = Some(layer);
    let train_accuracy = probes::evaluate_probe(&fit.model, &h)?.accuracy.unwrap_or(f64::NAN);
    Ok(ProbeInit {
        layer,
        train_accuracy,
        logistic_iterations: fit.iterations,
    })
}

/// Accuracy of the model's own classifier head on `examples`.
pub fn probe_head_accuracy(model: &ToyModel, examples: &[Example]) -> Result<f64, ToyError> {
    let layer = model.probe_layer.ok_or(ToyError::UninitializedProbe)?;
    if examples.is_empty() {
        return Err(ToyError::EmptyCorpus);
    }
    let layout = model.layout();
    let weights = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        probe_layer: Some(layer),
    };
    let mut correct = 0;
    for chunk in examples.chunks(32) {
        let batch = chunk
            .iter()
            .map(|ex| to_sequence(model, ex, None))
            .collect::<Result<Vec<_>, _>>()?;
        let parts: LossParts = model::loss_and_grad(&layout, &model.params, &batch, weights, None)?;
        correct += parts.cls_correct;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Classifier-head logits (positive means "first is larger") on `examples`.
pub fn probe_head_scores(model: &ToyModel, examples: &[Example]) -> Result<Vec<f64>, ToyError> {
    let layer = model.probe_layer.ok_or(ToyError::UninitializedProbe)?;
    let h = prompt_states(model, examples, layer)?;
    let layout = model.layout();
    let w = &model.params[layout.w_cls..layout.w_cls + layout.d];
    let b = model.params[layout.b_cls] as f64;
    Ok((0..h.n)
        .map(|i| h.row(i).iter().zip(w).map(|(x, w)| *x as f64 * *w as f64).sum::<f64>() + b)
        .collect())
}

/// Full-parameter finetuning on `L_LM + α·L_reg + β·L_cls` with the LM loss
/// on answer tokens only. The input model is left untouched.
pub fn finetune(base: &ToyModel, data: &[Example], cfg: &FinetuneConfig) -> Result<(ToyModel, TrainLog), ToyError> {
    if cfg.alpha < 0.0 || cfg.beta < 0.0 || !cfg.alpha.is_finite() || !cfg.beta.is_finite() {
        return Err(ToyError::InvalidConfig("alpha and beta must be finite and >= 0".into()));
    }
    let layer = probe_layer(cfg.probe_depth_fraction, base.config.n_layers);
    let uses_probe = cfg.alpha > 0.0 || cfg.beta > 0.0;
    match base.probe_layer {
        None if uses_probe => return Err(ToyError::UninitializedProbe),
        Some(l) if l != layer => {
            return Err(ToyError::InvalidConfig(format!(
                "probe head was fitted at layer {l}, configuration asks for layer {layer}"
            )))
        }
        _ => {}
    }
    let train = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        loss_mode: LossMode::AnswerOnly,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    train.validate()?;
    let mut model = base.clone();
    let seqs = data
        .iter()
        .map(|ex| to_sequence(&model, ex, Some(LossMode::AnswerOnly)))
        .collect::<Result<Vec<_>, _>>()?;
    let log = run_training(
        &mut model,
        RunSpec {
            lr: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            warmup_fraction: train.warmup_fraction,
            grad_clip: train.grad_clip,
            weight_decay: train.weight_decay,
            seed: train.seed,
            weights: LossWeights {
                alpha: cfg.alpha,
                beta: cfg.beta,
                probe_layer: base.probe_layer,
            },
            seqs: &seqs,
        },
    )?;
    Ok((model, log))
}
