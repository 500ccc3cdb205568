//! Pre-LayerNorm GPT forward and backward passes over a flat parameter
//! vector, generic over the float type so gradients can be checked in f64.
//!
//! A batch is a set of variable-length sequences stacked row-wise; linear
//! layers run on the stacked matrix and attention runs per sequence.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ToyConfig, ToyError};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub trait Scalar: Float + NumAssign + Default + Debug + Send + Sync + Sum + 'static {
    /// `C ← alpha·A·B + beta·C` over strided row/column views.
    ///
    /// # Safety
    /// Every element addressed by the dimensions and strides must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn lit(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn lit(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// A strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
struct View {
    off: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn rows(off: usize, ld: usize) -> View {
        View { off, rs: ld, cs: 1 }
    }

    fn t(self) -> View {
        View {
            off: self.off,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last(self, r: usize, c: usize) -> usize {
        self.off + (r - 1) * self.rs + (c - 1) * self.cs
    }
}

/// `C (m×n) = A (m×k) · B (k×n)`, added to C when `accumulate`.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    av: View,
    b: &[S],
    bv: View,
    c: &mut [S],
    cv: View,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len());
    let beta = if accumulate { S::one() } else { S::zero() };
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[cv.off + i * cv.rs + j * cv.cs] = S::zero();
                }
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len() && bv.last(k, n) < b.len());
    // SAFETY: the asserts above bound the largest addressed index of each view.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Offsets of every tensor in the flat parameter vector. Weight matrices are
/// stored `in × out`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub d: usize,
    pub ctx: usize,
    pub heads: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_head: usize,
    pub b_head: usize,
    pub w_cls: usize,
    pub b_cls: usize,
    pub w_reg: usize,
    pub b_reg: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ToyConfig) -> Layout {
        let (v, d, t) = (cfg.vocab_size(), cfg.d_model, cfg.context_len);
        let mut next = 0;
        let mut take = |len: usize| {
            let at = next;
            next += len;
            at
        };
        let tok_emb = take(v * d);
        let pos_emb = take(t * d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_head = take(d * v);
        let b_head = take(v);
        let w_cls = take(d);
        let b_cls = take(1);
        let w_reg = take(d);
        let b_reg = take(1);
        Layout {
            vocab: v,
            d,
            ctx: t,
            heads: cfg.n_heads,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_head,
            b_head,
            w_cls,
            b_cls,
            w_reg,
            b_reg,
            total: next,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// True for parameters that receive decoupled weight decay (weight
    /// matrices and embeddings; not gains, biases, or the probe head).
    pub fn decay_mask(&self) -> Vec<bool> {
        let (v, d, t) = (self.vocab, self.d, self.ctx);
        let mut mask = vec![false; self.total];
        let mut mark = |at: usize, len: usize| mask[at..at + len].iter_mut().for_each(|m| *m = true);
        mark(self.tok_emb, v * d);
        mark(self.pos_emb, t * d);
        for b in &self.blocks {
            mark(b.w_qkv, 3 * d * d);
            mark(b.w_o, d * d);
            mark(b.w_fc, 4 * d * d);
            mark(b.w_proj, 4 * d * d);
        }
        mark(self.w_head, d * v);
        mask
    }
}

pub(crate) fn init_params(cfg: &ToyConfig) -> Vec<f32> {
    let layout = Layout::new(cfg);
    let d = layout.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let resid = Normal::new(0.0, INIT_STD / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");
    let mut p = vec![0.0f32; layout.total];
    let mut fill = |p: &mut [f32], at: usize, len: usize, dist: &Normal<f64>| {
        for x in &mut p[at..at + len] {
            *x = dist.sample(&mut rng) as f32;
        }
    };
    fill(&mut p, layout.tok_emb, layout.vocab * d, &normal);
    fill(&mut p, layout.pos_emb, layout.ctx * d, &normal);
    for b in &layout.blocks {
        p[b.ln1_g..b.ln1_g + d].fill(1.0);
        p[b.ln2_g..b.ln2_g + d].fill(1.0);
        fill(&mut p, b.w_qkv, 3 * d * d, &normal);
        fill(&mut p, b.w_o, d * d, &resid);
        fill(&mut p, b.w_fc, 4 * d * d, &normal);
        fill(&mut p, b.w_proj, 4 * d * d, &resid);
    }
    p[layout.lnf_g..layout.lnf_g + d].fill(1.0);
    fill(&mut p, layout.w_head, d * layout.vocab, &normal);
    p
}

/// One training or inference sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    /// Positions `t ≥ target_start` predict `tokens[t + 1]`; `tokens.len()` disables the LM loss.
    pub target_start: usize,
    pub probe: Option<ProbeTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeTarget {
    /// Token position whose probe-layer state feeds the heads.
    pub pos: usize,
    /// 1 when the first operand is larger.
    pub label: f64,
    pub log_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Layer (1-based) whose output feeds the probe heads; `None` skips them.
    pub probe_layer: Option<usize>,
}

impl LossWeights {
    pub fn lm_only() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            probe_layer: None,
        }
    }
}

/// Batch losses. `l_cls` and `l_reg` are per-sequence means; `l_lm` is the
/// mean over all target tokens in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_lm: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_total: f64,
    pub lm_tokens: usize,
    /// Fraction of probed sequences whose classifier logit has the gold sign.
    pub cls_correct: usize,
    pub probed: usize,
}

/// Activations kept for the backward pass.
struct Trace<S> {
    segs: Vec<(usize, usize)>,
    /// Residual stream entering each block; `x[n_layers]` is the final stream.
    x: Vec<Vec<S>>,
    xmid: Vec<Vec<S>>,
    ln1_hat: Vec<Vec<S>>,
    ln1_rstd: Vec<Vec<S>>,
    a1: Vec<Vec<S>>,
    qkv: Vec<Vec<S>>,
    /// Attention probabilities, per segment then head, `T × T` each.
    probs: Vec<Vec<S>>,
    prob_off: Vec<usize>,
    att: Vec<Vec<S>>,
    ln2_hat: Vec<Vec<S>>,
    ln2_rstd: Vec<Vec<S>>,
    a2: Vec<Vec<S>>,
    fc: Vec<Vec<S>>,
    act: Vec<Vec<S>>,
}

fn layer_norm<S: Scalar>(x: &[S], d: usize, g: &[S], b: &[S], out: &mut [S], hat: &mut [S], rstd: &mut [S]) {
    let inv_d = S::lit(1.0 / d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + S::lit(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            hat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
}

/// Backpropagates through LayerNorm, adding into `dx`, `dg`, `db`.
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    hat: &[S],
    rstd: &[S],
    d: usize,
    g: &[S],
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    let inv_d = S::lit(1.0 / d as f64);
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        let hr = &hat[r * d..(r + 1) * d];
        let mut mean_dh = S::zero();
        let mut mean_dh_h = S::zero();
        for j in 0..d {
            let dh = dyr[j] * g[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for j in 0..d {
            let dh = dyr[j] * g[j];
            dx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
}

fn add_bias<S: Scalar>(y: &mut [S], b: &[S]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += *bi;
        }
    }
}

fn bias_grad<S: Scalar>(dy: &[S], db: &mut [S]) {
    for row in dy.chunks_exact(db.len()) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += *v;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    S::lit(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let u = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    let t = u.tanh();
    S::lit(0.5) * (S::one() + t)
        + S::lit(0.5) * x * (S::one() - t * t) * S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_K) * x * x)
}

fn check_batch(layout: &Layout, batch: &[Sequence]) -> Result<(), ToyError> {
    for s in batch {
        if s.tokens.len() > layout.ctx {
            return Err(ToyError::ContextOverflow {
                len: s.tokens.len(),
                max: layout.ctx,
            });
        }
        if s.tokens.is_empty() {
            return Err(ToyError::InvalidConfig("empty sequence".into()));
        }
        if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= layout.vocab) {
            return Err(ToyError::InvalidConfig(format!("token id {t} outside the vocabulary")));
        }
        if let Some(p) = s.probe {
            if p.pos >= s.tokens.len() {
                return Err(ToyError::InvalidConfig(format!(
                    "probe position {} beyond sequence",
                    p.pos
                )));
            }
        }
    }
    Ok(())
}

fn forward<S: Scalar>(layout: &Layout, params: &[S], batch: &[Sequence]) -> Trace<S> {
    let (d, h_count) = (layout.d, layout.heads);
    let dh = d / h_count;
    let mut segs = Vec::with_capacity(batch.len());
    let mut n = 0;
    let mut prob_off = Vec::with_capacity(batch.len());
    let mut prob_len = 0;
    for s in batch {
        segs.push((n, s.tokens.len()));
        n += s.tokens.len();
        prob_off.push(prob_len);
        prob_len += h_count * s.tokens.len() * s.tokens.len();
    }

    let mut x0 = vec![S::zero(); n * d];
    for (s, &(start, len)) in batch.iter().zip(&segs) {
        for t in 0..len {
            let tok = s.tokens[t] as usize;
            let row = &mut x0[(start + t) * d..(start + t + 1) * d];
            let te = &params[layout.tok_emb + tok * d..][..d];
            let pe = &params[layout.pos_emb + t * d..][..d];
            for j in 0..d {
                row[j] = te[j] + pe[j];
            }
        }
    }

    let l_count = layout.n_layers();
    let mut tr = Trace {
        segs,
        x: vec![x0],
        xmid: Vec::with_capacity(l_count),
        ln1_hat: Vec::with_capacity(l_count),
        ln1_rstd: Vec::with_capacity(l_count),
        a1: Vec::with_capacity(l_count),
        qkv: Vec::with_capacity(l_count),
        probs: Vec::with_capacity(l_count),
        prob_off,
        att: Vec::with_capacity(l_count),
        ln2_hat: Vec::with_capacity(l_count),
        ln2_rstd: Vec::with_capacity(l_count),
        a2: Vec::with_capacity(l_count),
        fc: Vec::with_capacity(l_count),
        act: Vec::with_capacity(l_count),
    };
    let scale = S::lit(1.0 / (dh as f64).sqrt());

    for b in &layout.blocks {
        let x = tr.x.last().expect("stream");
        let mut hat = vec![S::zero(); n * d];
        let mut rstd = vec![S::zero(); n];
        let mut a1 = vec![S::zero(); n * d];
        layer_norm(
            x,
            d,
            &params[b.ln1_g..][..d],
            &params[b.ln1_b..][..d],
            &mut a1,
            &mut hat,
            &mut rstd,
        );

        let mut qkv = vec![S::zero(); n * 3 * d];
        gemm(
            n,
            d,
            3 * d,
            &a1,
            View::rows(0, d),
            params,
            View::rows(b.w_qkv, 3 * d),
            &mut qkv,
            View::rows(0, 3 * d),
            false,
        );
        add_bias(&mut qkv, &params[b.b_qkv..][..3 * d]);

        let mut probs = vec![S::zero(); prob_len];
        let mut att = vec![S::zero(); n * d];
        for (si, &(start, len)) in tr.segs.iter().enumerate() {
            for h in 0..h_count {
                let p_off = tr.prob_off[si] + h * len * len;
                let q = View::rows(start * 3 * d + h * dh, 3 * d);
                let k = View::rows(start * 3 * d + d + h * dh, 3 * d);
                let v = View::rows(start * 3 * d + 2 * d + h * dh, 3 * d);
                gemm(
                    len,
                    dh,
                    len,
                    &qkv,
                    q,
                    &qkv,
                    k.t(),
                    &mut probs,
                    View::rows(p_off, len),
                    false,
                );
                for i in 0..len {
                    let row = &mut probs[p_off + i * len..p_off + (i + 1) * len];
                    let mut max = S::neg_infinity();
                    for r in row.iter_mut().take(i + 1) {
                        *r *= scale;
                        max = max.max(*r);
                    }
                    let mut sum = S::zero();
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    let inv = S::one() / sum;
                    for r in row.iter_mut().take(i + 1) {
                        *r *= inv;
                    }
                    for r in row.iter_mut().skip(i + 1) {
                        *r = S::zero();
                    }
                }
                gemm(
                    len,
                    len,
                    dh,
                    &probs,
                    View::rows(p_off, len),
                    &qkv,
                    v,
                    &mut att,
                    View::rows(start * d + h * dh, d),
                    false,
                );
            }
        }

        let mut xmid = x.clone();
        gemm(
            n,
            d,
            d,
            &att,
            View::rows(0, d),
            params,
            View::rows(b.w_o, d),
            &mut xmid,
            View::rows(0, d),
            true,
        );
        add_bias(&mut xmid, &params[b.b_o..][..d]);

        let mut hat2 = vec![S::zero(); n * d];
        let mut rstd2 = vec![S::zero(); n];
        let mut a2 = vec![S::zero(); n * d];
        layer_norm(
            &xmid,
            d,
            &params[b.ln2_g..][..d],
            &params[b.ln2_b..][..d],
            &mut a2,
            &mut hat2,
            &mut rstd2,
        );
        let mut fc = vec![S::zero(); n * 4 * d];
        gemm(
            n,
            d,
            4 * d,
            &a2,
            View::rows(0, d),
            params,
            View::rows(b.w_fc, 4 * d),
            &mut fc,
            View::rows(0, 4 * d),
            false,
        );
        add_bias(&mut fc, &params[b.b_fc..][..4 * d]);
        let act: Vec<S> = fc.iter().map(|&v| gelu(v)).collect();
        let mut out = xmid.clone();
        gemm(
            n,
            4 * d,
            d,
            &act,
            View::rows(0, 4 * d),
            params,
            View::rows(b.w_proj, d),
            &mut out,
            View::rows(0, d),
            true,
        );
        add_bias(&mut out, &params[b.b_proj..][..d]);

        tr.ln1_hat.push(hat);
        tr.ln1_rstd.push(rstd);
        tr.a1.push(a1);
        tr.qkv.push(qkv);
        tr.probs.push(probs);
        tr.att.push(att);
        tr.xmid.push(xmid);
        tr.ln2_hat.push(hat2);
        tr.ln2_rstd.push(rstd2);
        tr.a2.push(a2);
        tr.fc.push(fc);
        tr.act.push(act);
        tr.x.push(out);
    }
    tr
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Computes `L_total = L_LM + α·L_reg + β·L_cls` on a batch and, when `grad`
/// is given, adds its gradient into `grad`.
///
/// The probe heads are evaluated whenever `weights.probe_layer` is set so
/// their losses can be logged; they only contribute gradient when their
/// weight is nonzero.
pub fn loss_and_grad<S: Scalar>(
    layout: &Layout,
    params: &[S],
    batch: &[Sequence],
    weights: LossWeights,
    grad: Option<&mut [S]>,
) -> Result<LossParts, ToyError> {
    check_batch(layout, batch)?;
    if let Some(layer) = weights.probe_layer {
        if !(1..=layout.n_layers()).contains(&layer) {
            return Err(ToyError::LayerOutOfRange {
                layer,
                n_layers: layout.n_layers(),
            });
        }
    }
    let (d, v) = (layout.d, layout.vocab);
    let tr = forward(layout, params, batch);
    let l_count = layout.n_layers();

    // Language-model head, only on rows that carry a target.
    let mut target_rows = Vec::new();
    let mut target_tokens = Vec::new();
    for (s, &(start, len)) in batch.iter().zip(&tr.segs) {
        for t in s.target_start..len.saturating_sub(1) {
            target_rows.push(start + t);
            target_tokens.push(s.tokens[t + 1] as usize);
        }
    }
    let m = target_rows.len();
    let mut xt = vec![S::zero(); m * d];
    for (i, &r) in target_rows.iter().enumerate() {
        xt[i * d..(i + 1) * d].copy_from_slice(&tr.x[l_count][r * d..(r + 1) * d]);
    }
    let mut hf_hat = vec![S::zero(); m * d];
    let mut hf_rstd = vec![S::zero(); m];
    let mut hf = vec![S::zero(); m * d];
    layer_norm(
        &xt,
        d,
        &params[layout.lnf_g..][..d],
        &params[layout.lnf_b..][..d],
        &mut hf,
        &mut hf_hat,
        &mut hf_rstd,
    );
    let mut logits = vec![S::zero(); m * v];
    gemm(
        m,
        d,
        v,
        &hf,
        View::rows(0, d),
        params,
        View::rows(layout.w_head, v),
        &mut logits,
        View::rows(0, v),
        false,
    );
    add_bias(&mut logits, &params[layout.b_head..][..v]);
    let mut nll = 0.0;
    // logits become softmax probabilities in place
    for (row, &tok) in logits.chunks_exact_mut(v).zip(&target_tokens) {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut sum = S::zero();
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        let inv = S::one() / sum;
        for z in row.iter_mut() {
            *z *= inv;
        }
        nll -= row[tok].as_f64().ln();
    }
    let l_lm = if m > 0 { nll / m as f64 } else { 0.0 };

    // Probe heads.
    let mut parts = LossParts {
        l_lm,
        lm_tokens: m,
        ..LossParts::default()
    };
    let mut probe_rows = Vec::new();
    if let Some(layer) = weights.probe_layer {
        let hs = &tr.x[layer];
        let w_cls = &params[layout.w_cls..][..d];
        let w_reg = &params[layout.w_reg..][..d];
        let (b_cls, b_reg) = (params[layout.b_cls].as_f64(), params[layout.b_reg].as_f64());
        for (s, &(start, _)) in batch.iter().zip(&tr.segs) {
            if let Some(p) = s.probe {
                let row = &hs[(start + p.pos) * d..(start + p.pos + 1) * d];
                let z = row.iter().zip(w_cls).map(|(&a, &b)| a * b).sum::<S>().as_f64() + b_cls;
                let r = row.iter().zip(w_reg).map(|(&a, &b)| a * b).sum::<S>().as_f64() + b_reg;
                parts.l_cls += softplus(z) - p.label * z;
                parts.l_reg += (r - p.log_ratio).powi(2);
                if (z > 0.0) == (p.label > 0.5) {
                    parts.cls_correct += 1;
                }
                probe_rows.push((start + p.pos, z, r, p));
            }
        }
        parts.probed = probe_rows.len();
        if parts.probed > 0 {
            parts.l_cls /= parts.probed as f64;
            parts.l_reg /= parts.probed as f64;
        }
    }
    parts.l_total = parts.l_lm;
    if weights.alpha != 0.0 {
        parts.l_total += weights.alpha * parts.l_reg;
    }
    if weights.beta != 0.0 {
        parts.l_total += weights.beta * parts.l_cls;
    }
    if !parts.l_total.is_finite() {
        return Err(ToyError::NonFiniteLoss { step: 0 });
    }

    let Some(grad) = grad else {
        return Ok(parts);
    };
    assert_eq!(grad.len(), layout.total);

    // Head backward.
    let mut dlogits = logits;
    if m > 0 {
        let inv_m = S::lit(1.0 / m as f64);
        for (row, &tok) in dlogits.chunks_exact_mut(v).zip(&target_tokens) {
            row[tok] -= S::one();
            for z in row.iter_mut() {
                *z *= inv_m;
            }
        }
    }
    gemm(
        d,
        m,
        v,
        &hf,
        View::rows(0, d).t(),
        &dlogits,
        View::rows(0, v),
        grad,
        View::rows(layout.w_head, v),
        true,
    );
    bias_grad(&dlogits, &mut grad[layout.b_head..layout.b_head + v]);
    let mut dhf = vec![S::zero(); m * d];
    gemm(
        m,
        v,
        d,
        &dlogits,
        View::rows(0, v),
        params,
        View::rows(layout.w_head, v).t(),
        &mut dhf,
        View::rows(0, d),
        false,
    );
    let mut dxt = vec![S::zero(); m * d];
    {
        let (dg, db) = split_two(grad, layout.lnf_g, layout.lnf_b, d);
        layer_norm_backward(
            &dhf,
            &hf_hat,
            &hf_rstd,
            d,
            &params[layout.lnf_g..][..d],
            &mut dxt,
            dg,
            db,
        );
    }
    let n: usize = tr.segs.iter().map(|s| s.1).sum();
    let mut dx = vec![S::zero(); n * d];
    for (i, &r) in target_rows.iter().enumerate() {
        for j in 0..d {
            dx[r * d + j] += dxt[i * d + j];
        }
    }

    let inv_p = if parts.probed > 0 {
        1.0 / parts.probed as f64
    } else {
        0.0
    };
    let add_probe_grad = |dx: &mut [S], grad: &mut [S]| {
        let Some(layer) = weights.probe_layer else { return };
        let hs = &tr.x[layer];
        for &(row, z, r, p) in &probe_rows {
            let dz = weights.beta * (sigmoid(z) - p.label) * inv_p;
            let dr = weights.alpha * 2.0 * (r - p.log_ratio) * inv_p;
            if dz == 0.0 && dr == 0.0 {
                continue;
            }
            let (dz, dr) = (S::lit(dz), S::lit(dr));
            let h = &hs[row * d..(row + 1) * d];
            for j in 0..d {
                dx[row * d + j] += dz * params[layout.w_cls + j] + dr * params[layout.w_reg + j];
                grad[layout.w_cls + j] += dz * h[j];
                grad[layout.w_reg + j] += dr * h[j];
            }
            grad[layout.b_cls] += dz;
            grad[layout.b_reg] += dr;
        }
    };

    let dh_count = layout.heads;
    let dh = d / dh_count;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    for l in (0..l_count).rev() {
        if weights.probe_layer == Some(l + 1) {
            add_probe_grad(&mut dx, grad);
        }
        let b = layout.blocks[l];
        // MLP: out = xmid + act·W_proj + b_proj
        gemm(
            4 * d,
            n,
            d,
            &tr.act[l],
            View::rows(0, 4 * d).t(),
            &dx,
            View::rows(0, d),
            grad,
            View::rows(b.w_proj, d),
            true,
        );
        bias_grad(&dx, &mut grad[b.b_proj..b.b_proj + d]);
        let mut dact = vec![S::zero(); n * 4 * d];
        gemm(
            n,
            d,
            4 * d,
            &dx,
            View::rows(0, d),
            params,
            View::rows(b.w_proj, d).t(),
            &mut dact,
            View::rows(0, 4 * d),
            false,
        );
        for (g, &f) in dact.iter_mut().zip(&tr.fc[l]) {
            *g *= gelu_grad(f);
        }
        gemm(
            d,
            n,
            4 * d,
            &tr.a2[l],
            View::rows(0, d).t(),
            &dact,
            View::rows(0, 4 * d),
            grad,
            View::rows(b.w_fc, 4 * d),
            true,
        );
        bias_grad(&dact, &mut grad[b.b_fc..b.b_fc + 4 * d]);
        let mut da2 = vec![S::zero(); n * d];
        gemm(
            n,
            4 * d,
            d,
            &dact,
            View::rows(0, 4 * d),
            params,
            View::rows(b.w_fc, 4 * d).t(),
            &mut da2,
            View::rows(0, d),
            false,
        );
        // dx already holds d(out)/d(xmid) through the residual path.
        {
            let (dg, db) = split_two(grad, b.ln2_g, b.ln2_b, d);
            layer_norm_backward(
                &da2,
                &tr.ln2_hat[l],
                &tr.ln2_rstd[l],
                d,
                &params[b.ln2_g..][..d],
                &mut dx,
                dg,
                db,
            );
        }

        // Attention: xmid = x + att·W_o + b_o
        gemm(
            d,
            n,
            d,
            &tr.att[l],
            View::rows(0, d).t(),
            &dx,
            View::rows(0, d),
            grad,
            View::rows(b.w_o, d),
            true,
        );
        bias_grad(&dx, &mut grad[b.b_o..b.b_o + d]);
        let mut datt = vec![S::zero(); n * d];
        gemm(
            n,
            d,
            d,
            &dx,
            View::rows(0, d),
            params,
            View::rows(b.w_o, d).t(),
            &mut datt,
            View::rows(0, d),
            false,
        );

        let qkv = &tr.qkv[l];
        let probs = &tr.probs[l];
        let mut dqkv = vec![S::zero(); n * 3 * d];
        for (si, &(start, len)) in tr.segs.iter().enumerate() {
            let mut dp = vec![S::zero(); len * len];
            for h in 0..dh_count {
                let p_off = tr.prob_off[si] + h * len * len;
                let q = View::rows(start * 3 * d + h * dh, 3 * d);
                let k = View::rows(start * 3 * d + d + h * dh, 3 * d);
                let vv = View::rows(start * 3 * d + 2 * d + h * dh, 3 * d);
                let dout = View::rows(start * d + h * dh, d);
                gemm(
                    len,
                    dh,
                    len,
                    &datt,
                    dout,
                    qkv,
                    vv.t(),
                    &mut dp,
                    View::rows(0, len),
                    false,
                );
                gemm(
                    len,
                    len,
                    dh,
                    probs,
                    View::rows(p_off, len).t(),
                    &datt,
                    dout,
                    &mut dqkv,
                    vv,
                    false,
                );
                for i in 0..len {
                    let p_row = &probs[p_off + i * len..p_off + i * len + i + 1];
                    let dp_row = &mut dp[i * len..(i + 1) * len];
                    let dot: S = p_row.iter().zip(dp_row.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        dp_row[j] = p_row[j] * (dp_row[j] - dot) * scale;
                    }
                    for g in dp_row.iter_mut().skip(i + 1) {
                        *g = S::zero();
                    }
                }
                gemm(len, len, dh, &dp, View::rows(0, len), qkv, k, &mut dqkv, q, false);
                gemm(len, len, dh, &dp, View::rows(0, len).t(), qkv, q, &mut dqkv, k, false);
            }
        }
        gemm(
            d,
            n,
            3 * d,
            &tr.a1[l],
            View::rows(0, d).t(),
            &dqkv,
            View::rows(0, 3 * d),
            grad,
            View::rows(b.w_qkv, 3 * d),
            true,
        );
        bias_grad(&dqkv, &mut grad[b.b_qkv..b.b_qkv + 3 * d]);
        let mut da1 = vec![S::zero(); n * d];
        gemm(
            n,
            3 * d,
            d,
            &dqkv,
            View::rows(0, 3 * d),
            params,
            View::rows(b.w_qkv, 3 * d).t(),
            &mut da1,
            View::rows(0, d),
            false,
        );
        {
            let (dg, db) = split_two(grad, b.ln1_g, b.ln1_b, d);
            layer_norm_backward(
                &da1,
                &tr.ln1_hat[l],
                &tr.ln1_rstd[l],
                d,
                &params[b.ln1_g..][..d],
                &mut dx,
                dg,
                db,
            );
        }
    }

    for (s, &(start, len)) in batch.iter().zip(&tr.segs) {
        for t in 0..len {
            let tok = s.tokens[t] as usize;
            let row = &dx[(start + t) * d..(start + t + 1) * d];
            for j in 0..d {
                grad[layout.tok_emb + tok * d + j] += row[j];
                grad[layout.pos_emb + t * d + j] += row[j];
            }
        }
    }
    Ok(parts)
}

/// Disjoint mutable slices of length `len` at offsets `a < b`.
fn split_two<S>(buf: &mut [S], a: usize, b: usize, len: usize) -> (&mut [S], &mut [S]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// Residual stream after every block (index 0 is the embedding output) for
/// a batch of sequences stacked row-wise. Also returns each sequence's first row.
pub fn residual_streams<S: Scalar>(
    layout: &Layout,
    params: &[S],
    tokens: &[Vec<u32>],
) -> Result<(Vec<usize>, Vec<Vec<S>>), ToyError> {
    let batch: Vec<Sequence> = tokens
        .iter()
        .map(|t| Sequence {
            tokens: t.clone(),
            target_start: t.len(),
            probe: None,
        })
        .collect();
    check_batch(layout, &batch)?;
    let tr = forward(layout, params, &batch);
    Ok((tr.segs.iter().map(|s| s.0).collect(), tr.x))
}

/// Incremental decoder with a key/value cache for greedy generation.
pub struct Decoder<'a, S: Scalar> {
    layout: &'a Layout,
    params: &'a [S],
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<'a, S: Scalar> Decoder<'a, S> {
    pub fn new(layout: &'a Layout, params: &'a [S]) -> Self {
        let cap = layout.ctx * layout.d;
        Decoder {
            layout,
            params,
            keys: vec![Vec::with_capacity(cap); layout.n_layers()],
            values: vec![Vec::with_capacity(cap); layout.n_layers()],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token and returns next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<S>, ToyError> {
        let (layout, params) = (self.layout, self.params);
        let (d, v) = (layout.d, layout.vocab);
        if self.len >= layout.ctx {
            return Err(ToyError::ContextOverflow {
                len: self.len + 1,
                max: layout.ctx,
            });
        }
        if token as usize >= v {
            return Err(ToyError::InvalidConfig(format!(
                "token id {token} outside the vocabulary"
            )));
        }
        let t = self.len;
        let heads = layout.heads;
        let dh = d / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut x: Vec<S> = (0..d)
            .map(|j| params[layout.tok_emb + token as usize * d + j] + params[layout.pos_emb + t * d + j])
            .collect();
        let mut hat = vec![S::zero(); d];
        let mut rstd = [S::zero()];
        let mut a = vec![S::zero(); d];
        for (l, b) in layout.blocks.iter().enumerate() {
            layer_norm(
                &x,
                d,
                &params[b.ln1_g..][..d],
                &params[b.ln1_b..][..d],
                &mut a,
                &mut hat,
                &mut rstd,
            );
            let mut qkv = vec![S::zero(); 3 * d];
            gemm(
                1,
                d,
                3 * d,
                &a,
                View::rows(0, d),
                params,
                View::rows(b.w_qkv, 3 * d),
                &mut qkv,
                View::rows(0, 3 * d),
                false,
            );
            add_bias(&mut qkv, &params[b.b_qkv..][..3 * d]);
            self.keys[l].extend_from_slice(&qkv[d..2 * d]);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut att = vec![S::zero(); d];
            let mut scores = vec![S::zero(); t + 1];
            for h in 0..heads {
                let q = &qkv[h * dh..(h + 1) * dh];
                let mut max = S::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                    *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale;
                    max = max.max(*s);
                }
                let mut sum = S::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut att[h * dh..(h + 1) * dh];
                for (j, &s) in scores.iter().enumerate() {
                    let p = s / sum;
                    for (o, &vj) in out.iter_mut().zip(&values[j * d + h * dh..j * d + (h + 1) * dh]) {
                        *o += p * vj;
                    }
                }
            }
            gemm(
                1,
                d,
                d,
                &att,
                View::rows(0, d),
                params,
                View::rows(b.w_o, d),
                &mut x,
                View::rows(0, d),
                true,
            );
            add_bias(&mut x, &params[b.b_o..][..d]);
            layer_norm(
                &x,
                d,
                &params[b.ln2_g..][..d],
                &params[b.ln2_b..][..d],
                &mut a,
                &mut hat,
                &mut rstd,
            );
            let mut fc = vec![S::zero(); 4 * d];
            gemm(
                1,
                d,
                4 * d,
                &a,
                View::rows(0, d),
                params,
                View::rows(b.w_fc, 4 * d),
                &mut fc,
                View::rows(0, 4 * d),
                false,
            );
            add_bias(&mut fc, &params[b.b_fc..][..4 * d]);
            fc.iter_mut().for_each(|f| *f = gelu(*f));
            gemm(
                1,
                4 * d,
                d,
                &fc,
                View::rows(0, 4 * d),
                params,
                View::rows(b.w_proj, d),
                &mut x,
                View::rows(0, d),
                true,
            );
            add_bias(&mut x, &params[b.b_proj..][..d]);
        }
        layer_norm(
            &x,
            d,
            &params[layout.lnf_g..][..d],
            &params[layout.lnf_b..][..d],
            &mut a,
            &mut hat,
            &mut rstd,
        );
        let mut logits = vec![S::zero(); v];
        gemm(
            1,
            d,
            v,
            &a,
            View::rows(0, d),
            params,
            View::rows(layout.w_head, v),
            &mut logits,
            View::rows(0, v),
            false,
        );
        add_bias(&mut logits, &params[layout.b_head..][..v]);
        self.len += 1;
        Ok(logits)
    }
}

/// Index of the largest logit (lowest index on ties).
pub fn argmax<S: Scalar>(logits: &[S]) -> u32 {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as u32
}
