//! Oracles shared by the integration targets.
#![allow(dead_code)]

use numprobe::dataset::{generate_cross_notation, PromptSpec, Variant};
use numprobe::toylm::model::{loss_and_grad, Layout, ProbeTarget, Sequence};
use numprobe::toylm::{LossWeights, ToyConfig, ToyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use numprobe::harness::manifest::sha256_hex;

/// Naive re-implementations. Nothing here calls into the crate.
pub mod brute {
    pub fn mse(pred: &[f64], gold: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..pred.len() {
            let d = pred[i] - gold[i].log2();
            s += d * d;
        }
        s / pred.len() as f64
    }

    fn median(v: &[f64]) -> f64 {
        // insertion sort
        let mut s: Vec<f64> = Vec::new();
        for &x in v {
            let pos = s.iter().position(|&y| y > x).unwrap_or(s.len());
            s.insert(pos, x);
        }
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        }
    }

    /// Log-space form: 2^median|ŷ − log2 x| − 1.
    pub fn re_log(pred: &[f64], gold: &[f64]) -> f64 {
        let d: Vec<f64> = (0..pred.len()).map(|i| (pred[i] - gold[i].log2()).abs()).collect();
        2f64.powf(median(&d)) - 1.0
    }

    /// Ratio form: median max(x̂/x, x/x̂) − 1 with x̂ = 2^ŷ.
    pub fn re_ratio(pred: &[f64], gold: &[f64]) -> f64 {
        let r: Vec<f64> = (0..pred.len())
            .map(|i| {
                let xh = 2f64.powf(pred[i]);
                (xh / gold[i]).max(gold[i] / xh)
            })
            .collect();
        median(&r) - 1.0
    }

    pub fn central_ratios(pred: &[f64], gold: &[f64]) -> (f64, f64) {
        let mut r: Vec<f64> = (0..pred.len())
            .map(|i| {
                let xh = 2f64.powf(pred[i]);
                (xh / gold[i]).max(gold[i] / xh)
            })
            .collect();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (r[r.len() / 2 - 1], r[r.len() / 2])
    }

    pub fn aacc(pred: &[f64], gold: &[f64]) -> f64 {
        let mut hits = 0;
        for i in 0..pred.len() {
            if (2f64.powf(pred[i]) - gold[i]).abs() < 0.01 * gold[i] {
                hits += 1;
            }
        }
        hits as f64 / pred.len() as f64
    }

    pub fn rho(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..x.len() {
            num += (x[i] - mx) * (y[i] - my);
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
        }
        num / vx.sqrt() / vy.sqrt()
    }

    pub fn r2(pred: &[f64], gold: &[f64]) -> f64 {
        let t: Vec<f64> = gold.iter().map(|g| g.log2()).collect();
        let m = t.iter().sum::<f64>() / t.len() as f64;
        let mut res = 0.0;
        let mut tot = 0.0;
        for i in 0..t.len() {
            res += (pred[i] - t[i]) * (pred[i] - t[i]);
            tot += (t[i] - m) * (t[i] - m);
        }
        1.0 - res / tot
    }
}

/// Outcome of comparing the analytic gradient of the total loss with central
/// differences on a small model.
pub struct GradientCheck {
    pub params: usize,
    pub coordinates: usize,
    /// Coordinates whose numeric derivative is clearly nonzero.
    pub informative: usize,
    pub worst_relative_error: f64,
}

fn tiny() -> ToyModel {
    ToyModel::new(ToyConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        context_len: 64,
        seed: 11,
    })
    .unwrap()
}

/// Three answer-only sequences from real problems with probe targets.
fn batch(model: &ToyModel) -> Vec<Sequence> {
    let data = generate_cross_notation(5, Variant::IntSci);
    let spec = PromptSpec::zero_shot(Variant::IntSci);
    data.train[..3]
        .iter()
        .map(|p| {
            let prompt = numprobe::dataset::make_prompt(p, &spec).unwrap();
            let mut tokens = model.tokenizer.encode(&prompt).unwrap();
            let prompt_len = tokens.len();
            tokens.extend(model.tokenizer.encode(&format!(" {}\n", p.answer_surface())).unwrap());
            Sequence {
                tokens,
                target_start: prompt_len - 1,
                probe: Some(ProbeTarget {
                    pos: prompt_len - 1,
                    label: f64::from(p.gold.label()),
                    log_ratio: p.log_ratio,
                }),
            }
        })
        .collect()
}

/// Central differences with step 1e-4 on L_LM + 0.3 L_reg + 0.7 L_cls.
pub fn gradient_check() -> GradientCheck {
    let model = tiny();
    let layout = Layout::new(&model.config);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // move away from the symmetric initialization so every tensor matters
    let params: Vec<f64> = model
        .params
        .iter()
        .map(|&p| p as f64 + rng.gen_range(-0.2..0.2))
        .collect();
    let batch = batch(&model);
    let weights = LossWeights {
        alpha: 0.3,
        beta: 0.7,
        probe_layer: Some(1),
    };
    let mut grad = vec![0.0; layout.total];
    loss_and_grad(&layout, &params, &batch, weights, Some(&mut grad)).unwrap();

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let coords = stratified_coordinates(&layout, &batch, &mut rng);
    let mut informative = 0;
    for &i in &coords {
        let mut p = params.clone();
        p[i] += h;
        let up = loss_and_grad(&layout, &p, &batch, weights, None).unwrap().l_total;
        p[i] -= 2.0 * h;
        let down = loss_and_grad(&layout, &p, &batch, weights, None).unwrap().l_total;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
        informative += usize::from(numeric.abs() > 1e-6);
    }
    GradientCheck {
        params: layout.total,
        coordinates: coords.len(),
        informative,
        worst_relative_error: worst,
    }
}

/// Two coordinates from every parameter tensor; embedding rows are drawn
/// from tokens that occur in the batch.
fn stratified_coordinates(layout: &Layout, batch: &[Sequence], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let d = layout.d;
    let mut regions = vec![(layout.pos_emb, 40 * d), (layout.lnf_g, d), (layout.lnf_b, d)];
    regions.extend([(layout.w_head, d * layout.vocab), (layout.b_head, layout.vocab)]);
    regions.extend([
        (layout.w_cls, d),
        (layout.b_cls, 1),
        (layout.w_reg, d),
        (layout.b_reg, 1),
    ]);
    for b in &layout.blocks {
        regions.extend([
            (b.ln1_g, d),
            (b.ln1_b, d),
            (b.w_qkv, 3 * d * d),
            (b.b_qkv, 3 * d),
            (b.w_o, d * d),
            (b.b_o, d),
            (b.ln2_g, d),
            (b.ln2_b, d),
            (b.w_fc, 4 * d * d),
            (b.b_fc, 4 * d),
            (b.w_proj, 4 * d * d),
            (b.b_proj, d),
        ]);
    }
    let mut coords = Vec::new();
    for (start, len) in regions {
        for _ in 0..2 {
            coords.push(start + rng.gen_range(0..len));
        }
    }
    for _ in 0..2 {
        let seq = &batch[rng.gen_range(0..batch.len())];
        let tok = seq.tokens[rng.gen_range(0..seq.tokens.len())] as usize;
        coords.push(layout.tok_emb + tok * d + rng.gen_range(0..d));
    }
    coords
}

/// Normal equations of ridge with an unpenalized intercept, solved by Gaussian
/// elimination with partial pivoting.
pub fn ridge_oracle(x: &[f64], n: usize, d: usize, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let p = d + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..n {
        let row: Vec<f64> = x[i * d..(i + 1) * d].iter().copied().chain([1.0]).collect();
        for r in 0..p {
            for c in 0..p {
                a[r][c] += row[r] * row[c];
            }
            a[r][p] += row[r] * y[i];
        }
    }
    for j in 0..d {
        a[j][j] += lambda;
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in col + 1..p {
            let f = a[r][col] / a[col][col];
            for c in col..=p {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut sol = vec![0.0; p];
    for r in (0..p).rev() {
        let s: f64 = (r + 1..p).map(|c| a[r][c] * sol[c]).sum();
        sol[r] = (a[r][p] - s) / a[r][r];
    }
    let b = sol.pop().unwrap();
    (sol, b)
}

// ---------------------------------------------------------------------------
// Running the binary

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn numprobe<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_numprobe"))
        .args(args)
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let r = numprobe(args);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    r
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Name → sha256 of every file under `dir`, recursively.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, sha256_hex(&fs::read(&path).unwrap()));
            }
        }
    }
    out
}

pub fn kv(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Seed-1 data, a 3-layer d=16 toy, both finetuning arms, three evals with
/// layer probes, and a report that also takes `points_csv` as extra points.
pub fn toy_pipeline(root: &Path, points_csv: &str) -> PathBuf {
    let t = |n: &str| root.join(n);
    ok(&["gen-data", "--seed", "1", "--out", p(&t("data"))]);
    ok(&[
        "toylm-train",
        "--seed",
        "1",
        "--base-size",
        "300",
        "--layers",
        "3",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--context",
        "96",
        "--out",
        p(&t("base")),
    ]);
    for (tag, beta) in [("ft", "0"), ("ftp", "0.02")] {
        ok(&[
            "toylm-finetune",
            "--checkpoint",
            p(&t("base/base.ckpt")),
            "--dataset",
            p(&t("data")),
            "--seed",
            "1",
            "--epochs",
            "1",
            "--beta",
            beta,
            "--out",
            p(&t(tag)),
        ]);
    }
    for (tag, ckpt) in [
        ("base", "base/base.ckpt"),
        ("ft", "ft/finetuned.ckpt"),
        ("ftp", "ftp/finetuned.ckpt"),
    ] {
        ok(&[
            "toylm-eval",
            "--checkpoint",
            p(&t(ckpt)),
            "--dataset",
            p(&t("data")),
            "--layer-probes",
            "--probe-train-size",
            "300",
            "--out",
            p(&t(&format!("eval_{tag}"))),
        ]);
    }
    let planted = t("planted.csv");
    fs::write(&planted, points_csv).unwrap();
    let evals: Vec<String> = ["base", "finetuned", "finetuned_probe"]
        .iter()
        .zip(["eval_base", "eval_ft", "eval_ftp"])
        .map(|(tag, dir)| format!("{tag}={}", p(&t(dir))))
        .collect();
    let mut args: Vec<String> = vec!["report".into(), "--dataset".into(), p(&t("data")).into()];
    for e in &evals {
        args.extend(["--eval".to_string(), e.clone()]);
    }
    args.extend([
        "--points".into(),
        p(&planted).into(),
        "--out".into(),
        p(&t("report")).into(),
    ]);
    ok(&args);
    t("report")
}
