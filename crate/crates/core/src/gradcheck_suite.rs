//! Finite-difference checks for every differentiable op and module, plus
//! the end-to-end loss of a micro detector. Run by `swinbird grad-check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{PatchMerging, SwinBlock};
use crate::config::{LossWeights, ModelConfig};
use crate::error::Result;
use crate::head::{encode_targets, total_loss, BBox, Head, STRIDE};
use crate::model::Detector;
use crate::neck::{SkipMerge, UpMerging};
use crate::tensor::{
    grad_check, grad_check_params, grad_check_params_sampled, GradCheckReport, Graph, Init, ParamStore, Tensor, Var,
};
use crate::window::{attention_mask, WindowAttention, WindowGrid};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub worst: String,
    pub passed: bool,
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values in `[-1, -margin] U [margin, 1]`, away from kinks at zero.
fn away_from_zero(shape: &[usize], seed: u64, margin: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum with fixed random weights.
fn probe(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(&g.shape(y), seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn record(out: &mut Vec<CheckResult>, name: &str, tol: f64, r: Result<GradCheckReport>) {
    let (err, checked, worst) = match r {
        Ok(r) => (r.max_rel_err, r.checked, r.worst),
        Err(e) => (f64::INFINITY, 0, e.to_string()),
    };
    out.push(CheckResult {
        name: name.to_string(),
        max_rel_err: err,
        tol,
        checked,
        worst,
        passed: err < tol,
    });
}

/// One check per primitive op, input gradients only.
pub fn op_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let x34 = rand_tensor(&[3, 4], 1);
    let c34 = rand_tensor(&[3, 4], 2);
    let add = |r: &mut Vec<CheckResult>, name: &str, x: &Tensor<f64>, f: &dyn Fn(&Graph<f64>, Var) -> Result<Var>| {
        record(r, name, OP_TOL, grad_check(|g, v| f(g, v), x, EPS));
    };
    add(&mut out, "add", &x34, &|g, x| {
        let c = g.constant(c34.clone());
        let y = g.add(x, c)?;
        let y = g.add(y, x)?;
        probe(g, y, 3)
    });
    let suffix = rand_tensor(&[4], 4);
    add(&mut out, "add_suffix (input)", &x34, &|g, x| {
        let b = g.constant(suffix.clone());
        let y = g.add_suffix(x, b)?;
        probe(g, y, 5)
    });
    add(&mut out, "add_suffix (broadcast operand)", &suffix, &|g, b| {
        let x = g.constant(x34.clone());
        let y = g.add_suffix(x, b)?;
        probe(g, y, 5)
    });
    add(&mut out, "mul", &x34, &|g, x| {
        let c = g.constant(c34.clone());
        let y = g.mul(x, c)?;
        let y = g.mul(y, x)?;
        probe(g, y, 6)
    });
    add(&mut out, "scale", &x34, &|g, x| {
        let y = g.scale(x, -2.5);
        probe(g, y, 7)
    });
    let b45 = rand_tensor(&[4, 5], 8);
    add(&mut out, "matmul (left)", &x34, &|g, x| {
        let b = g.constant(b45.clone());
        let y = g.matmul(x, b)?;
        probe(g, y, 9)
    });
    add(&mut out, "matmul (right)", &b45, &|g, b| {
        let a = g.constant(x34.clone());
        let y = g.matmul(a, b)?;
        probe(g, y, 9)
    });
    let batched = rand_tensor(&[2, 3, 3, 4], 10);
    let other = rand_tensor(&[2, 3, 5, 4], 11);
    add(&mut out, "matmul_t (batched, left)", &batched, &|g, a| {
        let b = g.constant(other.clone());
        let y = g.matmul_t(a, b)?;
        probe(g, y, 12)
    });
    add(&mut out, "matmul_t (batched, right)", &other, &|g, b| {
        let a = g.constant(batched.clone());
        let y = g.matmul_t(a, b)?;
        probe(g, y, 12)
    });
    add(&mut out, "gather (with zero fill)", &x34, &|g, x| {
        let map = vec![0, 5, 5, crate::tensor::layout::ZERO, 11, 2];
        let y = g.gather(x, map, &[2, 3])?;
        probe(g, y, 13)
    });
    add(&mut out, "reshape + permute", &batched, &|g, x| {
        let y = g.permute(x, &[3, 1, 0, 2])?;
        let y = g.reshape(y, &[4, 18])?;
        probe(g, y, 14)
    });
    add(&mut out, "softmax", &x34, &|g, x| {
        let y = g.softmax_lastdim(x);
        probe(g, y, 15)
    });
    let gamma = rand_tensor(&[4], 16).map(|v| 1.0 + 0.5 * v);
    let beta = rand_tensor(&[4], 17);
    add(&mut out, "layer_norm (input)", &x34, &|g, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        probe(g, y, 18)
    });
    add(&mut out, "layer_norm (gamma)", &gamma, &|g, ga| {
        let (x, be) = (g.constant(x34.clone()), g.constant(beta.clone()));
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        probe(g, y, 18)
    });
    add(&mut out, "layer_norm (beta)", &beta, &|g, be| {
        let (x, ga) = (g.constant(x34.clone()), g.constant(gamma.clone()));
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        probe(g, y, 18)
    });
    add(&mut out, "gelu", &x34, &|g, x| {
        let y = g.gelu(x);
        probe(g, y, 19)
    });
    let kinky = away_from_zero(&[3, 4], 20, 0.05);
    add(&mut out, "relu", &kinky, &|g, x| {
        let y = g.relu(x);
        probe(g, y, 21)
    });
    add(&mut out, "sigmoid", &x34, &|g, x| {
        let y = g.sigmoid(x);
        probe(g, y, 22)
    });
    add(&mut out, "clamp", &kinky, &|g, x| {
        let y = g.clamp(x, -0.5 + 0.01, 0.5 + 0.01);
        probe(g, y, 23)
    });
    let img = rand_tensor(&[1, 2, 5, 7], 24);
    let kern = rand_tensor(&[3, 2, 3, 3], 25);
    let bias = rand_tensor(&[3], 26);
    for (stride, pad) in [(1, 1), (2, 0)] {
        add(&mut out, &format!("conv2d stride {stride} pad {pad} (input)"), &img, &|g, x| {
            let (w, b) = (g.constant(kern.clone()), g.constant(bias.clone()));
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            probe(g, y, 27)
        });
        add(&mut out, &format!("conv2d stride {stride} pad {pad} (kernel)"), &kern, &|g, w| {
            let (x, b) = (g.constant(img.clone()), g.constant(bias.clone()));
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            probe(g, y, 27)
        });
        add(&mut out, &format!("conv2d stride {stride} pad {pad} (bias)"), &bias, &|g, b| {
            let (x, w) = (g.constant(img.clone()), g.constant(kern.clone()));
            let y = g.conv2d(x, w, Some(b), stride, pad)?;
            probe(g, y, 27)
        });
    }
    let c32 = rand_tensor(&[3, 2], 28);
    add(&mut out, "concat_last", &x34, &|g, x| {
        let c = g.constant(c32.clone());
        let y = g.concat_last(x, c)?;
        probe(g, y, 29)
    });
    add(&mut out, "sum + mean", &x34, &|g, x| {
        let s = g.sum(x);
        let y = g.mul(x, x)?;
        let m = g.mean(y);
        g.add(s, m)
    });
    let target = encode_targets::<f64>(&[BBox::new(4.0, 4.0, 14.0, 12.0)], 4, 4, STRIDE);
    let logits = rand_tensor(&[1, 4, 4], 30).map(|v| 2.0 * v);
    add(&mut out, "focal_loss", &logits, &|g, x| {
        let p = g.sigmoid(x);
        g.focal_loss(p, &target.heatmap, 2.0, 6.0)
    });
    let reg = rand_tensor(&[2, 4, 4], 31);
    add(&mut out, "masked_l1", &reg, &|g, x| {
        // targets far from predictions keep clear of the |.| kink
        g.masked_l1(x, &target.wh.map(|v| v + 3.0), &target.pos_mask)
    });
    out
}

/// Module checks over inputs and all parameters.
pub fn module_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut init = Init::new(5);

    // shifted window attention with padding and mask: 3x5 map, window 2
    let mut store = ParamStore::<f64>::new();
    let attn = WindowAttention::new(&mut store, &mut init, "attn", 4, 2, 2, true).expect("attention");
    let grid = WindowGrid::new(3, 5, 2, true).expect("grid");
    let mask = attention_mask(&grid).expect("mask");
    let x = rand_tensor(&[grid.num_windows(), 4, 4], 40);
    // queries with every key masked are cropped downstream; leave them out of the probe
    let mut live = rand_tensor(&[grid.num_windows(), 4, 4], 41);
    if let Some(m) = &mask {
        for row in 0..m.num_windows * m.n {
            if m.data[row * m.n..(row + 1) * m.n].iter().all(|&v| v < 0.0) {
                live.data_mut()[row * 4..(row + 1) * 4].fill(0.0);
            }
        }
    }
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, v: Var| -> Result<Var> {
        let y = attn.forward(g, s, v, mask.as_ref())?;
        let p = g.mul(y, g.constant(live.clone()))?;
        Ok(g.sum(p))
    };
    record(&mut out, "window attention (input)", OP_TOL, grad_check(|g, v| f(g, &store, v), &x, EPS));
    record(
        &mut out,
        "window attention (params)",
        OP_TOL,
        grad_check_params(&store, |g, s| f(g, s, g.constant(x.clone())), EPS),
    );

    let mut store = ParamStore::<f64>::new();
    let blk = SwinBlock::new(&mut store, &mut init, "blk", 4, 2, 2, true, 2, true).expect("block");
    let x = rand_tensor(&[3, 5, 4], 42);
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, v: Var| -> Result<Var> {
        let y = blk.forward(g, s, v)?;
        probe(g, y, 43)
    };
    record(&mut out, "shifted swin block (input)", OP_TOL, grad_check(|g, v| f(g, &store, v), &x, EPS));
    record(
        &mut out,
        "shifted swin block (params)",
        OP_TOL,
        grad_check_params(&store, |g, s| f(g, s, g.constant(x.clone())), EPS),
    );

    let mut store = ParamStore::<f64>::new();
    let merge = PatchMerging::new(&mut store, &mut init, "merge", 2).expect("merge");
    let x = rand_tensor(&[3, 4, 2], 44);
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, v: Var| -> Result<Var> {
        let y = merge.forward(g, s, v)?;
        probe(g, y, 45)
    };
    record(&mut out, "patch merging (input)", OP_TOL, grad_check(|g, v| f(g, &store, v), &x, EPS));
    record(
        &mut out,
        "patch merging (params)",
        OP_TOL,
        grad_check_params(&store, |g, s| f(g, s, g.constant(x.clone())), EPS),
    );

    let mut store = ParamStore::<f64>::new();
    let up = UpMerging::new(&mut store, &mut init, "up", 8).expect("up");
    let x = rand_tensor(&[2, 2, 8], 46);
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, v: Var| -> Result<Var> {
        let y = up.forward(g, s, v)?;
        probe(g, y, 47)
    };
    record(&mut out, "up merging (input)", OP_TOL, grad_check(|g, v| f(g, &store, v), &x, EPS));
    record(
        &mut out,
        "up merging (params)",
        OP_TOL,
        grad_check_params(&store, |g, s| f(g, s, g.constant(x.clone())), EPS),
    );

    let mut store = ParamStore::<f64>::new();
    let skip = SkipMerge::new(&mut store, &mut init, "skip", 3).expect("skip");
    let a = rand_tensor(&[2, 2, 3], 48);
    let b = rand_tensor(&[2, 2, 3], 49);
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, u: Var| -> Result<Var> {
        let k = g.constant(b.clone());
        let y = skip.forward(g, s, u, k)?;
        probe(g, y, 50)
    };
    record(&mut out, "skip merge (input)", OP_TOL, grad_check(|g, v| f(g, &store, v), &a, EPS));
    record(
        &mut out,
        "skip merge (params)",
        OP_TOL,
        grad_check_params(&store, |g, s| f(g, s, g.constant(a.clone())), EPS),
    );

    let mut store = ParamStore::<f64>::new();
    let head = Head::new(&mut store, &mut init, 3).expect("head");
    let feat = rand_tensor(&[3, 4, 4], 51);
    let targets = encode_targets::<f64>(&[BBox::new(2.0, 3.0, 9.0, 11.0)], 4, 4, STRIDE);
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, v: Var| -> Result<Var> {
        let out = head.forward_chw(g, s, v)?;
        Ok(total_loss(g, &out, &targets, &LossWeights::default())?.total)
    };
    record(&mut out, "head + total loss (input)", OP_TOL, grad_check(|g, v| f(g, &store, v), &feat, EPS));
    record(
        &mut out,
        "head + total loss (params)",
        OP_TOL,
        grad_check_params(&store, |g, s| f(g, s, g.constant(feat.clone())), EPS),
    );
    out
}

/// Total loss of the micro detector on a 32x32 scene with two boxes,
/// checked against the image and a sample of every parameter tensor.
pub fn model_check(per_tensor: usize) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let cfg = ModelConfig::micro();
    let model = Detector::<f64>::new(&cfg).expect("micro model");
    let img = rand_tensor(&[3, 32, 32], 60).map(|v| 0.5 + 0.4 * v);
    let boxes = [BBox::new(3.0, 5.0, 11.0, 12.0), BBox::new(18.0, 16.0, 29.0, 22.0)];
    let targets = encode_targets::<f64>(&boxes, 8, 8, STRIDE);
    let w = LossWeights::default();
    let f = |g: &Graph<f64>, s: &ParamStore<f64>, x: Var| -> Result<Var> {
        let o = model.forward_var(g, s, x)?;
        Ok(total_loss(g, &o, &targets, &w)?.total)
    };
    let x = Detector::normalize(&img);
    record(
        &mut out,
        "micro detector total loss (image)",
        MODEL_TOL,
        grad_check(|g, v| f(g, &model.store, v), &x, EPS),
    );
    record(
        &mut out,
        "micro detector total loss (params)",
        MODEL_TOL,
        grad_check_params_sampled(&model.store, |g, s| f(g, s, g.constant(x.clone())), EPS, per_tensor),
    );
    out
}

pub fn run_all() -> Vec<CheckResult> {
    let mut r = op_checks();
    r.extend(module_checks());
    r.extend(model_check(4));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_and_module_passes() {
        let mut all = op_checks();
        all.extend(module_checks());
        let failed: Vec<_> = all.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(all.len() > 30);
    }
}
