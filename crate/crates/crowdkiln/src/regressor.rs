//! A small self-contained convolutional regressor with dual-resolution heads.
//!
//! Layer schedule:
//!   trunk: conv3x3(1->16)+ReLU -> maxpool2 -> conv3x3(16->32)+ReLU ->
//!          maxpool2 -> conv3x3(32->32)+ReLU -> maxpool2      (stride 8)
//!   HR head: tconv4x4-s2(32->16)+ReLU -> conv1x1(16->1)      (stride 4)
//!   LR head: conv3x3-s2(32->16)+ReLU -> conv1x1(16->1)       (stride 16)
//!
//! Forward/backward are hand-written; `grad_check` verifies the analytic
//! gradients against central finite differences.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

// Parameter order is fixed; checkpoints and optimizer state mirror it.
const PARAM_SPECS: [(&str, &[usize]); 14] = [
    ("trunk.conv1.w", &[16, 1, 3, 3]),
    ("trunk.conv1.b", &[16]),
    ("trunk.conv2.w", &[32, 16, 3, 3]),
    ("trunk.conv2.b", &[32]),
    ("trunk.conv3.w", &[32, 32, 3, 3]),
    ("trunk.conv3.b", &[32]),
    ("hr.tconv.w", &[32, 16, 4, 4]),
    ("hr.tconv.b", &[16]),
    ("hr.proj.w", &[1, 16, 1, 1]),
    ("hr.proj.b", &[1]),
    ("lr.conv.w", &[16, 32, 3, 3]),
    ("lr.conv.b", &[16]),
    ("lr.proj.w", &[1, 16, 1, 1]),
    ("lr.proj.b", &[1]),
];

const C1_W: usize = 0;
const C1_B: usize = 1;
const C2_W: usize = 2;
const C2_B: usize = 3;
const C3_W: usize = 4;
const C3_B: usize = 5;
const HRT_W: usize = 6;
const HRT_B: usize = 7;
const HRP_W: usize = 8;
const HRP_B: usize = 9;
const LRC_W: usize = 10;
const LRC_B: usize = 11;
const LRP_W: usize = 12;
const LRP_B: usize = 13;

pub const ARCH_NAME: &str = "dualhead-v1";

#[derive(Debug, Clone)]
pub struct RegressorModel {
    pub precision: Precision,
    params: Vec<Tensor>,
}

/// Parameter gradients, in model parameter order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[param_index(name)]
    }
    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[param_index(name)]
    }
}

pub fn param_names() -> Vec<&'static str> {
    PARAM_SPECS.iter().map(|(n, _)| *n).collect()
}

fn param_index(name: &str) -> usize {
    PARAM_SPECS
        .iter()
        .position(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("unknown parameter {name}"))
}

impl RegressorModel {
    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[param_index(name)]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params[param_index(name)]
    }

    pub fn params(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_SPECS
            .iter()
            .zip(&self.params)
            .map(|(&(name, _), t)| (name, t))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

/// Fan-in-scaled uniform weights, zero biases, drawn from a ChaCha8 stream.
pub fn init_model(seed: u64, precision: Precision) -> RegressorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(PARAM_SPECS.len());
    for (name, dims) in PARAM_SPECS {
        let mut t = Tensor::zeros(dims);
        if name.ends_with(".w") {
            let fan_in: usize = dims[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut t.data {
                *v = rng.gen_range(-bound..bound);
            }
        }
        if precision == Precision::Single {
            t.quantize_f32();
        }
        params.push(t);
    }
    RegressorModel { precision, params }
}

// ---------------------------------------------------------------------------
// layer primitives
// ---------------------------------------------------------------------------

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Direct convolution; weight layout [Cout, Cin, kh, kw].
fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (cout, kh, kw) = (w.dims[0], w.dims[2], w.dims[3]);
    debug_assert_eq!(w.dims[1], cin);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let bias = b.data[co];
        out.data[co * oh * ow..(co + 1) * oh * ow].fill(bias);
    }
    for co in 0..cout {
        for ci in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = w.data[((co * cin + ci) * kh + ki) * kw + kj];
                    // oj range with jj = oj*stride + kj - pad in [0, wd)
                    let oj_lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
                    let oj_hi = if wd + pad > kj {
                        ((wd + pad - kj - 1) / stride + 1).min(ow)
                    } else {
                        0
                    };
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let x_row = (ci * h + ii as usize) * wd;
                        let o_row = (co * oh + oi) * ow;
                        if stride == 1 {
                            let x_off = x_row + oj_lo + kj - pad; // jj = oj + kj - pad
                            for (idx, oj) in (oj_lo..oj_hi).enumerate() {
                                out.data[o_row + oj] += wv * x.data[x_off + idx];
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                let jj = oj * stride + kj - pad;
                                out.data[o_row + oj] += wv * x.data[x_row + jj];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of `conv2d`: gradients for input, weight, and bias.
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (cout, kh, kw) = (w.dims[0], w.dims[2], w.dims[3]);
    let (oh, ow) = (grad_out.dims[1], grad_out.dims[2]);
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let g_plane = &grad_out.data[co * oh * ow..(co + 1) * oh * ow];
        gb.data[co] = g_plane.iter().sum();
        for ci in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = w.data[((co * cin + ci) * kh + ki) * kw + kj];
                    let mut acc = 0.0;
                    let oj_lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
                    let oj_hi = if wd + pad > kj {
                        ((wd + pad - kj - 1) / stride + 1).min(ow)
                    } else {
                        0
                    };
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let x_row = (ci * h + ii as usize) * wd;
                        let o_row = oi * ow;
                        for oj in oj_lo..oj_hi {
                            let jj = oj * stride + kj - pad;
                            let g = g_plane[o_row + oj];
                            acc += g * x.data[x_row + jj];
                            gx.data[x_row + jj] += g * wv;
                        }
                    }
                    gw.data[((co * cin + ci) * kh + ki) * kw + kj] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution; weight layout [Cin, Cout, kh, kw].
fn tconv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (cout, kh, kw) = (w.dims[1], w.dims[2], w.dims[3]);
    debug_assert_eq!(w.dims[0], cin);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let bias = b.data[co];
        out.data[co * oh * ow..(co + 1) * oh * ow].fill(bias);
    }
    for ci in 0..cin {
        for co in 0..cout {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = w.data[((ci * cout + co) * kh + ki) * kw + kj];
                    // oj = j*stride + kj - pad must land in [0, ow)
                    let j_lo = pad.saturating_sub(kj).div_ceil(stride).min(wd);
                    let j_hi = if ow + pad > kj {
                        ((ow + pad - kj - 1) / stride + 1).min(wd)
                    } else {
                        0
                    };
                    for i in 0..h {
                        let oi = (i * stride + ki) as isize - pad as isize;
                        if oi < 0 || oi >= oh as isize {
                            continue;
                        }
                        let o_row = (co * oh + oi as usize) * ow;
                        let x_row = (ci * h + i) * wd;
                        for j in j_lo..j_hi {
                            let oj = j * stride + kj - pad;
                            out.data[o_row + oj] += wv * x.data[x_row + j];
                        }
                    }
                }
            }
        }
    }
    out
}

fn tconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (cout, kh, kw) = (w.dims[1], w.dims[2], w.dims[3]);
    let (oh, ow) = (grad_out.dims[1], grad_out.dims[2]);
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = Tensor::zeros(&[cout]);
    for co in 0..cout {
        gb.data[co] = grad_out.data[co * oh * ow..(co + 1) * oh * ow].iter().sum();
    }
    for ci in 0..cin {
        for co in 0..cout {
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = w.data[((ci * cout + co) * kh + ki) * kw + kj];
                    let mut acc = 0.0;
                    let j_lo = pad.saturating_sub(kj).div_ceil(stride).min(wd);
                    let j_hi = if ow + pad > kj {
                        ((ow + pad - kj - 1) / stride + 1).min(wd)
                    } else {
                        0
                    };
                    for i in 0..h {
                        let oi = (i * stride + ki) as isize - pad as isize;
                        if oi < 0 || oi >= oh as isize {
                            continue;
                        }
                        let o_row = (co * oh + oi as usize) * ow;
                        let x_row = (ci * h + i) * wd;
                        for j in j_lo..j_hi {
                            let oj = j * stride + kj - pad;
                            let g = grad_out.data[o_row + oj];
                            acc += g * x.data[x_row + j];
                            gx.data[x_row + j] += g * wv;
                        }
                    }
                    gw.data[((ci * cout + co) * kh + ki) * kw + kj] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 2x2 max pooling; ties broken by first occurrence in row-major order.
fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (oh, ow) = (h / 2, wd / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (ch * h + oi * 2 + di) * wd + oj * 2 + dj;
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (ch * oh + oi) * ow + oj;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn maxpool2_backward(grad_out: &Tensor, argmax: &[u32], input_dims: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(input_dims);
    for (g, &idx) in grad_out.data.iter().zip(argmax) {
        gx.data[idx as usize] += g;
    }
    gx
}

fn relu(mut x: Tensor) -> Tensor {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// Mask the gradient by the post-activation output (zero where output is 0).
fn relu_backward(mut grad: Tensor, out: &Tensor) -> Tensor {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

/// Intermediates required by `backward`.
pub struct ForwardCache {
    input: Tensor,
    a1: Tensor,
    p1: Tensor,
    am1: Vec<u32>,
    a2: Tensor,
    p2: Tensor,
    am2: Vec<u32>,
    a3: Tensor,
    p3: Tensor,
    am3: Vec<u32>,
    h1: Tensor,
    l1: Tensor,
}

pub fn image_to_tensor(img: &ImageTensor) -> Tensor {
    Tensor::from_vec(
        &[1, img.height, img.width],
        img.pixels.iter().map(|&v| v as f64).collect(),
    )
}

pub fn forward(model: &RegressorModel, input: &Tensor) -> Result<(Tensor, Tensor, ForwardCache)> {
    if input.dims.len() != 3 || input.dims[0] != 1 {
        return Err(Error::Shape(format!(
            "expected [1, H, W] input, got {:?}",
            input.dims
        )));
    }
    let (h, w) = (input.dims[1], input.dims[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!(
            "input dims {h}x{w} must be multiples of 16"
        )));
    }
    let p = &model.params;
    let a1 = relu(conv2d(input, &p[C1_W], &p[C1_B], 1, 1));
    let (p1, am1) = maxpool2(&a1);
    let a2 = relu(conv2d(&p1, &p[C2_W], &p[C2_B], 1, 1));
    let (p2, am2) = maxpool2(&a2);
    let a3 = relu(conv2d(&p2, &p[C3_W], &p[C3_B], 1, 1));
    let (p3, am3) = maxpool2(&a3);
    let h1 = relu(tconv2d(&p3, &p[HRT_W], &p[HRT_B], 2, 1));
    let hr = conv2d(&h1, &p[HRP_W], &p[HRP_B], 1, 0);
    let l1 = relu(conv2d(&p3, &p[LRC_W], &p[LRC_B], 2, 1));
    let lr = conv2d(&l1, &p[LRP_W], &p[LRP_B], 1, 0);
    let cache = ForwardCache {
        input: input.clone(),
        a1,
        p1,
        am1,
        a2,
        p2,
        am2,
        a3,
        p3,
        am3,
        h1,
        l1,
    };
    Ok((hr, lr, cache))
}

pub fn backward(
    model: &RegressorModel,
    cache: &ForwardCache,
    grad_hr: &Tensor,
    grad_lr: &Tensor,
) -> Result<Gradients> {
    let p = &model.params;
    let hr_dims = [1, cache.h1.dims[1], cache.h1.dims[2]];
    let lr_dims = [1, cache.l1.dims[1], cache.l1.dims[2]];
    if grad_hr.dims != hr_dims {
        return Err(Error::Shape(format!(
            "grad_hr dims {:?} do not match {:?}",
            grad_hr.dims, hr_dims
        )));
    }
    if grad_lr.dims != lr_dims {
        return Err(Error::Shape(format!(
            "grad_lr dims {:?} do not match {:?}",
            grad_lr.dims, lr_dims
        )));
    }

    // HR head
    let (g_h1, gw_hrp, gb_hrp) = conv2d_backward(&cache.h1, &p[HRP_W], 1, 0, grad_hr);
    let g_h1 = relu_backward(g_h1, &cache.h1);
    let (g_p3_hr, gw_hrt, gb_hrt) = tconv2d_backward(&cache.p3, &p[HRT_W], 2, 1, &g_h1);

    // LR head
    let (g_l1, gw_lrp, gb_lrp) = conv2d_backward(&cache.l1, &p[LRP_W], 1, 0, grad_lr);
    let g_l1 = relu_backward(g_l1, &cache.l1);
    let (g_p3_lr, gw_lrc, gb_lrc) = conv2d_backward(&cache.p3, &p[LRC_W], 2, 1, &g_l1);

    // Both heads accumulate into the shared trunk.
    let mut g_p3 = g_p3_hr;
    for (a, b) in g_p3.data.iter_mut().zip(&g_p3_lr.data) {
        *a += b;
    }

    let g_a3 = maxpool2_backward(&g_p3, &cache.am3, &cache.a3.dims);
    let g_a3 = relu_backward(g_a3, &cache.a3);
    let (g_p2, gw_c3, gb_c3) = conv2d_backward(&cache.p2, &p[C3_W], 1, 1, &g_a3);

    let g_a2 = maxpool2_backward(&g_p2, &cache.am2, &cache.a2.dims);
    let g_a2 = relu_backward(g_a2, &cache.a2);
    let (g_p1, gw_c2, gb_c2) = conv2d_backward(&cache.p1, &p[C2_W], 1, 1, &g_a2);

    let g_a1 = maxpool2_backward(&g_p1, &cache.am1, &cache.a1.dims);
    let g_a1 = relu_backward(g_a1, &cache.a1);
    let (_, gw_c1, gb_c1) = conv2d_backward(&cache.input, &p[C1_W], 1, 1, &g_a1);

    Ok(Gradients {
        tensors: vec![
            gw_c1, gb_c1, gw_c2, gb_c2, gw_c3, gb_c3, gw_hrt, gb_hrt, gw_hrp, gb_hrp, gw_lrc,
            gb_lrc, gw_lrp, gb_lrp,
        ],
    })
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Classical momentum: v <- m v + g; p <- p - lr v.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &RegressorModel, learning_rate: f64, momentum: f64) -> OptimizerState {
        OptimizerState {
            learning_rate,
            momentum,
            velocity: model.params.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

pub fn sgd_step(model: &mut RegressorModel, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if grads.tensors.len() != model.params.len() || opt.velocity.len() != model.params.len() {
        return Err(Error::Shape("gradient/velocity count mismatch".into()));
    }
    for ((p, g), v) in model
        .params
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut opt.velocity)
    {
        if p.dims != g.dims {
            return Err(Error::Shape(format!(
                "param dims {:?} vs grad dims {:?}",
                p.dims, g.dims
            )));
        }
        for ((pv, gv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
            *vv = opt.momentum * *vv + gv;
            *pv -= opt.learning_rate * *vv;
        }
        if model.precision == Precision::Single {
            p.quantize_f32();
            v.quantize_f32();
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

fn half_sq_loss(model: &RegressorModel, input: &Tensor, g_hr: &Tensor, g_lr: &Tensor) -> f64 {
    let (hr, lr, _) = forward(model, input).expect("forward in grad check");
    let mut loss = 0.0;
    for (a, b) in hr.data.iter().zip(&g_hr.data) {
        loss += 0.5 * (a - b) * (a - b);
    }
    for (a, b) in lr.data.iter().zip(&g_lr.data) {
        loss += 0.5 * (a - b) * (a - b);
    }
    loss
}

/// Compare analytic gradients of 1/2 ||F_HR - g_hr||^2 + 1/2 ||F_LR - g_lr||^2
/// against central finite differences on up to `samples_per_tensor` randomly
/// chosen entries of every parameter tensor. Returns the max error relative
/// to each tensor's largest sampled gradient magnitude.
///
/// `mutate` names a parameter whose analytic gradient gets its sign flipped
/// before comparison; it exists as a failure fixture for the oracle itself.
pub fn grad_check(
    model: &RegressorModel,
    input: &Tensor,
    g_hr: &Tensor,
    g_lr: &Tensor,
    fd_step: f64,
    samples_per_tensor: usize,
    mutate: Option<&str>,
) -> Result<f64> {
    assert_eq!(
        model.precision,
        Precision::Double,
        "grad_check requires a double-precision model"
    );
    let (hr, lr, cache) = forward(model, input)?;
    let mut grad_hr = hr.clone();
    for (g, t) in grad_hr.data.iter_mut().zip(&g_hr.data) {
        *g -= t;
    }
    let mut grad_lr = lr.clone();
    for (g, t) in grad_lr.data.iter_mut().zip(&g_lr.data) {
        *g -= t;
    }
    let mut grads = backward(model, &cache, &grad_hr, &grad_lr)?;
    if let Some(name) = mutate {
        for v in &mut grads.get_mut(name).data {
            *v = -*v;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xFD);
    let mut scratch = model.clone();
    let mut worst = 0.0_f64;
    for idx in 0..PARAM_SPECS.len() {
        let n = model.params[idx].numel();
        let indices: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < samples_per_tensor {
                set.insert(rng.gen_range(0..n));
            }
            set.into_iter().collect()
        };
        let mut max_abs_err = 0.0_f64;
        let mut scale = 0.0_f64;
        for &i in &indices {
            let orig = scratch.params[idx].data[i];
            scratch.params[idx].data[i] = orig + fd_step;
            let plus = half_sq_loss(&scratch, input, g_hr, g_lr);
            scratch.params[idx].data[i] = orig - fd_step;
            let minus = half_sq_loss(&scratch, input, g_hr, g_lr);
            scratch.params[idx].data[i] = orig;
            let fd = (plus - minus) / (2.0 * fd_step);
            let analytic = grads.tensors[idx].data[i];
            max_abs_err = max_abs_err.max((analytic - fd).abs());
            scale = scale.max(analytic.abs()).max(fd.abs());
        }
        worst = worst.max(max_abs_err / scale.max(1e-12));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    arch: String,
    precision: Precision,
    has_optimizer: bool,
    learning_rate: f64,
    momentum: f64,
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.dims.len() as u8);
    for &d in &t.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(
    model: &RegressorModel,
    opt: Option<&OptimizerState>,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        format: 1,
        arch: ARCH_NAME.to_string(),
        precision: model.precision,
        has_optimizer: opt.is_some(),
        learning_rate: opt.map_or(0.0, |o| o.learning_rate),
        momentum: opt.map_or(0.0, |o| o.momentum),
    };
    let header_json = serde_json::to_vec(&header).expect("checkpoint header");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    let opt_tensors = opt.map_or(0, |o| o.velocity.len());
    buf.extend_from_slice(&((model.params.len() + opt_tensors) as u32).to_le_bytes());
    for (name, t) in model.params() {
        push_tensor(&mut buf, name, t);
    }
    if let Some(o) = opt {
        for ((name, _), v) in PARAM_SPECS.iter().zip(&o.velocity) {
            push_tensor(&mut buf, &format!("opt.{name}"), v);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::FormatMismatch("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(RegressorModel, Option<OptimizerState>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(Error::FormatMismatch(format!(
            "{}: expected CKP1 magic",
            path.display()
        )));
    }
    let header_len = cur.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::FormatMismatch(format!("bad checkpoint header: {e}")))?;
    if header.format != 1 || header.arch != ARCH_NAME {
        return Err(Error::FormatMismatch(format!(
            "unsupported checkpoint format {} / arch {}",
            header.format, header.arch
        )));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::FormatMismatch("non-UTF8 tensor name".into()))?;
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = cur.take(n * 4)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::from_vec(&dims, data)));
    }

    let mut params = Vec::with_capacity(PARAM_SPECS.len());
    for (name, dims) in PARAM_SPECS {
        let t = tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::FormatMismatch(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::FormatMismatch(format!(
                "tensor {name} has dims {:?}, expected {:?}",
                t.dims, dims
            )));
        }
        params.push(t);
    }
    let model = RegressorModel {
        precision: header.precision,
        params,
    };
    let opt = if header.has_optimizer {
        let mut velocity = Vec::with_capacity(PARAM_SPECS.len());
        for (name, _) in PARAM_SPECS {
            let key = format!("opt.{name}");
            let t = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::FormatMismatch(format!("missing tensor {key}")))?;
            velocity.push(t);
        }
        Some(OptimizerState {
            learning_rate: header.learning_rate,
            momentum: header.momentum,
            velocity,
        })
    } else {
        None
    };
    Ok((model, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rand_input(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[1, h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(1, Precision::Single);
        let b = init_model(1, Precision::Single);
        let c = init_model(2, Precision::Single);
        for ((na, ta), (_, tb)) in a.params().zip(b.params()) {
            assert_eq!(ta, tb, "tensor {na} differs across identical seeds");
        }
        assert!(a.params().zip(c.params()).any(|((_, x), (_, y))| x != y));
        for (name, t) in a.params() {
            if name.ends_with(".b") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name} biases not zero");
            }
        }
    }

    #[test]
    fn forward_shape_contract() {
        let model = init_model(3, Precision::Single);
        let (hr, lr, _) = forward(&model, &rand_input(32, 48, 0)).unwrap();
        assert_eq!(hr.dims, vec![1, 8, 12]);
        assert_eq!(lr.dims, vec![1, 2, 3]);
        let (hr2, lr2, _) = forward(&model, &rand_input(64, 96, 0)).unwrap();
        assert_eq!(hr2.dims, vec![1, 16, 24]);
        assert_eq!(lr2.dims, vec![1, 4, 6]);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let model = init_model(3, Precision::Single);
        assert!(matches!(
            forward(&model, &rand_input(30, 48, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_model_outputs_zero() {
        let mut model = init_model(3, Precision::Single);
        for name in param_names() {
            model.param_mut(name).data.fill(0.0);
        }
        let (hr, lr, _) = forward(&model, &rand_input(16, 16, 4)).unwrap();
        assert!(hr.data.iter().all(|&v| v == 0.0));
        assert!(lr.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_grads_give_zero_param_grads() {
        let model = init_model(5, Precision::Double);
        let input = rand_input(16, 16, 5);
        let (hr, lr, cache) = forward(&model, &input).unwrap();
        let grads = backward(&model, &cache, &hr.zeros_like(), &lr.zeros_like()).unwrap();
        for t in &grads.tensors {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn head_isolation() {
        let model = init_model(5, Precision::Double);
        let input = rand_input(16, 16, 5);
        let (hr, lr, cache) = forward(&model, &input).unwrap();
        let mut g_hr = hr.zeros_like();
        g_hr.data.fill(1.0);
        let grads = backward(&model, &cache, &g_hr, &lr.zeros_like()).unwrap();
        for name in ["lr.conv.w", "lr.conv.b", "lr.proj.w", "lr.proj.b"] {
            assert!(grads.get(name).data.iter().all(|&v| v == 0.0), "{name}");
        }
        assert!(grads.get("trunk.conv1.w").data.iter().any(|&v| v != 0.0));
        assert!(grads.get("hr.tconv.w").data.iter().any(|&v| v != 0.0));
        // and symmetrically for the LR head
        let mut g_lr = Tensor::zeros(&lr.dims);
        g_lr.data.fill(1.0);
        let grads = backward(&model, &cache, &hr.zeros_like(), &g_lr).unwrap();
        for name in ["hr.tconv.w", "hr.tconv.b", "hr.proj.w", "hr.proj.b"] {
            assert!(grads.get(name).data.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut model = init_model(7, Precision::Double);
        let before = model.param("trunk.conv1.w").data.clone();
        let mut grads = Gradients {
            tensors: model.params.iter().map(Tensor::zeros_like).collect(),
        };
        grads.get_mut("trunk.conv1.w").data.fill(0.25);
        let mut opt = OptimizerState::new(&model, 1.0, 0.0);
        sgd_step(&mut model, &grads, &mut opt).unwrap();
        for (a, b) in model.param("trunk.conv1.w").data.iter().zip(&before) {
            assert!((a - (b - 0.25)).abs() <= 1e-15);
        }
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let mut model = init_model(7, Precision::Double);
        let before = model.clone();
        let grads = Gradients {
            tensors: model.params.iter().map(Tensor::zeros_like).collect(),
        };
        let mut opt = OptimizerState::new(&model, 0.1, 0.95);
        sgd_step(&mut model, &grads, &mut opt).unwrap();
        for ((_, a), (_, b)) in model.params().zip(before.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sgd_momentum_unrolls() {
        // two steps with constant grad g, momentum 0.95, lr 1:
        // total change = g + (0.95 g + g) = 2.95 g
        let mut model = init_model(7, Precision::Double);
        let before = model.param("trunk.conv2.w").data.clone();
        let g = 0.5;
        let mut grads = Gradients {
            tensors: model.params.iter().map(Tensor::zeros_like).collect(),
        };
        grads.get_mut("trunk.conv2.w").data.fill(g);
        let mut opt = OptimizerState::new(&model, 1.0, 0.95);
        sgd_step(&mut model, &grads, &mut opt).unwrap();
        sgd_step(&mut model, &grads, &mut opt).unwrap();
        for (a, b) in model.param("trunk.conv2.w").data.iter().zip(&before) {
            assert!((a - (b - 2.95 * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn grad_check_passes_and_mutation_fails() {
        let model = init_model(11, Precision::Double);
        let input = rand_input(16, 16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g_hr = Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| rng.gen_range(0.0..2.0)).collect());
        let g_lr = Tensor::from_vec(&[1, 1, 1], vec![rng.gen_range(0.0..2.0)]);
        let err = grad_check(&model, &input, &g_hr, &g_lr, 1e-6, 40, None).unwrap();
        assert!(err <= 1e-5, "grad check error {err}");
        let err7 = grad_check(&model, &input, &g_hr, &g_lr, 1e-7, 40, None).unwrap();
        assert!(err7 <= 1e-5, "grad check error at step 1e-7: {err7}");
        let bad = grad_check(&model, &input, &g_hr, &g_lr, 1e-6, 40, Some("trunk.conv2.w")).unwrap();
        assert!(bad > 1e-2, "mutated backward should fail, got {bad}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempdir().unwrap();
        let model = init_model(21, Precision::Single);
        let opt = OptimizerState::new(&model, 5e-6, 0.95);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, Some(&opt), &p1).unwrap();
        let (loaded, lopt) = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, lopt.as_ref(), &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let input = rand_input(16, 32, 3);
        let (hr_a, lr_a, _) = forward(&model, &input).unwrap();
        let (hr_b, lr_b, _) = forward(&loaded, &input).unwrap();
        assert_eq!(hr_a, hr_b);
        assert_eq!(lr_a, lr_b);
    }

    #[test]
    fn checkpoint_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::FormatMismatch(_))
        ));
    }
}
