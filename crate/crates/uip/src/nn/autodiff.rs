//! Forward, backward, and tangent-carrying passes over the layer stack.
//!
//! First-order gradients come from plain reverse mode. The mixed
//! second-order directional gradient d/dx <grad_params L(x,y), v> is
//! computed forward-over-reverse: the whole forward and backward pass is
//! re-run while propagating the directional derivative of every
//! intermediate value along a parameter-space perturbation v. By symmetry
//! of second derivatives the tangent of the input adjoint is exactly the
//! requested mixed gradient. ReLU masks and pooling selections are held
//! fixed along the tangent (derivative-almost-everywhere convention), and
//! the ReLU derivative at exactly 0 is 0.

use super::arch::{ArchSpec, Layer};
use super::{FlatGrad, Label, ModelState, Wrt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// softmax / cross-entropy
// ---------------------------------------------------------------------------

fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stabilized softmax (max subtraction before exponentiation).
pub fn softmax(logits: &Tensor) -> Tensor {
    Tensor::from_parts(logits.shape().to_vec(), softmax_slice(logits.data()))
}

/// Cross-entropy of `logits` against a hard or soft label.
///
/// The soft form is `-sum_i y_i log softmax(z)_i`, evaluated in log space.
pub fn cross_entropy(logits: &Tensor, label: &Label) -> Result<f64> {
    let z = logits.data();
    label.validate(z.len())?;
    let lse = log_sum_exp(z);
    Ok(match label {
        Label::Class(c) => lse - z[*c],
        Label::Soft(y) => y.iter().zip(z).map(|(yi, zi)| yi * (lse - zi)).sum(),
    })
}

/// d(cross entropy)/d(logits) = softmax(z) - y.
fn logit_residual(z: &[f64], label: &Label) -> Vec<f64> {
    let mut p = softmax_slice(z);
    for (i, pi) in p.iter_mut().enumerate() {
        *pi -= label.weight(i);
    }
    p
}

/// Tangent of softmax: given p = softmax(z) and zdot, returns
/// pdot_i = p_i (zdot_i - sum_j p_j zdot_j).
fn softmax_jvp(p: &[f64], zdot: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(zdot).map(|(pi, zi)| pi * zi).sum();
    p.iter().zip(zdot).map(|(pi, zi)| pi * (zi - inner)).collect()
}

// ---------------------------------------------------------------------------
// layer primitives
// ---------------------------------------------------------------------------

/// out = W a (+ bias when `with_bias`); W row-major [out_dim x in_dim].
fn linear_apply(w: &[f64], in_dim: usize, out_dim: usize, has_bias: bool, with_bias: bool, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for (wi, ai) in row.iter().zip(a) {
            acc += wi * ai;
        }
        if has_bias && with_bias {
            acc += w[out_dim * in_dim + o];
        }
        out[o] = acc;
    }
    out
}

/// g_in = W^T g_out (bias ignored).
fn linear_apply_transpose(w: &[f64], in_dim: usize, out_dim: usize, g_out: &[f64]) -> Vec<f64> {
    let mut g_in = vec![0.0; in_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let g = g_out[o];
        for (gi, wi) in g_in.iter_mut().zip(row) {
            *gi += wi * g;
        }
    }
    g_in
}

fn zero_pad(a: &[f64], ch: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return a.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; ch * hp * wp];
    for c in 0..ch {
        for y in 0..h {
            let src = (c * h + y) * w;
            let dst = (c * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&a[src..src + w]);
        }
    }
    out
}

fn crop_pad(g_pad: &[f64], ch: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return g_pad.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; ch * h * w];
    for c in 0..ch {
        for y in 0..h {
            let dst = (c * h + y) * w;
            let src = (c * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(&g_pad[src..src + w]);
        }
    }
    out
}

struct ConvDims {
    in_ch: usize,
    hp: usize,
    wp: usize,
    out_ch: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
}

fn conv_apply(w: &[f64], a_pad: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.out_ch * d.oh * d.ow];
    for o in 0..d.out_ch {
        for y in 0..d.oh {
            for x in 0..d.ow {
                let mut acc = 0.0;
                for c in 0..d.in_ch {
                    for u in 0..d.k {
                        let wrow = ((o * d.in_ch + c) * d.k + u) * d.k;
                        let arow = (c * d.hp + y * d.s + u) * d.wp + x * d.s;
                        for v in 0..d.k {
                            acc += w[wrow + v] * a_pad[arow + v];
                        }
                    }
                }
                out[(o * d.oh + y) * d.ow + x] = acc;
            }
        }
    }
    out
}

/// Scatter g_out back through the kernel: returns gradient on the padded input.
fn conv_apply_transpose(w: &[f64], g_out: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut g_pad = vec![0.0; d.in_ch * d.hp * d.wp];
    for o in 0..d.out_ch {
        for y in 0..d.oh {
            for x in 0..d.ow {
                let g = g_out[(o * d.oh + y) * d.ow + x];
                if g == 0.0 {
                    continue;
                }
                for c in 0..d.in_ch {
                    for u in 0..d.k {
                        let wrow = ((o * d.in_ch + c) * d.k + u) * d.k;
                        let arow = (c * d.hp + y * d.s + u) * d.wp + x * d.s;
                        for v in 0..d.k {
                            g_pad[arow + v] += w[wrow + v] * g;
                        }
                    }
                }
            }
        }
    }
    g_pad
}

/// Accumulate the kernel gradient: g_w[o,c,u,v] += sum_{y,x} g_out[o,y,x] a_pad[...].
fn conv_param_grad(a_pad: &[f64], g_out: &[f64], d: &ConvDims, g_w: &mut [f64]) {
    for o in 0..d.out_ch {
        for y in 0..d.oh {
            for x in 0..d.ow {
                let g = g_out[(o * d.oh + y) * d.ow + x];
                if g == 0.0 {
                    continue;
                }
                for c in 0..d.in_ch {
                    for u in 0..d.k {
                        let wrow = ((o * d.in_ch + c) * d.k + u) * d.k;
                        let arow = (c * d.hp + y * d.s + u) * d.wp + x * d.s;
                        for v in 0..d.k {
                            g_w[wrow + v] += g * a_pad[arow + v];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(layer: &Layer, in_shape: &[usize], out_shape: &[usize]) -> ConvDims {
    let Layer::Conv2D { in_ch, out_ch, kernel, stride, zero_pad } = *layer else {
        unreachable!("conv_dims on non-conv layer")
    };
    ConvDims {
        in_ch,
        hp: in_shape[1] + 2 * zero_pad,
        wp: in_shape[2] + 2 * zero_pad,
        out_ch,
        k: kernel,
        s: stride,
        oh: out_shape[1],
        ow: out_shape[2],
    }
}

// ---------------------------------------------------------------------------
// per-layer passes
// ---------------------------------------------------------------------------

fn layer_forward(layer: &Layer, in_shape: &[usize], out_shape: &[usize], w: &[f64], a: &[f64]) -> Vec<f64> {
    match *layer {
        Layer::Linear { in_dim, out_dim, bias } => linear_apply(w, in_dim, out_dim, bias, true, a),
        Layer::ReLU => a.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Layer::Conv2D { zero_pad, .. } => {
            let d = conv_dims(layer, in_shape, out_shape);
            let a_pad = zero_pad_of(a, in_shape, zero_pad);
            conv_apply(w, &a_pad, &d)
        }
        Layer::AvgPool2D { window } => avg_pool(a, in_shape, out_shape, window),
        Layer::Flatten => a.to_vec(),
    }
}

fn zero_pad_of(a: &[f64], in_shape: &[usize], p: usize) -> Vec<f64> {
    zero_pad(a, in_shape[0], in_shape[1], in_shape[2], p)
}

fn avg_pool(a: &[f64], in_shape: &[usize], out_shape: &[usize], k: usize) -> Vec<f64> {
    let (ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; ch * oh * ow];
    for c in 0..ch {
        for yo in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for u in 0..k {
                    let row = (c * h + yo * k + u) * w + xo * k;
                    for v in 0..k {
                        acc += a[row + v];
                    }
                }
                out[(c * oh + yo) * ow + xo] = acc * inv;
            }
        }
    }
    out
}

fn avg_pool_backward(g_out: &[f64], in_shape: &[usize], out_shape: &[usize], k: usize) -> Vec<f64> {
    let (ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let inv = 1.0 / (k * k) as f64;
    let mut g_in = vec![0.0; ch * h * w];
    for c in 0..ch {
        for yo in 0..oh {
            for xo in 0..ow {
                let g = g_out[(c * oh + yo) * ow + xo] * inv;
                for u in 0..k {
                    let row = (c * h + yo * k + u) * w + xo * k;
                    for v in 0..k {
                        g_in[row + v] += g;
                    }
                }
            }
        }
    }
    g_in
}

/// Tangent of the layer output along a parameter perturbation `v` and input
/// tangent `at`. Primal input `a` is required because parameterized layers
/// are bilinear in (params, input).
fn layer_forward_tangent(
    layer: &Layer,
    in_shape: &[usize],
    out_shape: &[usize],
    w: &[f64],
    v: &[f64],
    a: &[f64],
    at: &[f64],
) -> Vec<f64> {
    match *layer {
        Layer::Linear { in_dim, out_dim, bias } => {
            let mut t = linear_apply(v, in_dim, out_dim, bias, true, a);
            let wa = linear_apply(w, in_dim, out_dim, bias, false, at);
            for (ti, wi) in t.iter_mut().zip(wa) {
                *ti += wi;
            }
            t
        }
        Layer::ReLU => a
            .iter()
            .zip(at)
            .map(|(&ai, &ti)| if ai > 0.0 { ti } else { 0.0 })
            .collect(),
        Layer::Conv2D { zero_pad, .. } => {
            let d = conv_dims(layer, in_shape, out_shape);
            let a_pad = zero_pad_of(a, in_shape, zero_pad);
            let at_pad = zero_pad_of(at, in_shape, zero_pad);
            let mut t = conv_apply(v, &a_pad, &d);
            let wt = conv_apply(w, &at_pad, &d);
            for (ti, wi) in t.iter_mut().zip(wt) {
                *ti += wi;
            }
            t
        }
        Layer::AvgPool2D { window } => avg_pool(at, in_shape, out_shape, window),
        Layer::Flatten => at.to_vec(),
    }
}

/// Input adjoint of one layer. When `g_w` is supplied the layer's parameter
/// gradient is accumulated into it.
fn layer_backward(
    layer: &Layer,
    in_shape: &[usize],
    out_shape: &[usize],
    w: &[f64],
    a: &[f64],
    g_out: &[f64],
    g_w: Option<&mut [f64]>,
) -> Vec<f64> {
    match *layer {
        Layer::Linear { in_dim, out_dim, bias } => {
            if let Some(gw) = g_w {
                for o in 0..out_dim {
                    let g = g_out[o];
                    let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                    for (gi, ai) in row.iter_mut().zip(a) {
                        *gi += g * ai;
                    }
                    if bias {
                        gw[out_dim * in_dim + o] += g;
                    }
                }
            }
            linear_apply_transpose(w, in_dim, out_dim, g_out)
        }
        Layer::ReLU => a
            .iter()
            .zip(g_out)
            .map(|(&ai, &gi)| if ai > 0.0 { gi } else { 0.0 })
            .collect(),
        Layer::Conv2D { zero_pad, .. } => {
            let d = conv_dims(layer, in_shape, out_shape);
            let a_pad = zero_pad_of(a, in_shape, zero_pad);
            if let Some(gw) = g_w {
                conv_param_grad(&a_pad, g_out, &d, gw);
            }
            let g_pad = conv_apply_transpose(w, g_out, &d);
            crop_pad(&g_pad, in_shape[0], in_shape[1], in_shape[2], zero_pad)
        }
        Layer::AvgPool2D { window } => avg_pool_backward(g_out, in_shape, out_shape, window),
        Layer::Flatten => g_out.to_vec(),
    }
}

/// Tangent of the input adjoint along parameter perturbation `v`.
/// `g_out`/`gt_out` are the primal adjoint and its tangent.
#[allow(clippy::too_many_arguments)]
fn layer_backward_tangent(
    layer: &Layer,
    in_shape: &[usize],
    out_shape: &[usize],
    w: &[f64],
    v: &[f64],
    a: &[f64],
    g_out: &[f64],
    gt_out: &[f64],
) -> Vec<f64> {
    match *layer {
        Layer::Linear { in_dim, out_dim, .. } => {
            let mut t = linear_apply_transpose(v, in_dim, out_dim, g_out);
            let wt = linear_apply_transpose(w, in_dim, out_dim, gt_out);
            for (ti, wi) in t.iter_mut().zip(wt) {
                *ti += wi;
            }
            t
        }
        Layer::ReLU => a
            .iter()
            .zip(gt_out)
            .map(|(&ai, &gi)| if ai > 0.0 { gi } else { 0.0 })
            .collect(),
        Layer::Conv2D { zero_pad, .. } => {
            let d = conv_dims(layer, in_shape, out_shape);
            let mut g_pad = conv_apply_transpose(v, g_out, &d);
            let wt = conv_apply_transpose(w, gt_out, &d);
            for (ti, wi) in g_pad.iter_mut().zip(wt) {
                *ti += wi;
            }
            crop_pad(&g_pad, in_shape[0], in_shape[1], in_shape[2], zero_pad)
        }
        Layer::AvgPool2D { window } => avg_pool_backward(gt_out, in_shape, out_shape, window),
        Layer::Flatten => gt_out.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// whole-stack passes
// ---------------------------------------------------------------------------

struct Stack<'a> {
    arch: &'a ArchSpec,
    shapes: Vec<Vec<usize>>,
    layout: Vec<(usize, usize)>,
    params: &'a [f64],
}

impl<'a> Stack<'a> {
    fn new(model: &'a ModelState) -> Self {
        Self {
            arch: model.arch(),
            shapes: model.arch().layer_shapes(),
            layout: model.arch().param_layout(),
            params: model.params(),
        }
    }

    fn w(&self, i: usize) -> &'a [f64] {
        let (off, len) = self.layout[i];
        &self.params[off..off + len]
    }

    /// acts[0] = x, acts[i+1] = output of layer i; the last entry is logits.
    fn forward_acts(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.arch.layers().len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let out = layer_forward(layer, &self.shapes[i], &self.shapes[i + 1], self.w(i), &acts[i]);
            acts.push(out);
        }
        acts
    }

    fn forward_acts_dual(&self, x: &[f64], v: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = Vec::with_capacity(self.arch.layers().len() + 1);
        let mut tans = Vec::with_capacity(self.arch.layers().len() + 1);
        acts.push(x.to_vec());
        tans.push(vec![0.0; x.len()]);
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let (off, len) = self.layout[i];
            let vi = &v[off..off + len];
            let out = layer_forward(layer, &self.shapes[i], &self.shapes[i + 1], self.w(i), &acts[i]);
            let tan = layer_forward_tangent(
                layer,
                &self.shapes[i],
                &self.shapes[i + 1],
                self.w(i),
                vi,
                &acts[i],
                &tans[i],
            );
            acts.push(out);
            tans.push(tan);
        }
        (acts, tans)
    }

    /// Backpropagate `g_logits` to the input; when `g_params` is supplied,
    /// accumulate parameter gradients along the way.
    fn backward(&self, acts: &[Vec<f64>], g_logits: &[f64], mut g_params: Option<&mut [f64]>) -> Vec<f64> {
        let mut g = g_logits.to_vec();
        for (i, layer) in self.arch.layers().iter().enumerate().rev() {
            let gw = g_params.as_deref_mut().map(|gp| {
                let (off, len) = self.layout[i];
                &mut gp[off..off + len]
            });
            g = layer_backward(layer, &self.shapes[i], &self.shapes[i + 1], self.w(i), &acts[i], &g, gw);
        }
        g
    }

    /// Backpropagate adjoint and adjoint-tangent pairs to the input, along
    /// parameter perturbation v. Returns the tangent of the input adjoint.
    fn backward_tangent(
        &self,
        acts: &[Vec<f64>],
        v: &[f64],
        g_logits: &[f64],
        gt_logits: &[f64],
    ) -> Vec<f64> {
        let mut g = g_logits.to_vec();
        let mut gt = gt_logits.to_vec();
        for (i, layer) in self.arch.layers().iter().enumerate().rev() {
            let (off, len) = self.layout[i];
            let vi = &v[off..off + len];
            let in_shape = &self.shapes[i];
            let out_shape = &self.shapes[i + 1];
            gt = layer_backward_tangent(layer, in_shape, out_shape, self.w(i), vi, &acts[i], &g, &gt);
            g = layer_backward(layer, in_shape, out_shape, self.w(i), &acts[i], &g, None);
        }
        gt
    }
}

fn check_input(model: &ModelState, x: &Tensor) -> Result<()> {
    if x.shape() != model.arch().input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.arch().input_shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pre-softmax logits of the model on one input. Deterministic and pure.
pub fn forward(model: &ModelState, x: &Tensor) -> Result<Tensor> {
    check_input(model, x)?;
    let stack = Stack::new(model);
    let mut a = x.data().to_vec();
    for (i, layer) in model.arch().layers().iter().enumerate() {
        a = layer_forward(layer, &stack.shapes[i], &stack.shapes[i + 1], stack.w(i), &a);
    }
    Ok(Tensor::from_parts(vec![model.arch().class_count()], a))
}

/// Gradient of the mean cross-entropy over a batch with respect to the
/// parameters.
pub fn param_grad(model: &ModelState, xs: &[Tensor], ys: &[Label]) -> Result<FlatGrad> {
    Ok(param_grad_with_loss(model, xs, ys)?.0)
}

/// Like [`param_grad`] but also returns the mean cross-entropy itself.
pub fn param_grad_with_loss(model: &ModelState, xs: &[Tensor], ys: &[Label]) -> Result<(FlatGrad, f64)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {} inputs and {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let classes = model.arch().class_count();
    for y in ys {
        y.validate(classes)?;
    }
    let stack = Stack::new(model);
    let scale = 1.0 / xs.len() as f64;
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        check_input(model, x)?;
        let acts = stack.forward_acts(x.data());
        let logits = acts.last().unwrap();
        loss += (log_sum_exp(logits)
            - (0..classes).map(|i| y.weight(i) * logits[i]).sum::<f64>())
            * scale;
        let mut residual = logit_residual(logits, y);
        for r in &mut residual {
            *r *= scale;
        }
        stack.backward(&acts, &residual, Some(&mut grad));
    }
    Ok((FlatGrad { values: grad, wrt: Wrt::Params }, loss))
}

/// Gradient of the cross-entropy with respect to the input sample.
pub fn input_grad(model: &ModelState, x: &Tensor, y: &Label) -> Result<FlatGrad> {
    check_input(model, x)?;
    y.validate(model.arch().class_count())?;
    let stack = Stack::new(model);
    let acts = stack.forward_acts(x.data());
    let residual = logit_residual(acts.last().unwrap(), y);
    let g_in = stack.backward(&acts, &residual, None);
    Ok(FlatGrad { values: g_in, wrt: Wrt::Input })
}

/// d/dx <grad_params L(x, y), v> for a constant direction `v` in parameter
/// space. Linear in `v`; ReLU masks are treated as constants.
pub fn mixed_second_gradient(model: &ModelState, x: &Tensor, y: &Label, v: &FlatGrad) -> Result<FlatGrad> {
    check_input(model, x)?;
    y.validate(model.arch().class_count())?;
    if v.wrt != Wrt::Params || v.values.len() != model.param_count() {
        return Err(Error::BadGradLen {
            expected: model.param_count(),
            got: v.values.len(),
            wrt: "params",
        });
    }
    let stack = Stack::new(model);
    let (acts, tans) = stack.forward_acts_dual(x.data(), &v.values);
    let logits = acts.last().unwrap();
    let zdot = tans.last().unwrap();
    let p = softmax_slice(logits);
    let residual: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, pi)| pi - y.weight(i))
        .collect();
    // d(p - y)/d(eps) = dsoftmax along zdot; y is constant.
    let residual_tan = softmax_jvp(&p, zdot);
    let gt_in = stack.backward_tangent(&acts, &v.values, &residual, &residual_tan);
    Ok(FlatGrad { values: gt_in, wrt: Wrt::Input })
}

/// Logits and their directional derivative along a parameter perturbation
/// `v`: returns `(z, dz/d_eps at theta + eps v)`.
pub fn forward_param_tangent(model: &ModelState, x: &Tensor, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_input(model, x)?;
    if v.len() != model.param_count() {
        return Err(Error::BadGradLen { expected: model.param_count(), got: v.len(), wrt: "params" });
    }
    let stack = Stack::new(model);
    let (acts, tans) = stack.forward_acts_dual(x.data(), v);
    Ok((acts.last().unwrap().clone(), tans.last().unwrap().clone()))
}
