//! White-box feature recovery: estimate the removed sample's gradient from
//! the parameter difference of the original and unlearned models, then
//! optimize dummy inputs whose gradient direction matches it, under a
//! total-variation image prior and a [0,1] box constraint.

use crate::error::{Error, Result};
use crate::nn::{
    forward_param_tangent, mixed_second_gradient, param_grad, FlatGrad, Label, ModelState, Wrt,
};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Orientation of the model-difference gradient estimate.
///
/// Approximate unlearning *adds back* the removal gradient, so
/// `theta - theta_u` is anti-parallel to the true sample gradient; matching
/// the dummy gradient against the positive direction therefore wants
/// `theta_u - theta`. Both orientations are selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignConvention {
    /// `theta - theta_u`.
    PaperDiff,
    /// `theta_u - theta` (the default the attack uses).
    ReconstructionDiff,
}

/// Flat parameter difference standing in for the removed data's gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub convention: SignConvention,
}

impl GradientEstimate {
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Difference of two parameter vectors under the chosen sign convention.
pub fn estimate_gradient(
    theta: &ModelState,
    theta_u: &ModelState,
    convention: SignConvention,
) -> Result<GradientEstimate> {
    if theta.arch() != theta_u.arch() {
        return Err(Error::ArchMismatch);
    }
    let values = match convention {
        SignConvention::PaperDiff => {
            theta.params().iter().zip(theta_u.params()).map(|(a, b)| a - b).collect()
        }
        SignConvention::ReconstructionDiff => {
            theta.params().iter().zip(theta_u.params()).map(|(a, b)| b - a).collect()
        }
    };
    Ok(GradientEstimate { values, convention })
}

/// `<a,b> / (||a|| ||b||)`. Errors when either operand has zero norm.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::BadGradLen { expected: a.len(), got: b.len(), wrt: "cosine operand" });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anisotropic total variation over the 4-connected neighborhood of a
/// `[ch,h,w]` image, summed per channel. Flat (rank-1) inputs have TV 0.
pub fn total_variation(x: &Tensor) -> Result<f64> {
    match x.shape() {
        [_] => Ok(0.0),
        &[ch, h, w] => {
            let v = x.data();
            let mut tv = 0.0;
            for c in 0..ch {
                for y in 0..h {
                    let row = (c * h + y) * w;
                    for i in 0..w - 1 {
                        tv += (v[row + i] - v[row + i + 1]).abs();
                    }
                }
                for y in 0..h - 1 {
                    let row = (c * h + y) * w;
                    for i in 0..w {
                        tv += (v[row + i] - v[row + w + i]).abs();
                    }
                }
            }
            Ok(tv)
        }
        other => Err(Error::ShapeMismatch { expected: vec![0, 0, 0], got: other.to_vec() }),
    }
}

/// Subgradient of [`total_variation`], with sign(0) = 0.
pub fn tv_grad(x: &Tensor) -> Result<Tensor> {
    let mut g = vec![0.0; x.len()];
    match x.shape() {
        [_] => {}
        &[ch, h, w] => {
            let v = x.data();
            for c in 0..ch {
                for y in 0..h {
                    let row = (c * h + y) * w;
                    for i in 0..w - 1 {
                        let s = sign(v[row + i] - v[row + i + 1]);
                        g[row + i] += s;
                        g[row + i + 1] -= s;
                    }
                }
                for y in 0..h - 1 {
                    let row = (c * h + y) * w;
                    for i in 0..w {
                        let s = sign(v[row + i] - v[row + w + i]);
                        g[row + i] += s;
                        g[row + w + i] -= s;
                    }
                }
            }
        }
        other => {
            return Err(Error::ShapeMismatch { expected: vec![0, 0, 0], got: other.to_vec() })
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), g))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// How the dummy label is treated during inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelMode {
    /// The removed sample's label is known; every dummy slot uses it.
    Known(usize),
    /// Labels are optimized alongside the features, starting from a uniform
    /// prediction vector (parameterized through a softmax so they stay on
    /// the simplex).
    Variable,
}

/// Inversion optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    /// Adam step size; halved at 3/8, 5/8 and 7/8 of the step budget.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the total-variation prior (use 0 for tabular inputs).
    pub tv_weight: f64,
    pub label_mode: LabelMode,
    pub restarts: usize,
    /// Number of dummy samples optimized jointly (multi-sample unlearning).
    pub batch_count: usize,
    pub seed: u64,
    /// Loss-trace sampling interval, in steps.
    pub trace_every: usize,
}

impl InversionConfig {
    pub fn new(label_mode: LabelMode, steps: usize, seed: u64) -> Self {
        Self {
            steps: steps.max(1),
            step_size: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            tv_weight: 0.0,
            label_mode,
            restarts: 4,
            batch_count: 1,
            seed,
            trace_every: (steps / 100).max(1),
        }
    }

    /// Default TV weight for an input shape: 1e-2 for images, 0 for flat
    /// tabular inputs.
    pub fn default_tv_weight(input_shape: &[usize]) -> f64 {
        if input_shape.len() == 3 {
            1e-2
        } else {
            0.0
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 || self.batch_count == 0 {
            return Err(Error::InvalidArgument(
                "steps, restarts and batch_count must be >= 1".into(),
            ));
        }
        if self.tv_weight < 0.0 {
            return Err(Error::InvalidArgument("tv_weight must be >= 0".into()));
        }
        if let LabelMode::Known(y) = self.label_mode {
            if y >= classes {
                return Err(Error::InvalidLabel { label: y, classes });
            }
        }
        Ok(())
    }
}

/// One recovered dummy slot.
#[derive(Debug, Clone)]
pub struct SlotRecovery {
    pub features: Tensor,
    pub label: Label,
    /// Appendix-form root metric `sqrt(||x - x'||^2 / dim)` against the
    /// matched ground-truth sample.
    pub rmse: Option<f64>,
    /// Peak-1 PSNR in dB; `f64::INFINITY` for an exact match.
    pub psnr_db: Option<f64>,
    pub matched_truth: Option<usize>,
}

/// Output of [`invert`]: the best restart by final loss.
#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub slots: Vec<SlotRecovery>,
    pub final_loss: f64,
    pub final_cosine: f64,
    /// `(step, loss)` samples from the winning restart.
    pub trace: Vec<(usize, f64)>,
    pub restart_index: usize,
}

/// Inversion objective for a single dummy sample:
/// `-cos(grad(x', y'), grad_est) + tv_weight * TV(x')`.
pub fn inversion_loss(
    model: &ModelState,
    x: &Tensor,
    y: &Label,
    est: &GradientEstimate,
    tv_weight: f64,
) -> Result<f64> {
    let g = param_grad(model, std::slice::from_ref(x), std::slice::from_ref(y))?;
    if g.values.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroDummyGradient);
    }
    let cos = cosine_sim(&g.values, &est.values)?;
    Ok(-cos + tv_weight * total_variation(x)?)
}

/// Analytic gradient of [`inversion_loss`] with respect to the dummy input,
/// and with respect to the soft label when one is supplied.
///
/// With `g` the dummy gradient, `u = (ghat_est - cos * ghat) / ||g||` is the
/// adjoint of the cosine term; the input gradient is
/// `-mixed_second_gradient(x, y, u) + tv_weight * tv_grad(x)` and the soft
/// label gradient is the logit tangent of the forward pass along `u`.
pub fn inversion_loss_grad(
    model: &ModelState,
    x: &Tensor,
    y: &Label,
    est: &GradientEstimate,
    tv_weight: f64,
) -> Result<(FlatGrad, Option<Vec<f64>>)> {
    let g = param_grad(model, std::slice::from_ref(x), std::slice::from_ref(y))?;
    let u = cosine_adjoint(&g.values, &est.values)?;
    let v = FlatGrad { values: u, wrt: Wrt::Params };
    let mut dx = mixed_second_gradient(model, x, y, &v)?;
    for d in dx.values.iter_mut() {
        *d = -*d;
    }
    if tv_weight > 0.0 {
        let tg = tv_grad(x)?;
        for (d, t) in dx.values.iter_mut().zip(tg.data()) {
            *d += tv_weight * t;
        }
    }
    let dy = match y {
        Label::Soft(_) => {
            let (_, zdot) = forward_param_tangent(model, x, &v.values)?;
            Some(zdot)
        }
        Label::Class(_) => None,
    };
    Ok((dx, dy))
}

/// Adjoint of `cos(g, est)` with respect to `g`:
/// `(est/||est|| - cos * g/||g||) / ||g||`.
fn cosine_adjoint(g: &[f64], est: &[f64]) -> Result<Vec<f64>> {
    let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ne = est.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ng == 0.0 {
        return Err(Error::ZeroDummyGradient);
    }
    if ne == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos: f64 = g.iter().zip(est).map(|(a, b)| a * b).sum::<f64>() / (ng * ne);
    Ok(g.iter()
        .zip(est)
        .map(|(gi, ei)| (ei / ne - cos * gi / ng) / ng)
        .collect())
}

/// Appendix-form recovery error: `sqrt(||x - x'||_2^2 / dim(x))` (a root
/// metric, reported as `rmse` in output schemas).
pub fn metric_mse(x: &Tensor, recovered: &Tensor) -> Result<f64> {
    if x.shape() != recovered.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: recovered.shape().to_vec(),
        });
    }
    let sq: f64 = x.data().iter().zip(recovered.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / x.len() as f64).sqrt())
}

/// Peak-1 PSNR in dB: `10 log10(1 / mean squared error)`. Identical inputs
/// yield `f64::INFINITY`.
pub fn metric_psnr(x: &Tensor, recovered: &Tensor) -> Result<f64> {
    if x.shape() != recovered.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: recovered.shape().to_vec(),
        });
    }
    let mse: f64 =
        x.data().iter().zip(recovered.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

struct RestartOutcome {
    loss: f64,
    cosine: f64,
    xs: Vec<Tensor>,
    labels: Vec<Label>,
    trace: Vec<(usize, f64)>,
}

/// Run the inversion optimizer: `batch_count` dummy inputs per restart,
/// initialized from seeded uniform noise (labels uniform in Variable mode),
/// Adam steps on the analytic loss gradient, [0,1] clamping after every
/// step. The best iterate of the best restart wins, so the reported loss
/// never exceeds the initial loss; ties go to the lowest restart index.
pub fn invert(
    model: &ModelState,
    est: &GradientEstimate,
    cfg: &InversionConfig,
    ground_truth: Option<&[Tensor]>,
) -> Result<RecoveryResult> {
    cfg.validate(model.arch().class_count())?;
    if est.values.len() != model.param_count() {
        return Err(Error::BadGradLen {
            expected: model.param_count(),
            got: est.values.len(),
            wrt: "params",
        });
    }
    if est.values.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroModelDifference);
    }

    let outcomes: Vec<Option<RestartOutcome>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_restart(model, est, cfg, r as u64))
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<(usize, RestartOutcome)> = None;
    for (r, outcome) in outcomes.into_iter().enumerate() {
        let Some(o) = outcome else { continue };
        let better = match &best {
            None => true,
            Some((_, b)) => o.loss < b.loss,
        };
        if better {
            best = Some((r, o));
        }
    }
    let (restart_index, outcome) = best.ok_or(Error::DegenerateInversion)?;

    let slots = outcome
        .xs
        .into_iter()
        .zip(outcome.labels)
        .map(|(features, label)| {
            let (rmse, psnr_db, matched_truth) = match ground_truth {
                Some(truth) if !truth.is_empty() => {
                    let mut best: Option<(usize, f64)> = None;
                    for (i, t) in truth.iter().enumerate() {
                        let m = metric_mse(t, &features)?;
                        if best.map_or(true, |(_, bm)| m < bm) {
                            best = Some((i, m));
                        }
                    }
                    let (idx, rmse) = best.expect("nonempty truth");
                    (Some(rmse), Some(metric_psnr(&truth[idx], &features)?), Some(idx))
                }
                _ => (None, None, None),
            };
            Ok(SlotRecovery { features, label, rmse, psnr_db, matched_truth })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(RecoveryResult {
        slots,
        final_loss: outcome.loss,
        final_cosine: outcome.cosine,
        trace: outcome.trace,
        restart_index,
    })
}

/// One seeded restart. Returns `None` when the restart is degenerate (zero
/// dummy gradient before any iterate could be scored).
fn run_restart(
    model: &ModelState,
    est: &GradientEstimate,
    cfg: &InversionConfig,
    restart: u64,
) -> Result<Option<RestartOutcome>> {
    let shape = model.arch().input_shape().to_vec();
    let dim: usize = shape.iter().product();
    let classes = model.arch().class_count();
    let b = cfg.batch_count;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x1000 + restart));

    let mut xs: Vec<Tensor> = (0..b)
        .map(|_| {
            let data: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            Tensor::from_parts(shape.clone(), data)
        })
        .collect();
    // Variable mode keeps per-slot label logits; labels are their softmax.
    let mut label_logits: Vec<Vec<f64>> = match cfg.label_mode {
        LabelMode::Known(_) => Vec::new(),
        LabelMode::Variable => vec![vec![0.0; classes]; b],
    };

    let var_len = b * dim + label_logits.len() * classes;
    let mut adam = Adam::new(var_len, cfg.beta1, cfg.beta2);
    let mut best: Option<(f64, f64, Vec<Tensor>, Vec<Label>)> = None;
    let mut trace = Vec::new();

    for step in 0..=cfg.steps {
        let labels = current_labels(cfg, &label_logits, b);
        let g = param_grad(model, &xs, &labels)?;
        let gnorm = g.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            // Degenerate iterate: stop this restart, keep whatever the best
            // scored iterate was.
            break;
        }
        let cos = cosine_sim(&g.values, &est.values)?;
        let mut tv = 0.0;
        if cfg.tv_weight > 0.0 {
            for x in &xs {
                tv += total_variation(x)?;
            }
        }
        let loss = -cos + cfg.tv_weight * tv;
        if best.as_ref().map_or(true, |(bl, ..)| loss < *bl) {
            best = Some((loss, cos, xs.clone(), labels.clone()));
        }
        if step % cfg.trace_every == 0 || step == cfg.steps {
            trace.push((step, loss));
        }
        if step == cfg.steps {
            break;
        }

        // Cosine adjoint shared by every slot; each slot contributes 1/b of
        // the batch-mean dummy gradient.
        let u = cosine_adjoint(&g.values, &est.values)?;
        let v = FlatGrad { values: u, wrt: Wrt::Params };
        let slot_scale = 1.0 / b as f64;
        let mut grads = vec![0.0; var_len];
        for (j, x) in xs.iter().enumerate() {
            let mixed = mixed_second_gradient(model, x, &labels[j], &v)?;
            let gx = &mut grads[j * dim..(j + 1) * dim];
            for (out, m) in gx.iter_mut().zip(&mixed.values) {
                *out = -slot_scale * m;
            }
            if cfg.tv_weight > 0.0 {
                let tg = tv_grad(x)?;
                for (out, t) in gx.iter_mut().zip(tg.data()) {
                    *out += cfg.tv_weight * t;
                }
            }
            if let LabelMode::Variable = cfg.label_mode {
                let (_, zdot) = forward_param_tangent(model, x, &v.values)?;
                let y = match &labels[j] {
                    Label::Soft(y) => y,
                    Label::Class(_) => unreachable!("Variable mode uses soft labels"),
                };
                // d(-cos)/dy = zdot / b, chained through the softmax
                // parameterization of the label.
                let gy: Vec<f64> = zdot.iter().map(|z| slot_scale * z).collect();
                let inner: f64 = y.iter().zip(&gy).map(|(yi, gi)| yi * gi).sum();
                let gs = &mut grads[b * dim + j * classes..b * dim + (j + 1) * classes];
                for ((out, yi), gi) in gs.iter_mut().zip(y).zip(&gy) {
                    *out = yi * (gi - inner);
                }
            }
        }

        let lr = decayed_lr(cfg.step_size, step, cfg.steps);
        let mut vars: Vec<f64> = Vec::with_capacity(var_len);
        for x in &xs {
            vars.extend_from_slice(x.data());
        }
        for s in &label_logits {
            vars.extend_from_slice(s);
        }
        adam.step(&mut vars, &grads, lr);
        for (j, x) in xs.iter_mut().enumerate() {
            x.data_mut().copy_from_slice(&vars[j * dim..(j + 1) * dim]);
            x.clamp_in_place(0.0, 1.0);
        }
        for (j, s) in label_logits.iter_mut().enumerate() {
            s.copy_from_slice(&vars[b * dim + j * classes..b * dim + (j + 1) * classes]);
        }
    }

    Ok(best.map(|(loss, cosine, xs, labels)| RestartOutcome { loss, cosine, xs, labels, trace }))
}

fn current_labels(cfg: &InversionConfig, label_logits: &[Vec<f64>], b: usize) -> Vec<Label> {
    match cfg.label_mode {
        LabelMode::Known(y) => vec![Label::Class(y); b],
        LabelMode::Variable => label_logits
            .iter()
            .map(|s| {
                let t = Tensor::from_parts(vec![s.len()], s.clone());
                Label::Soft(crate::nn::softmax(&t).into_data())
            })
            .collect(),
    }
}

/// Step size halved at 3/8, 5/8 and 7/8 of the budget.
fn decayed_lr(base: f64, step: usize, steps: usize) -> f64 {
    let mut lr = base;
    for frac in [3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0] {
        if step >= (steps as f64 * frac) as usize {
            lr *= 0.5;
        }
    }
    lr
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    fn new(len: usize, beta1: f64, beta2: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchSpec;
    use crate::train::init_model;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_x(dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_parts(vec![dim], (0..dim).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn estimate_gradient_conventions() {
        let arch = ArchSpec::mlp(4, &[3], 2).unwrap();
        let a = init_model(&arch, 1);
        let b = init_model(&arch, 2);

        let zero = estimate_gradient(&a, &a, SignConvention::PaperDiff).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));

        let paper = estimate_gradient(&a, &b, SignConvention::PaperDiff).unwrap();
        let recon = estimate_gradient(&a, &b, SignConvention::ReconstructionDiff).unwrap();
        for (p, r) in paper.values.iter().zip(&recon.values) {
            assert_eq!(*p, -*r);
        }

        // antisymmetry under PaperDiff
        let swapped = estimate_gradient(&b, &a, SignConvention::PaperDiff).unwrap();
        for (p, s) in paper.values.iter().zip(&swapped.values) {
            assert_eq!(*p, -*s);
        }

        let other = init_model(&ArchSpec::mlp(4, &[5], 2).unwrap(), 3);
        assert!(matches!(
            estimate_gradient(&a, &other, SignConvention::PaperDiff),
            Err(Error::ArchMismatch)
        ));
    }

    #[test]
    fn cosine_basics() {
        let v = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let scaled: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cosine_sim(&v, &v).unwrap() - 1.0).abs() <= 1e-15);
        assert!((cosine_sim(&v, &neg).unwrap() + 1.0).abs() <= 1e-15);
        assert!((cosine_sim(&v, &scaled).unwrap() - 1.0).abs() <= 1e-15);
        assert!(matches!(cosine_sim(&v, &[0.0, 0.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn tv_hand_oracle() {
        // 1x2x2 image [[0,1],[1,0]]: four neighbor pairs, each |diff| = 1.
        let x = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(total_variation(&x).unwrap(), 4.0);

        let constant = Tensor::new(vec![3, 4, 4], vec![0.7; 48]).unwrap();
        assert_eq!(total_variation(&constant).unwrap(), 0.0);

        let flat = Tensor::new(vec![5], vec![0.1, 0.9, 0.2, 0.8, 0.5]).unwrap();
        assert_eq!(total_variation(&flat).unwrap(), 0.0);
    }

    #[test]
    fn tv_is_absolutely_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::new(vec![2, 3, 3], data.clone()).unwrap();
        for c in [0.5, 2.0, -1.5] {
            let scaled = Tensor::new(vec![2, 3, 3], data.iter().map(|v| c * v).collect()).unwrap();
            let lhs = total_variation(&scaled).unwrap();
            let rhs = c.abs() * total_variation(&x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn tv_grad_matches_finite_differences_off_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..27).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::new(vec![3, 3, 3], data.clone()).unwrap();
        let g = tv_grad(&x).unwrap();
        let h = 1e-7;
        for i in 0..27 {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let fd = (total_variation(&Tensor::new(vec![3, 3, 3], plus).unwrap()).unwrap()
                - total_variation(&Tensor::new(vec![3, 3, 3], minus).unwrap()).unwrap())
                / (2.0 * h);
            assert!((g.data()[i] - fd).abs() <= 1e-6, "coord {i}: {} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn inversion_loss_cosine_bounds() {
        let arch = ArchSpec::mlp(6, &[5], 3).unwrap();
        let model = init_model(&arch, 21);
        let x = random_x(6, 3);
        let y = Label::Class(1);

        // grad_est parallel to the dummy gradient: loss = -1 at tv_weight 0.
        let g = param_grad(&model, std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap();
        let est = GradientEstimate { values: g.values.clone(), convention: SignConvention::ReconstructionDiff };
        let loss = inversion_loss(&model, &x, &y, &est, 0.0).unwrap();
        assert!((loss + 1.0).abs() <= 1e-12);

        // orthogonalized grad_est: loss ~ 0.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r: Vec<f64> = (0..g.values.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gg: f64 = g.values.iter().map(|v| v * v).sum();
        let proj: f64 = r.iter().zip(&g.values).map(|(a, b)| a * b).sum::<f64>() / gg;
        let ortho: Vec<f64> = r.iter().zip(&g.values).map(|(ri, gi)| ri - proj * gi).collect();
        let est = GradientEstimate { values: ortho, convention: SignConvention::ReconstructionDiff };
        let loss = inversion_loss(&model, &x, &y, &est, 0.0).unwrap();
        assert!(loss.abs() <= 1e-10, "orthogonal loss {loss}");
    }

    #[test]
    fn inversion_loss_grad_matches_finite_differences() {
        let arch = ArchSpec::mlp(8, &[6], 3).unwrap();
        let model = init_model(&arch, 33);
        let x = random_x(8, 14);
        let y = Label::Class(2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let est = GradientEstimate {
            values: (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            convention: SignConvention::ReconstructionDiff,
        };
        let (dx, dy) = inversion_loss_grad(&model, &x, &y, &est, 0.0).unwrap();
        assert!(dy.is_none());

        let h = 1e-6;
        let mut fd = vec![0.0; 8];
        for i in 0..8 {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            fd[i] = (inversion_loss(&model, &Tensor::new(vec![8], plus).unwrap(), &y, &est, 0.0).unwrap()
                - inversion_loss(&model, &Tensor::new(vec![8], minus).unwrap(), &y, &est, 0.0).unwrap())
                / (2.0 * h);
        }
        let diff: f64 = dx.values.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale.max(1e-300) <= 1e-4, "rel err {}", diff / scale);
    }

    #[test]
    fn inversion_loss_grad_with_tv_matches_finite_differences() {
        let arch = ArchSpec::conv_net([1, 4, 4], &[2], 3, 2, &[], 2).unwrap();
        let model = init_model(&arch, 5);
        let x = Tensor::new(vec![1, 4, 4], random_x(16, 8).into_data()).unwrap();
        let y = Label::Class(0);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let est = GradientEstimate {
            values: (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            convention: SignConvention::ReconstructionDiff,
        };
        let tvw = 1e-2;
        let (dx, _) = inversion_loss_grad(&model, &x, &y, &est, tvw).unwrap();
        let h = 1e-6;
        let mut fd = vec![0.0; 16];
        for i in 0..16 {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            fd[i] = (inversion_loss(&model, &Tensor::new(vec![1, 4, 4], plus).unwrap(), &y, &est, tvw)
                .unwrap()
                - inversion_loss(&model, &Tensor::new(vec![1, 4, 4], minus).unwrap(), &y, &est, tvw)
                    .unwrap())
                / (2.0 * h);
        }
        let diff: f64 = dx.values.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / scale.max(1e-300) <= 1e-4, "rel err {}", diff / scale);
    }

    #[test]
    fn inversion_loss_grad_soft_label_directional_derivative() {
        // Perturb the soft label along simplex-preserving directions
        // e_k - e_l and compare with the analytic label gradient.
        let arch = ArchSpec::mlp(6, &[5], 3).unwrap();
        let model = init_model(&arch, 44);
        let x = random_x(6, 4);
        let y = vec![0.3, 0.45, 0.25];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let est = GradientEstimate {
            values: (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            convention: SignConvention::ReconstructionDiff,
        };
        let (_, dy) = inversion_loss_grad(&model, &x, &Label::Soft(y.clone()), &est, 0.0).unwrap();
        let dy = dy.unwrap();

        let h = 1e-6;
        for (k, l) in [(0usize, 1usize), (1, 2), (2, 0)] {
            let mut plus = y.clone();
            plus[k] += h;
            plus[l] -= h;
            let mut minus = y.clone();
            minus[k] -= h;
            minus[l] += h;
            let fd = (inversion_loss(&model, &x, &Label::Soft(plus), &est, 0.0).unwrap()
                - inversion_loss(&model, &x, &Label::Soft(minus), &est, 0.0).unwrap())
                / (2.0 * h);
            let analytic = dy[k] - dy[l];
            assert!(
                (fd - analytic).abs() <= 1e-5 * (1.0 + fd.abs()),
                "direction ({k},{l}): fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn inversion_grad_stationary_at_perfect_match() {
        let arch = ArchSpec::mlp(6, &[5], 3).unwrap();
        let model = init_model(&arch, 50);
        let x = random_x(6, 5);
        let y = Label::Class(0);
        let g = param_grad(&model, std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap();
        let est = GradientEstimate { values: g.values, convention: SignConvention::ReconstructionDiff };
        let (dx, _) = inversion_loss_grad(&model, &x, &y, &est, 0.0).unwrap();
        assert!(dx.values.iter().all(|v| v.abs() <= 1e-10), "grad {:?}", dx.values);
    }

    #[test]
    fn inversion_grad_invariant_to_estimate_scale() {
        let arch = ArchSpec::mlp(6, &[5], 3).unwrap();
        let model = init_model(&arch, 51);
        let x = random_x(6, 6);
        let y = Label::Class(1);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let values: Vec<f64> = (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let est = GradientEstimate { values: values.clone(), convention: SignConvention::ReconstructionDiff };
        let doubled = GradientEstimate {
            values: values.iter().map(|v| 2.0 * v).collect(),
            convention: SignConvention::ReconstructionDiff,
        };
        let (a, _) = inversion_loss_grad(&model, &x, &y, &est, 0.0).unwrap();
        let (b, _) = inversion_loss_grad(&model, &x, &y, &doubled, 0.0).unwrap();
        for (ai, bi) in a.values.iter().zip(&b.values) {
            assert!((ai - bi).abs() <= 1e-15);
        }
    }

    #[test]
    fn metrics_trivial_and_analytic_cases() {
        let x = random_x(10, 60);
        assert_eq!(metric_mse(&x, &x).unwrap(), 0.0);
        assert_eq!(metric_psnr(&x, &x).unwrap(), f64::INFINITY);

        let zeros = Tensor::new(vec![8], vec![0.0; 8]).unwrap();
        let ones = Tensor::new(vec![8], vec![1.0; 8]).unwrap();
        assert!((metric_mse(&zeros, &ones).unwrap() - 1.0).abs() <= 1e-15);
        assert!(metric_psnr(&zeros, &ones).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn metrics_match_independent_recomputation() {
        let x = random_x(17, 61);
        let y = random_x(17, 62);
        // independent arithmetic path
        let mut sq = 0.0;
        for i in 0..17 {
            let d = x.data()[i] - y.data()[i];
            sq += d * d;
        }
        let rmse_expected = (sq / 17.0).sqrt();
        let psnr_expected = -10.0 * (sq / 17.0).log10();
        assert!((metric_mse(&x, &y).unwrap() - rmse_expected).abs() <= 1e-12);
        assert!((metric_psnr(&x, &y).unwrap() - psnr_expected).abs() <= 1e-12);

        assert!(matches!(
            metric_mse(&x, &random_x(5, 63)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn psnr_decreases_as_mse_grows() {
        let x = Tensor::new(vec![4], vec![0.5; 4]).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let off = k as f64 * 0.05;
            let y = Tensor::new(vec![4], vec![0.5 + off; 4]).unwrap();
            let p = metric_psnr(&x, &y).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn invert_rejects_zero_difference() {
        let arch = ArchSpec::mlp(4, &[3], 2).unwrap();
        let model = init_model(&arch, 70);
        let est = GradientEstimate {
            values: vec![0.0; model.param_count()],
            convention: SignConvention::ReconstructionDiff,
        };
        let cfg = InversionConfig::new(LabelMode::Known(0), 5, 1);
        assert!(matches!(invert(&model, &est, &cfg, None), Err(Error::ZeroModelDifference)));
    }

    #[test]
    fn invert_is_deterministic_and_never_worse_than_start() {
        let arch = ArchSpec::mlp(6, &[5], 3).unwrap();
        let model = init_model(&arch, 71);
        let target = random_x(6, 72);
        let y = Label::Class(1);
        let g = param_grad(&model, std::slice::from_ref(&target), std::slice::from_ref(&y)).unwrap();
        let est = GradientEstimate { values: g.values, convention: SignConvention::ReconstructionDiff };
        let mut cfg = InversionConfig::new(LabelMode::Known(1), 60, 5);
        cfg.restarts = 2;
        let a = invert(&model, &est, &cfg, Some(std::slice::from_ref(&target))).unwrap();
        let b = invert(&model, &est, &cfg, Some(std::slice::from_ref(&target))).unwrap();
        assert_eq!(a.final_loss, b.final_loss);
        assert_eq!(a.slots[0].features.data(), b.slots[0].features.data());

        // first trace entry is the loss at the seeded initial iterate
        let initial = a.trace.first().unwrap().1;
        assert!(a.final_loss <= initial);
        // recovered features stay in the box
        assert!(a.slots[0].features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.slots[0].rmse.is_some() && a.slots[0].psnr_db.is_some());
    }
}
