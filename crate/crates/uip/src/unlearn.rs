//! Exact (retraining) and approximate (single-gradient) unlearning.

use crate::data::{select_unlearn, Dataset, UnlearnSelection};
use crate::error::{Error, Result};
use crate::nn::{param_grad, FlatGrad, Label, ModelState, Wrt};
use crate::train::{sgd_train, TrainConfig};
use serde::{Deserialize, Serialize};

/// How multi-sample removals combine per-sample gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Sum of per-sample gradients, mirroring how SGD accumulates
    /// contributions within a batch of size `b`.
    #[default]
    SumPerSample,
}

/// Parameters of the fine-tune run whose effect the approximate method
/// reverses: learning rate `eta`, batch size `b`, and epoch count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxUnlearnConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub aggregation: Aggregation,
}

impl ApproxUnlearnConfig {
    pub fn new(eta: f64, batch_size: usize, epochs: usize) -> Self {
        Self { eta, batch_size, epochs, aggregation: Aggregation::SumPerSample }
    }

    /// Mirror a fine-tune training configuration.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.batch_size, cfg.epochs)
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument("eta must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exact unlearning by retraining: fine-tune the pretrained model on the
/// private set minus the removed samples. The removed rows are dropped
/// before any training step, so they can never influence the result; the
/// caller supplies the (fresh) seed through `ft_cfg`.
pub fn exact_unlearn(
    m0: &ModelState,
    private_ds: &Dataset,
    removed: &UnlearnSelection,
    ft_cfg: &TrainConfig,
) -> Result<ModelState> {
    let (kept, _removed) = select_unlearn(private_ds, removed)?;
    sgd_train(m0, &kept, ft_cfg)
}

/// Approximate unlearning by adding back the removal gradient:
/// `M_u = M + grad_u` with
/// `grad_u = (eta * m / b) * sum over removed samples of the per-sample
/// cross-entropy gradient taken at the pretrained model M_0`.
///
/// Returns the unlearned model and `grad_u` itself (callers may transform
/// the gradient, e.g. for the obfuscation defense, before applying it with
/// [`ModelState::add_params`]).
pub fn approx_unlearn(
    m: &ModelState,
    m0: &ModelState,
    removed: &Dataset,
    cfg: &ApproxUnlearnConfig,
) -> Result<(ModelState, FlatGrad)> {
    cfg.validate()?;
    if m.arch() != m0.arch() {
        return Err(Error::ArchMismatch);
    }
    let grad_u = unlearn_gradient(m0, removed, cfg)?;
    let m_u = m.add_params(&grad_u.values)?;
    Ok((m_u, grad_u))
}

/// The raw removal gradient `grad_u` without applying it.
pub fn unlearn_gradient(
    m0: &ModelState,
    removed: &Dataset,
    cfg: &ApproxUnlearnConfig,
) -> Result<FlatGrad> {
    cfg.validate()?;
    if removed.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scale = cfg.eta * cfg.epochs as f64 / cfg.batch_size as f64;
    let mut total = vec![0.0; m0.param_count()];
    let Aggregation::SumPerSample = cfg.aggregation;
    for i in 0..removed.len() {
        let (x, y) = removed.sample(i)?;
        let g = param_grad(m0, &[x], &[Label::Class(y)])?;
        for (t, gi) in total.iter_mut().zip(&g.values) {
            *t += scale * gi;
        }
    }
    Ok(FlatGrad { values: total, wrt: Wrt::Params })
}
