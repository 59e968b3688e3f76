//! Differentiable layer stack: forward evaluation, first-order gradients
//! with respect to parameters and inputs, and the mixed second-order
//! directional gradients the inversion objective needs.

mod arch;
mod autodiff;

pub use arch::{ArchSpec, Layer};
pub use autodiff::{
    cross_entropy, forward, forward_param_tangent, input_grad, mixed_second_gradient, param_grad,
    param_grad_with_loss, softmax,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A classification target: a hard class index or a soft distribution over
/// the classes (length `C`, summing to 1 within 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Soft(Vec<f64>),
}

impl Label {
    pub(crate) fn validate(&self, classes: usize) -> Result<()> {
        match self {
            Label::Class(c) => {
                if *c >= classes {
                    return Err(Error::InvalidLabel { label: *c, classes });
                }
            }
            Label::Soft(v) => {
                if v.len() != classes {
                    return Err(Error::BadSoftLabel(format!(
                        "length {} for {} classes",
                        v.len(),
                        classes
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::BadSoftLabel("non-finite entry".into()));
                }
                let sum: f64 = v.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::BadSoftLabel(format!("sums to {sum}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// Target-distribution weight of class `i`.
    pub(crate) fn weight(&self, i: usize) -> f64 {
        match self {
            Label::Class(c) => {
                if i == *c {
                    1.0
                } else {
                    0.0
                }
            }
            Label::Soft(v) => v[i],
        }
    }
}

/// What a flat gradient vector differentiates with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wrt {
    Params,
    Input,
}

/// A flat gradient vector tagged with what it was taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad {
    pub values: Vec<f64>,
    pub wrt: Wrt,
}

impl FlatGrad {
    pub fn zeros(len: usize, wrt: Wrt) -> Self {
        Self { values: vec![0.0; len], wrt }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// An architecture plus its flat parameter vector.
///
/// Two `ModelState`s are diffable iff their `ArchSpec`s are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: ArchSpec,
    params: Vec<f64>,
}

impl ModelState {
    pub fn new(arch: ArchSpec, params: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::BadParamCount { expected, got: params.len() });
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: ArchSpec) -> Self {
        let n = arch.param_count();
        Self { arch, params: vec![0.0; n] }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// A copy of this model with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    /// `self + delta` over the parameter vector.
    pub fn add_params(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.params.len() {
            return Err(Error::BadGradLen {
                expected: self.params.len(),
                got: delta.len(),
                wrt: "params",
            });
        }
        let params = self.params.iter().zip(delta).map(|(p, d)| p + d).collect();
        Ok(Self { arch: self.arch.clone(), params })
    }
}
