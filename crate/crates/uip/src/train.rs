//! SGD training and the pretrain-then-fine-tune regime.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{forward, param_grad_with_loss, ArchSpec, Label, Layer, ModelState};
use crate::seeds::{derive_seed, splitmix64};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Plain SGD configuration.
///
/// With `lr_decay` the learning rate falls linearly with the epoch index:
/// epoch `e` of `E` trains at `learning_rate * (1 - e/E)`. `epochs` may be
/// zero, in which case training is a no-op returning the input parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_decay: Option<f64>,
    pub lr_decay: bool,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self { learning_rate, batch_size, epochs, seed, weight_decay: None, lr_decay: false }
    }

    /// The fine-tune defaults: lr 0.001, batch 128 clipped to the dataset
    /// size, one epoch.
    pub fn finetune_default(dataset_len: usize, seed: u64) -> Self {
        Self::new(0.001, 128.min(dataset_len.max(1)), 1, seed)
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Accuracy and mean loss of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Seeded scaled-uniform initialization: weights drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_model(arch: &ArchSpec, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(arch.param_count());
    for layer in arch.layers() {
        match *layer {
            Layer::Linear { in_dim, out_dim, bias } => {
                let scale = 1.0 / (in_dim as f64).sqrt();
                params.extend((0..in_dim * out_dim).map(|_| rng.random_range(-scale..scale)));
                if bias {
                    params.extend(std::iter::repeat_n(0.0, out_dim));
                }
            }
            Layer::Conv2D { in_ch, out_ch, kernel, .. } => {
                let scale = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
                params.extend(
                    (0..out_ch * in_ch * kernel * kernel).map(|_| rng.random_range(-scale..scale)),
                );
            }
            _ => {}
        }
    }
    ModelState::new(arch.clone(), params).expect("layout matches arch by construction")
}

/// Mini-batch SGD over seeded-shuffled batches. The input model is left
/// untouched; the trained copy is returned. Bit-deterministic per seed.
pub fn sgd_train(model: &ModelState, ds: &Dataset, cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.feature_shape() != model.arch().input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.arch().input_shape().to_vec(),
            got: ds.feature_shape().to_vec(),
        });
    }
    let rows = ds.rows();
    let labels: Vec<Label> = ds.labels().iter().map(|&l| Label::Class(l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = model.clone();
    let mut indices: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let lr = if cfg.lr_decay {
            cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64)
        } else {
            cfg.learning_rate
        };
        for (step, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<Tensor> = batch.iter().map(|&i| rows[i].clone()).collect();
            let ys: Vec<Label> = batch.iter().map(|&i| labels[i].clone()).collect();
            let (mut grad, loss) = param_grad_with_loss(&current, &xs, &ys)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            if let Some(wd) = cfg.weight_decay {
                for (g, p) in grad.values.iter_mut().zip(current.params()) {
                    *g += wd * p;
                }
            }
            let params = current.params_mut();
            for (p, g) in params.iter_mut().zip(&grad.values) {
                *p -= lr * g;
            }
        }
    }
    Ok(current)
}

/// Pretrain on the public split, then fine-tune on the private split:
/// returns `(M_0, M)`. The initial weights are drawn from a seed derived
/// from `pre_cfg.seed` so initialization and batch shuffling use distinct
/// streams.
pub fn pretrain_finetune(
    arch: &ArchSpec,
    pretrain_ds: &Dataset,
    private_ds: &Dataset,
    pre_cfg: &TrainConfig,
    ft_cfg: &TrainConfig,
) -> Result<(ModelState, ModelState)> {
    let init = init_model(arch, splitmix64(pre_cfg.seed));
    let m0 = sgd_train(&init, pretrain_ds, pre_cfg)?;
    let m = sgd_train(&m0, private_ds, ft_cfg)?;
    Ok((m0, m))
}

/// Accuracy (argmax of logits, ties to the lowest class index) and mean
/// cross-entropy on a dataset.
pub fn evaluate(model: &ModelState, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i)?;
        let logits = forward(model, &x)?;
        let pred = argmax(logits.data());
        if pred == y {
            correct += 1;
        }
        loss += crate::nn::cross_entropy(&logits, &Label::Class(y))?;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss / ds.len() as f64,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Seed helper for stage-scoped training runs.
pub fn stage_seed(master: u64, stream: u64) -> u64 {
    derive_seed(master, stream)
}
