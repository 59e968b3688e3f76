//! Defenses the model developer can apply before releasing the unlearned
//! model: parameter obfuscation of the unlearning gradient, global
//! magnitude pruning, and fine-tuning on extra data; plus the utility-ratio
//! metric that prices them.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{FlatGrad, ModelState};
use crate::train::{evaluate, sgd_train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Clip-and-noise settings for obfuscating the unlearning gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationConfig {
    /// L2 clipping norm; 1.2 follows the usual DP-SGD tutorial setting.
    pub clip_norm: f64,
    /// Per-coordinate Gaussian noise scale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ObfuscationConfig {
    pub fn new(noise_sigma: f64, seed: u64) -> Self {
        Self { clip_norm: 1.2, noise_sigma, seed }
    }
}

/// Outcome of applying one defense.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub defense: String,
    pub parameter: f64,
    pub defended_accuracy: f64,
    pub undefended_accuracy: f64,
    /// defended validation accuracy / undefended validation accuracy.
    pub utility_ratio: f64,
}

/// Clip the aggregate unlearning gradient to `clip_norm` and add seeded
/// per-coordinate Gaussian noise. The caller then applies the transformed
/// gradient with `M_u = M + grad`.
pub fn obfuscate_unlearn_gradient(grad_u: &FlatGrad, cfg: &ObfuscationConfig) -> Result<FlatGrad> {
    if cfg.clip_norm <= 0.0 {
        return Err(Error::InvalidArgument("clip norm must be positive".into()));
    }
    if cfg.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
    }
    let norm = grad_u.l2_norm();
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    let mut values: Vec<f64> = grad_u.values.iter().map(|v| v * scale).collect();
    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(FlatGrad { values, wrt: grad_u.wrt })
}

/// Zero exactly `floor(p * param_count)` parameters of smallest absolute
/// value (global magnitude ranking, ties to the lower flat index).
pub fn prune_model(model: &ModelState, p: f64) -> Result<ModelState> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("prune fraction {p} outside [0, 1)")));
    }
    let n = model.param_count();
    let zero_count = (p * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        model.params()[a]
            .abs()
            .partial_cmp(&model.params()[b].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut params = model.params().to_vec();
    for &i in order.iter().take(zero_count) {
        params[i] = 0.0;
    }
    model.with_params(params)
}

/// Fine-tune the unlearned model on extra data for `epochs` (default 1)
/// epochs of SGD at `lr`.
pub fn finetune_defense(
    model_u: &ModelState,
    extra_ds: &Dataset,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<ModelState> {
    let cfg = TrainConfig::new(lr, 128.min(extra_ds.len().max(1)), epochs, seed);
    sgd_train(model_u, extra_ds, &cfg)
}

/// Validation-accuracy ratio of a defended model against the undefended
/// unlearned model. Can exceed 1 when a defense (fine-tuning) improves the
/// model.
pub fn utility_ratio(
    defended: &ModelState,
    undefended: &ModelState,
    val_ds: &Dataset,
) -> Result<f64> {
    let defended_acc = evaluate(defended, val_ds)?.accuracy;
    let undefended_acc = evaluate(undefended, val_ds)?.accuracy;
    if undefended_acc == 0.0 {
        return Err(Error::ZeroBaselineAccuracy);
    }
    Ok(defended_acc / undefended_acc)
}

/// Convenience wrapper producing a [`DefenseReport`].
pub fn report(
    defense: &str,
    parameter: f64,
    defended: &ModelState,
    undefended: &ModelState,
    val_ds: &Dataset,
) -> Result<DefenseReport> {
    let defended_accuracy = evaluate(defended, val_ds)?.accuracy;
    let undefended_accuracy = evaluate(undefended, val_ds)?.accuracy;
    if undefended_accuracy == 0.0 {
        return Err(Error::ZeroBaselineAccuracy);
    }
    Ok(DefenseReport {
        defense: defense.to_string(),
        parameter,
        defended_accuracy,
        undefended_accuracy,
        utility_ratio: defended_accuracy / undefended_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, Wrt};
    use crate::train::init_model;

    #[test]
    fn obfuscation_clip_contract() {
        // below the clip norm with sigma 0: identity
        let g = FlatGrad { values: vec![0.3, -0.4], wrt: Wrt::Params };
        let cfg = ObfuscationConfig::new(0.0, 1);
        let out = obfuscate_unlearn_gradient(&g, &cfg).unwrap();
        assert_eq!(out.values, g.values);

        // above the clip norm with sigma 0: norm becomes exactly C,
        // direction preserved
        let g = FlatGrad { values: vec![3.0, 4.0], wrt: Wrt::Params };
        let out = obfuscate_unlearn_gradient(&g, &cfg).unwrap();
        assert!((out.l2_norm() - 1.2).abs() <= 1e-9);
        assert!((out.values[0] / out.values[1] - 3.0 / 4.0).abs() <= 1e-12);
    }

    #[test]
    fn obfuscation_noise_is_seeded() {
        let g = FlatGrad { values: vec![0.1; 16], wrt: Wrt::Params };
        let a = obfuscate_unlearn_gradient(&g, &ObfuscationConfig::new(0.005, 9)).unwrap();
        let b = obfuscate_unlearn_gradient(&g, &ObfuscationConfig::new(0.005, 9)).unwrap();
        let c = obfuscate_unlearn_gradient(&g, &ObfuscationConfig::new(0.005, 10)).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        assert_ne!(a.values, g.values);
    }

    #[test]
    fn prune_hand_ranking_oracle() {
        // Independent hand ranking of [3,-1,2,-4] by |value|:
        // 1 (idx 1) < 2 (idx 2) < 3 (idx 0) < 4 (idx 3).
        // floor(0.5 * 4) = 2 zeros -> indices 1 and 2.
        let arch = ArchSpec::new(
            vec![2],
            vec![crate::nn::Layer::Linear { in_dim: 2, out_dim: 2, bias: false }],
            2,
        )
        .unwrap();
        let model = ModelState::new(arch, vec![3.0, -1.0, 2.0, -4.0]).unwrap();
        let pruned = prune_model(&model, 0.5).unwrap();
        assert_eq!(pruned.params(), &[3.0, 0.0, 0.0, -4.0]);
    }

    #[test]
    fn prune_zero_fraction_is_identity_and_idempotent() {
        let arch = ArchSpec::mlp(5, &[4], 3).unwrap();
        let model = init_model(&arch, 3);
        let same = prune_model(&model, 0.0).unwrap();
        assert_eq!(model.params(), same.params());

        let once = prune_model(&model, 0.6).unwrap();
        let twice = prune_model(&once, 0.6).unwrap();
        assert_eq!(once.params(), twice.params());
        // never increases any |parameter|
        for (a, b) in once.params().iter().zip(model.params()) {
            assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn prune_zero_count_is_exact() {
        let arch = ArchSpec::mlp(6, &[5], 2).unwrap();
        let model = init_model(&arch, 4);
        // freshly initialized biases are zero; the smallest-|v| ranking
        // swallows them first, so total zeros = max(floor(p n), preexisting)
        let preexisting = model.params().iter().filter(|&&v| v == 0.0).count();
        for p in [0.1, 0.25, 0.5, 0.9] {
            let pruned = prune_model(&model, p).unwrap();
            let zeros = pruned.params().iter().filter(|&&v| v == 0.0).count();
            let expected = (p * model.param_count() as f64).floor() as usize;
            assert_eq!(zeros, expected.max(preexisting), "p = {p}");
        }
        assert!(prune_model(&model, 1.0).is_err());
        assert!(prune_model(&model, -0.1).is_err());
    }

    #[test]
    fn finetune_zero_lr_is_identity() {
        let ds = crate::data::synth_dataset(&crate::data::SynthKind::TabularBlobs { dims: 4 }, 20, 2, 5)
            .unwrap();
        let arch = ArchSpec::mlp(4, &[3], 2).unwrap();
        let model = init_model(&arch, 8);
        let out = finetune_defense(&model, &ds, 0.0, 1, 7).unwrap();
        assert_eq!(out.params(), model.params());
    }

    #[test]
    fn utility_ratio_cases() {
        let ds = crate::data::synth_dataset(&crate::data::SynthKind::TabularBlobs { dims: 6 }, 60, 3, 6)
            .unwrap();
        let arch = ArchSpec::mlp(6, &[8], 3).unwrap();
        let model = sgd_train(&init_model(&arch, 1), &ds, &TrainConfig::new(0.1, 8, 10, 2)).unwrap();
        assert!((utility_ratio(&model, &model, &ds).unwrap() - 1.0).abs() <= 1e-15);

        let crippled = prune_model(&model, 0.95).unwrap();
        let ratio = utility_ratio(&crippled, &model, &ds).unwrap();
        assert!(ratio <= 1.0);
    }
}
