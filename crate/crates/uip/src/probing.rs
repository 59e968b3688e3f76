//! Black-box label inference: craft per-class probing samples on the
//! original model with zeroth-order optimization, then read the unlearned
//! class off the per-class confidence drops.
//!
//! Everything here touches models only through [`QueryOracle`]; the attack
//! never sees parameters.

use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A black-box prediction oracle: input tensor in, probability vector out.
pub trait QueryOracle: Sync {
    fn class_count(&self) -> usize;
    fn input_shape(&self) -> &[usize];
    /// Probability vector of length `class_count`, summing to 1 within 1e-9.
    fn predict(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// The in-process oracle: a local model behind forward + softmax.
pub struct ModelOracle<'a> {
    model: &'a crate::nn::ModelState,
}

impl<'a> ModelOracle<'a> {
    pub fn new(model: &'a crate::nn::ModelState) -> Self {
        Self { model }
    }
}

impl QueryOracle for ModelOracle<'_> {
    fn class_count(&self) -> usize {
        self.model.arch().class_count()
    }

    fn input_shape(&self) -> &[usize] {
        self.model.arch().input_shape()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let logits = crate::nn::forward(self.model, x)?;
        Ok(crate::nn::softmax(&logits).into_data())
    }
}

/// Settings for zeroth-order probe construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    /// Oracle-query budget per probe.
    pub max_queries: usize,
    /// Adam step size.
    pub step_size: f64,
    /// Symmetric-difference step h.
    pub fd_step: f64,
    /// Coordinates estimated per iteration (capped at the input dimension).
    pub coords_per_iter: usize,
    pub seed: u64,
    /// Stop once the target-class confidence reaches this value.
    pub threshold: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            max_queries: 50_000,
            step_size: 0.05,
            fd_step: 1e-4,
            coords_per_iter: 128,
            seed: 0,
            threshold: 1.0 - 1e-3,
        }
    }
}

/// A crafted input the original model assigns to `target_class` with
/// confidence at or above the stopping threshold (when `converged`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbingSample {
    pub input: Tensor,
    pub target_class: usize,
    /// The original model's full output on `input`, recorded at
    /// construction time.
    pub original_output: Vec<f64>,
    pub converged: bool,
    pub query_count: usize,
}

/// Per-class lists of probing samples plus the construction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbingSet {
    /// `classes[y]` holds the probes targeting class `y`.
    pub classes: Vec<Vec<ProbingSample>>,
    pub probes_per_class: usize,
    pub threshold: f64,
}

impl ProbingSet {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn total_queries(&self) -> usize {
        self.classes.iter().flatten().map(|p| p.query_count).sum()
    }

    /// A copy restricted to the first `m` probes of every class (probes are
    /// seeded independently, so this equals a fresh `m`-probe construction).
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            classes: self
                .classes
                .iter()
                .map(|list| list.iter().take(m).cloned().collect())
                .collect(),
            probes_per_class: m.min(self.probes_per_class),
            threshold: self.threshold,
        }
    }
}

/// Average per-class output change between the recorded original outputs
/// and a (typically unlearned) oracle, and the per-class drop scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDelta {
    /// `delta[t]` is the length-C vector `mean_i(original_i - unlearned_i)`
    /// over the converged probes targeting class `t`.
    pub delta: Vec<Vec<f64>>,
    /// `beta[t] = delta[t][t]`: the confidence drop of class `t` on its own
    /// probes. A removal shows up as a positive drop.
    pub beta: Vec<f64>,
    /// Converged probes actually averaged per class.
    pub probes_used: Vec<usize>,
}

/// The ZOO objective: `max_{i != t} z_i - z_t` over log-probabilities.
/// Log of the oracle's probabilities recovers logits up to a shared shift,
/// which cancels in the difference.
fn zoo_objective(probs: &[f64], target: usize) -> f64 {
    let logp: Vec<f64> = probs.iter().map(|&p| p.max(1e-300).ln()).collect();
    let best_other = logp
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    best_other - logp[target]
}

/// Craft one probing sample by coordinate-wise zeroth-order descent.
///
/// Starts from seeded Gaussian noise mapped into [0,1]; each iteration
/// estimates the objective's derivative on a random coordinate subset with
/// symmetric differences, applies a per-coordinate Adam update, clamps to
/// the box, and re-queries the confidence. Returns an unconverged sample
/// (flag false) when the query budget runs out.
pub fn zoo_construct_probe(
    oracle: &dyn QueryOracle,
    target_class: usize,
    cfg: &ZooConfig,
) -> Result<ProbingSample> {
    let classes = oracle.class_count();
    if target_class >= classes {
        return Err(Error::InvalidLabel { label: target_class, classes });
    }
    let shape = oracle.input_shape().to_vec();
    let dim: usize = shape.iter().product();
    let coords = cfg.coords_per_iter.min(dim).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x: Vec<f64> = (0..dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (0.5 + 0.25 * n).clamp(0.0, 1.0)
        })
        .collect();

    let mut queries = 0usize;
    let query = |x: &[f64], queries: &mut usize| -> Result<Vec<f64>> {
        *queries += 1;
        let out = oracle.predict(&Tensor::from_parts(shape.clone(), x.to_vec()))?;
        if out.len() != classes {
            return Err(Error::OracleLenMismatch { expected: classes, got: out.len() });
        }
        Ok(out)
    };

    let mut output = query(&x, &mut queries)?;
    if output[target_class] >= cfg.threshold {
        return Ok(ProbingSample {
            input: Tensor::from_parts(shape, x),
            target_class,
            original_output: output,
            converged: true,
            query_count: queries,
        });
    }

    // Per-coordinate Adam state (each coordinate keeps its own step count).
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let mut t = vec![0i32; dim];
    let (b1, b2) = (0.9, 0.999);

    while queries + 2 * coords + 1 <= cfg.max_queries {
        let picked = sample(&mut rng, dim, coords);
        for j in picked.iter() {
            let orig = x[j];
            x[j] = orig + cfg.fd_step;
            let up = zoo_objective(&query(&x, &mut queries)?, target_class);
            x[j] = orig - cfg.fd_step;
            let down = zoo_objective(&query(&x, &mut queries)?, target_class);
            x[j] = orig;
            let g = (up - down) / (2.0 * cfg.fd_step);

            t[j] += 1;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mhat = m[j] / (1.0 - b1.powi(t[j]));
            let vhat = v[j] / (1.0 - b2.powi(t[j]));
            x[j] = (orig - cfg.step_size * mhat / (vhat.sqrt() + 1e-8)).clamp(0.0, 1.0);
        }
        output = query(&x, &mut queries)?;
        if output[target_class] >= cfg.threshold {
            return Ok(ProbingSample {
                input: Tensor::from_parts(shape, x),
                target_class,
                original_output: output,
                converged: true,
                query_count: queries,
            });
        }
    }

    Ok(ProbingSample {
        input: Tensor::from_parts(shape, x),
        target_class,
        original_output: output,
        converged: false,
        query_count: queries,
    })
}

/// Construct `m` probes per class. Per-probe seeds derive from
/// `(cfg.seed, class, index)`, so the set is deterministic and any prefix
/// of a class's probes equals a smaller-m construction. Errors when a class
/// ends up with zero converged probes.
pub fn build_probing_set(oracle: &dyn QueryOracle, m: usize, cfg: &ZooConfig) -> Result<ProbingSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one probe per class".into()));
    }
    let classes = oracle.class_count();
    let jobs: Vec<(usize, usize)> =
        (0..classes).flat_map(|c| (0..m).map(move |i| (c, i))).collect();
    let probes: Vec<ProbingSample> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let probe_cfg = ZooConfig {
                seed: derive_seed(cfg.seed, (c as u64) << 20 | i as u64),
                ..cfg.clone()
            };
            zoo_construct_probe(oracle, c, &probe_cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_class: Vec<Vec<ProbingSample>> = vec![Vec::with_capacity(m); classes];
    for probe in probes {
        by_class[probe.target_class].push(probe);
    }
    for (c, list) in by_class.iter().enumerate() {
        if !list.iter().any(|p| p.converged) {
            return Err(Error::ProbeConstruction { class: c });
        }
    }
    Ok(ProbingSet { classes: by_class, probes_per_class: m, threshold: cfg.threshold })
}

/// Query the unlearned oracle on every converged probe and average the
/// output changes per target class. Unconverged probes are excluded from
/// the average.
pub fn probe_delta(probes: &ProbingSet, unlearned: &dyn QueryOracle) -> Result<ConfidenceDelta> {
    let c = probes.class_count();
    let mut delta = Vec::with_capacity(c);
    let mut beta = Vec::with_capacity(c);
    let mut used = Vec::with_capacity(c);
    for (target, list) in probes.classes.iter().enumerate() {
        let mut acc = vec![0.0; c];
        let mut count = 0usize;
        for probe in list.iter().filter(|p| p.converged) {
            let out = unlearned.predict(&probe.input)?;
            if out.len() != c || probe.original_output.len() != c {
                return Err(Error::OracleLenMismatch {
                    expected: c,
                    got: out.len().max(probe.original_output.len()),
                });
            }
            for ((a, orig), new) in acc.iter_mut().zip(&probe.original_output).zip(&out) {
                *a += orig - new;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::ProbeConstruction { class: target });
        }
        for a in &mut acc {
            *a /= count as f64;
        }
        beta.push(acc[target]);
        delta.push(acc);
        used.push(count);
    }
    Ok(ConfidenceDelta { delta, beta, probes_used: used })
}

/// The K classes with the largest confidence drop, descending; ties break
/// toward the lower class index.
pub fn infer_labels(deltas: &ConfidenceDelta, k: usize) -> Result<Vec<usize>> {
    let c = deltas.beta.len();
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("top-K of {k} outside [1, {c}]")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        deltas.beta[b].partial_cmp(&deltas.beta[a]).unwrap().then(a.cmp(&b))
    });
    Ok(order.into_iter().take(k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle backed by a fixed function of the input; no model anywhere.
    struct FnOracle<F: Fn(&Tensor) -> Vec<f64> + Sync> {
        classes: usize,
        shape: Vec<usize>,
        f: F,
    }

    impl<F: Fn(&Tensor) -> Vec<f64> + Sync> QueryOracle for FnOracle<F> {
        fn class_count(&self) -> usize {
            self.classes
        }
        fn input_shape(&self) -> &[usize] {
            &self.shape
        }
        fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
            Ok((self.f)(x))
        }
    }

    #[test]
    fn constant_confident_oracle_converges_in_one_query() {
        let oracle = FnOracle { classes: 3, shape: vec![4], f: |_| vec![0.9995, 0.0003, 0.0002] };
        let probe = zoo_construct_probe(&oracle, 0, &ZooConfig::default()).unwrap();
        assert!(probe.converged);
        assert_eq!(probe.query_count, 1);
        assert!(probe.original_output[0] >= 1.0 - 1e-3);
    }

    #[test]
    fn symmetric_difference_matches_analytic_derivative_on_quadratic() {
        // Oracle whose log-probability objective is a known quadratic:
        // probs = softmax([q(x), 0]) gives objective g = -q(x) for target 0
        // (when q < 0, class 1 is the runner-up), so dg/dx_j = -dq/dx_j.
        let q = |x: &Tensor| -> f64 {
            let d = x.data();
            -(1.5 * d[0] * d[0] + 0.5 * d[1] * d[1] + 0.25 * d[0] * d[1])
        };
        let oracle = FnOracle {
            classes: 2,
            shape: vec![2],
            f: move |x| {
                let z0 = q(x);
                let m = z0.max(0.0);
                let (a, b) = ((z0 - m).exp(), (0.0 - m).exp());
                vec![a / (a + b), b / (a + b)]
            },
        };
        let x = Tensor::new(vec![2], vec![0.6, 0.4]).unwrap();
        let h = 1e-4;
        for j in 0..2 {
            let mut plus = x.data().to_vec();
            plus[j] += h;
            let mut minus = x.data().to_vec();
            minus[j] -= h;
            let up = zoo_objective(&oracle.predict(&Tensor::new(vec![2], plus).unwrap()).unwrap(), 0);
            let down =
                zoo_objective(&oracle.predict(&Tensor::new(vec![2], minus).unwrap()).unwrap(), 0);
            let estimate = (up - down) / (2.0 * h);
            // analytic: g = -q, dq/dx0 = -(3 x0 + 0.25 x1), dq/dx1 = -(x1 + 0.25 x0)
            let analytic = if j == 0 {
                3.0 * 0.6 + 0.25 * 0.4
            } else {
                0.4 + 0.25 * 0.6
            };
            let rel = (estimate - analytic).abs() / analytic.abs();
            assert!(rel <= 1e-3, "coord {j}: estimate {estimate} vs {analytic}");
        }
    }

    #[test]
    fn probing_set_counts_and_contract() {
        // A localized oracle: confidence for class c peaks when x is near
        // c/(C-1); easy for ZOO on 2 dims.
        let classes = 4;
        let oracle = FnOracle {
            classes,
            shape: vec![2],
            f: move |x| {
                let center = |c: usize| c as f64 / 3.0;
                let scores: Vec<f64> = (0..classes)
                    .map(|c| {
                        let d0 = x.data()[0] - center(c);
                        let d1 = x.data()[1] - center(c);
                        (-40.0 * (d0 * d0 + d1 * d1)).exp() + 1e-12
                    })
                    .collect();
                let s: f64 = scores.iter().sum();
                scores.into_iter().map(|v| v / s).collect()
            },
        };
        let cfg = ZooConfig { max_queries: 20_000, seed: 3, ..ZooConfig::default() };
        let set = build_probing_set(&oracle, 3, &cfg).unwrap();
        assert_eq!(set.classes.len(), 4);
        assert_eq!(set.classes.iter().map(Vec::len).sum::<usize>(), 12);
        for list in &set.classes {
            for probe in list.iter().filter(|p| p.converged) {
                assert!(probe.original_output[probe.target_class] >= 1.0 - 1e-3);
            }
        }
        // truncation equals fresh smaller-m construction
        let small = build_probing_set(&oracle, 2, &cfg).unwrap();
        assert_eq!(set.truncated(2), small);
    }

    #[test]
    fn probe_delta_matches_hand_arithmetic() {
        let probes = ProbingSet {
            classes: vec![
                vec![
                    ProbingSample {
                        input: Tensor::new(vec![1], vec![0.1]).unwrap(),
                        target_class: 0,
                        original_output: vec![0.9990, 0.0010],
                        converged: true,
                        query_count: 1,
                    },
                    ProbingSample {
                        input: Tensor::new(vec![1], vec![0.2]).unwrap(),
                        target_class: 0,
                        original_output: vec![0.9992, 0.0008],
                        converged: true,
                        query_count: 1,
                    },
                ],
                vec![ProbingSample {
                    input: Tensor::new(vec![1], vec![0.9]).unwrap(),
                    target_class: 1,
                    original_output: vec![0.0004, 0.9996],
                    converged: true,
                    query_count: 1,
                }],
            ],
            probes_per_class: 2,
            threshold: 1.0 - 1e-3,
        };
        // Unlearned oracle keyed off the stored scalar input.
        let unlearned = FnOracle {
            classes: 2,
            shape: vec![1],
            f: |x| match x.data()[0] {
                v if v < 0.15 => vec![0.7, 0.3],
                v if v < 0.25 => vec![0.8, 0.2],
                _ => vec![0.0004, 0.9996],
            },
        };
        let d = probe_delta(&probes, &unlearned).unwrap();
        // class 0: mean([0.999-0.7, 0.9992-0.8]) = mean([0.299, 0.1992])
        let expected0 = (0.9990 - 0.7 + 0.9992 - 0.8) / 2.0;
        assert!((d.beta[0] - expected0).abs() <= 1e-12);
        // class 1 probes unchanged
        assert!(d.beta[1].abs() <= 1e-12);
        // zero-sum per target class
        for row in &d.delta {
            assert!(row.iter().sum::<f64>().abs() <= 1e-9);
        }
        assert_eq!(infer_labels(&d, 1).unwrap(), vec![0]);
    }

    #[test]
    fn probe_delta_identical_oracles_is_zero() {
        // Hand-built full probing set; the "unlearned" oracle is the same
        // constant oracle the outputs were recorded from.
        let oracle = FnOracle { classes: 3, shape: vec![2], f: |_| vec![0.9995, 0.0004, 0.0001] };
        let mk = |target| ProbingSample {
            input: Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(),
            target_class: target,
            original_output: vec![0.9995, 0.0004, 0.0001],
            converged: true,
            query_count: 1,
        };
        let probes = ProbingSet {
            classes: (0..3).map(|c| vec![mk(c)]).collect(),
            probes_per_class: 1,
            threshold: 1.0 - 1e-3,
        };
        let d = probe_delta(&probes, &oracle).unwrap();
        assert!(d.beta.iter().all(|b| b.abs() <= 1e-15));
        assert!(d.delta.iter().flatten().all(|v| v.abs() <= 1e-15));
    }

    #[test]
    fn probe_delta_is_order_invariant() {
        let mk = |inp: f64, target: usize, out: [f64; 2]| ProbingSample {
            input: Tensor::new(vec![1], vec![inp]).unwrap(),
            target_class: target,
            original_output: out.to_vec(),
            converged: true,
            query_count: 1,
        };
        let class1 = vec![mk(0.6, 1, [0.001, 0.999])];
        let a = ProbingSet {
            classes: vec![
                vec![mk(0.1, 0, [0.999, 0.001]), mk(0.8, 0, [0.9995, 0.0005])],
                class1.clone(),
            ],
            probes_per_class: 2,
            threshold: 1.0 - 1e-3,
        };
        let b = ProbingSet {
            classes: vec![
                vec![mk(0.8, 0, [0.9995, 0.0005]), mk(0.1, 0, [0.999, 0.001])],
                class1,
            ],
            probes_per_class: 2,
            threshold: 1.0 - 1e-3,
        };
        let unlearned = FnOracle {
            classes: 2,
            shape: vec![1],
            f: |x| if x.data()[0] < 0.5 { vec![0.6, 0.4] } else { vec![0.9, 0.1] },
        };
        let da = probe_delta(&a, &unlearned).unwrap();
        let db = probe_delta(&b, &unlearned).unwrap();
        assert!((da.beta[0] - db.beta[0]).abs() <= 1e-15);
    }

    #[test]
    fn infer_labels_ordering_and_ties() {
        let d = ConfidenceDelta {
            delta: vec![],
            beta: vec![0.4, -0.1, 0.05],
            probes_used: vec![1; 3],
        };
        assert_eq!(infer_labels(&d, 1).unwrap(), vec![0]);

        let d = ConfidenceDelta {
            delta: vec![],
            beta: vec![0.3, 0.5, 0.1, 0.5, 0.2],
            probes_used: vec![1; 5],
        };
        assert_eq!(infer_labels(&d, 3).unwrap(), vec![1, 3, 0]);
        assert!(infer_labels(&d, 0).is_err());
        assert!(infer_labels(&d, 6).is_err());
        let top = infer_labels(&d, 5).unwrap();
        let mut dedup = top.clone();
        dedup.dedup();
        assert_eq!(top.len(), 5);
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn attack_runs_without_any_model_state() {
        // The whole pipeline over closure oracles proves the attack only
        // touches the QueryOracle surface.
        let original = FnOracle {
            classes: 2,
            shape: vec![3],
            f: |x| {
                let s = x.data().iter().sum::<f64>() / 3.0;
                let p0 = 0.001 + 0.998 * s;
                vec![p0, 1.0 - p0]
            },
        };
        let cfg = ZooConfig { max_queries: 5_000, seed: 7, ..ZooConfig::default() };
        let set = build_probing_set(&original, 2, &cfg).unwrap();
        let unlearned = FnOracle {
            classes: 2,
            shape: vec![3],
            f: |x| {
                let s = x.data().iter().sum::<f64>() / 3.0;
                let p0 = (0.001 + 0.998 * s) * 0.5;
                vec![p0, 1.0 - p0]
            },
        };
        let d = probe_delta(&set, &unlearned).unwrap();
        assert_eq!(infer_labels(&d, 1).unwrap(), vec![0]);
    }
}
