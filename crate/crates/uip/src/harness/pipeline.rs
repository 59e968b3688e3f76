//! Stage orchestration behind the CLI subcommands. Every stage re-derives
//! its inputs deterministically from (config, master seed), writes
//! checkpoints and artifacts under the output directory, and appends one
//! result record.

use super::config::{
    DataSource, DefenseMethod, ExperimentConfig, FeatureLabelMode, UnlearnMethod, SEED_ENV_VAR,
};
use super::results::{append_record, append_timing, ResultRecord};
use crate::data::{select_unlearn, split_pretrain_private, synth_dataset, Dataset, SynthKind, UnlearnSelection};
use crate::defense::{self, finetune_defense, obfuscate_unlearn_gradient, prune_model, ObfuscationConfig};
use crate::error::{Error, Result};
use crate::inversion::{
    estimate_gradient, invert, GradientEstimate, InversionConfig, LabelMode, RecoveryResult,
    SignConvention,
};
use crate::io::{
    load_checkpoint, load_grad_bin, load_image_bin, save_checkpoint, save_grad_bin, save_image_bin,
    write_image, Checkpoint, StageTag,
};
use crate::nn::ModelState;
use crate::probing::{build_probing_set, infer_labels, probe_delta, ModelOracle, ProbingSet, ZooConfig};
use crate::seeds::{derive_seed, stream};
use crate::train::{evaluate, pretrain_finetune, sgd_train, TrainConfig};
use crate::unlearn::{approx_unlearn, exact_unlearn, ApproxUnlearnConfig};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CKPT_PRETRAINED: &str = "m0.uipm";
pub const CKPT_ORIGINAL: &str = "m.uipm";
pub const GRAD_FILE: &str = "grad_u.uipg";
pub const DATA_PRETRAIN: &str = "d0.uipd";
pub const DATA_PRIVATE: &str = "du.uipd";

pub fn unlearned_ckpt_name(method: UnlearnMethod) -> String {
    format!("mu_{}.uipm", method.as_str())
}

/// Master seed resolution: `UIP_SEED` env var, else the config seed, else a
/// checkpoint's recorded seed.
fn resolve_seed(cfg: Option<&ExperimentConfig>, fallback: u64) -> Result<u64> {
    if let Ok(text) = std::env::var(SEED_ENV_VAR) {
        return text
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("{SEED_ENV_VAR}=`{text}` is not a u64")));
    }
    Ok(cfg.map(|c| c.seed).unwrap_or(fallback))
}

/// The derived experiment inputs shared by train and unlearn.
struct Derived {
    dataset: Dataset,
    pretrain_ds: Dataset,
    private_ds: Dataset,
}

fn derive_data(cfg: &ExperimentConfig, master: u64) -> Result<Derived> {
    let dataset = cfg.build_dataset(derive_seed(master, stream::DATASET))?;
    let (pretrain_ds, private_ds) =
        split_pretrain_private(&dataset, derive_seed(master, stream::SPLIT))?;
    Ok(Derived { dataset, pretrain_ds, private_ds })
}

/// A fresh same-distribution validation set (synthetic sources only).
fn derive_val(cfg: &ExperimentConfig, master: u64) -> Result<Option<Dataset>> {
    let kind = match cfg.dataset.source {
        DataSource::SynthTabular => SynthKind::TabularBlobs { dims: cfg.dataset.dims },
        DataSource::SynthImages => {
            SynthKind::PatternImages { shape: cfg.dataset.shape.expect("validated") }
        }
        _ => return Ok(None),
    };
    Ok(Some(synth_dataset(
        &kind,
        cfg.dataset.n,
        cfg.dataset.classes,
        derive_seed(master, stream::VAL_DATA),
    )?))
}

fn finetune_cfg(cfg: &ExperimentConfig, private_len: usize, seed: u64) -> TrainConfig {
    let mut ft = cfg.finetune.to_train_config(seed);
    ft.batch_size = ft.batch_size.min(private_len.max(1));
    ft
}

/// `train --config`: pretrain + fine-tune, write `m0.uipm` / `m.uipm`,
/// optionally export the splits, and record evaluation metrics.
pub fn run_train(cfg: &ExperimentConfig, hash: &str, out_dir: &Path) -> Result<ResultRecord> {
    let started = Instant::now();
    let master = resolve_seed(Some(cfg), 0)?;
    std::fs::create_dir_all(out_dir)?;
    let data = derive_data(cfg, master)?;
    let arch = cfg.build_arch(&data.dataset)?;
    let pre = cfg.pretrain.to_train_config(derive_seed(master, stream::PRETRAIN));
    let ft = finetune_cfg(cfg, data.private_ds.len(), derive_seed(master, stream::FINETUNE));
    let (m0, m) = pretrain_finetune(&arch, &data.pretrain_ds, &data.private_ds, &pre, &ft)?;

    save_checkpoint(
        &Checkpoint { model: m0.clone(), stage: StageTag::Pretrained, master_seed: master },
        &out_dir.join(CKPT_PRETRAINED),
    )?;
    save_checkpoint(
        &Checkpoint { model: m.clone(), stage: StageTag::Original, master_seed: master },
        &out_dir.join(CKPT_ORIGINAL),
    )?;
    if cfg.dataset.export {
        save_image_bin(&data.pretrain_ds, &out_dir.join(DATA_PRETRAIN))?;
        save_image_bin(&data.private_ds, &out_dir.join(DATA_PRIVATE))?;
    }

    let val = derive_val(cfg, master)?;
    let eval_pair = |model: &ModelState| -> Result<serde_json::Value> {
        let on_pre = evaluate(model, &data.pretrain_ds)?;
        let on_priv = evaluate(model, &data.private_ds)?;
        let on_val = val.as_ref().map(|v| evaluate(model, v)).transpose()?;
        Ok(json!({
            "pretrain_accuracy": on_pre.accuracy,
            "pretrain_loss": on_pre.mean_loss,
            "private_accuracy": on_priv.accuracy,
            "private_loss": on_priv.mean_loss,
            "heldout_accuracy": on_val.map(|e| e.accuracy),
        }))
    };
    let metrics = json!({
        "n": data.dataset.len(),
        "pretrain_n": data.pretrain_ds.len(),
        "private_n": data.private_ds.len(),
        "param_count": m.param_count(),
        "m0": eval_pair(&m0)?,
        "m": eval_pair(&m)?,
    });
    let record = ResultRecord::new("train", hash, master, metrics)
        .with_artifact("m0", &out_dir.join(CKPT_PRETRAINED))
        .with_artifact("m", &out_dir.join(CKPT_ORIGINAL));
    append_record(out_dir, &record)?;
    append_timing(out_dir, "train", hash, started.elapsed().as_millis())?;
    Ok(record)
}

/// `unlearn --config --method --select`: derive the private split, resolve
/// the selection, produce the unlearned checkpoint (plus the removal
/// gradient for `approx`).
pub fn run_unlearn(
    cfg: &ExperimentConfig,
    hash: &str,
    out_dir: &Path,
    method: UnlearnMethod,
    selection: &UnlearnSelection,
) -> Result<ResultRecord> {
    let started = Instant::now();
    let master = resolve_seed(Some(cfg), 0)?;
    let m0_ckpt = load_checkpoint(&out_dir.join(CKPT_PRETRAINED))?;
    let m_ckpt = load_checkpoint(&out_dir.join(CKPT_ORIGINAL))?;
    if m0_ckpt.model.arch() != m_ckpt.model.arch() {
        return Err(Error::ArchMismatch);
    }
    let data = derive_data(cfg, master)?;
    let (kept, removed) = select_unlearn(&data.private_ds, selection)?;
    let removed_indices = selection.resolve(&data.private_ds)?;

    let mut metrics = json!({
        "method": method.as_str(),
        "removed_count": removed.len(),
        "kept_count": kept.len(),
        "removed_indices": removed_indices,
        "removed_labels": removed.labels(),
    });
    let m_u = match method {
        UnlearnMethod::Exact => {
            let ft =
                finetune_cfg(cfg, kept.len(), derive_seed(master, stream::EXACT_UNLEARN));
            exact_unlearn(&m0_ckpt.model, &data.private_ds, selection, &ft)?
        }
        UnlearnMethod::Approx => {
            let ft = finetune_cfg(cfg, data.private_ds.len(), 0);
            let ucfg = ApproxUnlearnConfig::from_train(&ft);
            let (m_u, grad_u) = approx_unlearn(&m_ckpt.model, &m0_ckpt.model, &removed, &ucfg)?;
            save_grad_bin(&grad_u, &out_dir.join(GRAD_FILE))?;
            metrics["grad_u_norm"] = json!(grad_u.l2_norm());
            metrics["eta"] = json!(ucfg.eta);
            metrics["batch_size"] = json!(ucfg.batch_size);
            metrics["epochs"] = json!(ucfg.epochs);
            m_u
        }
    };
    let ckpt_name = unlearned_ckpt_name(method);
    save_checkpoint(
        &Checkpoint { model: m_u.clone(), stage: StageTag::Unlearned, master_seed: master },
        &out_dir.join(&ckpt_name),
    )?;

    let on_kept = evaluate(&m_u, &kept)?;
    metrics["kept_accuracy"] = json!(on_kept.accuracy);
    if let Some(val) = derive_val(cfg, master)? {
        metrics["heldout_accuracy"] = json!(evaluate(&m_u, &val)?.accuracy);
    }

    let mut record = ResultRecord::new("unlearn", hash, master, metrics)
        .with_artifact("m_u", &out_dir.join(&ckpt_name));
    if method == UnlearnMethod::Approx {
        record = record.with_artifact("grad_u", &out_dir.join(GRAD_FILE));
    }
    append_record(out_dir, &record)?;
    append_timing(out_dir, "unlearn", hash, started.elapsed().as_millis())?;
    Ok(record)
}

/// Inputs of the feature attack stage.
pub struct FeatureAttackArgs {
    pub original: PathBuf,
    pub unlearned: PathBuf,
    /// `(dataset file, sample index)` ground truth for metrics.
    pub truth: Option<(PathBuf, usize)>,
    /// Force a known label (overrides the truth label).
    pub label: Option<usize>,
    pub config: Option<(ExperimentConfig, String)>,
    pub out_dir: Option<PathBuf>,
}

/// `attack-feature`: estimate the gradient from the checkpoint difference
/// and invert it. Recovery quality is data, not an error; only structural
/// failures (missing files, arch mismatch, zero difference) are errors.
pub fn run_attack_feature(args: &FeatureAttackArgs) -> Result<ResultRecord> {
    let started = Instant::now();
    let original = load_checkpoint(&args.original)?;
    let unlearned = load_checkpoint(&args.unlearned)?;
    if original.model.arch() != unlearned.model.arch() {
        return Err(Error::ArchMismatch);
    }
    let cfg = args.config.as_ref().map(|(c, _)| c);
    let hash = args.config.as_ref().map(|(_, h)| h.as_str()).unwrap_or("adhoc");
    let master = resolve_seed(cfg, unlearned.master_seed)?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .or_else(|| args.unlearned.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    let est = estimate_gradient(&original.model, &unlearned.model, SignConvention::ReconstructionDiff)?;
    if est.values.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroModelDifference);
    }

    let truth: Option<(Dataset, usize)> = match &args.truth {
        Some((path, index)) => Some((load_image_bin(path)?, *index)),
        None => None,
    };
    let truth_sample = truth
        .as_ref()
        .map(|(ds, index)| ds.sample(*index))
        .transpose()?;

    let fcfg = cfg.map(|c| c.attack.feature.clone()).unwrap_or_default();
    let label_mode = match (args.label, &truth_sample, fcfg.label_mode) {
        (Some(y), _, _) => LabelMode::Known(y),
        (None, Some((_, y)), FeatureLabelMode::Known) => LabelMode::Known(*y),
        (None, None, FeatureLabelMode::Known) => {
            return Err(Error::InvalidArgument(
                "known-label mode needs --label or --truth; use variable mode otherwise".into(),
            ));
        }
        (None, _, FeatureLabelMode::Variable) => LabelMode::Variable,
    };
    let mut icfg = InversionConfig::new(label_mode, fcfg.steps, derive_seed(master, stream::INVERT));
    icfg.step_size = fcfg.step_size;
    icfg.restarts = fcfg.restarts;
    icfg.batch_count = fcfg.batch_count;
    icfg.tv_weight = fcfg
        .tv_weight
        .unwrap_or_else(|| InversionConfig::default_tv_weight(original.model.arch().input_shape()));

    let truth_tensors: Vec<crate::tensor::Tensor> =
        truth_sample.iter().map(|(x, _)| x.clone()).collect();
    let result = invert(
        &original.model,
        &est,
        &icfg,
        if truth_tensors.is_empty() { None } else { Some(&truth_tensors) },
    )?;

    let record = record_recovery(&est, &result, &out_dir, hash, master, &icfg)?;
    append_record(&out_dir, &record)?;
    append_timing(&out_dir, "attack_feature", hash, started.elapsed().as_millis())?;
    Ok(record)
}

fn record_recovery(
    est: &GradientEstimate,
    result: &RecoveryResult,
    out_dir: &Path,
    hash: &str,
    master: u64,
    icfg: &InversionConfig,
) -> Result<ResultRecord> {
    let mut slot_metrics = Vec::new();
    let mut artifacts: Vec<(String, PathBuf)> = Vec::new();
    for (j, slot) in result.slots.iter().enumerate() {
        // finite-or-null PSNR for JSON
        let psnr = slot.psnr_db.filter(|p| p.is_finite());
        slot_metrics.push(json!({
            "rmse": slot.rmse,
            "psnr_db": psnr,
            "psnr_exact_match": slot.psnr_db.map(|p| p.is_infinite()),
            "matched_truth": slot.matched_truth,
        }));
        if let &[ch, _, _] = slot.features.shape() {
            if ch == 1 || ch == 3 {
                let ext = if ch == 1 { "pgm" } else { "ppm" };
                let path = out_dir.join(format!("recovered_{j}.{ext}"));
                write_image(&slot.features, &path)?;
                artifacts.push((format!("recovered_{j}"), path));
            }
        }
    }
    let recovery_json = out_dir.join("recovery.json");
    let dump = json!({
        "final_loss": result.final_loss,
        "final_cosine": result.final_cosine,
        "restart_index": result.restart_index,
        "trace": result.trace,
        "slots": result.slots.iter().map(|s| json!({
            "features": s.features.data(),
            "shape": s.features.shape(),
            "label": match &s.label {
                crate::nn::Label::Class(c) => json!({"class": c}),
                crate::nn::Label::Soft(v) => json!({"soft": v}),
            },
        })).collect::<Vec<_>>(),
    });
    std::fs::write(&recovery_json, serde_json::to_string_pretty(&dump)?)?;

    let metrics = json!({
        "estimate_norm": est.l2_norm(),
        "final_loss": result.final_loss,
        "final_cosine": result.final_cosine,
        "restart_index": result.restart_index,
        "steps": icfg.steps,
        "restarts": icfg.restarts,
        "tv_weight": icfg.tv_weight,
        "batch_count": icfg.batch_count,
        "slots": slot_metrics,
    });
    let mut record = ResultRecord::new("attack_feature", hash, master, metrics)
        .with_artifact("recovery", &recovery_json);
    for (name, path) in artifacts {
        record = record.with_artifact(&name, &path);
    }
    Ok(record)
}

/// Inputs of the label attack stage.
pub struct LabelAttackArgs {
    pub original: PathBuf,
    pub unlearned: PathBuf,
    pub probes: usize,
    pub top_k: usize,
    pub config: Option<(ExperimentConfig, String)>,
    pub out_dir: Option<PathBuf>,
}

/// `attack-label`: build (or load the cached) probing set on the original
/// model, probe the unlearned model, and emit the inferred classes plus the
/// full drop vector.
pub fn run_attack_label(args: &LabelAttackArgs) -> Result<ResultRecord> {
    let started = Instant::now();
    let original = load_checkpoint(&args.original)?;
    let unlearned = load_checkpoint(&args.unlearned)?;
    if original.model.arch() != unlearned.model.arch() {
        return Err(Error::ArchMismatch);
    }
    let cfg = args.config.as_ref().map(|(c, _)| c);
    let hash = args.config.as_ref().map(|(_, h)| h.as_str()).unwrap_or("adhoc");
    let master = resolve_seed(cfg, original.master_seed)?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .or_else(|| args.unlearned.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    let lcfg = cfg.map(|c| c.attack.label.clone()).unwrap_or_default();
    let zoo = ZooConfig {
        max_queries: lcfg.max_queries,
        step_size: lcfg.step_size,
        fd_step: lcfg.fd_step,
        coords_per_iter: lcfg.coords_per_iter,
        seed: derive_seed(master, stream::PROBES),
        threshold: lcfg.threshold,
    };

    // The probing set depends only on the original model and the zoo
    // settings, so it is cached and reused across unlearned checkpoints.
    let cache_key = {
        let mut hasher = Sha256::new();
        hasher.update(std::fs::read(&args.original)?);
        hasher.update(serde_json::to_vec(&zoo)?);
        hasher.update(args.probes.to_le_bytes());
        hex::encode(hasher.finalize())[..12].to_string()
    };
    let cache_path = out_dir.join(format!("probes_{cache_key}.json"));
    let set: ProbingSet = if cache_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&cache_path)?)?
    } else {
        let oracle = ModelOracle::new(&original.model);
        let set = build_probing_set(&oracle, args.probes, &zoo)?;
        std::fs::write(&cache_path, serde_json::to_string(&set)?)?;
        set
    };

    let deltas = probe_delta(&set, &ModelOracle::new(&unlearned.model))?;
    let inferred = infer_labels(&deltas, args.top_k)?;

    let converged: Vec<usize> =
        set.classes.iter().map(|list| list.iter().filter(|p| p.converged).count()).collect();
    let metrics = json!({
        "inferred": inferred,
        "beta": deltas.beta,
        "probes_per_class": args.probes,
        "top_k": args.top_k,
        "converged_per_class": converged,
        "probes_used": deltas.probes_used,
        "total_queries": set.total_queries(),
        "threshold": set.threshold,
    });
    let record = ResultRecord::new("attack_label", hash, master, metrics)
        .with_artifact("probing_set", &cache_path);
    append_record(&out_dir, &record)?;
    append_timing(&out_dir, "attack_label", hash, started.elapsed().as_millis())?;
    Ok(record)
}

/// Inputs of the defense stage.
pub struct DefendArgs {
    pub unlearned: PathBuf,
    pub method: DefenseMethod,
    pub param: f64,
    /// Original model (obfuscation re-applies the transformed gradient).
    pub original: Option<PathBuf>,
    /// Saved removal gradient (obfuscation input).
    pub grad: Option<PathBuf>,
    /// Validation dataset file; synthetic configs can derive one instead.
    pub val_data: Option<PathBuf>,
    /// Extra dataset file for the fine-tuning defense.
    pub extra_data: Option<PathBuf>,
    pub config: Option<(ExperimentConfig, String)>,
    pub out_dir: Option<PathBuf>,
}

/// `defend`: apply one post-processing defense and report the utility
/// ratio against the undefended unlearned model.
pub fn run_defend(args: &DefendArgs) -> Result<ResultRecord> {
    let started = Instant::now();
    let unlearned = load_checkpoint(&args.unlearned)?;
    let cfg = args.config.as_ref().map(|(c, _)| c);
    let hash = args.config.as_ref().map(|(_, h)| h.as_str()).unwrap_or("adhoc");
    let master = resolve_seed(cfg, unlearned.master_seed)?;
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.map(|c| c.output_dir.clone()))
        .or_else(|| args.unlearned.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    let defended = match args.method {
        DefenseMethod::Obfuscate => {
            let grad_path = args
                .grad
                .clone()
                .or_else(|| Some(out_dir.join(GRAD_FILE)).filter(|p| p.exists()))
                .ok_or_else(|| {
                    Error::InvalidArgument("obfuscate needs --grad (the saved removal gradient)".into())
                })?;
            let original_path = args.original.clone().ok_or_else(|| {
                Error::InvalidArgument("obfuscate needs --original (gradient is re-applied to it)".into())
            })?;
            let original = load_checkpoint(&original_path)?;
            if original.model.arch() != unlearned.model.arch() {
                return Err(Error::ArchMismatch);
            }
            let grad = load_grad_bin(&grad_path)?;
            let ocfg = ObfuscationConfig {
                clip_norm: 1.2,
                noise_sigma: args.param,
                seed: derive_seed(master, stream::DEFENSE),
            };
            let obfuscated = obfuscate_unlearn_gradient(&grad, &ocfg)?;
            original.model.add_params(&obfuscated.values)?
        }
        DefenseMethod::Prune => prune_model(&unlearned.model, args.param)?,
        DefenseMethod::Finetune => {
            let extra = match &args.extra_data {
                Some(path) => load_image_bin(path)?,
                None => {
                    let c = cfg.ok_or_else(|| {
                        Error::InvalidArgument(
                            "finetune defense needs --extra-data or --config (to synthesize extra samples)".into(),
                        )
                    })?;
                    synth_extra(c, master)?
                }
            };
            finetune_defense(&unlearned.model, &extra, args.param, 1, derive_seed(master, stream::DEFENSE))?
        }
    };

    let val = match &args.val_data {
        Some(path) => load_image_bin(path)?,
        None => {
            let c = cfg.ok_or_else(|| {
                Error::InvalidArgument(
                    "defend needs --val-data or --config (to derive a validation set)".into(),
                )
            })?;
            derive_val(c, master)?.ok_or_else(|| {
                Error::InvalidArgument(
                    "file-backed datasets need an explicit --val-data for the utility ratio".into(),
                )
            })?
        }
    };
    let report = defense::report(args.method.as_str(), args.param, &defended, &unlearned.model, &val)?;

    let ckpt_name = format!("defended_{}.uipm", args.method.as_str());
    save_checkpoint(
        &Checkpoint { model: defended, stage: StageTag::Defended, master_seed: master },
        &out_dir.join(&ckpt_name),
    )?;
    let metrics = json!({
        "defense": report.defense,
        "parameter": report.parameter,
        "defended_accuracy": report.defended_accuracy,
        "undefended_accuracy": report.undefended_accuracy,
        "utility_ratio": report.utility_ratio,
    });
    let record = ResultRecord::new("defend", hash, master, metrics)
        .with_artifact("defended", &out_dir.join(&ckpt_name));
    append_record(&out_dir, &record)?;
    append_timing(&out_dir, "defend", hash, started.elapsed().as_millis())?;
    Ok(record)
}

fn synth_extra(cfg: &ExperimentConfig, master: u64) -> Result<Dataset> {
    let n = cfg.defense.as_ref().map(|d| d.extra_n).unwrap_or(100);
    let kind = match cfg.dataset.source {
        DataSource::SynthTabular => SynthKind::TabularBlobs { dims: cfg.dataset.dims },
        DataSource::SynthImages => {
            SynthKind::PatternImages { shape: cfg.dataset.shape.expect("validated") }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "file-backed datasets need --extra-data for the fine-tuning defense".into(),
            ))
        }
    };
    synth_dataset(&kind, n.max(cfg.dataset.classes), cfg.dataset.classes, derive_seed(master, stream::EXTRA_DATA))
}

/// Retrain helper exposed for sweeps: exact unlearning against an explicit
/// kept set (used by examples and tests).
pub fn retrain_on(m0: &ModelState, kept: &Dataset, ft: &TrainConfig) -> Result<ModelState> {
    sgd_train(m0, kept, ft)
}

// re-exported so the CLI can parse selector strings uniformly
pub use crate::data::UnlearnSelection as Selection;

#[allow(unused_imports)]
use crate::unlearn::unlearn_gradient;
