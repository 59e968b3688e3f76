//! The experiment configuration document (TOML) and its validation.

use crate::data::{load_csv, minmax_normalize, synth_dataset, Dataset, SynthKind};
use crate::error::{Error, Result};
use crate::io::load_image_bin;
use crate::nn::ArchSpec;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the config master seed.
pub const SEED_ENV_VAR: &str = "UIP_SEED";

fn cfg_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config { field: field.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    SynthTabular,
    SynthImages,
    Csv,
    ImageBin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub classes: usize,
    #[serde(default)]
    pub dims: usize,
    #[serde(default)]
    pub shape: Option<[usize; 3]>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub label_column: Option<usize>,
    #[serde(default)]
    pub has_header: bool,
    /// Apply per-feature min-max normalization after loading.
    #[serde(default)]
    pub normalize: bool,
    /// Write the pretrain/private splits as UIPD files next to the
    /// checkpoints.
    #[serde(default = "default_true")]
    pub export: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub kind: ArchKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_pool() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub lr_decay: bool,
}

impl StageTrainConfig {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            weight_decay: self.weight_decay,
            lr_decay: self.lr_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMethod {
    Exact,
    Approx,
}

impl UnlearnMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            UnlearnMethod::Exact => "exact",
            UnlearnMethod::Approx => "approx",
        }
    }
}

impl std::str::FromStr for UnlearnMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(UnlearnMethod::Exact),
            "approx" => Ok(UnlearnMethod::Approx),
            other => Err(Error::InvalidArgument(format!("unknown unlearn method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnStageConfig {
    pub method: UnlearnMethod,
    pub select: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureAttackConfig {
    pub steps: usize,
    pub restarts: usize,
    pub step_size: f64,
    /// Defaults by input shape when absent: 1e-2 for images, 0 for tabular.
    pub tv_weight: Option<f64>,
    pub label_mode: FeatureLabelMode,
    pub batch_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLabelMode {
    Known,
    Variable,
}

impl Default for FeatureAttackConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            restarts: 4,
            step_size: 0.1,
            tv_weight: None,
            label_mode: FeatureLabelMode::Known,
            batch_count: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelAttackConfig {
    pub probes_per_class: usize,
    pub top_k: usize,
    pub max_queries: usize,
    pub step_size: f64,
    pub fd_step: f64,
    pub coords_per_iter: usize,
    pub threshold: f64,
}

impl Default for LabelAttackConfig {
    fn default() -> Self {
        Self {
            probes_per_class: 10,
            top_k: 1,
            max_queries: 50_000,
            step_size: 0.05,
            fd_step: 1e-4,
            coords_per_iter: 128,
            threshold: 1.0 - 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfigs {
    pub feature: FeatureAttackConfig,
    pub label: LabelAttackConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMethod {
    Obfuscate,
    Prune,
    Finetune,
}

impl DefenseMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseMethod::Obfuscate => "obfuscate",
            DefenseMethod::Prune => "prune",
            DefenseMethod::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for DefenseMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obfuscate" => Ok(DefenseMethod::Obfuscate),
            "prune" => Ok(DefenseMethod::Prune),
            "finetune" => Ok(DefenseMethod::Finetune),
            other => Err(Error::InvalidArgument(format!("unknown defense `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseStageConfig {
    pub method: DefenseMethod,
    pub param: f64,
    /// Extra-sample count for the fine-tuning defense.
    #[serde(default = "default_extra_n")]
    pub extra_n: usize,
}

fn default_extra_n() -> usize {
    100
}

/// The full experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub pretrain: StageTrainConfig,
    pub finetune: StageTrainConfig,
    #[serde(default)]
    pub unlearn: Option<UnlearnStageConfig>,
    #[serde(default)]
    pub attack: AttackConfigs,
    #[serde(default)]
    pub defense: Option<DefenseStageConfig>,
}

impl ExperimentConfig {
    /// Parse, apply the `UIP_SEED` override, and validate. Returns the
    /// config plus the SHA-256 of the raw file bytes (the config hash used
    /// to key result records).
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| {
            cfg_err("<file>", format!("cannot read `{}`: {e}", path.display()))
        })?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let text = String::from_utf8(bytes).map_err(|_| cfg_err("<file>", "config is not UTF-8"))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| cfg_err("<toml>", e.to_string()))?;
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            cfg.seed = seed
                .parse()
                .map_err(|_| cfg_err("seed", format!("{SEED_ENV_VAR}=`{seed}` is not a u64")))?;
        }
        cfg.validate()?;
        Ok((cfg, hash))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(cfg_err(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        match self.dataset.source {
            DataSource::SynthTabular => {
                if self.dataset.classes < 2 {
                    return Err(cfg_err("dataset.classes", "need at least 2 classes"));
                }
                if self.dataset.n < self.dataset.classes {
                    return Err(cfg_err("dataset.n", "need n >= classes"));
                }
                if self.dataset.dims == 0 {
                    return Err(cfg_err("dataset.dims", "tabular dims must be positive"));
                }
            }
            DataSource::SynthImages => {
                if self.dataset.classes < 2 {
                    return Err(cfg_err("dataset.classes", "need at least 2 classes"));
                }
                if self.dataset.n < self.dataset.classes {
                    return Err(cfg_err("dataset.n", "need n >= classes"));
                }
                if self.dataset.shape.is_none() {
                    return Err(cfg_err("dataset.shape", "image sources need a [ch,h,w] shape"));
                }
            }
            DataSource::Csv => {
                let path = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| cfg_err("dataset.path", "csv source needs a path"))?;
                if !path.exists() {
                    return Err(cfg_err("dataset.path", format!("`{}` does not exist", path.display())));
                }
                if self.dataset.label_column.is_none() {
                    return Err(cfg_err("dataset.label_column", "csv source needs a label column"));
                }
            }
            DataSource::ImageBin => {
                let path = self
                    .dataset
                    .path
                    .as_ref()
                    .ok_or_else(|| cfg_err("dataset.path", "image_bin source needs a path"))?;
                if !path.exists() {
                    return Err(cfg_err("dataset.path", format!("`{}` does not exist", path.display())));
                }
            }
        }
        if matches!(self.arch.kind, ArchKind::Conv) && self.arch.channels.is_empty() {
            return Err(cfg_err("arch.channels", "conv architectures need at least one block"));
        }
        for (name, stage) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(stage.learning_rate.is_finite() && stage.learning_rate >= 0.0) {
                return Err(cfg_err(&format!("{name}.learning_rate"), "must be finite and >= 0"));
            }
            if stage.batch_size == 0 {
                return Err(cfg_err(&format!("{name}.batch_size"), "must be at least 1"));
            }
        }
        if let Some(unlearn) = &self.unlearn {
            crate::data::UnlearnSelection::parse(&unlearn.select)
                .map_err(|e| cfg_err("unlearn.select", e.to_string()))?;
        }
        let feature = &self.attack.feature;
        if feature.steps == 0 || feature.restarts == 0 || feature.batch_count == 0 {
            return Err(cfg_err("attack.feature", "steps, restarts and batch_count must be >= 1"));
        }
        if let Some(tv) = feature.tv_weight {
            if tv < 0.0 {
                return Err(cfg_err("attack.feature.tv_weight", "must be >= 0"));
            }
        }
        let label = &self.attack.label;
        if label.probes_per_class == 0 {
            return Err(cfg_err("attack.label.probes_per_class", "must be at least 1"));
        }
        if label.top_k == 0 {
            return Err(cfg_err("attack.label.top_k", "must be at least 1"));
        }
        if !(label.threshold > 0.0 && label.threshold < 1.0) {
            return Err(cfg_err("attack.label.threshold", "must lie in (0, 1)"));
        }
        if let Some(defense) = &self.defense {
            match defense.method {
                DefenseMethod::Prune => {
                    if !(0.0..1.0).contains(&defense.param) {
                        return Err(cfg_err("defense.param", "prune fraction must lie in [0, 1)"));
                    }
                }
                DefenseMethod::Obfuscate | DefenseMethod::Finetune => {
                    if defense.param < 0.0 {
                        return Err(cfg_err("defense.param", "must be >= 0"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Materialize the configured dataset (before splitting).
    pub fn build_dataset(&self, seed: u64) -> Result<Dataset> {
        let ds = match self.dataset.source {
            DataSource::SynthTabular => synth_dataset(
                &SynthKind::TabularBlobs { dims: self.dataset.dims },
                self.dataset.n,
                self.dataset.classes,
                seed,
            )?,
            DataSource::SynthImages => synth_dataset(
                &SynthKind::PatternImages { shape: self.dataset.shape.expect("validated") },
                self.dataset.n,
                self.dataset.classes,
                seed,
            )?,
            DataSource::Csv => load_csv(
                self.dataset.path.as_ref().expect("validated"),
                self.dataset.label_column.expect("validated"),
                self.dataset.has_header,
            )?,
            DataSource::ImageBin => load_image_bin(self.dataset.path.as_ref().expect("validated"))?,
        };
        Ok(if self.dataset.normalize { minmax_normalize(&ds) } else { ds })
    }

    /// Build the configured architecture against a dataset's shape.
    pub fn build_arch(&self, ds: &Dataset) -> Result<ArchSpec> {
        match self.arch.kind {
            ArchKind::Mlp => {
                ArchSpec::mlp(ds.dim(), &self.arch.hidden, ds.class_count())
            }
            ArchKind::Conv => {
                let &[ch, h, w] = ds.feature_shape() else {
                    return Err(cfg_err(
                        "arch.kind",
                        format!("conv needs an image dataset, got shape {:?}", ds.feature_shape()),
                    ));
                };
                ArchSpec::conv_net(
                    [ch, h, w],
                    &self.arch.channels,
                    self.arch.kernel,
                    self.arch.pool,
                    &self.arch.hidden,
                    ds.class_count(),
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    const MINIMAL: &str = r#"
schema_version = 1
seed = 42
output_dir = "out"

[dataset]
source = "synth_tabular"
n = 100
classes = 4
dims = 8

[arch]
kind = "mlp"
hidden = [16]

[pretrain]
epochs = 5
learning_rate = 0.1
batch_size = 16

[finetune]
epochs = 1
learning_rate = 0.001
batch_size = 128
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let f = write_cfg(MINIMAL);
        let (cfg, hash) = ExperimentConfig::load(f.path()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.attack.feature.steps, 2000);
        assert_eq!(cfg.attack.label.probes_per_class, 10);
        assert_eq!(cfg.attack.label.threshold, 1.0 - 1e-3);
        assert_eq!(hash.len(), 64);

        let ds = cfg.build_dataset(1).unwrap();
        assert_eq!(ds.len(), 100);
        let arch = cfg.build_arch(&ds).unwrap();
        assert_eq!(arch.input_dim(), 8);
    }

    #[test]
    fn validation_errors_carry_field_paths() {
        let f = write_cfg(&MINIMAL.replace("classes = 4", "classes = 1"));
        match ExperimentConfig::load(f.path()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.classes"),
            other => panic!("expected config error, got {other:?}"),
        }

        let f = write_cfg(&MINIMAL.replace("batch_size = 16", "batch_size = 0"));
        match ExperimentConfig::load(f.path()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "pretrain.batch_size"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let f = write_cfg(&format!("{MINIMAL}\n[espresso]\nshots = 2\n"));
        assert!(matches!(ExperimentConfig::load(f.path()), Err(Error::Config { .. })));
    }

    #[test]
    fn missing_referenced_file_is_an_error() {
        let cfg = MINIMAL
            .replace("source = \"synth_tabular\"", "source = \"csv\"\npath = \"/no/such/file.csv\"\nlabel_column = 3")
            .replace("dims = 8", "");
        let f = write_cfg(&cfg);
        match ExperimentConfig::load(f.path()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.path"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn seed_env_override() {
        let f = write_cfg(MINIMAL);
        // Serialized via a lock-free trick: set, load, remove.
        std::env::set_var(SEED_ENV_VAR, "777");
        let (cfg, _) = ExperimentConfig::load(f.path()).unwrap();
        std::env::remove_var(SEED_ENV_VAR);
        assert_eq!(cfg.seed, 777);
    }
}
