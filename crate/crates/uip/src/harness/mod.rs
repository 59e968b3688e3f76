//! Experiment orchestration: configuration documents, seeded pipelines,
//! result records, and report aggregation.

pub mod config;
pub mod pipeline;
pub mod results;

pub use config::{
    ArchConfig, ArchKind, AttackConfigs, DataSource, DatasetConfig, DefenseMethod,
    DefenseStageConfig, ExperimentConfig, FeatureAttackConfig, FeatureLabelMode, LabelAttackConfig,
    StageTrainConfig, UnlearnMethod, UnlearnStageConfig, SEED_ENV_VAR,
};
pub use pipeline::{
    run_attack_feature, run_attack_label, run_defend, run_train, run_unlearn, DefendArgs,
    FeatureAttackArgs, LabelAttackArgs,
};
pub use results::{aggregate_report, append_record, median, ResultRecord, RESULTS_FILE, TIMINGS_FILE};
