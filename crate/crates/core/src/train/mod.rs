//! Training loop, metrics, and the experiment harnesses built on them.

mod audit;
mod config;
mod experiments;
mod metrics;
mod pretrain;
mod sgd;
mod trainer;

pub use config::{poly_lr, TrainConfig};
pub use metrics::{argmax_classes, Confusion, EvalResult};
pub use sgd::Sgd;
pub use trainer::{evaluate, loss_terms, predict, Head, LossTerms, LossWeights, StepLosses, Trainer, EVAL_BATCH, OS_TEACHER};
pub use pretrain::{classification_set, pretrain_backbone, PretrainConfig, PretrainReport, PRETRAIN_SEED_BASE};
pub use audit::{audit_groups, fuzz_batches, grad_audit, mutation_test, topology_claims, AuditEntry, ClaimCheck, GradAuditReport, LossTerm, MutationResult, Verdict};
pub use experiments::{
    ablation_rows, aux_probe_experiment, backbones, median, pretrained_vs_scratch, rows_round_trip, run_ablation, run_segmentation,
    AblationCell, AblationRow, AblationTable, Benchmark, Init, InitComparison, ProbeReport, ProbeRun, ProbeVariant, RunResult,
    EVAL_SEED_BASE, REFERENCE_DELTAS, REFERENCE_PRETRAINED_MIOU, REFERENCE_SCRATCH_MIOU, TRAIN_SEED_BASE,
};
