//! Config-driven orchestration of the cognitive-decline pipeline: synthetic
//! cohort generation, trajectory clustering, splitting, ViT pretraining,
//! embedding extraction, evaluation and reporting, with artifacts persisted
//! in a workspace directory between stages.

pub mod config;
pub mod error;
pub mod manifest;
pub mod plots;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use manifest::{RunManifest, Stage};
pub use stages::{EvaluationResults, Outcome, Pipeline};

fn run(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<()> {
    Pipeline::new(cfg.clone())?.run_stage(stage, force)
}

pub fn cmd_synth(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Synth, force)
}

pub fn cmd_cluster(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Cluster, force)
}

pub fn cmd_split(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Split, force)
}

pub fn cmd_pretrain(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Pretrain, force)
}

pub fn cmd_embed(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Embed, force)
}

pub fn cmd_evaluate(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Evaluate, force)
}

pub fn cmd_report(cfg: &PipelineConfig, force: bool) -> Result<()> {
    run(cfg, Stage::Report, force)
}

pub fn cmd_run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<(Stage, Outcome)>> {
    Pipeline::new(cfg.clone())?.run_all(force)
}
