//! Prompt-count and prompt-mask robustness ablations on a trained model,
//! printed as metric reports.
//!
//! ```text
//! cargo run --release --example ablations -- [checkpoint]
//! ```
//!
//! Without a checkpoint the model is trained for three epochs first. The
//! training-based ablations (joint versus separate, strategy comparison)
//! run through `spider ablate --which strategy|joint-vs-separate`.

use spider::checkpoint::Checkpoint;
use spider::experiments::{experiment_mask_robustness, experiment_prompt_count, PromptSource};
use spider::networks::{ModelConfig, ModelParams};
use spider::prompts::Distance;
use spider::synth::{make_dataset, TaskConfig, TaskId};
use spider::training::{run_training, TrainConfig};

fn main() -> spider::Result<()> {
    let datasets = TaskId::ALL
        .iter()
        .map(|&t| make_dataset(&TaskConfig::new(t), 1))
        .collect::<spider::Result<Vec<_>>>()?;
    let model: ModelParams<f32> = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p.as_ref())?.to_model()?,
        None => run_training(ModelConfig::desk(), &TrainConfig { epochs: 3, ..TrainConfig::default() }, &datasets)?.model,
    };

    let counts = experiment_prompt_count(&model, &datasets, &TaskId::ALL, &[1, 2, 4, 8], 8, &[0, 1, 2], Distance::Euclidean)?;
    println!("prompt count (mean over tasks):");
    for r in counts.rows.iter().filter(|r| r.task == "mean") {
        println!("  {:<22} {:.4}", r.metric, r.value);
    }

    let sources: Vec<_> = (0..3).map(|seed| PromptSource::Random { g: 8, seed }).collect();
    let robust = experiment_mask_robustness(&model, &datasets, &TaskId::ALL, &[3, 5, 7], &sources)?;
    println!("prompt-mask perturbations (mean over tasks):");
    for r in robust.rows.iter().filter(|r| r.task == "mean") {
        println!("  {:<22} {:.4}", r.metric, r.value);
    }
    Ok(())
}
