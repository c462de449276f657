//! Picks representative prompts per task: global-average-pooled encoder
//! embeddings of the training split, K-means over them, and the sample
//! nearest each center. Compares the result with random prompts.
//!
//! ```text
//! cargo run --release --example prompt_selection -- [checkpoint]
//! ```
//!
//! Without a checkpoint the model is trained for three epochs first.

use spider::checkpoint::Checkpoint;
use spider::experiments::{dice_per_task, PromptSource};
use spider::networks::{ModelConfig, ModelParams};
use spider::prompts::{format_prompt_list, kmeans, select_representatives, Distance, EmbeddingIndex};
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

    let mut entries = Vec::new();
    for ds in &datasets {
        let index = EmbeddingIndex::build(&model, ds)?;
        let km = kmeans(&index.rows, index.dim, 8, 0, 100, 1e-6)?;
        let picks = select_representatives(&index, 8, 0, Distance::Euclidean)?;
        println!(
            "{:<8} {} embeddings of width {}; K-means distortion {:.3} after {} steps; picks {:?}",
            ds.task.name(),
            index.len(),
            index.dim,
            km.final_distortion(),
            km.distortion.len(),
            picks
        );
        entries.extend(picks.iter().map(|&i| (ds.task, i)));
    }
    println!("\nprompt list file:\n{}", format_prompt_list(&entries[..4]));

    for source in [
        PromptSource::Random { g: 1, seed: 0 },
        PromptSource::Random { g: 8, seed: 0 },
        PromptSource::Clustered { k: 8, seed: 0, distance: Distance::Euclidean },
    ] {
        let dice = dice_per_task(&model, &datasets, &TaskId::ALL, source, None)?;
        println!("{:<14} mean dice {:.3}", source.label(), dice.iter().sum::<f64>() / dice.len() as f64);
    }
    Ok(())
}
