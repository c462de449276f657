//! Trains the desk model jointly on all four tasks, saves a checkpoint and
//! reports test Dice per task with random 8-sample prompts.
//!
//! ```text
//! cargo run --release --example train -- [epochs] [checkpoint]
//! ```
//!
//! The full 30 epochs take a few minutes on one core.

use std::path::PathBuf;
use std::time::Instant;

use spider::checkpoint::Checkpoint;
use spider::experiments::{dice_per_task, PromptSource};
use spider::networks::ModelConfig;
use spider::synth::{make_dataset, TaskConfig, TaskId};
use spider::training::{run_training, TrainConfig};

fn main() -> spider::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse().expect("epochs")).unwrap_or(30);
    let path = PathBuf::from(args.next().unwrap_or_else(|| "target/desk.spdr".into()));

    let datasets = TaskId::ALL
        .iter()
        .map(|&t| make_dataset(&TaskConfig::new(t), 1))
        .collect::<spider::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig::desk();
    let start = Instant::now();
    let out = run_training(model_cfg, &cfg, &datasets)?;
    let (head, tail) = out.curve.head_tail_means(16);
    println!(
        "{} weights, {} logged steps in {:.0} s; mean loss {head:.3} -> {tail:.3}",
        out.model.num_weights(),
        out.curve.rows.len(),
        start.elapsed().as_secs_f64()
    );

    let dice = dice_per_task(&out.model, &datasets, &TaskId::ALL, PromptSource::Random { g: 8, seed: 0 }, None)?;
    for (t, d) in TaskId::ALL.iter().zip(dice) {
        println!("{:<8} test dice {d:.3}", t.name());
    }
    Checkpoint::from_model(&out.model).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
