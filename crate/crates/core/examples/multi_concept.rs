//! One image, several concepts: filters built from BRIGHT and DARK prompts
//! segment different objects of the same two-concept scene.
//!
//! ```text
//! cargo run --release --example train -- 30 target/desk.spdr
//! cargo run --release --example multi_concept -- target/desk.spdr
//! ```
//!
//! Without a checkpoint the model is trained for three epochs first.

use spider::checkpoint::Checkpoint;
use spider::concept::build_filter;
use spider::eval::{metrics, predict};
use spider::experiments::{concept_discrimination, make_prompt, PromptSource};
use spider::networks::{ModelConfig, ModelParams};
use spider::synth::{generate_scene, make_dataset, GeneratorParams, TaskConfig, TaskId};
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

    let source = PromptSource::Random { g: 8, seed: 0 };
    let scene = generate_scene(2024, &[TaskId::Bright, TaskId::Dark], &GeneratorParams::default())?;
    let s = scene.image.shape().to_vec();
    let image = scene.image.clone().reshape([1, s[0], s[1], s[2]])?;
    for task in [TaskId::Bright, TaskId::Dark] {
        let filter = build_filter(&model, &make_prompt(&model, &datasets, task, source, None)?)?;
        let probs = predict(&model, &filter, &image)?;
        let on_own = metrics(probs.data(), scene.mask(task).expect("mask").data())?.dice;
        let other = if task == TaskId::Bright { TaskId::Dark } else { TaskId::Bright };
        let on_other = metrics(probs.data(), scene.mask(other).expect("mask").data())?.dice;
        println!("{task} filter: dice {on_own:.3} against {task}, {on_other:.3} against {other}");
    }

    let d = concept_discrimination(&model, &datasets, (TaskId::Bright, TaskId::Dark), 32, 11, source)?;
    println!(
        "over {} scenes: BRIGHT {:.3} / {:.3}, DARK {:.3} / {:.3} (own / other mask)",
        d.scenes, d.a_on_a, d.a_on_b, d.b_on_b, d.b_on_a
    );
    Ok(())
}
