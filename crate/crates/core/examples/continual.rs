//! Continual learning: pretrain on BRIGHT and DARK, then fine-tune only the
//! decoder's final fusion layer and the prompt stream on TEXTURE and then
//! EDGE, evaluating every task after each stage.
//!
//! ```text
//! cargo run --release --example continual -- [pretrain_epochs] [finetune_epochs]
//! ```

use spider::experiments::{experiment_continual, PromptSource};
use spider::networks::ModelConfig;
use spider::synth::{make_dataset, TaskConfig, TaskId};
use spider::training::{run_training, TrainConfig};

fn main() -> spider::Result<()> {
    let mut args = std::env::args().skip(1);
    let pre_epochs: usize = args.next().map(|a| a.parse().expect("epochs")).unwrap_or(30);
    let ft_epochs: usize = args.next().map(|a| a.parse().expect("epochs")).unwrap_or(10);
    let old = vec![TaskId::Bright, TaskId::Dark];
    let new = [TaskId::Texture, TaskId::Edge];

    // held-out tasks never appear as distractors in the pretraining scenes
    let datasets = TaskId::ALL
        .iter()
        .map(|&t| {
            let distractors = if old.contains(&t) { old.clone() } else { Vec::new() };
            make_dataset(&TaskConfig { distractors, ..TaskConfig::new(t) }, 1)
        })
        .collect::<spider::Result<Vec<_>>>()?;
    let pre = TrainConfig {
        tasks: old.clone(),
        epochs: pre_epochs,
        ..TrainConfig::default()
    };
    let pretrained = run_training(ModelConfig::desk(), &pre, &datasets)?.model;
    let ft = TrainConfig {
        epochs: ft_epochs,
        lr: 1e-4,
        ..TrainConfig::default()
    };
    let sources: Vec<_> = (0..3).map(|seed| PromptSource::Random { g: 8, seed }).collect();
    let out = experiment_continual(&pretrained, &datasets, &TaskId::ALL, &new, &ft, &sources)?;

    println!("trainable fraction during fine-tuning: {:.3}%", 100.0 * out.trainable_fraction);
    println!("{:<8} {:>7} {:>7} {:>7}", "task", "stage0", "stage1", "stage2");
    for t in TaskId::ALL {
        let v: Vec<f64> = (0..=new.len())
            .map(|s| out.timeline.value(t.name(), &format!("dice@stage{s}")).unwrap_or(f64::NAN))
            .collect();
        println!("{:<8} {:>7.3} {:>7.3} {:>7.3}", t.name(), v[0], v[1], v[2]);
    }
    Ok(())
}
