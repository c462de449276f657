//! Inference from files: prompt images and masks are written as PPM/PGM,
//! read back into a group prompt, and the resulting filter's probability
//! map for a new scene is saved as a PGM.
//!
//! ```text
//! cargo run --release --example inference -- [checkpoint] [out_dir]
//! ```
//!
//! Without a checkpoint an untrained model is used, so the map is noise;
//! pass the checkpoint written by the `train` example for a real mask.

use std::path::PathBuf;

use spider::checkpoint::Checkpoint;
use spider::concept::{build_filter, GroupPrompt};
use spider::eval::{metrics, predict};
use spider::imageio::{read_pgm, read_ppm, write_pgm, write_ppm};
use spider::networks::{ModelConfig, ModelParams};
use spider::synth::{make_dataset, TaskConfig, TaskId};
use spider::Tensor;

fn main() -> spider::Result<()> {
    let mut args = std::env::args().skip(1);
    let model: ModelParams<f32> = match args.next().filter(|a| a != "-") {
        Some(p) => Checkpoint::load(p.as_ref())?.to_model()?,
        None => ModelParams::new(ModelConfig::desk(), 0)?,
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/inference".into()));
    std::fs::create_dir_all(&out).map_err(|e| spider::Error::Io { path: out.clone(), source: e })?;

    let ds = make_dataset(&TaskConfig { n_train: 8, n_test: 1, ..TaskConfig::new(TaskId::Texture) }, 1)?;
    let mut paths = Vec::new();
    for (i, s) in ds.train.iter().take(4).enumerate() {
        let p = out.join(format!("prompt_{i}.ppm"));
        write_ppm(&p, &s.image)?;
        write_pgm(&p.with_extension("pgm"), s.mask(TaskId::Texture).expect("mask"))?;
        paths.push(p);
    }

    let images = paths.iter().map(|p| read_ppm(p)).collect::<spider::Result<Vec<_>>>()?;
    let masks = paths.iter().map(|p| read_pgm(&p.with_extension("pgm"))).collect::<spider::Result<Vec<_>>>()?;
    let prompt = GroupPrompt::new(
        "TEXTURE",
        Tensor::stack(&images.iter().collect::<Vec<_>>())?,
        Tensor::stack(&masks.iter().collect::<Vec<_>>())?,
        paths.iter().map(|p| p.display().to_string()).collect(),
    )?;
    let filter = build_filter(&model, &prompt)?;
    println!("filter from {} prompts: |W_obj| = {:.3}, b_ctx = {:.3}", prompt.len(), norm(&filter.w_obj), filter.b_ctx);

    let scene = &ds.test[0];
    let s = scene.image.shape().to_vec();
    let probs = predict(&model, &filter, &scene.image.clone().reshape([1, s[0], s[1], s[2]])?)?;
    let map = out.join("prediction.pgm");
    write_pgm(&map, &probs.clone().reshape([1, s[1], s[2]])?)?;
    let m = metrics(probs.data(), scene.mask(TaskId::Texture).expect("mask").data())?;
    println!("dice {:.3}, mae {:.3}; wrote {}", m.dice, m.mae, map.display());
    Ok(())
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}
