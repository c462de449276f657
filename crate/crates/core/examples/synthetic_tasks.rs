//! Generates the four procedural tasks, prints per-task statistics and
//! writes a few scenes as PPM images with PGM masks.
//!
//! ```text
//! cargo run --release --example synthetic_tasks -- [out_dir]
//! ```

use std::path::PathBuf;

use spider::imageio::{write_pgm, write_ppm};
use spider::synth::{make_dataset, TaskConfig, TaskId};

fn main() -> spider::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/synthetic_tasks".into()));
    std::fs::create_dir_all(&out).map_err(|e| spider::Error::Io { path: out.clone(), source: e })?;
    for task in TaskId::ALL {
        let cfg = TaskConfig {
            n_train: 16,
            n_test: 8,
            ..TaskConfig::new(task)
        };
        let ds = make_dataset(&cfg, 1)?;
        let area: f64 = ds
            .test
            .iter()
            .map(|s| s.mask(task).expect("task mask").data().iter().map(|&v| v as f64).sum::<f64>() / (48.0 * 48.0))
            .sum::<f64>()
            / ds.test.len() as f64;
        let with_distractor = ds.train.iter().filter(|s| s.masks.len() > 1).count();
        println!(
            "{:<8} train {:>2} ({with_distractor} with a distractor)  test {:>2}  mean test foreground {:.1}%",
            task.name(),
            ds.train.len(),
            ds.test.len(),
            100.0 * area
        );
        for (i, s) in ds.train.iter().take(3).enumerate() {
            let image = out.join(format!("{task}_{i}.ppm"));
            write_ppm(&image, &s.image)?;
            write_pgm(&image.with_extension("pgm"), s.mask(task).expect("task mask"))?;
        }
    }
    println!("wrote sample scenes to {}", out.display());
    Ok(())
}
