//! Dice, IoU, MAE and balanced error rate on hand-made masks, and a CSV
//! report in the same layout the evaluation commands write.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use spider::eval::{metrics, MetricReport};

fn square(n: usize, lo: usize, hi: usize) -> Vec<f32> {
    (0..n * n)
        .map(|i| if (lo..hi).contains(&(i / n)) && (lo..hi).contains(&(i % n)) { 1.0 } else { 0.0 })
        .collect()
}

fn main() -> spider::Result<()> {
    let gt = square(16, 4, 12);
    let cases = [
        ("exact", gt.clone()),
        ("shifted by one", square(16, 5, 13)),
        ("too large", square(16, 2, 14)),
        ("soft 0.7 inside", gt.iter().map(|&g| 0.7 * g).collect()),
        ("empty", vec![0.0; 256]),
    ];
    let mut report = MetricReport::new(0, "example");
    println!("{:<16} {:>6} {:>6} {:>6} {:>6}", "prediction", "dice", "iou", "mae", "ber");
    for (name, pred) in &cases {
        let m = metrics(pred, &gt)?;
        println!("{name:<16} {:>6.3} {:>6.3} {:>6.3} {:>6.3}", m.dice, m.iou, m.mae, m.ber);
        report.push_metrics(name, &m, 1);
    }
    report.validate()?;
    print!("\n{}", report.to_csv());
    Ok(())
}
