//! Reverse-mode gradients of a small convolution and softmax pipeline,
//! checked against central differences.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use spider::{finite_diff_check, Tape, Tensor};

fn main() -> spider::Result<()> {
    // a 1×2×5×5 input, so the check perturbs all 50 coordinates
    let point = Tensor::from_fn([1, 2, 5, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
    let kernel = Tensor::from_fn([3, 2, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);

    let err = finite_diff_check(
        |tape: &mut Tape<f64>, x| {
            let k = tape.constant(&kernel);
            let y = tape.conv2d(x, k, 1, 1)?;
            let flat = tape.reshape(y, &[3, 25])?;
            let p = tape.softmax(flat, 1)?;
            let sq = tape.mul(p, p)?;
            tape.sum(sq)
        },
        &point,
        1e-5,
    )?;
    println!("conv2d -> softmax -> sum of squares: max relative error {err:.2e}");

    // the same loss, backpropagated by hand on one tape
    let mut tape = Tape::<f64>::new();
    let x = tape.input(vec![1, 2, 5, 5], point.data().to_vec(), true);
    let k = tape.constant(&kernel);
    let y = tape.conv2d(x, k, 1, 1)?;
    let loss = tape.sum(y)?;
    tape.backward(loss)?;
    let g = tape.grad(x).expect("input requires grad");
    println!("d(sum conv)/dx at the corner pixel: {:.4}", g[0]);
    Ok(())
}
